//! Planar vectors and oriented-rectangle distances.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_angle(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(c, s)
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Rectangle centred at `center`, long side along `heading`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedRect {
    pub center: Vec2,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedRect {
    pub fn corners(&self) -> [Vec2; 4] {
        let f = Vec2::from_angle(self.heading) * (self.length / 2.0);
        let l = Vec2::from_angle(self.heading).perp() * (self.width / 2.0);
        let c = self.center;
        [c + f + l, c - f + l, c - f - l, c + f - l]
    }

    fn axes(&self) -> [Vec2; 2] {
        let f = Vec2::from_angle(self.heading);
        [f, f.perp()]
    }
}

fn project(corners: &[Vec2; 4], axis: Vec2) -> (f64, f64) {
    corners.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
        let p = c.dot(axis);
        (lo.min(p), hi.max(p))
    })
}

/// Separating-axis test; touching rectangles count as overlapping.
pub fn rects_overlap(a: &OrientedRect, b: &OrientedRect) -> bool {
    let (ca, cb) = (a.corners(), b.corners());
    for axis in a.axes().into_iter().chain(b.axes()) {
        let (alo, ahi) = project(&ca, axis);
        let (blo, bhi) = project(&cb, axis);
        if ahi < blo || bhi < alo {
            return false;
        }
    }
    true
}

fn point_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_sq();
    let t = if len2 > 0.0 {
        ((p - a).dot(ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p - (a + ab * t)).norm()
}

/// Euclidean distance between two oriented rectangles; exactly 0 when they
/// overlap or touch.
pub fn rect_distance(a: &OrientedRect, b: &OrientedRect) -> f64 {
    if rects_overlap(a, b) {
        return 0.0;
    }
    let (ca, cb) = (a.corners(), b.corners());
    let mut best = f64::INFINITY;
    for i in 0..4 {
        let (a0, a1) = (ca[i], ca[(i + 1) % 4]);
        let (b0, b1) = (cb[i], cb[(i + 1) % 4]);
        for &p in &cb {
            best = best.min(point_segment_distance(p, a0, a1));
        }
        for &p in &ca {
            best = best.min(point_segment_distance(p, b0, b1));
        }
    }
    best
}
