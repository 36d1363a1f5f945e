//! Lane-following routes through the intersection.
//!
//! Routes are built in a canonical frame where the vehicle enters from the
//! south heading north, then rotated onto the actual origin branch. Arc length
//! `s = 0` is the entry edge of the intersection box; approach positions have
//! negative `s`.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use super::{Scenario, Vec2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Turn {
    Left,
    Straight,
    Right,
}

impl Turn {
    pub const ALL: [Turn; 3] = [Turn::Left, Turn::Straight, Turn::Right];
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Route {
    pub origin: Scenario,
    pub turn: Turn,
    lane_width: f64,
    half_box: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub position: Vec2,
    pub heading: f64,
}

/// Closest point on a route.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub s: f64,
    pub lateral: f64,
}

fn rotate(p: Vec2, angle: f64) -> Vec2 {
    let (sn, cs) = angle.sin_cos();
    Vec2::new(p.x * cs - p.y * sn, p.x * sn + p.y * cs)
}

impl Route {
    pub fn new(origin: Scenario, turn: Turn, lane_width: f64) -> Self {
        Self {
            origin,
            turn,
            lane_width,
            half_box: lane_width,
        }
    }

    pub fn half_box(&self) -> f64 {
        self.half_box
    }

    fn radius(&self) -> f64 {
        match self.turn {
            Turn::Left => self.half_box + self.lane_width / 2.0,
            Turn::Right => self.half_box - self.lane_width / 2.0,
            Turn::Straight => f64::INFINITY,
        }
    }

    /// Arc length of the in-box portion.
    pub fn turn_length(&self) -> f64 {
        match self.turn {
            Turn::Straight => 2.0 * self.half_box,
            _ => self.radius() * FRAC_PI_2,
        }
    }

    fn local_pose(&self, s: f64) -> Pose {
        let (h, w2) = (self.half_box, self.lane_width / 2.0);
        if s <= 0.0 || self.turn == Turn::Straight {
            return Pose {
                position: Vec2::new(w2, -h + s),
                heading: FRAC_PI_2,
            };
        }
        let r = self.radius();
        let lt = self.turn_length();
        match self.turn {
            Turn::Right => {
                if s <= lt {
                    let th = PI - s / r;
                    Pose {
                        position: Vec2::new(h + r * th.cos(), -h + r * th.sin()),
                        heading: th - FRAC_PI_2,
                    }
                } else {
                    Pose {
                        position: Vec2::new(h + (s - lt), -w2),
                        heading: 0.0,
                    }
                }
            }
            Turn::Left => {
                if s <= lt {
                    let th = s / r;
                    Pose {
                        position: Vec2::new(-h + r * th.cos(), -h + r * th.sin()),
                        heading: th + FRAC_PI_2,
                    }
                } else {
                    Pose {
                        position: Vec2::new(-h - (s - lt), w2),
                        heading: PI,
                    }
                }
            }
            Turn::Straight => unreachable!(),
        }
    }

    pub fn pose(&self, s: f64) -> Pose {
        let local = self.local_pose(s);
        let a = self.origin.rotation();
        Pose {
            position: rotate(local.position, a),
            heading: local.heading + a,
        }
    }

    pub fn tangent(&self, s: f64) -> Vec2 {
        let h = self.pose(s).heading;
        Vec2::new(h.cos(), h.sin())
    }

    /// Nearest point of the route to `p` (world frame).
    pub fn project(&self, p: Vec2) -> Projection {
        let q = rotate(p, -self.origin.rotation());
        let (h, w2) = (self.half_box, self.lane_width / 2.0);
        let mut best = Projection {
            s: 0.0,
            lateral: f64::INFINITY,
        };
        let mut consider = |s: f64, lateral: f64| {
            if lateral < best.lateral {
                best = Projection { s, lateral };
            }
        };
        // approach line (x = w2), valid for s <= 0 (or all s when straight)
        let s_line = q.y + h;
        let s_clamped = if self.turn == Turn::Straight {
            s_line
        } else {
            s_line.min(0.0)
        };
        let foot = Vec2::new(w2, -h + s_clamped);
        consider(s_clamped, (q - foot).norm());
        if self.turn == Turn::Straight {
            return best;
        }
        let r = self.radius();
        let lt = self.turn_length();
        match self.turn {
            Turn::Right => {
                let c = Vec2::new(h, -h);
                let d = q - c;
                let th = d.y.atan2(d.x).clamp(FRAC_PI_2, PI);
                let s = (PI - th) * r;
                consider(s, (q - self.local_pose(s).position).norm());
                let s_out = (lt + (q.x - h)).max(lt);
                consider(s_out, (q - self.local_pose(s_out).position).norm());
            }
            Turn::Left => {
                let c = Vec2::new(-h, -h);
                let d = q - c;
                let th = d.y.atan2(d.x).clamp(0.0, FRAC_PI_2);
                let s = th * r;
                consider(s, (q - self.local_pose(s).position).norm());
                let s_out = (lt + (-h - q.x)).max(lt);
                consider(s_out, (q - self.local_pose(s_out).position).norm());
            }
            Turn::Straight => {}
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const W: f64 = 0.04;

    fn close(a: Vec2, b: Vec2) -> bool {
        (a - b).norm() < 1e-12
    }

    #[test]
    fn south_straight_runs_north_in_right_lane() {
        let r = Route::new(Scenario::South, Turn::Straight, W);
        assert!(close(r.pose(-0.3).position, Vec2::new(0.02, -0.34)));
        assert!(close(r.pose(0.5).position, Vec2::new(0.02, 0.46)));
        assert!((r.pose(0.0).heading - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn turns_are_continuous_and_end_in_outbound_lanes() {
        for origin in Scenario::ALL {
            for turn in Turn::ALL {
                let r = Route::new(origin, turn, W);
                let lt = r.turn_length();
                for &s in &[0.0, lt] {
                    let a = r.pose(s - 1e-9).position;
                    let b = r.pose(s + 1e-9).position;
                    assert!((a - b).norm() < 1e-8, "{origin:?} {turn:?} jump at {s}");
                }
            }
        }
        let right = Route::new(Scenario::South, Turn::Right, W);
        assert!(close(right.pose(right.turn_length() + 0.1).position, Vec2::new(0.14, -0.02)));
        let left = Route::new(Scenario::South, Turn::Left, W);
        assert!(close(left.pose(left.turn_length() + 0.1).position, Vec2::new(-0.14, 0.02)));
    }

    #[test]
    fn branches_are_rotations_of_south() {
        let west = Route::new(Scenario::West, Turn::Straight, W);
        assert!(close(west.pose(-0.2).position, Vec2::new(-0.24, -0.02)));
        let east = Route::new(Scenario::East, Turn::Straight, W);
        assert!(close(east.pose(-0.2).position, Vec2::new(0.24, 0.02)));
        let north = Route::new(Scenario::North, Turn::Straight, W);
        assert!(close(north.pose(-0.2).position, Vec2::new(-0.02, 0.24)));
    }

    #[test]
    fn projection_recovers_arc_length() {
        for origin in Scenario::ALL {
            for turn in Turn::ALL {
                let r = Route::new(origin, turn, W);
                for &s in &[-0.4, -0.01, 0.01, r.turn_length() * 0.5, r.turn_length() + 0.2] {
                    let p = r.project(r.pose(s).position);
                    assert!(p.lateral < 1e-9, "{origin:?} {turn:?} s={s}: {p:?}");
                    assert!((p.s - s).abs() < 1e-9, "{origin:?} {turn:?} s={s}: {p:?}");
                }
            }
        }
    }
}
