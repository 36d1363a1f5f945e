//! Failure trajectories in relative-position space as a standalone SVG.
//!
//! Coordinates are the intruder position minus the ego position. The
//! intersection layout is drawn centred on the origin for scale, with the ego
//! footprint at its approach heading (north).

use std::fmt::Write;

use crate::sim::WorldConfig;

const SIZE: f64 = 640.0;
const PAD: f64 = 24.0;

/// Blue at the first record to red at the last.
fn ramp(t: usize, n: usize) -> String {
    let u = if n > 1 { t as f64 / (n - 1) as f64 } else { 0.0 };
    let r = (40.0 + 200.0 * u).round() as u8;
    let g = (90.0 + 40.0 * (1.0 - (2.0 * u - 1.0).abs())).round() as u8;
    let b = (220.0 - 190.0 * u).round() as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

struct View {
    cx: f64,
    cy: f64,
    scale: f64,
}

impl View {
    fn x(&self, x: f64) -> f64 {
        SIZE / 2.0 + (x - self.cx) * self.scale
    }
    fn y(&self, y: f64) -> f64 {
        SIZE / 2.0 - (y - self.cy) * self.scale
    }
}

pub fn render(trajectories: &[Vec<[f64; 2]>], world: &WorldConfig) -> String {
    let w = world.lane_width;
    let (mut lo, mut hi) = ([-2.0 * w, -2.0 * w], [2.0 * w, 2.0 * w]);
    for p in trajectories.iter().flatten() {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let v = View {
        cx: (lo[0] + hi[0]) / 2.0,
        cy: (lo[1] + hi[1]) / 2.0,
        scale: (SIZE - 2.0 * PAD) / span,
    };
    let far = span * 2.0;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r##"<rect width="{SIZE}" height="{SIZE}" fill="#ffffff"/>"##);

    // roads: two crossing strips two lanes wide
    let _ = writeln!(s, r##"<g id="intersection" fill="#e4e4e4" stroke="none">"##);
    for (x0, y0, x1, y1) in [(-far, -w, far, w), (-w, -far, w, far)] {
        let (a, b) = (v.x(x0), v.y(y1));
        let _ = writeln!(
            s,
            r#"<rect x="{a:.3}" y="{b:.3}" width="{:.3}" height="{:.3}"/>"#,
            (x1 - x0) * v.scale,
            (y1 - y0) * v.scale
        );
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(
        s,
        r##"<g id="lanes" stroke="#9a9a9a" stroke-width="1" stroke-dasharray="6 4" fill="none">"##
    );
    let _ = writeln!(
        s,
        r#"<line x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}"/>"#,
        v.x(-far),
        v.y(0.0),
        v.x(far),
        v.y(0.0)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}"/>"#,
        v.x(0.0),
        v.y(-far),
        v.x(0.0),
        v.y(far)
    );
    let _ = writeln!(s, "</g>");
    let _ = writeln!(
        s,
        r##"<rect id="box" x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="none" stroke="#555555" stroke-width="1"/>"##,
        v.x(-w),
        v.y(w),
        2.0 * w * v.scale,
        2.0 * w * v.scale
    );
    let (l, h) = (world.vehicle_length, world.vehicle_width);
    let _ = writeln!(
        s,
        r##"<rect id="ego" x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="#333333" fill-opacity="0.5"/>"##,
        v.x(-h / 2.0),
        v.y(l / 2.0),
        h * v.scale,
        l * v.scale
    );

    let _ = writeln!(s, r#"<g id="trajectories" fill="none">"#);
    for traj in trajectories {
        let pts: Vec<String> = traj.iter().map(|p| format!("{:.3},{:.3}", v.x(p[0]), v.y(p[1]))).collect();
        let _ = writeln!(
            s,
            r##"<polyline points="{}" stroke="#7a7a7a" stroke-width="0.8" stroke-opacity="0.6"/>"##,
            pts.join(" ")
        );
        for (t, p) in traj.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.3}" cy="{:.3}" r="2" fill="{}" stroke="none"/>"#,
                v.x(p[0]),
                v.y(p[1]),
                ramp(t, traj.len())
            );
        }
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    s
}
