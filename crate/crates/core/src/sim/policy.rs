//! Fixed ego policy: IDM along the planned route, yielding to the observed
//! intruder at predicted crossing points.

use serde::{Deserialize, Serialize};

use super::{idm_acceleration, Leader, Observation, Route, Scenario, Turn, Vec2, VehicleState, WorldConfig};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyParams {
    /// A route point conflicts when the intruder's predicted path passes closer than this.
    pub conflict_radius: f64,
    /// Route points are checked this far before and after the intersection box.
    pub box_margin: f64,
    /// Spacing of checked route points.
    pub route_step: f64,
    /// Longest look-ahead of the constant-velocity prediction, seconds.
    pub prediction_horizon: f64,
    /// Extra time the ego wants between clearing a point and the intruder reaching it.
    pub clearance_margin: f64,
    /// Speed floor used when estimating the ego's clearing time.
    pub min_speed: f64,
    /// Same-lane vehicles further ahead than this are ignored.
    pub leader_lookahead: f64,
    /// A lane route is a candidate destination when the observed heading is within this cosine of it.
    pub heading_cos: f64,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self {
            conflict_radius: 0.03,
            box_margin: 0.03,
            route_step: 0.005,
            prediction_horizon: 3.0,
            clearance_margin: 0.3,
            min_speed: 0.05,
            leader_lookahead: 0.6,
            heading_cos: 0.5,
        }
    }
}

impl PolicyParams {
    pub(crate) fn validate(&self, world: &WorldConfig) -> Result<()> {
        let positive = [
            self.conflict_radius,
            self.route_step,
            self.prediction_horizon,
            self.min_speed,
            self.leader_lookahead,
        ];
        if !positive.iter().all(|v| v.is_finite() && *v > 0.0)
            || !(self.box_margin >= 0.0 && self.clearance_margin >= 0.0)
            || !(self.heading_cos > -1.0 && self.heading_cos <= 1.0)
        {
            return Err(Error::Config(format!("invalid policy parameters: {self:?}")));
        }
        if self.conflict_radius >= world.lane_width {
            return Err(Error::Config(
                "conflict_radius must be below lane_width, or opposing lanes always conflict".into(),
            ));
        }
        Ok(())
    }
}

/// Where the ego believes the intruder could be heading.
enum Hypothesis {
    /// Straight-line extrapolation of the observed velocity.
    Ray,
    /// Lane following at the observed speed along a route through the box.
    Path { route: Route, s: f64, speed: f64 },
}

/// Earliest time the intruder's footprint can reach point `q`, or `None`
/// when this hypothesis never brings it within `conflict_radius` of `q`.
fn arrival(h: &Hypothesis, q: Vec2, pos: Vec2, vel: Vec2, reach: f64, p: &PolicyParams) -> Option<f64> {
    match h {
        Hypothesis::Ray => {
            let speed2 = vel.norm_sq();
            let tau = if speed2 > 0.0 {
                ((q - pos).dot(vel) / speed2).clamp(0.0, p.prediction_horizon)
            } else {
                0.0
            };
            if (pos + vel * tau - q).norm() >= p.conflict_radius {
                return None;
            }
            Some(if speed2 > 0.0 { (tau - reach / speed2.sqrt()).max(0.0) } else { 0.0 })
        }
        Hypothesis::Path { route, s, speed } => {
            let proj = route.project(q);
            if proj.lateral >= p.conflict_radius || proj.s < s - reach {
                return None;
            }
            let dist = (proj.s - s - reach).max(0.0);
            if dist == 0.0 {
                Some(0.0)
            } else if *speed > 0.0 && dist / speed <= p.prediction_horizon {
                Some(dist / speed)
            } else {
                None
            }
        }
    }
}

/// Lane routes consistent with the observed intruder position and heading.
fn hypotheses(pos: Vec2, vel: Vec2, config: &WorldConfig) -> Vec<Hypothesis> {
    let mut out = vec![Hypothesis::Ray];
    let speed = vel.norm();
    for branch in Scenario::ALL {
        for turn in Turn::ALL {
            let route = Route::new(branch, turn, config.lane_width);
            let proj = route.project(pos);
            if proj.lateral > config.lane_width / 2.0 {
                continue;
            }
            let along = vel.dot(route.tangent(proj.s));
            if along > config.policy.heading_cos * speed {
                out.push(Hypothesis::Path {
                    route,
                    s: proj.s,
                    speed: along,
                });
            }
        }
    }
    out
}

/// Ego acceleration for one observation.
///
/// Candidates are free-road IDM, IDM behind an observed same-lane leader and
/// IDM behind a stopped virtual leader placed before the first point where a
/// predicted intruder path meets the ego route ahead of the ego clearing it.
/// The intruder's destination is unknown, so every lane route matching the
/// observation is predicted alongside the constant-velocity ray. The most
/// restrictive candidate wins. A crossing is ignored once the ego is past its
/// stopping point, and traffic behind the ego in its own lane is ignored.
pub fn ego_policy(obs: &Observation, ego: &VehicleState, config: &WorldConfig) -> f64 {
    let idm = &config.ego_idm;
    let b_hard = config.b_hard_factor * idm.a_max;
    let p = &config.policy;
    let accel = |leader| idm_acceleration(ego.speed, leader, idm, b_hard).unwrap_or(-b_hard);
    let mut a = accel(None);
    if !obs.is_finite() {
        return a;
    }
    let pos = ego.position + obs.rel_position;
    let vel = ego.velocity() + obs.rel_velocity;
    let route = &ego.route;

    let proj = route.project(pos);
    let ahead = proj.s - ego.arc_progress;
    if proj.lateral <= config.lane_width / 2.0 {
        if ahead > 0.0 && ahead <= p.leader_lookahead {
            let speed = vel.dot(route.tangent(proj.s)).max(0.0);
            a = a.min(accel(Some(Leader {
                gap: ahead - config.vehicle_length,
                speed,
            })));
        }
        return a;
    }

    let reach = config.vehicle_length / 2.0 + p.conflict_radius;
    let end = route.turn_length() + p.box_margin;
    let n_points = ((end + p.box_margin) / p.route_step).floor() as usize + 1;
    for h in hypotheses(pos, vel, config) {
        for j in 0..n_points {
            let s = -p.box_margin + j as f64 * p.route_step;
            if s <= ego.arc_progress {
                continue;
            }
            let Some(enter) = arrival(&h, route.pose(s).position, pos, vel, reach, p) else {
                continue;
            };
            let gap = s - ego.arc_progress - reach;
            if gap > 0.0 {
                let ego_clear = (s - ego.arc_progress + reach) / ego.speed.max(p.min_speed);
                if enter < ego_clear + p.clearance_margin {
                    a = a.min(accel(Some(Leader { gap, speed: 0.0 })));
                }
            }
            break;
        }
    }
    a
}
