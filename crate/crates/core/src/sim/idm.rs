//! Intelligent Driver Model longitudinal control.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdmParams {
    /// Maximum acceleration.
    pub a_max: f64,
    /// Comfortable deceleration (positive).
    pub b_comfort: f64,
    /// Desired speed.
    pub v0: f64,
    /// Jam distance.
    pub s_min: f64,
    /// Desired time headway.
    pub time_headway: f64,
    /// Free-road exponent.
    pub delta: f64,
}

impl IdmParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.a_max,
            self.b_comfort,
            self.v0,
            self.s_min,
            self.time_headway,
            self.delta,
        ];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("IDM parameters must be positive: {self:?}")))
        }
    }
}

/// Leader seen by the IDM: bumper-to-bumper gap and its speed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Leader {
    pub gap: f64,
    pub speed: f64,
}

/// IDM acceleration, clamped to `[-b_hard, a_max]`.
///
/// `a = a_max [1 - (v/v0)^delta - (s*/gap)^2]` with
/// `s* = s_min + max(0, v T + v (v - v_lead) / (2 sqrt(a_max b)))`.
/// A non-positive gap means contact and yields `-b_hard`.
pub fn idm_acceleration(v: f64, leader: Option<Leader>, params: &IdmParams, b_hard: f64) -> Result<f64> {
    if !v.is_finite() || v < 0.0 {
        return Err(Error::Domain(format!("speed must be finite and non-negative, got {v}")));
    }
    if let Some(l) = leader {
        if l.gap.is_nan() || !l.speed.is_finite() {
            return Err(Error::Domain(format!("leader must be finite, got {l:?}")));
        }
    }
    let free = 1.0 - (v / params.v0).powf(params.delta);
    let interaction = match leader {
        None => 0.0,
        Some(l) if l.gap == f64::INFINITY => 0.0,
        Some(l) if l.gap <= 0.0 => return Ok(-b_hard),
        Some(l) => {
            let dv = v - l.speed;
            let dynamic = v * params.time_headway
                + v * dv / (2.0 * (params.a_max * params.b_comfort).sqrt());
            let s_star = params.s_min + dynamic.max(0.0);
            (s_star / l.gap).powi(2)
        }
    };
    Ok((params.a_max * (free - interaction)).clamp(-b_hard, params.a_max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(delta: f64) -> IdmParams {
        IdmParams {
            a_max: 1.0,
            b_comfort: 1.5,
            v0: 0.5,
            s_min: 0.01,
            time_headway: 0.3,
            delta,
        }
    }

    #[test]
    fn standstill_free_road_gives_max_acceleration() {
        assert_eq!(idm_acceleration(0.0, None, &params(4.0), 3.0).unwrap(), 1.0);
    }

    #[test]
    fn desired_speed_is_equilibrium() {
        for d in [2.0, 4.0, 7.3] {
            let a = idm_acceleration(0.5, None, &params(d), 3.0).unwrap();
            assert!(a.abs() < 1e-12);
        }
    }

    #[test]
    fn hand_evaluated_follow_case() {
        // v=0.4, v0=0.5, delta=4, s_min=0.01, T=0.3, gap=0.2, dv=0
        // s* = 0.01 + 0.12 = 0.13; a = 1 - 0.8^4 - 0.65^2 = 1 - 0.4096 - 0.4225
        let a = idm_acceleration(0.4, Some(Leader { gap: 0.2, speed: 0.4 }), &params(4.0), 3.0).unwrap();
        assert!((a - 0.1679).abs() < 1e-12, "{a}");
    }

    #[test]
    fn tiny_gap_brakes_hard_and_clamps() {
        let a = idm_acceleration(0.4, Some(Leader { gap: 1e-4, speed: 0.0 }), &params(4.0), 3.0).unwrap();
        assert_eq!(a, -3.0);
        let a = idm_acceleration(0.4, Some(Leader { gap: -0.1, speed: 0.0 }), &params(4.0), 3.0).unwrap();
        assert_eq!(a, -3.0);
    }

    #[test]
    fn non_finite_inputs_are_domain_errors() {
        assert!(idm_acceleration(f64::NAN, None, &params(4.0), 3.0).is_err());
        assert!(idm_acceleration(-0.1, None, &params(4.0), 3.0).is_err());
        let nan_leader = Some(Leader { gap: f64::NAN, speed: 0.0 });
        assert!(idm_acceleration(0.1, nan_leader, &params(4.0), 3.0).is_err());
    }

    #[test]
    fn infinite_gap_equals_free_road() {
        let p = params(4.0);
        let far = Some(Leader { gap: f64::INFINITY, speed: 0.0 });
        assert_eq!(
            idm_acceleration(0.3, far, &p, 3.0).unwrap(),
            idm_acceleration(0.3, None, &p, 3.0).unwrap()
        );
    }
}
