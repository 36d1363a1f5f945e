//! Initial-state distributions and the Gaussian prior over observation errors.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{Scenario, WorldConfig};

/// Number of observation/action cycles per simulation.
pub const NOISE_STEPS: usize = 23;
/// Channels per observation: relative x, y, vx, vy.
pub const NOISE_CHANNELS: usize = 4;
pub const NOISE_DIM: usize = NOISE_STEPS * NOISE_CHANNELS;

/// Intruder state relative to the ego at t = 0 (intruder minus ego, world frame).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialState {
    pub x0: f64,
    pub y0: f64,
    pub vx0: f64,
    pub vy0: f64,
}

impl InitialState {
    pub fn to_array(self) -> [f64; 4] {
        [self.x0, self.y0, self.vx0, self.vy0]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            x0: a[0],
            y0: a[1],
            vx0: a[2],
            vy0: a[3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Absolute start of an episode: distances to the intersection box and speeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldStart {
    pub ego_distance: f64,
    pub ego_speed: f64,
    pub intruder_distance: f64,
    pub intruder_speed: f64,
}

/// Observation-error sequence, 23 steps x 4 channels, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct NoiseSequence {
    data: Vec<f64>,
}

impl NoiseSequence {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.len() != NOISE_DIM {
            return Err(Error::Shape(format!(
                "noise sequence needs {NOISE_STEPS}x{NOISE_CHANNELS} = {NOISE_DIM} values, got {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("noise sequence entry {bad} is not finite")));
        }
        Ok(Self { data })
    }

    pub fn zeros() -> Self {
        Self {
            data: vec![0.0; NOISE_DIM],
        }
    }

    pub fn step(&self, t: usize) -> [f64; 4] {
        let r = &self.data[t * NOISE_CHANNELS..(t + 1) * NOISE_CHANNELS];
        [r[0], r[1], r[2], r[3]]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

impl TryFrom<Vec<f64>> for NoiseSequence {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<NoiseSequence> for Vec<f64> {
    fn from(n: NoiseSequence) -> Vec<f64> {
        n.data
    }
}

/// Isotropic Gaussian prior `N(0, gamma I)` over noise sequences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorModel {
    pub gamma: f64,
}

impl PriorModel {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::Config(format!("prior variance must be positive, got {gamma}")));
        }
        Ok(Self { gamma })
    }
}

pub fn sample_prior_noise<R: Rng + ?Sized>(prior: &PriorModel, rng: &mut R) -> NoiseSequence {
    let sd = prior.gamma.sqrt();
    let data = (0..NOISE_DIM)
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    NoiseSequence { data }
}

/// Exact log density of `N(0, gamma I)` over all 92 dimensions.
pub fn prior_log_density(eps: &NoiseSequence, prior: &PriorModel) -> f64 {
    let g = prior.gamma;
    let sq: f64 = eps.data.iter().map(|x| x * x).sum();
    -0.5 * NOISE_DIM as f64 * (2.0 * std::f64::consts::PI * g).ln() - sq / (2.0 * g)
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..=range[1])
    } else {
        range[0]
    }
}

/// Draws an absolute start. For the same-branch scenario, starts closer than
/// `min_initial_gap` (centre to centre) are rejected.
pub fn sample_start<R: Rng + ?Sized>(scenario: Scenario, config: &WorldConfig, rng: &mut R) -> WorldStart {
    loop {
        let start = WorldStart {
            ego_distance: uniform(rng, config.ego_distance),
            ego_speed: uniform(rng, config.ego_speed),
            intruder_distance: uniform(rng, config.intruder_distance),
            intruder_speed: uniform(rng, config.intruder_speed),
        };
        if scenario != Scenario::South
            || (start.ego_distance - start.intruder_distance).abs() >= config.min_initial_gap
        {
            return start;
        }
    }
}

/// Relative initial state of an absolute start.
pub fn relative_state(scenario: Scenario, start: &WorldStart, config: &WorldConfig) -> InitialState {
    let (ego, intruder) = crate::sim::start_poses(scenario, start, config);
    let dp = intruder.0 - ego.0;
    let dv = intruder.1 - ego.1;
    InitialState {
        x0: dp.x,
        y0: dp.y,
        vx0: dv.x,
        vy0: dv.y,
    }
}

pub fn sample_initial_state<R: Rng + ?Sized>(scenario: Scenario, config: &WorldConfig, rng: &mut R) -> InitialState {
    relative_state(scenario, &sample_start(scenario, config, rng), config)
}

const FEASIBILITY_TOL: f64 = 1e-9;

/// Intersects `[lo, hi]` with `range`, tolerating round-off.
fn feasible(lo: f64, hi: f64, range: [f64; 2], what: &str) -> Result<(f64, f64)> {
    let a = lo.max(range[0]);
    let b = hi.min(range[1]);
    if a > b + FEASIBILITY_TOL {
        return Err(Error::Domain(format!(
            "initial state is inconsistent with the scenario ({what}: [{lo}, {hi}] vs {range:?})"
        )));
    }
    Ok((a.min(b), b.max(a)))
}

fn in_range(v: f64, range: [f64; 2], what: &str) -> Result<f64> {
    feasible(v, v, range, what).map(|(a, _)| a)
}

/// Recovers an absolute start consistent with a relative state.
///
/// Cross-traffic scenarios determine the start uniquely. For the south
/// (same lane) and north (opposing lane) scenarios only sums or differences
/// of distances and speeds are observable; the unobserved component is drawn
/// uniformly from its feasible interval, which is its exact conditional law
/// under the product-uniform start distribution.
pub fn resolve_start<R: Rng + ?Sized>(
    s0: &InitialState,
    scenario: Scenario,
    config: &WorldConfig,
    rng: &mut R,
) -> Result<WorldStart> {
    if !s0.is_finite() {
        return Err(Error::Domain("initial state is not finite".into()));
    }
    let h = config.lane_width;
    let w2 = config.lane_width / 2.0;
    let (ed, es, id, is) = (
        config.ego_distance,
        config.ego_speed,
        config.intruder_distance,
        config.intruder_speed,
    );
    let pick = |rng: &mut R, (a, b): (f64, f64)| if b > a { rng.random_range(a..=b) } else { a };
    let start = match scenario {
        Scenario::East => WorldStart {
            intruder_distance: in_range(s0.x0 - h + w2, id, "intruder distance")?,
            ego_distance: in_range(s0.y0 - w2 - h, ed, "ego distance")?,
            intruder_speed: in_range(-s0.vx0, is, "intruder speed")?,
            ego_speed: in_range(-s0.vy0, es, "ego speed")?,
        },
        Scenario::West => WorldStart {
            intruder_distance: in_range(-s0.x0 - h - w2, id, "intruder distance")?,
            ego_distance: in_range(s0.y0 + w2 - h, ed, "ego distance")?,
            intruder_speed: in_range(s0.vx0, is, "intruder speed")?,
            ego_speed: in_range(-s0.vy0, es, "ego speed")?,
        },
        Scenario::South => {
            // y0 = d_e - d_i, vy0 = v_i - v_e
            let d = feasible(s0.y0 + id[0], s0.y0 + id[1], ed, "ego distance")?;
            let ego_distance = pick(rng, d);
            let v = feasible(is[0] - s0.vy0, is[1] - s0.vy0, es, "ego speed")?;
            let ego_speed = pick(rng, v);
            WorldStart {
                ego_distance,
                ego_speed,
                intruder_distance: ego_distance - s0.y0,
                intruder_speed: ego_speed + s0.vy0,
            }
        }
        Scenario::North => {
            // y0 = 2h + d_e + d_i, vy0 = -(v_i + v_e)
            let total = s0.y0 - 2.0 * h;
            let d = feasible(total - id[1], total - id[0], ed, "ego distance")?;
            let ego_distance = pick(rng, d);
            let vsum = -s0.vy0;
            let v = feasible(vsum - is[1], vsum - is[0], es, "ego speed")?;
            let ego_speed = pick(rng, v);
            WorldStart {
                ego_distance,
                ego_speed,
                intruder_distance: total - ego_distance,
                intruder_speed: vsum - ego_speed,
            }
        }
    };
    Ok(start)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn noise_shape_is_enforced() {
        assert!(NoiseSequence::new(vec![0.0; 91]).is_err());
        assert!(NoiseSequence::new(vec![f64::NAN; 92]).is_err());
        assert!(NoiseSequence::new(vec![0.0; 92]).is_ok());
    }

    #[test]
    fn log_density_at_mode() {
        let p = PriorModel::new(1.0 / 0.15).unwrap();
        let expected = -(92.0 / 2.0) * (2.0 * std::f64::consts::PI * p.gamma).ln();
        assert!((prior_log_density(&NoiseSequence::zeros(), &p) - expected).abs() < 1e-9);
    }

    #[test]
    fn log_density_is_sum_of_marginals() {
        let p = PriorModel::new(2.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = sample_prior_noise(&p, &mut rng);
        let marginal: f64 = e
            .as_slice()
            .iter()
            .map(|x| -0.5 * (2.0 * std::f64::consts::PI * p.gamma).ln() - x * x / (2.0 * p.gamma))
            .sum();
        assert!((prior_log_density(&e, &p) - marginal).abs() < 1e-9);
    }

    #[test]
    fn resolve_recovers_cross_traffic_start_exactly() {
        let cfg = WorldConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for sc in [Scenario::East, Scenario::West] {
            let start = sample_start(sc, &cfg, &mut rng);
            let s0 = relative_state(sc, &start, &cfg);
            let back = resolve_start(&s0, sc, &cfg, &mut rng).unwrap();
            for (a, b) in [
                (back.ego_distance, start.ego_distance),
                (back.ego_speed, start.ego_speed),
                (back.intruder_distance, start.intruder_distance),
                (back.intruder_speed, start.intruder_speed),
            ] {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resolved_starts_reproduce_relative_state() {
        let cfg = WorldConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for sc in Scenario::ALL {
            for _ in 0..200 {
                let s0 = sample_initial_state(sc, &cfg, &mut rng);
                let start = resolve_start(&s0, sc, &cfg, &mut rng).unwrap();
                let again = relative_state(sc, &start, &cfg);
                for (a, b) in s0.to_array().iter().zip(again.to_array()) {
                    assert!((a - b).abs() < 1e-9, "{sc:?}: {s0:?} vs {again:?}");
                }
                assert!(start.ego_distance >= cfg.ego_distance[0] - 1e-9);
                assert!(start.intruder_speed <= cfg.intruder_speed[1] + 1e-9);
            }
        }
    }

    #[test]
    fn resolve_rejects_infeasible_state() {
        let cfg = WorldConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s0 = InitialState {
            x0: 5.0,
            y0: 0.5,
            vx0: -0.4,
            vy0: -0.4,
        };
        assert!(resolve_start(&s0, Scenario::East, &cfg, &mut rng).is_err());
    }
}
