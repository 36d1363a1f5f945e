//! What the search algorithms need from the world: start states and robustness.

use rand_chacha::ChaCha8Rng;

use crate::ddpm::Normalization;
use crate::error::Result;
use crate::prior::{sample_initial_state, InitialState, NoiseSequence};
use crate::sim::{run_simulation, Scenario, WorldConfig};

pub trait Environment: Sync {
    fn scenario(&self) -> Scenario;

    /// Prior variance of the observation error.
    fn gamma(&self) -> f64;

    fn sample_s0(&self, rng: &mut ChaCha8Rng) -> InitialState;

    fn robustness(&self, s0: &InitialState, eps: &NoiseSequence, behavior_seed: u64) -> Result<f64>;

    /// Network input normalization; the default leaves `s0` unscaled.
    fn normalization(&self, rho_scale: f64, rho_clip: f64) -> Normalization {
        Normalization {
            eps_scale: self.gamma().sqrt(),
            rho_scale: if rho_scale > 0.0 { rho_scale } else { 1.0 },
            rho_clip,
            s0_center: [0.0; 4],
            s0_half_range: [1.0; 4],
        }
    }
}

/// The intersection simulator for one scenario.
#[derive(Clone, Debug)]
pub struct SimEnvironment {
    pub scenario: Scenario,
    pub world: WorldConfig,
}

impl SimEnvironment {
    pub fn new(scenario: Scenario, world: WorldConfig) -> Result<Self> {
        world.validate()?;
        Ok(Self { scenario, world })
    }
}

impl Environment for SimEnvironment {
    fn scenario(&self) -> Scenario {
        self.scenario
    }

    fn gamma(&self) -> f64 {
        self.world.gamma
    }

    fn sample_s0(&self, rng: &mut ChaCha8Rng) -> InitialState {
        sample_initial_state(self.scenario, &self.world, rng)
    }

    fn robustness(&self, s0: &InitialState, eps: &NoiseSequence, behavior_seed: u64) -> Result<f64> {
        Ok(run_simulation(s0, eps, self.scenario, behavior_seed, &self.world)?.rho)
    }

    fn normalization(&self, rho_scale: f64, rho_clip: f64) -> Normalization {
        Normalization::for_scenario(self.scenario, &self.world, rho_scale, rho_clip)
    }
}
