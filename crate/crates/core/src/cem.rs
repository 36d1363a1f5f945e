//! Cross-entropy-method baseline with a diagonal Gaussian proposal over
//! observation-error sequences. The proposal ignores `s0`.

use std::time::Instant;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::prior::{InitialState, NoiseSequence, NOISE_DIM};
use crate::rng::{stream2, Purpose};
use crate::sim::Scenario;
use crate::trainer::{elite_cutoff, stop_reason, StageReport, TrainerConfig, TrainingReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CemConfig {
    /// Weight of the refit in `new = w * refit + (1 - w) * previous`.
    pub smoothing: f64,
    /// Variance floor as a multiple of the prior variance.
    pub variance_floor: f64,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self {
            smoothing: 0.7,
            variance_floor: 1e-4,
        }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.smoothing > 0.0 && self.smoothing <= 1.0) {
            return Err(Error::Config(format!("smoothing must lie in (0, 1], got {}", self.smoothing)));
        }
        if !(self.variance_floor > 0.0) {
            return Err(Error::Config("variance_floor must be positive".into()));
        }
        Ok(())
    }
}

/// Diagonal Gaussian over the 92 noise entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianProposal {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl GaussianProposal {
    pub fn prior(gamma: f64) -> Self {
        Self {
            mean: vec![0.0; NOISE_DIM],
            variance: vec![gamma; NOISE_DIM],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != NOISE_DIM || self.variance.len() != NOISE_DIM {
            return Err(Error::Shape(format!("proposal needs {NOISE_DIM} means and variances")));
        }
        if self.mean.iter().any(|m| !m.is_finite()) || self.variance.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Domain("proposal needs finite means and positive variances".into()));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> NoiseSequence {
        let data = self
            .mean
            .iter()
            .zip(&self.variance)
            .map(|(m, v)| m + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        NoiseSequence::new(data).expect("finite proposal gives finite draws")
    }

    /// `weight * self + (1 - weight) * previous`, parameter-wise.
    pub fn blend(&self, previous: &GaussianProposal, weight: f64) -> GaussianProposal {
        let mix = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| weight * x + (1.0 - weight) * y).collect();
        GaussianProposal {
            mean: mix(&self.mean, &previous.mean),
            variance: mix(&self.variance, &previous.variance),
        }
    }

    pub fn mean_norm(&self) -> f64 {
        self.mean.iter().map(|m| m * m).sum::<f64>().sqrt()
    }
}

/// Per-entry mean and population variance of the samples whose robustness is
/// at or below the nearest-rank `alpha` quantile, with variances floored.
pub fn cem_fit_elite(samples: &[NoiseSequence], rhos: &[f64], alpha: f64, floor: f64) -> Result<GaussianProposal> {
    if samples.len() != rhos.len() {
        return Err(Error::Shape(format!("{} samples but {} robustness values", samples.len(), rhos.len())));
    }
    let cutoff = elite_cutoff(rhos, alpha)?;
    let elite: Vec<&NoiseSequence> = samples.iter().zip(rhos).filter(|(_, r)| **r <= cutoff).map(|(s, _)| s).collect();
    let n = elite.len() as f64;
    let mut mean = vec![0.0; NOISE_DIM];
    for e in &elite {
        for (m, x) in mean.iter_mut().zip(e.as_slice()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut variance = vec![0.0; NOISE_DIM];
    for e in &elite {
        for ((v, x), m) in variance.iter_mut().zip(e.as_slice()).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    variance.iter_mut().for_each(|v| *v = (*v / n).max(floor));
    Ok(GaussianProposal { mean, variance })
}

pub fn cem_sample<R: Rng + ?Sized>(proposal: &GaussianProposal, count: usize, rng: &mut R) -> Vec<NoiseSequence> {
    (0..count).map(|_| proposal.sample(rng)).collect()
}

/// Iterates sample / simulate / refit from the prior until the elite cutoff
/// converges under the same rule as the diffusion trainer.
pub fn cem_train<E: Environment>(
    env: &E,
    trainer: &TrainerConfig,
    cem: &CemConfig,
    master_seed: u64,
    mut on_stage: impl FnMut(&StageReport, &GaussianProposal),
) -> Result<(GaussianProposal, TrainingReport)> {
    trainer.validate()?;
    cem.validate()?;
    let sc = env.scenario();
    let floor = cem.variance_floor * env.gamma();
    let mut proposal = GaussianProposal::prior(env.gamma());
    let mut reports: Vec<StageReport> = Vec::new();
    let key = |p: Purpose, t: usize, n: usize| stream2(master_seed, sc, p, t as u64, n as u64);
    loop {
        let stage = reports.len();
        let start = Instant::now();
        let n = trainer.batch_size;
        let batch: Vec<(InitialState, NoiseSequence, u64)> = (0..n)
            .map(|i| {
                (
                    env.sample_s0(&mut key(Purpose::InitialState, stage, i)),
                    proposal.sample(&mut key(Purpose::Proposal, stage, i)),
                    key(Purpose::Behavior, stage, i).next_u64(),
                )
            })
            .collect();
        let rhos = batch
            .par_iter()
            .map(|(s0, eps, seed)| env.robustness(s0, eps, *seed))
            .collect::<Result<Vec<f64>>>()?;
        let cutoff = elite_cutoff(&rhos, trainer.alpha)?;
        let samples: Vec<NoiseSequence> = batch.into_iter().map(|(_, e, _)| e).collect();
        let refit = cem_fit_elite(&samples, &rhos, trainer.alpha, floor)?;
        proposal = refit.blend(&proposal, cem.smoothing);
        let elite = rhos.iter().filter(|r| **r <= cutoff).count();
        let mut report = StageReport::from_batch(stage, &rhos, cutoff, elite, n * (stage + 1));
        report.proposal_mean_norm = Some(proposal.mean_norm());
        report.seconds = start.elapsed().as_secs_f64();
        on_stage(&report, &proposal);
        reports.push(report);
        let cutoffs: Vec<f64> = reports.iter().map(|r| r.rho_tilde).collect();
        if stop_reason(&cutoffs, trainer.convergence_tol, trainer.max_stages).is_some() {
            break;
        }
    }
    Ok((proposal, TrainingReport::new(sc, reports, trainer)))
}

/// Proposal file contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalFile {
    pub kind: String,
    pub version: u32,
    pub config_hash: String,
    pub scenario: Scenario,
    pub proposal: GaussianProposal,
}

pub const PROPOSAL_KIND: &str = "cem-proposal";

impl ProposalFile {
    pub fn new(proposal: GaussianProposal, scenario: Scenario, config_hash: &str) -> Self {
        Self {
            kind: PROPOSAL_KIND.into(),
            version: crate::io::FORMAT_VERSION,
            config_hash: config_hash.into(),
            scenario,
            proposal,
        }
    }

    pub fn check(&self, config_hash: Option<&str>) -> Result<()> {
        let header = crate::io::FileHeader {
            kind: self.kind.clone(),
            version: self.version,
            config_hash: self.config_hash.clone(),
            scenario: self.scenario,
            meta: serde_json::Value::Null,
        };
        header.expect(PROPOSAL_KIND, config_hash)?;
        self.proposal.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(v: f64) -> NoiseSequence {
        NoiseSequence::new(vec![v; NOISE_DIM]).unwrap()
    }

    #[test]
    fn identical_samples_fit_point_mass_at_floor() {
        let s = vec![seq(1.5); 10];
        let p = cem_fit_elite(&s, &[0.3; 10], 0.1, 1e-4).unwrap();
        assert!(p.mean.iter().all(|m| *m == 1.5));
        assert!(p.variance.iter().all(|v| *v == 1e-4));
    }

    #[test]
    fn hand_built_four_sample_fit() {
        let s = vec![seq(1.0), seq(4.0), seq(2.0), seq(-3.0)];
        let rho = [0.5, 0.1, 0.9, 0.2];
        // elites at alpha 0.5: rho 0.1 and 0.2, values 4 and -3
        let p = cem_fit_elite(&s, &rho, 0.5, 1e-6).unwrap();
        assert!(p.mean.iter().all(|m| (*m - 0.5).abs() < 1e-15));
        assert!(p.variance.iter().all(|v| (*v - 12.25).abs() < 1e-12));
    }

    #[test]
    fn blend_weights_refit() {
        let a = GaussianProposal {
            mean: vec![1.0; NOISE_DIM],
            variance: vec![2.0; NOISE_DIM],
        };
        let b = GaussianProposal::prior(1.0);
        let c = a.blend(&b, 0.7);
        assert!((c.mean[0] - 0.7).abs() < 1e-15);
        assert!((c.variance[5] - 1.7).abs() < 1e-15);
    }

    #[test]
    fn sampling_is_reproducible_and_matches_moments() {
        let mut p = GaussianProposal::prior(2.0);
        p.mean[3] = 1.5;
        let draws = cem_sample(&p, 10_000, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(draws, cem_sample(&p, 10_000, &mut ChaCha8Rng::seed_from_u64(1)));
        let n = draws.len() as f64;
        let m: f64 = draws.iter().map(|d| d.as_slice()[3]).sum::<f64>() / n;
        let v: f64 = draws.iter().map(|d| (d.as_slice()[3] - m).powi(2)).sum::<f64>() / n;
        assert!((m - 1.5).abs() < 0.05 * 1.5);
        assert!((v - 2.0).abs() < 0.05 * 2.0);
    }

    #[test]
    fn proposal_file_checks_hash() {
        let f = ProposalFile::new(GaussianProposal::prior(1.0), Scenario::North, "h1");
        assert!(f.check(Some("h1")).is_ok());
        assert!(matches!(f.check(Some("h2")), Err(Error::Incompatible(_))));
    }
}
