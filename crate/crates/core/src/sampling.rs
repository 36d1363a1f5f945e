//! Drawing failure candidates from a trained generator and scoring sample
//! sets against reference failures.

use rayon::prelude::*;

use crate::cem::GaussianProposal;
use crate::ddpm::DiffusionModel;
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::io::EpisodeRecord;
use crate::metrics::{embed, FidelityReport};
use crate::mc::replay;
use crate::prior::{InitialState, NoiseSequence};
use crate::rng::{stream, stream_seed, Purpose};
use crate::sim::WorldConfig;
use crate::Scalar;

/// Chunk size for batched reverse diffusion; bounds memory, not results.
const SAMPLE_CHUNK: usize = 256;

pub enum Generator<'a, S: Scalar> {
    Diffusion(&'a DiffusionModel<S>),
    Proposal(&'a GaussianProposal),
}

/// `count` fresh episodes: sample `i` takes its initial state, noise and
/// behaviour seed from streams keyed by `(seed, scenario, i)`.
pub fn generate<S: Scalar, E: Environment + ?Sized>(
    env: &E,
    generator: &Generator<'_, S>,
    count: usize,
    rho_threshold: f64,
    seed: u64,
) -> Result<Vec<EpisodeRecord>> {
    if !(rho_threshold >= 0.0 && rho_threshold.is_finite()) {
        return Err(Error::Domain(format!("threshold must be finite and non-negative, got {rho_threshold}")));
    }
    let sc = env.scenario();
    let s0s: Vec<InitialState> = (0..count)
        .map(|i| env.sample_s0(&mut stream(seed, sc, Purpose::InitialState, i as u64)))
        .collect();
    let eps: Vec<NoiseSequence> = match generator {
        Generator::Diffusion(model) => {
            let mut out = Vec::with_capacity(count);
            for start in (0..count).step_by(SAMPLE_CHUNK) {
                let end = (start + SAMPLE_CHUNK).min(count);
                let conds: Vec<_> = s0s[start..end].iter().map(|s| (rho_threshold, *s)).collect();
                let mut rngs: Vec<_> = (start..end)
                    .map(|i| stream(seed, sc, Purpose::Diffusion, i as u64))
                    .collect();
                out.extend(model.sample_batch(&conds, &mut rngs)?);
            }
            out
        }
        Generator::Proposal(p) => {
            p.validate()?;
            (0..count)
                .map(|i| p.sample(&mut stream(seed, sc, Purpose::Proposal, i as u64)))
                .collect()
        }
    };
    let threshold = matches!(generator, Generator::Diffusion(_)).then_some(rho_threshold);
    s0s.into_par_iter()
        .zip(eps)
        .enumerate()
        .map(|(i, (s0, e))| {
            let behavior_seed = stream_seed(seed, sc, Purpose::Behavior, i as u64);
            let rho = env.robustness(&s0, &e, behavior_seed)?;
            Ok(EpisodeRecord {
                scenario: sc,
                episode_index: i as u64,
                s0: s0.to_array(),
                epsilon: e,
                behavior_seed,
                rho,
                rho_threshold: threshold,
            })
        })
        .collect()
}

/// Trajectory features of the failure records, recomputed by replay.
pub fn failure_features(records: &[EpisodeRecord], world: &WorldConfig) -> Result<Vec<Vec<f64>>> {
    records
        .par_iter()
        .filter(|r| r.is_failure())
        .map(|r| {
            let res = replay(r, world)?;
            if !res.collided {
                return Err(Error::Incompatible(format!(
                    "episode {} is recorded as a failure but does not collide on replay",
                    r.episode_index
                )));
            }
            Ok(embed(&res)?.to_vec())
        })
        .collect()
}

/// Fidelity of `generated` against the failures in `reference`.
pub fn evaluate(reference: &[EpisodeRecord], generated: &[EpisodeRecord], world: &WorldConfig, k: usize) -> Result<FidelityReport> {
    let real = failure_features(reference, world)?;
    let gen = failure_features(generated, world)?;
    let rhos: Vec<f64> = generated.iter().map(|r| r.rho).collect();
    FidelityReport::compute(&rhos, &gen, &real, k)
}
