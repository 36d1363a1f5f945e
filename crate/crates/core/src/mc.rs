//! Monte Carlo failure search under the prior noise model.
//!
//! Episode `i` draws its initial state, noise and behaviour seed from streams
//! keyed by `(master_seed, scenario, i)`, so the failure set does not depend
//! on how episodes are split across workers or checkpoints.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::io::{self, EpisodeRecord, FileHeader, KIND_MC};
use crate::prior::{sample_prior_noise, InitialState, NoiseSequence, PriorModel};
use crate::rng::{stream, stream_seed, Purpose};
use crate::sim::{run_simulation, Scenario, SimulationResult, WorldConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct McRunSpec {
    pub scenario: Scenario,
    pub episode_count: u64,
    pub master_seed: u64,
    pub output: PathBuf,
    pub checkpoint_interval: u64,
    /// 0 uses the global pool.
    pub workers: usize,
}

impl McRunSpec {
    pub fn validate(&self) -> Result<()> {
        if self.episode_count == 0 {
            return Err(Error::Config("episode count must be at least 1".into()));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::Config("checkpoint interval must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub scenario: Scenario,
    pub episodes: u64,
    pub failures: u64,
    pub failure_rate: f64,
    pub seconds: f64,
}

/// Written next to the output while a run is in progress.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Progress {
    config_hash: String,
    scenario: Scenario,
    master_seed: u64,
    episode_count: u64,
    episodes_done: u64,
}

pub fn progress_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".progress.json");
    output.with_file_name(name)
}

/// Inputs of episode `index`.
pub fn episode_inputs<E: Environment + ?Sized>(env: &E, master_seed: u64, index: u64) -> (InitialState, NoiseSequence, u64) {
    let sc = env.scenario();
    let s0 = env.sample_s0(&mut stream(master_seed, sc, Purpose::InitialState, index));
    let prior = PriorModel { gamma: env.gamma() };
    let eps = sample_prior_noise(&prior, &mut stream(master_seed, sc, Purpose::PriorNoise, index));
    (s0, eps, stream_seed(master_seed, sc, Purpose::Behavior, index))
}

pub fn run_episode<E: Environment + ?Sized>(env: &E, master_seed: u64, index: u64) -> Result<EpisodeRecord> {
    let (s0, eps, behavior_seed) = episode_inputs(env, master_seed, index);
    let rho = env.robustness(&s0, &eps, behavior_seed)?;
    Ok(EpisodeRecord {
        scenario: env.scenario(),
        episode_index: index,
        s0: s0.to_array(),
        epsilon: eps,
        behavior_seed,
        rho,
        rho_threshold: None,
    })
}

/// Failures among episodes `range`, in index order.
pub fn failures_in<E: Environment + ?Sized>(env: &E, master_seed: u64, range: std::ops::Range<u64>) -> Result<Vec<EpisodeRecord>> {
    let found: Vec<Option<EpisodeRecord>> = range
        .into_par_iter()
        .map(|i| run_episode(env, master_seed, i).map(|r| r.is_failure().then_some(r)))
        .collect::<Result<_>>()?;
    Ok(found.into_iter().flatten().collect())
}

fn header(spec: &McRunSpec, config_hash: &str, done: u64, failures: u64) -> FileHeader {
    let mut h = FileHeader::new(KIND_MC, config_hash, spec.scenario);
    h.meta = serde_json::json!({
        "master_seed": spec.master_seed,
        "episodes": done,
        "failures": failures,
    });
    h
}

/// Picks up a previous partial run of the same spec, if any.
fn load_progress(spec: &McRunSpec, config_hash: &str) -> Result<(u64, Vec<EpisodeRecord>)> {
    let pp = progress_path(&spec.output);
    if !pp.exists() {
        return Ok((0, Vec::new()));
    }
    let p: Progress = serde_json::from_str(&std::fs::read_to_string(&pp)?)
        .map_err(|e| Error::Format(format!("{}: {e}", pp.display())))?;
    let expected = Progress {
        config_hash: config_hash.into(),
        scenario: spec.scenario,
        master_seed: spec.master_seed,
        episode_count: spec.episode_count,
        episodes_done: p.episodes_done,
    };
    if p != expected {
        return Err(Error::Incompatible(format!(
            "{} belongs to a different run; remove it to start over",
            pp.display()
        )));
    }
    let (h, records) = io::read_jsonl_file::<EpisodeRecord>(&spec.output)?;
    h.expect(KIND_MC, Some(config_hash))?;
    if records.iter().any(|r| r.episode_index >= p.episodes_done) {
        return Err(Error::Format("checkpoint holds episodes past its progress mark".into()));
    }
    Ok((p.episodes_done, records))
}

/// Runs (or resumes) a search, checkpointing failures atomically every
/// `checkpoint_interval` episodes. `on_checkpoint(done, failures)` is called
/// after each one.
pub fn mc_search<E: Environment + ?Sized>(
    env: &E,
    spec: &McRunSpec,
    config_hash: &str,
    mut on_checkpoint: impl FnMut(u64, u64),
) -> Result<McSummary> {
    spec.validate()?;
    if env.scenario() != spec.scenario {
        return Err(Error::Config("environment and run spec disagree on the scenario".into()));
    }
    let start = Instant::now();
    let (mut done, mut failures) = load_progress(spec, config_hash)?;
    let pool = if spec.workers > 0 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(spec.workers)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?,
        )
    } else {
        None
    };
    let pp = progress_path(&spec.output);
    while done < spec.episode_count {
        let end = (done + spec.checkpoint_interval).min(spec.episode_count);
        let chunk = match &pool {
            Some(p) => p.install(|| failures_in(env, spec.master_seed, done..end))?,
            None => failures_in(env, spec.master_seed, done..end)?,
        };
        failures.extend(chunk);
        done = end;
        let h = header(spec, config_hash, done, failures.len() as u64);
        io::write_jsonl_file(&spec.output, &h, &failures)?;
        if done < spec.episode_count {
            let p = Progress {
                config_hash: config_hash.into(),
                scenario: spec.scenario,
                master_seed: spec.master_seed,
                episode_count: spec.episode_count,
                episodes_done: done,
            };
            io::write_atomic(&pp, |w| {
                serde_json::to_writer(&mut *w, &p)?;
                Ok(())
            })?;
        }
        on_checkpoint(done, failures.len() as u64);
    }
    if pp.exists() {
        std::fs::remove_file(&pp)?;
    }
    let n = failures.len() as u64;
    Ok(McSummary {
        scenario: spec.scenario,
        episodes: done,
        failures: n,
        failure_rate: n as f64 / done as f64,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Re-runs a recorded episode.
pub fn replay(record: &EpisodeRecord, world: &WorldConfig) -> Result<SimulationResult> {
    run_simulation(&record.initial_state(), &record.epsilon, record.scenario, record.behavior_seed, world)
}

/// Replays every record of a file, rejecting files written under another config.
pub fn replay_file(path: &Path, world: &WorldConfig, config_hash: &str) -> Result<Vec<(EpisodeRecord, SimulationResult)>> {
    let (h, records) = io::read_jsonl_file::<EpisodeRecord>(path)?;
    if h.kind != KIND_MC && h.kind != io::KIND_SAMPLES {
        return Err(Error::Format(format!("cannot replay a `{}` file", h.kind)));
    }
    h.expect(&h.kind.clone(), Some(config_hash))?;
    records
        .into_iter()
        .map(|r| {
            if r.scenario != h.scenario {
                return Err(Error::Format(format!("episode {} is not a {} record", r.episode_index, h.scenario)));
            }
            let res = replay(&r, world)?;
            Ok((r, res))
        })
        .collect()
}
