//! Multi-stage self-improvement training of the failure generator.
//!
//! Stage 0 simulates prior noise, sets the elite cutoff and trains on the
//! whole batch. Every later stage samples thresholds below the cutoff, asks
//! the model for noise, simulates, resets the cutoff from the new batch and
//! trains on the running dataset's records at or below the cutoff.

use std::path::{Path, PathBuf};
use std::time::Instant;

use failgen_neural::{AdamWConfig, AdamWState, Checkpoint, Scalar};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ddpm::{DiffusionConfig, DiffusionModel, TrainingExample};
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::io::{self, FileHeader, KIND_DATASET, KIND_REPORT};
use crate::prior::{sample_prior_noise, InitialState, NoiseSequence, PriorModel};
use crate::rng::{stream, stream2, stream_seed, Purpose};
use crate::sim::Scenario;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    /// Elite quantile.
    pub alpha: f64,
    /// Simulations per stage.
    pub batch_size: usize,
    /// Stage cap, counting the bootstrap stage.
    pub max_stages: usize,
    pub convergence_tol: f64,
    pub epochs_per_stage: usize,
    /// Optimizer minibatch size.
    pub train_batch_size: usize,
    pub optimizer: AdamWConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            batch_size: 256,
            max_stages: 40,
            convergence_tol: 1e-3,
            epochs_per_stage: 50,
            train_batch_size: 256,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.batch_size == 0 || self.max_stages == 0 || self.train_batch_size == 0 {
            return Err(Error::Config("batch sizes and max_stages must be positive".into()));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(Error::Config("convergence_tol must be non-negative".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Nearest-rank quantile: the `ceil(alpha * n)`-th smallest value.
pub fn elite_cutoff(values: &[f64], alpha: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("robustness values".into()));
    }
    if let Some(v) = values.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Domain(format!("robustness must be non-negative, got {v}")));
    }
    let rank = elite_rank(values.len(), alpha);
    let mut sorted = values.to_vec();
    let (_, kth, _) = sorted.select_nth_unstable_by(rank - 1, f64::total_cmp);
    Ok(*kth)
}

/// `ceil(alpha * n)`, clamped to `1..=n`.
pub fn elite_rank(n: usize, alpha: f64) -> usize {
    let raw = alpha * n as f64;
    // absorb representation error such as 0.1 * 30 = 3.0000000000000004
    let r = (raw - raw.abs() * 1e-12).ceil() as usize;
    r.clamp(1, n)
}

/// Three consecutive cutoff changes within `tol`. The comparison allows a
/// relative slack of 1e-9 so that changes equal to `tol` up to rounding count.
fn three_small_steps(history: &[f64], tol: f64) -> bool {
    history.len() >= 4
        && history[history.len() - 4..]
            .windows(2)
            .all(|w| (w[1] - w[0]).abs() <= tol * (1.0 + 1e-9))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ZeroCutoff,
    Plateau,
    MaxStages,
}

pub fn stop_reason(history: &[f64], tol: f64, max_stages: usize) -> Option<StopReason> {
    match history.last() {
        None => None,
        Some(&last) if last == 0.0 => Some(StopReason::ZeroCutoff),
        Some(_) if three_small_steps(history, tol) => Some(StopReason::Plateau),
        Some(_) if history.len() >= max_stages => Some(StopReason::MaxStages),
        Some(_) => None,
    }
}

pub fn has_converged(history: &[f64], tol: f64, max_stages: usize) -> bool {
    stop_reason(history, tol, max_stages).is_some()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EliteRecord {
    pub stage: usize,
    pub eps: NoiseSequence,
    pub rho: f64,
    pub s0: [f64; 4],
    pub behavior_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_threshold: Option<f64>,
}

/// Append-only running dataset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EliteDataset {
    records: Vec<EliteRecord>,
}

impl EliteDataset {
    pub fn records(&self) -> &[EliteRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn extend(&mut self, batch: Vec<EliteRecord>) -> Result<()> {
        if let Some(r) = batch.iter().find(|r| !(r.rho >= 0.0)) {
            return Err(Error::Domain(format!("robustness must be non-negative, got {}", r.rho)));
        }
        self.records.extend(batch);
        Ok(())
    }

    /// Indices of records with `rho <= cutoff`; when there are none, the
    /// `ceil(alpha n)` lowest-robustness records of the whole dataset.
    pub fn elite_indices(&self, cutoff: f64, alpha: f64) -> Vec<usize> {
        let hits: Vec<usize> = (0..self.records.len()).filter(|&i| self.records[i].rho <= cutoff).collect();
        if !hits.is_empty() || self.records.is_empty() {
            return hits;
        }
        let mut order: Vec<usize> = (0..self.records.len()).collect();
        order.sort_by(|&a, &b| self.records[a].rho.total_cmp(&self.records[b].rho).then(a.cmp(&b)));
        order.truncate(elite_rank(self.records.len(), alpha));
        order.sort_unstable();
        order
    }

    fn example(&self, i: usize) -> TrainingExample {
        let r = &self.records[i];
        TrainingExample {
            eps: r.eps.clone(),
            rho: r.rho,
            s0: InitialState::from_array(r.s0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageReport {
    pub stage: usize,
    pub rho_tilde: f64,
    pub batch_failure_rate: f64,
    pub batch_min_rho: f64,
    pub batch_mean_rho: f64,
    pub elite_count: usize,
    pub dataset_size: usize,
    pub train_steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_first_epoch: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_last_epoch: Option<f64>,
    /// Euclidean norm of the refitted proposal mean (cross-entropy baseline only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposal_mean_norm: Option<f64>,
    pub seconds: f64,
}

impl StageReport {
    /// Batch statistics common to every search method.
    pub fn from_batch(stage: usize, rhos: &[f64], cutoff: f64, elite_count: usize, dataset_size: usize) -> Self {
        let n = rhos.len() as f64;
        Self {
            stage,
            rho_tilde: cutoff,
            batch_failure_rate: rhos.iter().filter(|r| **r == 0.0).count() as f64 / n,
            batch_min_rho: rhos.iter().copied().fold(f64::INFINITY, f64::min),
            batch_mean_rho: rhos.iter().sum::<f64>() / n,
            elite_count,
            dataset_size,
            train_steps: 0,
            loss_first_epoch: None,
            loss_last_epoch: None,
            proposal_mean_norm: None,
            seconds: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub scenario: Scenario,
    pub stages: Vec<StageReport>,
    pub converged: bool,
    pub stop_reason: Option<StopReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl TrainingReport {
    pub fn new(scenario: Scenario, stages: Vec<StageReport>, config: &TrainerConfig) -> Self {
        let cutoffs: Vec<f64> = stages.iter().map(|s| s.rho_tilde).collect();
        let reason = stop_reason(&cutoffs, config.convergence_tol, config.max_stages);
        let converged = matches!(reason, Some(StopReason::ZeroCutoff | StopReason::Plateau));
        Self {
            scenario,
            stages,
            converged,
            stop_reason: reason,
            warning: (!converged).then(|| {
                format!(
                    "elite cutoff did not converge within {} stages; the last artifact is still usable",
                    config.max_stages
                )
            }),
        }
    }

    pub fn cutoffs(&self) -> Vec<f64> {
        self.stages.iter().map(|s| s.rho_tilde).collect()
    }
}

/// Where stage artifacts go.
#[derive(Clone, Debug)]
pub struct Persistence {
    pub out_dir: PathBuf,
    pub config_hash: String,
}

impl Persistence {
    pub fn checkpoint_path(&self, scenario: Scenario, stage: usize) -> PathBuf {
        self.out_dir.join(format!("{scenario}-stage{stage}.ckpt"))
    }

    pub fn dataset_path(&self, scenario: Scenario) -> PathBuf {
        self.out_dir.join(format!("{scenario}-dataset.jsonl"))
    }

    pub fn report_path(&self, scenario: Scenario) -> PathBuf {
        self.out_dir.join(format!("{scenario}-report.jsonl"))
    }

    /// Highest stage with a checkpoint in the output directory.
    pub fn latest_stage(&self, scenario: Scenario) -> Option<usize> {
        let prefix = format!("{scenario}-stage");
        std::fs::read_dir(&self.out_dir)
            .ok()?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_prefix(&prefix)?.strip_suffix(".ckpt")?.parse::<usize>().ok()
            })
            .max()
    }
}

/// Trainer progress stored in stage checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct ResumeState {
    stage: usize,
    optimizer_step: u64,
    optimizer: AdamWConfig,
    master_seed: u64,
    trainer: TrainerConfig,
    reports: Vec<StageReport>,
}

pub struct EliteTrainer<'a, S: Scalar, E: Environment> {
    env: &'a E,
    pub config: TrainerConfig,
    pub diffusion: DiffusionConfig,
    pub master_seed: u64,
    pub model: Option<DiffusionModel<S>>,
    optimizer: Option<AdamWState<S>>,
    pub dataset: EliteDataset,
    pub reports: Vec<StageReport>,
    persistence: Option<Persistence>,
}

struct Batch {
    records: Vec<EliteRecord>,
}

impl<'a, S: Scalar, E: Environment> EliteTrainer<'a, S, E> {
    pub fn new(env: &'a E, config: TrainerConfig, diffusion: DiffusionConfig, master_seed: u64) -> Result<Self> {
        config.validate()?;
        diffusion.validate()?;
        Ok(Self {
            env,
            config,
            diffusion,
            master_seed,
            model: None,
            optimizer: None,
            dataset: EliteDataset::default(),
            reports: Vec::new(),
            persistence: None,
        })
    }

    pub fn with_persistence(mut self, p: Persistence) -> Self {
        self.persistence = Some(p);
        self
    }

    pub fn cutoffs(&self) -> Vec<f64> {
        self.reports.iter().map(|r| r.rho_tilde).collect()
    }

    pub fn dataset(&self) -> &EliteDataset {
        &self.dataset
    }

    pub fn next_stage(&self) -> usize {
        self.reports.len()
    }

    fn scenario(&self) -> Scenario {
        self.env.scenario()
    }

    fn key(&self, purpose: Purpose, stage: usize, n: usize) -> rand_chacha::ChaCha8Rng {
        stream2(self.master_seed, self.scenario(), purpose, stage as u64, n as u64)
    }

    fn simulate(&self, stage: usize, items: Vec<(InitialState, NoiseSequence, Option<f64>)>) -> Result<Batch> {
        let env = self.env;
        let records = items
            .into_par_iter()
            .enumerate()
            .map(|(n, (s0, eps, threshold))| {
                let behavior_seed = self.key(Purpose::Behavior, stage, n).next_u64();
                let rho = env.robustness(&s0, &eps, behavior_seed)?;
                Ok(EliteRecord {
                    stage,
                    eps,
                    rho,
                    s0: s0.to_array(),
                    behavior_seed,
                    rho_threshold: threshold,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch { records })
    }

    /// Stage 0: prior noise, cutoff, model creation and training on everything.
    pub fn bootstrap_stage(&mut self) -> Result<&StageReport> {
        if !self.reports.is_empty() {
            return Err(Error::Config("bootstrap stage already ran".into()));
        }
        let start = Instant::now();
        let prior = PriorModel::new(self.env.gamma())?;
        let items: Vec<_> = (0..self.config.batch_size)
            .map(|n| {
                let s0 = self.env.sample_s0(&mut self.key(Purpose::InitialState, 0, n));
                let eps = sample_prior_noise(&prior, &mut self.key(Purpose::PriorNoise, 0, n));
                (s0, eps, None)
            })
            .collect();
        let batch = self.simulate(0, items)?;
        let rhos: Vec<f64> = batch.records.iter().map(|r| r.rho).collect();
        let cutoff = elite_cutoff(&rhos, self.config.alpha)?;
        let norm = self.env.normalization(cutoff, self.diffusion.rho_clip);
        let net_seed = stream_seed(self.master_seed, self.scenario(), Purpose::NetInit, 0);
        let model = DiffusionModel::<S>::new(self.diffusion.clone(), norm, net_seed)?;
        self.optimizer = Some(AdamWState::new(self.config.optimizer, model.net.params()));
        self.model = Some(model);
        self.dataset.extend(batch.records)?;
        let all: Vec<usize> = (0..self.dataset.len()).collect();
        self.finish_stage(0, &rhos, cutoff, all, start)
    }

    /// One improvement stage.
    pub fn improvement_stage(&mut self) -> Result<&StageReport> {
        let stage = self.next_stage();
        if stage == 0 {
            return Err(Error::Config("run the bootstrap stage first".into()));
        }
        let start = Instant::now();
        let cutoff = *self.cutoffs().last().expect("bootstrap ran");
        let model = self.model.as_ref().expect("bootstrap ran");
        let n = self.config.batch_size;
        let s0s: Vec<InitialState> = (0..n)
            .map(|i| self.env.sample_s0(&mut self.key(Purpose::InitialState, stage, i)))
            .collect();
        let thresholds: Vec<f64> = (0..n)
            .map(|i| {
                if cutoff > 0.0 {
                    self.key(Purpose::Threshold, stage, i).random_range(0.0..=cutoff)
                } else {
                    0.0
                }
            })
            .collect();
        let conds: Vec<(f64, InitialState)> = thresholds.iter().copied().zip(s0s.iter().copied()).collect();
        let mut rngs: Vec<_> = (0..n).map(|i| self.key(Purpose::Diffusion, stage, i)).collect();
        let eps = model.sample_batch(&conds, &mut rngs)?;
        let items = s0s
            .into_iter()
            .zip(eps)
            .zip(thresholds)
            .map(|((s0, e), t)| (s0, e, Some(t)))
            .collect();
        let batch = self.simulate(stage, items)?;
        let rhos: Vec<f64> = batch.records.iter().map(|r| r.rho).collect();
        let new_cutoff = elite_cutoff(&rhos, self.config.alpha)?;
        self.dataset.extend(batch.records)?;
        let elite = self.dataset.elite_indices(new_cutoff, self.config.alpha);
        self.finish_stage(stage, &rhos, new_cutoff, elite, start)
    }

    fn finish_stage(
        &mut self,
        stage: usize,
        rhos: &[f64],
        cutoff: f64,
        train_on: Vec<usize>,
        start: Instant,
    ) -> Result<&StageReport> {
        let (steps, first, last) = self.train(stage, &train_on)?;
        let mut report = StageReport::from_batch(stage, rhos, cutoff, train_on.len(), self.dataset.len());
        report.train_steps = steps;
        report.loss_first_epoch = first;
        report.loss_last_epoch = last;
        report.seconds = start.elapsed().as_secs_f64();
        self.reports.push(report);
        self.persist(stage)?;
        Ok(self.reports.last().expect("just pushed"))
    }

    /// `epochs_per_stage` shuffled passes over `indices`. Returns the step
    /// count and the mean loss of the first and last epochs.
    fn train(&mut self, stage: usize, indices: &[usize]) -> Result<(usize, Option<f64>, Option<f64>)> {
        let model = self.model.as_mut().expect("model exists");
        let opt = self.optimizer.as_mut().expect("optimizer exists");
        let mut shuffle = stream(self.master_seed, self.env.scenario(), Purpose::Shuffle, stage as u64);
        let mut draws = stream(self.master_seed, self.env.scenario(), Purpose::Training, stage as u64);
        let mut order = indices.to_vec();
        let (mut steps, mut first, mut last) = (0, None, None);
        for epoch in 0..self.config.epochs_per_stage {
            order.shuffle(&mut shuffle);
            let (mut sum, mut count) = (0.0, 0usize);
            for chunk in order.chunks(self.config.train_batch_size) {
                let batch: Vec<TrainingExample> = chunk.iter().map(|&i| self.dataset.example(i)).collect();
                let (loss, grads) = model.training_loss(&batch, &mut draws)?;
                if !loss.is_finite() || !grads.is_finite() {
                    return Err(Error::Domain(format!("training diverged at stage {stage} (loss {loss})")));
                }
                opt.step(model.net.params_mut(), &grads);
                sum += loss * chunk.len() as f64;
                count += chunk.len();
                steps += 1;
            }
            let mean = (count > 0).then(|| sum / count as f64);
            if epoch == 0 {
                first = mean;
            }
            last = mean;
        }
        Ok((steps, first, last))
    }

    pub fn stop_reason(&self) -> Option<StopReason> {
        stop_reason(&self.cutoffs(), self.config.convergence_tol, self.config.max_stages)
    }

    /// Runs (or continues) stages until the cutoff converges or the stage
    /// cap is hit, calling `on_stage` after each one.
    pub fn run(&mut self, mut on_stage: impl FnMut(&StageReport)) -> Result<TrainingReport> {
        if self.reports.is_empty() {
            on_stage(self.bootstrap_stage()?);
        }
        while self.stop_reason().is_none() {
            on_stage(self.improvement_stage()?);
        }
        Ok(self.report())
    }

    pub fn report(&self) -> TrainingReport {
        TrainingReport::new(self.scenario(), self.reports.clone(), &self.config)
    }

    fn checkpoint(&self, stage: usize, config_hash: &str) -> Result<Checkpoint> {
        let model = self.model.as_ref().expect("model exists");
        let opt = self.optimizer.as_ref().expect("optimizer exists");
        let state = ResumeState {
            stage,
            optimizer_step: opt.step,
            optimizer: opt.config,
            master_seed: self.master_seed,
            trainer: self.config.clone(),
            reports: self.reports.clone(),
        };
        let mut ck = model.to_checkpoint(self.scenario(), config_hash, serde_json::to_value(&state)?)?;
        for (i, (name, _)) in model.net.params().iter().enumerate() {
            ck.push(format!("adam.m.{name}"), &opt.m[i]);
            ck.push(format!("adam.v.{name}"), &opt.v[i]);
        }
        Ok(ck)
    }

    fn persist(&self, stage: usize) -> Result<()> {
        let Some(p) = &self.persistence else {
            return Ok(());
        };
        let sc = self.scenario();
        let ck = self.checkpoint(stage, &p.config_hash)?;
        io::write_atomic(&p.checkpoint_path(sc, stage), |w| Ok(ck.write_to(w)?))?;
        let mut header = FileHeader::new(KIND_DATASET, &p.config_hash, sc);
        header.meta = serde_json::json!({ "stage": stage, "master_seed": self.master_seed });
        io::write_jsonl_file(&p.dataset_path(sc), &header, self.dataset.records())?;
        let mut header = FileHeader::new(KIND_REPORT, &p.config_hash, sc);
        header.meta = serde_json::json!({ "master_seed": self.master_seed });
        io::write_jsonl_file(&p.report_path(sc), &header, &self.reports)
    }

    /// Restores the trainer from the latest stage checkpoint in the
    /// persistence directory. Returns the restored stage, or `None` when there
    /// is nothing to resume.
    pub fn resume(&mut self) -> Result<Option<usize>> {
        let p = self
            .persistence
            .clone()
            .ok_or_else(|| Error::Config("resume needs an output directory".into()))?;
        let sc = self.scenario();
        let Some(stage) = p.latest_stage(sc) else {
            return Ok(None);
        };
        let ck = Checkpoint::read_from(&mut std::io::BufReader::new(std::fs::File::open(
            p.checkpoint_path(sc, stage),
        )?))?;
        let (model, meta) = DiffusionModel::<S>::from_checkpoint(&ck)?;
        if meta.config_hash != p.config_hash {
            return Err(Error::Incompatible(format!(
                "checkpoint was produced with config {} but the current config is {}",
                meta.config_hash, p.config_hash
            )));
        }
        if meta.scenario != sc {
            return Err(Error::Incompatible(format!("checkpoint is for scenario {}", meta.scenario)));
        }
        let state: ResumeState = serde_json::from_value(meta.extra)?;
        if state.master_seed != self.master_seed {
            return Err(Error::Incompatible(format!(
                "checkpoint used seed {} but {} was requested",
                state.master_seed, self.master_seed
            )));
        }
        let mut opt = AdamWState::new(state.optimizer, model.net.params());
        opt.step = state.optimizer_step;
        for (i, (name, _)) in model.net.params().iter().enumerate() {
            opt.m[i] = ck.tensor::<S>(&format!("adam.m.{name}"))?;
            opt.v[i] = ck.tensor::<S>(&format!("adam.v.{name}"))?;
        }
        let (header, records): (FileHeader, Vec<EliteRecord>) = io::read_jsonl_file(&p.dataset_path(sc))?;
        header.expect(KIND_DATASET, Some(&p.config_hash))?;
        let mut dataset = EliteDataset::default();
        dataset.extend(records.into_iter().filter(|r| r.stage <= stage).collect())?;
        if dataset.len() != self.config.batch_size * (stage + 1) {
            return Err(Error::Format(format!(
                "dataset holds {} records, expected {} after stage {stage}",
                dataset.len(),
                self.config.batch_size * (stage + 1)
            )));
        }
        self.model = Some(model);
        self.optimizer = Some(opt);
        self.dataset = dataset;
        self.reports = state.reports;
        self.reports.truncate(stage + 1);
        Ok(Some(stage))
    }

    pub fn into_model(self) -> Option<DiffusionModel<S>> {
        self.model
    }
}

/// Reads a model checkpoint from disk.
pub fn load_model<S: Scalar>(path: &Path) -> Result<(DiffusionModel<S>, crate::ddpm::ModelMetadata)> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let ck = Checkpoint::read_from(&mut std::io::BufReader::new(f))?;
    DiffusionModel::from_checkpoint(&ck)
}
