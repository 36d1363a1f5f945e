//! Conditional denoising diffusion over observation-error sequences.
//!
//! The network predicts the injected noise; the reverse mean is recovered
//! from that prediction. Sequences are handled in normalized space
//! (`eps / sqrt(gamma)`) and mapped back on output.

use failgen_neural::{
    timestep_embedding, Checkpoint, DenoiserNet, Gradients, Graph, Scalar, Tensor, UNetConfig,
};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prior::{InitialState, NoiseSequence, NOISE_CHANNELS, NOISE_DIM, NOISE_STEPS};
use crate::sim::{Scenario, WorldConfig};

/// Linear beta schedule with cumulative products.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl VarianceSchedule {
    /// Number of diffusion steps `K`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_k` for `k` in `1..=K`.
    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[k - 1]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps() {
            return Err(Error::Domain(format!("diffusion step {k} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<VarianceSchedule> {
    if steps < 2 {
        return Err(Error::Config(format!("need at least 2 diffusion steps, got {steps}")));
    }
    if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "betas must satisfy 0 < start < end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(VarianceSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub net: UNetConfig,
    /// Normalized thresholds are clipped to this value.
    pub rho_clip: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.04,
            net: UNetConfig::default(),
            rho_clip: 5.0,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        make_schedule(self.steps, self.beta_start, self.beta_end)?;
        self.net.validate()?;
        if self.net.seq_len != NOISE_STEPS || self.net.channels != NOISE_CHANNELS || self.net.cond_features != 5 {
            return Err(Error::Config(format!(
                "denoiser must map {NOISE_STEPS}x{NOISE_CHANNELS} sequences with 5 conditioning features"
            )));
        }
        if !(self.rho_clip > 0.0) {
            return Err(Error::Config("rho_clip must be positive".into()));
        }
        Ok(())
    }
}

/// Affine maps keeping every network input O(1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    /// Standard deviation of the prior noise, `sqrt(gamma)`.
    pub eps_scale: f64,
    /// Threshold divisor, the bootstrap elite cutoff (1 when that cutoff is 0).
    pub rho_scale: f64,
    pub rho_clip: f64,
    pub s0_center: [f64; 4],
    pub s0_half_range: [f64; 4],
}

impl Normalization {
    /// Centre and half-range of `s0` over the scenario's start box. The
    /// relative state is affine in the start, so the extremes are attained at
    /// corners of the box.
    pub fn for_scenario(scenario: Scenario, world: &WorldConfig, rho_scale: f64, rho_clip: f64) -> Self {
        use crate::prior::{relative_state, WorldStart};
        let mut lo = [f64::INFINITY; 4];
        let mut hi = [f64::NEG_INFINITY; 4];
        for mask in 0..16u32 {
            let pick = |r: [f64; 2], bit: u32| if mask & (1 << bit) == 0 { r[0] } else { r[1] };
            let start = WorldStart {
                ego_distance: pick(world.ego_distance, 0),
                ego_speed: pick(world.ego_speed, 1),
                intruder_distance: pick(world.intruder_distance, 2),
                intruder_speed: pick(world.intruder_speed, 3),
            };
            let s = relative_state(scenario, &start, world).to_array();
            for i in 0..4 {
                lo[i] = lo[i].min(s[i]);
                hi[i] = hi[i].max(s[i]);
            }
        }
        let mut center = [0.0; 4];
        let mut half = [1.0; 4];
        for i in 0..4 {
            center[i] = 0.5 * (lo[i] + hi[i]);
            let h = 0.5 * (hi[i] - lo[i]);
            if h > 1e-9 {
                half[i] = h;
            }
        }
        Self {
            eps_scale: world.gamma.sqrt(),
            rho_scale: if rho_scale > 0.0 { rho_scale } else { 1.0 },
            rho_clip,
            s0_center: center,
            s0_half_range: half,
        }
    }

    /// `[rho, x0, y0, vx0, vy0]` in network units.
    pub fn features(&self, rho: f64, s0: &InitialState) -> [f64; 5] {
        let s = s0.to_array();
        let mut out = [0.0; 5];
        out[0] = (rho / self.rho_scale).clamp(0.0, self.rho_clip);
        for i in 0..4 {
            out[i + 1] = (s[i] - self.s0_center[i]) / self.s0_half_range[i];
        }
        out
    }
}

/// One training record: a prior-unit noise sequence with its robustness and start.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub eps: NoiseSequence,
    pub rho: f64,
    pub s0: InitialState,
}

#[derive(Clone, Debug)]
pub struct DiffusionModel<S: Scalar> {
    pub config: DiffusionConfig,
    pub schedule: VarianceSchedule,
    pub net: DenoiserNet<S>,
    pub norm: Normalization,
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Closed-form forward marginal `sqrt(abar_k) x0 + sqrt(1 - abar_k) z`.
pub fn q_sample(x0: &[f64], k: usize, schedule: &VarianceSchedule, z: &[f64]) -> Result<Vec<f64>> {
    schedule.check_step(k)?;
    if x0.len() != z.len() {
        return Err(Error::Shape(format!("q_sample: {} values vs {} draws", x0.len(), z.len())));
    }
    let ab = schedule.alpha_bar(k);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(z).map(|(x, z)| a * x + b * z).collect())
}

/// Reverse mean from a noise prediction:
/// `(x_k - beta_k / sqrt(1 - abar_k) * z_hat) / sqrt(alpha_k)`.
pub fn posterior_mean(x_k: f64, z_hat: f64, k: usize, schedule: &VarianceSchedule) -> f64 {
    let beta = schedule.beta(k);
    (x_k - beta / (1.0 - schedule.alpha_bar(k)).sqrt() * z_hat) / schedule.alpha(k).sqrt()
}

impl<S: Scalar> DiffusionModel<S> {
    pub fn new(config: DiffusionConfig, norm: Normalization, seed: u64) -> Result<Self> {
        config.validate()?;
        let schedule = make_schedule(config.steps, config.beta_start, config.beta_end)?;
        let net = DenoiserNet::new(config.net.clone(), seed)?;
        Ok(Self {
            config,
            schedule,
            net,
            norm,
        })
    }

    fn cond_row(&self, k: usize, rho: f64, s0: &InitialState, out: &mut Vec<S>) {
        out.extend(timestep_embedding::<S>(k as f64, self.config.net.time_embed_dim));
        out.extend(self.norm.features(rho, s0).iter().map(|&v| S::from_f64_lossy(v)));
    }

    fn cond_tensor(&self, rows: &[(usize, f64, InitialState)]) -> Tensor<S> {
        let width = self.config.net.cond_width();
        let mut data = Vec::with_capacity(rows.len() * width);
        for (k, rho, s0) in rows {
            self.cond_row(*k, *rho, s0, &mut data);
        }
        Tensor::new(&[rows.len(), width], data).expect("conditioning width")
    }

    fn seq_tensor(rows: &[Vec<f64>]) -> Tensor<S> {
        let data = rows
            .iter()
            .flat_map(|r| r.iter().map(|&v| S::from_f64_lossy(v)))
            .collect();
        Tensor::new(&[rows.len(), NOISE_STEPS, NOISE_CHANNELS], data).expect("sequence shape")
    }

    fn normalize(&self, eps: &NoiseSequence) -> Vec<f64> {
        eps.as_slice().iter().map(|v| v / self.norm.eps_scale).collect()
    }

    /// Noise-prediction loss on a minibatch and its parameter gradients.
    ///
    /// For each example `k ~ U{1..K}` and `z ~ N(0, I)` are drawn (in that
    /// order) from `rng`; the network is conditioned on the example's own
    /// robustness.
    pub fn training_loss<R: Rng + ?Sized>(
        &self,
        batch: &[TrainingExample],
        rng: &mut R,
    ) -> Result<(f64, Gradients<S>)> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch".into()));
        }
        let mut xs = Vec::with_capacity(batch.len());
        let mut zs = Vec::with_capacity(batch.len());
        let mut conds = Vec::with_capacity(batch.len());
        for ex in batch {
            let k = rng.random_range(1..=self.schedule.steps());
            let z: Vec<f64> = (0..NOISE_DIM).map(|_| gaussian(rng)).collect();
            xs.push(q_sample(&self.normalize(&ex.eps), k, &self.schedule, &z)?);
            zs.push(z);
            conds.push((k, ex.rho, ex.s0));
        }
        let mut g = Graph::new(self.net.params());
        let x = g.input(Self::seq_tensor(&xs));
        let c = g.input(self.cond_tensor(&conds));
        let pred = self.net.forward(&mut g, x, c)?;
        let loss = g.mse(pred, Self::seq_tensor(&zs))?;
        let value = g.value(loss).data()[0].to_f64_lossy();
        let grads = g.backward(loss)?;
        Ok((value, grads))
    }

    /// Network noise prediction for a batch of normalized sequences at step `k`.
    pub fn predict_noise(&self, x_k: &[Vec<f64>], k: usize, conds: &[(f64, InitialState)]) -> Result<Vec<Vec<f64>>> {
        self.schedule.check_step(k)?;
        if x_k.len() != conds.len() {
            return Err(Error::Shape("one conditioning entry per sequence is required".into()));
        }
        let rows: Vec<_> = conds.iter().map(|(r, s)| (k, *r, *s)).collect();
        let out = self.net.predict(&Self::seq_tensor(x_k), &self.cond_tensor(&rows))?;
        Ok(out
            .data()
            .chunks(NOISE_DIM)
            .map(|c| c.iter().map(|v| v.to_f64_lossy()).collect())
            .collect())
    }

    /// One reverse step for a batch: `x_{k-1} = mu + sqrt(beta_k) draw`,
    /// with no noise added at `k = 1`. Sequences are in normalized units.
    pub fn p_sample_step(
        &self,
        x_k: &[Vec<f64>],
        k: usize,
        conds: &[(f64, InitialState)],
        draws: &[Vec<f64>],
    ) -> Result<Vec<Vec<f64>>> {
        let z_hat = self.predict_noise(x_k, k, conds)?;
        let sd = self.schedule.beta(k).sqrt();
        Ok(x_k
            .iter()
            .zip(&z_hat)
            .zip(draws)
            .map(|((x, zh), d)| {
                x.iter()
                    .zip(zh)
                    .zip(d)
                    .map(|((&x, &zh), &d)| {
                        let mu = posterior_mean(x, zh, k, &self.schedule);
                        if k > 1 {
                            mu + sd * d
                        } else {
                            mu
                        }
                    })
                    .collect()
            })
            .collect())
    }

    /// Runs the full reverse chain for a batch. Sample `i` draws its initial
    /// Gaussian and every step's injection from `rngs[i]` only. Results are
    /// returned in prior units.
    pub fn sample_batch<R: Rng>(&self, conds: &[(f64, InitialState)], rngs: &mut [R]) -> Result<Vec<NoiseSequence>> {
        if conds.len() != rngs.len() {
            return Err(Error::Shape("one random stream per sample is required".into()));
        }
        let mut x: Vec<Vec<f64>> = rngs
            .iter_mut()
            .map(|r| (0..NOISE_DIM).map(|_| gaussian(r)).collect())
            .collect();
        for k in (1..=self.schedule.steps()).rev() {
            let draws: Vec<Vec<f64>> = if k > 1 {
                rngs.iter_mut()
                    .map(|r| (0..NOISE_DIM).map(|_| gaussian(r)).collect())
                    .collect()
            } else {
                vec![vec![0.0; NOISE_DIM]; conds.len()]
            };
            x = self.p_sample_step(&x, k, conds, &draws)?;
        }
        x.into_iter()
            .map(|row| {
                let scaled = row.into_iter().map(|v| v * self.norm.eps_scale).collect();
                NoiseSequence::new(scaled).map_err(|_| Error::Domain("sampler produced a non-finite value".into()))
            })
            .collect()
    }

    pub fn sample<R: Rng>(&self, rho_threshold: f64, s0: &InitialState, rng: &mut R) -> Result<NoiseSequence>
    where
        R: Clone,
    {
        let mut rngs = [rng.clone()];
        let out = self.sample_batch(&[(rho_threshold, *s0)], &mut rngs)?;
        *rng = rngs[0].clone();
        Ok(out.into_iter().next().expect("one sample"))
    }

    pub fn cast<T: Scalar>(&self) -> DiffusionModel<T> {
        DiffusionModel {
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            net: self.net.cast(),
            norm: self.norm.clone(),
        }
    }
}

/// Metadata block stored with model parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMetadata {
    pub kind: String,
    pub config: DiffusionConfig,
    pub normalization: Normalization,
    pub scenario: Scenario,
    pub config_hash: String,
    /// Free-form state owned by the caller (trainer progress, optimizer step).
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub const MODEL_KIND: &str = "diffusion";
pub const NET_PREFIX: &str = "net.";

impl<S: Scalar> DiffusionModel<S> {
    pub fn to_checkpoint(&self, scenario: Scenario, config_hash: &str, extra: serde_json::Value) -> Result<Checkpoint> {
        let meta = ModelMetadata {
            kind: MODEL_KIND.into(),
            config: self.config.clone(),
            normalization: self.norm.clone(),
            scenario,
            config_hash: config_hash.into(),
            extra,
        };
        let mut ck = Checkpoint::new(serde_json::to_string(&meta)?);
        ck.push_params(NET_PREFIX, self.net.params());
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, ModelMetadata)> {
        let meta: ModelMetadata = serde_json::from_str(&ck.metadata)?;
        if meta.kind != MODEL_KIND {
            return Err(Error::Format(format!("checkpoint holds a `{}`, not a diffusion model", meta.kind)));
        }
        let mut model = Self::new(meta.config.clone(), meta.normalization.clone(), 0)?;
        ck.load_params(NET_PREFIX, model.net.params_mut())?;
        Ok((model, meta))
    }
}
