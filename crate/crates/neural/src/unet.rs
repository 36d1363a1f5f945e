//! Conditional 1-D U-Net denoiser.
//!
//! Layout (widths `[c0, c1, .., cL]`):
//!
//! ```text
//! pad -> stem conv -> [res(c_i) -> stride-2 conv] x L-1 -> res(cL)
//!     -> mid res -> [concat skip -> res -> upsample -> conv] x L -> norm/act/conv -> crop
//! ```
//!
//! The conditioning vector (a sinusoidal step embedding concatenated with
//! extra scalar features) goes through a two-layer encoder; each residual
//! block adds a learned per-channel shift of the encoding after its first
//! convolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NeuralError, Result};
use crate::graph::{Graph, Var};
use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub seq_len: usize,
    pub channels: usize,
    pub widths: Vec<usize>,
    pub time_embed_dim: usize,
    /// Extra conditioning scalars appended after the step embedding.
    pub cond_features: usize,
    pub embed_dim: usize,
    pub groups: usize,
    pub zero_init_output: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            seq_len: 23,
            channels: 4,
            widths: vec![16, 32, 64, 128],
            time_embed_dim: 32,
            cond_features: 5,
            embed_dim: 64,
            groups: 4,
            zero_init_output: true,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NeuralError::Config(m));
        if self.widths.is_empty() {
            return bad("at least one stage width is required".into());
        }
        if self.groups == 0 || self.widths.iter().any(|w| w % self.groups != 0 || *w == 0) {
            return bad(format!(
                "stage widths {:?} must be positive multiples of {} groups",
                self.widths, self.groups
            ));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return bad("time_embed_dim must be even and positive".into());
        }
        if self.seq_len == 0 || self.channels == 0 || self.embed_dim == 0 {
            return bad("sequence length, channels and embed_dim must be positive".into());
        }
        Ok(())
    }

    /// Sequence length after padding to a multiple of `2^(stages-1)`.
    pub fn padded_len(&self) -> usize {
        let m = 1usize << (self.widths.len() - 1);
        self.seq_len.div_ceil(m) * m
    }

    pub fn cond_width(&self) -> usize {
        self.time_embed_dim + self.cond_features
    }
}

/// Sinusoidal embedding of a (possibly fractional) step index.
pub fn timestep_embedding<S: Scalar>(step: f64, dim: usize) -> Vec<S> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    let freqs: Vec<f64> = (0..half)
        .map(|j| (-(10000f64.ln()) * j as f64 / half as f64).exp())
        .collect();
    out.extend(freqs.iter().map(|f| S::from_f64_lossy((step * f).sin())));
    out.extend(freqs.iter().map(|f| S::from_f64_lossy((step * f).cos())));
    out
}

#[derive(Clone, Debug)]
pub struct DenoiserNet<S> {
    config: UNetConfig,
    params: ParamStore<S>,
}

struct Init<'a, S> {
    store: &'a mut ParamStore<S>,
    rng: ChaCha8Rng,
}

impl<S: Scalar> Init<'_, S> {
    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| S::from_f64_lossy(self.rng.random_range(-bound..bound)));
        self.store.insert(name, t);
    }

    fn linear(&mut self, p: &str, fan_in: usize, fan_out: usize) {
        self.uniform(format!("{p}.w"), &[fan_out, fan_in], fan_in);
        self.uniform(format!("{p}.b"), &[fan_out], fan_in);
    }

    fn conv(&mut self, p: &str, cin: usize, cout: usize, kernel: usize) {
        self.uniform(format!("{p}.w"), &[cout, kernel * cin], kernel * cin);
        self.uniform(format!("{p}.b"), &[cout], kernel * cin);
    }

    fn norm(&mut self, p: &str, ch: usize) {
        self.store.insert(format!("{p}.gamma"), Tensor::full(&[ch], S::one()));
        self.store.insert(format!("{p}.beta"), Tensor::zeros(&[ch]));
    }

    fn res(&mut self, p: &str, cin: usize, cout: usize, embed: usize) {
        self.norm(&format!("{p}.gn1"), cin);
        self.conv(&format!("{p}.conv1"), cin, cout, 3);
        self.linear(&format!("{p}.shift"), embed, cout);
        self.norm(&format!("{p}.gn2"), cout);
        self.conv(&format!("{p}.conv2"), cout, cout, 3);
        if cin != cout {
            self.conv(&format!("{p}.skip"), cin, cout, 1);
        }
    }
}

impl<S: Scalar> DenoiserNet<S> {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let e = config.embed_dim;
        init.linear("cond.l1", config.cond_width(), e);
        init.linear("cond.l2", e, e);
        init.conv("stem", config.channels, config.widths[0], 3);
        let levels = config.widths.len();
        let mut cur = config.widths[0];
        for (i, &w) in config.widths.iter().enumerate() {
            init.res(&format!("down{i}"), cur, w, e);
            cur = w;
            if i + 1 < levels {
                init.conv(&format!("down{i}.ds"), w, w, 3);
            }
        }
        init.res("mid", cur, cur, e);
        for i in (0..levels).rev() {
            let out = if i > 0 { config.widths[i - 1] } else { config.widths[0] };
            init.res(&format!("up{i}"), cur + config.widths[i], out, e);
            cur = out;
            if i > 0 {
                init.conv(&format!("up{i}.us"), cur, cur, 3);
            }
        }
        init.norm("out.gn", cur);
        init.conv("out.conv", cur, config.channels, 3);
        if config.zero_init_output {
            let k = 3 * cur;
            store.set("out.conv.w", Tensor::zeros(&[config.channels, k]))?;
            store.set("out.conv.b", Tensor::zeros(&[config.channels]))?;
        }
        Ok(Self {
            config,
            params: store,
        })
    }

    pub fn from_parts(config: UNetConfig, params: ParamStore<S>) -> Result<Self> {
        let reference = Self::new(config.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(NeuralError::Config(format!(
                "parameter count {} does not match configuration ({})",
                params.len(),
                reference.params.len()
            )));
        }
        for ((rn, rt), (n, t)) in reference.params.iter().zip(params.iter()) {
            if rn != n || rt.shape() != t.shape() {
                return Err(NeuralError::Config(format!(
                    "parameter {n} {:?} does not match expected {rn} {:?}",
                    t.shape(),
                    rt.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn cast<T: Scalar>(&self) -> DenoiserNet<T> {
        DenoiserNet {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn p(&self, g: &mut Graph<'_, S>, name: &str) -> Result<Var> {
        g.param_by_name(name)
    }

    fn conv(&self, g: &mut Graph<'_, S>, x: Var, p: &str, kernel: usize, stride: usize) -> Result<Var> {
        let w = self.p(g, &format!("{p}.w"))?;
        let b = self.p(g, &format!("{p}.b"))?;
        g.conv1d(x, w, Some(b), kernel, stride, kernel / 2)
    }

    fn norm_act(&self, g: &mut Graph<'_, S>, x: Var, p: &str) -> Result<Var> {
        let gamma = self.p(g, &format!("{p}.gamma"))?;
        let beta = self.p(g, &format!("{p}.beta"))?;
        let h = g.group_norm(x, gamma, beta, self.config.groups)?;
        Ok(g.silu(h))
    }

    fn res(&self, g: &mut Graph<'_, S>, x: Var, emb: Var, p: &str) -> Result<Var> {
        let h = self.norm_act(g, x, &format!("{p}.gn1"))?;
        let h = self.conv(g, h, &format!("{p}.conv1"), 3, 1)?;
        let sw = self.p(g, &format!("{p}.shift.w"))?;
        let sb = self.p(g, &format!("{p}.shift.b"))?;
        let shift = g.linear(emb, sw, Some(sb))?;
        let h = g.add_shift(h, shift)?;
        let h = self.norm_act(g, h, &format!("{p}.gn2"))?;
        let h = self.conv(g, h, &format!("{p}.conv2"), 3, 1)?;
        let skip = if self.params.id(&format!("{p}.skip.w")).is_ok() {
            self.conv(g, x, &format!("{p}.skip"), 1, 1)?
        } else {
            x
        };
        g.add(h, skip)
    }

    /// Records the network on `g`. `x` is `[B, seq_len, channels]`, `cond`
    /// is `[B, cond_width]`; returns `[B, seq_len, channels]`.
    pub fn forward(&self, g: &mut Graph<'_, S>, x: Var, cond: Var) -> Result<Var> {
        let c = &self.config;
        let xs = g.value(x).shape().to_vec();
        if xs.len() != 3 || xs[1] != c.seq_len || xs[2] != c.channels {
            return Err(NeuralError::Shape(format!(
                "denoiser input {xs:?}, expected [B, {}, {}]",
                c.seq_len, c.channels
            )));
        }
        let cs = g.value(cond).shape().to_vec();
        if cs != [xs[0], c.cond_width()] {
            return Err(NeuralError::Shape(format!(
                "conditioning {cs:?}, expected [{}, {}]",
                xs[0],
                c.cond_width()
            )));
        }
        let (w1, b1) = (self.p(g, "cond.l1.w")?, self.p(g, "cond.l1.b")?);
        let e = g.linear(cond, w1, Some(b1))?;
        let e = g.silu(e);
        let (w2, b2) = (self.p(g, "cond.l2.w")?, self.p(g, "cond.l2.b")?);
        let e = g.linear(e, w2, Some(b2))?;
        let emb = g.silu(e);

        let mut h = g.pad_len(x, c.padded_len())?;
        h = self.conv(g, h, "stem", 3, 1)?;
        let levels = c.widths.len();
        let mut skips = Vec::with_capacity(levels);
        for i in 0..levels {
            h = self.res(g, h, emb, &format!("down{i}"))?;
            skips.push(h);
            if i + 1 < levels {
                h = self.conv(g, h, &format!("down{i}.ds"), 3, 2)?;
            }
        }
        h = self.res(g, h, emb, "mid")?;
        for i in (0..levels).rev() {
            h = g.concat(h, skips[i])?;
            h = self.res(g, h, emb, &format!("up{i}"))?;
            if i > 0 {
                h = g.upsample2(h)?;
                h = self.conv(g, h, &format!("up{i}.us"), 3, 1)?;
            }
        }
        h = self.norm_act(g, h, "out.gn")?;
        h = self.conv(g, h, "out.conv", 3, 1)?;
        g.crop_len(h, c.seq_len)
    }

    /// Forward pass without keeping the tape.
    pub fn predict(&self, x: &Tensor<S>, cond: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new(&self.params);
        let xv = g.input(x.clone());
        let cv = g.input(cond.clone());
        let out = self.forward(&mut g, xv, cv)?;
        Ok(g.value(out).clone())
    }
}
