//! Tape-based reverse-mode differentiation over a fixed operation set.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! the parameters that were read through [`Graph::param`].

use crate::error::{NeuralError, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S> {
    Input,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        kernel: usize,
        stride: usize,
        pad: usize,
        cols: Vec<S>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Silu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddShift {
        x: Var,
        shift: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Upsample2 {
        x: Var,
    },
    PadLen {
        x: Var,
    },
    CropLen {
        x: Var,
    },
    Scale {
        x: Var,
        c: S,
    },
    Mse {
        pred: Var,
        target: Tensor<S>,
    },
}

struct Node<S> {
    value: Option<Tensor<S>>,
    op: Op<S>,
}

pub struct Graph<'p, S: Scalar> {
    params: &'p ParamStore<S>,
    nodes: Vec<Node<S>>,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(NeuralError::Shape(msg))
}

/// `c[m,n] = a[m,k] * b[n,k]^T`
fn matmul_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    S::gemm(m, k, n, S::one(), a, k, 1, b, 1, k, S::zero(), &mut c, n, 1);
    c
}

/// `c[m,n] = a[m,k] * b[k,n]`
fn matmul_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    S::gemm(m, k, n, S::one(), a, k, 1, b, n, 1, S::zero(), &mut c, n, 1);
    c
}

/// `c[m,n] = a[k,m]^T * b[k,n]`
fn matmul_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    S::gemm(m, k, n, S::one(), a, 1, m, b, n, 1, S::zero(), &mut c, n, 1);
    c
}

fn column_sums<S: Scalar>(x: &[S], cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); cols];
    for row in x.chunks_exact(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

impl<'p, S: Scalar> Graph<'p, S> {
    pub fn new(params: &'p ParamStore<S>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name)?;
        Ok(self.param(id))
    }

    /// `y[B,O] = x[B,I] w[O,I]^T + b[O]`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return shape_err(format!("linear: input {xs:?} weight {ws:?}"));
        }
        let (batch, fan_in, fan_out) = (xs[0], xs[1], ws[0]);
        let mut out = matmul_nt(self.value(x).data(), self.value(w).data(), batch, fan_in, fan_out);
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.shape() != [fan_out] {
                return shape_err(format!("linear bias {:?}", bias.shape()));
            }
            for row in out.chunks_exact_mut(fan_out) {
                for (o, &bv) in row.iter_mut().zip(bias.data()) {
                    *o += bv;
                }
            }
        }
        let t = Tensor::new(&[batch, fan_out], out)?;
        Ok(self.push(t, Op::Linear { x, w, b }))
    }

    /// 1-D convolution over channels-last input `x[B,L,Ci]` with weights
    /// `w[Co, kernel*Ci]` (tap-major), zero padding `pad` on both ends.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 3 || ws.len() != 2 || ws[1] != kernel * xs[2] || stride == 0 {
            return shape_err(format!("conv1d: input {xs:?} weight {ws:?} kernel {kernel}"));
        }
        let (batch, len, cin, cout) = (xs[0], xs[1], xs[2], ws[0]);
        if len + 2 * pad < kernel {
            return shape_err(format!("conv1d: length {len} too short for kernel {kernel}"));
        }
        let lout = (len + 2 * pad - kernel) / stride + 1;
        let width = kernel * cin;
        let xd = self.value(x).data();
        let mut cols = vec![S::zero(); batch * lout * width];
        for bi in 0..batch {
            for t in 0..lout {
                let row = &mut cols[(bi * lout + t) * width..(bi * lout + t + 1) * width];
                for j in 0..kernel {
                    let src = (t * stride + j) as isize - pad as isize;
                    if src < 0 || src as usize >= len {
                        continue;
                    }
                    let off = (bi * len + src as usize) * cin;
                    row[j * cin..(j + 1) * cin].copy_from_slice(&xd[off..off + cin]);
                }
            }
        }
        let mut out = matmul_nt(&cols, self.value(w).data(), batch * lout, width, cout);
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.shape() != [cout] {
                return shape_err(format!("conv1d bias {:?}", bias.shape()));
            }
            for row in out.chunks_exact_mut(cout) {
                for (o, &bv) in row.iter_mut().zip(bias.data()) {
                    *o += bv;
                }
            }
        }
        let t = Tensor::new(&[batch, lout, cout], out)?;
        Ok(self.push(
            t,
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                stride,
                pad,
                cols,
            },
        ))
    }

    /// Group normalization over `[B,L,C]`, statistics per (batch, group).
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 || groups == 0 || xs[2] % groups != 0 {
            return shape_err(format!("group_norm: input {xs:?} groups {groups}"));
        }
        let (batch, len, ch) = (xs[0], xs[1], xs[2]);
        if self.value(gamma).shape() != [ch] || self.value(beta).shape() != [ch] {
            return shape_err("group_norm: affine parameters".into());
        }
        let cpg = ch / groups;
        let count = S::from_usize(len * cpg).unwrap();
        let eps = S::from_f64_lossy(1e-5);
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![S::zero(); xd.len()];
        let mut inv_std = vec![S::zero(); batch * groups];
        let mut out = vec![S::zero(); xd.len()];
        for bi in 0..batch {
            for g in 0..groups {
                let mut mean = S::zero();
                for t in 0..len {
                    let base = (bi * len + t) * ch + g * cpg;
                    for &v in &xd[base..base + cpg] {
                        mean += v;
                    }
                }
                mean /= count;
                let mut var = S::zero();
                for t in 0..len {
                    let base = (bi * len + t) * ch + g * cpg;
                    for &v in &xd[base..base + cpg] {
                        var += (v - mean) * (v - mean);
                    }
                }
                var /= count;
                let inv = S::one() / (var + eps).sqrt();
                inv_std[bi * groups + g] = inv;
                for t in 0..len {
                    let base = (bi * len + t) * ch + g * cpg;
                    for c in 0..cpg {
                        let h = (xd[base + c] - mean) * inv;
                        xhat[base + c] = h;
                        out[base + c] = h * gd[g * cpg + c] + bd[g * cpg + c];
                    }
                }
            }
        }
        let t = Tensor::new(&xs, out)?;
        Ok(self.push(
            t,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * sigmoid(v));
        self.push(t, Op::Silu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let mut t = self.value(a).clone();
        t.add_assign(self.value(b));
        Ok(self.push(t, Op::Add { a, b }))
    }

    /// Adds a per-(batch, channel) shift `[B,C]` to every position of `[B,L,C]`.
    pub fn add_shift(&mut self, x: Var, shift: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ss = self.value(shift).shape();
        if xs.len() != 3 || ss != [xs[0], xs[2]] {
            return shape_err(format!("add_shift: {xs:?} vs {ss:?}"));
        }
        let (len, ch) = (xs[1], xs[2]);
        let mut t = self.value(x).clone();
        let sd = self.value(shift).data();
        for (i, row) in t.data_mut().chunks_exact_mut(ch).enumerate() {
            let bi = i / len;
            for (o, &s) in row.iter_mut().zip(&sd[bi * ch..(bi + 1) * ch]) {
                *o += s;
            }
        }
        Ok(self.push(t, Op::AddShift { x, shift }))
    }

    /// Channel concatenation of `[B,L,Ca]` and `[B,L,Cb]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 3 || sb.len() != 3 || sa[..2] != sb[..2] {
            return shape_err(format!("concat: {sa:?} vs {sb:?}"));
        }
        let (batch, len, ca, cb) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = Vec::with_capacity(batch * len * (ca + cb));
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for r in 0..batch * len {
            out.extend_from_slice(&ad[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bd[r * cb..(r + 1) * cb]);
        }
        let t = Tensor::new(&[batch, len, ca + cb], out)?;
        Ok(self.push(t, Op::Concat { a, b }))
    }

    /// Nearest-neighbour upsampling by two along the length axis.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 {
            return shape_err(format!("upsample2: {xs:?}"));
        }
        let (batch, len, ch) = (xs[0], xs[1], xs[2]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(2 * xd.len());
        for r in 0..batch * len {
            let row = &xd[r * ch..(r + 1) * ch];
            out.extend_from_slice(row);
            out.extend_from_slice(row);
        }
        let t = Tensor::new(&[batch, 2 * len, ch], out)?;
        Ok(self.push(t, Op::Upsample2 { x }))
    }

    /// Zero-pads the length axis at the end up to `new_len`.
    pub fn pad_len(&mut self, x: Var, new_len: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 || new_len < xs[1] {
            return shape_err(format!("pad_len: {xs:?} -> {new_len}"));
        }
        let (batch, len, ch) = (xs[0], xs[1], xs[2]);
        let xd = self.value(x).data();
        let mut out = vec![S::zero(); batch * new_len * ch];
        for bi in 0..batch {
            out[bi * new_len * ch..(bi * new_len + len) * ch]
                .copy_from_slice(&xd[bi * len * ch..(bi + 1) * len * ch]);
        }
        let t = Tensor::new(&[batch, new_len, ch], out)?;
        Ok(self.push(t, Op::PadLen { x }))
    }

    /// Keeps the first `new_len` positions.
    pub fn crop_len(&mut self, x: Var, new_len: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 || new_len > xs[1] {
            return shape_err(format!("crop_len: {xs:?} -> {new_len}"));
        }
        let (batch, len, ch) = (xs[0], xs[1], xs[2]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(batch * new_len * ch);
        for bi in 0..batch {
            out.extend_from_slice(&xd[bi * len * ch..(bi * len + new_len) * ch]);
        }
        let t = Tensor::new(&[batch, new_len, ch], out)?;
        Ok(self.push(t, Op::CropLen { x }))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale { x, c })
    }

    /// Mean squared error against a constant target; returns a one-element node.
    pub fn mse(&mut self, pred: Var, target: Tensor<S>) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return shape_err(format!("mse: {:?} vs {:?}", p.shape(), target.shape()));
        }
        let n = S::from_usize(p.len().max(1)).unwrap();
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<S>()
            / n;
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target }))
    }

    /// Reverse pass from a one-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return shape_err("backward needs a scalar loss".into());
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), S::one()));
        let mut out = Gradients::zeros_like(self.params);

        fn acc<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
            match &mut grads[v.0] {
                Some(a) => a.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let gd = gy.data();
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(id) => out.accumulate(*id, gy.clone()),
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (batch, fan_in, fan_out) = (xv.dim(0), xv.dim(1), wv.dim(0));
                    let dx = matmul_nn(gd, wv.data(), batch, fan_out, fan_in);
                    let dw = matmul_tn(gd, xv.data(), fan_out, batch, fan_in);
                    if let Some(b) = b {
                        acc(&mut grads, *b, Tensor::new(&[fan_out], column_sums(gd, fan_out))?);
                    }
                    acc(&mut grads, *w, Tensor::new(wv.shape(), dw)?);
                    acc(&mut grads, *x, Tensor::new(xv.shape(), dx)?);
                }
                Op::Conv1d {
                    x,
                    w,
                    b,
                    kernel,
                    stride,
                    pad,
                    cols,
                } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (batch, len, cin) = (xv.dim(0), xv.dim(1), xv.dim(2));
                    let cout = wv.dim(0);
                    let lout = gy.dim(1);
                    let width = kernel * cin;
                    let rows = batch * lout;
                    let dw = matmul_tn(gd, cols, cout, rows, width);
                    let dcols = matmul_nn(gd, wv.data(), rows, cout, width);
                    let mut dx = vec![S::zero(); xv.len()];
                    for bi in 0..batch {
                        for t in 0..lout {
                            let row = &dcols[(bi * lout + t) * width..(bi * lout + t + 1) * width];
                            for j in 0..*kernel {
                                let src = (t * stride + j) as isize - *pad as isize;
                                if src < 0 || src as usize >= len {
                                    continue;
                                }
                                let off = (bi * len + src as usize) * cin;
                                for (d, &g) in dx[off..off + cin].iter_mut().zip(&row[j * cin..(j + 1) * cin]) {
                                    *d += g;
                                }
                            }
                        }
                    }
                    if let Some(b) = b {
                        acc(&mut grads, *b, Tensor::new(&[cout], column_sums(gd, cout))?);
                    }
                    acc(&mut grads, *w, Tensor::new(wv.shape(), dw)?);
                    acc(&mut grads, *x, Tensor::new(xv.shape(), dx)?);
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    xhat,
                    inv_std,
                } => {
                    let xv = self.value(*x);
                    let (batch, len, ch) = (xv.dim(0), xv.dim(1), xv.dim(2));
                    let cpg = ch / groups;
                    let count = S::from_usize(len * cpg).unwrap();
                    let gam = self.value(*gamma).data();
                    let mut dgamma = vec![S::zero(); ch];
                    let mut dbeta = vec![S::zero(); ch];
                    let mut dx = vec![S::zero(); xv.len()];
                    for bi in 0..batch {
                        for g in 0..*groups {
                            let mut mean_d = S::zero();
                            let mut mean_dx = S::zero();
                            for t in 0..len {
                                let base = (bi * len + t) * ch + g * cpg;
                                for c in 0..cpg {
                                    let idx = base + c;
                                    let cc = g * cpg + c;
                                    dgamma[cc] += gd[idx] * xhat[idx];
                                    dbeta[cc] += gd[idx];
                                    let dh = gd[idx] * gam[cc];
                                    mean_d += dh;
                                    mean_dx += dh * xhat[idx];
                                }
                            }
                            mean_d /= count;
                            mean_dx /= count;
                            let inv = inv_std[bi * groups + g];
                            for t in 0..len {
                                let base = (bi * len + t) * ch + g * cpg;
                                for c in 0..cpg {
                                    let idx = base + c;
                                    let dh = gd[idx] * gam[g * cpg + c];
                                    dx[idx] = inv * (dh - mean_d - xhat[idx] * mean_dx);
                                }
                            }
                        }
                    }
                    acc(&mut grads, *gamma, Tensor::new(&[ch], dgamma)?);
                    acc(&mut grads, *beta, Tensor::new(&[ch], dbeta)?);
                    acc(&mut grads, *x, Tensor::new(xv.shape(), dx)?);
                }
                Op::Silu { x } => {
                    let xv = self.value(*x);
                    let dx: Vec<S> = xv
                        .data()
                        .iter()
                        .zip(gd)
                        .map(|(&v, &g)| {
                            let s = sigmoid(v);
                            g * s * (S::one() + v * (S::one() - s))
                        })
                        .collect();
                    acc(&mut grads, *x, Tensor::new(xv.shape(), dx)?);
                }
                Op::Add { a, b } => {
                    acc(&mut grads, *a, gy.clone());
                    acc(&mut grads, *b, gy);
                }
                Op::AddShift { x, shift } => {
                    let (batch, len, ch) = (gy.dim(0), gy.dim(1), gy.dim(2));
                    let mut ds = vec![S::zero(); batch * ch];
                    for (r, row) in gd.chunks_exact(ch).enumerate() {
                        let bi = r / len;
                        for (d, &g) in ds[bi * ch..(bi + 1) * ch].iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    acc(&mut grads, *shift, Tensor::new(&[batch, ch], ds)?);
                    acc(&mut grads, *x, gy);
                }
                Op::Concat { a, b } => {
                    let (ca, cb) = (self.value(*a).dim(2), self.value(*b).dim(2));
                    let rows = gy.dim(0) * gy.dim(1);
                    let mut da = Vec::with_capacity(rows * ca);
                    let mut db = Vec::with_capacity(rows * cb);
                    for row in gd.chunks_exact(ca + cb) {
                        da.extend_from_slice(&row[..ca]);
                        db.extend_from_slice(&row[ca..]);
                    }
                    acc(&mut grads, *a, Tensor::new(self.value(*a).shape(), da)?);
                    acc(&mut grads, *b, Tensor::new(self.value(*b).shape(), db)?);
                }
                Op::Upsample2 { x } => {
                    let xv = self.value(*x);
                    let ch = xv.dim(2);
                    let mut dx = vec![S::zero(); xv.len()];
                    for (r, d) in dx.chunks_exact_mut(ch).enumerate() {
                        let first = &gd[2 * r * ch..(2 * r + 1) * ch];
                        let second = &gd[(2 * r + 1) * ch..(2 * r + 2) * ch];
                        for ((o, &p), &q) in d.iter_mut().zip(first).zip(second) {
                            *o = p + q;
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(xv.shape(), dx)?);
                }
                Op::PadLen { x } => {
                    let xv = self.value(*x);
                    let (batch, len, ch) = (xv.dim(0), xv.dim(1), xv.dim(2));
                    let new_len = gy.dim(1);
                    let mut dx = Vec::with_capacity(xv.len());
                    for bi in 0..batch {
                        dx.extend_from_slice(&gd[bi * new_len * ch..(bi * new_len + len) * ch]);
                    }
                    acc(&mut grads, *x, Tensor::new(xv.shape(), dx)?);
                }
                Op::CropLen { x } => {
                    let xv = self.value(*x);
                    let (batch, len, ch) = (xv.dim(0), xv.dim(1), xv.dim(2));
                    let new_len = gy.dim(1);
                    let mut dx = vec![S::zero(); xv.len()];
                    for bi in 0..batch {
                        dx[bi * len * ch..(bi * len + new_len) * ch]
                            .copy_from_slice(&gd[bi * new_len * ch..(bi + 1) * new_len * ch]);
                    }
                    acc(&mut grads, *x, Tensor::new(xv.shape(), dx)?);
                }
                Op::Scale { x, c } => {
                    let c = *c;
                    acc(&mut grads, *x, gy.map(|g| g * c));
                }
                Op::Mse { pred, target } => {
                    let p = self.value(*pred);
                    let n = S::from_usize(p.len().max(1)).unwrap();
                    let two = S::from_f64_lossy(2.0);
                    let g0 = gd[0];
                    let dp: Vec<S> = p
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&a, &b)| g0 * two * (a - b) / n)
                        .collect();
                    acc(&mut grads, *pred, Tensor::new(p.shape(), dp)?);
                }
            }
        }
        Ok(out)
    }
}
