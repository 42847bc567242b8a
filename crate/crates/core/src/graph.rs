//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! for every node that depends on a parameter or a gradient-tracked input.
//! Graphs are cheap to build and are thrown away after each step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: ConvGeometry,
    },
    UpConv {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    MulBroadcast {
        x: Var,
        gate: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    ChannelMax {
        x: Var,
        argmax: Vec<u32>,
    },
    ChannelMean(Var),
    ChannelSum {
        x: Var,
        from: usize,
        to: usize,
    },
    Concat(Vec<Var>),
    Gap(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Softmax(Var),
    SoftDice {
        probs: Var,
        target: Tensor,
        classes: Vec<usize>,
        eps: f64,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<Option<usize>>,
        known: usize,
    },
    WeightedSum(Vec<(Var, f64)>),
    Select {
        x: Var,
        index: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
    rng: ChaCha8Rng,
}

impl Graph {
    /// Inference graph: dropout is the identity.
    pub fn eval() -> Self {
        Graph {
            nodes: Vec::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Training graph; `seed` drives dropout masks.
    pub fn train(seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Untracked leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Gradient-tracked leaf (used for input saliency and gradient checks).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), !p.frozen)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{op}: shape {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (out, geo) = kernels::conv3d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::Conv { x, w, b, geo }, ng))
    }

    pub fn upconv2x(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = kernels::upconv2x_forward(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::UpConv { x, w, b }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::from_vec(self.shape(a), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_vec(self.shape(a), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let ng = self.ng(x);
        self.push(out, Op::Affine { x, scale }, ng)
    }

    /// Multiply `x` of shape `(B, C, ...)` by `gate` of shape `(B, 1, ...)`,
    /// broadcasting over channels.
    pub fn mul_broadcast(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (xs, gs) = (self.shape(x), self.shape(gate));
        if xs.len() < 2 || gs.len() != xs.len() || gs[0] != xs[0] || gs[1] != 1 || gs[2..] != xs[2..] {
            return Err(Error::shape(format!(
                "channel broadcast needs (B,1,...) gate matching {:?}, got {:?}",
                xs, gs
            )));
        }
        let xv = self.value(x);
        let gv = self.value(gate);
        let inner = xv.inner();
        let mut out = xv.clone();
        for b in 0..xv.batch() {
            let gp = gv.plane(b, 0);
            for c in 0..xv.channels() {
                let start = (b * xv.channels() + c) * inner;
                out.data_mut()[start..start + inner]
                    .iter_mut()
                    .zip(gp)
                    .for_each(|(o, g)| *o *= g);
            }
        }
        let ng = self.ng(x) || self.ng(gate);
        Ok(self.push(out, Op::MulBroadcast { x, gate }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    /// Maximum over the channel axis, keeping a singleton channel.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 3 {
            return Err(Error::shape("channel_max expects (B, C, ...)"));
        }
        let (b, c, inner) = (xv.batch(), xv.channels(), xv.inner());
        let mut shape = xv.shape().to_vec();
        shape[1] = 1;
        let mut out = Tensor::full(&shape, f64::NEG_INFINITY);
        let mut argmax = vec![0u32; b * inner];
        for bi in 0..b {
            for ci in 0..c {
                let src = xv.plane(bi, ci);
                let dst = &mut out.data_mut()[bi * inner..(bi + 1) * inner];
                let am = &mut argmax[bi * inner..(bi + 1) * inner];
                for s in 0..inner {
                    if src[s] > dst[s] {
                        dst[s] = src[s];
                        am[s] = ci as u32;
                    }
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::ChannelMax { x, argmax }, ng))
    }

    /// Mean over the channel axis, keeping a singleton channel.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 3 {
            return Err(Error::shape("channel_mean expects (B, C, ...)"));
        }
        let (b, c, inner) = (xv.batch(), xv.channels(), xv.inner());
        let mut shape = xv.shape().to_vec();
        shape[1] = 1;
        let mut out = Tensor::zeros(&shape);
        for bi in 0..b {
            for ci in 0..c {
                let src = xv.plane(bi, ci);
                out.data_mut()[bi * inner..(bi + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(o, s)| *o += s / c as f64);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::ChannelMean(x), ng))
    }

    /// Sum of channels `from..to`, keeping a singleton channel.
    pub fn channel_sum(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 3 || from >= to || to > xv.channels() {
            return Err(Error::shape(format!(
                "channel_sum {from}..{to} invalid for {:?}",
                xv.shape()
            )));
        }
        let (b, inner) = (xv.batch(), xv.inner());
        let mut shape = xv.shape().to_vec();
        shape[1] = 1;
        let mut out = Tensor::zeros(&shape);
        for bi in 0..b {
            for ci in from..to {
                let src = xv.plane(bi, ci);
                out.data_mut()[bi * inner..(bi + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(o, s)| *o += s);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::ChannelSum { x, from, to }, ng))
    }

    /// Concatenate along axis 1 (channels for volumes, features for vectors).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let base = self.shape(first).to_vec();
        if base.len() < 2 {
            return Err(Error::shape("concat expects rank >= 2"));
        }
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(Error::shape(format!("concat: {:?} vs {:?}", s, base)));
            }
            channels += s[1];
        }
        let batch = base[0];
        let inner: usize = base[2..].iter().product();
        let mut shape = base.clone();
        shape[1] = channels;
        let mut data = Vec::with_capacity(batch * channels * inner);
        for b in 0..batch {
            for &p in parts {
                let v = self.value(p);
                let per = v.channels() * inner;
                data.extend_from_slice(&v.data()[b * per..(b + 1) * per]);
            }
        }
        let out = Tensor::from_vec(&shape, data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), ng))
    }

    /// Global average pooling `(B, C, ...)` → `(B, C)`.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 3 {
            return Err(Error::shape("gap expects (B, C, ...)"));
        }
        let out = gap(xv);
        let ng = self.ng(x);
        Ok(self.push(out, Op::Gap(x), ng))
    }

    /// `x · wᵀ + b` with `x: (B, in)`, `w: (out, in)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.rank() != 2 || wv.rank() != 2 || xv.shape()[1] != wv.shape()[1] {
            return Err(Error::shape(format!(
                "linear: input {:?} incompatible with weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (batch, n_in, n_out) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
        let mut out = Tensor::zeros(&[batch, n_out]);
        kernels::gemm(batch, n_in, n_out, xv.data(), false, wv.data(), true, out.data_mut(), 0.0);
        if let Some(b) = b {
            let bv = self.value(b).data().to_vec();
            for row in out.data_mut().chunks_mut(n_out) {
                row.iter_mut().zip(&bv).for_each(|(o, b)| *o += b);
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::Linear { x, w, b }, ng))
    }

    /// Inverted dropout; identity outside training mode.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if !self.training || rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::from_vec(self.shape(x), data).expect("same length");
        let ng = self.ng(x);
        self.push(out, Op::Dropout { x, mask }, ng)
    }

    /// Softmax over axis 1.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 2 {
            return Err(Error::shape("softmax expects (B, C, ...)"));
        }
        let out = softmax_channels(xv);
        let ng = self.ng(x);
        Ok(self.push(out, Op::Softmax(x), ng))
    }

    /// Soft Dice loss averaged over `classes`, with sums taken over the
    /// whole batch. `target` is a one-hot tensor shaped like `probs`.
    pub fn soft_dice(&mut self, probs: Var, target: Tensor, classes: &[usize], eps: f64) -> Result<Var> {
        let pv = self.value(probs);
        if pv.shape() != target.shape() {
            return Err(Error::shape(format!(
                "soft dice: probabilities {:?} vs target {:?}",
                pv.shape(),
                target.shape()
            )));
        }
        if classes.is_empty() || classes.iter().any(|&c| c >= pv.channels()) {
            return Err(Error::shape("soft dice: invalid class list"));
        }
        let loss = classes
            .iter()
            .map(|&c| {
                let (i, p, t) = dice_sums(pv, &target, c);
                1.0 - (2.0 * i + eps) / (p + t + eps)
            })
            .sum::<f64>()
            / classes.len() as f64;
        let ng = self.ng(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftDice {
                probs,
                target,
                classes: classes.to_vec(),
                eps,
            },
            ng,
        ))
    }

    /// Mean cross-entropy of `(B, K)` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let labels: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
        self.cross_entropy_partial(logits, &labels)
    }

    /// Cross-entropy averaged over the rows whose label is known.
    pub fn cross_entropy_partial(&mut self, logits: Var, labels: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.batch() != labels.len() {
            return Err(Error::shape(format!(
                "cross entropy: logits {:?} with {} labels",
                lv.shape(),
                labels.len()
            )));
        }
        let k = lv.channels();
        if labels.iter().flatten().any(|&l| l >= k) {
            return Err(Error::Label(format!("class index outside 0..{k}")));
        }
        let known = labels.iter().flatten().count();
        if known == 0 {
            return Err(Error::Label("cross entropy over a batch without known labels".into()));
        }
        let probs = softmax_channels(lv);
        let loss = labels
            .iter()
            .enumerate()
            .filter_map(|(b, l)| l.map(|l| -probs.data()[b * k + l].max(f64::MIN_POSITIVE).ln()))
            .sum::<f64>()
            / known as f64;
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                known,
            },
            ng,
        ))
    }

    /// `Σ wᵢ · xᵢ` over equally shaped terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = *terms.first().ok_or_else(|| Error::shape("empty weighted sum"))?;
        let mut out = Tensor::zeros(self.shape(first));
        for &(v, w) in terms {
            if self.shape(v) != out.shape() {
                return Err(Error::shape("weighted sum of mismatched shapes"));
            }
            out.data_mut()
                .iter_mut()
                .zip(self.value(v).data())
                .for_each(|(o, x)| *o += w * x);
        }
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        Ok(self.push(out, Op::WeightedSum(terms.to_vec()), ng))
    }

    /// Single element of a tensor as a scalar node.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = *self
            .value(x)
            .data()
            .get(index)
            .ok_or_else(|| Error::shape("select index out of range"))?;
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(v), Op::Select { x, index }, ng))
    }

    /// Reverse pass seeded with ∂out/∂out = 1 (`out` must be a scalar).
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(Error::shape("backward needs a scalar output"));
        }
        self.backward_with(out, Tensor::full(self.shape(out), 1.0))
    }

    /// Reverse pass with an explicit upstream gradient for `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.shape(out) {
            return Err(Error::shape("seed gradient shape mismatch"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv { x, w, b, geo } => {
                let r = kernels::conv3d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    geo,
                    self.ng(*x),
                    self.ng(*w),
                    b.is_some_and(|b| self.ng(b)),
                );
                if let Some(t) = r.input {
                    acc(*x, t);
                }
                if let Some(t) = r.weight {
                    acc(*w, t);
                }
                if let (Some(b), Some(t)) = (b, r.bias) {
                    acc(*b, t);
                }
            }
            Op::UpConv { x, w, b } => {
                let r = kernels::upconv2x_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    self.ng(*x),
                    self.ng(*w),
                    b.is_some_and(|b| self.ng(b)),
                );
                if let Some(t) = r.input {
                    acc(*x, t);
                }
                if let Some(t) = r.weight {
                    acc(*w, t);
                }
                if let (Some(b), Some(t)) = (b, r.bias) {
                    acc(*b, t);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(*a, zip_map(g, self.value(*b), |g, y| g * y));
                acc(*b, zip_map(g, self.value(*a), |g, x| g * x));
            }
            Op::Affine { x, scale } => acc(*x, g.map(|v| v * scale)),
            Op::MulBroadcast { x, gate } => {
                let (xv, gv) = (self.value(*x), self.value(*gate));
                let (batch, c, inner) = (xv.batch(), xv.channels(), xv.inner());
                if self.ng(*x) {
                    let mut dx = g.clone();
                    for b in 0..batch {
                        let gp = gv.plane(b, 0);
                        for ci in 0..c {
                            dx.plane_mut(b, ci).iter_mut().zip(gp).for_each(|(d, s)| *d *= s);
                        }
                    }
                    acc(*x, dx);
                }
                if self.ng(*gate) {
                    let mut dg = Tensor::zeros(gv.shape());
                    for b in 0..batch {
                        for ci in 0..c {
                            let start = (b * c + ci) * inner;
                            let gx = &g.data()[start..start + inner];
                            let xx = &xv.data()[start..start + inner];
                            dg.plane_mut(b, 0)
                                .iter_mut()
                                .zip(gx.iter().zip(xx))
                                .for_each(|(d, (a, b))| *d += a * b);
                        }
                    }
                    acc(*gate, dg);
                }
            }
            Op::Relu(x) => acc(*x, zip_map(g, self.value(*x), |g, v| if v > 0.0 { g } else { 0.0 })),
            Op::Sigmoid(x) => acc(*x, zip_map(g, &node.value, |g, s| g * s * (1.0 - s))),
            Op::ChannelMax { x, argmax } => {
                let xv = self.value(*x);
                let (c, inner) = (xv.channels(), xv.inner());
                let mut dx = Tensor::zeros(xv.shape());
                for (idx, (&gv, &am)) in g.data().iter().zip(argmax).enumerate() {
                    let (b, s) = (idx / inner, idx % inner);
                    dx.data_mut()[(b * c + am as usize) * inner + s] += gv;
                }
                acc(*x, dx);
            }
            Op::ChannelMean(x) => {
                let xv = self.value(*x);
                let (c, inner) = (xv.channels(), xv.inner());
                let mut dx = Tensor::zeros(xv.shape());
                for b in 0..xv.batch() {
                    let gp = &g.data()[b * inner..(b + 1) * inner];
                    for ci in 0..c {
                        dx.plane_mut(b, ci)
                            .iter_mut()
                            .zip(gp)
                            .for_each(|(d, s)| *d = s / c as f64);
                    }
                }
                acc(*x, dx);
            }
            Op::ChannelSum { x, from, to } => {
                let xv = self.value(*x);
                let inner = xv.inner();
                let mut dx = Tensor::zeros(xv.shape());
                for b in 0..xv.batch() {
                    let gp = &g.data()[b * inner..(b + 1) * inner];
                    for ci in *from..*to {
                        dx.plane_mut(b, ci).copy_from_slice(gp);
                    }
                }
                acc(*x, dx);
            }
            Op::Concat(parts) => {
                let shape = g.shape();
                let (batch, total) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let c = pv.channels();
                    if self.ng(p) {
                        let mut data = Vec::with_capacity(pv.len());
                        for b in 0..batch {
                            let start = (b * total + offset) * inner;
                            data.extend_from_slice(&g.data()[start..start + c * inner]);
                        }
                        acc(p, Tensor::from_vec(pv.shape(), data).expect("concat split"));
                    }
                    offset += c;
                }
            }
            Op::Gap(x) => {
                let xv = self.value(*x);
                let inner = xv.inner();
                let mut dx = Tensor::zeros(xv.shape());
                for (bc, &gv) in g.data().iter().enumerate() {
                    dx.data_mut()[bc * inner..(bc + 1) * inner].fill(gv / inner as f64);
                }
                acc(*x, dx);
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (batch, n_in, n_out) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                if self.ng(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    kernels::gemm(batch, n_out, n_in, g.data(), false, wv.data(), false, dx.data_mut(), 0.0);
                    acc(*x, dx);
                }
                if self.ng(*w) {
                    let mut dw = Tensor::zeros(wv.shape());
                    kernels::gemm(n_out, batch, n_in, g.data(), true, xv.data(), false, dw.data_mut(), 0.0);
                    acc(*w, dw);
                }
                if let Some(b) = b {
                    let mut db = Tensor::zeros(&[n_out]);
                    for row in g.data().chunks(n_out) {
                        db.data_mut().iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    acc(*b, db);
                }
            }
            Op::Dropout { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                acc(*x, Tensor::from_vec(g.shape(), data).expect("dropout"));
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let (batch, c, inner) = (y.batch(), y.channels(), if y.rank() > 2 { y.inner() } else { 1 });
                let mut dx = Tensor::zeros(y.shape());
                for b in 0..batch {
                    for s in 0..inner {
                        let at = |ci: usize| (b * c + ci) * inner + s;
                        let dot: f64 = (0..c).map(|ci| g.data()[at(ci)] * y.data()[at(ci)]).sum();
                        for ci in 0..c {
                            dx.data_mut()[at(ci)] = y.data()[at(ci)] * (g.data()[at(ci)] - dot);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::SoftDice {
                probs,
                target,
                classes,
                eps,
            } => {
                let pv = self.value(*probs);
                let upstream = g.item();
                let mut dp = Tensor::zeros(pv.shape());
                let n = classes.len() as f64;
                for &c in classes {
                    let (i, p, t) = dice_sums(pv, target, c);
                    let den = p + t + eps;
                    let num = 2.0 * i + eps;
                    for b in 0..pv.batch() {
                        let tp = target.plane(b, c);
                        dp.plane_mut(b, c)
                            .iter_mut()
                            .zip(tp)
                            .for_each(|(d, &tv)| *d = -upstream * (2.0 * tv * den - num) / (den * den) / n);
                    }
                }
                acc(*probs, dp);
            }
            Op::CrossEntropy { logits, labels, known } => {
                let lv = self.value(*logits);
                let k = lv.channels();
                let mut d = softmax_channels(lv);
                let scale = g.item() / *known as f64;
                for (b, l) in labels.iter().enumerate() {
                    match l {
                        Some(l) => d.data_mut()[b * k + l] -= 1.0,
                        None => d.data_mut()[b * k..(b + 1) * k].fill(0.0),
                    }
                }
                d.scale_in_place(scale);
                acc(*logits, d);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    acc(v, g.map(|x| x * w));
                }
            }
            Op::Select { x, index } => {
                let mut d = Tensor::zeros(self.shape(*x));
                d.data_mut()[*index] = g.item();
                acc(*x, d);
            }
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients per parameter, summed over every use in the graph.
    pub fn for_params(&self, graph: &Graph, n_params: usize) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = (0..n_params).map(|_| None).collect();
        for (node, g) in graph.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                match &mut out[id.index()] {
                    Some(existing) => existing.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax over axis 1 of a `(B, C, ...)` tensor.
pub fn softmax_channels(x: &Tensor) -> Tensor {
    let (batch, c) = (x.batch(), x.channels());
    let inner = if x.rank() > 2 { x.inner() } else { 1 };
    let mut out = Tensor::zeros(x.shape());
    for b in 0..batch {
        for s in 0..inner {
            let at = |ci: usize| (b * c + ci) * inner + s;
            let max = (0..c).map(|ci| x.data()[at(ci)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for ci in 0..c {
                let e = (x.data()[at(ci)] - max).exp();
                out.data_mut()[at(ci)] = e;
                total += e;
            }
            for ci in 0..c {
                out.data_mut()[at(ci)] /= total;
            }
        }
    }
    out
}

/// Global average pooling `(B, C, ...)` → `(B, C)`.
pub fn gap(x: &Tensor) -> Tensor {
    let (batch, c, inner) = (x.batch(), x.channels(), x.inner());
    let data = (0..batch * c)
        .map(|bc| x.data()[bc * inner..(bc + 1) * inner].iter().sum::<f64>() / inner as f64)
        .collect();
    Tensor::from_vec(&[batch, c], data).expect("gap shape")
}

fn dice_sums(p: &Tensor, t: &Tensor, c: usize) -> (f64, f64, f64) {
    let (mut i, mut ps, mut ts) = (0.0, 0.0, 0.0);
    for b in 0..p.batch() {
        for (&pv, &tv) in p.plane(b, c).iter().zip(t.plane(b, c)) {
            i += pv * tv;
            ps += pv;
            ts += tv;
        }
    }
    (i, ps, ts)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}
