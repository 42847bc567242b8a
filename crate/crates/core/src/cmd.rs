//! Cross-modality differential branch: tumor-gated T2/FLAIR stems, an
//! amplified feature difference, channel-pooled mismatch attention and a
//! pooled classification head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv3d, Linear, ParamStore};
use crate::tensor::Tensor;

/// Slack allowed when checking that tumor probabilities lie in `[0, 1]`;
/// a softmax channel sum may overshoot 1 by a few ulps.
const PROB_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CmdConfig {
    /// Feature channels `k` of each modality stem.
    pub channels: usize,
    /// Amplification factor γ of the T2−FLAIR difference.
    pub gamma: f64,
    pub min_gate: f64,
    /// Stop gradients from flowing through the gate into the decoder.
    pub detach_gate: bool,
}

impl Default for CmdConfig {
    fn default() -> Self {
        CmdConfig {
            channels: 16,
            gamma: 2.0,
            min_gate: 0.1,
            detach_gate: true,
        }
    }
}

impl CmdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("cmd.channels must be at least 1"));
        }
        check_gamma(self.gamma)?;
        if !(self.min_gate > 0.0 && self.min_gate <= 1.0) {
            return Err(Error::config(format!("cmd.min_gate {} must lie in (0, 1]", self.min_gate)));
        }
        Ok(())
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 1.0 && gamma.is_finite()) {
        return Err(Error::config(format!("cmd.gamma {gamma} must be greater than 1")));
    }
    Ok(())
}

/// `G(P) = min_gate + (1 − min_gate)·P`.
pub fn gate_value(p: f64, min_gate: f64) -> f64 {
    min_gate + (1.0 - min_gate) * p
}

fn check_probabilities(p: &Tensor) -> Result<()> {
    match p
        .data()
        .iter()
        .find(|&&v| !(v >= -PROB_TOLERANCE && v <= 1.0 + PROB_TOLERANCE))
    {
        Some(v) => Err(Error::Domain(format!("tumor probability {v} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Graph form of [`gate_inputs`].
pub fn gate_vars(g: &mut Graph, t2: Var, flair: Var, p: Var, min_gate: f64) -> Result<(Var, Var)> {
    check_probabilities(g.value(p))?;
    let gate = g.affine(p, 1.0 - min_gate, min_gate);
    Ok((g.mul(t2, gate)?, g.mul(flair, gate)?))
}

/// Graph form of [`amplify_difference`].
pub fn amplify_vars(g: &mut Graph, f_t2: Var, f_flair: Var, gamma: f64) -> Result<Var> {
    check_gamma(gamma)?;
    let d = g.sub(f_t2, f_flair)?;
    Ok(g.affine(d, gamma, 0.0))
}

/// Graph form of [`mismatch_attention`].
pub fn attention_vars(g: &mut Graph, store: &ParamStore, conv: &Conv3d, f_diff: Var) -> Result<Var> {
    let f_max = g.channel_max(f_diff)?;
    let f_avg = g.channel_mean(f_diff)?;
    let cat = g.concat(&[f_max, f_avg])?;
    let a = conv.forward(g, store, cat)?;
    let a = g.relu(a);
    Ok(g.sigmoid(a))
}

/// Graph form of [`augment_features`].
pub fn augment_vars(g: &mut Graph, f: Var, a: Var) -> Result<Var> {
    let one_plus = g.affine(a, 1.0, 1.0);
    g.mul_broadcast(f, one_plus)
}

fn eval_graph<const N: usize>(
    inputs: [&Tensor; N],
    f: impl FnOnce(&mut Graph, [Var; N]) -> Result<Var>,
) -> Result<Tensor> {
    let mut g = Graph::eval();
    let vars = inputs.map(|t| g.constant(t.clone()));
    let out = f(&mut g, vars)?;
    Ok(g.value(out).clone())
}

/// Gate both volumes by `G(P)` elementwise.
pub fn gate_inputs(t2: &Tensor, flair: &Tensor, p: &Tensor, min_gate: f64) -> Result<(Tensor, Tensor)> {
    let t2g = eval_graph([t2, flair, p], |g, [a, b, p]| Ok(gate_vars(g, a, b, p, min_gate)?.0))?;
    let flg = eval_graph([t2, flair, p], |g, [a, b, p]| Ok(gate_vars(g, a, b, p, min_gate)?.1))?;
    Ok((t2g, flg))
}

/// `γ · (F_T2 − F_FLAIR)`.
pub fn amplify_difference(f_t2: &Tensor, f_flair: &Tensor, gamma: f64) -> Result<Tensor> {
    eval_graph([f_t2, f_flair], |g, [a, b]| amplify_vars(g, a, b, gamma))
}

/// `σ(ReLU(conv([max_c F, mean_c F])))` with a single-output cubic kernel
/// `weight` of shape `(1, 2, k, k, k)` and same padding.
pub fn mismatch_attention(f_diff: &Tensor, weight: &Tensor, bias: f64) -> Result<Tensor> {
    let k = weight.shape().get(2).copied().unwrap_or(1);
    let mut store = ParamStore::new();
    let conv = Conv3d {
        weight: store.add("w", weight.clone()),
        bias: store.add("b", Tensor::full(&[1], bias)),
        stride: 1,
        padding: k / 2,
    };
    eval_graph([f_diff], |g, [d]| attention_vars(g, &store, &conv, d))
}

/// `F′ = F + A ⊗ F`, with `A` broadcast over channels.
pub fn augment_features(f: &Tensor, a: &Tensor) -> Result<Tensor> {
    eval_graph([f, a], |g, [f, a]| augment_vars(g, f, a))
}

/// Every intermediate of one CMD forward pass.
#[derive(Clone, Copy, Debug)]
pub struct CmdOutput {
    pub gated_t2: Var,
    pub gated_flair: Var,
    pub f_t2: Var,
    pub f_flair: Var,
    pub f_diff: Var,
    pub attention: Var,
    pub aug_t2: Var,
    pub aug_flair: Var,
    /// `[GAP(F′_T2), GAP(F′_FLAIR)]`, shape `(B, 2k)`.
    pub pooled: Var,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct Cmd {
    cfg: CmdConfig,
    pub t2_stem: Conv3d,
    pub flair_stem: Conv3d,
    pub attention: Conv3d,
    pub fc: Linear,
    pub dropout: f64,
}

impl Cmd {
    /// Both stems start from the same weights so that, at initialization,
    /// the amplified difference is a difference of identically filtered
    /// inputs.
    pub fn new(store: &mut ParamStore, cfg: CmdConfig, dropout: f64, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.channels;
        let t2_stem = Conv3d::new(store, "cmd.t2_stem", 1, k, 3, 2, 1, rng);
        let flair_stem = Conv3d::new(store, "cmd.flair_stem", 1, k, 3, 2, 1, rng);
        let w = store.get(t2_stem.weight).value.clone();
        store.get_mut(flair_stem.weight).value = w;
        let attention = Conv3d::new(store, "cmd.attention", 2, 1, 3, 1, 1, rng);
        let fc = Linear::new(store, "cmd.fc", 2 * k, 2, rng);
        Ok(Cmd {
            cfg,
            t2_stem,
            flair_stem,
            attention,
            fc,
            dropout,
        })
    }

    pub fn config(&self) -> &CmdConfig {
        &self.cfg
    }

    /// `t2`, `flair`: `(B, 1, D, H, W)`; `p`: tumor probability of the same
    /// shape.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, t2: Var, flair: Var, p: Var) -> Result<CmdOutput> {
        if g.shape(t2) != g.shape(flair) {
            return Err(Error::shape(format!(
                "T2 {:?} and FLAIR {:?} differ",
                g.shape(t2),
                g.shape(flair)
            )));
        }
        if g.shape(t2).len() != 5 || g.shape(t2)[1] != 1 {
            return Err(Error::shape(format!("CMD inputs must be (B, 1, D, H, W), got {:?}", g.shape(t2))));
        }
        if g.shape(p) != g.shape(t2) {
            return Err(Error::shape(format!(
                "tumor probability {:?} does not match T2 {:?}",
                g.shape(p),
                g.shape(t2)
            )));
        }
        let p = if self.cfg.detach_gate { g.detach(p) } else { p };
        let (gated_t2, gated_flair) = gate_vars(g, t2, flair, p, self.cfg.min_gate)?;
        let f_t2 = self.t2_stem.forward(g, store, gated_t2)?;
        let f_flair = self.flair_stem.forward(g, store, gated_flair)?;
        let f_diff = amplify_vars(g, f_t2, f_flair, self.cfg.gamma)?;
        let attention = attention_vars(g, store, &self.attention, f_diff)?;
        let aug_t2 = augment_vars(g, f_t2, attention)?;
        let aug_flair = augment_vars(g, f_flair, attention)?;
        let p_t2 = g.gap(aug_t2)?;
        let p_flair = g.gap(aug_flair)?;
        let pooled = g.concat(&[p_t2, p_flair])?;
        let dropped = g.dropout(pooled, self.dropout);
        let logits = self.fc.forward(g, store, dropped)?;
        Ok(CmdOutput {
            gated_t2,
            gated_flair,
            f_t2,
            f_flair,
            f_diff,
            attention,
            aug_t2,
            aug_flair,
            pooled,
            logits,
        })
    }
}
