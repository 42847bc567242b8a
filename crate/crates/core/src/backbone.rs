//! Hierarchical 3-D encoder and U-Net style decoder.
//!
//! Stage `i` (1-based) halves the resolution with a stride-2 3×3×3
//! convolution and refines with a second 3×3×3 convolution, giving
//! `dᵢ = C·2^(i−1)` channels at `input / 2ⁱ`. The decoder mirrors it with
//! learned 2× upsampling and additive skips; a final upsampling layer emits
//! the segmentation scores at input resolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv3d, ParamStore, UpConv3d};
use crate::tensor::Tensor;
use crate::volumes::{LabelSet, MaskVolume};

pub const STAGES: usize = 4;

/// Smoothing term of the soft Dice loss (numerator and denominator).
pub const SEG_DICE_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub input_size: [usize; 3],
    pub dropout_rate: f64,
    /// 2 (background/tumor) or 4 (background + NCR/NET, ED, ET; channel
    /// index equals the mask label code).
    pub seg_channels: usize,
}

impl BackboneConfig {
    pub fn toy(in_channels: usize) -> Self {
        BackboneConfig {
            in_channels,
            base_channels: 8,
            input_size: [32, 32, 32],
            dropout_rate: 0.5,
            seg_channels: 2,
        }
    }

    pub fn paper(in_channels: usize) -> Self {
        BackboneConfig {
            base_channels: 48,
            input_size: [96, 96, 96],
            ..Self::toy(in_channels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::config("backbone.in_channels must be at least 1"));
        }
        if self.base_channels == 0 {
            return Err(Error::config("backbone.base_channels must be at least 1"));
        }
        if let Some(d) = self.input_size.iter().find(|&&d| d == 0 || d % 16 != 0) {
            return Err(Error::config(format!(
                "backbone.input_size {:?}: {d} is not a positive multiple of 16",
                self.input_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "backbone.dropout_rate {} must lie in [0, 1)",
                self.dropout_rate
            )));
        }
        if self.seg_channels != 2 && self.seg_channels != 4 {
            return Err(Error::config(format!(
                "backbone.seg_channels must be 2 or 4, got {}",
                self.seg_channels
            )));
        }
        Ok(())
    }

    /// Channel count `dᵢ` of stage `i` (1-based).
    pub fn stage_channels(&self, stage: usize) -> usize {
        assert!((1..=STAGES).contains(&stage), "stage {stage} out of range");
        self.base_channels << (stage - 1)
    }

    /// Expected `(B, dᵢ, D/2ⁱ, H/2ⁱ, W/2ⁱ)` for stage `i` at input `dims`.
    pub fn stage_shape(&self, batch: usize, dims: [usize; 3], stage: usize) -> [usize; 5] {
        let s = dims.map(|d| d >> stage);
        [batch, self.stage_channels(stage), s[0], s[1], s[2]]
    }
}

/// Encoder outputs `x₁..x₄` as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub stages: [Var; STAGES],
}

impl FeaturePyramid {
    /// Stage `i` (1-based).
    pub fn stage(&self, i: usize) -> Var {
        self.stages[i - 1]
    }
}

/// Unnormalized `(B, seg_channels, D, H, W)` segmentation scores.
#[derive(Clone, Copy, Debug)]
pub struct SegLogits(pub Var);

#[derive(Clone, Debug)]
struct EncoderStage {
    down: Conv3d,
    refine: Conv3d,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    up: UpConv3d,
    refine: Conv3d,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    encoder: Vec<EncoderStage>,
    decoder: Vec<DecoderStage>,
    head: UpConv3d,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut encoder = Vec::with_capacity(STAGES);
        let mut cin = cfg.in_channels;
        for i in 1..=STAGES {
            let d = cfg.stage_channels(i);
            encoder.push(EncoderStage {
                down: Conv3d::new(store, &format!("encoder.s{i}.down"), cin, d, 3, 2, 1, rng),
                refine: Conv3d::new(store, &format!("encoder.s{i}.refine"), d, d, 3, 1, 1, rng),
            });
            cin = d;
        }
        // decoder[j] upsamples stage 4−j to the resolution of stage 3−j.
        let mut decoder = Vec::with_capacity(STAGES - 1);
        for i in (2..=STAGES).rev() {
            let (from, to) = (cfg.stage_channels(i), cfg.stage_channels(i - 1));
            decoder.push(DecoderStage {
                up: UpConv3d::new(store, &format!("decoder.u{i}.up"), from, to, rng),
                refine: Conv3d::new(store, &format!("decoder.u{i}.refine"), to, to, 3, 1, 1, rng),
            });
        }
        let head = UpConv3d::new(store, "decoder.head", cfg.base_channels, cfg.seg_channels, rng);
        Ok(Backbone {
            cfg,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<FeaturePyramid> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 5 {
            return Err(Error::shape(format!("encoder input must be (B, C, D, H, W), got {shape:?}")));
        }
        if shape[1] != self.cfg.in_channels {
            return Err(Error::shape(format!(
                "encoder expects {} input channels, got {}",
                self.cfg.in_channels, shape[1]
            )));
        }
        if let Some(d) = shape[2..].iter().find(|&&d| d == 0 || d % 16 != 0) {
            return Err(Error::shape(format!(
                "spatial dims {:?}: {d} is not divisible by 16",
                &shape[2..]
            )));
        }
        let mut h = x;
        let mut stages = [x; STAGES];
        for (i, st) in self.encoder.iter().enumerate() {
            let a = st.down.forward(g, store, h)?;
            let a = g.relu(a);
            let b = st.refine.forward(g, store, a)?;
            h = g.relu(b);
            stages[i] = h;
        }
        Ok(FeaturePyramid { stages })
    }

    pub fn decode(&self, g: &mut Graph, store: &ParamStore, p: &FeaturePyramid) -> Result<SegLogits> {
        let batch = g.shape(p.stage(1))[0];
        let dims = {
            let s = g.shape(p.stage(1));
            [s[2] * 2, s[3] * 2, s[4] * 2]
        };
        for i in 1..=STAGES {
            let want = self.cfg.stage_shape(batch, dims, i);
            if g.shape(p.stage(i)) != want {
                return Err(Error::shape(format!(
                    "pyramid stage {i} is {:?}, config expects {:?}",
                    g.shape(p.stage(i)),
                    want
                )));
            }
        }
        let mut h = p.stage(STAGES);
        for (j, st) in self.decoder.iter().enumerate() {
            let skip = p.stage(STAGES - 1 - j);
            let u = st.up.forward(g, store, h)?;
            let u = g.relu(u);
            let s = g.add(u, skip)?;
            let r = st.refine.forward(g, store, s)?;
            h = g.relu(r);
        }
        Ok(SegLogits(self.head.forward(g, store, h)?))
    }
}

/// One-hot `(B, seg_channels, D, H, W)` target. Two-channel heads are
/// supervised with the whole-tumor mask; four-channel heads need subregion
/// labels.
pub fn one_hot_target(masks: &[&MaskVolume], seg_channels: usize) -> Result<Tensor> {
    let first = masks.first().ok_or_else(|| Error::shape("no masks for segmentation target"))?;
    let dims = first.dims();
    let n: usize = dims.iter().product();
    let mut t = Tensor::zeros(&[masks.len(), seg_channels, dims[0], dims[1], dims[2]]);
    for (b, m) in masks.iter().enumerate() {
        if m.dims() != dims {
            return Err(Error::shape(format!("mask shapes {:?} and {:?} in one batch", m.dims(), dims)));
        }
        if seg_channels == 4 && m.label_set() == LabelSet::Binary && m.foreground_count() > 0 {
            return Err(Error::Label(
                "a binary whole-tumor mask cannot supervise the 4-channel subregion head".into(),
            ));
        }
        let data = t.data_mut();
        for (v, &l) in m.labels().iter().enumerate() {
            let class = if seg_channels == 2 { usize::from(l > 0) } else { l as usize };
            if class >= seg_channels {
                return Err(Error::Label(format!("label {l} outside a {seg_channels}-channel head")));
            }
            data[(b * seg_channels + class) * n + v] = 1.0;
        }
    }
    Ok(t)
}

/// Soft Dice loss of `softmax(S)` against a one-hot target, averaged over
/// the foreground classes.
pub fn seg_loss(g: &mut Graph, s: SegLogits, target: &Tensor) -> Result<Var> {
    if g.shape(s.0) != target.shape() {
        return Err(Error::shape(format!(
            "segmentation scores {:?} vs target {:?}",
            g.shape(s.0),
            target.shape()
        )));
    }
    let probs = g.softmax(s.0)?;
    let classes: Vec<usize> = (1..target.channels()).collect();
    g.soft_dice(probs, target.clone(), &classes, SEG_DICE_EPS)
}

/// Tumor probability `P` of shape `(B, 1, D, H, W)`: total foreground mass
/// of the softmax.
pub fn tumor_probability(g: &mut Graph, s: SegLogits) -> Result<Var> {
    let probs = g.softmax(s.0)?;
    let c = g.shape(probs)[1];
    g.channel_sum(probs, 1, c)
}
