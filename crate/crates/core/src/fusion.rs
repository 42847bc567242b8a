//! Dual-stream fusion of the TAFE and CMD outputs, the MLP head and the
//! joint segmentation/classification loss.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{softmax_channels, Graph, Var};
use crate::nn::{Linear, ParamStore};
use crate::task::Task;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || !(self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::config(format!(
                "loss weights must be non-negative, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        if self.alpha + self.beta <= 0.0 {
            return Err(Error::config("loss.alpha and loss.beta cannot both be zero"));
        }
        Ok(())
    }

    /// No segmentation supervision: the unguided encoder baseline.
    pub fn is_unguided(&self) -> bool {
        self.alpha == 0.0
    }
}

/// What the fusion MLP consumes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FuseLevel {
    /// The two-logit outputs of each stream.
    #[default]
    Logits,
    /// The pooled vectors feeding each stream's final linear layer.
    Features,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DsfConfig {
    pub hidden_width: usize,
    pub fuse_level: FuseLevel,
}

impl Default for DsfConfig {
    fn default() -> Self {
        DsfConfig {
            hidden_width: 16,
            fuse_level: FuseLevel::Logits,
        }
    }
}

/// `[C_TAFE, C_CMD]` along the feature axis.
pub fn fuse_dsf(g: &mut Graph, c_tafe: Var, c_cmd: Option<Var>) -> Result<Var> {
    let c_cmd = c_cmd.ok_or_else(|| Error::config("dual-stream fusion needs both the TAFE and CMD streams"))?;
    g.concat(&[c_tafe, c_cmd])
}

/// Hidden ReLU layer followed by a linear map to two logits.
#[derive(Clone, Debug)]
pub struct MlpHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl MlpHead {
    pub fn new(store: &mut ParamStore, name: &str, in_features: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        MlpHead {
            hidden: Linear::new(store, &format!("{name}.hidden"), in_features, hidden, rng),
            out: Linear::new(store, &format!("{name}.out"), hidden, 2, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let want = self.hidden.in_features(store);
        let got = g.shape(x);
        if got.len() != 2 || got[1] != want {
            return Err(Error::shape(format!("fusion MLP expects (B, {want}), got {got:?}")));
        }
        let h = self.hidden.forward(g, store, x)?;
        let h = g.relu(h);
        self.out.forward(g, store, h)
    }
}

/// `α·seg + β·cls`; a term whose weight is zero may be absent.
pub fn joint_loss(g: &mut Graph, seg: Option<Var>, cls: Option<Var>, w: LossWeights) -> Result<Var> {
    w.validate()?;
    let mut terms = Vec::new();
    for (v, weight, name) in [(seg, w.alpha, "segmentation"), (cls, w.beta, "classification")] {
        match v {
            Some(v) => terms.push((v, weight)),
            None if weight > 0.0 => {
                return Err(Error::config(format!("{name} loss weight is {weight} but no {name} loss was given")))
            }
            None => {}
        }
    }
    g.weighted_sum(&terms)
}

/// Which module produced the final logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    #[serde(rename = "TAFE")]
    Tafe,
    #[serde(rename = "CMD")]
    Cmd,
    #[serde(rename = "DSF")]
    Dsf,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Tafe => "TAFE",
            Source::Cmd => "CMD",
            Source::Dsf => "DSF",
        })
    }
}

/// Per-task classifier outputs for a batch; every tensor is `(B, 2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationBundle {
    pub task: Task,
    pub c_tafe: Option<Tensor>,
    pub c_cmd: Option<Tensor>,
    pub c_final: Tensor,
    pub probabilities: Tensor,
    pub source: Source,
}

impl ClassificationBundle {
    pub fn new(
        task: Task,
        c_tafe: Option<Tensor>,
        c_cmd: Option<Tensor>,
        c_final: Tensor,
        source: Source,
    ) -> Result<Self> {
        if c_final.rank() != 2 || c_final.channels() != 2 {
            return Err(Error::shape(format!("final logits must be (B, 2), got {:?}", c_final.shape())));
        }
        let probabilities = softmax_channels(&c_final);
        Ok(ClassificationBundle {
            task,
            c_tafe,
            c_cmd,
            c_final,
            probabilities,
            source,
        })
    }

    /// Bundle from already-averaged `(B, 2)` probabilities; `c_final` holds
    /// their logarithms.
    pub fn from_probabilities(task: Task, probabilities: Tensor, source: Source) -> Result<Self> {
        if probabilities.rank() != 2 || probabilities.channels() != 2 {
            return Err(Error::shape(format!(
                "probabilities must be (B, 2), got {:?}",
                probabilities.shape()
            )));
        }
        if probabilities.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Domain("probabilities must lie in [0, 1]".into()));
        }
        Ok(ClassificationBundle {
            task,
            c_tafe: None,
            c_cmd: None,
            c_final: probabilities.map(f64::ln),
            probabilities,
            source,
        })
    }

    pub fn batch(&self) -> usize {
        self.c_final.batch()
    }

    /// Probability of class 1 for item `b`.
    pub fn positive_probability(&self, b: usize) -> f64 {
        self.probabilities.data()[b * 2 + 1]
    }

    pub fn predicted_class(&self, b: usize) -> usize {
        let p = &self.probabilities.data()[b * 2..b * 2 + 2];
        usize::from(p[1] > p[0])
    }
}
