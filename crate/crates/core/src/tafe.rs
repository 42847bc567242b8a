//! Tumor-aware feature encoding: pooled multi-scale encoder features and a
//! fully connected classification head.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, FeaturePyramid, STAGES};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Linear, ParamStore};

pub use crate::graph::gap;

/// Ascending, nonempty set of encoder stages (1-based).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct StageSet(Vec<usize>);

impl StageSet {
    pub fn new(mut stages: Vec<usize>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::config("stage set must not be empty"));
        }
        if let Some(s) = stages.iter().find(|&&s| !(1..=STAGES).contains(&s)) {
            return Err(Error::config(format!("stage {s} outside 1..={STAGES}")));
        }
        stages.sort_unstable();
        stages.dedup();
        Ok(StageSet(stages))
    }

    /// Preset `TAFE-n`: the deepest `n` stages.
    pub fn preset(n: usize) -> Result<Self> {
        if !(1..=STAGES).contains(&n) {
            return Err(Error::config(format!("no TAFE-{n} preset")));
        }
        Self::new((STAGES + 1 - n..=STAGES).collect())
    }

    pub fn stages(&self) -> &[usize] {
        &self.0
    }

    /// Length of the fused vector, `Σ dᵢ` over the set.
    pub fn fused_len(&self, cfg: &BackboneConfig) -> usize {
        self.0.iter().map(|&s| cfg.stage_channels(s)).sum()
    }

    /// `n` if the set equals a `TAFE-n` preset.
    pub fn preset_depth(&self) -> Option<usize> {
        let n = self.0.len();
        (Self::preset(n).ok().as_ref() == Some(self)).then_some(n)
    }
}

impl Default for StageSet {
    fn default() -> Self {
        Self::preset(STAGES).expect("valid preset")
    }
}

impl fmt::Display for StageSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.preset_depth() {
            Some(n) => write!(f, "TAFE-{n}"),
            None => {
                let parts: Vec<String> = self.0.iter().map(|s| s.to_string()).collect();
                write!(f, "{}", parts.join(","))
            }
        }
    }
}

impl FromStr for StageSet {
    type Err = Error;

    /// Accepts `TAFE-n` / `SwinT-n` preset names or a comma list such as `2,4`.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let lower = t.to_ascii_lowercase();
        for prefix in ["tafe-", "swint-"] {
            if let Some(n) = lower.strip_prefix(prefix) {
                let n = n.parse().map_err(|_| Error::config(format!("unknown stage preset '{t}'")))?;
                return Self::preset(n);
            }
        }
        let stages = t
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::config(format!("unknown stage preset '{t}'")))?;
        Self::new(stages)
    }
}

impl TryFrom<String> for StageSet {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<StageSet> for String {
    fn from(s: StageSet) -> String {
        s.to_string()
    }
}

/// `z = [gap(x_{i₁}), gap(x_{i₂}), …]` in ascending stage order.
pub fn fuse_stages(g: &mut Graph, p: &FeaturePyramid, stages: &StageSet) -> Result<Var> {
    let pooled = stages
        .stages()
        .iter()
        .map(|&s| g.gap(p.stage(s)))
        .collect::<Result<Vec<_>>>()?;
    if pooled.len() == 1 {
        return Ok(pooled[0]);
    }
    g.concat(&pooled)
}

/// Dropout followed by one linear layer to two logits.
#[derive(Clone, Debug)]
pub struct TafeHead {
    pub fc: Linear,
    pub dropout: f64,
}

impl TafeHead {
    pub fn new(store: &mut ParamStore, name: &str, in_features: usize, dropout: f64, rng: &mut impl Rng) -> Self {
        TafeHead {
            fc: Linear::new(store, &format!("{name}.fc"), in_features, 2, rng),
            dropout,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let want = self.fc.in_features(store);
        let got = g.shape(z);
        if got.len() != 2 || got[1] != want {
            return Err(Error::shape(format!("TAFE head expects (B, {want}), got {got:?}")));
        }
        let z = g.dropout(z, self.dropout);
        self.fc.forward(g, store, z)
    }
}
