//! The full multi-task network: shared encoder/decoder, TAFE heads, the CMD
//! branch and dual-stream fusion, wired per [`ModelConfig`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{one_hot_target, seg_loss, tumor_probability, Backbone, BackboneConfig, FeaturePyramid, SegLogits};
use crate::cmd::{Cmd, CmdConfig, CmdOutput};
use crate::error::{Error, Result};
use crate::fusion::{fuse_dsf, joint_loss, ClassificationBundle, DsfConfig, FuseLevel, LossWeights, MlpHead, Source};
use crate::graph::{Graph, Var};
use crate::nn::ParamStore;
use crate::tafe::{fuse_stages, StageSet, TafeHead};
use crate::task::Task;
use crate::tensor::Tensor;
use crate::volumes::{Case, Modality};

/// Which module produces the final logits of the primary task.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierMode {
    Tafe,
    Cmd,
    #[default]
    Dsf,
}

impl ClassifierMode {
    pub const ALL: [ClassifierMode; 3] = [ClassifierMode::Tafe, ClassifierMode::Cmd, ClassifierMode::Dsf];

    pub fn uses_tafe(self) -> bool {
        self != ClassifierMode::Cmd
    }

    pub fn uses_cmd(self) -> bool {
        self != ClassifierMode::Tafe
    }

    pub fn source(self) -> Source {
        match self {
            ClassifierMode::Tafe => Source::Tafe,
            ClassifierMode::Cmd => Source::Cmd,
            ClassifierMode::Dsf => Source::Dsf,
        }
    }
}

impl fmt::Display for ClassifierMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.source().fmt(f)
    }
}

impl FromStr for ClassifierMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tafe" => Ok(ClassifierMode::Tafe),
            "cmd" => Ok(ClassifierMode::Cmd),
            "dsf" => Ok(ClassifierMode::Dsf),
            other => Err(Error::config(format!("unknown classifier mode '{other}' (tafe, cmd, dsf)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub task: Task,
    /// Further classification tasks trained on the same trunk with their
    /// own TAFE heads.
    #[serde(default)]
    pub aux_tasks: Vec<Task>,
    /// Modalities stacked as encoder input channels, in this order.
    pub modalities: Vec<Modality>,
    pub backbone: BackboneConfig,
    pub stages: StageSet,
    pub head: ClassifierMode,
    #[serde(default)]
    pub cmd: CmdConfig,
    #[serde(default)]
    pub dsf: DsfConfig,
    #[serde(default)]
    pub loss: LossWeights,
    /// Keep decoder weights fixed during training.
    #[serde(default)]
    pub freeze_segmentation: bool,
}

impl ModelConfig {
    /// Small IDH model on four 32³ modalities.
    pub fn toy(task: Task) -> Self {
        let head = if task == Task::Idh {
            ClassifierMode::Dsf
        } else {
            ClassifierMode::Tafe
        };
        ModelConfig {
            task,
            aux_tasks: Vec::new(),
            modalities: Modality::ALL.to_vec(),
            backbone: BackboneConfig::toy(4),
            stages: StageSet::default(),
            head,
            cmd: CmdConfig::default(),
            dsf: DsfConfig::default(),
            loss: LossWeights::default(),
            freeze_segmentation: false,
        }
    }

    pub fn with_modalities(mut self, modalities: Vec<Modality>) -> Self {
        self.backbone.in_channels = modalities.len();
        self.modalities = modalities;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.cmd.validate()?;
        self.loss.validate()?;
        if self.modalities.is_empty() {
            return Err(Error::config("modality subset must not be empty"));
        }
        let mut seen = self.modalities.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.modalities.len() {
            return Err(Error::config(format!("repeated modality in {:?}", self.modalities)));
        }
        if self.backbone.in_channels != self.modalities.len() {
            return Err(Error::config(format!(
                "backbone.in_channels {} does not match {} modalities",
                self.backbone.in_channels,
                self.modalities.len()
            )));
        }
        if self.task == Task::Segmentation {
            if self.loss.alpha <= 0.0 {
                return Err(Error::config("segmentation task needs loss.alpha > 0"));
            }
        } else if self.head.uses_cmd() && self.task != Task::Idh {
            return Err(Error::config(format!(
                "{} head is only defined for the IDH task, not {}",
                self.head, self.task
            )));
        }
        for t in &self.aux_tasks {
            if !t.is_classification() || *t == self.task {
                return Err(Error::config(format!("invalid auxiliary task {t}")));
            }
        }
        if self.dsf.hidden_width == 0 {
            return Err(Error::config("dsf.hidden_width must be at least 1"));
        }
        Ok(())
    }

    /// Classification tasks with a head, primary first.
    pub fn classification_tasks(&self) -> Vec<Task> {
        let mut v = Vec::new();
        if self.task.is_classification() {
            v.push(self.task);
        }
        v.extend(self.aux_tasks.iter().copied());
        v
    }

    /// Whether the decoder has to run during training.
    pub fn needs_decoder(&self) -> bool {
        self.loss.alpha > 0.0 || (self.task == Task::Idh && self.head.uses_cmd()) || self.task == Task::Segmentation
    }

    /// Model trained without segmentation guidance.
    pub fn is_unguided(&self) -> bool {
        self.loss.is_unguided()
    }
}

/// A batch prepared for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    /// `(B, M, D, H, W)` in the configured modality order.
    pub stack: Tensor,
    /// `(B, 1, D, H, W)` inputs of the CMD branch.
    pub t2: Option<Tensor>,
    pub flair: Option<Tensor>,
    /// One-hot segmentation target, present when every case has a mask.
    pub seg_target: Option<Tensor>,
    pub labels: BTreeMap<Task, Vec<Option<usize>>>,
    pub case_ids: Vec<String>,
}

impl ModelInput {
    pub fn from_cases(cases: &[&Case], cfg: &ModelConfig) -> Result<Self> {
        let first = cases.first().ok_or_else(|| Error::Data("empty batch".into()))?;
        let dims = first.dims();
        let n: usize = dims.iter().product();
        let batch = cases.len();
        let m = cfg.modalities.len();
        let mut stack = Vec::with_capacity(batch * m * n);
        for c in cases {
            if c.dims() != dims {
                return Err(Error::Case(format!(
                    "{} has shape {:?}, batch shape is {:?}",
                    c.case_id,
                    c.dims(),
                    dims
                )));
            }
            for &modality in &cfg.modalities {
                let v = c.volume(modality).ok_or_else(|| {
                    Error::Data(format!("{} lacks {modality}, required by the model", c.case_id))
                })?;
                stack.extend_from_slice(v.data());
            }
        }
        let shape = [batch, m, dims[0], dims[1], dims[2]];
        let stack = Tensor::from_vec(&shape, stack)?;

        let single = |modality: Modality| -> Result<Option<Tensor>> {
            if !cases.iter().all(|c| c.has_modality(modality)) {
                return Ok(None);
            }
            let data = cases
                .iter()
                .flat_map(|c| c.volume(modality).expect("checked").data().iter().copied())
                .collect();
            Ok(Some(Tensor::from_vec(&[batch, 1, dims[0], dims[1], dims[2]], data)?))
        };
        let t2 = single(Modality::T2)?;
        let flair = single(Modality::Flair)?;

        let masks: Option<Vec<_>> = cases.iter().map(|c| c.mask.as_ref()).collect();
        let seg_target = match masks {
            Some(ms) => Some(one_hot_target(&ms, cfg.backbone.seg_channels)?),
            None => None,
        };
        let labels = cfg
            .classification_tasks()
            .into_iter()
            .map(|t| (t, cases.iter().map(|c| t.class_index(&c.labels)).collect()))
            .collect();
        Ok(ModelInput {
            stack,
            t2,
            flair,
            seg_target,
            labels,
            case_ids: cases.iter().map(|c| c.case_id.clone()).collect(),
        })
    }

    pub fn batch(&self) -> usize {
        self.stack.batch()
    }
}

/// Graph nodes of the network inputs.
#[derive(Clone, Copy, Debug)]
pub struct InputVars {
    pub stack: Var,
    pub t2: Option<Var>,
    pub flair: Option<Var>,
}

impl InputVars {
    /// Untracked inputs.
    pub fn constants(g: &mut Graph, input: &ModelInput) -> Self {
        InputVars {
            stack: g.constant(input.stack.clone()),
            t2: input.t2.clone().map(|t| g.constant(t)),
            flair: input.flair.clone().map(|t| g.constant(t)),
        }
    }

    /// Gradient-tracked inputs (saliency, gradient checks).
    pub fn tracked(g: &mut Graph, input: &ModelInput) -> Self {
        InputVars {
            stack: g.input(input.stack.clone()),
            t2: input.t2.clone().map(|t| g.input(t)),
            flair: input.flair.clone().map(|t| g.input(t)),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TaskOutput {
    pub tafe_vector: Option<Var>,
    pub tafe_logits: Option<Var>,
    pub cmd: Option<CmdOutput>,
    pub final_logits: Var,
    pub source: Source,
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub pyramid: FeaturePyramid,
    pub seg: Option<SegLogits>,
    pub tumor_probability: Option<Var>,
    pub tasks: BTreeMap<Task, TaskOutput>,
}

#[derive(Clone, Debug)]
pub struct MtsUnet {
    cfg: ModelConfig,
    store: ParamStore,
    backbone: Backbone,
    tafe_heads: BTreeMap<Task, TafeHead>,
    cmd: Option<Cmd>,
    dsf: Option<MlpHead>,
}

impl MtsUnet {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, cfg.backbone.clone(), &mut rng)?;
        let dropout = cfg.backbone.dropout_rate;
        let z_len = cfg.stages.fused_len(&cfg.backbone);

        let mut tafe_heads = BTreeMap::new();
        for t in cfg.classification_tasks() {
            if t != cfg.task || cfg.head.uses_tafe() {
                let name = format!("tafe.{}", t.name());
                tafe_heads.insert(t, TafeHead::new(&mut store, &name, z_len, dropout, &mut rng));
            }
        }
        let (cmd, dsf) = if cfg.task == Task::Idh && cfg.head.uses_cmd() {
            let cmd = Cmd::new(&mut store, cfg.cmd.clone(), dropout, &mut rng)?;
            let dsf = (cfg.head == ClassifierMode::Dsf).then(|| {
                let n_in = match cfg.dsf.fuse_level {
                    FuseLevel::Logits => 4,
                    FuseLevel::Features => z_len + 2 * cfg.cmd.channels,
                };
                MlpHead::new(&mut store, "dsf", n_in, cfg.dsf.hidden_width, &mut rng)
            });
            (Some(cmd), dsf)
        } else {
            (None, None)
        };
        if cfg.freeze_segmentation {
            store.set_frozen("decoder", true);
        }
        Ok(MtsUnet {
            cfg,
            store,
            backbone,
            tafe_heads,
            cmd,
            dsf,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn cmd(&self) -> Option<&Cmd> {
        self.cmd.as_ref()
    }

    pub fn dsf(&self) -> Option<&MlpHead> {
        self.dsf.as_ref()
    }

    pub fn tafe_head(&self, task: Task) -> Option<&TafeHead> {
        self.tafe_heads.get(&task)
    }

    /// Forward pass. `with_seg` forces the decoder to run even when no
    /// training term needs it.
    pub fn forward(&self, g: &mut Graph, x: InputVars, with_seg: bool) -> Result<ForwardPass> {
        let store = &self.store;
        let pyramid = self.backbone.encode(g, store, x.stack)?;
        let seg = if with_seg || self.cfg.needs_decoder() {
            Some(self.backbone.decode(g, store, &pyramid)?)
        } else {
            None
        };
        let tumor = match seg {
            Some(s) if self.cmd.is_some() => Some(tumor_probability(g, s)?),
            _ => None,
        };

        let mut tasks = BTreeMap::new();
        let z = if self.tafe_heads.is_empty() && self.dsf.is_none() {
            None
        } else {
            Some(fuse_stages(g, &pyramid, &self.cfg.stages)?)
        };
        for t in self.cfg.classification_tasks() {
            let (tafe_vector, tafe_logits) = match self.tafe_heads.get(&t) {
                Some(head) => {
                    let z = z.expect("fused vector");
                    (Some(z), Some(head.forward(g, store, z)?))
                }
                None => (z, None),
            };
            let cmd_out = match (&self.cmd, t == self.cfg.task) {
                (Some(cmd), true) => {
                    let (t2, flair) = match (x.t2, x.flair) {
                        (Some(a), Some(b)) => (a, b),
                        _ => return Err(Error::Data("the CMD branch needs T2 and FLAIR volumes".into())),
                    };
                    Some(cmd.forward(g, store, t2, flair, tumor.expect("decoder ran"))?)
                }
                _ => None,
            };
            let (final_logits, source) = if t != self.cfg.task {
                (tafe_logits.expect("aux head"), Source::Tafe)
            } else {
                match self.cfg.head {
                    ClassifierMode::Tafe => (tafe_logits.expect("tafe head"), Source::Tafe),
                    ClassifierMode::Cmd => (cmd_out.expect("cmd branch").logits, Source::Cmd),
                    ClassifierMode::Dsf => {
                        let c = cmd_out.expect("cmd branch");
                        let fused = match self.cfg.dsf.fuse_level {
                            FuseLevel::Logits => fuse_dsf(g, tafe_logits.expect("tafe head"), Some(c.logits))?,
                            FuseLevel::Features => fuse_dsf(g, tafe_vector.expect("fused vector"), Some(c.pooled))?,
                        };
                        let mlp = self.dsf.as_ref().expect("dsf head");
                        (mlp.forward(g, store, fused)?, Source::Dsf)
                    }
                }
            };
            tasks.insert(
                t,
                TaskOutput {
                    tafe_vector,
                    tafe_logits,
                    cmd: cmd_out,
                    final_logits,
                    source,
                },
            );
        }
        Ok(ForwardPass {
            pyramid,
            seg,
            tumor_probability: tumor,
            tasks,
        })
    }

    /// `α·L_seg + β·Σ_tasks L_cls` for one batch.
    pub fn loss(&self, g: &mut Graph, fwd: &ForwardPass, input: &ModelInput) -> Result<Var> {
        let w = self.cfg.loss;
        let seg = if w.alpha > 0.0 {
            let target = input.seg_target.as_ref().ok_or_else(|| {
                Error::Data(format!(
                    "segmentation-guided training needs a mask for every case in [{}]",
                    input.case_ids.join(", ")
                ))
            })?;
            let s = fwd.seg.ok_or_else(|| Error::Data("decoder output missing".into()))?;
            Some(seg_loss(g, s, target)?)
        } else {
            None
        };
        let mut ce_terms = Vec::new();
        if w.beta > 0.0 {
            for (t, out) in &fwd.tasks {
                let labels = &input.labels[t];
                if labels.iter().any(Option::is_some) {
                    ce_terms.push((g.cross_entropy_partial(out.final_logits, labels)?, 1.0));
                } else if *t == self.cfg.task {
                    return Err(Error::Data(format!("no {t} labels in batch")));
                }
            }
        }
        let cls = if ce_terms.is_empty() {
            None
        } else {
            Some(g.weighted_sum(&ce_terms)?)
        };
        let w = if self.cfg.task == Task::Segmentation {
            LossWeights { beta: 0.0, ..w }
        } else {
            w
        };
        joint_loss(g, seg, cls, w)
    }

    /// Eval-mode prediction.
    pub fn predict(&self, input: &ModelInput, with_seg: bool) -> Result<Prediction> {
        let mut g = Graph::eval();
        let x = InputVars::constants(&mut g, input);
        let fwd = self.forward(&mut g, x, with_seg)?;
        self.collect(&g, &fwd)
    }

    pub fn collect(&self, g: &Graph, fwd: &ForwardPass) -> Result<Prediction> {
        let mut bundles = BTreeMap::new();
        for (t, out) in &fwd.tasks {
            let bundle = ClassificationBundle::new(
                *t,
                out.tafe_logits.map(|v| g.value(v).clone()),
                out.cmd.map(|c| g.value(c.logits).clone()),
                g.value(out.final_logits).clone(),
                out.source,
            )?;
            bundles.insert(*t, bundle);
        }
        Ok(Prediction {
            seg_logits: fwd.seg.map(|s| g.value(s.0).clone()),
            bundles,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub seg_logits: Option<Tensor>,
    pub bundles: BTreeMap<Task, ClassificationBundle>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volumes::{generate_phantom, PhantomSpec};

    fn small(task: Task, head: ClassifierMode) -> ModelConfig {
        let mut cfg = ModelConfig::toy(task);
        cfg.head = head;
        cfg.backbone.base_channels = 2;
        cfg.backbone.input_size = [16, 16, 16];
        cfg.cmd.channels = 4;
        cfg
    }

    fn phantoms(n: u64) -> Vec<Case> {
        let spec = PhantomSpec {
            grid: [16, 16, 16],
            core_radius: 2.5,
            rim_thickness: 1.5,
            ..PhantomSpec::default()
        };
        (0..n)
            .map(|s| {
                generate_phantom(
                    &PhantomSpec {
                        mismatch: s % 2 == 0,
                        ..spec
                    },
                    s,
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn heads_follow_the_mode() {
        let cases = phantoms(2);
        let refs: Vec<&Case> = cases.iter().collect();
        for head in ClassifierMode::ALL {
            let cfg = small(Task::Idh, head);
            let model = MtsUnet::new(cfg.clone(), 0).unwrap();
            let input = ModelInput::from_cases(&refs, &cfg).unwrap();
            let pred = model.predict(&input, false).unwrap();
            let b = &pred.bundles[&Task::Idh];
            assert_eq!(b.source, head.source());
            assert_eq!(b.c_cmd.is_some(), head.uses_cmd());
            assert_eq!(b.c_tafe.is_some(), head.uses_tafe());
            assert_eq!(b.c_final.shape(), &[2, 2]);
        }
    }

    #[test]
    fn cmd_heads_are_idh_only() {
        let cfg = small(Task::Grade, ClassifierMode::Dsf);
        assert!(matches!(MtsUnet::new(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn loss_is_finite_and_includes_aux_tasks() {
        let cases = phantoms(2);
        let refs: Vec<&Case> = cases.iter().collect();
        let mut cfg = small(Task::Idh, ClassifierMode::Dsf);
        cfg.aux_tasks = vec![Task::Grade];
        let model = MtsUnet::new(cfg.clone(), 0).unwrap();
        let input = ModelInput::from_cases(&refs, &cfg).unwrap();
        let mut g = Graph::train(0);
        let x = InputVars::constants(&mut g, &input);
        let fwd = model.forward(&mut g, x, false).unwrap();
        assert!(fwd.tasks.contains_key(&Task::Grade));
        let l = model.loss(&mut g, &fwd, &input).unwrap();
        assert!(g.value(l).item().is_finite() && g.value(l).item() > 0.0);
    }

    #[test]
    fn unguided_tafe_skips_the_decoder() {
        let cases = phantoms(1);
        let mut cfg = small(Task::Idh, ClassifierMode::Tafe);
        cfg.loss.alpha = 0.0;
        let model = MtsUnet::new(cfg.clone(), 0).unwrap();
        let input = ModelInput::from_cases(&[&cases[0]], &cfg).unwrap();
        let mut g = Graph::eval();
        let x = InputVars::constants(&mut g, &input);
        let fwd = model.forward(&mut g, x, false).unwrap();
        assert!(fwd.seg.is_none());
    }

    #[test]
    fn subset_models_take_their_own_stack() {
        let cases = phantoms(1);
        let cfg = small(Task::Idh, ClassifierMode::Dsf).with_modalities(vec![Modality::T1, Modality::T2]);
        let model = MtsUnet::new(cfg.clone(), 0).unwrap();
        let input = ModelInput::from_cases(&[&cases[0]], &cfg).unwrap();
        assert_eq!(input.stack.shape()[1], 2);
        assert!(input.flair.is_some());
        model.predict(&input, true).unwrap();
    }
}
