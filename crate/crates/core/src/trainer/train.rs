use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment, AugmentConfig};
use super::folds::FoldPlan;
use crate::checkpoint::save_checkpoint;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{binary_metrics, dice_region, Region};
use crate::model::{InputVars, ModelConfig, ModelInput, MtsUnet, Prediction};
use crate::nn::ParamStore;
use crate::task::Task;
use crate::volumes::{Case, MaskVolume, Modality};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub folds: usize,
    pub seed: u64,
    /// `None` disables online augmentation.
    pub augment: Option<AugmentConfig>,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        TrainConfig {
            model,
            max_epochs: 100,
            batch_size: 2,
            learning_rate: 1e-4,
            patience: 5,
            folds: 5,
            seed: 0,
            augment: Some(AugmentConfig::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.patience < 1 {
            return Err(Error::config("train.patience must be at least 1"));
        }
        if self.max_epochs < 1 || self.batch_size < 1 {
            return Err(Error::config("train.max_epochs and train.batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("train.learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.folds < 2 {
            return Err(Error::config("train.folds must be at least 2"));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

/// Why a case cannot take part in training `cfg`, if it cannot.
pub fn case_ineligibility(case: &Case, cfg: &ModelConfig) -> Option<String> {
    let mut need: Vec<Modality> = cfg.modalities.clone();
    need.extend_from_slice(cfg.task.required_modalities());
    if cfg.task == Task::Idh && cfg.head.uses_cmd() {
        need.extend([Modality::T2, Modality::Flair]);
    }
    need.sort();
    need.dedup();
    let missing: Vec<Modality> = need.into_iter().filter(|m| !case.has_modality(*m)).collect();
    if !missing.is_empty() {
        let names: Vec<String> = missing.iter().map(|m| m.to_string()).collect();
        return Some(format!("missing {}", names.join(", ")));
    }
    if cfg.task.is_classification() && cfg.task.class_index(&case.labels).is_none() {
        return Some(format!("no {} label", cfg.task));
    }
    if !cfg.is_unguided() && case.mask.is_none() {
        return Some("no segmentation mask for guided training".into());
    }
    None
}

/// Fail with every ineligible case listed.
pub fn check_eligible(cases: &[&Case], cfg: &ModelConfig) -> Result<()> {
    let bad: Vec<String> = cases
        .iter()
        .filter_map(|c| case_ineligibility(c, cfg).map(|why| format!("{}: {why}", c.case_id)))
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Data(format!(
            "{} case(s) not eligible for {}: {}",
            bad.len(),
            cfg.task,
            bad.join("; ")
        )))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Wait,
    Stop,
}

/// Stop once the monitored loss has failed to improve on its best value for
/// `patience` consecutive epochs.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, loss: f64) -> StopDecision {
        match self.best {
            Some((_, b)) if !(loss < b) => {
                self.stale += 1;
                if self.stale >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Wait
                }
            }
            _ => {
                self.best = Some((epoch, loss));
                self.stale = 0;
                StopDecision::Improved
            }
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|b| b.0)
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.best.map(|b| b.1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// AUC for classification, mean whole-tumor Dice for segmentation;
    /// empty when undefined on the validation fold.
    pub val_metric: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub fold: usize,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_epoch: usize,
    pub early_stopped: bool,
    /// Trained without segmentation supervision.
    pub unguided: bool,
    pub checkpoint: Option<PathBuf>,
}

impl RunRecord {
    pub fn best(&self) -> &EpochRecord {
        &self.history[self.best_epoch - 1]
    }

    pub fn write_history(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        for r in &self.history {
            w.serialize(r).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub struct FoldRun {
    pub record: RunRecord,
    /// Weights from the best validation epoch.
    pub model: MtsUnet,
}

fn select<'a>(cases: &'a [Case], ids: &[String]) -> Result<Vec<&'a Case>> {
    let by_id: BTreeMap<&str, &Case> = cases.iter().map(|c| (c.case_id.as_str(), c)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Data(format!("fold plan names unknown case '{id}'")))
        })
        .collect()
}

/// Loss and predictions of `model` on `cases` in eval mode.
pub fn evaluate(model: &MtsUnet, cases: &[&Case], batch_size: usize, with_seg: bool) -> Result<(f64, Vec<Prediction>)> {
    let mut total = 0.0;
    let mut preds = Vec::new();
    for chunk in cases.chunks(batch_size.max(1)) {
        let input = ModelInput::from_cases(chunk, model.config())?;
        let mut g = Graph::eval();
        let x = InputVars::constants(&mut g, &input);
        let fwd = model.forward(&mut g, x, with_seg)?;
        let loss = model.loss(&mut g, &fwd, &input)?;
        total += g.value(loss).item() * chunk.len() as f64;
        preds.push(model.collect(&g, &fwd)?);
    }
    Ok((total / cases.len() as f64, preds))
}

/// Argmax label map from `(B, C, D, H, W)` segmentation logits, item `b`.
pub fn seg_argmax(logits: &crate::Tensor, b: usize, like: &MaskVolume) -> Result<MaskVolume> {
    let c = logits.channels();
    let n = logits.inner();
    let item = logits.item_slice(b);
    let labels = (0..n)
        .map(|i| {
            (0..c)
                .max_by(|&p, &q| item[p * n + i].total_cmp(&item[q * n + i]))
                .expect("channels") as u8
        })
        .collect();
    let set = if c == 2 { crate::volumes::LabelSet::Binary } else { like.label_set() };
    MaskVolume::new(like.dims(), like.spacing(), set, labels)
}

fn val_metric(cfg: &ModelConfig, cases: &[&Case], preds: &[Prediction]) -> Option<f64> {
    if cfg.task == Task::Segmentation {
        let mut dices = Vec::new();
        let mut i = 0;
        for p in preds {
            let logits = p.seg_logits.as_ref()?;
            for b in 0..logits.batch() {
                let gt = cases[i].mask.as_ref()?;
                let pred = seg_argmax(logits, b, gt).ok()?;
                dices.push(dice_region(&pred, gt, Region::Whole).ok()?);
                i += 1;
            }
        }
        return Some(dices.iter().sum::<f64>() / dices.len() as f64);
    }
    let probs: Vec<f64> = preds
        .iter()
        .flat_map(|p| {
            let b = &p.bundles[&cfg.task];
            (0..b.batch()).map(move |i| b.positive_probability(i))
        })
        .collect();
    let labels: Vec<usize> = cases.iter().map(|c| cfg.task.class_index(&c.labels).unwrap_or(0)).collect();
    binary_metrics(&probs, &labels).ok()?.roc.map(|r| r.auc)
}

fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(seed ^ 0x9e3779b97f4a7c15, |h, &p| (h ^ p).wrapping_mul(0x100000001b3).rotate_left(17))
}

/// Train on every fold but `fold`, select on `fold` by validation loss.
/// When `out_dir` is given, writes `fold<i>/checkpoint` and
/// `fold<i>/history.csv` beneath it.
pub fn train_fold(cfg: &TrainConfig, plan: &FoldPlan, fold: usize, cases: &[Case], out_dir: Option<&Path>) -> Result<FoldRun> {
    cfg.validate()?;
    if fold >= plan.k() {
        return Err(Error::config(format!("fold {fold} outside 0..{}", plan.k())));
    }
    let train = select(cases, &plan.training(fold))?;
    let val = select(cases, plan.validation(fold))?;
    train_on(cfg, fold, &train, &val, out_dir)
}

/// Training loop on explicit train/validation sets.
pub fn train_on(cfg: &TrainConfig, fold: usize, train: &[&Case], val: &[&Case], out_dir: Option<&Path>) -> Result<FoldRun> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation sets must both be nonempty".into()));
    }
    check_eligible(train, &cfg.model)?;
    check_eligible(val, &cfg.model)?;

    let mut model = MtsUnet::new(cfg.model.clone(), derive_seed(cfg.seed, &[fold as u64]))?;
    let mut adam = crate::optim::Adam::new(model.params(), cfg.learning_rate);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best: Option<ParamStore> = None;
    let mut history = Vec::new();
    let mut early_stopped = false;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[fold as u64, epoch as u64]));
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let step_seed = derive_seed(cfg.seed, &[fold as u64, epoch as u64, step as u64]);
            let owned: Vec<Case> = match &cfg.augment {
                Some(a) => chunk
                    .iter()
                    .map(|&i| augment(train[i], step_seed, a))
                    .collect::<Result<_>>()?,
                None => chunk.iter().map(|&i| train[i].clone()).collect(),
            };
            let refs: Vec<&Case> = owned.iter().collect();
            let input = ModelInput::from_cases(&refs, model.config())?;
            let mut g = Graph::train(step_seed);
            let x = InputVars::constants(&mut g, &input);
            let fwd = model.forward(&mut g, x, false)?;
            let loss = model.loss(&mut g, &fwd, &input)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Domain(format!("training loss became {value} at epoch {epoch}")));
            }
            sum += value * chunk.len() as f64;
            let grads = g.backward(loss)?.for_params(&g, model.params().len());
            adam.step(model.params_mut(), &grads);
        }
        let train_loss = sum / train.len() as f64;
        let with_seg = cfg.model.task == Task::Segmentation;
        let (val_loss, preds) = evaluate(&model, val, cfg.batch_size, with_seg)?;
        let metric = val_metric(&cfg.model, val, &preds);
        log::info!(
            "fold {fold} epoch {epoch}: train {train_loss:.4} val {val_loss:.4} metric {}",
            metric.map_or("-".into(), |m| format!("{m:.4}"))
        );
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_metric: metric,
        });
        match stopper.update(epoch, val_loss) {
            StopDecision::Improved => best = Some(model.params().clone()),
            StopDecision::Wait => {}
            StopDecision::Stop => {
                early_stopped = true;
                break;
            }
        }
    }
    if let Some(p) = best {
        *model.params_mut() = p;
    }
    let mut record = RunRecord {
        fold,
        stop_epoch: history.len(),
        history,
        best_epoch: stopper.best_epoch().unwrap_or(1),
        early_stopped,
        unguided: cfg.model.is_unguided(),
        checkpoint: None,
    };
    if let Some(dir) = out_dir {
        let fold_dir = dir.join(format!("fold{fold}"));
        std::fs::create_dir_all(&fold_dir).map_err(|e| Error::io(&fold_dir, e))?;
        let ckpt = fold_dir.join("checkpoint");
        save_checkpoint(&model, &ckpt)?;
        record.write_history(&fold_dir.join("history.csv"))?;
        record.checkpoint = Some(ckpt);
    }
    Ok(FoldRun { record, model })
}

/// One [`FoldRun`] per fold of `plan`.
pub fn cross_validate(cfg: &TrainConfig, plan: &FoldPlan, cases: &[Case], out_dir: Option<&Path>) -> Result<Vec<FoldRun>> {
    (0..plan.k()).map(|f| train_fold(cfg, plan, f, cases, out_dir)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ClassifierMode;
    use crate::trainer::split_folds;
    use crate::volumes::{generate_phantom, PhantomSpec};

    fn tiny_cfg() -> TrainConfig {
        let mut m = ModelConfig::toy(Task::Idh);
        m.backbone.base_channels = 2;
        m.backbone.input_size = [16, 16, 16];
        m.cmd.channels = 4;
        m.head = ClassifierMode::Dsf;
        TrainConfig {
            max_epochs: 3,
            learning_rate: 1e-3,
            ..TrainConfig::new(m)
        }
    }

    fn cases(n: u64) -> Vec<Case> {
        (0..n)
            .map(|s| {
                let spec = PhantomSpec {
                    grid: [16, 16, 16],
                    core_radius: 2.5,
                    rim_thickness: 1.5,
                    mismatch: s % 2 == 0,
                    ..PhantomSpec::default()
                };
                generate_phantom(&spec, s).unwrap()
            })
            .collect()
    }

    #[test]
    fn early_stopping_on_worsening_losses() {
        let mut s = EarlyStopping::new(5);
        let mut stop = None;
        for epoch in 1..=20 {
            if s.update(epoch, epoch as f64) == StopDecision::Stop {
                stop = Some(epoch);
                break;
            }
        }
        assert_eq!(stop, Some(6));
        assert_eq!(s.best_epoch(), Some(1));
    }

    #[test]
    fn early_stopping_resets_on_improvement() {
        let mut s = EarlyStopping::new(2);
        let losses = [3.0, 2.0, 2.5, 1.0, 1.0, 1.5];
        let d: Vec<_> = losses.iter().enumerate().map(|(i, &l)| s.update(i + 1, l)).collect();
        assert_eq!(
            d,
            [
                StopDecision::Improved,
                StopDecision::Improved,
                StopDecision::Wait,
                StopDecision::Improved,
                StopDecision::Wait,
                StopDecision::Stop
            ]
        );
        assert_eq!(s.best_epoch(), Some(4));
    }

    #[test]
    fn fold_run_writes_artifacts_and_is_deterministic() {
        let data = cases(10);
        let items: Vec<_> = data.iter().map(|c| (c.case_id.clone(), Task::Idh.class_index(&c.labels))).collect();
        let plan = split_folds(&items, 5, 0).unwrap();
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        let a = train_fold(&cfg, &plan, 1, &data, Some(dir.path())).unwrap();
        assert_eq!(a.record.history.len(), a.record.stop_epoch);
        assert!(a.record.stop_epoch <= cfg.max_epochs);
        assert!(dir.path().join("fold1/checkpoint").exists());
        let text = std::fs::read_to_string(dir.path().join("fold1/history.csv")).unwrap();
        assert!(text.starts_with("epoch,train_loss,val_loss,val_metric"));
        assert_eq!(text.lines().count(), a.record.history.len() + 1);
        let best = a.record.best().val_loss;
        assert!(a.record.history.iter().all(|r| best <= r.val_loss));

        let b = train_fold(&cfg, &plan, 1, &data, None).unwrap();
        assert_eq!(a.record.history, b.record.history);
        assert_eq!(a.model.params(), b.model.params());
        let val: Vec<&Case> = plan.validation(1).iter().map(|id| data.iter().find(|c| &c.case_id == id).unwrap()).collect();
        let (loss, _) = evaluate(&b.model, &val, 2, false).unwrap();
        assert!((loss - best).abs() < 1e-12);
    }

    #[test]
    fn ineligible_cases_are_reported() {
        let mut data = cases(10);
        let mut vols = data[3].volumes().clone();
        vols.remove(&Modality::Flair);
        data[3] = data[3].with_content(vols, data[3].mask.clone()).unwrap();
        let refs: Vec<&Case> = data.iter().collect();
        let err = check_eligible(&refs, &tiny_cfg().model).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains("FLAIR"), "{err}");
    }
}
