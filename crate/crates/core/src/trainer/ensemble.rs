use std::collections::BTreeMap;
use std::path::Path;

use crate::checkpoint::{config_diff, load_checkpoint};
use crate::error::{Error, Result};
use crate::fusion::ClassificationBundle;
use crate::model::{ModelConfig, ModelInput, MtsUnet};
use crate::task::Task;
use crate::tensor::Tensor;
use crate::volumes::Case;

/// Element-wise arithmetic mean of equally shaped probability tensors.
pub fn mean_probabilities(members: &[&Tensor]) -> Result<Tensor> {
    let first = members.first().ok_or_else(|| Error::Data("empty ensemble".into()))?;
    let mut sum = Tensor::zeros(first.shape());
    for m in members {
        if m.shape() != first.shape() {
            return Err(Error::shape(format!(
                "ensemble members disagree on shape: {:?} vs {:?}",
                m.shape(),
                first.shape()
            )));
        }
        sum.add_assign(m);
    }
    sum.scale_in_place(1.0 / members.len() as f64);
    Ok(sum)
}

/// Models sharing one config whose probabilities are averaged.
pub struct Ensemble {
    members: Vec<MtsUnet>,
}

impl Ensemble {
    pub fn new(members: Vec<MtsUnet>) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::Data("empty ensemble".into()))?;
        let cfg = first.config().clone();
        for (i, m) in members.iter().enumerate().skip(1) {
            if m.config() != &cfg {
                return Err(Error::Checkpoint(format!(
                    "ensemble member {i}: {}",
                    config_diff(&cfg, m.config())
                )));
            }
        }
        Ok(Ensemble { members })
    }

    pub fn from_checkpoints<P: AsRef<Path>>(paths: &[P]) -> Result<Self> {
        let mut members = Vec::with_capacity(paths.len());
        let mut first: Option<ModelConfig> = None;
        for p in paths {
            let m = load_checkpoint(p.as_ref())?;
            match &first {
                None => first = Some(m.config().clone()),
                Some(cfg) if cfg != m.config() => {
                    return Err(Error::Checkpoint(format!(
                        "{}: {}",
                        p.as_ref().display(),
                        config_diff(cfg, m.config())
                    )))
                }
                Some(_) => {}
            }
            members.push(m);
        }
        Self::new(members)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn config(&self) -> &ModelConfig {
        self.members[0].config()
    }

    pub fn members(&self) -> &[MtsUnet] {
        &self.members
    }

    /// Per-member bundles followed by their mean, for every classification task.
    pub fn predict_all(&self, input: &ModelInput) -> Result<(Vec<BTreeMap<Task, ClassificationBundle>>, BTreeMap<Task, ClassificationBundle>)> {
        let per: Vec<_> = self
            .members
            .iter()
            .map(|m| m.predict(input, false).map(|p| p.bundles))
            .collect::<Result<_>>()?;
        let mut mean = BTreeMap::new();
        for (task, b0) in &per[0] {
            let probs: Vec<&Tensor> = per.iter().map(|p| &p[task].probabilities).collect();
            mean.insert(
                *task,
                ClassificationBundle::from_probabilities(*task, mean_probabilities(&probs)?, b0.source)?,
            );
        }
        Ok((per, mean))
    }

    pub fn predict(&self, input: &ModelInput) -> Result<BTreeMap<Task, ClassificationBundle>> {
        Ok(self.predict_all(input)?.1)
    }
}

/// Averaged prediction of the models stored at `checkpoints` for one case.
pub fn ensemble_predict<P: AsRef<Path>>(checkpoints: &[P], case: &Case) -> Result<BTreeMap<Task, ClassificationBundle>> {
    let ens = Ensemble::from_checkpoints(checkpoints)?;
    let input = ModelInput::from_cases(&[case], ens.config())?;
    ens.predict(&input)
}
