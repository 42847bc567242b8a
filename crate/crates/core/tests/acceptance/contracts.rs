//! Criteria 10-11: ensemble averaging and early stopping.

use mtsunet::model::{ModelConfig, ModelInput, MtsUnet};
use mtsunet::trainer::{mean_probabilities, EarlyStopping, Ensemble, StopDecision};
use mtsunet::volumes::{generate_phantom, Case, PhantomSpec};
use mtsunet::{Task, Tensor};

use crate::verdict;

/// Averaging five doubles can round differently from the hand sum.
const ENSEMBLE_TOL: f64 = 1e-12;
const PATIENCE: usize = 5;

#[test]
fn criterion_10_ensemble_contract() {
    let members = [(0.6, 0.4), (0.8, 0.2), (0.7, 0.3), (0.5, 0.5), (0.9, 0.1)];
    let tensors: Vec<Tensor> = members
        .iter()
        .map(|&(a, b)| Tensor::from_vec(&[1, 2], vec![a, b]).unwrap())
        .collect();
    let refs: Vec<&Tensor> = tensors.iter().collect();
    let mean = mean_probabilities(&refs).unwrap();
    let hand = (0.70, 0.30);
    let hand_dev = (mean.data()[0] - hand.0).abs().max((mean.data()[1] - hand.1).abs());

    let mut cfg = ModelConfig::toy(Task::Idh);
    cfg.backbone.input_size = [16, 16, 16];
    cfg.backbone.base_channels = 2;
    cfg.cmd.channels = 4;
    let spec = PhantomSpec {
        grid: [16, 16, 16],
        core_radius: 2.5,
        rim_thickness: 1.5,
        ..PhantomSpec::default()
    };
    let cases: Vec<Case> = (0..4)
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
        .collect();
    let case_refs: Vec<&Case> = cases.iter().collect();
    let input = ModelInput::from_cases(&case_refs, &cfg).unwrap();
    let single = MtsUnet::new(cfg.clone(), 42).unwrap();
    let alone = single.predict(&input, false).unwrap().bundles[&Task::Idh].probabilities.clone();
    let ensemble = Ensemble::new(vec![single.clone(); 5]).unwrap();
    let together = ensemble.predict(&input).unwrap()[&Task::Idh].probabilities.clone();
    let same_dev = alone
        .data()
        .iter()
        .zip(together.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    verdict(
        10,
        hand_dev <= ENSEMBLE_TOL && same_dev <= ENSEMBLE_TOL && alone.shape() == together.shape(),
        format!(
            "hand example mean ({:.15}, {:.15}); five identical members vs one: max deviation {same_dev:.1e} \
             (tol {ENSEMBLE_TOL:.0e})",
            mean.data()[0],
            mean.data()[1]
        ),
    );
}

/// Feed `losses` epoch by epoch (1-based) and return the stopping epoch.
fn stop_epoch(losses: &[f64], patience: usize) -> Option<(usize, usize)> {
    let mut es = EarlyStopping::new(patience);
    for (i, &l) in losses.iter().enumerate() {
        if es.update(i + 1, l) == StopDecision::Stop {
            return Some((es.best_epoch().unwrap(), i + 1));
        }
    }
    None
}

#[test]
fn criterion_11_early_stopping() {
    // Best at epoch 1, every later epoch worse.
    let worsening: Vec<f64> = (0..50).map(|e| 1.0 + 0.1 * e as f64).collect();
    let first = stop_epoch(&worsening, PATIENCE);
    // Improving for eight epochs, then worsening.
    let dipped: Vec<f64> = (0..50).map(|e| (e as f64 - 7.0).abs()).collect();
    let later = stop_epoch(&dipped, PATIENCE);
    // A tie with the best does not count as an improvement.
    let flat = vec![0.5; 20];
    let tied = stop_epoch(&flat, PATIENCE);

    let ok = first == Some((1, PATIENCE + 1)) && later == Some((8, 8 + PATIENCE)) && tied == Some((1, PATIENCE + 1));
    verdict(
        11,
        ok,
        format!(
            "patience {PATIENCE}: worsening run (best, stop) = {first:?}, want (1, {}); \
             late minimum {later:?}, want (8, {}); flat run {tied:?}",
            PATIENCE + 1,
            8 + PATIENCE
        ),
    );
}
