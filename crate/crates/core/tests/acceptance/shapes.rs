//! Criteria 4-5: backbone shape contract and the CMD/fusion formulas on
//! hand-set inputs.

use mtsunet::backbone::{Backbone, BackboneConfig};
use mtsunet::cmd::{amplify_difference, augment_features, gate_inputs, gate_value, mismatch_attention};
use mtsunet::fusion::{fuse_dsf, joint_loss, LossWeights};
use mtsunet::graph::{softmax_channels, Graph};
use mtsunet::nn::ParamStore;
use mtsunet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::verdict;

const SOFTMAX_TOL: f64 = 1e-6;
const FORMULA_TOL: f64 = 1e-9;
const MIN_GATE: f64 = 0.1;

#[test]
fn criterion_04_shape_contract() {
    let batch = 2;
    let mut failures = Vec::new();
    let mut worst_sum: f64 = 0.0;
    for c in [2usize, 8] {
        for size in [16usize, 32] {
            for seg_channels in [2usize, 4] {
                let cfg = BackboneConfig {
                    in_channels: 4,
                    base_channels: c,
                    input_size: [size; 3],
                    dropout_rate: 0.0,
                    seg_channels,
                };
                let mut store = ParamStore::new();
                let mut rng = ChaCha8Rng::seed_from_u64(c as u64 * 100 + size as u64);
                let bb = Backbone::new(&mut store, cfg, &mut rng).unwrap();
                let n = batch * 4 * size * size * size;
                let x = Tensor::from_vec(
                    &[batch, 4, size, size, size],
                    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
                .unwrap();
                let mut g = Graph::eval();
                let xv = g.constant(x);
                let p = bb.encode(&mut g, &store, xv).unwrap();
                for i in 1..=4usize {
                    let want = vec![batch, c * 2usize.pow(i as u32 - 1), size / 2usize.pow(i as u32), size / 2usize.pow(i as u32), size / 2usize.pow(i as u32)];
                    let got = g.shape(p.stage(i)).to_vec();
                    if got != want {
                        failures.push(format!("C={c} {size}^3 stage {i}: {got:?} != {want:?}"));
                    }
                }
                let s = bb.decode(&mut g, &store, &p).unwrap();
                let got = g.shape(s.0).to_vec();
                let want = vec![batch, seg_channels, size, size, size];
                if got != want {
                    failures.push(format!("C={c} {size}^3 decode: {got:?} != {want:?}"));
                }
                let probs = softmax_channels(g.value(s.0));
                let inner = size * size * size;
                for b in 0..batch {
                    for v in 0..inner {
                        let total: f64 = (0..seg_channels)
                            .map(|k| probs.data()[(b * seg_channels + k) * inner + v])
                            .sum();
                        worst_sum = worst_sum.max((total - 1.0).abs());
                    }
                }
            }
        }
    }
    let ok = failures.is_empty() && worst_sum <= SOFTMAX_TOL;
    verdict(
        4,
        ok,
        format!(
            "C in {{2,8}} x input in {{16,32}}^3 x seg channels {{2,4}}; shape mismatches {failures:?}; \
             max |sum softmax - 1| {worst_sum:.1e} (tol {SOFTMAX_TOL:.0e})"
        ),
    );
}

fn scalar(v: f64) -> Tensor {
    Tensor::full(&[1, 1, 1, 1, 1], v)
}

#[test]
fn criterion_05_formula_fidelity() {
    let mut checks: Vec<(&str, f64, f64)> = Vec::new();

    let amp = amplify_difference(&scalar(3.0), &scalar(1.0), 2.0).unwrap();
    checks.push(("amplify_difference(3, 1, gamma 2)", amp.data()[0], 2.0 * (3.0 - 1.0)));

    let aug = augment_features(&scalar(-2.0), &scalar(0.25)).unwrap();
    checks.push(("augment_features(-2, 0.25)", aug.data()[0], -2.0 + 0.25 * -2.0));

    let t2 = Tensor::from_vec(&[1, 1, 1, 1, 2], vec![2.0, -4.0]).unwrap();
    let flair = Tensor::from_vec(&[1, 1, 1, 1, 2], vec![1.5, 8.0]).unwrap();
    let half = Tensor::full(&[1, 1, 1, 1, 2], 0.5);
    let (gt2, gfl) = gate_inputs(&t2, &flair, &half, MIN_GATE).unwrap();
    for i in 0..2 {
        checks.push(("gate_inputs T2 at P=0.5", gt2.data()[i], 0.55 * t2.data()[i]));
        checks.push(("gate_inputs FLAIR at P=0.5", gfl.data()[i], 0.55 * flair.data()[i]));
    }

    // Channels (2, 0) on a 1x1x1 grid give max 2 and mean 1; with centre
    // taps 1 and bias 0 the pre-activation is 3.
    let f_diff = Tensor::from_vec(&[1, 2, 1, 1, 1], vec![2.0, 0.0]).unwrap();
    let mut w = Tensor::zeros(&[1, 2, 3, 3, 3]);
    w.data_mut()[13] = 1.0;
    w.data_mut()[27 + 13] = 1.0;
    let att = mismatch_attention(&f_diff, &w, 0.0).unwrap();
    checks.push(("mismatch_attention(max 2, mean 1)", att.data()[0], 1.0 / (1.0 + (-3.0f64).exp())));

    let mut g = Graph::eval();
    let a = g.constant(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap());
    let b = g.constant(Tensor::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap());
    let fused = fuse_dsf(&mut g, a, Some(b)).unwrap();
    let fused = g.value(fused).clone();
    let fuse_shape_ok = fused.shape() == [1, 4];
    for (i, want) in [1.0, 0.0, 0.0, 1.0].into_iter().enumerate() {
        checks.push(("fuse_dsf((1,0),(0,1))", fused.data()[i], want));
    }

    let seg = g.constant(Tensor::full(&[1], 0.3));
    let ce = g.constant(Tensor::full(&[1], 0.7));
    let l = joint_loss(&mut g, Some(seg), Some(ce), LossWeights { alpha: 1.0, beta: 1.0 }).unwrap();
    checks.push(("joint_loss(0.3, 0.7, alpha 1, beta 1)", g.value(l).item(), 1.0 * 0.3 + 1.0 * 0.7));

    let worst = checks.iter().map(|(_, a, b)| (a - b).abs()).fold(0.0, f64::max);
    let failed: Vec<&str> = checks
        .iter()
        .filter(|(_, a, b)| (a - b).abs() > FORMULA_TOL)
        .map(|(n, _, _)| *n)
        .collect();

    // Gate lower bound: G(0) is exactly the floor and nothing dips below it.
    let floor_exact = gate_value(0.0, MIN_GATE) == MIN_GATE;
    let sweep_min = (0..=1000)
        .map(|i| gate_value(i as f64 / 1000.0, MIN_GATE))
        .fold(f64::INFINITY, f64::min);
    let zero = Tensor::zeros(&[1, 1, 1, 1, 2]);
    let (at_zero, _) = gate_inputs(&t2, &flair, &zero, MIN_GATE).unwrap();
    let floor_applied = at_zero.data()[0] == MIN_GATE * t2.data()[0];
    let gate_ok = floor_exact && sweep_min >= MIN_GATE && floor_applied;

    verdict(
        5,
        failed.is_empty() && fuse_shape_ok && gate_ok,
        format!(
            "{} hand checks, max deviation {worst:.1e} (tol {FORMULA_TOL:.0e}), failing {failed:?}; \
             min G over [0,1] = {sweep_min} with floor {MIN_GATE}",
            checks.len()
        ),
    );
}
