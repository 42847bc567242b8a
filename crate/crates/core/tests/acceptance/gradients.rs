//! Criterion 6: central finite differences against reverse-mode gradients
//! of whole model losses.

use std::time::{Duration, Instant};

use mtsunet::backbone::{one_hot_target, seg_loss, Backbone, BackboneConfig};
use mtsunet::graph::Graph;
use mtsunet::model::{ClassifierMode, InputVars, ModelConfig, ModelInput, MtsUnet};
use mtsunet::nn::ParamStore;
use mtsunet::volumes::{generate_phantom, Case, PhantomSpec};
use mtsunet::{Task, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::verdict;

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-3;
/// Gradients smaller than this are compared absolutely.
const ABS_FLOOR: f64 = 1e-6;
const SAMPLES_PER_TENSOR: usize = 6;
const BUDGET: Duration = Duration::from_secs(120);

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(ABS_FLOOR)
}

fn phantom(seed: u64, mismatch: bool) -> Case {
    let spec = PhantomSpec {
        grid: [16, 16, 16],
        core_radius: 2.5,
        rim_thickness: 1.5,
        mismatch,
        ..PhantomSpec::default()
    };
    generate_phantom(&spec, seed).unwrap()
}

/// Zero-initialized biases put every ReLU fed by an all-zero patch exactly
/// on its kink, where one-sided differences disagree. Shift them off it.
fn jitter_biases(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.name.ends_with("bias")).map(|(id, _)| id).collect();
    for id in ids {
        for v in store.get_mut(id).value.data_mut() {
            *v += rng.random_range(0.05..0.15);
        }
    }
}

/// Worst relative error over sampled entries of every parameter tensor.
fn check_params(store: &mut ParamStore, grads: &[Option<Tensor>], loss: &dyn Fn(&ParamStore) -> f64, seed: u64) -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0, String::new());
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone(), p.value.len())).collect();
    for (id, name, len) in ids {
        for _ in 0..SAMPLES_PER_TENSOR.min(len) {
            let k = rng.random_range(0..len);
            let orig = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + STEP;
            let up = loss(store);
            store.get_mut(id).value.data_mut()[k] = orig - STEP;
            let down = loss(store);
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let analytic = grads[id.index()].as_ref().map_or(0.0, |g| g.data()[k]);
            let e = rel_err(analytic, numeric);
            if e > worst.0 {
                worst = (e, format!("{name}[{k}]: analytic {analytic:e} numeric {numeric:e}"));
            }
        }
    }
    worst
}

/// Worst relative error of the segmentation loss over the backbone.
fn seg_loss_check() -> (f64, String) {
    let cfg = BackboneConfig {
        in_channels: 4,
        base_channels: 2,
        input_size: [16, 16, 16],
        dropout_rate: 0.0,
        seg_channels: 2,
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let bb = Backbone::new(&mut store, cfg, &mut rng).unwrap();
    jitter_biases(&mut store, 4);
    let case = phantom(1, true);
    let model_cfg = ModelConfig::toy(Task::Idh);
    let input = ModelInput::from_cases(&[&case], &model_cfg).unwrap();
    let target = one_hot_target(&[case.mask.as_ref().unwrap()], 2).unwrap();

    let loss = |store: &ParamStore| -> f64 {
        let mut g = Graph::eval();
        let x = g.constant(input.stack.clone());
        let p = bb.encode(&mut g, store, x).unwrap();
        let s = bb.decode(&mut g, store, &p).unwrap();
        let l = seg_loss(&mut g, s, &target).unwrap();
        g.value(l).item()
    };
    let mut g = Graph::eval();
    let x = g.input(input.stack.clone());
    let p = bb.encode(&mut g, &store, x).unwrap();
    let s = bb.decode(&mut g, &store, &p).unwrap();
    let l = seg_loss(&mut g, s, &target).unwrap();
    let grads = g.backward(l).unwrap();
    let pg = grads.for_params(&g, store.len());
    check_params(&mut store, &pg, &loss, 11)
}

/// Worst relative errors of the joint DSF loss over every parameter, and
/// over sampled T2 input voxels feeding the CMD stream.
fn dsf_check() -> ((f64, String), f64) {
    let mut cfg = ModelConfig::toy(Task::Idh);
    cfg.head = ClassifierMode::Dsf;
    cfg.backbone.base_channels = 2;
    cfg.backbone.input_size = [16, 16, 16];
    cfg.cmd.channels = 4;
    // Keep the gate on the tape so the decoder sees the CMD gradient too.
    cfg.cmd.detach_gate = false;
    let mut model = MtsUnet::new(cfg, 7).unwrap();
    jitter_biases(model.params_mut(), 8);
    let cases = [phantom(2, true), phantom(3, false)];
    let refs: Vec<&Case> = cases.iter().collect();
    let input = ModelInput::from_cases(&refs, model.config()).unwrap();
    const DROPOUT_SEED: u64 = 5;

    let eval = |m: &MtsUnet| -> f64 {
        let mut g = Graph::train(DROPOUT_SEED);
        let x = InputVars::constants(&mut g, &input);
        let fwd = m.forward(&mut g, x, false).unwrap();
        let l = m.loss(&mut g, &fwd, &input).unwrap();
        g.value(l).item()
    };
    let mut g = Graph::train(DROPOUT_SEED);
    let x = InputVars::tracked(&mut g, &input);
    let fwd = model.forward(&mut g, x, false).unwrap();
    let l = model.loss(&mut g, &fwd, &input).unwrap();
    let grads = g.backward(l).unwrap();
    let pg = grads.for_params(&g, model.params().len());

    let cfg = model.config().clone();
    let store = model.params_mut();
    let loss = |s: &ParamStore| {
        let mut m = MtsUnet::new(cfg.clone(), 7).unwrap();
        *m.params_mut() = s.clone();
        eval(&m)
    };
    let params = check_params(store, &pg, &loss, 13);

    // Inputs of the CMD streams.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let t2g = grads.wrt(x.t2.unwrap()).cloned().unwrap_or_else(|| Tensor::zeros(input.t2.as_ref().unwrap().shape()));
    let mut worst_in: f64 = 0.0;
    for _ in 0..12 {
        let k = rng.random_range(0..t2g.len());
        let mut up = input.clone();
        up.t2.as_mut().unwrap().data_mut()[k] += STEP;
        let mut down = input.clone();
        down.t2.as_mut().unwrap().data_mut()[k] -= STEP;
        let f = |inp: &ModelInput| {
            let mut g = Graph::train(DROPOUT_SEED);
            let x = InputVars::constants(&mut g, inp);
            let fwd = model.forward(&mut g, x, false).unwrap();
            let l = model.loss(&mut g, &fwd, inp).unwrap();
            g.value(l).item()
        };
        let numeric = (f(&up) - f(&down)) / (2.0 * STEP);
        worst_in = worst_in.max(rel_err(t2g.data()[k], numeric));
    }
    (params, worst_in)
}

#[test]
fn criterion_06_gradient_checks() {
    let t0 = Instant::now();
    let (seg, seg_at) = seg_loss_check();
    let ((dsf, dsf_at), input) = dsf_check();
    let elapsed = t0.elapsed();
    let ok = seg <= REL_TOL && dsf <= REL_TOL && input <= REL_TOL && elapsed < BUDGET;
    verdict(
        6,
        ok,
        format!(
            "worst relative error seg_loss {seg:.2e} ({seg_at}), DSF params {dsf:.2e} ({dsf_at}), \
             T2 input {input:.2e}; tol {REL_TOL:.0e}; {elapsed:.1?}"
        ),
    );
}
