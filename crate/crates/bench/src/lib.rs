//! Benchmark fixtures shared by the criterion targets in `benches/`.

use mtsunet::volumes::{generate_phantom, Case, MaskVolume, PhantomSpec};

/// Deterministic 32³ phantom; even seeds carry the mismatch sign.
pub fn phantom(seed: u64) -> Case {
    let spec = PhantomSpec {
        mismatch: seed % 2 == 0,
        ..PhantomSpec::default()
    };
    generate_phantom(&spec, seed).expect("default phantom spec is valid")
}

/// Ground-truth mask of `phantom(seed)`.
pub fn mask(seed: u64) -> MaskVolume {
    phantom(seed).mask.expect("phantoms carry masks")
}

/// `n` scores with labels alternating 0/1 and a mild class shift, so the AUC
/// sits strictly between 0.5 and 1.
pub fn scores(n: usize) -> (Vec<f64>, Vec<usize>) {
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let scores = (0..n)
        .map(|i| ((i * 7919) % 1000) as f64 / 1000.0 + 0.2 * labels[i] as f64)
        .collect();
    (scores, labels)
}
