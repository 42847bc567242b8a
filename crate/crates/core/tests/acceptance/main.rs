//! Acceptance suite. Each test covers one numbered criterion and prints a
//! single `criterion N: PASS|FAIL ...` line before asserting.
//!
//! The learnability criteria (7-9) train on 100 phantoms with an epoch cap;
//! set `MTSUNET_ACCEPTANCE_FULL=1` to run the uncapped 100-epoch recipe.

mod contracts;
mod gradients;
mod learnability;
mod metrics;
mod shapes;

/// Print the verdict line for criterion `n`, then fail the test if needed.
pub fn verdict(n: usize, ok: bool, detail: impl std::fmt::Display) {
    let tag = if ok { "PASS" } else { "FAIL" };
    println!("criterion {n:>2}: {tag} {detail}");
    assert!(ok, "criterion {n} failed: {detail}");
}
