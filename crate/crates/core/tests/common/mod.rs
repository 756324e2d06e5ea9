#![allow(dead_code)]

use proptest::test_runner::{Config, RngSeed};

/// Fixed seed so failures reproduce across runs.
pub fn config(cases: u32) -> Config {
    Config {
        cases,
        rng_seed: RngSeed::Fixed(0x5eed_0f_c0ffee),
        failure_persistence: None,
        ..Config::default()
    }
}

/// Stratified uniform draws: one jittered point per lattice cell.
pub fn stratified<R: rand::Rng>(lo: &[f64], hi: &[f64], per_axis: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let dims = lo.len();
    let total = per_axis.pow(dims as u32);
    (0..total)
        .map(|mut k| {
            (0..dims)
                .map(|d| {
                    let cell = k % per_axis;
                    k /= per_axis;
                    let step = (hi[d] - lo[d]) / per_axis as f64;
                    lo[d] + (cell as f64 + rng.random::<f64>()) * step
                })
                .collect()
        })
        .collect()
}
