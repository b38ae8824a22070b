//! Seeded inputs for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpf_core::agreement::CategoryCountTable;
use vpf_core::lowlevel::RgbImage;
use vpf_core::midlevel::SaliencyMap;
use nalgebra::DMatrix;

pub fn image(seed: u64, side: usize) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = (0..side * side).map(|_| rng.random()).collect();
    RgbImage::new(side, side, px).expect("valid image")
}

pub fn saliency(seed: u64, side: usize) -> SaliencyMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = (0..side * side).map(|_| rng.random::<f64>().powi(4)).collect();
    SaliencyMap::from_raw(side, side, raw).expect("valid map")
}

/// Two binary regressors plus intercept, outcomes drawn from known coefficients.
pub fn logit_design(seed: u64, n: usize) -> (DMatrix<f64>, Vec<f64>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DMatrix::from_element(n, 3, 1.0);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        x[(i, 1)] = f64::from(rng.random::<bool>());
        x[(i, 2)] = f64::from(rng.random::<bool>());
        let eta = -1.0 + 3f64.ln() * x[(i, 1)] + 0.2 * x[(i, 2)];
        y.push(f64::from(rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp())));
    }
    let terms = ["intercept", "keyobj", "human"].map(String::from).to_vec();
    (x, y, terms)
}

/// Four raters scoring 0..=10 per item.
pub fn ratings(seed: u64, items: usize) -> CategoryCountTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let assign: Vec<Vec<usize>> = (0..items)
        .map(|_| {
            let anchor = rng.random_range(0..11);
            (0..4).map(|_| if rng.random_bool(0.6) { anchor } else { rng.random_range(0..11) }).collect()
        })
        .collect();
    CategoryCountTable::from_assignments(&assign, 11).expect("valid table")
}
