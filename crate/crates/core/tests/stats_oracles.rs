use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpf_core::stats::*;

mod common;

use common::*;

#[test]
fn fifty_row_fit_matches_reference() {
    let (x, y) = fixture();
    let fit = fit_logit(&x, &y, &terms()).unwrap();
    assert!(fit.converged);
    for (b, e) in fit.coefficients.iter().zip(BETA) {
        assert!((b - e).abs() < 1e-8, "{b} vs {e}");
    }
    assert!((fit.log_likelihood - LOGLIK).abs() < 1e-9);
    assert!((fit.leverages.iter().sum::<f64>() - 3.0).abs() < 1e-10);
}

#[test]
fn fifty_row_hc3_matches_reference() {
    let (x, y) = fixture();
    let fit = fit_logit(&x, &y, &terms()).unwrap();
    let v = hc3_cov(&fit, &x).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert!((v[(i, j)] - HC3[i * 3 + j]).abs() < 1e-6, "HC3[{i},{j}] = {}", v[(i, j)]);
        }
    }
    let v0 = covariance(&fit, &x, CovKind::Hc0).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert!((v0[(i, j)] - HC0[i * 3 + j]).abs() < 1e-6, "HC0[{i},{j}] = {}", v0[(i, j)]);
        }
    }
}

#[test]
fn fifty_row_effects_and_ame() {
    let (x, y) = fixture();
    let fit = fit_logit(&x, &y, &terms()).unwrap();
    let rows = effect_table(&fit, &hc3_cov(&fit, &x).unwrap()).unwrap();
    for (j, r) in rows.iter().enumerate() {
        assert!((r.z - Z[j]).abs() < 1e-6);
        assert!((r.p_value - P[j]).abs() < 1e-8);
        assert!((r.odds_ratio - r.beta.exp()).abs() < 1e-12);
        assert!(r.ci_low <= r.odds_ratio && r.odds_ratio <= r.ci_high);
        assert!(r.p_fdr >= r.p_value);
    }
    let adj = bh_fdr(&P[1..]).unwrap();
    assert!((rows[1].p_fdr - adj[0]).abs() < 1e-8);
    assert!((rows[2].p_fdr - adj[1]).abs() < 1e-8);
    assert_eq!(rows[0].p_fdr, rows[0].p_value);
    assert!((rows[1].ame.unwrap() - AME[0]).abs() < 1e-6);
    assert!((rows[2].ame.unwrap() - AME[1]).abs() < 1e-6);
    let disc = ame_discrete(&fit, &x);
    assert_eq!(disc[0], None);
    assert!((disc[1].unwrap() - AME_DISCRETE[0]).abs() < 1e-6);
    assert!((disc[2].unwrap() - AME_DISCRETE[1]).abs() < 1e-6);
}

#[test]
fn score_matches_finite_difference() {
    let (x, y) = fixture();
    let fit = fit_logit(&x, &y, &terms()).unwrap();
    let off = [0.3, -0.2, 0.1];
    let beta: Vec<f64> = fit.coefficients.iter().zip(off).map(|(b, o)| b + o).collect();
    let probe = LogitFit {
        fitted: (0..50)
            .map(|i| {
                let e: f64 = (0..3).map(|j| x[(i, j)] * beta[j]).sum();
                1.0 / (1.0 + (-e).exp())
            })
            .collect(),
        coefficients: beta.clone(),
        ..fit.clone()
    };
    let analytic = probe.score(&x);
    let h = 1e-5;
    for j in 0..3 {
        let mut up = beta.clone();
        let mut dn = beta.clone();
        up[j] += h;
        dn[j] -= h;
        let fd = (log_likelihood(&x, &y, &up) - log_likelihood(&x, &y, &dn)) / (2.0 * h);
        assert!((fd - analytic[j]).abs() < 1e-5, "coord {j}: {fd} vs {}", analytic[j]);
    }
    assert!(fit.score(&x).iter().all(|g| g.abs() < 1e-8));
}

#[test]
fn balanced_design_hc3_near_model_se() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 2000;
    let xo: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
    let xh: Vec<f64> = (0..n).map(|i| ((i / 2) % 2) as f64).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let e = -0.5 + 0.8 * xo[i] + 0.4 * xh[i];
            f64::from(rng.random::<f64>() < 1.0 / (1.0 + (-e).exp()))
        })
        .collect();
    let x = design(&xo, &xh);
    let fit = fit_logit(&x, &y, &terms()).unwrap();
    let robust = hc3_cov(&fit, &x).unwrap();
    let model = covariance(&fit, &x, CovKind::Model).unwrap();
    for j in 0..3 {
        let ratio = (robust[(j, j)] / model[(j, j)]).sqrt();
        assert!((ratio - 1.0).abs() < 0.25, "term {j} ratio {ratio}");
    }
}

#[test]
fn doubled_rows_halve_covariance() {
    let (x, y) = fixture();
    let x2 = DMatrix::from_fn(100, 3, |i, j| x[(i % 50, j)]);
    let y2: Vec<f64> = (0..100).map(|i| y[i % 50]).collect();
    let v1 = hc3_cov(&fit_logit(&x, &y, &terms()).unwrap(), &x).unwrap();
    let v2 = hc3_cov(&fit_logit(&x2, &y2, &terms()).unwrap(), &x2).unwrap();
    for j in 0..3 {
        let ratio = v2[(j, j)] / v1[(j, j)];
        assert!((ratio - 0.5).abs() < 0.1, "term {j} ratio {ratio}");
    }
}

#[test]
fn saturated_strata_reproduce_cell_frequencies() {
    let cells = [((0.0, 0.0), 3, 10), ((0.0, 1.0), 5, 12), ((1.0, 0.0), 7, 9), ((1.0, 1.0), 4, 11)];
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for ((a, b), pos, total) in cells {
        for i in 0..total {
            rows.extend_from_slice(&[1.0, a, b, a * b]);
            y.push(f64::from(i < pos));
        }
    }
    let xs = DMatrix::from_row_slice(y.len(), 4, &rows);
    let names: Vec<String> = ["intercept", "x_obj", "x_hum", "x_obj:x_hum"].iter().map(|s| s.to_string()).collect();
    let fit = fit_logit(&xs, &y, &names).unwrap();
    let mut start = 0;
    for (_, pos, total) in cells {
        let freq = pos as f64 / total as f64;
        for i in start..start + total {
            assert!((fit.fitted[i] - freq).abs() < 1e-9);
        }
        start += total;
    }
}

#[test]
fn large_sample_recovers_generating_coefficients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 20000;
    let xo: Vec<f64> = (0..n).map(|_| f64::from(rng.random::<bool>())).collect();
    let xh: Vec<f64> = (0..n).map(|_| f64::from(rng.random::<bool>())).collect();
    let truth = [-1.0, 3f64.ln(), 0.0];
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let e = truth[0] + truth[1] * xo[i] + truth[2] * xh[i];
            f64::from(rng.random::<f64>() < 1.0 / (1.0 + (-e).exp()))
        })
        .collect();
    let fit = fit_logit(&design(&xo, &xh), &y, &terms()).unwrap();
    for (b, t) in fit.coefficients.iter().zip(truth) {
        assert!((b - t).abs() < 0.1, "{b} vs {t}");
    }
}

proptest! {
    #[test]
    fn bh_is_permutation_equivariant(ps in proptest::collection::vec(0.0f64..=1.0, 1..20), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let adj = bh_fdr(&ps).unwrap();
        for (a, p) in adj.iter().zip(&ps) {
            prop_assert!(a >= p);
            prop_assert!(*a <= 1.0);
        }
        let mut perm: Vec<usize> = (0..ps.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let shuffled: Vec<f64> = perm.iter().map(|&i| ps[i]).collect();
        let adj2 = bh_fdr(&shuffled).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert!((adj2[k] - adj[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn odds_ratio_order_follows_beta(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 200;
        let xo: Vec<f64> = (0..n).map(|_| f64::from(rng.random::<bool>())).collect();
        let xh: Vec<f64> = (0..n).map(|_| f64::from(rng.random::<bool>())).collect();
        let b1 = rng.random_range(-1.0..1.0);
        let b2 = rng.random_range(-1.0..1.0);
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let e = b1 * xo[i] + b2 * xh[i];
                f64::from(rng.random::<f64>() < 1.0 / (1.0 + (-e).exp()))
            })
            .collect();
        let x = design(&xo, &xh);
        if let Ok(fit) = fit_logit(&x, &y, &terms()) {
            let rows = effect_table(&fit, &hc3_cov(&fit, &x).unwrap()).unwrap();
            for a in &rows {
                for b in &rows {
                    prop_assert_eq!(a.beta < b.beta, a.odds_ratio < b.odds_ratio);
                }
                prop_assert!(a.ci_low <= a.odds_ratio && a.odds_ratio <= a.ci_high);
            }
            let g = fit.score(&x);
            prop_assert!(g.iter().all(|v| v.abs() < 1e-6));
        }
    }
}
