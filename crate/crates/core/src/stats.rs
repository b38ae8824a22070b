//! Logistic regression by Newton-IRLS with sandwich covariance, Wald
//! inference, Benjamini–Hochberg adjustment and average marginal effects.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

pub const GRAD_TOL: f64 = 1e-8;
pub const STEP_TOL: f64 = 1e-10;
pub const MAX_ITER: usize = 100;
/// Coefficient magnitude treated as divergence.
pub const SEPARATION_BOUND: f64 = 30.0;
pub const CI_Z: f64 = 1.96;
const LEVERAGE_TOL: f64 = 1e-12;
/// A vanishing gradient only counts as convergence once the Newton step has
/// also become small; under separation the gradient decays while the step
/// stays near one.
const SEPARATION_STEP: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("design has {rows} rows and {cols} columns; need rows >= cols > 0")]
    Shape { rows: usize, cols: usize },
    #[error("response has {got} entries, design has {expected} rows")]
    ResponseLength { got: usize, expected: usize },
    #[error("response must be 0 or 1 (row {row} is {value})")]
    Response { row: usize, value: f64 },
    #[error("singular design: columns are linearly dependent")]
    SingularDesign,
    #[error("separation detected: coefficient of `{term}` diverges")]
    Separation { term: String },
    #[error("fit did not converge within {0} iterations")]
    NotConverged(usize),
    #[error("leverage of row {row} is {leverage}, too close to 1")]
    Leverage { row: usize, leverage: f64 },
    #[error("nonpositive variance for `{term}`")]
    Covariance { term: String },
    #[error("p-value {0} outside [0, 1]")]
    PValueRange(f64),
    #[error("no p-values to adjust")]
    EmptyFamily,
    #[error("baseline odds ratio must be positive, got {0}")]
    Domain(f64),
    #[error("{0} term names for {1} columns")]
    Terms(usize, usize),
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn log_likelihood(x: &DMatrix<f64>, y: &[f64], beta: &[f64]) -> f64 {
    let eta = x * DVector::from_column_slice(beta);
    eta.iter().zip(y).map(|(&e, &yi)| yi * e - softplus(e)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitFit {
    pub terms: Vec<String>,
    pub coefficients: Vec<f64>,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub fitted: Vec<f64>,
    pub leverages: Vec<f64>,
    pub response: Vec<f64>,
    pub intercept: Option<usize>,
}

impl LogitFit {
    pub fn n_obs(&self) -> usize {
        self.fitted.len()
    }

    pub fn score(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let r = DVector::from_iterator(self.n_obs(), self.response.iter().zip(&self.fitted).map(|(y, p)| y - p));
        (x.transpose() * r).iter().copied().collect()
    }
}

fn weighted_gram(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let mut xw = x.clone();
    for (i, &wi) in w.iter().enumerate() {
        xw.row_mut(i).scale_mut(wi);
    }
    x.transpose() * xw
}

fn invert_spd(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    m.clone().cholesky().map(|c| c.inverse())
}

fn full_rank(x: &DMatrix<f64>) -> bool {
    let sv = x.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let tol = max * (x.nrows().max(x.ncols()) as f64) * f64::EPSILON;
    max > 0.0 && sv.iter().all(|&s| s > tol)
}

fn validate(x: &DMatrix<f64>, y: &[f64], terms: &[String]) -> Result<(), StatsError> {
    let (n, k) = x.shape();
    if k == 0 || n < k {
        return Err(StatsError::Shape { rows: n, cols: k });
    }
    if y.len() != n {
        return Err(StatsError::ResponseLength { got: y.len(), expected: n });
    }
    if terms.len() != k {
        return Err(StatsError::Terms(terms.len(), k));
    }
    if let Some((row, &value)) = y.iter().enumerate().find(|(_, &v)| v != 0.0 && v != 1.0) {
        return Err(StatsError::Response { row, value });
    }
    if !full_rank(x) {
        return Err(StatsError::SingularDesign);
    }
    Ok(())
}

fn divergent_term(beta: &DVector<f64>, terms: &[String]) -> String {
    let j = beta.iamax();
    terms[j].clone()
}

/// Maximum-likelihood logistic fit. `terms` names the columns of `x`.
pub fn fit_logit(x: &DMatrix<f64>, y: &[f64], terms: &[String]) -> Result<LogitFit, StatsError> {
    validate(x, y, terms)?;
    let (n, k) = x.shape();
    let yv = DVector::from_column_slice(y);
    let mut beta = DVector::zeros(k);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITER {
        iterations += 1;
        let p = (x * &beta).map(sigmoid);
        let w: Vec<f64> = p.iter().map(|&pi| pi * (1.0 - pi)).collect();
        let grad = x.transpose() * (&yv - &p);
        let hess = weighted_gram(x, &w);
        let step = match hess.cholesky() {
            Some(c) => c.solve(&grad),
            None => return Err(StatsError::Separation { term: divergent_term(&beta, terms) }),
        };
        let gmax = grad.amax();
        let smax = step.amax();
        beta += &step;
        if beta.amax() > SEPARATION_BOUND {
            return Err(StatsError::Separation { term: divergent_term(&beta, terms) });
        }
        if (gmax < GRAD_TOL && smax < SEPARATION_STEP) || smax < STEP_TOL {
            converged = true;
            break;
        }
    }

    let eta = x * &beta;
    let fitted: Vec<f64> = eta.iter().map(|&e| sigmoid(e)).collect();
    let w: Vec<f64> = fitted.iter().map(|&pi| pi * (1.0 - pi)).collect();
    let bread_inv = invert_spd(&weighted_gram(x, &w)).ok_or(StatsError::SingularDesign)?;
    let leverages = (0..n)
        .map(|i| {
            let xi = x.row(i).transpose();
            w[i] * (xi.transpose() * &bread_inv * &xi)[(0, 0)]
        })
        .collect();
    let intercept = (0..k).find(|&j| x.column(j).iter().all(|&v| v == 1.0));
    Ok(LogitFit {
        terms: terms.to_vec(),
        coefficients: beta.iter().copied().collect(),
        log_likelihood: eta.iter().zip(y).map(|(&e, &yi)| yi * e - softplus(e)).sum(),
        iterations,
        converged,
        fitted,
        leverages,
        response: y.to_vec(),
        intercept,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovKind {
    /// Leverage-adjusted sandwich, meat scaled by 1/(1-h)^2.
    #[default]
    Hc3,
    /// Unadjusted sandwich.
    Hc0,
    /// Inverse observed information.
    Model,
}

pub fn covariance(fit: &LogitFit, x: &DMatrix<f64>, kind: CovKind) -> Result<DMatrix<f64>, StatsError> {
    if !fit.converged {
        return Err(StatsError::NotConverged(fit.iterations));
    }
    let w: Vec<f64> = fit.fitted.iter().map(|&p| p * (1.0 - p)).collect();
    let bread_inv = invert_spd(&weighted_gram(x, &w)).ok_or(StatsError::SingularDesign)?;
    if kind == CovKind::Model {
        return Ok(bread_inv);
    }
    let k = x.ncols();
    let mut meat = DMatrix::zeros(k, k);
    for i in 0..fit.n_obs() {
        let scale = match kind {
            CovKind::Hc3 => {
                let h = fit.leverages[i];
                if h >= 1.0 - LEVERAGE_TOL {
                    return Err(StatsError::Leverage { row: i, leverage: h });
                }
                1.0 / ((1.0 - h) * (1.0 - h))
            }
            _ => 1.0,
        };
        let g = x.row(i).transpose() * (fit.response[i] - fit.fitted[i]);
        meat += (&g * g.transpose()) * scale;
    }
    Ok(&bread_inv * meat * &bread_inv)
}

pub fn hc3_cov(fit: &LogitFit, x: &DMatrix<f64>) -> Result<DMatrix<f64>, StatsError> {
    covariance(fit, x, CovKind::Hc3)
}

/// Two-sided standard-normal p-value.
pub fn two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

pub fn stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub term: String,
    pub beta: f64,
    pub robust_se: f64,
    pub odds_ratio: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub z: f64,
    pub p_value: f64,
    pub p_fdr: f64,
    /// `None` for the intercept.
    pub ame: Option<f64>,
    pub stars: String,
}

/// Per-term Wald inference. BH adjustment runs over the non-intercept terms;
/// the intercept keeps `p_fdr = p_value`. AME uses the derivative form.
pub fn effect_table(fit: &LogitFit, cov: &DMatrix<f64>) -> Result<Vec<EffectEstimate>, StatsError> {
    let k = fit.coefficients.len();
    let ames = ame(fit);
    let mut rows = Vec::with_capacity(k);
    for j in 0..k {
        let var = cov[(j, j)];
        if !(var > 0.0 && var.is_finite()) {
            return Err(StatsError::Covariance { term: fit.terms[j].clone() });
        }
        let beta = fit.coefficients[j];
        let se = var.sqrt();
        let z = beta / se;
        let p = two_sided_p(z);
        rows.push(EffectEstimate {
            term: fit.terms[j].clone(),
            beta,
            robust_se: se,
            odds_ratio: beta.exp(),
            ci_low: (beta - CI_Z * se).exp(),
            ci_high: (beta + CI_Z * se).exp(),
            z,
            p_value: p,
            p_fdr: p,
            ame: (Some(j) != fit.intercept).then_some(ames[j]),
            stars: String::new(),
        });
    }
    let family: Vec<usize> = (0..k).filter(|&j| Some(j) != fit.intercept).collect();
    if !family.is_empty() {
        let adj = bh_fdr(&family.iter().map(|&j| rows[j].p_value).collect::<Vec<_>>())?;
        for (&j, a) in family.iter().zip(adj) {
            rows[j].p_fdr = a;
        }
    }
    for r in &mut rows {
        r.stars = stars(r.p_fdr).to_string();
    }
    Ok(rows)
}

/// Benjamini–Hochberg step-up adjustment, returned in input order.
pub fn bh_fdr(p_values: &[f64]) -> Result<Vec<f64>, StatsError> {
    if p_values.is_empty() {
        return Err(StatsError::EmptyFamily);
    }
    if let Some(&bad) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(StatsError::PValueRange(bad));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let mut adj = vec![0.0; m];
    let mut running = 1.0f64;
    for rank in (0..m).rev() {
        let idx = order[rank];
        running = running.min(p_values[idx] * m as f64 / (rank + 1) as f64);
        adj[idx] = running.min(1.0).max(p_values[idx]);
    }
    Ok(adj)
}

/// Derivative-form average marginal effect for every column:
/// `beta_j * mean(p (1 - p))`.
pub fn ame(fit: &LogitFit) -> Vec<f64> {
    let scale = fit.fitted.iter().map(|&p| p * (1.0 - p)).sum::<f64>() / fit.n_obs() as f64;
    fit.coefficients.iter().map(|b| b * scale).collect()
}

/// Discrete-difference marginal effect: the mean change in predicted
/// probability when column `j` is switched from 0 to 1 for every row.
/// The intercept entry is `None`.
pub fn ame_discrete(fit: &LogitFit, x: &DMatrix<f64>) -> Vec<Option<f64>> {
    let beta = DVector::from_column_slice(&fit.coefficients);
    (0..x.ncols())
        .map(|j| {
            if Some(j) == fit.intercept {
                return None;
            }
            let mut on = x.clone();
            let mut off = x.clone();
            on.column_mut(j).fill(1.0);
            off.column_mut(j).fill(0.0);
            let diff = (on * &beta).map(sigmoid) - (off * &beta).map(sigmoid);
            Some(diff.mean())
        })
        .collect()
}

pub fn pct_change(model_or: f64, baseline_or: f64) -> Result<f64, StatsError> {
    if baseline_or.is_nan() || baseline_or <= 0.0 {
        return Err(StatsError::Domain(baseline_or));
    }
    Ok((model_or / baseline_or - 1.0) * 100.0)
}
