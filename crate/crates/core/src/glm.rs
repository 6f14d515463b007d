//! Weighted GLM fitting by iteratively reweighted least squares, plus the
//! deviance F, contrast t, and Wald tests built on a fit.
//!
//! Weights act as precision (frequency) weights in the working weights. Each
//! IRLS step solves the weighted least-squares problem through a
//! norm-pivoted Householder QR of `sqrt(W) X`, which doubles as the rank check.
//!
//! Deviance definitions:
//!
//! * Gaussian: `sum w (y - mu)^2` (plus any pooled within-group sum of squares).
//! * Binomial: `2 sum w [y ln(y/mu) + (1-y) ln((1-y)/(1-mu))]`; for 0/1
//!   outcomes this is `-2` times the weighted log-likelihood.
//!
//! The dispersion is 1 for the binomial family and `D / df` for the Gaussian,
//! so the deviance F reduces to the classical F test in the Gaussian case.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, FisherSnedecor, StudentsT};
use thiserror::Error;

use crate::design::{DesignMatrix, TermLayout};
use crate::linalg::PivotedQr;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlmError {
    #[error("design is rank deficient (rank {rank} of {cols}); dependent columns: {dependent:?}")]
    RankDeficient {
        rank: usize,
        cols: usize,
        dependent: Vec<String>,
    },
    #[error("IRLS did not converge after {iterations} iterations (relative deviance change {change:.3e})")]
    NotConverged { iterations: usize, change: f64 },
    #[error("perfect or quasi-complete separation: fitted probabilities reached 0 or 1 (max |eta| = {max_eta:.1})")]
    Separation { max_eta: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("models are not nested: df1 = {df1}")]
    NotNested { df1: f64 },
    #[error("null deviance {null:.6} is below the full-model deviance {full:.6}; a fit failed")]
    DevianceOrder { null: f64, full: f64 },
    #[error("degenerate contrast: variance {0:.3e} is not positive")]
    DegenerateContrast(f64),
    #[error("layout mismatch: fit has {expected} columns, new design has {got}")]
    LayoutMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Normal errors, identity link.
    #[serde(alias = "gaussian")]
    GaussianIdentity,
    /// Binomial errors, logit link.
    #[serde(alias = "logit")]
    BinomialLogit,
}

impl Family {
    pub fn inverse_link(self, eta: f64) -> f64 {
        match self {
            Family::GaussianIdentity => eta,
            Family::BinomialLogit => logistic(eta),
        }
    }

    pub fn link(self, mu: f64) -> f64 {
        match self {
            Family::GaussianIdentity => mu,
            Family::BinomialLogit => (mu / (1.0 - mu)).ln(),
        }
    }

    fn unit_deviance(self, y: f64, mu: f64) -> f64 {
        match self {
            Family::GaussianIdentity => (y - mu).powi(2),
            Family::BinomialLogit => 2.0 * (xlogy(y, y / mu) + xlogy(1.0 - y, (1.0 - y) / (1.0 - mu))),
        }
    }
}

pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlmOptions {
    pub max_iterations: usize,
    /// Stop when `|D - D_old| / (|D| + 0.1)` falls below this.
    pub tolerance: f64,
    /// Linear predictors beyond this magnitude are reported as separation.
    pub separation_eta: f64,
}

impl Default for GlmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            tolerance: 1e-10,
            separation_eta: 20.0,
        }
    }
}

/// Responses with weights, optionally pre-grouped.
///
/// A grouped row stands for `counts[r]` records sharing a design row; `y` is
/// their weighted mean outcome and `weights` their summed weight. For the
/// Gaussian family, `pooled_ss` carries the weighted within-group sum of
/// squares so the deviance matches the ungrouped fit.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    pub y: Vec<f64>,
    pub weights: Vec<f64>,
    pub counts: Vec<u64>,
    pub pooled_ss: f64,
}

impl Observations {
    pub fn new(y: Vec<f64>, weights: Vec<f64>) -> Self {
        let counts = vec![1; y.len()];
        Self {
            y,
            weights,
            counts,
            pooled_ss: 0.0,
        }
    }

    /// Records with positive weight.
    pub fn effective_n(&self) -> u64 {
        self.weights
            .iter()
            .zip(&self.counts)
            .filter(|(&w, _)| w > 0.0)
            .map(|(_, &c)| c)
            .sum()
    }

    pub fn weighted_n(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// One GLM fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub family: Family,
    pub layout: TermLayout,
    pub column_names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// Row-major `p x p` coefficient covariance.
    pub covariance: Vec<Vec<f64>>,
    pub deviance: f64,
    pub dispersion: f64,
    pub residual_df: f64,
    pub n_obs: u64,
    pub weighted_n: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl FitResult {
    pub fn beta(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.coefficients)
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let n = self.coefficients.len();
        DMatrix::from_fn(n, n, |i, j| self.covariance[i][j])
    }

    pub fn ncols(&self) -> usize {
        self.coefficients.len()
    }
}

fn check_inputs(x: &DesignMatrix, obs: &Observations, family: Family) -> Result<(), GlmError> {
    let n = x.nrows();
    if obs.y.len() != n || obs.weights.len() != n || obs.counts.len() != n {
        return Err(GlmError::InvalidInput(format!(
            "{} design rows but {} outcomes, {} weights, {} counts",
            n,
            obs.y.len(),
            obs.weights.len(),
            obs.counts.len()
        )));
    }
    if x.x.iter().any(|v| !v.is_finite()) {
        return Err(GlmError::InvalidInput("design has non-finite entries".into()));
    }
    for (r, (&y, &w)) in obs.y.iter().zip(&obs.weights).enumerate() {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(GlmError::InvalidInput(format!("row {r}: weight {w} must be finite and >= 0")));
        }
        if !y.is_finite() {
            return Err(GlmError::InvalidInput(format!("row {r}: outcome {y} is not finite")));
        }
        if family == Family::BinomialLogit && !(0.0..=1.0).contains(&y) {
            return Err(GlmError::InvalidInput(format!("row {r}: outcome {y} outside [0, 1] for logit")));
        }
    }
    Ok(())
}

struct WlsStep {
    beta: DVector<f64>,
    qr: PivotedQr,
}

fn weighted_solve(
    x: &DMatrix<f64>,
    z: &DVector<f64>,
    ww: &[f64],
    layout: &TermLayout,
) -> Result<WlsStep, GlmError> {
    let mut xs = x.clone();
    let mut zs = z.clone();
    for (r, &w) in ww.iter().enumerate() {
        let s = w.sqrt();
        xs.row_mut(r).scale_mut(s);
        zs[r] *= s;
    }
    let qr = PivotedQr::new(xs);
    match qr.solve_least_squares(&zs) {
        Some(beta) => Ok(WlsStep { beta, qr }),
        None => Err(GlmError::RankDeficient {
            rank: qr.rank(),
            cols: qr.ncols(),
            dependent: qr
                .dependent_columns()
                .into_iter()
                .map(|c| layout.column_name(c))
                .collect(),
        }),
    }
}

fn deviance(family: Family, obs: &Observations, mu: &DVector<f64>) -> f64 {
    let d: f64 = obs
        .y
        .iter()
        .zip(&obs.weights)
        .zip(mu.iter())
        .filter(|((_, &w), _)| w > 0.0)
        .map(|((&y, &w), &m)| w * family.unit_deviance(y, m))
        .sum();
    d + obs.pooled_ss
}

/// Fits ungrouped observations.
pub fn fit(
    x: &DesignMatrix,
    y: &[f64],
    w: &[f64],
    family: Family,
    opts: &GlmOptions,
) -> Result<FitResult, GlmError> {
    fit_observations(x, &Observations::new(y.to_vec(), w.to_vec()), family, opts)
}

/// Fits possibly grouped observations.
pub fn fit_observations(
    x: &DesignMatrix,
    obs: &Observations,
    family: Family,
    opts: &GlmOptions,
) -> Result<FitResult, GlmError> {
    check_inputs(x, obs, family)?;
    let p = x.ncols();
    let n_obs = obs.effective_n();
    let y = DVector::from_column_slice(&obs.y);

    let (beta, mu, iterations, converged, final_dev) = match family {
        Family::GaussianIdentity => {
            let step = weighted_solve(&x.x, &y, &obs.weights, &x.layout)?;
            let eta = &x.x * &step.beta;
            let dev = deviance(family, obs, &eta);
            (step.beta, eta, 1, true, dev)
        }
        Family::BinomialLogit => {
            let mut mu = y.map(|v| (v + 0.5) / 2.0);
            let mut eta = mu.map(|m| family.link(m));
            let mut dev_old = deviance(family, obs, &mu);
            let mut beta = DVector::zeros(p);
            let mut converged = false;
            let mut iterations = 0;
            let mut change = f64::INFINITY;
            while iterations < opts.max_iterations {
                iterations += 1;
                let var = mu.map(|m| m * (1.0 - m));
                let ww: Vec<f64> = obs.weights.iter().zip(var.iter()).map(|(&w, &v)| w * v).collect();
                let z = DVector::from_fn(y.len(), |r, _| {
                    if var[r] > 0.0 {
                        eta[r] + (y[r] - mu[r]) / var[r]
                    } else {
                        eta[r]
                    }
                });
                let step = match weighted_solve(&x.x, &z, &ww, &x.layout) {
                    Ok(s) => s,
                    Err(e) if iterations == 1 => return Err(e),
                    Err(_) => {
                        let max_eta = eta.amax();
                        return Err(GlmError::Separation { max_eta });
                    }
                };
                beta = step.beta;
                eta = &x.x * &beta;
                mu = eta.map(logistic);
                let dev = deviance(family, obs, &mu);
                change = (dev - dev_old).abs() / (dev.abs() + 0.1);
                dev_old = dev;
                if change < opts.tolerance {
                    converged = true;
                    break;
                }
            }
            let max_eta = eta
                .iter()
                .zip(&obs.weights)
                .filter(|(_, &w)| w > 0.0)
                .map(|(e, _)| e.abs())
                .fold(0.0, f64::max);
            if max_eta > opts.separation_eta {
                return Err(GlmError::Separation { max_eta });
            }
            if !converged {
                return Err(GlmError::NotConverged { iterations, change });
            }
            (beta, mu, iterations, converged, dev_old)
        }
    };
    if (n_obs as usize) < p {
        return Err(GlmError::InvalidInput(format!("{n_obs} observations for {p} parameters")));
    }
    let residual_df = (n_obs as usize - p) as f64;
    let ww: Vec<f64> = match family {
        Family::GaussianIdentity => obs.weights.clone(),
        Family::BinomialLogit => obs
            .weights
            .iter()
            .zip(mu.iter())
            .map(|(&w, &m)| w * m * (1.0 - m))
            .collect(),
    };
    let final_step = weighted_solve(&x.x, &DVector::zeros(x.nrows()), &ww, &x.layout)?;
    let unscaled = final_step.qr.inverse_gram().expect("full rank checked by solve");
    let dispersion = match family {
        Family::GaussianIdentity if residual_df > 0.0 => final_dev / residual_df,
        Family::GaussianIdentity => f64::NAN,
        Family::BinomialLogit => 1.0,
    };
    let cov = unscaled * dispersion;
    let std_errors = (0..p).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
    Ok(FitResult {
        family,
        column_names: (0..p).map(|c| x.layout.column_name(c)).collect(),
        layout: x.layout.clone(),
        coefficients: beta.iter().copied().collect(),
        std_errors,
        covariance: (0..p).map(|i| cov.row(i).iter().copied().collect()).collect(),
        deviance: final_dev,
        dispersion,
        residual_df,
        n_obs,
        weighted_n: obs.weighted_n(),
        iterations,
        converged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    F,
    T,
    WaldChi2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub kind: TestKind,
    pub statistic: f64,
    pub df1: f64,
    /// Denominator df for F; absent for t (df in `df1`) and chi-square.
    pub df2: Option<f64>,
    pub p_value: f64,
}

pub fn f_sf(stat: f64, df1: f64, df2: f64) -> f64 {
    if stat.is_nan() {
        return f64::NAN;
    }
    if stat <= 0.0 {
        return 1.0;
    }
    if stat.is_infinite() {
        return 0.0;
    }
    FisherSnedecor::new(df1, df2).map(|d| d.sf(stat)).unwrap_or(f64::NAN)
}

pub fn t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    StudentsT::new(0.0, 1.0, df)
        .map(|d| (2.0 * d.sf(t.abs())).min(1.0))
        .unwrap_or(f64::NAN)
}

pub fn chi2_sf(stat: f64, df: f64) -> f64 {
    if stat <= 0.0 {
        return 1.0;
    }
    ChiSquared::new(df).map(|d| d.sf(stat)).unwrap_or(f64::NAN)
}

/// Deviance-ratio F test of a nested null model against a full model:
/// `F = ((D0 - D1) / df1) / (D1 / df2)` with `df1 = df0 - df_full` and `df2`
/// the full model's residual df.
///
/// Identical models (df1 = 0, equal deviances) give F = 0, p = 1.
pub fn deviance_f_test(null: &FitResult, full: &FitResult) -> Result<TestResult, GlmError> {
    let df1 = null.residual_df - full.residual_df;
    let df2 = full.residual_df;
    let tol = 1e-8 * (1.0 + full.deviance.abs());
    let diff = null.deviance - full.deviance;
    if df1 < 0.0 {
        return Err(GlmError::NotNested { df1 });
    }
    if diff < -tol {
        return Err(GlmError::DevianceOrder {
            null: null.deviance,
            full: full.deviance,
        });
    }
    let diff = diff.max(0.0);
    if df1 == 0.0 {
        if diff <= tol {
            return Ok(TestResult {
                kind: TestKind::F,
                statistic: 0.0,
                df1,
                df2: Some(df2),
                p_value: 1.0,
            });
        }
        return Err(GlmError::NotNested { df1 });
    }
    let statistic = if diff <= tol && full.deviance <= tol {
        0.0
    } else if full.deviance <= 0.0 || df2 == 0.0 {
        f64::INFINITY
    } else {
        (diff / df1) / (full.deviance / df2)
    };
    Ok(TestResult {
        kind: TestKind::F,
        statistic,
        df1,
        df2: Some(df2),
        p_value: f_sf(statistic, df1, df2),
    })
}

/// A linear combination of coefficients with its t test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastTest {
    pub estimate: f64,
    pub se: f64,
    pub test: TestResult,
}

impl ContrastTest {
    pub fn t(&self) -> f64 {
        self.test.statistic
    }

    pub fn p_value(&self) -> f64 {
        self.test.p_value
    }
}

fn contrast_variance(fit: &FitResult, c: &DVector<f64>) -> Result<(f64, f64), GlmError> {
    if c.len() != fit.ncols() {
        return Err(GlmError::LayoutMismatch {
            expected: fit.ncols(),
            got: c.len(),
        });
    }
    let cov = fit.covariance_matrix();
    let var = (c.transpose() * &cov * c)[(0, 0)];
    let scale = c.norm_squared() * cov.diagonal().amax();
    if !(var > 1e-14 * scale) || !var.is_finite() {
        return Err(GlmError::DegenerateContrast(var));
    }
    Ok((fit.beta().dot(c), var))
}

/// t test of `c . beta = 0` using the fit's covariance and residual df.
pub fn contrast_t_test(fit: &FitResult, c: &DVector<f64>) -> Result<ContrastTest, GlmError> {
    let (estimate, var) = contrast_variance(fit, c)?;
    let se = var.sqrt();
    let t = estimate / se;
    Ok(ContrastTest {
        estimate,
        se,
        test: TestResult {
            kind: TestKind::T,
            statistic: t,
            df1: fit.residual_df,
            df2: None,
            p_value: t_two_sided(t, fit.residual_df),
        },
    })
}

/// Joint Wald chi-square test of `C beta = 0` for the given contrast rows.
pub fn wald_chi2_test(fit: &FitResult, contrasts: &[DVector<f64>]) -> Result<TestResult, GlmError> {
    let q = contrasts.len();
    if q == 0 {
        return Err(GlmError::InvalidInput("no contrasts".into()));
    }
    let p = fit.ncols();
    let mut cm = DMatrix::zeros(q, p);
    for (r, c) in contrasts.iter().enumerate() {
        if c.len() != p {
            return Err(GlmError::LayoutMismatch { expected: p, got: c.len() });
        }
        cm.set_row(r, &c.transpose());
    }
    let est = &cm * fit.beta();
    let v = &cm * fit.covariance_matrix() * cm.transpose();
    let chol = v.cholesky().ok_or(GlmError::DegenerateContrast(0.0))?;
    let stat = est.dot(&chol.solve(&est));
    Ok(TestResult {
        kind: TestKind::WaldChi2,
        statistic: stat,
        df1: q as f64,
        df2: None,
        p_value: chi2_sf(stat, q as f64),
    })
}

/// Linear predictors and response-scale means.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub eta: Vec<f64>,
    pub mean: Vec<f64>,
}

pub fn predict(fit: &FitResult, x_new: &DesignMatrix) -> Result<Prediction, GlmError> {
    if x_new.layout.columns != fit.layout.columns {
        return Err(GlmError::LayoutMismatch {
            expected: fit.ncols(),
            got: x_new.ncols(),
        });
    }
    let eta: Vec<f64> = (&x_new.x * fit.beta()).iter().copied().collect();
    let mean = eta.iter().map(|&e| fit.family.inverse_link(e)).collect();
    Ok(Prediction { eta, mean })
}

/// Score vector `X' (w o (y - mu))` at the fitted coefficients.
pub fn score(fit: &FitResult, x: &DesignMatrix, obs: &Observations) -> DVector<f64> {
    let eta = &x.x * fit.beta();
    let resid = DVector::from_fn(x.nrows(), |r, _| {
        obs.weights[r] * (obs.y[r] - fit.family.inverse_link(eta[r]))
    });
    x.x.transpose() * resid
}
