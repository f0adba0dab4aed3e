//! Maximum-likelihood estimation with outer-product-of-scores covariance.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{ComponentData, Sample};
use crate::divdiff::Derivatives;
use crate::error::{invalid, Error, Result};
use crate::likelihood::{component_logliks, LikelihoodEval, LikelihoodOptions};
use crate::rates::{RateModel, Theta};

/// 97.5% standard normal quantile used for all reported intervals.
pub const Z95: f64 = 1.96;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOptions {
    /// Starting point; `None` uses [`init_theta`] when the model is log-linear in
    /// the covariates and zeros otherwise.
    pub init: Option<Vec<f64>>,
    /// Stop when the score's largest entry falls below this.
    pub tol: f64,
    /// Stop when an accepted step moves no coordinate more than this.
    pub step_tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Box `|θ_j| ≤ bound`; ending on the box marks the fit unconverged.
    pub bound: f64,
    pub likelihood: LikelihoodOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            init: None,
            tol: 1e-6,
            step_tol: 1e-10,
            max_iter: 100,
            max_halvings: 30,
            bound: 20.0,
            likelihood: LikelihoodOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub names: Vec<String>,
    pub params: Vec<f64>,
    pub vcov: DMatrix<f64>,
    pub se: Vec<f64>,
    pub ci: Vec<(f64, f64)>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
    pub hit_bound: bool,
    /// Whether any component's likelihood used sampled orders.
    pub sampled: bool,
    pub flags: Vec<String>,
    pub horizon: f64,
}

impl FitResult {
    /// The estimate as `(β, δ)`; meaningful for the log-linear model.
    pub fn theta_hat(&self) -> Theta {
        Theta::from_params(&self.params).expect("fit has parameters")
    }

    pub fn param(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn record(&self) -> FitRecord {
        FitRecord {
            method: "exp".into(),
            names: self.names.clone(),
            estimates: self.params.clone(),
            se: self.se.clone(),
            ci_lower: self.ci.iter().map(|c| c.0).collect(),
            ci_upper: self.ci.iter().map(|c| c.1).collect(),
            vcov: Some(matrix_rows(&self.vcov)),
            loglik: Some(self.loglik),
            iterations: Some(self.iterations),
            converged: self.converged,
            gradient_norm: Some(self.gradient_norm),
            flags: self.flags.clone(),
            horizon: Some(self.horizon),
        }
    }
}

/// Serialized fit shared by all estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub method: String,
    pub names: Vec<String>,
    pub estimates: Vec<f64>,
    pub se: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vcov: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loglik: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradient_norm: Option<f64>,
    pub flags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
}

pub(crate) fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub(crate) fn intervals(params: &[f64], se: &[f64]) -> Vec<(f64, f64)> {
    params
        .iter()
        .zip(se)
        .map(|(p, s)| (p - Z95 * s, p + Z95 * s))
        .collect()
}

/// Starting value: no peer effect, and a constant covariate (if any) scaled so
/// the implied common rate reproduces the overall adoption share.
pub fn init_theta(sample: &Sample) -> Theta {
    let p = sample.x.n_cols();
    let mut theta = Theta::new(vec![0.0; p], 0.0);
    let n = sample.len();
    let g = sample.n_adopters();
    if g == 0 || g == n {
        warn!("all or none adopted; starting from zero and the optimum may lie on the boundary");
        return theta;
    }
    let share = g as f64 / n as f64;
    let rate = -(1.0 - share).ln() / sample.horizon;
    if let Some(j) = (0..p).find(|&j| sample.x.is_constant_column(j) && sample.x.get(0, j) != 0.0) {
        theta.beta[j] = rate.ln() / sample.x.get(0, j);
    }
    theta
}

/// Score-outer-product covariance `(Σ_b s_b s_b')⁻¹`; the flag reports a
/// rank-deficient sum (pseudo-inverse used).
pub fn opg_from_scores(scores: &[Vec<f64>], k: usize) -> (DMatrix<f64>, bool) {
    let mut outer = DMatrix::zeros(k, k);
    for s in scores {
        let v = DVector::from_column_slice(s);
        outer += &v * v.transpose();
    }
    let svd = outer.clone().svd(true, true);
    let top = svd.singular_values.max();
    let eps = top * 1e-12 * k as f64;
    let deficient = top <= 0.0 || svd.singular_values.iter().any(|&s| s <= eps);
    let inv = if deficient {
        svd.pseudo_inverse(eps.max(f64::MIN_POSITIVE)).unwrap_or_else(|_| DMatrix::zeros(k, k))
    } else {
        outer.try_inverse().unwrap_or_else(|| DMatrix::zeros(k, k))
    };
    ((&inv + inv.transpose()) * 0.5, deficient)
}

/// Covariance of the estimate from per-component scores at `theta`.
pub fn vcov_opg<M: RateModel + ?Sized>(
    sample: &Sample,
    model: &M,
    theta: &[f64],
    opts: &LikelihoodOptions,
) -> Result<(DMatrix<f64>, bool)> {
    let parts = component_logliks(&sample.component_data(), model, theta, opts, Derivatives::Gradient)?;
    let scores: Vec<Vec<f64>> = parts.into_iter().map(|e| e.score).collect();
    Ok(opg_from_scores(&scores, theta.len()))
}

fn evaluate<M: RateModel + ?Sized>(
    comps: &[ComponentData],
    model: &M,
    theta: &[f64],
    opts: &LikelihoodOptions,
) -> Result<(LikelihoodEval, Vec<Vec<f64>>)> {
    let parts = component_logliks(comps, model, theta, opts, Derivatives::Hessian)?;
    let scores = parts.iter().map(|e| e.score.clone()).collect();
    Ok((LikelihoodEval::sum(theta.len(), &parts), scores))
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Ascent direction: Newton if the Hessian is negative definite, else the score.
fn direction(eval: &LikelihoodEval) -> (Vec<f64>, bool) {
    let neg = -eval.hessian.clone();
    if let Some(chol) = neg.cholesky() {
        let d = chol.solve(&DVector::from_column_slice(&eval.score));
        if d.iter().all(|v| v.is_finite()) {
            return (d.iter().copied().collect(), true);
        }
    }
    (eval.score.clone(), false)
}

/// Maximizes the likelihood of `sample` under `model`.
///
/// Sampled components use fixed per-component streams, so the objective is
/// the same function at every iteration.
pub fn fit<M: RateModel + ?Sized>(sample: &Sample, model: &M, opts: &FitOptions) -> Result<FitResult> {
    let k = model.n_params(sample.x.n_cols());
    let start = match &opts.init {
        Some(v) => v.clone(),
        None => {
            let t = init_theta(sample).to_params();
            if t.len() == k {
                t
            } else {
                vec![0.0; k]
            }
        }
    };
    if start.len() != k {
        return Err(invalid(format!("initial value has {} entries, model needs {k}", start.len())));
    }
    if !(opts.tol > 0.0 && opts.bound > 0.0) {
        return Err(invalid("tolerance and bound must be positive"));
    }
    let names = model.param_names(sample.x.n_cols());
    let comps = sample.component_data();
    let clamp = |v: f64| v.clamp(-opts.bound, opts.bound);
    let mut theta: Vec<f64> = start.into_iter().map(clamp).collect();
    let (mut eval, mut scores) = evaluate(&comps, model, &theta, &opts.likelihood)?;
    let mut flags = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut fallback_steps = 0;
    let mut stalled = false;

    while iterations < opts.max_iter {
        if sup_norm(&eval.score) < opts.tol {
            converged = true;
            break;
        }
        iterations += 1;
        let (dir, newton) = direction(&eval);
        if !newton {
            fallback_steps += 1;
        }
        let slope: f64 = dir.iter().zip(&eval.score).map(|(a, b)| a * b).sum();
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| clamp(t + alpha * d)).collect();
            match evaluate(&comps, model, &trial, &opts.likelihood) {
                Ok((e, s)) if e.loglik.is_finite() && e.loglik >= eval.loglik + 1e-4 * alpha * slope => {
                    accepted = Some((trial, e, s));
                    break;
                }
                Ok(_) | Err(Error::Numerical(_)) => alpha *= 0.5,
                Err(e) => return Err(e),
            }
        }
        let Some((trial, e, s)) = accepted else {
            stalled = true;
            break;
        };
        let step = trial.iter().zip(&theta).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        theta = trial;
        eval = e;
        scores = s;
        if step < opts.step_tol {
            converged = true;
            break;
        }
    }
    let gradient_norm = sup_norm(&eval.score);
    if !converged && gradient_norm < opts.tol {
        converged = true;
    }
    if stalled {
        flags.push("line-search-stalled".to_string());
        // Rounding in the objective near the optimum can defeat the sufficient
        // increase test before the score reaches `tol`.
        if gradient_norm < opts.tol * 1e3 {
            converged = true;
        }
    }
    if fallback_steps > 0 {
        flags.push(format!("gradient-fallback-steps={fallback_steps}"));
    }
    let hit_bound = theta.iter().any(|t| t.abs() >= opts.bound);
    if hit_bound {
        flags.push("hit-bound".to_string());
        converged = false;
    }
    if !converged {
        flags.push("not-converged".to_string());
    }
    if (-eval.hessian.clone()).cholesky().is_none() {
        flags.push("hessian-not-negative-definite".to_string());
    }
    let (vcov, deficient) = opg_from_scores(&scores, k);
    if deficient {
        flags.push("opg-rank-deficient".to_string());
    }
    let d = &eval.diagnostics;
    if d.clamped > 0 {
        flags.push(format!("clamped-kernels={}", d.clamped));
    }
    let se: Vec<f64> = (0..k).map(|i| vcov[(i, i)].max(0.0).sqrt()).collect();
    Ok(FitResult {
        names,
        ci: intervals(&theta, &se),
        params: theta,
        vcov,
        se,
        loglik: eval.loglik,
        iterations,
        converged,
        gradient_norm,
        hit_bound,
        sampled: eval.is_sampled,
        flags,
        horizon: sample.horizon,
    })
}
