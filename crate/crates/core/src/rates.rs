//! Exponential rate families.
//!
//! A rate model maps an individual and the set of their neighbors who have
//! already adopted to the rate of their next latent waiting time. The
//! likelihood, simulator and estimators only talk to [`RateModel`], so a
//! set-dependent specification plugs in without touching them.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Covariates;
use crate::error::{invalid, Error, Result};

/// Everything a rate may depend on.
#[derive(Debug, Clone, Copy)]
pub struct RateContext<'a> {
    pub individual: usize,
    /// Neighbors of `individual` who adopted before the current round.
    pub adopted_neighbors: &'a [usize],
    pub degree: usize,
    /// Covariates indexed like `individual` and `adopted_neighbors`.
    pub covariates: &'a Covariates,
}

impl<'a> RateContext<'a> {
    pub fn x(&self) -> &'a [f64] {
        self.covariates.row(self.individual)
    }

    fn check(&self) -> Result<()> {
        if self.adopted_neighbors.len() > self.degree {
            return Err(Error::InvariantViolation(format!(
                "individual {} has {} adopted neighbors but degree {}",
                self.individual,
                self.adopted_neighbors.len(),
                self.degree
            )));
        }
        Ok(())
    }
}

/// A parametric family of positive rates `λ_i^{+C}(θ)`, expressed through `ln λ`.
pub trait RateModel: Send + Sync {
    /// Parameter count for data with `n_covariates` columns.
    fn n_params(&self, n_covariates: usize) -> usize;

    fn param_names(&self, n_covariates: usize) -> Vec<String> {
        (0..self.n_params(n_covariates)).map(|k| format!("theta{}", k + 1)).collect()
    }

    fn log_rate(&self, ctx: &RateContext<'_>, theta: &[f64]) -> Result<f64>;

    /// Returns `ln λ`, writes its gradient into `grad` and, when requested,
    /// its Hessian (row-major) into `hess`.
    fn log_rate_derivs(
        &self,
        ctx: &RateContext<'_>,
        theta: &[f64],
        grad: &mut [f64],
        hess: Option<&mut [f64]>,
    ) -> Result<f64>;

    /// True when `ln λ` is affine in `θ`, so its Hessian vanishes.
    fn is_log_linear(&self) -> bool {
        false
    }

    fn rate(&self, ctx: &RateContext<'_>, theta: &[f64]) -> Result<f64> {
        Ok(self.log_rate(ctx, theta)?.exp())
    }

    /// `∂λ/∂θ`.
    fn rate_grad(&self, ctx: &RateContext<'_>, theta: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; theta.len()];
        let lr = self.log_rate_derivs(ctx, theta, &mut g, None)?;
        let rate = lr.exp();
        g.iter_mut().for_each(|v| *v *= rate);
        Ok(g)
    }

    /// `∂²λ/∂θ∂θ'`.
    fn rate_hess(&self, ctx: &RateContext<'_>, theta: &[f64]) -> Result<DMatrix<f64>> {
        let k = theta.len();
        let mut g = vec![0.0; k];
        let mut h = vec![0.0; k * k];
        let lr = self.log_rate_derivs(ctx, theta, &mut g, Some(&mut h))?;
        let rate = lr.exp();
        Ok(DMatrix::from_fn(k, k, |a, b| rate * (h[a * k + b] + g[a] * g[b])))
    }
}

/// Peer-effect parameters of the log-linear model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub beta: Vec<f64>,
    pub delta: f64,
}

impl Theta {
    pub fn new(beta: Vec<f64>, delta: f64) -> Self {
        Self { beta, delta }
    }

    /// Flat parameter vector `(β', δ)'`.
    pub fn to_params(&self) -> Vec<f64> {
        let mut v = self.beta.clone();
        v.push(self.delta);
        v
    }

    pub fn from_params(params: &[f64]) -> Result<Self> {
        let (&delta, beta) = params
            .split_last()
            .ok_or_else(|| invalid("parameter vector is empty"))?;
        Ok(Self {
            beta: beta.to_vec(),
            delta,
        })
    }

    pub fn validate(&self, n_covariates: usize) -> Result<()> {
        if self.beta.len() != n_covariates {
            return Err(invalid(format!(
                "theta has {} coefficients but data has {n_covariates} covariates",
                self.beta.len()
            )));
        }
        if !self.delta.is_finite() || self.beta.iter().any(|b| !b.is_finite()) {
            return Err(invalid("theta must be finite"));
        }
        Ok(())
    }
}

/// `ln λ_i^{+C} = x_i'β + δ |C| / d_i`, with the peer term zero for isolated individuals.
#[derive(Debug, Clone, Copy, Default)]
pub struct LogLinearRate;

impl LogLinearRate {
    /// Share of the peer group that has adopted.
    pub fn peer_share(ctx: &RateContext<'_>) -> f64 {
        if ctx.degree == 0 {
            0.0
        } else {
            ctx.adopted_neighbors.len() as f64 / ctx.degree as f64
        }
    }
}

impl RateModel for LogLinearRate {
    fn n_params(&self, n_covariates: usize) -> usize {
        n_covariates + 1
    }

    fn param_names(&self, n_covariates: usize) -> Vec<String> {
        let mut names: Vec<String> = (1..=n_covariates).map(|k| format!("beta{k}")).collect();
        names.push("delta".into());
        names
    }

    fn log_rate(&self, ctx: &RateContext<'_>, theta: &[f64]) -> Result<f64> {
        ctx.check()?;
        let x = ctx.x();
        let (delta, beta) = (theta[x.len()], &theta[..x.len()]);
        let lin: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum();
        Ok(lin + Self::peer_share(ctx) * delta)
    }

    fn log_rate_derivs(
        &self,
        ctx: &RateContext<'_>,
        theta: &[f64],
        grad: &mut [f64],
        hess: Option<&mut [f64]>,
    ) -> Result<f64> {
        let lr = self.log_rate(ctx, theta)?;
        let x = ctx.x();
        grad[..x.len()].copy_from_slice(x);
        grad[x.len()] = Self::peer_share(ctx);
        if let Some(h) = hess {
            h.fill(0.0);
        }
        Ok(lr)
    }

    fn is_log_linear(&self) -> bool {
        true
    }
}

/// Adds a fixed per-individual shift to another model's log rate.
///
/// Used to generate data with unobserved group heterogeneity.
#[derive(Debug, Clone)]
pub struct OffsetRate<M> {
    pub inner: M,
    /// Indexed like the individuals in the contexts this model will see.
    pub offsets: Vec<f64>,
}

impl<M: RateModel> RateModel for OffsetRate<M> {
    fn n_params(&self, n_covariates: usize) -> usize {
        self.inner.n_params(n_covariates)
    }

    fn param_names(&self, n_covariates: usize) -> Vec<String> {
        self.inner.param_names(n_covariates)
    }

    fn log_rate(&self, ctx: &RateContext<'_>, theta: &[f64]) -> Result<f64> {
        Ok(self.inner.log_rate(ctx, theta)? + self.offsets[ctx.individual])
    }

    fn log_rate_derivs(
        &self,
        ctx: &RateContext<'_>,
        theta: &[f64],
        grad: &mut [f64],
        hess: Option<&mut [f64]>,
    ) -> Result<f64> {
        Ok(self.inner.log_rate_derivs(ctx, theta, grad, hess)? + self.offsets[ctx.individual])
    }

    fn is_log_linear(&self) -> bool {
        self.inner.is_log_linear()
    }
}

/// Parameter-free model defined by an arbitrary positive rate function of the context.
pub struct FnRate<F>(pub F);

impl<F> RateModel for FnRate<F>
where
    F: Fn(&RateContext<'_>) -> f64 + Send + Sync,
{
    fn n_params(&self, _n_covariates: usize) -> usize {
        0
    }

    fn log_rate(&self, ctx: &RateContext<'_>, _theta: &[f64]) -> Result<f64> {
        ctx.check()?;
        let rate = (self.0)(ctx);
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::InvariantViolation(format!(
                "rate function returned {rate} for individual {}",
                ctx.individual
            )));
        }
        Ok(rate.ln())
    }

    fn log_rate_derivs(
        &self,
        ctx: &RateContext<'_>,
        theta: &[f64],
        _grad: &mut [f64],
        _hess: Option<&mut [f64]>,
    ) -> Result<f64> {
        self.log_rate(ctx, theta)
    }

    fn is_log_linear(&self) -> bool {
        true
    }
}
