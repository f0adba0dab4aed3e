//! Causal peer-effect quantities and diffusion counterfactuals at a given `θ`.
//!
//! Monte Carlo standard errors reflect simulation noise only; uncertainty in
//! `θ` is not propagated.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ComponentData, Covariates};
use crate::divdiff::g_function;
use crate::error::{invalid, Error, Result};
use crate::likelihood::{order_distribution, order_distribution_sampled, LikelihoodOptions};
use crate::net::Network;
use crate::process::{counterfactual_sample, simulate};
use crate::rates::{RateContext, RateModel};
use crate::streams::{fork_seed, seeded, substream};

/// Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub mc_se: f64,
    pub budget: usize,
}

impl McEstimate {
    fn from_draws(draws: &[f64]) -> Self {
        let m = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / m;
        let var = if draws.len() > 1 {
            draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (m - 1.0)
        } else {
            0.0
        };
        Self {
            value: mean,
            mc_se: (var / m).sqrt(),
            budget: draws.len(),
        }
    }
}

/// Output record for one estimand evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimandRecord {
    pub kind: String,
    pub value: f64,
    pub mc_se: f64,
    pub budget: usize,
    pub seed: Option<u64>,
}

/// `P(adopt by S | all peers adopt at 0) − P(adopt by S | no peer adopts)`.
pub fn prob_delta_all_peers(lambda: f64, lambda_plus: f64, horizon: f64) -> Result<f64> {
    if !(lambda > 0.0 && lambda_plus > 0.0 && horizon > 0.0) {
        return Err(invalid("rates and horizon must be positive"));
    }
    Ok((-lambda * horizon).exp() * -(-(lambda_plus - lambda) * horizon).exp_m1())
}

/// Small-`δ` approximation `δ S λ e^{-λS}` of [`prob_delta_all_peers`] for the
/// log-linear model, where `λ⁺ = λ e^δ`.
pub fn first_order_delta(lambda: f64, delta: f64, horizon: f64) -> Result<f64> {
    if !(lambda > 0.0 && horizon > 0.0) {
        return Err(invalid("rate and horizon must be positive"));
    }
    Ok(delta * horizon * lambda * (-lambda * horizon).exp())
}

/// Baseline and fully-updated rates `(λ_i, λ_i⁺)` of individual `i`.
pub fn individual_rates<M: RateModel + ?Sized>(
    net: &Network,
    x: &Covariates,
    model: &M,
    theta: &[f64],
    i: usize,
) -> Result<(f64, f64)> {
    if i >= net.len() {
        return Err(invalid(format!("individual {i} out of range")));
    }
    let ctx = |nbrs: &[usize]| model.rate(
        &RateContext {
            individual: i,
            adopted_neighbors: nbrs,
            degree: net.degree(i),
            covariates: x,
        },
        theta,
    );
    Ok((ctx(&[])?, ctx(net.neighbors(i))?))
}

/// Sample average of [`prob_delta_all_peers`] over all individuals.
pub fn average_prob_delta_all_peers<M: RateModel + ?Sized>(
    net: &Network,
    x: &Covariates,
    model: &M,
    theta: &[f64],
    horizon: f64,
) -> Result<f64> {
    if net.is_empty() {
        return Err(invalid("empty network"));
    }
    let mut total = 0.0;
    for i in 0..net.len() {
        let (l, lp) = individual_rates(net, x, model, theta, i)?;
        total += prob_delta_all_peers(l, lp, horizon)?;
    }
    Ok(total / net.len() as f64)
}

fn check_intervention(tau: &[Option<f64>], n: usize) -> Result<()> {
    if tau.len() != n {
        return Err(invalid(format!("intervention has {} entries for {n} individuals", tau.len())));
    }
    if tau.iter().flatten().any(|t| t.is_nan() || *t < 0.0) {
        return Err(invalid("intervention times must lie in [0, ∞]"));
    }
    Ok(())
}

fn freed(tau: &[Option<f64>], target: usize) -> Vec<Option<f64>> {
    let mut t = tau.to_vec();
    t[target] = None;
    t
}

fn mc_draws<R, F>(budget: usize, rng: &mut R, draw: F) -> Result<Vec<f64>>
where
    R: Rng + ?Sized,
    F: Fn(u64) -> Result<f64> + Sync,
{
    if budget == 0 {
        return Err(invalid("Monte Carlo budget must be at least 1"));
    }
    let base = fork_seed(rng);
    (0..budget as u64)
        .into_par_iter()
        .map(|r| draw(crate::streams::derive_seed(base, &[r])))
        .collect()
}

/// `E[Y_i(τ̃) − Y_i(τ)]` for one individual by simulation.
///
/// `None` entries are free; the target's own entry is ignored. Both arms of
/// each draw share one random stream.
#[allow(clippy::too_many_arguments)]
pub fn general_delta<M: RateModel + ?Sized, R: Rng + ?Sized>(
    net: &Network,
    x: &Covariates,
    model: &M,
    theta: &[f64],
    horizon: f64,
    target: usize,
    tau_tilde: &[Option<f64>],
    tau: &[Option<f64>],
    budget: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    general_delta_average(net, x, model, theta, horizon, &[target], tau_tilde, tau, budget, rng)
}

/// Average of [`general_delta`] over `targets` (each draw averages them all).
#[allow(clippy::too_many_arguments)]
pub fn general_delta_average<M: RateModel + ?Sized, R: Rng + ?Sized>(
    net: &Network,
    x: &Covariates,
    model: &M,
    theta: &[f64],
    horizon: f64,
    targets: &[usize],
    tau_tilde: &[Option<f64>],
    tau: &[Option<f64>],
    budget: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    let n = net.len();
    check_intervention(tau_tilde, n)?;
    check_intervention(tau, n)?;
    if targets.is_empty() || targets.iter().any(|&t| t >= n) {
        return Err(invalid("targets must be nonempty and in range"));
    }
    type Arms = (Vec<Option<f64>>, Vec<Option<f64>>);
    let arms: Vec<Arms> = targets
        .iter()
        .map(|&t| (freed(tau_tilde, t), freed(tau, t)))
        .collect();
    let draws = mc_draws(budget, rng, |seed| {
        let mut diff = 0.0;
        for (k, &t) in targets.iter().enumerate() {
            let s = crate::streams::derive_seed(seed, &[k as u64]);
            let a = counterfactual_sample(net, x, model, theta, horizon, &arms[k].0, &mut seeded(s))?;
            let b = counterfactual_sample(net, x, model, theta, horizon, &arms[k].1, &mut seeded(s))?;
            diff += a.outcomes[t] as u8 as f64 - b.outcomes[t] as u8 as f64;
        }
        Ok(diff / targets.len() as f64)
    })?;
    Ok(McEstimate::from_draws(&draws))
}

/// Expected time until a share `q` of the population has adopted, simulated
/// without a horizon.
pub fn expected_time_to_fraction<M: RateModel + ?Sized, R: Rng + ?Sized>(
    net: &Network,
    x: &Covariates,
    model: &M,
    theta: &[f64],
    q: f64,
    budget: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(invalid(format!("fraction must lie in (0, 1], got {q}")));
    }
    if net.is_empty() {
        return Err(invalid("empty network"));
    }
    let n = net.len();
    let count = ((q * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let draws = mc_draws(budget, rng, |seed| {
        let tr = simulate(net, x, model, theta, f64::INFINITY, &mut seeded(seed))?;
        let t = tr.times[tr.order[count - 1]];
        Ok(t)
    })?;
    Ok(McEstimate::from_draws(&draws))
}

/// Expected adoption time of `target` under intervention `tau`, without a horizon.
#[allow(clippy::too_many_arguments)]
pub fn expected_adoption_time<M: RateModel + ?Sized, R: Rng + ?Sized>(
    net: &Network,
    x: &Covariates,
    model: &M,
    theta: &[f64],
    target: usize,
    tau: &[Option<f64>],
    budget: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    check_intervention(tau, net.len())?;
    if target >= net.len() {
        return Err(invalid(format!("individual {target} out of range")));
    }
    let arm = freed(tau, target);
    let draws = mc_draws(budget, rng, |seed| {
        let tr = counterfactual_sample(net, x, model, theta, f64::INFINITY, &arm, &mut seeded(seed))?;
        Ok(tr.times[target])
    })?;
    Ok(McEstimate::from_draws(&draws))
}

/// Conditional distribution of the adoption order given the outcomes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderPosterior {
    /// Orders in local labels with their probabilities.
    pub orders: Vec<(Vec<usize>, f64)>,
    /// `(local label, probability of adopting first)` for each adopter.
    pub first_mover: Vec<(usize, f64)>,
    /// Estimated from sampled orders rather than enumerated.
    pub sampled: bool,
}

/// Order posterior of one component; sampled (and flagged) above the cap.
pub fn order_posterior<M: RateModel + ?Sized>(
    comp: &ComponentData,
    model: &M,
    theta: &[f64],
    opts: &LikelihoodOptions,
) -> Result<OrderPosterior> {
    let adopters = comp.adopters();
    if adopters.is_empty() {
        return Err(invalid("component has no adopters"));
    }
    let sampled = adopters.len() > opts.enumeration_cap;
    let orders = if sampled {
        let mut rng = substream(opts.seed, &[u64::MAX]);
        let draws = order_distribution_sampled(comp, model, theta, opts.sample_size, &mut rng)?;
        let mut merged: Vec<(Vec<usize>, f64)> = Vec::new();
        let mut sorted = draws;
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        for (p, w) in sorted {
            match merged.last_mut() {
                Some(last) if last.0 == p => last.1 += w,
                _ => merged.push((p, w)),
            }
        }
        merged
    } else {
        order_distribution(comp, model, theta, opts.enumeration_cap)?
    };
    let first_mover = adopters
        .iter()
        .map(|&a| (a, orders.iter().filter(|o| o.0[0] == a).map(|o| o.1).sum()))
        .collect();
    Ok(OrderPosterior {
        orders,
        first_mover,
        sampled,
    })
}

/// Outcome probabilities `[p00, p10, p01, p11]` of a dyad (first index is
/// individual 1) with rates `λ_i` before and `λ_i⁺` after the other adopts.
pub fn dyad_probabilities(l1: f64, l2: f64, l1p: f64, l2p: f64, horizon: f64) -> Result<[f64; 4]> {
    if [l1, l2, l1p, l2p, horizon].iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(invalid("rates and horizon must be positive and finite"));
    }
    let s = horizon;
    let p00 = (-(l1 + l2) * s).exp();
    let p10 = l1 * (-l2p * s).exp() * g_function(l1 + l2 - l2p, s);
    let p01 = l2 * (-l1p * s).exp() * g_function(l1 + l2 - l1p, s);
    Ok([p00, p10, p01, 1.0 - p00 - p10 - p01])
}

/// `p10` of a symmetric dyad with rates `λ` and `λ⁺`.
fn symmetric_p10(lambda: f64, lambda_plus: f64, horizon: f64) -> f64 {
    lambda * (-lambda_plus * horizon).exp() * g_function(2.0 * lambda - lambda_plus, horizon)
}

/// Recovers `(λ, λ⁺)` of a symmetric dyad from `P(0,0)` and `P(1,0)`.
///
/// `λ = −ln p00 / (2S)`; `λ⁺` solves `p10(λ, λ⁺) = p10` by bisection on the
/// strictly decreasing map, whose range is `(0, (1 − p00)/2)`.
pub fn recover_rates_dyad(p00: f64, p10: f64, horizon: f64) -> Result<(f64, f64)> {
    if !(p00 > 0.0 && p00 < 1.0) {
        return Err(invalid(format!("p00 must lie in (0, 1), got {p00}")));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(invalid("horizon must be positive and finite"));
    }
    let lambda = -p00.ln() / (2.0 * horizon);
    let sup = (1.0 - p00) / 2.0;
    if !(p10 > 0.0 && p10 < sup) {
        return Err(Error::Identification(format!(
            "p10 = {p10} is outside the attainable range (0, {sup}) for p00 = {p00}"
        )));
    }
    let f = |x: f64| symmetric_p10(lambda, x, horizon) - p10;
    let (mut lo, mut hi) = (0.0, 2.0 * lambda.max(1.0 / horizon));
    while f(hi) > 0.0 {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::Identification("no finite updated rate matches p10".into()));
        }
    }
    while hi - lo > 1e-13 * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lambda_plus = 0.5 * (lo + hi);
    if !(lambda_plus > 0.0) {
        return Err(Error::Identification("updated rate is not positive".into()));
    }
    Ok((lambda, lambda_plus))
}
