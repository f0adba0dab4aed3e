//! Observed-data likelihood with the adoption order marginalized.
//!
//! For a component with `G` adopters, the probability of the observed
//! outcomes is a sum over orders `p` of the adopters of
//!
//! ```text
//! Π_{i=1}^{G} λ_{p_i}^{+ {p_1..p_{i-1}} ∩ N(p_i)} · Σ_{g=0}^{G} exp(-c_g S) / Π_{h≠g} (c_h - c_g)
//! ```
//!
//! where `c_g` is the total rate of everyone not among the first `g`
//! adopters. Non-adopters enter only through the `c_g`, so only the `G!`
//! adopter orders are enumerated. Above a configurable adopter count the sum
//! is estimated from uniformly drawn orders; score and Hessian are then the
//! exact derivatives of that sampled objective.

use std::collections::HashSet;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::data::{ComponentData, Sample};
use crate::divdiff::{Derivatives, RaceKernel};
use crate::error::{invalid, Error, Result};
use crate::rates::{RateContext, RateModel};
use crate::streams::substream;

/// How permutations are drawn when the sum is sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingScheme {
    #[default]
    WithReplacement,
    /// Distinct orders; exhausts all orders (and is then exact) when `m ≥ G!`.
    WithoutReplacement,
}

/// Exact-below-cap, sampled-above policy for [`total_loglik`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LikelihoodOptions {
    /// Largest adopter count summed exactly.
    pub enumeration_cap: usize,
    /// Orders drawn per component above the cap.
    pub sample_size: usize,
    pub scheme: SamplingScheme,
    /// Base seed for per-component sampling streams.
    pub seed: u64,
}

impl Default for LikelihoodOptions {
    fn default() -> Self {
        Self {
            enumeration_cap: 8,
            sample_size: 2000,
            scheme: SamplingScheme::WithReplacement,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Diagnostics {
    /// Kernels whose nodes were spread too widely for the single-series path.
    pub wide_kernels: usize,
    /// Kernels whose value rounded to a nonpositive number and was clamped.
    pub clamped: usize,
    /// Kernels with two rate totals equal to within `1e-9` relative.
    pub coincident_nodes: usize,
}

impl std::ops::AddAssign for Diagnostics {
    fn add_assign(&mut self, o: Self) {
        self.wide_kernels += o.wide_kernels;
        self.clamped += o.clamped;
        self.coincident_nodes += o.coincident_nodes;
    }
}

/// Log-likelihood, score and Hessian at one parameter point.
#[derive(Debug, Clone)]
pub struct LikelihoodEval {
    pub loglik: f64,
    pub score: Vec<f64>,
    pub hessian: DMatrix<f64>,
    pub n_perms_used: usize,
    pub is_sampled: bool,
    /// Monte Carlo standard error of `loglik` from order sampling (0 when exact).
    pub mc_se: f64,
    pub diagnostics: Diagnostics,
}

impl LikelihoodEval {
    fn zero(k: usize) -> Self {
        Self {
            loglik: 0.0,
            score: vec![0.0; k],
            hessian: DMatrix::zeros(k, k),
            n_perms_used: 0,
            is_sampled: false,
            mc_se: 0.0,
            diagnostics: Diagnostics::default(),
        }
    }

    /// Sum of independent components, added in the given order.
    pub fn sum<'a>(k: usize, parts: impl IntoIterator<Item = &'a LikelihoodEval>) -> Self {
        let mut total = Self::zero(k);
        let mut var = 0.0;
        for e in parts {
            total.loglik += e.loglik;
            total.score.iter_mut().zip(&e.score).for_each(|(a, b)| *a += b);
            total.hessian += &e.hessian;
            total.n_perms_used += e.n_perms_used;
            total.is_sampled |= e.is_sampled;
            total.diagnostics += e.diagnostics;
            var += e.mc_se * e.mc_se;
        }
        total.mc_se = var.sqrt();
        total
    }
}

/// Per-individual log rate with derivatives, cached between adoptions.
#[derive(Clone)]
struct RateState {
    ln_rate: f64,
    grad: Vec<f64>,
    hess: Vec<f64>,
}

/// `ln T_p` and derivatives for one order.
struct PermEval {
    ln_term: f64,
    /// `∂ ln T`
    dln: Vec<f64>,
    /// `(∂² T) / T`, row-major
    d2: Vec<f64>,
}

/// Evaluates permutation terms of one component at one parameter point.
struct TermEvaluator<'a, M: ?Sized> {
    comp: &'a ComponentData,
    model: &'a M,
    theta: &'a [f64],
    k: usize,
    order: Derivatives,
    adopted: Vec<bool>,
    adopted_nbrs: Vec<Vec<usize>>,
    states: Vec<RateState>,
    c: Vec<f64>,
    dc: Vec<f64>,
    d2c: Vec<f64>,
    kernel: RaceKernel,
    diagnostics: Diagnostics,
}

impl<'a, M: RateModel + ?Sized> TermEvaluator<'a, M> {
    fn new(comp: &'a ComponentData, model: &'a M, theta: &'a [f64], order: Derivatives) -> Result<Self> {
        let k = model.n_params(comp.x.n_cols());
        if theta.len() != k {
            return Err(invalid(format!("expected {k} parameters, got {}", theta.len())));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(invalid("parameters must be finite"));
        }
        let n = comp.len();
        let blank = RateState {
            ln_rate: 0.0,
            grad: vec![0.0; k],
            hess: vec![0.0; k * k],
        };
        Ok(Self {
            comp,
            model,
            theta,
            k,
            order,
            adopted: vec![false; n],
            adopted_nbrs: vec![Vec::new(); n],
            states: vec![blank; n],
            c: Vec::new(),
            dc: Vec::new(),
            d2c: Vec::new(),
            kernel: RaceKernel::new(),
            diagnostics: Diagnostics::default(),
        })
    }

    fn refresh(&mut self, i: usize) -> Result<()> {
        let ctx = RateContext {
            individual: i,
            adopted_neighbors: &self.adopted_nbrs[i],
            degree: self.comp.network.degree(i),
            covariates: &self.comp.x,
        };
        let st = &mut self.states[i];
        let want_hess = self.order == Derivatives::Hessian && !self.model.is_log_linear();
        st.ln_rate = if self.order == Derivatives::None {
            self.model.log_rate(&ctx, self.theta)?
        } else {
            self.model
                .log_rate_derivs(&ctx, self.theta, &mut st.grad, want_hess.then_some(&mut st.hess[..]))?
        };
        if !st.ln_rate.is_finite() {
            return Err(Error::Numerical(format!("non-finite log rate for individual {i}")));
        }
        Ok(())
    }

    /// Appends `c_g` and its derivatives for the current adopted set.
    fn push_total(&mut self) -> Result<()> {
        let k = self.k;
        let g = self.c.len();
        let mut total = 0.0;
        self.dc.resize((g + 1) * k, 0.0);
        self.d2c.resize((g + 1) * k * k, 0.0);
        let dc = &mut self.dc[g * k..(g + 1) * k];
        let d2c = &mut self.d2c[g * k * k..(g + 1) * k * k];
        dc.fill(0.0);
        d2c.fill(0.0);
        let linear = self.model.is_log_linear();
        for (i, st) in self.states.iter().enumerate() {
            if self.adopted[i] {
                continue;
            }
            let rate = st.ln_rate.exp();
            total += rate;
            if self.order >= Derivatives::Gradient {
                for a in 0..k {
                    dc[a] += rate * st.grad[a];
                }
            }
            if self.order == Derivatives::Hessian {
                for a in 0..k {
                    for b in 0..k {
                        let h = if linear { 0.0 } else { st.hess[a * k + b] };
                        d2c[a * k + b] += rate * (h + st.grad[a] * st.grad[b]);
                    }
                }
            }
        }
        if !total.is_finite() {
            return Err(Error::Numerical("total rate overflowed".into()));
        }
        self.c.push(total);
        Ok(())
    }

    fn evaluate(&mut self, perm: &[usize]) -> Result<PermEval> {
        let n = self.comp.len();
        let k = self.k;
        self.adopted.fill(false);
        self.adopted_nbrs.iter_mut().for_each(Vec::clear);
        for i in 0..n {
            self.refresh(i)?;
        }
        self.c.clear();
        let mut ln_r = 0.0;
        let mut dln_r = vec![0.0; k];
        let mut d2ln_r = vec![0.0; k * k];
        let linear = self.model.is_log_linear();
        for &a in perm {
            if a >= n || self.adopted[a] {
                return Err(invalid(format!("order repeats or exceeds individual {a}")));
            }
            self.push_total()?;
            let st = &self.states[a];
            ln_r += st.ln_rate;
            if self.order >= Derivatives::Gradient {
                dln_r.iter_mut().zip(&st.grad).for_each(|(x, y)| *x += y);
            }
            if self.order == Derivatives::Hessian && !linear {
                d2ln_r.iter_mut().zip(&st.hess).for_each(|(x, y)| *x += y);
            }
            self.adopted[a] = true;
            for &j in self.comp.network.neighbors(a) {
                if !self.adopted[j] {
                    self.adopted_nbrs[j].push(a);
                }
            }
            for idx in 0..self.comp.network.degree(a) {
                let j = self.comp.network.neighbors(a)[idx];
                if !self.adopted[j] {
                    self.refresh(j)?;
                }
            }
        }
        self.push_total()?;

        let horizon = self.comp.horizon;
        self.kernel.evaluate(&self.c, horizon, self.order);
        self.record_kernel_diagnostics();
        let ln_term = ln_r + self.kernel.ln_value;
        let mut out = PermEval {
            ln_term,
            dln: Vec::new(),
            d2: Vec::new(),
        };
        if self.order == Derivatives::None {
            return Ok(out);
        }

        let m = self.c.len();
        let mut dln_k = vec![0.0; k];
        for j in 0..m {
            let w = self.kernel.grad[j];
            for a in 0..k {
                dln_k[a] += w * self.dc[j * k + a];
            }
        }
        out.dln = dln_r.iter().zip(&dln_k).map(|(x, y)| x + y).collect();
        if self.order < Derivatives::Hessian {
            return Ok(out);
        }

        // (∂²K)/K = Σ_jl e_jl ∂c_j ∂c_l' + Σ_j d_j ∂²c_j
        let mut d2k = vec![0.0; k * k];
        let mut proj = vec![0.0; k];
        for j in 0..m {
            proj.fill(0.0);
            for l in 0..m {
                let e = self.kernel.hess[j * m + l];
                for b in 0..k {
                    proj[b] += e * self.dc[l * k + b];
                }
            }
            let d = self.kernel.grad[j];
            for a in 0..k {
                let dca = self.dc[j * k + a];
                for b in 0..k {
                    d2k[a * k + b] += dca * proj[b] + d * self.d2c[j * k * k + a * k + b];
                }
            }
        }
        let mut d2 = vec![0.0; k * k];
        for a in 0..k {
            for b in 0..k {
                d2[a * k + b] = d2ln_r[a * k + b]
                    + dln_r[a] * dln_r[b]
                    + dln_r[a] * dln_k[b]
                    + dln_k[a] * dln_r[b]
                    + d2k[a * k + b];
            }
        }
        out.d2 = d2;
        Ok(out)
    }

    fn record_kernel_diagnostics(&mut self) {
        self.diagnostics.wide_kernels += self.kernel.wide as usize;
        self.diagnostics.clamped += self.kernel.clamped as usize;
        let mut sorted = self.c.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        if sorted
            .windows(2)
            .any(|w| (w[1] - w[0]).abs() < 1e-9 * w[1].abs().max(1.0))
        {
            self.diagnostics.coincident_nodes += 1;
        }
    }
}

/// Streaming weighted accumulation of permutation terms in a shifted linear scale.
struct TermAccumulator {
    k: usize,
    shift: f64,
    sum: f64,
    comp: f64,
    sum_sq: f64,
    score: Vec<f64>,
    second: Vec<f64>,
    count: usize,
}

impl TermAccumulator {
    fn new(k: usize) -> Self {
        Self {
            k,
            shift: f64::NEG_INFINITY,
            sum: 0.0,
            comp: 0.0,
            sum_sq: 0.0,
            score: vec![0.0; k],
            second: vec![0.0; k * k],
            count: 0,
        }
    }

    fn add(&mut self, t: &PermEval) {
        self.count += 1;
        if t.ln_term == f64::NEG_INFINITY {
            return;
        }
        if t.ln_term > self.shift {
            let r = (self.shift - t.ln_term).exp();
            self.sum *= r;
            self.comp *= r;
            self.sum_sq *= r * r;
            self.score.iter_mut().for_each(|v| *v *= r);
            self.second.iter_mut().for_each(|v| *v *= r);
            self.shift = t.ln_term;
        }
        let w = (t.ln_term - self.shift).exp();
        // Kahan-compensated value sum
        let y = w - self.comp;
        let s = self.sum + y;
        self.comp = (s - self.sum) - y;
        self.sum = s;
        self.sum_sq += w * w;
        for (acc, d) in self.score.iter_mut().zip(&t.dln) {
            *acc += w * d;
        }
        for (acc, d) in self.second.iter_mut().zip(&t.d2) {
            *acc += w * d;
        }
    }

    /// `ln_scale` multiplies the plain sum (e.g. `G!/m` for a sampled mean).
    fn finish(self, order: Derivatives, ln_scale: f64, population: Option<f64>) -> Result<LikelihoodEval> {
        if !(self.sum > 0.0) {
            return Err(Error::Numerical("component probability is zero at this parameter".into()));
        }
        let k = self.k;
        let mut out = LikelihoodEval::zero(k);
        out.loglik = self.shift + self.sum.ln() + ln_scale;
        out.n_perms_used = self.count;
        if let Some(pop) = population {
            let m = self.count as f64;
            let mean = self.sum / m;
            let var = (self.sum_sq / m - mean * mean).max(0.0) * m / (m - 1.0).max(1.0);
            let fpc = if pop.is_finite() && pop > 1.0 { ((pop - m) / (pop - 1.0)).max(0.0) } else { 1.0 };
            out.mc_se = (var * fpc / m).sqrt() / mean;
            out.is_sampled = true;
        }
        if order >= Derivatives::Gradient {
            out.score = self.score.iter().map(|v| v / self.sum).collect();
        }
        if order == Derivatives::Hessian {
            out.hessian = DMatrix::from_fn(k, k, |a, b| {
                let v = self.second[a * k + b] / self.sum - out.score[a] * out.score[b];
                let t = self.second[b * k + a] / self.sum - out.score[b] * out.score[a];
                0.5 * (v + t)
            });
        }
        Ok(out)
    }
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Advances `v` to the next lexicographic permutation; false after the last.
fn next_permutation(v: &mut [usize]) -> bool {
    let n = v.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

fn check_order(comp: &ComponentData, perm: &[usize]) -> Result<()> {
    let mut expected = comp.adopters();
    let mut got = perm.to_vec();
    expected.sort_unstable();
    got.sort_unstable();
    if expected != got {
        return Err(invalid("order is not a permutation of the component's adopters"));
    }
    Ok(())
}

/// `ln` of one order's contribution to the outcome probability.
pub fn ln_perm_term<M: RateModel + ?Sized>(
    comp: &ComponentData,
    perm: &[usize],
    model: &M,
    theta: &[f64],
) -> Result<f64> {
    check_order(comp, perm)?;
    let mut ev = TermEvaluator::new(comp, model, theta, Derivatives::None)?;
    Ok(ev.evaluate(perm)?.ln_term)
}

/// One order's contribution to the outcome probability.
pub fn perm_term<M: RateModel + ?Sized>(
    comp: &ComponentData,
    perm: &[usize],
    model: &M,
    theta: &[f64],
) -> Result<f64> {
    ln_perm_term(comp, perm, model, theta).map(f64::exp)
}

/// Rate totals `c_0..c_G` along an order.
pub fn rate_totals<M: RateModel + ?Sized>(
    comp: &ComponentData,
    perm: &[usize],
    model: &M,
    theta: &[f64],
) -> Result<Vec<f64>> {
    check_order(comp, perm)?;
    let mut ev = TermEvaluator::new(comp, model, theta, Derivatives::None)?;
    ev.evaluate(perm)?;
    Ok(ev.c)
}

/// Exact log-likelihood of a component, summing all `G!` adopter orders.
pub fn loglik_exact<M: RateModel + ?Sized>(
    comp: &ComponentData,
    model: &M,
    theta: &[f64],
    cap: usize,
    order: Derivatives,
) -> Result<LikelihoodEval> {
    let mut perm = comp.adopters();
    if perm.len() > cap {
        return Err(invalid(format!(
            "{} adopters exceed the enumeration cap {cap}",
            perm.len()
        )));
    }
    let mut ev = TermEvaluator::new(comp, model, theta, order)?;
    let mut acc = TermAccumulator::new(ev.k);
    loop {
        acc.add(&ev.evaluate(&perm)?);
        if !next_permutation(&mut perm) {
            break;
        }
    }
    let mut out = acc.finish(order, 0.0, None)?;
    out.diagnostics = ev.diagnostics;
    Ok(out)
}

/// Log of `G! ·` (mean term over `m` uniformly drawn orders).
pub fn loglik_sampled<M: RateModel + ?Sized, R: Rng + ?Sized>(
    comp: &ComponentData,
    model: &M,
    theta: &[f64],
    m: usize,
    scheme: SamplingScheme,
    rng: &mut R,
    order: Derivatives,
) -> Result<LikelihoodEval> {
    if m == 0 {
        return Err(invalid("sample size must be at least 1"));
    }
    let adopters = comp.adopters();
    let g = adopters.len();
    let ln_orders = ln_factorial(g);
    let population = ln_orders.exp();
    if scheme == SamplingScheme::WithoutReplacement && (m as f64) >= population {
        return loglik_exact(comp, model, theta, usize::MAX, order);
    }
    let mut ev = TermEvaluator::new(comp, model, theta, order)?;
    let mut acc = TermAccumulator::new(ev.k);
    let mut perm = adopters;
    let mut seen = HashSet::new();
    let mut drawn = 0;
    while drawn < m {
        perm.shuffle(rng);
        if scheme == SamplingScheme::WithoutReplacement && !seen.insert(perm.clone()) {
            continue;
        }
        acc.add(&ev.evaluate(&perm)?);
        drawn += 1;
    }
    let pop = match scheme {
        SamplingScheme::WithReplacement => None,
        SamplingScheme::WithoutReplacement => Some(population),
    };
    let mut out = acc.finish(order, ln_orders - (m as f64).ln(), Some(pop.unwrap_or(f64::INFINITY)))?;
    out.diagnostics = ev.diagnostics;
    Ok(out)
}

/// Evaluates one component under the exact-below-cap policy; `index` selects
/// its sampling stream.
pub fn component_loglik<M: RateModel + ?Sized>(
    comp: &ComponentData,
    index: usize,
    model: &M,
    theta: &[f64],
    opts: &LikelihoodOptions,
    order: Derivatives,
) -> Result<LikelihoodEval> {
    if comp.n_adopters() <= opts.enumeration_cap {
        loglik_exact(comp, model, theta, opts.enumeration_cap, order)
    } else {
        let mut rng = substream(opts.seed, &[index as u64]);
        loglik_sampled(comp, model, theta, opts.sample_size, opts.scheme, &mut rng, order)
    }
}

/// Per-component evaluations in component order.
pub fn component_logliks<M: RateModel + ?Sized>(
    comps: &[ComponentData],
    model: &M,
    theta: &[f64],
    opts: &LikelihoodOptions,
    order: Derivatives,
) -> Result<Vec<LikelihoodEval>> {
    comps
        .par_iter()
        .enumerate()
        .map(|(idx, comp)| component_loglik(comp, idx, model, theta, opts, order))
        .collect()
}

/// Log-likelihood of a set of independent components.
pub fn total_loglik_components<M: RateModel + ?Sized>(
    comps: &[ComponentData],
    model: &M,
    theta: &[f64],
    opts: &LikelihoodOptions,
    order: Derivatives,
) -> Result<LikelihoodEval> {
    let k = comps
        .first()
        .map_or(theta.len(), |c| model.n_params(c.x.n_cols()));
    let parts = component_logliks(comps, model, theta, opts, order)?;
    Ok(LikelihoodEval::sum(k, &parts))
}

/// Log-likelihood of a full sample, factorized over network components.
pub fn total_loglik<M: RateModel + ?Sized>(
    sample: &Sample,
    model: &M,
    theta: &[f64],
    opts: &LikelihoodOptions,
    order: Derivatives,
) -> Result<LikelihoodEval> {
    total_loglik_components(&sample.component_data(), model, theta, opts, order)
}

/// All adopter orders with their conditional probabilities given the outcomes.
pub fn order_distribution<M: RateModel + ?Sized>(
    comp: &ComponentData,
    model: &M,
    theta: &[f64],
    cap: usize,
) -> Result<Vec<(Vec<usize>, f64)>> {
    let mut perm = comp.adopters();
    if perm.len() > cap {
        return Err(invalid(format!(
            "{} adopters exceed the enumeration cap {cap}",
            perm.len()
        )));
    }
    let mut ev = TermEvaluator::new(comp, model, theta, Derivatives::None)?;
    let mut terms = Vec::new();
    loop {
        terms.push((perm.clone(), ev.evaluate(&perm)?.ln_term));
        if !next_permutation(&mut perm) {
            break;
        }
    }
    normalize_ln(terms)
}

/// Orders drawn uniformly, weighted by their terms (self-normalized estimate).
pub fn order_distribution_sampled<M: RateModel + ?Sized, R: Rng + ?Sized>(
    comp: &ComponentData,
    model: &M,
    theta: &[f64],
    m: usize,
    rng: &mut R,
) -> Result<Vec<(Vec<usize>, f64)>> {
    let mut ev = TermEvaluator::new(comp, model, theta, Derivatives::None)?;
    let mut perm = comp.adopters();
    let mut terms = Vec::with_capacity(m);
    for _ in 0..m {
        perm.shuffle(rng);
        terms.push((perm.clone(), ev.evaluate(&perm)?.ln_term));
    }
    normalize_ln(terms)
}

fn normalize_ln(terms: Vec<(Vec<usize>, f64)>) -> Result<Vec<(Vec<usize>, f64)>> {
    let top = terms.iter().map(|t| t.1).fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::Numerical("all order terms vanish".into()));
    }
    let total: f64 = terms.iter().map(|t| (t.1 - top).exp()).sum();
    Ok(terms
        .into_iter()
        .map(|(p, l)| (p, (l - top).exp() / total))
        .collect())
}
