//! Linear comparison estimators treating the binary outcome as continuous.
//!
//! Both regress on an intercept, the covariates and the row-normalized peer
//! average `W̃y`, whose coefficient is reported as `delta`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{invalid, Error, Result};
use crate::estimator::{intervals, matrix_rows, FitRecord};
use crate::net::Network;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMethod {
    Ols,
    SarMle,
}

impl BaselineMethod {
    pub fn tag(self) -> &'static str {
        match self {
            BaselineMethod::Ols => "ols",
            BaselineMethod::SarMle => "sar-mle",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BaselineFit {
    pub method: BaselineMethod,
    /// `intercept, beta1..betap, delta`
    pub names: Vec<String>,
    pub params: Vec<f64>,
    pub vcov: DMatrix<f64>,
    pub se: Vec<f64>,
    pub ci: Vec<(f64, f64)>,
    pub flags: Vec<String>,
    /// SAR error variance; `None` for OLS.
    pub sigma2: Option<f64>,
    pub loglik: Option<f64>,
}

impl BaselineFit {
    pub fn param(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn record(&self) -> FitRecord {
        FitRecord {
            method: self.method.tag().into(),
            names: self.names.clone(),
            estimates: self.params.clone(),
            se: self.se.clone(),
            ci_lower: self.ci.iter().map(|c| c.0).collect(),
            ci_upper: self.ci.iter().map(|c| c.1).collect(),
            vcov: Some(matrix_rows(&self.vcov)),
            loglik: self.loglik,
            iterations: None,
            converged: !self.flags.iter().any(|f| f == "boundary-optimum"),
            gradient_norm: None,
            flags: self.flags.clone(),
            horizon: None,
        }
    }
}

fn names(p: usize) -> Vec<String> {
    let mut v = vec!["intercept".to_string()];
    v.extend((1..=p).map(|k| format!("beta{k}")));
    v.push("delta".into());
    v
}

/// `W̃y` with rows of isolated individuals set to zero.
pub fn peer_average(net: &Network, y: &[f64]) -> Vec<f64> {
    (0..net.len())
        .map(|i| {
            let nb = net.neighbors(i);
            if nb.is_empty() {
                0.0
            } else {
                nb.iter().map(|&j| y[j]).sum::<f64>() / nb.len() as f64
            }
        })
        .collect()
}

fn outcomes(sample: &Sample) -> Vec<f64> {
    sample.y.iter().map(|&v| v as u8 as f64).collect()
}

/// `[1, X]`
fn exogenous(sample: &Sample) -> DMatrix<f64> {
    let p = sample.x.n_cols();
    DMatrix::from_fn(sample.len(), p + 1, |i, j| if j == 0 { 1.0 } else { sample.x.get(i, j - 1) })
}

/// Inverse of a symmetric positive semidefinite Gram matrix; flags rank deficiency.
fn gram_inverse(g: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let k = g.nrows();
    let svd = g.clone().svd(true, true);
    let top = svd.singular_values.max();
    let eps = top * 1e-12 * k as f64;
    if top > 0.0 && svd.singular_values.iter().all(|&s| s > eps) {
        if let Some(inv) = g.clone().try_inverse() {
            return (inv, false);
        }
    }
    let inv = svd
        .pseudo_inverse(eps.max(f64::MIN_POSITIVE))
        .unwrap_or_else(|_| DMatrix::zeros(k, k));
    (inv, true)
}

fn finish(
    method: BaselineMethod,
    p: usize,
    params: Vec<f64>,
    vcov: DMatrix<f64>,
    flags: Vec<String>,
    sigma2: Option<f64>,
    loglik: Option<f64>,
) -> BaselineFit {
    let vcov = (&vcov + vcov.transpose()) * 0.5;
    let se: Vec<f64> = (0..params.len()).map(|i| vcov[(i, i)].max(0.0).sqrt()).collect();
    BaselineFit {
        method,
        names: names(p),
        ci: intervals(&params, &se),
        params,
        vcov,
        se,
        flags,
        sigma2,
        loglik,
    }
}

/// Least squares of `y` on `[1, X, W̃y]` with CR1 covariance clustered by component.
pub fn fit_ols(sample: &Sample) -> Result<BaselineFit> {
    let n = sample.len();
    let p = sample.x.n_cols();
    let k = p + 2;
    if n <= k {
        return Err(invalid(format!("{n} observations for {k} regressors")));
    }
    let y = outcomes(sample);
    let wy = peer_average(&sample.network, &y);
    let ex = exogenous(sample);
    let z = DMatrix::from_fn(n, k, |i, j| if j < p + 1 { ex[(i, j)] } else { wy[i] });
    let yv = DVector::from_vec(y);
    let (bread, deficient) = gram_inverse(&(z.transpose() * &z));
    let mut flags = Vec::new();
    if deficient {
        flags.push("collinear".to_string());
    }
    let coef = &bread * (z.transpose() * &yv);
    let resid = &yv - &z * &coef;
    let comps = sample.network.components();
    let mut meat = DMatrix::zeros(k, k);
    for members in comps {
        let mut s = DVector::zeros(k);
        for &i in members {
            s += z.row(i).transpose() * resid[i];
        }
        meat += &s * s.transpose();
    }
    let g = comps.len() as f64;
    let scale = if g > 1.0 {
        g / (g - 1.0) * (n as f64 - 1.0) / (n as f64 - k as f64)
    } else {
        flags.push("single-cluster".to_string());
        1.0
    };
    let vcov = &bread * meat * &bread * scale;
    Ok(finish(BaselineMethod::Ols, p, coef.iter().copied().collect(), vcov, flags, None, None))
}

/// Eigenvalues of `W̃` for one component (real: `W̃` is similar to a symmetric matrix).
fn component_eigenvalues(net: &Network, members: &[usize]) -> Vec<f64> {
    let m = members.len();
    if m == 1 {
        return vec![0.0];
    }
    let local = net.induced(members);
    let s = DMatrix::from_fn(m, m, |i, j| {
        if local.has_edge(i, j) {
            1.0 / ((local.degree(i) * local.degree(j)) as f64).sqrt()
        } else {
            0.0
        }
    });
    s.symmetric_eigenvalues().iter().copied().collect()
}

/// Eigenvalues of the row-normalized adjacency matrix, computed per component.
pub fn normalized_eigenvalues(net: &Network) -> Vec<f64> {
    net.components()
        .iter()
        .flat_map(|c| component_eigenvalues(net, c))
        .collect()
}

/// `ln |I − ρ W̃|` from the eigenvalues of `W̃`.
pub fn log_det(eigenvalues: &[f64], rho: f64) -> f64 {
    eigenvalues.iter().map(|w| (1.0 - rho * w).ln()).sum()
}

struct SarProfile {
    z: DMatrix<f64>,
    zty_inv: DMatrix<f64>,
    y: DVector<f64>,
    wy: DVector<f64>,
    eig: Vec<f64>,
}

impl SarProfile {
    fn beta(&self, rho: f64) -> DVector<f64> {
        &self.zty_inv * (self.z.transpose() * (&self.y - &self.wy * rho))
    }

    fn sigma2(&self, rho: f64) -> f64 {
        let r = &self.y - &self.wy * rho - &self.z * self.beta(rho);
        r.norm_squared() / self.y.len() as f64
    }

    /// Concentrated log-likelihood including constants.
    fn loglik(&self, rho: f64) -> f64 {
        let n = self.y.len() as f64;
        let s2 = self.sigma2(rho);
        -0.5 * n * ((2.0 * std::f64::consts::PI).ln() + s2.ln() + 1.0) + log_det(&self.eig, rho)
    }
}

/// Gaussian SAR model `y = ρ W̃y + [1, X]β + ε` by maximum likelihood.
///
/// `ρ` maximizes the concentrated likelihood by golden-section search on
/// `(−1, 1)`; standard errors come from the inverse information matrix of
/// `(β, σ², ρ)`.
pub fn fit_sar_mle(sample: &Sample) -> Result<BaselineFit> {
    let n = sample.len();
    let p = sample.x.n_cols();
    let kb = p + 1;
    if n <= kb + 1 {
        return Err(invalid(format!("{n} observations for {} parameters", kb + 2)));
    }
    let y = outcomes(sample);
    let wy = peer_average(&sample.network, &y);
    let z = exogenous(sample);
    let (zty_inv, deficient) = gram_inverse(&(z.transpose() * &z));
    let mut flags = Vec::new();
    if deficient {
        flags.push("collinear".to_string());
    }
    let prof = SarProfile {
        z,
        zty_inv,
        y: DVector::from_vec(y),
        wy: DVector::from_vec(wy),
        eig: normalized_eigenvalues(&sample.network),
    };

    let edge = 1e-7;
    let (mut a, mut b) = (-1.0 + edge, 1.0 - edge);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (prof.loglik(c), prof.loglik(d));
    while b - a > 1e-10 {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = prof.loglik(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = prof.loglik(d);
        }
    }
    let rho = 0.5 * (a + b);
    if 1.0 - rho.abs() < 1e-6 {
        flags.push("boundary-optimum".to_string());
    }
    let beta = prof.beta(rho);
    let s2 = prof.sigma2(rho);
    if !(s2 > 0.0) {
        return Err(Error::Numerical("SAR residual variance is zero".into()));
    }

    // G = W̃ (I − ρW̃)⁻¹, block diagonal over components.
    let zb = &prof.z * &beta;
    let mut gzb = DVector::zeros(n);
    let (mut tr_g, mut tr_gg, mut tr_gtg) = (0.0, 0.0, 0.0);
    for members in sample.network.components() {
        let m = members.len();
        let local = sample.network.induced(members);
        let w = DMatrix::from_fn(m, m, |i, j| {
            if local.has_edge(i, j) {
                1.0 / local.degree(i) as f64
            } else {
                0.0
            }
        });
        let a_inv = (DMatrix::identity(m, m) - &w * rho)
            .try_inverse()
            .ok_or_else(|| Error::Numerical("I − ρW̃ is singular".into()))?;
        let g = &w * a_inv;
        tr_g += g.trace();
        tr_gg += (&g * &g).trace();
        tr_gtg += g.norm_squared();
        let zb_local = DVector::from_iterator(m, members.iter().map(|&i| zb[i]));
        let prod = &g * zb_local;
        for (l, &i) in members.iter().enumerate() {
            gzb[i] = prod[l];
        }
    }
    let k = kb + 2;
    let mut info = DMatrix::zeros(k, k);
    let ztz = prof.z.transpose() * &prof.z;
    info.view_mut((0, 0), (kb, kb)).copy_from(&(ztz / s2));
    let zg = prof.z.transpose() * &gzb / s2;
    for j in 0..kb {
        info[(j, kb + 1)] = zg[j];
        info[(kb + 1, j)] = zg[j];
    }
    info[(kb, kb)] = n as f64 / (2.0 * s2 * s2);
    info[(kb, kb + 1)] = tr_g / s2;
    info[(kb + 1, kb)] = tr_g / s2;
    info[(kb + 1, kb + 1)] = tr_gg + tr_gtg + gzb.norm_squared() / s2;
    let (inv, singular) = gram_inverse(&info);
    if singular {
        flags.push("singular-information".to_string());
    }
    // drop σ² from the reported parameters
    let keep: Vec<usize> = (0..kb).chain([kb + 1]).collect();
    let vcov = DMatrix::from_fn(kb + 1, kb + 1, |i, j| inv[(keep[i], keep[j])]);
    let mut params: Vec<f64> = beta.iter().copied().collect();
    params.push(rho);
    let ll = prof.loglik(rho);
    Ok(finish(BaselineMethod::SarMle, p, params, vcov, flags, Some(s2), Some(ll)))
}
