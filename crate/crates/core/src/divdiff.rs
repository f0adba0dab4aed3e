//! Divided differences of the exponential, evaluated without cancellation.
//!
//! The permutation term of the likelihood contains
//!
//! ```text
//! K(c_0, ..., c_n) = Σ_g exp(-c_g S) / Π_{h≠g} (c_h - c_g)
//! ```
//!
//! which is the divided difference of `u ↦ exp(S u)` at the nodes `u_g = -c_g`.
//! Written out, the sum cancels catastrophically when nodes are close and is
//! 0/0 when two coincide. Here the nodes are shifted to `[0, 1]` and the
//! divided difference is expanded as a power series whose terms are all
//! nonnegative, so the value and its node derivatives (which are divided
//! differences with repeated nodes) keep full relative precision whether or
//! not nodes coincide. Very wide node sets fall back to the Newton recursion
//! over sorted sub-ranges, each narrow enough for the series.

/// Widest scaled node spread handled by a single series.
const SERIES_MAX_SPREAD: f64 = 60.0;

/// How many derivatives to compute alongside a value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Derivatives {
    None,
    Gradient,
    Hessian,
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Series weights `L^k / k!` until the tail is negligible next to 1.
fn series_weights(spread: f64, out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    if spread == 0.0 {
        return;
    }
    let mut w = 1.0;
    let mut k = 0usize;
    loop {
        k += 1;
        w *= spread / k as f64;
        out.push(w);
        if k as f64 > 2.0 * spread && w < 1e-18 {
            break;
        }
    }
}

/// Folds one more node `z ∈ [0, 1]` into normalized complete symmetric sums.
///
/// `prev` holds `H_k = h_k(z_0..z_{m-1}) (m-1)! k! / (m-1+k)!`; on return `out`
/// holds the same quantity with `z` appended as node `m`.
fn append_node(prev: &[f64], m: usize, z: f64, out: &mut [f64]) {
    out[0] = 1.0;
    let m = m as f64;
    for k in 1..prev.len() {
        let kf = k as f64;
        out[k] = (m * prev[k] + kf * z * out[k - 1]) / (m + kf);
    }
}

/// Appends node `z` to unnormalized complete homogeneous sums in place.
#[inline]
fn append_raw(h: &mut [f64], z: f64) {
    for k in 1..h.len() {
        h[k] += z * h[k - 1];
    }
}

/// `w_k = L^k n! / (n + k)!`, the series weight of `h_k` for `n + 1` nodes.
fn level_weights(spread: f64, n: usize, len: usize, out: &mut Vec<f64>) {
    out.clear();
    let mut w = 1.0;
    out.push(w);
    for k in 1..len {
        w *= spread / (n + k) as f64;
        out.push(w);
    }
}

/// `Σ_k w_k h_k` after appending each of four nodes to `prev`, run as four
/// independent chains.
#[inline]
fn pair_sums(prev: &[f64], w: &[f64], z: [f64; 4]) -> [f64; 4] {
    let mut cur = [1.0; 4];
    let mut acc = [w[0]; 4];
    for k in 1..prev.len() {
        let (p, wk) = (prev[k], w[k]);
        for b in 0..4 {
            cur[b] = p + z[b] * cur[b];
            acc[b] += wk * cur[b];
        }
    }
    acc
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `ln` of the divided difference of `t ↦ exp(t)` at `nodes` (any order,
/// repeats allowed). The result is always finite for finite nodes unless it
/// underflows.
pub fn ln_unit_divided_difference(nodes: &[f64]) -> f64 {
    checked_ln_unit_dd(nodes).0
}

/// As [`ln_unit_divided_difference`], also reporting whether rounding in the
/// wide-spread recursion produced a nonpositive value that had to be clamped.
fn checked_ln_unit_dd(nodes: &[f64]) -> (f64, bool) {
    assert!(!nodes.is_empty(), "divided difference needs at least one node");
    let lo = nodes.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = nodes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= SERIES_MAX_SPREAD {
        (series_ln_dd(nodes, lo, hi), false)
    } else {
        recursive_ln_dd(nodes)
    }
}

fn series_ln_dd(nodes: &[f64], lo: f64, hi: f64) -> f64 {
    let n = nodes.len() - 1;
    let spread = hi - lo;
    let mut weights = Vec::new();
    series_weights(spread, &mut weights);
    let z = |v: f64| if spread > 0.0 { (v - lo) / spread } else { 0.0 };
    let mut cur: Vec<f64> = {
        let z0 = z(nodes[0]);
        let mut p = 1.0;
        weights
            .iter()
            .map(|_| {
                let v = p;
                p *= z0;
                v
            })
            .collect()
    };
    let mut next = vec![0.0; weights.len()];
    for (m, &v) in nodes.iter().enumerate().skip(1) {
        append_node(&cur, m, z(v), &mut next);
        std::mem::swap(&mut cur, &mut next);
    }
    lo - ln_factorial(n) + dot(&weights, &cur).ln()
}

/// Newton recursion over sorted contiguous ranges; narrow ranges use the series.
fn recursive_ln_dd(nodes: &[f64]) -> (f64, bool) {
    let mut y = nodes.to_vec();
    y.sort_by(|a, b| a.total_cmp(b));
    let top = y[y.len() - 1];
    y.iter_mut().for_each(|v| *v -= top);
    let n = y.len();
    // table[i] holds the divided difference over y[i..i+len]
    let mut table: Vec<f64> = y.iter().map(|v| v.exp()).collect();
    for len in 1..n {
        for i in 0..n - len {
            let j = i + len;
            table[i] = if y[j] - y[i] <= SERIES_MAX_SPREAD {
                series_ln_dd(&y[i..=j], y[i], y[j]).exp()
            } else {
                (table[i + 1] - table[i]) / (y[j] - y[i])
            };
        }
    }
    let clamped = table[0] <= 0.0;
    (top + table[0].max(f64::MIN_POSITIVE).ln(), clamped)
}

/// `ln` of the divided difference of `t ↦ exp(scale t)` at `nodes`.
pub fn ln_exp_divided_difference(nodes: &[f64], scale: f64) -> f64 {
    checked_ln_exp_dd(nodes, scale).0
}

fn checked_ln_exp_dd(nodes: &[f64], scale: f64) -> (f64, bool) {
    assert!(scale > 0.0, "scale must be positive");
    let scaled: Vec<f64> = nodes.iter().map(|v| v * scale).collect();
    let (v, clamped) = checked_ln_unit_dd(&scaled);
    ((nodes.len() - 1) as f64 * scale.ln() + v, clamped)
}

/// Divided difference of `t ↦ exp(scale t)` at `nodes`.
pub fn exp_divided_difference(nodes: &[f64], scale: f64) -> f64 {
    ln_exp_divided_difference(nodes, scale).exp()
}

/// `K(c) = Σ_g exp(-c_g S) / Π_{h≠g} (c_h - c_g)` together with its
/// derivatives in `c`, reusing buffers across calls.
///
/// After [`RaceKernel::evaluate`]:
/// * `ln_value = ln K`,
/// * `grad[j] = ∂ ln K / ∂c_j`,
/// * `hess[j * m + k] = (∂²K / ∂c_j ∂c_k) / K` with `m = c.len()`.
#[derive(Debug, Clone, Default)]
pub struct RaceKernel {
    pub ln_value: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
    /// The nodes were too spread for a single series.
    pub wide: bool,
    /// The wide-spread recursion rounded to a nonpositive value that was clamped.
    pub clamped: bool,
    weights: Vec<f64>,
    z: Vec<f64>,
    base: Vec<f64>,
    single: Vec<Vec<f64>>,
    level: Vec<f64>,
}

impl RaceKernel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn evaluate(&mut self, c: &[f64], horizon: f64, order: Derivatives) {
        assert!(!c.is_empty() && horizon > 0.0);
        let m = c.len();
        let n = m - 1;
        let c_min = c.iter().copied().fold(f64::INFINITY, f64::min);
        let c_max = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let spread = horizon * (c_max - c_min);
        self.grad.clear();
        self.grad.resize(m, 0.0);
        self.hess.clear();
        self.hess.resize(m * m, 0.0);
        self.wide = spread > SERIES_MAX_SPREAD;
        self.clamped = false;
        if self.wide {
            self.evaluate_wide(c, horizon, order);
            return;
        }

        series_weights(spread, &mut self.weights);
        let len = self.weights.len();
        self.z.clear();
        self.z.extend(c.iter().map(|&v| {
            if spread > 0.0 {
                (c_max - v) / (c_max - c_min)
            } else {
                0.0
            }
        }));

        // Unnormalized complete homogeneous sums h_k of the scaled nodes; the
        // normalization moves into per-level weights so that appending a node
        // is a multiply-add recurrence.
        self.base.clear();
        let z0 = self.z[0];
        let mut p = 1.0;
        for _ in 0..len {
            self.base.push(p);
            p *= z0;
        }
        for k in 1..m {
            append_raw(&mut self.base, self.z[k]);
        }
        level_weights(spread, n, len, &mut self.level);
        let sum = dot(&self.level, &self.base);
        // nodes u = -c, shifted so the smallest scaled node sits at -spread
        self.ln_value = -horizon * c_min + n as f64 * horizon.ln() - spread - ln_factorial(n) + sum.ln();
        if order == Derivatives::None {
            return;
        }

        level_weights(spread, m, len, &mut self.level);
        self.single.resize_with(m, Vec::new);
        for j in 0..m {
            let buf = &mut self.single[j];
            buf.clear();
            buf.extend_from_slice(&self.base);
            append_raw(buf, self.z[j]);
            let ratio = dot(&self.level, buf) / (m as f64 * sum);
            self.grad[j] = -horizon * ratio;
        }
        if order < Derivatives::Hessian {
            return;
        }

        level_weights(spread, m + 1, len, &mut self.level);
        let scale = horizon * horizon / (m as f64 * (m + 1) as f64 * sum);
        let w = &self.level;
        for j in 0..m {
            let prev = &self.single[j];
            let mut k = j;
            while k < m {
                let block = (m - k).min(4);
                let mut zs = [0.0; 4];
                zs[..block].copy_from_slice(&self.z[k..k + block]);
                let sums = pair_sums(prev, w, zs);
                for (b, &sum_b) in sums.iter().enumerate().take(block) {
                    let kk = k + b;
                    let r = sum_b * scale;
                    let v = if j == kk { 2.0 * r } else { r };
                    self.hess[j * m + kk] = v;
                    self.hess[kk * m + j] = v;
                }
                k += block;
            }
        }
    }

    fn evaluate_wide(&mut self, c: &[f64], horizon: f64, order: Derivatives) {
        let m = c.len();
        let u: Vec<f64> = c.iter().map(|v| -v).collect();
        let (base, clamped) = checked_ln_exp_dd(&u, horizon);
        self.ln_value = base;
        self.clamped = clamped;
        if order == Derivatives::None {
            return;
        }
        let mut aug = u.clone();
        for j in 0..m {
            aug.truncate(m);
            aug.push(u[j]);
            self.grad[j] = -(ln_exp_divided_difference(&aug, horizon) - base).exp();
        }
        if order < Derivatives::Hessian {
            return;
        }
        for j in 0..m {
            for k in j..m {
                aug.truncate(m);
                aug.push(u[j]);
                aug.push(u[k]);
                let r = (ln_exp_divided_difference(&aug, horizon) - base).exp();
                let v = if j == k { 2.0 * r } else { r };
                self.hess[j * m + k] = v;
                self.hess[k * m + j] = v;
            }
        }
    }
}

/// Stable `(1 - exp(-a S)) / a`, equal to `S` at `a = 0`.
pub fn g_function(a: f64, horizon: f64) -> f64 {
    let z = a * horizon;
    if z.abs() < 1e-8 {
        horizon * (1.0 - z / 2.0 + z * z / 6.0)
    } else {
        -(-z).exp_m1() / a
    }
}
