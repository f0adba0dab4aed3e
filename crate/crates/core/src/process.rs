//! Forward simulation of the adoption race and of potential adoption times.
//!
//! Each round draws a duration from `Exp(Σ current rates)` over the
//! individuals who have not yet adopted and picks the adopter with
//! probability proportional to its rate. The adopter's neighbors then have
//! their rates recomputed. By memorylessness this is the same law as
//! redrawing every individual's waiting time after each adoption.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;

use crate::data::{Covariates, Sample};
use crate::error::{invalid, Error, Result};
use crate::net::Network;
use crate::rates::{RateContext, RateModel};
use crate::streams::{fork_seed, substream};

/// Adoption times of one simulated run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Trajectory {
    /// `∞` for anyone who has not adopted by the horizon.
    pub times: Vec<f64>,
    /// Adopters sorted by time (ties by index).
    pub order: Vec<usize>,
    pub outcomes: Vec<bool>,
    pub horizon: f64,
}

impl Trajectory {
    fn from_times(times: Vec<f64>, horizon: f64) -> Self {
        let mut order: Vec<usize> = (0..times.len()).filter(|&i| times[i].is_finite()).collect();
        order.sort_by(|&a, &b| times[a].total_cmp(&times[b]).then(a.cmp(&b)));
        let outcomes = times.iter().map(|t| *t <= horizon).collect();
        Self {
            times,
            order,
            outcomes,
            horizon,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_adopters(&self) -> usize {
        self.order.len()
    }

    /// The observed cross-section this run produces.
    pub fn to_sample(&self, network: Network, x: Covariates) -> Result<Sample> {
        if !self.horizon.is_finite() {
            return Err(invalid("an untruncated run has no observation horizon"));
        }
        Sample::new(network, x, self.outcomes.clone(), self.horizon)
    }
}

fn validate<M: RateModel + ?Sized>(
    net: &Network,
    x: &Covariates,
    model: &M,
    theta: &[f64],
    horizon: f64,
) -> Result<()> {
    if x.n_rows() != net.len() {
        return Err(invalid(format!(
            "covariates have {} rows for {} individuals",
            x.n_rows(),
            net.len()
        )));
    }
    let k = model.n_params(x.n_cols());
    if theta.len() != k {
        return Err(invalid(format!("expected {k} parameters, got {}", theta.len())));
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(invalid("parameters must be finite"));
    }
    if !(horizon > 0.0) {
        return Err(invalid(format!("horizon must be positive, got {horizon}")));
    }
    Ok(())
}

struct Race<'a, M: ?Sized> {
    net: &'a Network,
    x: &'a Covariates,
    model: &'a M,
    theta: &'a [f64],
}

impl<M: RateModel + ?Sized> Race<'_, M> {
    fn rate(&self, i: usize, adopted_nbrs: &[usize]) -> Result<f64> {
        let ctx = RateContext {
            individual: i,
            adopted_neighbors: adopted_nbrs,
            degree: self.net.degree(i),
            covariates: self.x,
        };
        let r = self.model.rate(&ctx, self.theta)?;
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::Numerical(format!("rate {r} for individual {i}")));
        }
        Ok(r)
    }

    /// Runs one component; returns `(individual, time)` for its adopters.
    fn run<R: Rng + ?Sized>(
        &self,
        members: &[usize],
        forced: Option<&[Option<f64>]>,
        horizon: f64,
        rng: &mut R,
    ) -> Result<Vec<(usize, f64)>> {
        let n = members.len();
        let local = |g: usize| members.binary_search(&g).expect("neighbor outside component");
        let mut adopted = vec![false; n];
        let mut free = vec![true; n];
        let mut adopted_nbrs: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut rates = vec![0.0; n];
        let mut queue: Vec<(f64, usize)> = Vec::new();
        if let Some(f) = forced {
            for (l, &g) in members.iter().enumerate() {
                if let Some(t) = f[g] {
                    free[l] = false;
                    if t <= horizon {
                        queue.push((t, l));
                    }
                }
            }
            queue.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        }
        for l in 0..n {
            if free[l] {
                rates[l] = self.rate(members[l], &[])?;
            }
        }
        let mut events = Vec::new();
        let mut next_forced = 0;
        let mut t = 0.0;
        loop {
            let total: f64 = (0..n).filter(|&l| free[l] && !adopted[l]).map(|l| rates[l]).sum();
            let wait = if total > 0.0 {
                let e: f64 = Exp1.sample(rng);
                e / total
            } else {
                f64::INFINITY
            };
            let forced_at = queue.get(next_forced).map_or(f64::INFINITY, |q| q.0);
            let winner = if forced_at.is_finite() && t + wait >= forced_at {
                t = forced_at;
                next_forced += 1;
                queue[next_forced - 1].1
            } else if t + wait > horizon || !wait.is_finite() {
                break;
            } else {
                t += wait;
                let mut u = rng.random::<f64>() * total;
                let mut pick = None;
                for l in (0..n).filter(|&l| free[l] && !adopted[l]) {
                    pick = Some(l);
                    if u < rates[l] {
                        break;
                    }
                    u -= rates[l];
                }
                pick.expect("positive total rate has a candidate")
            };
            adopted[winner] = true;
            let g = members[winner];
            events.push((g, t));
            for &j in self.net.neighbors(g) {
                let lj = local(j);
                if !adopted[lj] {
                    adopted_nbrs[lj].push(g);
                    if free[lj] {
                        rates[lj] = self.rate(j, &adopted_nbrs[lj])?;
                    }
                }
            }
        }
        Ok(events)
    }
}

fn run_components<M: RateModel + ?Sized, R: Rng + ?Sized>(
    net: &Network,
    x: &Covariates,
    model: &M,
    theta: &[f64],
    horizon: f64,
    forced: Option<&[Option<f64>]>,
    rng: &mut R,
) -> Result<Trajectory> {
    validate(net, x, model, theta, horizon)?;
    if let Some(f) = forced {
        if f.len() != net.len() {
            return Err(invalid(format!(
                "intervention has {} entries for {} individuals",
                f.len(),
                net.len()
            )));
        }
        if f.iter().flatten().any(|t| t.is_nan() || *t < 0.0) {
            return Err(invalid("forced adoption times must be nonnegative or infinite"));
        }
    }
    let base = fork_seed(rng);
    let race = Race {
        net,
        x,
        model,
        theta,
    };
    let per_comp: Vec<Vec<(usize, f64)>> = net
        .components()
        .par_iter()
        .enumerate()
        .map(|(c, members)| {
            let mut r = substream(base, &[c as u64]);
            race.run(members, forced, horizon, &mut r)
        })
        .collect::<Result<_>>()?;
    let mut times = vec![f64::INFINITY; net.len()];
    for (i, t) in per_comp.into_iter().flatten() {
        times[i] = t;
    }
    Ok(Trajectory::from_times(times, horizon))
}

/// Simulates adoption up to `horizon` (which may be `∞`).
///
/// Components draw from independent substreams of one seed taken from `rng`,
/// so a component's run does not depend on the rest of the network.
pub fn simulate<M: RateModel + ?Sized, R: Rng + ?Sized>(
    net: &Network,
    x: &Covariates,
    model: &M,
    theta: &[f64],
    horizon: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    run_components(net, x, model, theta, horizon, None, rng)
}

/// Simulates with some individuals adopting at forced times.
///
/// `forced[i] = Some(t)` makes `i` adopt at exactly `t` (never, if `t = ∞`);
/// `None` leaves `i` free.
pub fn counterfactual_sample<M: RateModel + ?Sized, R: Rng + ?Sized>(
    net: &Network,
    x: &Covariates,
    model: &M,
    theta: &[f64],
    horizon: f64,
    forced: &[Option<f64>],
    rng: &mut R,
) -> Result<Trajectory> {
    run_components(net, x, model, theta, horizon, Some(forced), rng)
}

/// Draws an observed sample at `horizon`.
pub fn simulate_sample<M: RateModel + ?Sized, R: Rng + ?Sized>(
    net: &Network,
    x: &Covariates,
    model: &M,
    theta: &[f64],
    horizon: f64,
    rng: &mut R,
) -> Result<Sample> {
    simulate(net, x, model, theta, horizon, rng)?.to_sample(net.clone(), x.clone())
}

/// Adoption time of one individual when its peers adopt at `tau`.
///
/// `partials[k]` is the latent waiting time drawn at the rate in force after
/// `k` peers have adopted; `tau` lists the peer times in ascending order.
/// Round `k` ends at the first of the individual's own draw and the next peer
/// adoption. If every finite gap is exhausted, the last draw runs
/// uninterrupted.
pub fn potential_time(partials: &[f64], tau: &[f64]) -> Result<f64> {
    if partials.len() != tau.len() + 1 {
        return Err(invalid(format!(
            "need {} latent partial times for {} peers, got {}",
            tau.len() + 1,
            tau.len(),
            partials.len()
        )));
    }
    if partials.iter().any(|p| !(*p > 0.0)) {
        return Err(invalid("latent partial times must be positive"));
    }
    if tau.iter().any(|t| t.is_nan() || *t < 0.0) {
        return Err(invalid("peer times must be nonnegative or infinite"));
    }
    if tau.windows(2).any(|w| w[1] < w[0]) {
        return Err(invalid("peer times must be sorted ascending"));
    }
    let mut total = 0.0;
    let mut prev = 0.0;
    for (k, &tk) in tau.iter().enumerate() {
        let gap = tk - prev;
        if partials[k] < gap {
            return Ok(total + partials[k]);
        }
        total += gap;
        prev = tk;
    }
    Ok(total + partials[tau.len()])
}

/// Draws a potential time given the rate after each number of adopted peers.
///
/// `rates[k]` applies once `k` peers have adopted; `rates.len() = tau.len() + 1`.
pub fn sample_potential_time<R: Rng + ?Sized>(rates: &[f64], tau: &[f64], rng: &mut R) -> Result<f64> {
    if rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
        return Err(invalid("rates must be positive and finite"));
    }
    let partials: Vec<f64> = rates
        .iter()
        .map(|r| {
            let e: f64 = Exp1.sample(rng);
            e / r
        })
        .collect();
    potential_time(&partials, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::make_block_network;
    use crate::rates::{FnRate, LogLinearRate};
    use crate::streams::seeded;

    fn const_rate(r: f64) -> FnRate<impl Fn(&RateContext<'_>) -> f64 + Send + Sync> {
        FnRate(move |_: &RateContext<'_>| r)
    }

    #[test]
    fn single_individual_adoption_probability() {
        let net = Network::empty(1);
        let x = Covariates::zeros(1, 0);
        let model = const_rate(1.0);
        let mut rng = seeded(1);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| simulate(&net, &x, &model, &[], 1.0, &mut rng).unwrap().outcomes[0])
            .count();
        let p = 1.0 - (-1.0f64).exp();
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((hits as f64 / n as f64 - p).abs() < 3.0 * se);
    }

    #[test]
    fn trajectory_invariants() {
        let net = make_block_network(40, 5).unwrap();
        let x = Covariates::from_rows(&(0..40).map(|i| vec![(i as f64 * 0.37).sin()]).collect::<Vec<_>>()).unwrap();
        let mut rng = seeded(9);
        let tr = simulate(&net, &x, &LogLinearRate, &[0.5, 0.8], 1.0, &mut rng).unwrap();
        for w in tr.order.windows(2) {
            assert!(tr.times[w[0]] <= tr.times[w[1]]);
        }
        for i in 0..40 {
            assert_eq!(tr.outcomes[i], tr.times[i].is_finite());
            assert!(tr.times[i] > 0.0);
            assert!(tr.times[i] <= 1.0 || tr.times[i].is_infinite());
        }
    }

    #[test]
    fn seeded_determinism() {
        let net = make_block_network(20, 4).unwrap();
        let x = Covariates::zeros(20, 1);
        let a = simulate(&net, &x, &LogLinearRate, &[0.0, 1.0], 1.0, &mut seeded(4)).unwrap();
        let b = simulate(&net, &x, &LogLinearRate, &[0.0, 1.0], 1.0, &mut seeded(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn untruncated_run_adopts_everyone() {
        let net = make_block_network(12, 3).unwrap();
        let x = Covariates::zeros(12, 1);
        let tr = simulate(&net, &x, &LogLinearRate, &[0.0, 0.3], f64::INFINITY, &mut seeded(2)).unwrap();
        assert_eq!(tr.n_adopters(), 12);
        assert!(tr.to_sample(net, x).is_err());
    }

    #[test]
    fn forced_times_are_respected() {
        let net = make_block_network(3, 3).unwrap();
        let x = Covariates::zeros(3, 1);
        let forced = [None, Some(0.25), Some(f64::INFINITY)];
        let tr = counterfactual_sample(&net, &x, &LogLinearRate, &[0.0, 0.5], 1.0, &forced, &mut seeded(5)).unwrap();
        assert_eq!(tr.times[1], 0.25);
        assert!(tr.times[2].is_infinite());
    }

    #[test]
    fn dyad_with_peer_forced_at_zero() {
        let net = Network::from_edges(2, &[(0, 1)]).unwrap();
        let x = Covariates::zeros(2, 1);
        let theta = [0.0, 0.5];
        let forced = [None, Some(0.0)];
        let mut rng = seeded(17);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| {
                counterfactual_sample(&net, &x, &LogLinearRate, &theta, 1.0, &forced, &mut rng).unwrap().outcomes[0]
            })
            .count();
        let p = 1.0 - (-(0.5f64).exp()).exp();
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((hits as f64 / n as f64 - p).abs() < 3.0 * se);
    }

    #[test]
    fn potential_time_limits() {
        let partials = [0.7, 0.2, 0.4];
        let inf = f64::INFINITY;
        assert_eq!(potential_time(&partials, &[inf, inf]).unwrap(), 0.7);
        assert_eq!(potential_time(&partials, &[0.0, 0.0]).unwrap(), 0.4);
        // first gap 0.5 < 0.7, second draw 0.2 < gap 0.3
        assert!((potential_time(&partials, &[0.5, 0.8]).unwrap() - 0.7).abs() < 1e-15);
        // both gaps exhausted, final draw runs on
        assert!((potential_time(&partials, &[0.5, 0.6]).unwrap() - 1.0).abs() < 1e-15);
        assert!(potential_time(&partials, &[0.6, 0.5]).is_err());
        assert!(potential_time(&partials[..2], &[0.6, 0.5]).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let net = Network::empty(2);
        let x = Covariates::zeros(2, 1);
        assert!(simulate(&net, &x, &LogLinearRate, &[0.0], 1.0, &mut seeded(0)).is_err());
        assert!(simulate(&net, &x, &LogLinearRate, &[0.0, 0.0], 0.0, &mut seeded(0)).is_err());
        assert!(counterfactual_sample(&net, &x, &LogLinearRate, &[0.0, 0.0], 1.0, &[Some(-1.0), None], &mut seeded(0)).is_err());
    }
}
