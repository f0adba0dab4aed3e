use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use peerrace_core::baselines::{fit_ols, fit_sar_mle};
use peerrace_core::estimands::{
    average_prob_delta_all_peers, expected_time_to_fraction, general_delta_average, individual_rates,
    order_posterior, prob_delta_all_peers, recover_rates_dyad, EstimandRecord, McEstimate,
};
use peerrace_core::harness::{
    generate, identification_warnings, replicate_tables, run_experiment, write_rows, Design, ExperimentConfig,
    TableOptions,
};
use peerrace_core::io::{
    read_covariates, read_edge_list, read_outcomes, read_theta, write_covariates, write_edge_list, write_outcomes,
    write_theta, write_trajectory,
};
use peerrace_core::likelihood::SamplingScheme;
use peerrace_core::streams::seeded;
use peerrace_core::{fit, ComponentData, Covariates, FitOptions, LikelihoodOptions, LogLinearRate, Network, Sample, Theta};

#[derive(Parser)]
#[command(name = "peerrace", version, about = "Peer effects in irreversible adoption as a latent exponential race")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "PEERRACE_THREADS")]
    threads: Option<usize>,

    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate outcomes, from a design or from given network and covariates.
    Simulate(SimulateArgs),
    /// Fit the race model and/or the baselines to data files.
    Estimate(EstimateArgs),
    /// Evaluate a counterfactual estimand at a parameter value.
    Estimand {
        #[command(subcommand)]
        kind: EstimandCommand,
    },
    /// Run every cell of the three simulation tables and write CSVs.
    ReplicateTables(TablesArgs),
    /// Run one simulation cell described by a TOML config.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct DesignArgs {
    #[arg(long, value_enum, default_value = "block")]
    design: DesignArg,
    #[arg(long, default_value_t = 5)]
    group_size: usize,
    #[arg(long, default_value_t = 1000)]
    n_total: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 0.5])]
    beta: Vec<f64>,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    delta: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum DesignArg {
    Block,
    Homophilic,
}

impl From<DesignArg> for Design {
    fn from(d: DesignArg) -> Self {
        match d {
            DesignArg::Block => Design::Block,
            DesignArg::Homophilic => Design::Homophilic,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Directory receiving network.txt, covariates.csv, outcomes.csv and theta.json.
    #[arg(long)]
    out_dir: PathBuf,
    /// Edge list; with --covariates and --theta, simulates on given data.
    #[arg(long, requires_all = ["covariates", "theta"])]
    network: Option<PathBuf>,
    #[arg(long)]
    covariates: Option<PathBuf>,
    /// Parameters as JSON `{"beta": [..], "delta": ..}`.
    #[arg(long)]
    theta: Option<PathBuf>,
    #[command(flatten)]
    design: DesignArgs,
    #[arg(long, default_value_t = 1.0)]
    horizon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    network: PathBuf,
    #[arg(long)]
    covariates: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    horizon: f64,
}

impl DataArgs {
    fn load(&self) -> Result<(Network, Covariates)> {
        let net = read_edge_list(&self.network)?;
        let x = read_covariates(&self.covariates)?;
        if x.n_rows() != net.len() {
            bail!(
                "{} has {} rows but the network has {} individuals",
                self.covariates.display(),
                x.n_rows(),
                net.len()
            );
        }
        Ok((net, x))
    }

    fn load_sample(&self, outcomes: &Path) -> Result<Sample> {
        let (net, x) = self.load()?;
        let y = read_outcomes(outcomes)?;
        if y.len() != net.len() {
            bail!("{} has {} rows but the network has {} individuals", outcomes.display(), y.len(), net.len());
        }
        Ok(Sample::new(net, x, y, self.horizon)?)
    }
}

#[derive(Args)]
struct LikelihoodArgs {
    /// Largest adopter count per component whose orders are summed exactly.
    #[arg(long, default_value_t = 8)]
    enumeration_cap: usize,
    /// Orders sampled per component above the cap.
    #[arg(long, default_value_t = 2000)]
    sample_size: usize,
    #[arg(long, value_enum, default_value = "with-replacement")]
    sampling: SamplingArg,
    #[arg(long, default_value_t = 0x5eed)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplingArg {
    WithReplacement,
    WithoutReplacement,
}

impl LikelihoodArgs {
    fn options(&self) -> LikelihoodOptions {
        LikelihoodOptions {
            enumeration_cap: self.enumeration_cap,
            sample_size: self.sample_size,
            scheme: match self.sampling {
                SamplingArg::WithReplacement => SamplingScheme::WithReplacement,
                SamplingArg::WithoutReplacement => SamplingScheme::WithoutReplacement,
            },
            seed: self.seed,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum MethodArg {
    Exp,
    Ols,
    Sar,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    outcomes: PathBuf,
    /// Estimators to run, comma separated.
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [MethodArg::Exp])]
    method: Vec<MethodArg>,
    #[command(flatten)]
    likelihood: LikelihoodArgs,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    /// Starting value as a theta JSON file.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Also write the race-model estimate as a theta JSON file.
    #[arg(long)]
    theta_out: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Parameters as JSON `{"beta": [..], "delta": ..}`.
    #[arg(long)]
    theta: PathBuf,
}

impl ModelArgs {
    fn load(&self) -> Result<(Network, Covariates, Vec<f64>)> {
        let (net, x) = self.data.load()?;
        let theta = read_theta(&self.theta)?;
        theta.validate(x.n_cols())?;
        Ok((net, x, theta.to_params()))
    }
}

#[derive(Args)]
struct McArgs {
    #[arg(long, default_value_t = 10_000)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum EstimandCommand {
    /// Effect of all peers adopting at time zero versus never, in closed form.
    ///
    /// Give --lambda and --lambda-plus directly, or data and theta for one
    /// individual (--individual) or the sample average.
    ProbDelta {
        #[arg(long, requires = "lambda_plus", conflicts_with_all = ["network", "theta"])]
        lambda: Option<f64>,
        #[arg(long)]
        lambda_plus: Option<f64>,
        #[arg(long, requires_all = ["covariates", "theta"])]
        network: Option<PathBuf>,
        #[arg(long)]
        covariates: Option<PathBuf>,
        #[arg(long)]
        theta: Option<PathBuf>,
        #[arg(long)]
        individual: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        horizon: f64,
    },
    /// Simulated effect of intervention `tau-tilde` versus `tau` on the targets.
    ///
    /// Interventions are lists `j=t` forcing peer j to adopt at time t
    /// (`inf` for never); unlisted individuals are free.
    GeneralDelta {
        #[command(flatten)]
        model: ModelArgs,
        /// Target individuals; several are averaged.
        #[arg(long, value_delimiter = ',', required = true)]
        target: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        tau_tilde: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        tau: Vec<String>,
        #[command(flatten)]
        mc: McArgs,
    },
    /// Expected time until a share q of the population has adopted.
    TimeToFraction {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        q: f64,
        #[command(flatten)]
        mc: McArgs,
    },
    /// Distribution of the adoption order within one component given outcomes.
    OrderPosterior {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        outcomes: PathBuf,
        /// Component index, in order of smallest member.
        #[arg(long)]
        component: usize,
        #[command(flatten)]
        likelihood: LikelihoodArgs,
    },
    /// Baseline and updated rates of a symmetric dyad from two outcome probabilities.
    RecoverDyad {
        #[arg(long)]
        p00: f64,
        #[arg(long)]
        p10: f64,
        #[arg(long, default_value_t = 1.0)]
        horizon: f64,
    },
}

#[derive(Args)]
struct TablesArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 200)]
    replications: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    horizon: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [5, 10, 20])]
    block_sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [5, 10])]
    homophilic_sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_values_t = [-0.5, 0.0, 0.5])]
    deltas: Vec<f64>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    horizon: Option<f64>,
    /// Summary rows as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Full report as JSON (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let out = |name: &str| args.out_dir.join(name);
    let (sample, theta) = match (&args.network, &args.covariates, &args.theta) {
        (Some(net), Some(cov), Some(theta)) => {
            let data = DataArgs {
                network: net.clone(),
                covariates: cov.clone(),
                horizon: args.horizon,
            };
            let (net, x) = data.load()?;
            let theta = read_theta(theta)?;
            theta.validate(x.n_cols())?;
            let mut rng = seeded(args.seed);
            let tr = peerrace_core::simulate(&net, &x, &LogLinearRate, &theta.to_params(), args.horizon, &mut rng)?;
            write_trajectory(&out("trajectory.csv"), &tr)?;
            (Sample::new(net, x, tr.outcomes, args.horizon)?, theta)
        }
        _ => {
            let d = &args.design;
            let mut cfg = ExperimentConfig::new(d.design.into(), d.group_size, d.delta);
            cfg.n_total = d.n_total;
            cfg.beta = d.beta.clone();
            cfg.horizon = args.horizon;
            cfg.seed = args.seed;
            cfg.validate()?;
            let rep = generate(&cfg, 0)?;
            (rep.sample, Theta::new(d.beta.clone(), d.delta))
        }
    };
    write_edge_list(&out("network.txt"), &sample.network)?;
    write_covariates(&out("covariates.csv"), &sample.x)?;
    write_outcomes(&out("outcomes.csv"), &sample.y)?;
    write_theta(&out("theta.json"), &theta)?;
    log::info!("{} of {} individuals adopted", sample.n_adopters(), sample.len());
    Ok(())
}

fn estimate(args: EstimateArgs) -> Result<()> {
    let sample = args.data.load_sample(&args.outcomes)?;
    for w in identification_warnings(&sample) {
        eprintln!("warning: {w}");
    }
    for &method in &args.method {
        match method {
            MethodArg::Exp => {
                let init = match &args.init {
                    Some(p) => Some(read_theta(p)?.to_params()),
                    None => None,
                };
                let opts = FitOptions {
                    init,
                    tol: args.tol,
                    max_iter: args.max_iter,
                    likelihood: args.likelihood.options(),
                    ..FitOptions::default()
                };
                let res = fit(&sample, &LogLinearRate, &opts)?;
                if !res.converged {
                    eprintln!("warning: the race-model fit did not converge");
                }
                if let Some(path) = &args.theta_out {
                    write_theta(path, &res.theta_hat())?;
                }
                print_json(&res.record())?;
            }
            MethodArg::Ols => print_json(&fit_ols(&sample)?.record())?,
            MethodArg::Sar => print_json(&fit_sar_mle(&sample)?.record())?,
        }
    }
    Ok(())
}

/// Parses `j=t` entries into an intervention vector; `inf` means never.
fn parse_intervention(entries: &[String], n: usize) -> Result<Vec<Option<f64>>> {
    let mut tau = vec![None; n];
    for e in entries.iter().filter(|e| !e.is_empty()) {
        let (j, t) = e.split_once('=').with_context(|| format!("intervention entry `{e}` is not `j=t`"))?;
        let j: usize = j.trim().parse().with_context(|| format!("bad individual in `{e}`"))?;
        let t: f64 = t.trim().parse().with_context(|| format!("bad time in `{e}`"))?;
        if j >= n {
            bail!("intervention names individual {j} but there are {n}");
        }
        tau[j] = Some(t);
    }
    Ok(tau)
}

fn mc_record(kind: &str, est: McEstimate, seed: u64) -> EstimandRecord {
    EstimandRecord {
        kind: kind.to_string(),
        value: est.value,
        mc_se: est.mc_se,
        budget: est.budget,
        seed: Some(seed),
    }
}

fn exact_record(kind: &str, value: f64) -> EstimandRecord {
    EstimandRecord {
        kind: kind.to_string(),
        value,
        mc_se: 0.0,
        budget: 0,
        seed: None,
    }
}

fn estimand(kind: EstimandCommand) -> Result<()> {
    match kind {
        EstimandCommand::ProbDelta {
            lambda,
            lambda_plus,
            network,
            covariates,
            theta,
            individual,
            horizon,
        } => {
            let record = match (lambda, lambda_plus, network, covariates, theta) {
                (Some(l), Some(lp), ..) => exact_record("prob-delta", prob_delta_all_peers(l, lp, horizon)?),
                (_, _, Some(network), Some(covariates), Some(theta)) => {
                    let m = ModelArgs {
                        data: DataArgs { network, covariates, horizon },
                        theta,
                    };
                    let (net, x, theta) = m.load()?;
                    match individual {
                        Some(i) => {
                            let (l, lp) = individual_rates(&net, &x, &LogLinearRate, &theta, i)?;
                            exact_record("prob-delta-individual", prob_delta_all_peers(l, lp, horizon)?)
                        }
                        None => exact_record(
                            "prob-delta-average",
                            average_prob_delta_all_peers(&net, &x, &LogLinearRate, &theta, horizon)?,
                        ),
                    }
                }
                _ => bail!("give either --lambda and --lambda-plus or --network, --covariates and --theta"),
            };
            print_json(&record)
        }
        EstimandCommand::GeneralDelta {
            model,
            target,
            tau_tilde,
            tau,
            mc,
        } => {
            let (net, x, theta) = model.load()?;
            let tilde = parse_intervention(&tau_tilde, net.len())?;
            let base = parse_intervention(&tau, net.len())?;
            let est = general_delta_average(
                &net,
                &x,
                &LogLinearRate,
                &theta,
                model.data.horizon,
                &target,
                &tilde,
                &base,
                mc.budget,
                &mut seeded(mc.seed),
            )?;
            print_json(&mc_record("general-delta", est, mc.seed))
        }
        EstimandCommand::TimeToFraction { model, q, mc } => {
            let (net, x, theta) = model.load()?;
            let est = expected_time_to_fraction(&net, &x, &LogLinearRate, &theta, q, mc.budget, &mut seeded(mc.seed))?;
            print_json(&mc_record("time-to-fraction", est, mc.seed))
        }
        EstimandCommand::OrderPosterior {
            model,
            outcomes,
            component,
            likelihood,
        } => {
            let sample = model.data.load_sample(&outcomes)?;
            let theta = read_theta(&model.theta)?;
            theta.validate(sample.x.n_cols())?;
            let comps: Vec<ComponentData> = sample.component_data();
            let comp = comps
                .get(component)
                .with_context(|| format!("component {component} out of range ({} components)", comps.len()))?;
            let post = order_posterior(comp, &LogLinearRate, &theta.to_params(), &likelihood.options())?;
            // report individuals by their global ids
            let members = &sample.network.components()[component];
            #[derive(Serialize)]
            struct Out {
                kind: &'static str,
                component: usize,
                orders: Vec<(Vec<usize>, f64)>,
                first_mover: Vec<(usize, f64)>,
                sampled: bool,
            }
            print_json(&Out {
                kind: "order-posterior",
                component,
                orders: post
                    .orders
                    .into_iter()
                    .map(|(o, p)| (o.into_iter().map(|i| members[i]).collect(), p))
                    .collect(),
                first_mover: post.first_mover.into_iter().map(|(i, p)| (members[i], p)).collect(),
                sampled: post.sampled,
            })
        }
        EstimandCommand::RecoverDyad { p00, p10, horizon } => {
            let (lambda, lambda_plus) = recover_rates_dyad(p00, p10, horizon)?;
            print_json(&serde_json::json!({
                "kind": "recover-dyad",
                "lambda": lambda,
                "lambda_plus": lambda_plus,
            }))
        }
    }
}

fn replicate(args: TablesArgs) -> Result<()> {
    let opts = TableOptions {
        replications: args.replications,
        seed: args.seed,
        horizon: args.horizon,
        block_sizes: args.block_sizes,
        homophilic_sizes: args.homophilic_sizes,
        deltas: args.deltas,
    };
    let reports = replicate_tables(&args.out_dir, &opts)?;
    let failures: usize = reports.iter().map(|r| r.failure_messages.len()).sum();
    if failures > 0 {
        eprintln!("warning: {failures} estimator failures across all cells");
    }
    Ok(())
}

fn experiment(args: ExperimentArgs) -> Result<()> {
    let text = fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let mut cfg = ExperimentConfig::from_toml(&text).with_context(|| args.config.display().to_string())?;
    if let Some(r) = args.replications {
        cfg.replications = r;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(h) = args.horizon {
        cfg.horizon = h;
    }
    cfg.validate()?;
    let report = run_experiment(&cfg)?;
    log::info!("{} replications in {:.1}s", cfg.replications, report.runtime_secs);
    if let Some(path) = &args.csv {
        write_rows(path, &report.rows)?;
    }
    match &args.out {
        Some(path) => fs::write(path, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("writing {}", path.display()))?,
        None => print_json(&report)?,
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let res = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Estimate(a) => estimate(a),
        Command::Estimand { kind } => estimand(kind),
        Command::ReplicateTables(a) => replicate(a),
        Command::Experiment(a) => experiment(a),
    };
    if let Err(e) = res {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
