//! `mdnf` command-line front end.
//!
//! Every subcommand accepts the common flags; values from `--config FILE`
//! fill in whatever was not given on the command line, and built-in defaults
//! fill in the rest.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use mdnf::eval::{
    diagnose, elbo_variance_study, exact_elbo, external_elbo, kl_of_state, kl_to_exact, mdnf_q_table,
    objective_gap_trace, GS_EXTERNAL_SAMPLES,
};
use mdnf::experiments::{
    run_algo_comparison, run_base_sweep, run_gmm_comparison, run_permutation_recovery, run_temp_grid,
    summarize_algo, BnTask, GmmSettings, PermutationFlows,
};
use mdnf::infer::{fit, Algorithm, Allocation, AnnealSchedule, FitConfig};
use mdnf::models::gmm::{data_from_rows, simulated_three_clusters};
use mdnf::models::{BayesNet, BnPosterior, Evidence};
use mdnf::{FlowMixture64, SeededRng};

#[derive(Parser, Debug)]
#[command(name = "mdnf", version, about = "Mixtures of discrete normalizing flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit one approximation to a network posterior and write its trace.
    FitBn(FitBnArgs),
    /// Final KL over a grid of temperatures.
    SweepTemp(SweepTempArgs),
    /// Compare algorithms and mixture sizes over seeds.
    AlgoCompare(AlgoCompareArgs),
    /// VIF with Dirichlet bases over a list of concentrations.
    BaseSweep(BaseSweepArgs),
    /// Permutation recovery with partial, loc-scale or shift flows.
    PartialFlows(PartialFlowsArgs),
    /// Variational EM for a Gaussian mixture with stochastic E-steps.
    FitGmm(FitGmmArgs),
    /// Spread of repeated ELBO estimates of a trained mixture.
    Variance(VarianceArgs),
    /// Exact KL and ELBO of a saved mixture.
    Eval(EvalArgs),
}

#[derive(Args, Debug, Default, Clone)]
struct Common {
    /// Network file.
    #[arg(long)]
    net: Option<PathBuf>,
    /// Observed node as NODE=INDEX; repeatable.
    #[arg(long)]
    evidence: Vec<String>,
    /// vif, bvif, bvi, gs or st-gs.
    #[arg(long, value_parser = parse_algorithm)]
    algo: Option<Algorithm>,
    /// Mixture components B.
    #[arg(long)]
    flows: Option<usize>,
    /// Monte Carlo samples S per step.
    #[arg(long)]
    samples: Option<usize>,
    /// Initial temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Annealing rate: tau_t = tau * exp(-gamma t).
    #[arg(long)]
    gamma: Option<f64>,
    /// Prior temperature for gs.
    #[arg(long)]
    tau_p: Option<f64>,
    /// Iterations (per stage for bvif/bvi).
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// TOML file with defaults for any of these flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fill the wallclock_ms column (makes output time dependent).
    #[arg(long)]
    timing: bool,
    /// Worker threads for grid experiments; all cores when absent.
    #[arg(long)]
    workers: Option<usize>,
    /// Use one sample per component weighted by its mixing weight.
    #[arg(long)]
    stratified: bool,
}

#[derive(Args, Debug)]
struct FitBnArgs {
    #[command(flatten)]
    common: Common,
    /// Write the final mixture in text form.
    #[arg(long)]
    save_mixture: Option<PathBuf>,
    /// Iterations between external evaluations.
    #[arg(long)]
    eval_every: Option<usize>,
}

#[derive(Args, Debug)]
struct SweepTempArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated temperature grid.
    #[arg(long, value_delimiter = ',')]
    taus: Vec<f64>,
    /// Comma-separated prior temperature grid (gs only).
    #[arg(long, value_delimiter = ',')]
    tau_ps: Vec<f64>,
    /// Number of seeds, starting at --seed.
    #[arg(long)]
    runs: Option<usize>,
}

#[derive(Args, Debug)]
struct AlgoCompareArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated algorithms.
    #[arg(long, value_delimiter = ',', value_parser = parse_algorithm)]
    algos: Vec<Algorithm>,
    /// Comma-separated mixture sizes.
    #[arg(long, value_delimiter = ',')]
    bs: Vec<usize>,
    #[arg(long)]
    runs: Option<usize>,
}

#[derive(Args, Debug)]
struct BaseSweepArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated Dirichlet concentrations.
    #[arg(long, value_delimiter = ',')]
    alphas: Vec<f64>,
    #[arg(long)]
    runs: Option<usize>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum FlowFamily {
    Partial,
    LocScale,
    Shift,
}

#[derive(Args, Debug)]
struct PartialFlowsArgs {
    #[command(flatten)]
    common: Common,
    /// Categories: 5 or 7.
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, value_enum, default_value_t = FlowFamily::Partial)]
    family: FlowFamily,
    /// Layers for loc-scale and shift stacks.
    #[arg(long, default_value_t = 10)]
    layers: usize,
    #[arg(long, default_value_t = 40)]
    runs: usize,
}

#[derive(Args, Debug)]
struct FitGmmArgs {
    #[command(flatten)]
    common: Common,
    /// Numeric CSV, one point per row; the simulated three-cluster set when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    em_steps: Option<usize>,
    /// Comma-separated E-step algorithms.
    #[arg(long, value_delimiter = ',', value_parser = parse_algorithm)]
    algos: Vec<Algorithm>,
    /// Comma-separated mixture sizes.
    #[arg(long, value_delimiter = ',')]
    bs: Vec<usize>,
    #[arg(long)]
    runs: Option<usize>,
}

#[derive(Args, Debug)]
struct VarianceArgs {
    #[command(flatten)]
    common: Common,
    /// Saved mixture; one is fitted from the flags when absent.
    #[arg(long)]
    mixture: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    /// Comma-separated sample counts per estimate.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 10, 100])]
    eval_samples: Vec<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    mixture: PathBuf,
}

fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    s.parse::<Algorithm>().map_err(|e| e.to_string())
}

/// Keys accepted in a `--config` file.
#[derive(Deserialize, Debug, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    net: Option<PathBuf>,
    evidence: Option<Vec<String>>,
    algo: Option<String>,
    flows: Option<usize>,
    samples: Option<usize>,
    tau: Option<f64>,
    gamma: Option<f64>,
    tau_p: Option<f64>,
    iters: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    workers: Option<usize>,
    stratified: Option<bool>,
    taus: Option<Vec<f64>>,
    tau_ps: Option<Vec<f64>>,
    algos: Option<Vec<String>>,
    bs: Option<Vec<usize>>,
    alphas: Option<Vec<f64>>,
    runs: Option<usize>,
}

/// A failure attributable to the invocation rather than to the run.
#[derive(Debug)]
struct UsageError(anyhow::Error);

fn usage<E: Into<anyhow::Error>>(e: E) -> UsageError {
    UsageError(e.into())
}

/// Flags merged over the config file.
struct Settings {
    common: Common,
    file: FileConfig,
}

impl Settings {
    fn load(common: &Common) -> Result<Self, UsageError> {
        let file = match &common.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("cannot read config {}", path.display()))
                    .map_err(usage)?;
                toml::from_str(&text)
                    .with_context(|| format!("bad config {}", path.display()))
                    .map_err(usage)?
            }
            None => FileConfig::default(),
        };
        let mut c = common.clone();
        c.net = c.net.or_else(|| file.net.clone());
        if c.evidence.is_empty() {
            c.evidence = file.evidence.clone().unwrap_or_default();
        }
        if c.algo.is_none() {
            c.algo = file.algo.as_deref().map(parse_algorithm).transpose().map_err(|e| usage(anyhow!(e)))?;
        }
        c.flows = c.flows.or(file.flows);
        c.samples = c.samples.or(file.samples);
        c.tau = c.tau.or(file.tau);
        c.gamma = c.gamma.or(file.gamma);
        c.tau_p = c.tau_p.or(file.tau_p);
        c.iters = c.iters.or(file.iters);
        c.lr = c.lr.or(file.lr);
        c.seed = c.seed.or(file.seed);
        c.out = c.out.or_else(|| file.out.clone());
        c.workers = c.workers.or(file.workers);
        c.stratified = c.stratified || file.stratified.unwrap_or(false);
        Ok(Self { common: c, file })
    }

    fn seed(&self) -> u64 {
        self.common.seed.unwrap_or(0)
    }

    fn fit_config(&self, default_algo: Algorithm) -> Result<FitConfig, UsageError> {
        let c = &self.common;
        let d = FitConfig::default();
        let schedule = AnnealSchedule::new(c.tau.unwrap_or(d.schedule.tau0), c.gamma.unwrap_or(d.schedule.gamma))
            .map_err(usage)?;
        let cfg = FitConfig {
            algorithm: c.algo.unwrap_or(default_algo),
            components: c.flows.unwrap_or(d.components),
            samples: c.samples.unwrap_or(d.samples),
            iterations: c.iters.unwrap_or(d.iterations),
            learning_rate: c.lr.unwrap_or(d.learning_rate),
            seed: self.seed(),
            schedule,
            tau_p: c.tau_p.unwrap_or(d.tau_p),
            allocation: if c.stratified { Allocation::Stratified } else { d.allocation },
            ..d
        };
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }

    fn task(&self) -> Result<BnTask, UsageError> {
        let path = self.common.net.as_ref().ok_or_else(|| usage(anyhow!("--net is required")))?;
        let net = BayesNet::from_file(path)
            .with_context(|| format!("cannot load network {}", path.display()))
            .map_err(usage)?;
        let evidence = Evidence::parse(&net, &self.common.evidence).map_err(usage)?;
        BnTask::new(net, evidence).map_err(usage)
    }

    fn seeds(&self, runs: Option<usize>) -> Vec<u64> {
        let n = runs.or(self.file.runs).unwrap_or(10) as u64;
        (0..n).map(|i| self.seed() + i).collect()
    }

    fn output(&self) -> anyhow::Result<Box<dyn Write>> {
        Ok(match &self.common.out {
            Some(path) => Box::new(io::BufWriter::new(
                File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
            )),
            None => Box::new(io::BufWriter::new(io::stdout())),
        })
    }
}

fn or_file<T: Clone>(flag: Vec<T>, file: &Option<Vec<T>>, default: &[T]) -> Vec<T> {
    if !flag.is_empty() {
        flag
    } else if let Some(v) = file {
        v.clone()
    } else {
        default.to_vec()
    }
}

fn write_rows<R: Serialize>(out: Box<dyn Write>, rows: &[R]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct TraceRow {
    iteration: usize,
    internal_objective: f64,
    tau_t: f64,
    external_elbo: Option<f64>,
    kl_exact: Option<f64>,
    wallclock_ms: Option<f64>,
}

/// Ready-to-run form of a subcommand; errors from here on are runtime failures.
type Job = Box<dyn FnOnce() -> anyhow::Result<()>>;

fn fit_bn(args: FitBnArgs) -> Result<Job, UsageError> {
    let s = Settings::load(&args.common)?;
    let task = s.task()?;
    let mut cfg = s.fit_config(Algorithm::Vif)?;
    cfg.snapshot_every = args.eval_every.unwrap_or(100);
    cfg.validate().map_err(usage)?;
    Ok(Box::new(move || {
        let started = Instant::now();
        let mut report = fit::<f64, _>(&task.model, &cfg)?;
        let elapsed = started.elapsed().as_secs_f64() * 1e3;
        let mut rng = SeededRng::new(cfg.seed ^ 0x5eed_e7a1);
        let gaps = objective_gap_trace(&report, |state| {
            let ext = external_elbo(state, &task.model, Some(&task.posterior), GS_EXTERNAL_SAMPLES, &mut rng)?;
            Ok((ext, Some(kl_of_state(state, &task.posterior)?.value)))
        })?;
        diagnose(&mut report, &task.model, Some(&task.posterior), GS_EXTERNAL_SAMPLES, &mut rng)?;
        let rows: Vec<TraceRow> = report
            .records
            .iter()
            .map(|r| {
                let gap = gaps.iter().find(|g| g.iteration == r.iteration);
                TraceRow {
                    iteration: r.iteration,
                    internal_objective: r.objective,
                    tau_t: r.tau,
                    external_elbo: gap.map(|g| g.external),
                    kl_exact: gap.and_then(|g| g.kl),
                    wallclock_ms: s.common.timing.then_some(r.wallclock_ms),
                }
            })
            .collect();
        write_rows(s.output()?, &rows)?;
        if let Some(path) = &args.save_mixture {
            match report.final_state.as_mixture() {
                Some(m) => m.save(path)?,
                None => bail!("{} does not produce a mixture to save", cfg.algorithm),
            }
        }
        let d = &report.diagnostics;
        eprintln!(
            "{}: final KL {:.6}, ELBO {:.6}, log evidence {:.6}{}",
            cfg.algorithm,
            d.kl_exact.unwrap_or(f64::NAN),
            d.external_elbo.unwrap_or(f64::NAN),
            task.posterior.log_evidence,
            if s.common.timing { format!(", {elapsed:.0} ms") } else { String::new() },
        );
        Ok(())
    }))
}

#[derive(Serialize)]
struct GridRow {
    method: String,
    tau: f64,
    tau_p: Option<f64>,
    seed: u64,
    kl: f64,
    elbo: f64,
    final_objective: f64,
    error: Option<String>,
}

fn sweep_temp(args: SweepTempArgs) -> Result<Job, UsageError> {
    let s = Settings::load(&args.common)?;
    let task = s.task()?;
    let base = s.fit_config(Algorithm::Vif)?;
    let taus = or_file(args.taus, &s.file.taus, &[1.0, 10.0, 100.0]);
    let tau_ps = or_file(args.tau_ps, &s.file.tau_ps, &[0.1, 1.0, 10.0]);
    let seeds = s.seeds(args.runs);
    Ok(Box::new(move || {
        let cells = run_temp_grid(&task, base.algorithm, &taus, &tau_ps, &seeds, &base, s.common.workers)?;
        let rows: Vec<GridRow> = cells
            .into_iter()
            .map(|c| GridRow {
                method: c.method.to_string(),
                tau: c.tau,
                tau_p: c.tau_p,
                seed: c.seed,
                kl: c.score.kl,
                elbo: c.score.elbo,
                final_objective: c.score.final_objective,
                error: c.score.error,
            })
            .collect();
        write_rows(s.output()?, &rows)
    }))
}

#[derive(Serialize)]
struct AlgoRow {
    algorithm: String,
    components: usize,
    seed: u64,
    kl: f64,
    elbo: f64,
    final_objective: f64,
    error: Option<String>,
}

fn algo_compare(args: AlgoCompareArgs) -> Result<Job, UsageError> {
    let s = Settings::load(&args.common)?;
    let task = s.task()?;
    let base = s.fit_config(Algorithm::Vif)?;
    let file_algos = match &s.file.algos {
        Some(v) => Some(
            v.iter()
                .map(|a| parse_algorithm(a))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| usage(anyhow!(e)))?,
        ),
        None => None,
    };
    let algos = or_file(args.algos, &file_algos, &[Algorithm::Vif, Algorithm::Bvif, Algorithm::Bvi]);
    let bs = or_file(args.bs, &s.file.bs, &[1, 10, 40]);
    let seeds = s.seeds(args.runs);
    Ok(Box::new(move || {
        let cells = run_algo_comparison(&task, &bs, &algos, &seeds, &base, s.common.workers)?;
        for g in summarize_algo(&cells) {
            eprintln!(
                "{} B={}: ELBO quartiles {:.4}/{:.4}/{:.4}, KL median {:.4}, failures {}",
                g.algorithm, g.components, g.elbo.p25, g.elbo.p50, g.elbo.p75, g.kl.p50, g.failures
            );
        }
        let rows: Vec<AlgoRow> = cells
            .into_iter()
            .map(|c| AlgoRow {
                algorithm: c.algorithm.to_string(),
                components: c.components,
                seed: c.seed,
                kl: c.score.kl,
                elbo: c.score.elbo,
                final_objective: c.score.final_objective,
                error: c.score.error,
            })
            .collect();
        write_rows(s.output()?, &rows)
    }))
}

#[derive(Serialize)]
struct BaseRow {
    alpha: f64,
    seed: u64,
    kl: f64,
    elbo: f64,
    final_objective: f64,
    error: Option<String>,
}

fn base_sweep(args: BaseSweepArgs) -> Result<Job, UsageError> {
    let s = Settings::load(&args.common)?;
    let task = s.task()?;
    let base = s.fit_config(Algorithm::Vif)?;
    let alphas = or_file(args.alphas, &s.file.alphas, &[0.01, 0.1, 1.0, 10.0, 100.0]);
    if alphas.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
        return Err(usage(anyhow!("alphas must be positive")));
    }
    let seeds = s.seeds(args.runs);
    Ok(Box::new(move || {
        let cells = run_base_sweep(&task, &alphas, base.components, &seeds, &base, s.common.workers)?;
        let rows: Vec<BaseRow> = cells
            .into_iter()
            .map(|c| BaseRow {
                alpha: c.alpha,
                seed: c.seed,
                kl: c.score.kl,
                elbo: c.score.elbo,
                final_objective: c.score.final_objective,
                error: c.score.error,
            })
            .collect();
        write_rows(s.output()?, &rows)
    }))
}

#[derive(Serialize)]
struct PermutationRow {
    k: usize,
    flows: String,
    layers: usize,
    run: usize,
    shuffle: String,
    solved_at: Option<usize>,
}

fn partial_flows(args: PartialFlowsArgs) -> Result<Job, UsageError> {
    let s = Settings::load(&args.common)?;
    let flows = match args.family {
        FlowFamily::Partial => PermutationFlows::Partial,
        FlowFamily::LocScale => PermutationFlows::LocScale,
        FlowFamily::Shift => PermutationFlows::Shift,
    };
    if ![5, 7].contains(&args.k) {
        return Err(usage(anyhow!("--k must be 5 or 7")));
    }
    let iters = s.common.iters.unwrap_or(5000);
    Ok(Box::new(move || {
        let summary = run_permutation_recovery(args.k, flows, args.layers, args.runs, iters, s.seed(), s.common.workers)?;
        eprintln!(
            "{:?} K={} layers={}: success {:.3}, median iterations {}",
            summary.flows,
            summary.k,
            summary.layers,
            summary.success_fraction,
            summary.median_iterations.map_or("-".into(), |m| format!("{m}")),
        );
        let name = format!("{:?}", summary.flows).to_lowercase();
        let rows: Vec<PermutationRow> = summary
            .runs
            .iter()
            .map(|r| PermutationRow {
                k: summary.k,
                flows: name.clone(),
                layers: summary.layers,
                run: r.run,
                shuffle: r.shuffle.iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
                solved_at: r.solved_at,
            })
            .collect();
        write_rows(s.output()?, &rows)
    }))
}

/// Reads numeric rows; a first row that does not parse is taken as a header.
fn read_points(path: &Path) -> anyhow::Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let parsed: Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(r) => rows.push(r),
            Err(_) if i == 0 => continue,
            Err(e) => bail!("{} line {}: {e}", path.display(), i + 1),
        }
    }
    Ok(rows)
}

#[derive(Serialize)]
struct GmmRow {
    e_step: String,
    components: usize,
    seed: u64,
    elbo: f64,
    reference_elbo: f64,
    relative_gap: f64,
    agreement: f64,
    reference_agreement: f64,
    error: Option<String>,
}

fn fit_gmm(args: FitGmmArgs) -> Result<Job, UsageError> {
    let s = Settings::load(&args.common)?;
    let data = match &args.data {
        Some(path) => data_from_rows(&read_points(path).map_err(usage)?).map_err(usage)?,
        None => simulated_three_clusters(&mut SeededRng::new(s.seed())).0,
    };
    let mut settings = GmmSettings::default();
    settings.clusters = args.clusters.unwrap_or(settings.clusters);
    settings.em_steps = args.em_steps.unwrap_or(settings.em_steps);
    let c = &s.common;
    settings.inner_iterations = c.iters.unwrap_or(settings.inner_iterations);
    settings.fit.samples = c.samples.unwrap_or(settings.fit.samples);
    settings.fit.learning_rate = c.lr.unwrap_or(settings.fit.learning_rate);
    settings.fit.tau_p = c.tau_p.unwrap_or(settings.fit.tau_p);
    settings.fit.schedule = AnnealSchedule::new(
        c.tau.unwrap_or(settings.fit.schedule.tau0),
        c.gamma.unwrap_or(settings.fit.schedule.gamma),
    )
    .map_err(usage)?;
    if settings.clusters == 0 || settings.clusters > data.nrows() {
        return Err(usage(anyhow!("--clusters must be between 1 and the number of points")));
    }
    let algos = or_file(args.algos, &None, &[c.algo.unwrap_or(Algorithm::Vif)]);
    let bs = or_file(args.bs, &s.file.bs, &[c.flows.unwrap_or(1)]);
    let seeds = s.seeds(args.runs.or(Some(1)));
    Ok(Box::new(move || {
        let cells = run_gmm_comparison(&data, &settings, &bs, &algos, &seeds, s.common.workers)?;
        let rows: Vec<GmmRow> = cells
            .into_iter()
            .map(|c| GmmRow {
                e_step: c.e_step,
                components: c.components,
                seed: c.seed,
                elbo: c.elbo,
                reference_elbo: c.reference_elbo,
                relative_gap: c.relative_gap,
                agreement: c.agreement,
                reference_agreement: c.reference_agreement,
                error: c.error,
            })
            .collect();
        write_rows(s.output()?, &rows)
    }))
}

#[derive(Serialize)]
struct VarianceRow {
    samples: usize,
    repetitions: usize,
    mean: f64,
    std: f64,
    relative: f64,
}

fn variance(args: VarianceArgs) -> Result<Job, UsageError> {
    let s = Settings::load(&args.common)?;
    let task = s.task()?;
    let cfg = s.fit_config(Algorithm::Vif)?;
    if !cfg.algorithm.is_mixture() {
        return Err(usage(anyhow!("variance needs a mixture algorithm")));
    }
    let loaded = match &args.mixture {
        Some(path) => Some(FlowMixture64::load(path).map_err(usage)?),
        None => None,
    };
    if args.reps < 100 {
        return Err(usage(anyhow!("--reps must be at least 100")));
    }
    Ok(Box::new(move || {
        let m = match loaded {
            Some(m) => m,
            None => match fit::<f64, _>(&task.model, &cfg)?.final_state.as_mixture() {
                Some(m) => m.clone(),
                None => bail!("fit did not return a mixture"),
            },
        };
        let mut rng = SeededRng::new(cfg.seed ^ 0x7a7a);
        let mut rows = Vec::with_capacity(args.eval_samples.len());
        for &n in &args.eval_samples {
            let v = elbo_variance_study(&m, &task.model, args.reps, n, Allocation::Random, &mut rng)?;
            rows.push(VarianceRow {
                samples: n,
                repetitions: args.reps,
                mean: v.mean,
                std: v.std,
                relative: v.relative,
            });
        }
        write_rows(s.output()?, &rows)
    }))
}

#[derive(Serialize)]
struct EvalRow {
    kl_exact: f64,
    support_violation: bool,
    exact_elbo: f64,
    log_evidence: f64,
}

fn eval(args: EvalArgs) -> Result<Job, UsageError> {
    let s = Settings::load(&args.common)?;
    let task = s.task()?;
    let m = FlowMixture64::load(&args.mixture).map_err(usage)?;
    if m.cardinalities() != <BnPosterior as mdnf::models::TracedModel<f64>>::cardinalities(&task.model) {
        return Err(usage(anyhow!("mixture does not match the latent nodes of the network")));
    }
    Ok(Box::new(move || {
        let q = mdnf_q_table(&m)?;
        let kl = kl_to_exact(&q, &task.posterior.table)?;
        let row = EvalRow {
            kl_exact: kl.value,
            support_violation: kl.support_violation,
            exact_elbo: exact_elbo(&q, &task.posterior)?,
            log_evidence: task.posterior.log_evidence,
        };
        write_rows(s.output()?, &[row])
    }))
}

fn prepare(command: Command) -> Result<Job, UsageError> {
    match command {
        Command::FitBn(a) => fit_bn(a),
        Command::SweepTemp(a) => sweep_temp(a),
        Command::AlgoCompare(a) => algo_compare(a),
        Command::BaseSweep(a) => base_sweep(a),
        Command::PartialFlows(a) => partial_flows(a),
        Command::FitGmm(a) => fit_gmm(a),
        Command::Variance(a) => variance(a),
        Command::Eval(a) => eval(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let job = match prepare(cli.command) {
        Ok(job) => job,
        Err(UsageError(e)) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    match job() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
