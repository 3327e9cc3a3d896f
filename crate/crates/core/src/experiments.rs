//! Desk-scale experiment drivers: temperature grids, algorithm and base
//! comparisons on Bayesian networks, permutation recovery with flow stacks,
//! and the Gaussian-mixture E-step comparison.
//!
//! Grids run their cells on a bounded rayon pool. Each cell is seeded
//! explicitly and results come back in cell order, so output does not depend
//! on the worker count.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::diffcore::{MixtureLayout, NodeId, Tape, Temperature};
use crate::dists::{mix_seed, SeededRng};
use crate::error::{Error, Result};
use crate::eval::{diagnose, kl_of_state, percentile, GS_EXTERNAL_SAMPLES};
use crate::flows::{build_sorting_network, DiscreteFlow, FlowStack};
use crate::infer::{
    anneal, fit, fit_gs_from, fit_vif_from, initial_mixture, Algorithm, Allocation, BaseKind, FitConfig, FitReport, Optimizer,
    OptimizerKind, Variational,
};
use crate::models::gmm::hard_assignments;
use crate::models::{BayesNet, BnPosterior, Evidence, GmmState, Posterior};
use crate::space::ENUMERATION_CAP;

/// A network with evidence and its enumerated posterior.
#[derive(Clone, Debug)]
pub struct BnTask {
    pub model: BnPosterior,
    pub posterior: Posterior,
}

impl BnTask {
    pub fn new(net: BayesNet, evidence: Evidence) -> Result<Self> {
        let model = BnPosterior::new(net, evidence)?;
        let posterior = model.exact_posterior(ENUMERATION_CAP)?;
        Ok(Self { model, posterior })
    }
}

/// One fit scored against the exact posterior.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub report: FitReport<f64>,
    pub kl: f64,
    pub elbo: f64,
}

/// Fits `cfg` and fills in exact KL and ELBO of the final state.
pub fn run_bn_fit(task: &BnTask, cfg: &FitConfig) -> Result<Outcome> {
    let mut report = fit::<f64, _>(&task.model, cfg)?;
    let mut rng = SeededRng::new(mix_seed(cfg.seed, 0xe7a1));
    diagnose(&mut report, &task.model, Some(&task.posterior), GS_EXTERNAL_SAMPLES, &mut rng)?;
    let kl = report.diagnostics.kl_exact.unwrap_or(f64::NAN);
    let elbo = report.diagnostics.external_elbo.unwrap_or(f64::NAN);
    Ok(Outcome { report, kl, elbo })
}

/// Runs `f` over `items` on a pool of `workers` threads (all cores when
/// `None`), returning results in input order.
pub fn run_cells<I, R, F>(items: &[I], workers: Option<usize>, f: F) -> Result<Vec<R>>
where
    I: Sync,
    R: Send,
    F: Fn(&I) -> R + Sync + Send,
{
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Internal(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| items.par_iter().map(&f).collect()))
}

/// Final scores of one grid cell; `error` is set when the fit failed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellScore {
    pub kl: f64,
    pub elbo: f64,
    pub final_objective: f64,
    pub error: Option<String>,
}

impl CellScore {
    fn from(result: Result<Outcome>) -> Self {
        match result {
            Ok(o) => Self {
                kl: o.kl,
                elbo: o.elbo,
                final_objective: o.report.final_objective().unwrap_or(f64::NAN),
                error: None,
            },
            Err(e) => Self {
                kl: f64::NAN,
                elbo: f64::NAN,
                final_objective: f64::NAN,
                error: Some(e.to_string()),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TempCell {
    pub method: Algorithm,
    pub tau: f64,
    /// `None` for mixture methods, which use the discrete prior.
    pub tau_p: Option<f64>,
    pub seed: u64,
    #[serde(flatten)]
    pub score: CellScore,
}

/// Final KL for every `(τ, τ_p, seed)` cell. `τ` becomes `tau0` of the
/// base schedule; `τ_p` is only swept for [`Algorithm::Gs`].
pub fn run_temp_grid(
    task: &BnTask,
    method: Algorithm,
    taus: &[f64],
    tau_ps: &[f64],
    seeds: &[u64],
    base: &FitConfig,
    workers: Option<usize>,
) -> Result<Vec<TempCell>> {
    let tau_ps: Vec<Option<f64>> = if method == Algorithm::Gs {
        if tau_ps.is_empty() {
            return Err(Error::InvalidInput("gs grid needs at least one tau_p".into()));
        }
        tau_ps.iter().map(|&t| Some(t)).collect()
    } else {
        vec![None]
    };
    let mut cells = Vec::new();
    for &tau in taus {
        for &tau_p in &tau_ps {
            for &seed in seeds {
                cells.push((tau, tau_p, seed));
            }
        }
    }
    run_cells(&cells, workers, |&(tau, tau_p, seed)| {
        let cfg = FitConfig {
            algorithm: method,
            seed,
            schedule: crate::infer::AnnealSchedule {
                tau0: tau,
                gamma: base.schedule.gamma,
            },
            tau_p: tau_p.unwrap_or(base.tau_p),
            ..base.clone()
        };
        TempCell {
            method,
            tau,
            tau_p,
            seed,
            score: CellScore::from(run_bn_fit(task, &cfg)),
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlgoCell {
    pub algorithm: Algorithm,
    pub components: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub score: CellScore,
}

/// Every `(algorithm, B, seed)` combination.
pub fn run_algo_comparison(
    task: &BnTask,
    bs: &[usize],
    algorithms: &[Algorithm],
    seeds: &[u64],
    base: &FitConfig,
    workers: Option<usize>,
) -> Result<Vec<AlgoCell>> {
    let mut cells = Vec::new();
    for &algorithm in algorithms {
        for &b in bs {
            for &seed in seeds {
                cells.push((algorithm, b, seed));
            }
        }
    }
    run_cells(&cells, workers, |&(algorithm, b, seed)| {
        let cfg = FitConfig {
            algorithm,
            components: b,
            seed,
            ..base.clone()
        };
        AlgoCell {
            algorithm,
            components: b,
            seed,
            score: CellScore::from(run_bn_fit(task, &cfg)),
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BaseCell {
    pub alpha: f64,
    pub seed: u64,
    #[serde(flatten)]
    pub score: CellScore,
}

/// VIF with Dirichlet(α) bases for every `(α, seed)`.
pub fn run_base_sweep(
    task: &BnTask,
    alphas: &[f64],
    b: usize,
    seeds: &[u64],
    base: &FitConfig,
    workers: Option<usize>,
) -> Result<Vec<BaseCell>> {
    let cells: Vec<(f64, u64)> = alphas.iter().flat_map(|&a| seeds.iter().map(move |&s| (a, s))).collect();
    run_cells(&cells, workers, |&(alpha, seed)| {
        let cfg = FitConfig {
            algorithm: Algorithm::Vif,
            components: b,
            seed,
            base: BaseKind::Dirichlet { alpha },
            ..base.clone()
        };
        BaseCell {
            alpha,
            seed,
            score: CellScore::from(run_bn_fit(task, &cfg)),
        }
    })
}

/// 25th, 50th and 75th percentiles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Quartiles {
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Self {
        Self {
            p25: percentile(values, 0.25),
            p50: percentile(values, 0.5),
            p75: percentile(values, 0.75),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlgoSummary {
    pub algorithm: Algorithm,
    pub components: usize,
    pub runs: usize,
    pub failures: usize,
    pub elbo: Quartiles,
    pub kl: Quartiles,
}

/// Per-`(algorithm, B)` quartiles over seeds, in first-seen order.
pub fn summarize_algo(cells: &[AlgoCell]) -> Vec<AlgoSummary> {
    let mut keys: Vec<(Algorithm, usize)> = Vec::new();
    for c in cells {
        if !keys.contains(&(c.algorithm, c.components)) {
            keys.push((c.algorithm, c.components));
        }
    }
    keys.into_iter()
        .map(|(algorithm, components)| {
            let group: Vec<&AlgoCell> = cells
                .iter()
                .filter(|c| c.algorithm == algorithm && c.components == components)
                .collect();
            let ok: Vec<&&AlgoCell> = group.iter().filter(|c| c.score.error.is_none()).collect();
            let elbos: Vec<f64> = ok.iter().map(|c| c.score.elbo).collect();
            let kls: Vec<f64> = ok.iter().map(|c| c.score.kl).collect();
            AlgoSummary {
                algorithm,
                components,
                runs: group.len(),
                failures: group.len() - ok.len(),
                elbo: Quartiles::of(&elbos),
                kl: Quartiles::of(&kls),
            }
        })
        .collect()
}

/// Flow stack family for permutation recovery.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PermutationFlows {
    /// Adjacent-pair partial flows in a bubble-sort network; the layer count
    /// is fixed at `K(K-1)/2`.
    Partial,
    /// `layers` location-scale layers with trainable unit scale and shift.
    LocScale,
    /// `layers` shift-only layers.
    Shift,
}

/// Target distributions for the permutation experiment.
pub fn permutation_target(k: usize) -> Result<Vec<f64>> {
    match k {
        5 => Ok(vec![0.07, 0.13, 0.2, 0.27, 0.33]),
        7 => Ok(vec![0.04, 0.07, 0.11, 0.14, 0.18, 0.21, 0.25]),
        _ => Err(Error::InvalidInput(format!("no permutation target for K = {k} (use 5 or 7)"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PermutationRun {
    pub run: usize,
    pub shuffle: Vec<usize>,
    /// Iteration at which the hard pushforward first equalled the target.
    pub solved_at: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PermutationSummary {
    pub k: usize,
    pub flows: PermutationFlows,
    pub layers: usize,
    pub runs: Vec<PermutationRun>,
    pub success_fraction: f64,
    pub median_iterations: Option<f64>,
}

fn permutation_stack(k: usize, flows: PermutationFlows, layers: usize) -> Result<FlowStack<f64>> {
    match flows {
        PermutationFlows::Partial => build_sorting_network(k),
        PermutationFlows::LocScale => FlowStack::new(k, (0..layers).map(|_| DiscreteFlow::affine(k)).collect::<Result<_>>()?),
        PermutationFlows::Shift => FlowStack::shifts(k, layers),
    }
}

/// Maximum-likelihood recovery of a shuffled target.
///
/// Each run shuffles the target `p_x` into a base `p_u`, starts every layer
/// at zero logits (the identity) and ascends the exact expected log-likelihood
/// `Σ_x p_x(x) ln f(p_u)(x)` with Adam (step 0.1, τ = 1). A run succeeds when
/// the hard pushforward equals `p_x` within `max_iters` iterations.
pub fn run_permutation_recovery(
    k: usize,
    flows: PermutationFlows,
    layers: usize,
    runs: usize,
    max_iters: usize,
    seed: u64,
    workers: Option<usize>,
) -> Result<PermutationSummary> {
    let target = permutation_target(k)?;
    let probe = permutation_stack(k, flows, layers)?;
    let layers = probe.layers().len();
    let ids: Vec<usize> = (0..runs).collect();
    let results = run_cells(&ids, workers, |&run| {
        let mut rng = SeededRng::new(mix_seed(seed, run as u64));
        recover_once(&target, flows, layers, max_iters, run, &mut rng)
    })?;
    let runs: Vec<PermutationRun> = results.into_iter().collect::<Result<_>>()?;
    let solved: Vec<f64> = runs.iter().filter_map(|r| r.solved_at.map(|i| i as f64)).collect();
    let success_fraction = if runs.is_empty() {
        0.0
    } else {
        solved.len() as f64 / runs.len() as f64
    };
    Ok(PermutationSummary {
        k,
        flows,
        layers,
        success_fraction,
        median_iterations: (!solved.is_empty()).then(|| percentile(&solved, 0.5)),
        runs,
    })
}

fn recover_once(
    target: &[f64],
    flows: PermutationFlows,
    layers: usize,
    max_iters: usize,
    run: usize,
    rng: &mut SeededRng,
) -> Result<PermutationRun> {
    use rand::seq::SliceRandom;
    let mut shuffle: Vec<usize> = (0..target.len()).collect();
    shuffle.shuffle(rng);
    let solved_at = recover_permutation(target, &shuffle, flows, layers, max_iters)?;
    Ok(PermutationRun { run, shuffle, solved_at })
}

/// One recovery run with base `p_u[i] = target[shuffle[i]]`. Returns the
/// first iteration at which the hard pushforward equals `target`.
pub fn recover_permutation(
    target: &[f64],
    shuffle: &[usize],
    flows: PermutationFlows,
    layers: usize,
    max_iters: usize,
) -> Result<Option<usize>> {
    let k = target.len();
    if shuffle.len() != k {
        return Err(Error::InvalidInput("shuffle length differs from K".into()));
    }
    let p_u: Vec<f64> = shuffle.iter().map(|&i| target[i]).collect();
    let mut stack = permutation_stack(k, flows, layers)?;
    let solved_now = |stack: &FlowStack<f64>| {
        let perm = stack.permutation();
        (0..k).all(|u| target[perm[u]] == p_u[u])
    };
    let tau = Temperature::new(1.0)?;
    let mut tape = Tape::<f64>::new();
    let n_params: usize = stack.layers().iter().map(|l| l.param_count()).sum();
    let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, n_params);
    for it in 0..=max_iters {
        if solved_now(&stack) {
            return Ok(Some(it));
        }
        if it == max_iters {
            break;
        }
        tape.clear();
        let leaves = stack.bind(&mut tape);
        let mats = stack.materialize(&mut tape, &leaves, tau)?;
        let u = tape.constant(&p_u);
        let r = stack.pushforward(&mut tape, &mats, u)?;
        let terms: Vec<NodeId> = (0..k)
            .map(|x| {
                let e = tape.one_hot(x, k);
                let l = tape.log_dot(e, r);
                tape.scale(l, target[x])
            })
            .collect();
        let obj = tape.sum_scalars(&terms);
        let nodes: Vec<NodeId> = leaves.iter().flat_map(|l| std::iter::once(l.shift).chain(l.scale)).collect();
        let grads = tape.backward(obj)?;
        let mut g: Vec<f64> = nodes.iter().flat_map(|&n| grads.wrt(n).iter().copied()).collect();
        crate::infer::sanitize_gradient(&mut g);
        let mut p: Vec<f64> = stack
            .layers()
            .iter()
            .flat_map(|l| l.shift_logits().iter().chain(l.scale_logits()).copied())
            .collect();
        opt.ascend(&mut p, &g);
        let mut at = 0;
        for l in stack.layers_mut() {
            let ns = l.shift_logits().len();
            l.set_shift_logits(&p[at..at + ns])?;
            at += ns;
            let nc = l.scale_logits().len();
            if nc > 0 {
                l.set_scale_logits(&p[at..at + nc])?;
                at += nc;
            }
        }
    }
    Ok(None)
}

/// E-step used inside variational EM.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EStep {
    ClosedForm,
    /// Stochastic E-step trained with the given algorithm: `vif` and
    /// `bvif` use a per-dimension flow mixture, `gs`/`st-gs` per-point logits.
    Stochastic(Algorithm),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmRun {
    pub e_step: EStep,
    pub components: usize,
    pub seed: u64,
    /// Bound after every M-step.
    pub elbo_trace: Vec<f64>,
    /// Responsibilities of the last E-step.
    pub responsibilities: DMatrix<f64>,
    /// Closed-form responsibilities at the parameters the last E-step saw.
    pub exact_responsibilities: DMatrix<f64>,
}

impl GmmRun {
    pub fn final_elbo(&self) -> f64 {
        self.elbo_trace.last().copied().unwrap_or(f64::NAN)
    }
}

/// Settings of one variational EM run.
#[derive(Clone, Debug)]
pub struct GmmSettings {
    pub clusters: usize,
    pub em_steps: usize,
    /// Inner optimisation steps per E-step.
    pub inner_iterations: usize,
    /// Template for stochastic E-steps; `components`, `seed`, `algorithm`
    /// and `time_offset` are filled in per run.
    pub fit: FitConfig,
}

impl Default for GmmSettings {
    fn default() -> Self {
        Self {
            clusters: 3,
            em_steps: 50,
            inner_iterations: 200,
            fit: FitConfig {
                layout: MixtureLayout::PerDimension,
                allocation: Allocation::Stratified,
                schedule: crate::infer::AnnealSchedule { tau0: 10.0, gamma: 0.01 },
                samples: 1,
                ..FitConfig::default()
            },
        }
    }
}

/// Variational EM on `data` with the chosen E-step. The initial state
/// depends only on `seed`, so runs with equal seeds start identically.
pub fn run_gmm_em(data: &DMatrix<f64>, settings: &GmmSettings, e_step: EStep, components: usize, seed: u64) -> Result<GmmRun> {
    let mut rng = SeededRng::new(seed);
    let mut state = GmmState::initialise(data.clone(), settings.clusters, &mut rng)?;
    let mut fit_rng = SeededRng::new(mix_seed(seed, 0x9e55));
    let n = state.points();
    let k = state.clusters();
    let mut elbo_trace = Vec::with_capacity(settings.em_steps);
    let mut resp = state.e_step();
    let mut exact = resp.clone();
    let algorithm = match e_step {
        EStep::ClosedForm => None,
        EStep::Stochastic(a) => Some(a),
    };
    let mut cfg = FitConfig {
        algorithm: algorithm.unwrap_or(Algorithm::Vif),
        components,
        seed,
        iterations: settings.inner_iterations,
        ..settings.fit.clone()
    };
    let cards = vec![k; n];
    let mut mixture = match algorithm {
        Some(Algorithm::Vif) => Some(initial_mixture::<f64>(&cards, &cfg, &mut fit_rng)?),
        _ => None,
    };
    let mut logits: Option<Vec<Vec<f64>>> = match algorithm {
        Some(Algorithm::Gs | Algorithm::StGs) => Some(vec![vec![0.0; k]; n]),
        _ => None,
    };
    for step in 0..settings.em_steps {
        cfg.time_offset = step;
        resp = match algorithm {
            None => state.e_step(),
            Some(Algorithm::Vif) => {
                let model = state.allocation_model();
                let q = mixture.take().expect("mixture present");
                let rep = fit_vif_from(&model, &cfg, q, &mut fit_rng)?;
                let q = match rep.final_state {
                    Variational::Mixture(m) => m,
                    Variational::Logits(_) => unreachable!("VIF returns a mixture"),
                };
                let r = marginals_matrix(&q.marginals(), k);
                mixture = Some(q);
                r
            }
            Some(Algorithm::Bvif) => {
                let model = state.allocation_model();
                let stage = FitConfig {
                    iterations: (settings.inner_iterations / components.max(1)).max(1),
                    ..cfg.clone()
                };
                let rep = crate::infer::fit_bvif::<f64, _>(&model, &stage, &mut fit_rng)?;
                let q = rep.final_state.as_mixture().expect("BVIF returns a mixture");
                marginals_matrix(&q.marginals(), k)
            }
            Some(Algorithm::Gs | Algorithm::StGs) => {
                let model = state.allocation_model();
                let l = logits.take().expect("logits present");
                let rep = fit_gs_from(&model, &cfg, l, &mut fit_rng)?;
                let l = match rep.final_state {
                    Variational::Logits(l) => l,
                    Variational::Mixture(_) => unreachable!("GS returns logits"),
                };
                let probs: Vec<Vec<f64>> = l.iter().map(|v| crate::infer::softmax_f64(v)).collect();
                logits = Some(l);
                marginals_matrix(&probs, k)
            }
            Some(Algorithm::Bvi) => return Err(Error::InvalidInput("BVI is not available as a GMM E-step".into())),
        };
        exact = match algorithm {
            None => resp.clone(),
            Some(_) => state.e_step(),
        };
        state.m_step(&resp)?;
        elbo_trace.push(state.elbo(&resp)?);
    }
    Ok(GmmRun {
        e_step,
        components,
        seed,
        elbo_trace,
        responsibilities: resp,
        exact_responsibilities: exact,
    })
}

fn marginals_matrix(rows: &[Vec<f64>], k: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows.len(), k);
    for (i, r) in rows.iter().enumerate() {
        let total: f64 = r.iter().sum();
        for j in 0..k {
            m[(i, j)] = r[j] / total;
        }
    }
    m
}

/// Fraction of points with the same hard assignment under the best
/// relabelling of clusters.
pub fn assignment_agreement(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let (ha, hb) = (hard_assignments(a), hard_assignments(b));
    let k = a.ncols();
    let mut best = 0;
    for perm in permutations(k) {
        let agree = ha.iter().zip(&hb).filter(|(&x, &y)| perm[x] == y).count();
        best = best.max(agree);
    }
    best as f64 / ha.len().max(1) as f64
}

/// Fraction of points with the same hard assignment, labels taken as is.
pub fn label_agreement(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let (ha, hb) = (hard_assignments(a), hard_assignments(b));
    ha.iter().zip(&hb).filter(|(x, y)| x == y).count() as f64 / ha.len().max(1) as f64
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GmmCell {
    pub e_step: String,
    pub components: usize,
    pub seed: u64,
    pub elbo: f64,
    pub reference_elbo: f64,
    /// `|elbo - reference| / |reference|`
    pub relative_gap: f64,
    /// Hard-assignment agreement with the closed-form E-step at the same
    /// parameters.
    pub agreement: f64,
    /// Hard-assignment agreement with the final responsibilities of the
    /// closed-form EM run from the same start.
    pub reference_agreement: f64,
    pub error: Option<String>,
}

/// Stochastic E-steps against the closed-form E-step for every
/// `(algorithm, B, seed)`; each seed's closed-form run is the reference.
pub fn run_gmm_comparison(
    data: &DMatrix<f64>,
    settings: &GmmSettings,
    bs: &[usize],
    algorithms: &[Algorithm],
    seeds: &[u64],
    workers: Option<usize>,
) -> Result<Vec<GmmCell>> {
    let references = run_cells(seeds, workers, |&seed| run_gmm_em(data, settings, EStep::ClosedForm, 1, seed))?;
    let references: Vec<GmmRun> = references.into_iter().collect::<Result<_>>()?;
    let mut cells = Vec::new();
    for &a in algorithms {
        for &b in bs {
            for (i, &seed) in seeds.iter().enumerate() {
                cells.push((a, b, i, seed));
            }
        }
    }
    run_cells(&cells, workers, |&(a, b, i, seed)| {
        let reference = &references[i];
        let r = reference.final_elbo();
        match run_gmm_em(data, settings, EStep::Stochastic(a), b, seed) {
            Ok(run) => GmmCell {
                e_step: a.to_string(),
                components: b,
                seed,
                elbo: run.final_elbo(),
                reference_elbo: r,
                relative_gap: (run.final_elbo() - r).abs() / r.abs(),
                agreement: label_agreement(&run.responsibilities, &run.exact_responsibilities),
                reference_agreement: assignment_agreement(&run.responsibilities, &reference.responsibilities),
                error: None,
            },
            Err(e) => GmmCell {
                e_step: a.to_string(),
                components: b,
                seed,
                elbo: f64::NAN,
                reference_elbo: r,
                relative_gap: f64::NAN,
                agreement: f64::NAN,
                reference_agreement: f64::NAN,
                error: Some(e.to_string()),
            },
        }
    })
}

/// Temperature-robustness summary of an MDNF row: final KLs, their spread
/// and whether the spread is below `max(0.05, 2 * min)`.
pub fn kl_spread(kls: &[f64]) -> (f64, bool) {
    let finite: Vec<f64> = kls.iter().copied().filter(|k| k.is_finite()).collect();
    if finite.len() != kls.len() || finite.is_empty() {
        return (f64::INFINITY, false);
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spread = hi - lo;
    (spread, spread < f64::max(0.05, 2.0 * lo))
}

/// KL of a snapshot state against a task's posterior, for gap traces.
pub fn snapshot_kl(task: &BnTask, state: &Variational<f64>) -> Result<f64> {
    Ok(kl_of_state(state, &task.posterior)?.value)
}

/// Indices of the smallest and largest finite values.
pub fn argmin_argmax(values: &[f64]) -> Option<(usize, usize)> {
    let finite = (0..values.len()).filter(|&i| values[i].is_finite());
    let lo = finite.clone().min_by(|&a, &b| values[a].total_cmp(&values[b]))?;
    let hi = finite.max_by(|&a, &b| values[a].total_cmp(&values[b]))?;
    Some((lo, hi))
}

/// Advances an annealing clock the way the GMM E-step does, for reporting.
pub fn gmm_tau(settings: &GmmSettings, step: usize, iteration: usize) -> f64 {
    anneal::<f64>(&settings.fit.schedule, step + iteration).value()
}
