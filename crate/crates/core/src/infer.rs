//! Variational objectives and training loops.
//!
//! Every loop maximises a Monte Carlo ELBO by gradient ascent on a freshly
//! recorded tape per iteration. Mixture methods (VIF, BVIF, BVI) optimise a
//! [`FlowMixture`]; the Gumbel-Softmax baselines optimise one logit vector per
//! latent dimension.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diffcore::{MixtureLayout, NodeId, Tape, Temperature};
use crate::dists::{gumbel_from_uniform, sample_categorical, sample_dirichlet_base, CategoricalParams, DeltaBase, SeededRng};
use crate::error::{Error, Result};
use crate::mdnf::{Base, ComponentDim, FlowMixture, MixtureBinding};
use crate::models::{ModelBinding, TracedModel};
use crate::scalar::Real;
use crate::space::ConfigSpace;

/// Bound applied to infinite gradient entries.
pub const GRAD_CLIP: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Vif,
    Bvif,
    Bvi,
    Gs,
    StGs,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [Algorithm::Vif, Algorithm::Bvif, Algorithm::Bvi, Algorithm::Gs, Algorithm::StGs];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Vif => "vif",
            Algorithm::Bvif => "bvif",
            Algorithm::Bvi => "bvi",
            Algorithm::Gs => "gs",
            Algorithm::StGs => "st-gs",
        }
    }

    /// Whether the variational family is a flow mixture.
    pub fn is_mixture(self) -> bool {
        matches!(self, Algorithm::Vif | Algorithm::Bvif | Algorithm::Bvi)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vif" => Ok(Algorithm::Vif),
            "bvif" => Ok(Algorithm::Bvif),
            "bvi" => Ok(Algorithm::Bvi),
            "gs" => Ok(Algorithm::Gs),
            "st-gs" | "st_gs" => Ok(Algorithm::StGs),
            other => Err(Error::InvalidInput(format!("unknown algorithm `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    RmsProp,
    Adam,
}

/// Base distribution given to newly created mixture components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseKind {
    Delta,
    /// Categorical base drawn from a symmetric Dirichlet.
    Dirichlet { alpha: f64 },
}

/// How Monte Carlo samples are spread over mixture components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Allocation {
    /// Each sample draws its component from `rho`.
    Random,
    /// One sample per component, weighted by `rho`. With delta bases the
    /// estimate is exact. Under [`MixtureLayout::PerDimension`] every
    /// dimension of a sample uses the same component, which is exact only
    /// for log-joints that are additive over dimensions.
    Stratified,
}

/// `tau_t = tau0 * exp(-gamma * t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub tau0: f64,
    pub gamma: f64,
}

impl AnnealSchedule {
    pub fn new(tau0: f64, gamma: f64) -> Result<Self> {
        if !(tau0 > 0.0 && tau0.is_finite()) {
            return Err(Error::InvalidInput(format!("tau0 must be positive and finite, got {tau0}")));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidInput(format!("gamma must be non-negative, got {gamma}")));
        }
        Ok(Self { tau0, gamma })
    }

    pub fn constant(tau0: f64) -> Result<Self> {
        Self::new(tau0, 0.0)
    }

    /// Temperature at step `t`, kept strictly positive.
    pub fn tau_at(&self, t: usize) -> f64 {
        (self.tau0 * (-self.gamma * t as f64).exp()).max(f64::MIN_POSITIVE)
    }
}

pub fn anneal<T: Real>(schedule: &AnnealSchedule, t: usize) -> Temperature<T> {
    let tau = T::lit(schedule.tau_at(t)).max(T::min_positive_value());
    Temperature::new(tau).expect("annealed temperature is positive")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub algorithm: Algorithm,
    /// Mixture components `B`.
    pub components: usize,
    /// Monte Carlo samples `S` per step.
    pub samples: usize,
    /// Iterations, per stage for the boosting methods.
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub schedule: AnnealSchedule,
    /// Prior relaxation temperature for [`Algorithm::Gs`].
    pub tau_p: f64,
    /// Flow layers per dimension and component.
    pub layers: usize,
    pub layout: MixtureLayout,
    pub base: BaseKind,
    pub allocation: Allocation,
    pub optimizer: OptimizerKind,
    /// Parameter snapshots are kept every this many iterations.
    pub snapshot_every: usize,
    /// Added to the iteration counter when annealing.
    pub time_offset: usize,
    /// Fixed component atoms for [`Algorithm::Bvi`]; random when `None`.
    pub atoms: Option<Vec<Vec<usize>>>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Vif,
            components: 1,
            samples: 100,
            iterations: 10_000,
            learning_rate: 0.01,
            seed: 0,
            schedule: AnnealSchedule { tau0: 1.0, gamma: 0.0 },
            tau_p: 1.0,
            layers: 1,
            layout: MixtureLayout::Joint,
            base: BaseKind::Delta,
            allocation: Allocation::Random,
            optimizer: OptimizerKind::RmsProp,
            snapshot_every: 100,
            time_offset: 0,
            atoms: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if self.components == 0 {
            return bad("B must be at least 1");
        }
        if self.samples == 0 {
            return bad("S must be at least 1");
        }
        if self.layers == 0 {
            return bad("at least one flow layer is needed");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.tau_p > 0.0 && self.tau_p.is_finite()) {
            return bad("tau_p must be positive");
        }
        if self.snapshot_every == 0 {
            return bad("snapshot interval must be at least 1");
        }
        if let BaseKind::Dirichlet { alpha } = self.base {
            if !(alpha > 0.0) {
                return bad("Dirichlet alpha must be positive");
            }
        }
        if let Some(atoms) = &self.atoms {
            if atoms.len() != self.components {
                return bad("BVI needs one atom per component");
            }
        }
        AnnealSchedule::new(self.schedule.tau0, self.schedule.gamma)?;
        Ok(())
    }
}

/// Gradient-ascent optimiser with per-parameter step scaling.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: T,
    m: Vec<T>,
    v: Vec<T>,
    steps: i32,
}

impl<T: Real> Optimizer<T> {
    const DECAY: f64 = 0.9;
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, lr: f64, n: usize) -> Self {
        Self {
            kind,
            lr: T::lit(lr),
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            steps: 0,
        }
    }

    /// One ascent step `params += lr * direction(grads)`.
    pub fn ascend(&mut self, params: &mut [T], grads: &[T]) {
        assert_eq!(params.len(), self.v.len(), "optimizer built for a different parameter count");
        assert_eq!(grads.len(), self.v.len(), "gradient length mismatch");
        self.steps = self.steps.saturating_add(1);
        let eps = T::lit(Self::EPS);
        match self.kind {
            OptimizerKind::RmsProp => {
                let decay = T::lit(Self::DECAY);
                for ((p, &g), v) in params.iter_mut().zip(grads).zip(&mut self.v) {
                    *v = decay * *v + (T::one() - decay) * g * g;
                    *p += self.lr * g / (v.sqrt() + eps);
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (T::lit(Self::BETA1), T::lit(Self::BETA2));
                let c1 = T::one() - b1.powi(self.steps);
                let c2 = T::one() - b2.powi(self.steps);
                for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    *p += self.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Replaces NaN entries by 0 and infinite ones by `±GRAD_CLIP`.
/// Returns the number of entries changed.
pub fn sanitize_gradient<T: Real>(g: &mut [T]) -> usize {
    let mut n = 0;
    for x in g.iter_mut() {
        if x.is_nan() {
            *x = T::zero();
            n += 1;
        } else if x.is_infinite() {
            *x = T::lit(GRAD_CLIP).copysign(*x);
            n += 1;
        }
    }
    n
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Training surrogate at the parameters used in this iteration.
    pub objective: f64,
    pub tau: f64,
    pub wallclock_ms: f64,
}

/// Trained variational distribution.
#[derive(Clone, Debug, PartialEq)]
pub enum Variational<T> {
    Mixture(FlowMixture<T>),
    /// Factorised categorical `softmax(λ_d)` per dimension, the law of
    /// discretised Gumbel-Softmax samples.
    Logits(Vec<Vec<T>>),
}

impl<T: Real> Variational<T> {
    pub fn cardinalities(&self) -> Vec<usize> {
        match self {
            Variational::Mixture(m) => m.cardinalities().to_vec(),
            Variational::Logits(l) => l.iter().map(Vec::len).collect(),
        }
    }

    /// `q(x)` over every configuration, last dimension fastest.
    pub fn prob_table(&self, cap: u128) -> Result<Vec<f64>> {
        match self {
            Variational::Mixture(m) => m.prob_table(cap),
            Variational::Logits(l) => {
                let marg: Vec<Vec<f64>> = l.iter().map(|v| softmax_f64(v)).collect();
                let space = ConfigSpace::new(self.cardinalities())?;
                let n = space.size_within(cap)?;
                let mut x = vec![0; space.dims()];
                Ok((0..n)
                    .map(|i| {
                        space.decode_into(i, &mut x);
                        x.iter().zip(&marg).map(|(&k, p)| p[k]).product()
                    })
                    .collect())
            }
        }
    }

    pub fn log_prob(&self, x: &[usize]) -> f64 {
        match self {
            Variational::Mixture(m) => m.log_prob_exact(x),
            Variational::Logits(l) => x
                .iter()
                .zip(l)
                .map(|(&k, v)| softmax_f64(v)[k].ln())
                .sum(),
        }
    }

    pub fn sample(&self, rng: &mut SeededRng) -> Vec<usize> {
        match self {
            Variational::Mixture(m) => m.sample_indices(rng),
            Variational::Logits(l) => l.iter().map(|v| sample_categorical(&softmax_f64(v), rng)).collect(),
        }
    }

    pub fn as_mixture(&self) -> Option<&FlowMixture<T>> {
        match self {
            Variational::Mixture(m) => Some(m),
            Variational::Logits(_) => None,
        }
    }
}

pub(crate) fn softmax_f64<T: Real>(logits: &[T]) -> Vec<f64> {
    let v: Vec<f64> = logits.iter().map(|l| l.as_f64()).collect();
    let lse = crate::diffcore::logsumexp(&v);
    v.iter().map(|l| (l - lse).exp()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot<T> {
    pub iteration: usize,
    pub state: Variational<T>,
}

/// External evaluation of the final state, filled in by the caller.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Diagnostics {
    pub external_elbo: Option<f64>,
    pub kl_exact: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport<T> {
    pub algorithm: Algorithm,
    pub records: Vec<IterationRecord>,
    /// Parameters as used at the recorded iteration, every
    /// `snapshot_every` iterations.
    pub snapshots: Vec<Snapshot<T>>,
    pub final_state: Variational<T>,
    /// Non-finite gradient entries replaced before an update.
    pub clipped_gradients: usize,
    pub diagnostics: Diagnostics,
}

impl<T: Real> FitReport<T> {
    pub fn final_objective(&self) -> Option<f64> {
        self.records.last().map(|r| r.objective)
    }
}

/// Traced Monte Carlo ELBO `(1/S) Σ_s [ln p(D, x_s) - ln q(x_s)]`, `x_s ~ q`.
/// Under [`Allocation::Stratified`] `samples` is ignored and one sample is
/// drawn per component.
#[allow(clippy::too_many_arguments)]
pub fn elbo_estimate<T: Real, M: TracedModel<T> + ?Sized>(
    tape: &mut Tape<T>,
    q: &FlowMixture<T>,
    qbind: &MixtureBinding,
    model: &M,
    mbind: &ModelBinding,
    samples: usize,
    allocation: Allocation,
    rng: &mut SeededRng,
) -> Result<NodeId> {
    let weights: Vec<T> = q.rho().to_vec();
    let components: Vec<usize> = (0..q.components()).collect();
    weighted_elbo_terms(tape, q, qbind, model, mbind, &components, &weights, samples, allocation, rng)
}

/// ELBO terms averaged over samples from the sub-mixture of `components`
/// with (normalised) weights `weights`; `ln q` is always the full mixture.
#[allow(clippy::too_many_arguments)]
fn weighted_elbo_terms<T: Real, M: TracedModel<T> + ?Sized>(
    tape: &mut Tape<T>,
    q: &FlowMixture<T>,
    qbind: &MixtureBinding,
    model: &M,
    mbind: &ModelBinding,
    components: &[usize],
    weights: &[T],
    samples: usize,
    allocation: Allocation,
    rng: &mut SeededRng,
) -> Result<NodeId> {
    if samples == 0 {
        return Err(Error::InvalidInput("S must be at least 1".into()));
    }
    let d = q.dims();
    let term = |tape: &mut Tape<T>, assign: &[usize], rng: &mut SeededRng| -> Result<NodeId> {
        let xs = q.sample_assigned(tape, qbind, assign, rng)?;
        let lp = model.trace_log_joint(tape, mbind, &xs);
        let lq = q.log_prob(tape, qbind, &xs);
        Ok(tape.sub(lp, lq))
    };
    match allocation {
        Allocation::Random => {
            let mut terms = Vec::with_capacity(samples);
            for _ in 0..samples {
                let assign: Vec<usize> = match q.layout() {
                    MixtureLayout::Joint => vec![components[sample_categorical(weights, rng)]; d],
                    MixtureLayout::PerDimension => (0..d).map(|_| components[sample_categorical(weights, rng)]).collect(),
                };
                terms.push(term(tape, &assign, rng)?);
            }
            Ok(tape.mean_scalars(&terms))
        }
        Allocation::Stratified => {
            let total: T = weights.iter().copied().sum();
            let mut terms = Vec::with_capacity(components.len());
            for (&b, &w) in components.iter().zip(weights) {
                if w == T::zero() {
                    continue;
                }
                let t = term(tape, &vec![b; d], rng)?;
                terms.push(tape.scale(t, w / total));
            }
            Ok(tape.sum_scalars(&terms))
        }
    }
}

/// Untraced value of [`elbo_estimate`] on a fresh tape.
pub fn elbo_value<T: Real, M: TracedModel<T> + ?Sized>(
    q: &FlowMixture<T>,
    model: &M,
    samples: usize,
    allocation: Allocation,
    rng: &mut SeededRng,
) -> Result<f64> {
    let mut tape = Tape::new();
    elbo_value_on(&mut tape, q, model, samples, allocation, rng)
}

/// [`elbo_value`] reusing a caller-owned tape.
pub fn elbo_value_on<T: Real, M: TracedModel<T> + ?Sized>(
    tape: &mut Tape<T>,
    q: &FlowMixture<T>,
    model: &M,
    samples: usize,
    allocation: Allocation,
    rng: &mut SeededRng,
) -> Result<f64> {
    tape.clear();
    let mb = model.bind(tape);
    let qb = q.bind(tape, Temperature::new(T::one())?, None)?;
    let node = elbo_estimate(tape, q, &qb, model, &mb, samples, allocation, rng)?;
    Ok(tape.scalar(node).as_f64())
}

fn check_finite(iteration: usize, value: f64) -> Result<()> {
    // -inf is a legitimate value when a sample hits a zero-probability
    // configuration; its gradient goes through the log floor.
    if value.is_nan() || value == f64::INFINITY {
        return Err(Error::Divergent { iteration, value });
    }
    Ok(())
}

fn gather<T: Real>(tape: &mut Tape<T>, root: NodeId, nodes: &[NodeId]) -> Result<Vec<T>> {
    let grads = tape.backward(root)?;
    Ok(nodes.iter().flat_map(|&n| grads.wrt(n).iter().copied()).collect())
}

/// New component following `cfg.base` with N(0, 1) logits.
fn new_component<T: Real>(cardinalities: &[usize], cfg: &FitConfig, rng: &mut SeededRng) -> Result<Vec<ComponentDim<T>>> {
    let mut m = build_mixture(cardinalities, 1, cfg, rng)?;
    m.randomize(rng);
    Ok(m.component(0).to_vec())
}

fn build_mixture<T: Real>(cardinalities: &[usize], b: usize, cfg: &FitConfig, rng: &mut SeededRng) -> Result<FlowMixture<T>> {
    FlowMixture::with_bases(cardinalities, b, cfg.layers, cfg.layout, |_, _, k| match cfg.base {
        BaseKind::Delta => Ok(Base::Delta(DeltaBase::new(0, k)?)),
        BaseKind::Dirichlet { alpha } => {
            let p = sample_dirichlet_base(alpha, k, rng)?;
            let probs: Vec<T> = p.probs().iter().map(|&x| T::lit(x)).collect();
            Ok(Base::Categorical(renormalised(probs)?))
        }
    })
}

fn renormalised<T: Real>(mut probs: Vec<T>) -> Result<CategoricalParams<T>> {
    let total: T = probs.iter().copied().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    CategoricalParams::new(probs)
}

/// Randomly initialised mixture for `cfg`: bases first, then logits.
pub fn initial_mixture<T: Real>(cardinalities: &[usize], cfg: &FitConfig, rng: &mut SeededRng) -> Result<FlowMixture<T>> {
    let mut m = build_mixture(cardinalities, cfg.components, cfg, rng)?;
    m.randomize(rng);
    Ok(m)
}

struct Recorder<T> {
    records: Vec<IterationRecord>,
    snapshots: Vec<Snapshot<T>>,
    clipped: usize,
    start: Instant,
    every: usize,
}

impl<T: Real> Recorder<T> {
    fn new(every: usize) -> Self {
        Self {
            records: Vec::new(),
            snapshots: Vec::new(),
            clipped: 0,
            start: Instant::now(),
            every,
        }
    }

    fn next_iteration(&self) -> usize {
        self.records.len()
    }

    fn snapshot_due(&self) -> bool {
        self.next_iteration().is_multiple_of(self.every)
    }

    fn snapshot(&mut self, state: Variational<T>) {
        let iteration = self.next_iteration();
        self.snapshots.push(Snapshot { iteration, state });
    }

    fn record(&mut self, objective: f64, tau: f64) -> Result<()> {
        let iteration = self.next_iteration();
        check_finite(iteration, objective)?;
        self.records.push(IterationRecord {
            iteration,
            objective,
            tau,
            wallclock_ms: self.start.elapsed().as_secs_f64() * 1e3,
        });
        Ok(())
    }

    fn finish(self, algorithm: Algorithm, final_state: Variational<T>) -> FitReport<T> {
        FitReport {
            algorithm,
            records: self.records,
            snapshots: self.snapshots,
            final_state,
            clipped_gradients: self.clipped,
            diagnostics: Diagnostics::default(),
        }
    }
}

/// Dispatches on `cfg.algorithm`. The RNG is seeded from `cfg.seed`.
pub fn fit<T: Real, M: TracedModel<T> + ?Sized>(model: &M, cfg: &FitConfig) -> Result<FitReport<T>> {
    let mut rng = SeededRng::new(cfg.seed);
    match cfg.algorithm {
        Algorithm::Vif => fit_vif(model, cfg, &mut rng),
        Algorithm::Bvif => fit_bvif(model, cfg, &mut rng),
        Algorithm::Bvi => fit_bvi(model, cfg, &mut rng),
        Algorithm::Gs | Algorithm::StGs => fit_gs(model, cfg, &mut rng),
    }
}

fn expect_algorithm(cfg: &FitConfig, allowed: &[Algorithm]) -> Result<()> {
    cfg.validate()?;
    if !allowed.contains(&cfg.algorithm) {
        return Err(Error::InvalidInput(format!("configuration is for {}, not {}", cfg.algorithm, allowed[0])));
    }
    Ok(())
}

/// Joint gradient ascent on all components with uniform fixed weights.
pub fn fit_vif<T: Real, M: TracedModel<T> + ?Sized>(model: &M, cfg: &FitConfig, rng: &mut SeededRng) -> Result<FitReport<T>> {
    expect_algorithm(cfg, &[Algorithm::Vif])?;
    let q = initial_mixture(model.cardinalities(), cfg, rng)?;
    fit_vif_from(model, cfg, q, rng)
}

/// [`fit_vif`] starting from a given mixture (weights are kept as they are).
pub fn fit_vif_from<T: Real, M: TracedModel<T> + ?Sized>(
    model: &M,
    cfg: &FitConfig,
    mut q: FlowMixture<T>,
    rng: &mut SeededRng,
) -> Result<FitReport<T>> {
    cfg.validate()?;
    if q.cardinalities() != model.cardinalities() {
        return Err(Error::InvalidInput("mixture and model disagree on the latent space".into()));
    }
    let mut rec = Recorder::new(cfg.snapshot_every);
    let mut tape = Tape::new();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, q.param_count());
    for i in 0..cfg.iterations {
        let tau = anneal::<T>(&cfg.schedule, cfg.time_offset + i);
        if rec.snapshot_due() {
            rec.snapshot(Variational::Mixture(q.clone()));
        }
        tape.clear();
        let mb = model.bind(&mut tape);
        let qb = q.bind(&mut tape, tau, None)?;
        let obj = elbo_estimate(&mut tape, &q, &qb, model, &mb, cfg.samples, cfg.allocation, rng)?;
        rec.record(tape.scalar(obj).as_f64(), tau.value().as_f64())?;
        let mut g = gather(&mut tape, obj, qb.params())?;
        rec.clipped += sanitize_gradient(&mut g);
        let mut p = q.parameters();
        opt.ascend(&mut p, &g);
        q.set_parameters(&p)?;
    }
    Ok(rec.finish(cfg.algorithm, Variational::Mixture(q)))
}

/// Sequential boosting: stage `b` adds a component with weight
/// `ρ = sigmoid(η)`, scales the earlier weights by `1 - ρ` and trains the new
/// flow and `η` with earlier components frozen. Stage 1 is plain VIF with one
/// component. `t` and the optimiser restart at every stage.
pub fn fit_bvif<T: Real, M: TracedModel<T> + ?Sized>(model: &M, cfg: &FitConfig, rng: &mut SeededRng) -> Result<FitReport<T>> {
    expect_algorithm(cfg, &[Algorithm::Bvif])?;
    boost(model, cfg, rng, true)
}

/// Boosting over weights only: components are fixed deltas and each stage
/// trains only its weight. Stage 1 has nothing to train and contributes a
/// single record with the first delta's ELBO.
pub fn fit_bvi<T: Real, M: TracedModel<T> + ?Sized>(model: &M, cfg: &FitConfig, rng: &mut SeededRng) -> Result<FitReport<T>> {
    expect_algorithm(cfg, &[Algorithm::Bvi])?;
    boost(model, cfg, rng, false)
}

fn delta_component<T: Real>(cardinalities: &[usize], atom: &[usize]) -> Result<Vec<ComponentDim<T>>> {
    if atom.len() != cardinalities.len() || atom.iter().zip(cardinalities).any(|(&a, &k)| a >= k) {
        return Err(Error::InvalidInput(format!("atom {atom:?} is not a configuration")));
    }
    let mut m = FlowMixture::<T>::shift_mixture(cardinalities, 1, 1, MixtureLayout::Joint)?;
    for (cd, &a) in m.component_mut(0).iter_mut().zip(atom) {
        cd.flow.layers_mut()[0].set_shift(a);
    }
    Ok(m.component(0).to_vec())
}

fn boost<T: Real, M: TracedModel<T> + ?Sized>(model: &M, cfg: &FitConfig, rng: &mut SeededRng, train_flows: bool) -> Result<FitReport<T>> {
    let cards = model.cardinalities().to_vec();
    let delta_cfg = FitConfig {
        base: BaseKind::Delta,
        ..cfg.clone()
    };
    let component = |b: usize, rng: &mut SeededRng| -> Result<Vec<ComponentDim<T>>> {
        if train_flows {
            new_component(&cards, cfg, rng)
        } else if let Some(atoms) = &cfg.atoms {
            delta_component(&cards, &atoms[b])
        } else {
            new_component(&cards, &delta_cfg, rng)
        }
    };

    let mut rec = Recorder::new(cfg.snapshot_every);
    let mut tape = Tape::new();
    let first = component(0, rng)?;
    let mut q = FlowMixture::new(cards.clone(), cfg.layout, vec![T::one()], vec![first])?;

    if train_flows {
        let stage_cfg = FitConfig {
            algorithm: Algorithm::Vif,
            components: 1,
            ..cfg.clone()
        };
        let stage = fit_vif_from(model, &stage_cfg, q, rng)?;
        rec.records = stage.records;
        rec.snapshots = stage.snapshots;
        rec.clipped = stage.clipped_gradients;
        q = match stage.final_state {
            Variational::Mixture(m) => m,
            Variational::Logits(_) => unreachable!("VIF returns a mixture"),
        };
    } else {
        if rec.snapshot_due() {
            rec.snapshot(Variational::Mixture(q.clone()));
        }
        let value = elbo_value_on(&mut tape, &q, model, cfg.samples, cfg.allocation, rng)?;
        rec.record(value, cfg.schedule.tau_at(cfg.time_offset))?;
    }

    for b in 1..cfg.components {
        let comp = component(b, rng)?;
        let old_log_rho: Vec<T> = q.rho().iter().map(|r| r.ln()).collect();
        let old_rho: Vec<T> = q.rho().to_vec();
        let half = T::lit(0.5);
        let mut rho: Vec<T> = old_rho.iter().map(|&r| r * half).collect();
        rho.push(half);
        q.push_component(comp, &rho)?;
        let old: Vec<usize> = (0..b).collect();
        let mut eta = T::zero();
        let n_flow = if train_flows {
            q.component(b).iter().map(|cd| cd.flow.layers().iter().map(|l| l.param_count()).sum::<usize>()).sum()
        } else {
            0
        };
        let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, n_flow + 1);
        for i in 0..cfg.iterations {
            let tau = anneal::<T>(&cfg.schedule, cfg.time_offset + i);
            if rec.snapshot_due() {
                rec.snapshot(Variational::Mixture(q.clone()));
            }
            tape.clear();
            let mb = model.bind(&mut tape);
            let eta_node = tape.leaf(&[eta]);
            let neg = tape.scale(eta_node, -T::one());
            let log_new = tape.log_sigmoid(eta_node);
            let log_keep = tape.log_sigmoid(neg);
            let mut parts = Vec::with_capacity(b + 1);
            for &lr in &old_log_rho {
                let c = tape.constant(&[lr]);
                parts.push(tape.add(log_keep, c));
            }
            parts.push(log_new);
            let log_rho = tape.stack(&parts);
            let qb = q.bind(&mut tape, tau, Some(log_rho))?;

            let e_old = weighted_elbo_terms(&mut tape, &q, &qb, model, &mb, &old, &old_rho, cfg.samples, cfg.allocation, rng)?;
            let e_new = weighted_elbo_terms(&mut tape, &q, &qb, model, &mb, &[b], &[T::one()], cfg.samples, cfg.allocation, rng)?;
            let w_new = tape.sigmoid(eta_node);
            let w_keep = tape.sigmoid(neg);
            let a = tape.mul(w_keep, e_old);
            let c = tape.mul(w_new, e_new);
            let obj = tape.add(a, c);
            rec.record(tape.scalar(obj).as_f64(), tau.value().as_f64())?;

            let mut nodes: Vec<NodeId> = if train_flows {
                qb.params()[qb.component_params(b)].to_vec()
            } else {
                Vec::new()
            };
            nodes.push(eta_node);
            let mut g = gather(&mut tape, obj, &nodes)?;
            rec.clipped += sanitize_gradient(&mut g);
            let mut p: Vec<T> = if train_flows {
                component_parameters(&q, b)
            } else {
                Vec::new()
            };
            p.push(eta);
            opt.ascend(&mut p, &g);
            eta = p.pop().expect("eta is last");
            if train_flows {
                set_component_parameters(&mut q, b, &p)?;
            }
            let r = sigmoid_f(eta);
            let mut rho: Vec<T> = old_rho.iter().map(|&o| o * (T::one() - r)).collect();
            rho.push(r);
            normalise_in_place(&mut rho);
            q.set_rho(&rho)?;
        }
    }
    Ok(rec.finish(cfg.algorithm, Variational::Mixture(q)))
}

fn sigmoid_f<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn normalise_in_place<T: Real>(v: &mut [T]) {
    let total: T = v.iter().copied().sum();
    v.iter_mut().for_each(|x| *x /= total);
}

fn component_parameters<T: Real>(q: &FlowMixture<T>, b: usize) -> Vec<T> {
    q.component(b)
        .iter()
        .flat_map(|cd| cd.flow.layers().iter())
        .flat_map(|l| l.shift_logits().iter().chain(l.scale_logits()))
        .copied()
        .collect()
}

fn set_component_parameters<T: Real>(q: &mut FlowMixture<T>, b: usize, values: &[T]) -> Result<()> {
    let mut at = 0;
    for cd in q.component_mut(b) {
        for l in cd.flow.layers_mut() {
            let ns = l.shift_logits().len();
            l.set_shift_logits(&values[at..at + ns])?;
            at += ns;
            let nc = l.scale_logits().len();
            if nc > 0 {
                l.set_scale_logits(&values[at..at + nc])?;
                at += nc;
            }
        }
    }
    if at != values.len() {
        return Err(Error::Internal("component parameter count mismatch".into()));
    }
    Ok(())
}

/// Gumbel-Softmax baselines over per-dimension logits initialised N(0, 1).
///
/// `gs` maximises `ln p_τp(D, y) - Σ_d ln GS(y_d; softmax(λ_d), τ)` at relaxed
/// samples `y`, with the prior relaxed at temperature `tau_p`. `st-gs` feeds
/// straight-through one-hots into the discrete log-joint and adds the exact
/// entropy `Σ_d H(softmax(λ_d))`.
pub fn fit_gs<T: Real, M: TracedModel<T> + ?Sized>(model: &M, cfg: &FitConfig, rng: &mut SeededRng) -> Result<FitReport<T>> {
    expect_algorithm(cfg, &[Algorithm::Gs, Algorithm::StGs])?;
    let logits: Vec<Vec<T>> = model
        .cardinalities()
        .iter()
        .map(|&k| (0..k).map(|_| T::lit(rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng))).collect())
        .collect();
    fit_gs_from(model, cfg, logits, rng)
}

pub fn fit_gs_from<T: Real, M: TracedModel<T> + ?Sized>(
    model: &M,
    cfg: &FitConfig,
    mut logits: Vec<Vec<T>>,
    rng: &mut SeededRng,
) -> Result<FitReport<T>> {
    expect_algorithm(cfg, &[Algorithm::Gs, Algorithm::StGs])?;
    if logits.iter().map(Vec::len).ne(model.cardinalities().iter().copied()) {
        return Err(Error::InvalidInput("logits do not match the latent space".into()));
    }
    let straight = cfg.algorithm == Algorithm::StGs;
    let tau_p = T::lit(cfg.tau_p);
    let unit = Temperature::new(T::one())?;
    let mut rec = Recorder::new(cfg.snapshot_every);
    let mut tape = Tape::new();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, logits.iter().map(Vec::len).sum());
    for i in 0..cfg.iterations {
        let tau = anneal::<T>(&cfg.schedule, cfg.time_offset + i);
        if rec.snapshot_due() {
            rec.snapshot(Variational::Logits(logits.clone()));
        }
        tape.clear();
        let mb = model.bind(&mut tape);
        let lam: Vec<NodeId> = logits.iter().map(|l| tape.leaf(l)).collect();
        let probs: Vec<NodeId> = lam.iter().map(|&l| tape.softmax_temp(l, unit)).collect::<Result<_>>()?;
        let mut terms = Vec::with_capacity(cfg.samples);
        for _ in 0..cfg.samples {
            let mut ys = Vec::with_capacity(lam.len());
            for (&l, lv) in lam.iter().zip(&logits) {
                let g: Vec<T> = (0..lv.len()).map(|_| T::lit(gumbel_from_uniform(rng.uniform()))).collect();
                let gn = tape.constant(&g);
                let z = tape.add(l, gn);
                let y = tape.softmax_temp(z, tau)?;
                ys.push(if straight { tape.straight_through(y) } else { y });
            }
            let term = if straight {
                model.trace_log_joint(&mut tape, &mb, &ys)
            } else {
                let lp = model.trace_relaxed_log_joint(&mut tape, &mb, &ys, tau_p);
                let lq: Vec<NodeId> = ys
                    .iter()
                    .zip(&probs)
                    .map(|(&y, &p)| tape.gs_log_density(y, p, tau.value()))
                    .collect();
                let lq = tape.sum_scalars(&lq);
                tape.sub(lp, lq)
            };
            terms.push(term);
        }
        let mut obj = tape.mean_scalars(&terms);
        if straight {
            let h: Vec<NodeId> = probs.iter().map(|&p| tape.entropy(p)).collect();
            let h = tape.sum_scalars(&h);
            obj = tape.add(obj, h);
        }
        rec.record(tape.scalar(obj).as_f64(), tau.value().as_f64())?;
        let mut g = gather(&mut tape, obj, &lam)?;
        rec.clipped += sanitize_gradient(&mut g);
        let mut p: Vec<T> = logits.iter().flatten().copied().collect();
        opt.ascend(&mut p, &g);
        let mut at = 0;
        for l in &mut logits {
            let n = l.len();
            l.copy_from_slice(&p[at..at + n]);
            at += n;
        }
    }
    Ok(rec.finish(cfg.algorithm, Variational::Logits(logits)))
}
