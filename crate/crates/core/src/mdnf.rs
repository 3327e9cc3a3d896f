//! Mixtures of discrete normalizing flows.
//!
//! Component `b` pushes a factorised base distribution through one flow stack
//! per dimension; the mixture weights are `rho`. With [`MixtureLayout::Joint`]
//! one component index is drawn per sample and shared by every dimension. With
//! [`MixtureLayout::PerDimension`] each dimension is an independent
//! one-dimensional mixture, which is what a factorised posterior over many
//! allocation variables needs.
//!
//! Log-probabilities are evaluated through the pushforward vectors
//! `r_bd = f_bd(p_u)`. Because every flow is multilinear in its one-hot
//! arguments, `<inv f(x), p_u> = <x, f(p_u)>` holds as an identity of
//! multilinear functions, so this path has the same values and gradients as
//! inverting each sample ([`FlowMixture::log_prob_by_inversion`]) while
//! sharing the flow evaluations across the whole batch.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use crate::diffcore::{logsumexp, MixtureLayout, NodeId, Tape, Temperature};
use crate::dists::{sample_categorical, CategoricalParams, DeltaBase, SeededRng};
use crate::error::{Error, Result};
use crate::flows::{DiscreteFlow, FlowKind, FlowLeaves, FlowStack, MaterializedFlow};
use crate::scalar::Real;
use crate::space::ConfigSpace;

/// Base distribution of one component in one dimension.
#[derive(Clone, Debug, PartialEq)]
pub enum Base<T> {
    Delta(DeltaBase),
    Categorical(CategoricalParams<T>),
}

impl<T: Real> Base<T> {
    pub fn cardinality(&self) -> usize {
        match self {
            Base::Delta(d) => d.cardinality(),
            Base::Categorical(c) => c.cardinality(),
        }
    }

    pub fn probs(&self) -> Vec<T> {
        match self {
            Base::Delta(d) => {
                let mut v = vec![T::zero(); d.cardinality()];
                v[d.atom()] = T::one();
                v
            }
            Base::Categorical(c) => c.probs().to_vec(),
        }
    }

    pub fn prob(&self, u: usize) -> f64 {
        match self {
            Base::Delta(d) => f64::from(u8::from(d.atom() == u)),
            Base::Categorical(c) => c.probs()[u].as_f64(),
        }
    }

    pub fn sample(&self, rng: &mut SeededRng) -> usize {
        match self {
            Base::Delta(d) => d.atom(),
            Base::Categorical(c) => sample_categorical(c.probs(), rng),
        }
    }

    pub fn is_delta(&self) -> bool {
        matches!(self, Base::Delta(_))
    }
}

/// Flow stack and base distribution of one component in one dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentDim<T> {
    pub flow: FlowStack<T>,
    pub base: Base<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowMixture<T> {
    cardinalities: Vec<usize>,
    layout: MixtureLayout,
    rho: Vec<T>,
    components: Vec<Vec<ComponentDim<T>>>,
}

/// Tape handles for one traced step of a mixture.
#[derive(Clone, Debug)]
pub struct MixtureBinding {
    leaves: Vec<Vec<Vec<FlowLeaves>>>,
    mats: Vec<Vec<Vec<MaterializedFlow>>>,
    pushforward: Vec<NodeId>,
    log_rho: NodeId,
    params: Vec<NodeId>,
    component_params: Vec<Range<usize>>,
    dims: usize,
}

impl MixtureBinding {
    /// Parameter leaves, in the order of [`FlowMixture::parameters`].
    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    /// Range of [`Self::params`] belonging to component `b`.
    pub fn component_params(&self, b: usize) -> Range<usize> {
        self.component_params[b].clone()
    }

    /// Pushforward of component `b`'s base in dimension `d`.
    pub fn pushforward(&self, b: usize, d: usize) -> NodeId {
        self.pushforward[b * self.dims + d]
    }

    pub fn log_rho(&self) -> NodeId {
        self.log_rho
    }

    pub fn leaves(&self, b: usize, d: usize) -> &[FlowLeaves] {
        &self.leaves[b][d]
    }
}

/// Per-sample component assignments for masked batch sampling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    components: usize,
    assign: Vec<Vec<usize>>,
}

impl MaskSet {
    /// `assign[i][d]` is the active component of sample `i` in dimension `d`.
    pub fn new(components: usize, assign: Vec<Vec<usize>>) -> Result<Self> {
        if assign.iter().flatten().any(|&b| b >= components) {
            return Err(Error::InvalidInput("mask assigns a non-existent component".into()));
        }
        Ok(Self { components, assign })
    }

    /// Draws assignments from `rho` following the mixture layout.
    pub fn sample<T: Real>(m: &FlowMixture<T>, n: usize, rng: &mut SeededRng) -> Self {
        let d = m.dims();
        let assign = (0..n)
            .map(|_| match m.layout {
                MixtureLayout::Joint => vec![sample_categorical(&m.rho, rng); d],
                MixtureLayout::PerDimension => (0..d).map(|_| sample_categorical(&m.rho, rng)).collect(),
            })
            .collect();
        Self {
            components: m.components(),
            assign,
        }
    }

    /// Every sample assigned to component `b`.
    pub fn all_to(b: usize, components: usize, n: usize, dims: usize) -> Result<Self> {
        Self::new(components, vec![vec![b; dims]; n])
    }

    pub fn len(&self) -> usize {
        self.assign.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assign.is_empty()
    }

    pub fn assignment(&self, i: usize) -> &[usize] {
        &self.assign[i]
    }
}

impl<T: Real> FlowMixture<T> {
    pub fn new(
        cardinalities: Vec<usize>,
        layout: MixtureLayout,
        rho: Vec<T>,
        components: Vec<Vec<ComponentDim<T>>>,
    ) -> Result<Self> {
        if components.is_empty() || rho.len() != components.len() {
            return Err(Error::InvalidInput(format!(
                "mixture needs one weight per component ({} weights, {} components)",
                rho.len(),
                components.len()
            )));
        }
        ConfigSpace::new(cardinalities.clone())?;
        for (b, comp) in components.iter().enumerate() {
            if comp.len() != cardinalities.len() {
                return Err(Error::InvalidInput(format!("component {b} has the wrong number of dimensions")));
            }
            for (d, cd) in comp.iter().enumerate() {
                let k = cardinalities[d];
                if cd.flow.cardinality() != k || cd.base.cardinality() != k {
                    return Err(Error::InvalidInput(format!(
                        "component {b}, dimension {d}: cardinality differs from {k}"
                    )));
                }
            }
        }
        let mut m = Self {
            cardinalities,
            layout,
            rho: vec![T::zero(); components.len()],
            components,
        };
        m.set_rho(&rho)?;
        Ok(m)
    }

    /// `b` components with uniform weights, delta bases at category 0 and
    /// `layers` shift-only flows per dimension. Logits start at zero.
    pub fn shift_mixture(cardinalities: &[usize], b: usize, layers: usize, layout: MixtureLayout) -> Result<Self> {
        Self::with_bases(cardinalities, b, layers, layout, |_, _, k| {
            Ok(Base::Delta(DeltaBase::new(0, k)?))
        })
    }

    /// Like [`Self::shift_mixture`] with bases chosen by `base(b, d, K_d)`.
    pub fn with_bases<F>(cardinalities: &[usize], b: usize, layers: usize, layout: MixtureLayout, mut base: F) -> Result<Self>
    where
        F: FnMut(usize, usize, usize) -> Result<Base<T>>,
    {
        if b == 0 {
            return Err(Error::InvalidInput("a mixture needs at least one component".into()));
        }
        let mut components = Vec::with_capacity(b);
        for bi in 0..b {
            let mut dims = Vec::with_capacity(cardinalities.len());
            for (d, &k) in cardinalities.iter().enumerate() {
                dims.push(ComponentDim {
                    flow: FlowStack::shifts(k, layers)?,
                    base: base(bi, d, k)?,
                });
            }
            components.push(dims);
        }
        let rho = vec![T::one() / T::lit(b as f64); b];
        Self::new(cardinalities.to_vec(), layout, rho, components)
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cardinalities
    }

    pub fn dims(&self) -> usize {
        self.cardinalities.len()
    }

    /// Number of components `B`.
    pub fn components(&self) -> usize {
        self.components.len()
    }

    pub fn layout(&self) -> MixtureLayout {
        self.layout
    }

    pub fn rho(&self) -> &[T] {
        &self.rho
    }

    pub fn set_rho(&mut self, rho: &[T]) -> Result<()> {
        if rho.len() != self.components.len() {
            return Err(Error::InvalidInput("rho length differs from component count".into()));
        }
        if rho.iter().any(|r| !r.is_finite() || *r < T::zero()) {
            return Err(Error::InvalidInput("mixture weights must be finite and non-negative".into()));
        }
        let total: T = rho.iter().copied().sum();
        if (total - T::one()).abs().as_f64() > T::sum_tolerance(rho.len()) {
            return Err(Error::InvalidInput(format!("mixture weights sum to {total}, not 1")));
        }
        self.rho.copy_from_slice(rho);
        Ok(())
    }

    pub fn component(&self, b: usize) -> &[ComponentDim<T>] {
        &self.components[b]
    }

    pub fn component_mut(&mut self, b: usize) -> &mut [ComponentDim<T>] {
        &mut self.components[b]
    }

    /// Appends a component and its weight, renormalising nothing: the caller
    /// passes the full new weight vector.
    pub fn push_component(&mut self, dims: Vec<ComponentDim<T>>, rho: &[T]) -> Result<()> {
        if dims.len() != self.dims() {
            return Err(Error::InvalidInput("component has the wrong number of dimensions".into()));
        }
        self.components.push(dims);
        self.rho.push(T::zero());
        if let Err(e) = self.set_rho(rho) {
            self.components.pop();
            self.rho.pop();
            return Err(e);
        }
        Ok(())
    }

    pub fn randomize(&mut self, rng: &mut SeededRng) {
        for comp in &mut self.components {
            for cd in comp {
                cd.flow.randomize(rng);
            }
        }
    }

    /// Flattened trainable logits, component-major.
    pub fn parameters(&self) -> Vec<T> {
        self.components
            .iter()
            .flatten()
            .flat_map(|cd| cd.flow.params())
            .flatten()
            .copied()
            .collect()
    }

    pub fn set_parameters(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::InvalidInput("parameter vector has the wrong length".into()));
        }
        let mut at = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.copy_from_slice(&values[at..at + n]);
            at += n;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.components
            .iter()
            .flatten()
            .flat_map(|cd| cd.flow.params())
            .map(|p| p.len())
            .sum()
    }

    /// Mutable parameter vectors in the order of [`MixtureBinding::params`].
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Vec<T>> {
        self.components
            .iter_mut()
            .flatten()
            .flat_map(|cd| cd.flow.params_mut())
    }

    /// Records all parameters on the tape and materialises the flows at
    /// temperature `tau`. `log_rho` overrides the stored weights with a traced
    /// vector of log-weights.
    pub fn bind(&self, tape: &mut Tape<T>, tau: Temperature<T>, log_rho: Option<NodeId>) -> Result<MixtureBinding> {
        let d = self.dims();
        let mut leaves = Vec::with_capacity(self.components());
        let mut mats = Vec::with_capacity(self.components());
        let mut pushforward = Vec::with_capacity(self.components() * d);
        let mut params = Vec::new();
        let mut component_params = Vec::with_capacity(self.components());
        for comp in &self.components {
            let start = params.len();
            let mut comp_leaves = Vec::with_capacity(d);
            let mut comp_mats = Vec::with_capacity(d);
            for cd in comp {
                let lv = cd.flow.bind(tape);
                for l in &lv {
                    params.push(l.shift);
                    params.extend(l.scale);
                }
                let mt = cd.flow.materialize(tape, &lv, tau)?;
                let base = tape.constant(&cd.base.probs());
                pushforward.push(cd.flow.pushforward(tape, &mt, base)?);
                comp_leaves.push(lv);
                comp_mats.push(mt);
            }
            component_params.push(start..params.len());
            leaves.push(comp_leaves);
            mats.push(comp_mats);
        }
        let log_rho = match log_rho {
            Some(node) => {
                if tape.value(node).len() != self.components() {
                    return Err(Error::InvalidInput("log_rho length differs from component count".into()));
                }
                node
            }
            None => {
                let lr: Vec<T> = self.rho.iter().map(|r| r.ln()).collect();
                tape.constant(&lr)
            }
        };
        Ok(MixtureBinding {
            leaves,
            mats,
            pushforward,
            log_rho,
            params,
            component_params,
            dims: d,
        })
    }

    /// Traced sample through component `b` in dimension `d`.
    fn component_sample(&self, tape: &mut Tape<T>, bind: &MixtureBinding, b: usize, d: usize, rng: &mut SeededRng) -> Result<NodeId> {
        let cd = &self.components[b][d];
        match cd.base {
            // forward of the atom's one-hot is exactly the pushforward node
            Base::Delta(_) => Ok(bind.pushforward(b, d)),
            Base::Categorical(_) => {
                let u = cd.base.sample(rng);
                let uv = tape.one_hot(u, self.cardinalities[d]);
                cd.flow.forward(tape, &bind.mats[b][d], uv)
            }
        }
    }

    /// Three-stage traced sample: component, base draw, flow.
    /// Returns one one-hot node per dimension.
    pub fn sample_forward(&self, tape: &mut Tape<T>, bind: &MixtureBinding, rng: &mut SeededRng) -> Result<Vec<NodeId>> {
        let d = self.dims();
        let mut out = Vec::with_capacity(d);
        match self.layout {
            MixtureLayout::Joint => {
                let b = sample_categorical(&self.rho, rng);
                for di in 0..d {
                    out.push(self.component_sample(tape, bind, b, di, rng)?);
                }
            }
            MixtureLayout::PerDimension => {
                for di in 0..d {
                    let b = sample_categorical(&self.rho, rng);
                    out.push(self.component_sample(tape, bind, b, di, rng)?);
                }
            }
        }
        Ok(out)
    }

    /// Traced sample with dimension `d` drawn from component `assign[d]`.
    pub fn sample_assigned(&self, tape: &mut Tape<T>, bind: &MixtureBinding, assign: &[usize], rng: &mut SeededRng) -> Result<Vec<NodeId>> {
        if assign.len() != self.dims() || assign.iter().any(|&b| b >= self.components()) {
            return Err(Error::InvalidInput("component assignment does not fit the mixture".into()));
        }
        assign
            .iter()
            .enumerate()
            .map(|(d, &b)| self.component_sample(tape, bind, b, d, rng))
            .collect()
    }

    /// Batch sample in one trace: every component transforms its own base
    /// draw, and the outputs are combined with 0/1 masks.
    pub fn sample_batch_masked(
        &self,
        tape: &mut Tape<T>,
        bind: &MixtureBinding,
        masks: &MaskSet,
        rng: &mut SeededRng,
    ) -> Result<Vec<Vec<NodeId>>> {
        if masks.components != self.components() {
            return Err(Error::InvalidInput("mask set built for a different component count".into()));
        }
        let d = self.dims();
        let mut batch = Vec::with_capacity(masks.len());
        for i in 0..masks.len() {
            let assign = masks.assignment(i);
            if assign.len() != d {
                return Err(Error::InvalidInput("mask has the wrong number of dimensions".into()));
            }
            let mut sample = Vec::with_capacity(d);
            for (di, &active) in assign.iter().enumerate() {
                let mut acc: Option<NodeId> = None;
                for b in 0..self.components() {
                    let y = self.component_sample(tape, bind, b, di, rng)?;
                    let mask = if b == active { T::one() } else { T::zero() };
                    let masked = tape.scale(y, mask);
                    acc = Some(match acc {
                        None => masked,
                        Some(a) => tape.add(a, masked),
                    });
                }
                sample.push(acc.expect("at least one component"));
            }
            batch.push(sample);
        }
        Ok(batch)
    }

    /// One sample per component, in component order.
    pub fn sample_deterministic(&self, tape: &mut Tape<T>, bind: &MixtureBinding, rng: &mut SeededRng) -> Result<Vec<Vec<NodeId>>> {
        (0..self.components())
            .map(|b| {
                (0..self.dims())
                    .map(|d| self.component_sample(tape, bind, b, d, rng))
                    .collect()
            })
            .collect()
    }

    /// Traced `ln q(x)`; `xs` holds one (near) one-hot node per dimension.
    pub fn log_prob(&self, tape: &mut Tape<T>, bind: &MixtureBinding, xs: &[NodeId]) -> NodeId {
        tape.mixture_log_prob(xs, &bind.pushforward, bind.log_rho, self.layout)
    }

    /// Traced `ln q(x)` by literally inverting `x` through every component.
    pub fn log_prob_by_inversion(&self, tape: &mut Tape<T>, bind: &MixtureBinding, xs: &[NodeId]) -> Result<NodeId> {
        let d = self.dims();
        let nb = self.components();
        let mut terms = vec![Vec::with_capacity(d); nb];
        for b in 0..nb {
            for (di, &x) in xs.iter().enumerate() {
                let cd = &self.components[b][di];
                let u = cd.flow.pullback(tape, &bind.mats[b][di], x)?;
                let base = tape.constant(&cd.base.probs());
                terms[b].push(tape.log_dot(u, base));
            }
        }
        let log_rho: Vec<NodeId> = (0..nb).map(|b| tape.select(bind.log_rho, &[b])).collect();
        match self.layout {
            MixtureLayout::Joint => {
                let per: Vec<NodeId> = (0..nb)
                    .map(|b| {
                        let mut items = terms[b].clone();
                        items.push(log_rho[b]);
                        tape.sum_scalars(&items)
                    })
                    .collect();
                let stacked = tape.stack(&per);
                Ok(tape.logsumexp(stacked))
            }
            MixtureLayout::PerDimension => {
                let per_dim: Vec<NodeId> = (0..d)
                    .map(|di| {
                        let per: Vec<NodeId> = (0..nb)
                            .map(|b| tape.sum_scalars(&[terms[b][di], log_rho[b]]))
                            .collect();
                        let stacked = tape.stack(&per);
                        tape.logsumexp(stacked)
                    })
                    .collect();
                Ok(tape.sum_scalars(&per_dim))
            }
        }
    }

    /// Pushforward probabilities of component `b` in dimension `d`.
    pub fn pushforward_probs(&self, b: usize, d: usize) -> Vec<f64> {
        let cd = &self.components[b][d];
        let k = self.cardinalities[d];
        let mut out = vec![0.0; k];
        for u in 0..k {
            out[cd.flow.forward_index(u)] += cd.base.prob(u);
        }
        out
    }

    /// Untraced `ln q(x)` for category indices.
    pub fn log_prob_exact(&self, x: &[usize]) -> f64 {
        let nb = self.components();
        let term = |b: usize, d: usize| {
            let cd = &self.components[b][d];
            cd.base.prob(cd.flow.inverse_index(x[d])).ln()
        };
        match self.layout {
            MixtureLayout::Joint => {
                let per: Vec<f64> = (0..nb)
                    .map(|b| self.rho[b].as_f64().ln() + (0..self.dims()).map(|d| term(b, d)).sum::<f64>())
                    .collect();
                logsumexp(&per)
            }
            MixtureLayout::PerDimension => (0..self.dims())
                .map(|d| {
                    let per: Vec<f64> = (0..nb).map(|b| self.rho[b].as_f64().ln() + term(b, d)).collect();
                    logsumexp(&per)
                })
                .sum(),
        }
    }

    /// Untraced sample of category indices.
    pub fn sample_indices(&self, rng: &mut SeededRng) -> Vec<usize> {
        let mut b = sample_categorical(&self.rho, rng);
        (0..self.dims())
            .map(|d| {
                if self.layout == MixtureLayout::PerDimension {
                    b = sample_categorical(&self.rho, rng);
                }
                let cd = &self.components[b][d];
                cd.flow.forward_index(cd.base.sample(rng))
            })
            .collect()
    }

    /// `q(x)` for every configuration, last dimension fastest.
    pub fn prob_table(&self, cap: u128) -> Result<Vec<f64>> {
        let space = ConfigSpace::new(self.cardinalities.clone())?;
        let n = space.size_within(cap)?;
        let nb = self.components();
        let d = self.dims();
        let push: Vec<Vec<f64>> = (0..nb)
            .flat_map(|b| (0..d).map(move |di| (b, di)))
            .map(|(b, di)| self.pushforward_probs(b, di))
            .collect();
        let rho: Vec<f64> = self.rho.iter().map(|r| r.as_f64()).collect();
        let mut x = vec![0; d];
        let mut table = Vec::with_capacity(n);
        for i in 0..n {
            space.decode_into(i, &mut x);
            let p = match self.layout {
                MixtureLayout::Joint => (0..nb)
                    .map(|b| rho[b] * (0..d).map(|di| push[b * d + di][x[di]]).product::<f64>())
                    .sum(),
                MixtureLayout::PerDimension => (0..d)
                    .map(|di| (0..nb).map(|b| rho[b] * push[b * d + di][x[di]]).sum::<f64>())
                    .product(),
            };
            table.push(p);
        }
        Ok(table)
    }

    /// Per-dimension marginals `q_d`.
    pub fn marginals(&self) -> Vec<Vec<f64>> {
        (0..self.dims())
            .map(|d| {
                let mut m = vec![0.0; self.cardinalities[d]];
                for b in 0..self.components() {
                    let r = self.rho[b].as_f64();
                    for (mk, p) in m.iter_mut().zip(self.pushforward_probs(b, d)) {
                        *mk += r * p;
                    }
                }
                m
            })
            .collect()
    }
}

/// Number of flows per category so that `counts[x] / B` is within `1/B` of
/// `p[x]`: the floor of `p[x] * B`, then one leftover flow each to the
/// categories with the largest residuals (ties to the lower index).
pub fn allocate_counts(p: &[f64], b: usize) -> Vec<usize> {
    let bf = b as f64;
    let mut counts: Vec<usize> = p.iter().map(|&v| (v * bf).floor().max(0.0) as usize).collect();
    let used: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    let residual = |i: usize| p[i] * bf - (p[i] * bf).floor();
    order.sort_by(|&i, &j| residual(j).total_cmp(&residual(i)).then(i.cmp(&j)));
    for &i in order.iter().take(b.saturating_sub(used)) {
        counts[i] += 1;
    }
    // rounding in p * B can leave a few flows over; hand them out by residual again
    let mut extra = b.saturating_sub(counts.iter().sum());
    for &i in order.iter().cycle() {
        if extra == 0 {
            break;
        }
        counts[i] += 1;
        extra -= 1;
    }
    counts
}

fn delta_component<T: Real>(config: &[usize], cardinalities: &[usize]) -> Result<Vec<ComponentDim<T>>> {
    config
        .iter()
        .zip(cardinalities)
        .map(|(&x, &k)| {
            let mut flow = FlowStack::shifts(k, 1)?;
            flow.layers_mut()[0].set_shift(x);
            Ok(ComponentDim {
                flow,
                base: Base::Delta(DeltaBase::new(0, k)?),
            })
        })
        .collect()
}

/// Uniform-weight, delta-base mixture of `b` components approximating the
/// univariate target `p` with absolute error at most `1/b` per category.
pub fn constructive_fit<T: Real>(p: &CategoricalParams<T>, b: usize) -> Result<FlowMixture<T>> {
    let probs: Vec<f64> = p.probs().iter().map(|v| v.as_f64()).collect();
    constructive_fit_table(&probs, &[p.cardinality()], b)
}

/// [`constructive_fit`] over a joint table (last dimension fastest).
pub fn constructive_fit_table<T: Real>(table: &[f64], cardinalities: &[usize], b: usize) -> Result<FlowMixture<T>> {
    if b == 0 {
        return Err(Error::InvalidInput("constructive fit needs B >= 1".into()));
    }
    let space = ConfigSpace::new(cardinalities.to_vec())?;
    if space.total() != table.len() as u128 {
        return Err(Error::InvalidInput("table size differs from the configuration space".into()));
    }
    let counts = allocate_counts(table, b);
    let mut components = Vec::with_capacity(b);
    for (i, &c) in counts.iter().enumerate() {
        let config = space.decode(i);
        for _ in 0..c {
            components.push(delta_component(&config, cardinalities)?);
        }
    }
    let rho = vec![T::one() / T::lit(b as f64); b];
    FlowMixture::new(cardinalities.to_vec(), MixtureLayout::Joint, rho, components)
}

/// One delta component per listed configuration with free weights.
pub fn weighted_atoms<T: Real>(cardinalities: &[usize], configs: &[Vec<usize>], weights: &[T]) -> Result<FlowMixture<T>> {
    let space = ConfigSpace::new(cardinalities.to_vec())?;
    let components = configs
        .iter()
        .map(|c| {
            space.validate(c)?;
            delta_component(c, cardinalities)
        })
        .collect::<Result<Vec<_>>>()?;
    FlowMixture::new(cardinalities.to_vec(), MixtureLayout::Joint, weights.to_vec(), components)
}

const FORMAT_HEADER: &str = "mdnf 1";

impl<T: Real> FlowMixture<T> {
    /// Line-oriented text form; see the crate README for the field order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let join = |v: &[T]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "{FORMAT_HEADER}");
        let layout = match self.layout {
            MixtureLayout::Joint => "joint",
            MixtureLayout::PerDimension => "per-dimension",
        };
        let _ = writeln!(s, "layout {layout}");
        let cards: Vec<String> = self.cardinalities.iter().map(|k| k.to_string()).collect();
        let _ = writeln!(s, "cardinalities {}", cards.join(" "));
        let _ = writeln!(s, "components {}", self.components());
        let _ = writeln!(s, "rho {}", join(&self.rho));
        for (b, comp) in self.components.iter().enumerate() {
            let _ = writeln!(s, "component {b}");
            for (d, cd) in comp.iter().enumerate() {
                let base = match &cd.base {
                    Base::Delta(dl) => format!("delta {}", dl.atom()),
                    Base::Categorical(c) => format!("categorical {}", join(c.probs())),
                };
                let _ = writeln!(s, "dim {d} layers {} base {base}", cd.flow.layers().len());
                for layer in cd.flow.layers() {
                    let kind = match layer.kind() {
                        FlowKind::ShiftOnly => "shift".to_string(),
                        FlowKind::LocScale { sigma, .. } => format!("loc-scale {sigma}"),
                        FlowKind::Partial { subset } => {
                            let sub: Vec<String> = subset.iter().map(|p| p.to_string()).collect();
                            format!("partial {}", sub.join(","))
                        }
                        FlowKind::Affine { .. } => "affine".to_string(),
                    };
                    let _ = write!(s, "flow {kind} logits {}", join(layer.shift_logits()));
                    if !layer.scale_logits().is_empty() {
                        let _ = write!(s, " scale {}", join(layer.scale_logits()));
                    }
                    s.push('\n');
                }
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| Error::Parse {
                line: 0,
                column: 0,
                message: format!("unexpected end of file, expected {what}"),
            })
        };
        let (line, header) = next("header")?;
        if header != FORMAT_HEADER {
            return Err(parse_err(line, format!("expected `{FORMAT_HEADER}`")));
        }
        let (line, l) = next("layout")?;
        let layout = match field(line, l, "layout")?.as_slice() {
            ["joint"] => MixtureLayout::Joint,
            ["per-dimension"] => MixtureLayout::PerDimension,
            _ => return Err(parse_err(line, "unknown layout".into())),
        };
        let (line, l) = next("cardinalities")?;
        let cardinalities: Vec<usize> = parse_all(line, &field(line, l, "cardinalities")?)?;
        let (line, l) = next("components")?;
        let count: Vec<usize> = parse_all(line, &field(line, l, "components")?)?;
        let [count] = count[..] else {
            return Err(parse_err(line, "expected one component count".into()));
        };
        let (line, l) = next("rho")?;
        let rho: Vec<T> = parse_reals(line, &field(line, l, "rho")?)?;
        let mut components = Vec::with_capacity(count);
        for b in 0..count {
            let (line, l) = next("component")?;
            if field(line, l, "component")? != [b.to_string().as_str()] {
                return Err(parse_err(line, format!("expected `component {b}`")));
            }
            let mut dims = Vec::with_capacity(cardinalities.len());
            for (d, &k) in cardinalities.iter().enumerate() {
                let (line, l) = next("dim")?;
                let f = field(line, l, "dim")?;
                if f.len() < 5 || f[0] != d.to_string() || f[1] != "layers" || f[3] != "base" {
                    return Err(parse_err(line, format!("expected `dim {d} layers N base ...`")));
                }
                let n_layers: usize = parse_one(line, f[2])?;
                let base = match f[4] {
                    "delta" => {
                        let atom: usize = parse_one(line, f.get(5).copied().unwrap_or(""))?;
                        Base::Delta(DeltaBase::new(atom, k).map_err(|e| parse_err(line, e.to_string()))?)
                    }
                    "categorical" => Base::Categorical(
                        CategoricalParams::new(parse_reals(line, &f[5..])?)
                            .map_err(|e| parse_err(line, e.to_string()))?,
                    ),
                    other => return Err(parse_err(line, format!("unknown base `{other}`"))),
                };
                let mut layers = Vec::with_capacity(n_layers);
                for _ in 0..n_layers {
                    let (line, l) = next("flow")?;
                    layers.push(parse_flow::<T>(line, l, k)?);
                }
                dims.push(ComponentDim {
                    flow: FlowStack::new(k, layers)?,
                    base,
                });
            }
            components.push(dims);
        }
        FlowMixture::new(cardinalities, layout, rho, components)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn parse_err(line: usize, message: String) -> Error {
    Error::Parse { line, column: 1, message }
}

fn field<'a>(line: usize, l: &'a str, key: &str) -> Result<Vec<&'a str>> {
    let mut parts = l.split_whitespace();
    if parts.next() != Some(key) {
        return Err(parse_err(line, format!("expected `{key}`")));
    }
    Ok(parts.collect())
}

fn parse_one<V: std::str::FromStr>(line: usize, s: &str) -> Result<V> {
    s.parse().map_err(|_| parse_err(line, format!("cannot parse `{s}`")))
}

fn parse_all<V: std::str::FromStr>(line: usize, parts: &[&str]) -> Result<Vec<V>> {
    parts.iter().map(|s| parse_one(line, s)).collect()
}

fn parse_reals<T: Real>(line: usize, parts: &[&str]) -> Result<Vec<T>> {
    parts
        .iter()
        .map(|s| parse_one::<f64>(line, s).map(T::lit))
        .collect()
}

fn parse_flow<T: Real>(line: usize, l: &str, k: usize) -> Result<DiscreteFlow<T>> {
    let f = field(line, l, "flow")?;
    let logits_at = f
        .iter()
        .position(|&w| w == "logits")
        .ok_or_else(|| parse_err(line, "missing `logits`".into()))?;
    let scale_at = f.iter().position(|&w| w == "scale");
    let mut flow = match f[..logits_at] {
        ["shift"] => DiscreteFlow::shift_only(k),
        ["loc-scale", sigma] => DiscreteFlow::loc_scale(k, parse_one(line, sigma)?),
        ["partial", subset] => {
            let sub: Vec<&str> = subset.split(',').collect();
            DiscreteFlow::partial(k, parse_all(line, &sub)?)
        }
        ["affine"] => DiscreteFlow::affine(k),
        _ => return Err(parse_err(line, "unknown flow kind".into())),
    }
    .map_err(|e| parse_err(line, e.to_string()))?;
    let end = scale_at.unwrap_or(f.len());
    let shift: Vec<T> = parse_reals(line, &f[logits_at + 1..end])?;
    flow.set_shift_logits(&shift).map_err(|e| parse_err(line, e.to_string()))?;
    if let Some(at) = scale_at {
        let scale: Vec<T> = parse_reals(line, &f[at + 1..])?;
        flow.set_scale_logits(&scale).map_err(|e| parse_err(line, e.to_string()))?;
    }
    Ok(flow)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::argmax;
    use crate::dists::sample_dirichlet_base;
    use approx::assert_relative_eq;

    fn tau1() -> Temperature<f64> {
        Temperature::new(1.0).unwrap()
    }

    fn two_shift_mixture(s0: usize, s1: usize) -> FlowMixture<f64> {
        let mut m = FlowMixture::shift_mixture(&[3], 2, 1, MixtureLayout::Joint).unwrap();
        m.component_mut(0)[0].flow.layers_mut()[0].set_shift(s0);
        m.component_mut(1)[0].flow.layers_mut()[0].set_shift(s1);
        m
    }

    /// Random mixture with categorical and delta bases and mixed flow kinds.
    pub(crate) fn random_mixture(rng: &mut SeededRng, layout: MixtureLayout) -> FlowMixture<f64> {
        use rand::Rng;
        let d = rng.random_range(1..=3);
        let cards: Vec<usize> = (0..d).map(|_| rng.random_range(2..=5)).collect();
        let b = rng.random_range(1..=8);
        let mut m = FlowMixture::with_bases(&cards, b, 2, layout, |_, _, k| {
            Ok(if rng.random_bool(0.5) {
                Base::Delta(DeltaBase::new(rng.random_range(0..k), k)?)
            } else {
                Base::Categorical(sample_dirichlet_base(1.0, k, rng)?)
            })
        })
        .unwrap();
        m.randomize(rng);
        let rho = sample_dirichlet_base(2.0, b, rng).unwrap().into_probs();
        m.set_rho(&rho).unwrap();
        m
    }

    #[test]
    fn deterministic_single_component() {
        let mut m = FlowMixture::<f64>::shift_mixture(&[3], 1, 1, MixtureLayout::Joint).unwrap();
        m.component_mut(0)[0].flow.layers_mut()[0].set_shift(1);
        let mut rng = SeededRng::new(1);
        let mut tape = Tape::new();
        let bind = m.bind(&mut tape, tau1(), None).unwrap();
        for _ in 0..20 {
            let x = m.sample_forward(&mut tape, &bind, &mut rng).unwrap();
            assert_eq!(tape.value(x[0]), &[0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn two_component_frequencies() {
        let m = two_shift_mixture(1, 2);
        let mut rng = SeededRng::new(2);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[m.sample_indices(&mut rng)[0]] += 1;
        }
        assert_eq!(counts[0], 0);
        for c in &counts[1..] {
            assert!((*c as f64 / n as f64 - 0.5).abs() < 0.01);
        }
    }

    #[test]
    fn log_prob_examples() {
        let m = two_shift_mixture(1, 2);
        let mut tape = Tape::new();
        let bind = m.bind(&mut tape, tau1(), None).unwrap();
        let x = tape.one_hot(1, 3);
        let lp = m.log_prob(&mut tape, &bind, &[x]);
        assert_relative_eq!(tape.scalar(lp), 0.5f64.ln(), epsilon = 1e-14);
        let x0 = tape.one_hot(0, 3);
        let lp0 = m.log_prob(&mut tape, &bind, &[x0]);
        assert_eq!(tape.scalar(lp0), f64::NEG_INFINITY);

        let m = two_shift_mixture(1, 1);
        let mut tape = Tape::new();
        let bind = m.bind(&mut tape, tau1(), None).unwrap();
        let x = tape.one_hot(1, 3);
        let lp = m.log_prob(&mut tape, &bind, &[x]);
        assert_relative_eq!(tape.scalar(lp), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn normalization_and_path_agreement() {
        let mut rng = SeededRng::new(3);
        for layout in [MixtureLayout::Joint, MixtureLayout::PerDimension] {
            for _ in 0..20 {
                let m = random_mixture(&mut rng, layout);
                let table = m.prob_table(1 << 20).unwrap();
                assert_relative_eq!(table.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
                let space = ConfigSpace::new(m.cardinalities().to_vec()).unwrap();
                for (i, &p) in table.iter().enumerate() {
                    let x = space.decode(i);
                    let exact = m.log_prob_exact(&x);
                    let mut tape = Tape::new();
                    let bind = m.bind(&mut tape, tau1(), None).unwrap();
                    let xs: Vec<NodeId> = x.iter().zip(m.cardinalities()).map(|(&v, &k)| tape.one_hot(v, k)).collect();
                    let fused = m.log_prob(&mut tape, &bind, &xs);
                    let fused = tape.scalar(fused);
                    let inv = m.log_prob_by_inversion(&mut tape, &bind, &xs).unwrap();
                    let inv = tape.scalar(inv);
                    if p == 0.0 {
                        assert_eq!(exact, f64::NEG_INFINITY);
                        assert_eq!(fused, f64::NEG_INFINITY);
                        assert_eq!(inv, f64::NEG_INFINITY);
                    } else {
                        assert_relative_eq!(exact, p.ln(), epsilon = 1e-10);
                        assert_relative_eq!(fused, p.ln(), epsilon = 1e-10);
                        assert_relative_eq!(inv, p.ln(), epsilon = 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn fused_and_inverted_paths_share_gradients() {
        let mut rng = SeededRng::new(4);
        // full-support bases keep every log term finite
        for _ in 0..10 {
            let cards = [3, 4];
            let mut m = FlowMixture::with_bases(&cards, 3, 2, MixtureLayout::Joint, |_, _, k| {
                Ok(Base::Categorical(sample_dirichlet_base(1.0, k, &mut rng)?))
            })
            .unwrap();
            m.randomize(&mut rng);
            let run = |by_inversion: bool| {
                let mut tape = Tape::new();
                let bind = m.bind(&mut tape, Temperature::new(2.0).unwrap(), None).unwrap();
                let xs = vec![tape.one_hot(2, 3), tape.one_hot(1, 4)];
                let lp = if by_inversion {
                    m.log_prob_by_inversion(&mut tape, &bind, &xs).unwrap()
                } else {
                    m.log_prob(&mut tape, &bind, &xs)
                };
                let g = tape.backward(lp).unwrap();
                bind.params().iter().flat_map(|&p| g.wrt(p).to_vec()).collect::<Vec<f64>>()
            };
            let (a, b) = (run(false), run(true));
            for (x, y) in a.iter().zip(&b) {
                assert_relative_eq!(x, y, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn sampling_matches_table() {
        let mut rng = SeededRng::new(5);
        for _ in 0..3 {
            let m = random_mixture(&mut rng, MixtureLayout::Joint);
            let table = m.prob_table(1 << 20).unwrap();
            let space = ConfigSpace::new(m.cardinalities().to_vec()).unwrap();
            let n = 100_000;
            let mut freq = vec![0.0; table.len()];
            let mut tape = Tape::new();
            let bind = m.bind(&mut tape, tau1(), None).unwrap();
            let mark = tape.len();
            for _ in 0..n {
                let xs = m.sample_forward(&mut tape, &bind, &mut rng).unwrap();
                let idx: Vec<usize> = xs.iter().map(|&x| argmax(tape.value(x))).collect();
                freq[space.index_of(&idx)] += 1.0 / n as f64;
                debug_assert!(tape.len() >= mark);
            }
            let tv: f64 = 0.5 * freq.iter().zip(&table).map(|(a, b)| (a - b).abs()).sum::<f64>();
            assert!(tv < 0.01, "tv {tv}");
        }
    }

    #[test]
    fn masked_batch_gradient_is_sum_of_parts() {
        let mut rng = SeededRng::new(6);
        let mut m = FlowMixture::with_bases(&[3, 2], 3, 1, MixtureLayout::Joint, |_, _, k| {
            Ok(Base::Categorical(sample_dirichlet_base(1.0, k, &mut rng)?))
        })
        .unwrap();
        m.randomize(&mut rng);
        let masks = MaskSet::sample(&m, 5, &mut rng);
        let table = [0.3, -1.2, 0.8];
        let table2 = [-0.4, 0.9];
        let objective = |only: Option<usize>| {
            let mut tape = Tape::new();
            let mut r = SeededRng::new(99);
            let bind = m.bind(&mut tape, tau1(), None).unwrap();
            let batch = m.sample_batch_masked(&mut tape, &bind, &masks, &mut r).unwrap();
            let t1 = tape.constant(&table);
            let t2 = tape.constant(&table2);
            let mut terms = Vec::new();
            for (i, s) in batch.iter().enumerate() {
                if only.is_some_and(|o| o != i) {
                    continue;
                }
                terms.push(tape.log_lookup(s[0], t1));
                terms.push(tape.log_lookup(s[1], t2));
            }
            let root = tape.sum_scalars(&terms);
            let g = tape.backward(root).unwrap();
            bind.params().iter().flat_map(|&p| g.wrt(p).to_vec()).collect::<Vec<f64>>()
        };
        let whole = objective(None);
        let mut parts = vec![0.0; whole.len()];
        for i in 0..5 {
            for (p, g) in parts.iter_mut().zip(objective(Some(i))) {
                *p += g;
            }
        }
        for (a, b) in whole.iter().zip(&parts) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn degenerate_mask_gives_component_pushforward() {
        let mut m = FlowMixture::<f64>::shift_mixture(&[4], 2, 1, MixtureLayout::Joint).unwrap();
        m.component_mut(0)[0].flow.layers_mut()[0].set_shift(3);
        m.component_mut(1)[0].flow.layers_mut()[0].set_shift(1);
        let masks = MaskSet::all_to(0, 2, 6, 1).unwrap();
        let mut tape = Tape::new();
        let mut rng = SeededRng::new(7);
        let bind = m.bind(&mut tape, tau1(), None).unwrap();
        let batch = m.sample_batch_masked(&mut tape, &bind, &masks, &mut rng).unwrap();
        for s in batch {
            assert_eq!(tape.value(s[0]), &[0.0, 0.0, 0.0, 1.0]);
        }
        assert!(MaskSet::new(2, vec![vec![2]]).is_err());
    }

    #[test]
    fn deterministic_allocation_ignores_seed() {
        let mut rng = SeededRng::new(8);
        let mut m = FlowMixture::<f64>::shift_mixture(&[3, 4], 5, 2, MixtureLayout::Joint).unwrap();
        m.randomize(&mut rng);
        let run = |seed| {
            let mut tape = Tape::new();
            let bind = m.bind(&mut tape, tau1(), None).unwrap();
            let mut r = SeededRng::new(seed);
            let batch = m.sample_deterministic(&mut tape, &bind, &mut r).unwrap();
            batch
                .iter()
                .map(|s| s.iter().map(|&x| argmax(tape.value(x))).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(1), run(2));
        let b0 = run(3)[0].clone();
        let c0 = m.component(0);
        assert_eq!(b0, vec![c0[0].flow.forward_index(0), c0[1].flow.forward_index(0)]);
    }

    #[test]
    fn constructive_examples() {
        let p = CategoricalParams::new(vec![0.6, 0.4]).unwrap();
        assert_eq!(allocate_counts(p.probs(), 5), vec![3, 2]);
        let m = constructive_fit(&p, 5).unwrap();
        let q = m.prob_table(1000).unwrap();
        assert_relative_eq!(q[0], 0.6, epsilon = 1e-12);

        let p = CategoricalParams::new(vec![0.55, 0.45]).unwrap();
        assert_eq!(allocate_counts(p.probs(), 5), vec![3, 2]);
        let q = constructive_fit(&p, 5).unwrap().prob_table(1000).unwrap();
        assert!((q[0] - 0.55).abs() <= 0.2 && (q[1] - 0.45).abs() <= 0.2);

        // free weights, one atom per category
        let target = [0.1, 0.2, 0.3, 0.4];
        let configs: Vec<Vec<usize>> = (0..4).map(|i| vec![i]).collect();
        let m = weighted_atoms(&[4], &configs, &target).unwrap();
        let q = m.prob_table(1000).unwrap();
        for (a, b) in q.iter().zip(&target) {
            assert_relative_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn constructive_bound_holds() {
        use rand::Rng;
        let mut rng = SeededRng::new(9);
        for _ in 0..100 {
            let k = rng.random_range(1..=10);
            let alpha = [0.1, 1.0, 10.0][rng.random_range(0..3)];
            let p = sample_dirichlet_base(alpha, k, &mut rng).unwrap();
            for b in 1..=64 {
                let counts = allocate_counts(p.probs(), b);
                assert_eq!(counts.iter().sum::<usize>(), b);
                for (c, pk) in counts.iter().zip(p.probs()) {
                    assert!((*c as f64 / b as f64 - pk).abs() <= 1.0 / b as f64 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn component_swap_leaves_log_prob_unchanged() {
        let mut rng = SeededRng::new(10);
        let m = random_mixture(&mut rng, MixtureLayout::Joint);
        if m.components() < 2 {
            return;
        }
        let mut swapped = m.clone();
        swapped.components.swap(0, 1);
        swapped.rho.swap(0, 1);
        let space = ConfigSpace::new(m.cardinalities().to_vec()).unwrap();
        for i in 0..space.size_within(1 << 20).unwrap() {
            let x = space.decode(i);
            let (a, b) = (m.log_prob_exact(&x), swapped.log_prob_exact(&x));
            assert!(a == b || (a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn text_round_trip() {
        let mut rng = SeededRng::new(11);
        let mut m = random_mixture(&mut rng, MixtureLayout::PerDimension);
        let k = m.cardinalities()[0];
        let mut extra = vec![DiscreteFlow::affine(k).unwrap(), DiscreteFlow::partial(k, vec![1, 0]).unwrap()];
        for f in &mut extra {
            f.randomize(&mut rng);
        }
        let base = m.component(0)[0].base.clone();
        m.component_mut(0)[0] = ComponentDim {
            flow: FlowStack::new(k, extra).unwrap(),
            base,
        };
        let text = m.to_text();
        let back = FlowMixture::<f64>::from_text(&text).unwrap();
        assert_eq!(back, m);
        assert!(FlowMixture::<f64>::from_text("mdnf 2\n").is_err());
        let truncated: String = text.lines().take(6).collect::<Vec<_>>().join("\n");
        assert!(FlowMixture::<f64>::from_text(&truncated).is_err());
    }

    #[test]
    fn parameters_round_trip() {
        let mut rng = SeededRng::new(12);
        let m = random_mixture(&mut rng, MixtureLayout::Joint);
        let mut z = m.clone();
        let params = m.parameters();
        assert_eq!(params.len(), m.param_count());
        z.set_parameters(&vec![0.0; params.len()]).unwrap();
        z.set_parameters(&params).unwrap();
        assert_eq!(z, m);
    }
}
