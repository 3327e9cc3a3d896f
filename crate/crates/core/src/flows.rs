//! Invertible maps on one-hot codes of a K-category variable.
//!
//! Every flow carries trainable shift logits `λ`. During a traced step the
//! shift is materialised as `μ = ST(softmax(λ / τ))`, so the forward value is
//! an exact one-hot while gradients reach `λ` through the relaxed softmax.
//! Shifting by `μ` is a circular convolution, which keeps the whole map
//! multilinear in its one-hot arguments.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffcore::{argmax, NodeId, Tape, Temperature};
use crate::dists::SeededRng;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Inverse of `a` modulo `k` by the extended Euclidean algorithm.
pub fn mod_inverse(a: usize, k: usize) -> Option<usize> {
    if k == 1 {
        return Some(0);
    }
    let (mut r0, mut r1) = (k as i64, (a % k) as i64);
    let (mut t0, mut t1) = (0i64, 1i64);
    while r1 != 0 {
        let q = r0 / r1;
        (r0, r1) = (r1, r0 - q * r1);
        (t0, t1) = (t1, t0 - q * t1);
    }
    (r0 == 1).then(|| t0.rem_euclid(k as i64) as usize)
}

/// Multiplicative units of `Z_k` in increasing order.
pub fn units_mod(k: usize) -> Vec<usize> {
    if k == 1 {
        return vec![0];
    }
    (1..k).filter(|&u| gcd(u, k) == 1).collect()
}

/// `Ok` iff `sigma` and `k` are coprime, i.e. `u -> sigma * u mod k` is a bijection.
pub fn validate_coprime(sigma: usize, k: usize) -> Result<()> {
    if sigma == 0 || k == 0 {
        return Err(Error::InvalidInput("sigma and K must be at least 1".into()));
    }
    match gcd(sigma, k) {
        1 => Ok(()),
        g => Err(Error::InvalidInput(format!(
            "scale {sigma} is not coprime with cardinality {k} (gcd {g})"
        ))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FlowKind {
    /// `(μ + σ·u) mod K` with a fixed scale.
    LocScale { sigma: usize, sigma_inv: usize },
    /// `(μ + u) mod K`.
    ShiftOnly,
    /// Shift acting only on the listed positions; identity elsewhere.
    Partial { subset: Vec<usize> },
    /// `(μ + σ·u) mod K` with σ chosen by trainable logits over the units of `Z_K`.
    Affine { units: Vec<usize>, inverses: Vec<usize> },
}

/// One discrete flow layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteFlow<T> {
    kind: FlowKind,
    cardinality: usize,
    shift_logits: Vec<T>,
    scale_logits: Vec<T>,
}

/// Tape leaves holding one flow's parameters.
#[derive(Clone, Copy, Debug)]
pub struct FlowLeaves {
    pub shift: NodeId,
    pub scale: Option<NodeId>,
}

/// Shift (and scale) one-hots of a flow for the current step.
#[derive(Clone, Copy, Debug)]
pub struct MaterializedFlow {
    pub mu: NodeId,
    pub sigma: Option<NodeId>,
}

impl<T: Real> DiscreteFlow<T> {
    pub fn loc_scale(k: usize, sigma: usize) -> Result<Self> {
        validate_coprime(sigma, k)?;
        let sigma = sigma % k;
        let sigma_inv = mod_inverse(sigma, k).ok_or_else(|| Error::Internal("no modular inverse".into()))?;
        Ok(Self::with_kind(FlowKind::LocScale { sigma, sigma_inv }, k, k))
    }

    pub fn shift_only(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidInput("cardinality must be at least 1".into()));
        }
        Ok(Self::with_kind(FlowKind::ShiftOnly, k, k))
    }

    pub fn partial(k: usize, subset: Vec<usize>) -> Result<Self> {
        if subset.is_empty() {
            return Err(Error::InvalidInput("partial flow needs a non-empty subset".into()));
        }
        let mut seen = vec![false; k];
        for &p in &subset {
            if p >= k || std::mem::replace(&mut seen[p], true) {
                return Err(Error::InvalidInput(format!(
                    "partial subset positions must be distinct and below {k}"
                )));
            }
        }
        let len = subset.len();
        Ok(Self::with_kind(FlowKind::Partial { subset }, k, len))
    }

    pub fn affine(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidInput("cardinality must be at least 1".into()));
        }
        let units = units_mod(k);
        let inverses = units
            .iter()
            .map(|&u| mod_inverse(u, k).expect("units are invertible"))
            .collect();
        let n = units.len();
        let mut flow = Self::with_kind(FlowKind::Affine { units, inverses }, k, k);
        flow.scale_logits = vec![T::zero(); n];
        Ok(flow)
    }

    fn with_kind(kind: FlowKind, cardinality: usize, shift_len: usize) -> Self {
        Self {
            kind,
            cardinality,
            shift_logits: vec![T::zero(); shift_len],
            scale_logits: Vec::new(),
        }
    }

    pub fn kind(&self) -> &FlowKind {
        &self.kind
    }

    pub fn cardinality(&self) -> usize {
        self.cardinality
    }

    pub fn shift_logits(&self) -> &[T] {
        &self.shift_logits
    }

    pub fn scale_logits(&self) -> &[T] {
        &self.scale_logits
    }

    pub fn set_shift_logits(&mut self, logits: &[T]) -> Result<()> {
        check_logits(logits, self.shift_logits.len())?;
        self.shift_logits.copy_from_slice(logits);
        Ok(())
    }

    pub fn set_scale_logits(&mut self, logits: &[T]) -> Result<()> {
        check_logits(logits, self.scale_logits.len())?;
        self.scale_logits.copy_from_slice(logits);
        Ok(())
    }

    /// Sets logits so that the hard shift is `shift` (unit logit gap).
    pub fn set_shift(&mut self, shift: usize) {
        self.shift_logits.iter_mut().for_each(|l| *l = T::zero());
        self.shift_logits[shift] = T::one();
    }

    /// Sets the hard scale of an affine flow to the unit `sigma`.
    pub fn set_scale(&mut self, sigma: usize) -> Result<()> {
        let FlowKind::Affine { units, .. } = &self.kind else {
            return Err(Error::InvalidInput("only affine flows have a trainable scale".into()));
        };
        let pos = units
            .iter()
            .position(|&u| u == sigma % self.cardinality)
            .ok_or_else(|| Error::InvalidInput(format!("{sigma} is not a unit mod {}", self.cardinality)))?;
        self.scale_logits.iter_mut().for_each(|l| *l = T::zero());
        self.scale_logits[pos] = T::one();
        Ok(())
    }

    /// Draws every logit from a standard normal.
    pub fn randomize(&mut self, rng: &mut SeededRng) {
        for l in self.shift_logits.iter_mut().chain(self.scale_logits.iter_mut()) {
            *l = T::lit(rng.sample::<f64, _>(StandardNormal));
        }
    }

    /// Hard shift `argmax λ`.
    pub fn shift(&self) -> usize {
        argmax(&self.shift_logits)
    }

    /// Hard multiplicative scale.
    pub fn scale(&self) -> usize {
        match &self.kind {
            FlowKind::LocScale { sigma, .. } => *sigma,
            FlowKind::Affine { units, .. } => units[argmax(&self.scale_logits)],
            _ => 1 % self.cardinality,
        }
    }

    fn scale_inverse(&self) -> usize {
        match &self.kind {
            FlowKind::LocScale { sigma_inv, .. } => *sigma_inv,
            FlowKind::Affine { inverses, .. } => inverses[argmax(&self.scale_logits)],
            _ => 1 % self.cardinality,
        }
    }

    /// Index-level forward map.
    pub fn forward_index(&self, u: usize) -> usize {
        let k = self.cardinality;
        match &self.kind {
            FlowKind::Partial { subset } => match subset.iter().position(|&p| p == u) {
                Some(i) => subset[(i + self.shift()) % subset.len()],
                None => u,
            },
            _ => (self.shift() + self.scale() * u) % k,
        }
    }

    /// Index-level inverse map.
    pub fn inverse_index(&self, x: usize) -> usize {
        let k = self.cardinality;
        match &self.kind {
            FlowKind::Partial { subset } => match subset.iter().position(|&p| p == x) {
                Some(i) => {
                    let n = subset.len();
                    subset[(i + n - self.shift()) % n]
                }
                None => x,
            },
            _ => (self.scale_inverse() * ((x + k - self.shift()) % k)) % k,
        }
    }

    pub fn param_count(&self) -> usize {
        self.shift_logits.len() + self.scale_logits.len()
    }

    /// Records the parameters as tape leaves.
    pub fn bind(&self, tape: &mut Tape<T>) -> FlowLeaves {
        let shift = tape.leaf(&self.shift_logits);
        let scale = (!self.scale_logits.is_empty()).then(|| tape.leaf(&self.scale_logits));
        FlowLeaves { shift, scale }
    }

    /// Straight-through one-hots for the shift and, for affine flows, the scale.
    pub fn materialize(&self, tape: &mut Tape<T>, leaves: FlowLeaves, tau: Temperature<T>) -> Result<MaterializedFlow> {
        let soft = tape.softmax_temp(leaves.shift, tau)?;
        let mu = tape.straight_through(soft);
        let sigma = match leaves.scale {
            Some(s) => {
                let soft = tape.softmax_temp(s, tau)?;
                Some(tape.straight_through(soft))
            }
            None => None,
        };
        Ok(MaterializedFlow { mu, sigma })
    }

    /// Traced forward map of a one-hot input.
    pub fn flow_forward(&self, tape: &mut Tape<T>, m: MaterializedFlow, u: NodeId) -> Result<NodeId> {
        check_one_hot(tape.value(u), self.cardinality)?;
        self.pushforward(tape, m, u)
    }

    /// Traced inverse map of a one-hot input.
    pub fn flow_inverse(&self, tape: &mut Tape<T>, m: MaterializedFlow, x: NodeId) -> Result<NodeId> {
        check_one_hot(tape.value(x), self.cardinality)?;
        self.pullback(tape, m, x)
    }

    /// Forward map applied to an arbitrary vector. For a probability vector
    /// this yields the pushforward distribution, since the map is linear in
    /// its input for fixed shift and scale.
    pub fn pushforward(&self, tape: &mut Tape<T>, m: MaterializedFlow, u: NodeId) -> Result<NodeId> {
        match &self.kind {
            FlowKind::ShiftOnly => tape.circular_convolve(m.mu, u),
            FlowKind::LocScale { sigma, .. } => {
                let scaled = if *sigma == 1 % self.cardinality {
                    u
                } else {
                    let map = scale_map(*sigma, self.cardinality);
                    tape.permute(u, &map)
                };
                tape.circular_convolve(m.mu, scaled)
            }
            FlowKind::Affine { units, .. } => {
                let sigma = m.sigma.ok_or_else(|| Error::Internal("affine flow without scale".into()))?;
                let scaled = tape.unit_scale(sigma, u, units);
                tape.circular_convolve(m.mu, scaled)
            }
            FlowKind::Partial { subset } => {
                let sub = tape.select(u, subset);
                let shifted = tape.circular_convolve(m.mu, sub)?;
                Ok(tape.splice(u, shifted, subset))
            }
        }
    }

    /// Inverse map applied to an arbitrary vector.
    pub fn pullback(&self, tape: &mut Tape<T>, m: MaterializedFlow, x: NodeId) -> Result<NodeId> {
        match &self.kind {
            FlowKind::ShiftOnly => tape.circular_correlate(x, m.mu),
            FlowKind::LocScale { sigma_inv, .. } => {
                let v = tape.circular_correlate(x, m.mu)?;
                if *sigma_inv == 1 % self.cardinality {
                    Ok(v)
                } else {
                    let map = scale_map(*sigma_inv, self.cardinality);
                    Ok(tape.permute(v, &map))
                }
            }
            FlowKind::Affine { inverses, .. } => {
                let sigma = m.sigma.ok_or_else(|| Error::Internal("affine flow without scale".into()))?;
                let v = tape.circular_correlate(x, m.mu)?;
                Ok(tape.unit_scale(sigma, v, inverses))
            }
            FlowKind::Partial { subset } => {
                let sub = tape.select(x, subset);
                let shifted = tape.circular_correlate(sub, m.mu)?;
                Ok(tape.splice(x, shifted, subset))
            }
        }
    }

    pub(crate) fn params(&self) -> impl Iterator<Item = &[T]> {
        std::iter::once(self.shift_logits.as_slice())
            .chain((!self.scale_logits.is_empty()).then_some(self.scale_logits.as_slice()))
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut Vec<T>> {
        let has_scale = !self.scale_logits.is_empty();
        std::iter::once(&mut self.shift_logits)
            .chain(has_scale.then_some(&mut self.scale_logits))
    }
}

fn scale_map(sigma: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| (sigma * i) % k).collect()
}

fn check_logits<T: Real>(logits: &[T], len: usize) -> Result<()> {
    if logits.len() != len {
        return Err(Error::InvalidInput(format!("expected {len} logits, got {}", logits.len())));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::InvalidInput("flow logits must be finite".into()));
    }
    Ok(())
}

fn check_one_hot<T: Real>(v: &[T], k: usize) -> Result<()> {
    let ones = v.iter().filter(|&&x| x == T::one()).count();
    let zeros = v.iter().filter(|&&x| x == T::zero()).count();
    if v.len() != k || ones != 1 || ones + zeros != k {
        return Err(Error::InvalidInput("flow input must be a one-hot vector".into()));
    }
    Ok(())
}

/// Composition of flows sharing one cardinality; layer 0 is applied first.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowStack<T> {
    cardinality: usize,
    layers: Vec<DiscreteFlow<T>>,
}

impl<T: Real> FlowStack<T> {
    pub fn new(cardinality: usize, layers: Vec<DiscreteFlow<T>>) -> Result<Self> {
        if let Some(bad) = layers.iter().find(|l| l.cardinality != cardinality) {
            return Err(Error::InvalidInput(format!(
                "flow of cardinality {} in a stack of cardinality {cardinality}",
                bad.cardinality
            )));
        }
        Ok(Self { cardinality, layers })
    }

    /// `n` shift-only layers.
    pub fn shifts(cardinality: usize, n: usize) -> Result<Self> {
        let layers = (0..n).map(|_| DiscreteFlow::shift_only(cardinality)).collect::<Result<_>>()?;
        Self::new(cardinality, layers)
    }

    pub fn cardinality(&self) -> usize {
        self.cardinality
    }

    pub fn layers(&self) -> &[DiscreteFlow<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DiscreteFlow<T>] {
        &mut self.layers
    }

    pub fn randomize(&mut self, rng: &mut SeededRng) {
        self.layers.iter_mut().for_each(|l| l.randomize(rng));
    }

    pub fn forward_index(&self, u: usize) -> usize {
        self.layers.iter().fold(u, |v, l| l.forward_index(v))
    }

    pub fn inverse_index(&self, x: usize) -> usize {
        self.layers.iter().rev().fold(x, |v, l| l.inverse_index(v))
    }

    /// Hard permutation realised by the stack: `perm[u] = forward(u)`.
    pub fn permutation(&self) -> Vec<usize> {
        (0..self.cardinality).map(|u| self.forward_index(u)).collect()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<FlowLeaves> {
        self.layers.iter().map(|l| l.bind(tape)).collect()
    }

    pub fn materialize(&self, tape: &mut Tape<T>, leaves: &[FlowLeaves], tau: Temperature<T>) -> Result<Vec<MaterializedFlow>> {
        self.layers
            .iter()
            .zip(leaves)
            .map(|(l, &lv)| l.materialize(tape, lv, tau))
            .collect()
    }

    pub fn pushforward(&self, tape: &mut Tape<T>, m: &[MaterializedFlow], u: NodeId) -> Result<NodeId> {
        self.layers
            .iter()
            .zip(m)
            .try_fold(u, |v, (l, &mf)| l.pushforward(tape, mf, v))
    }

    pub fn pullback(&self, tape: &mut Tape<T>, m: &[MaterializedFlow], x: NodeId) -> Result<NodeId> {
        self.layers
            .iter()
            .zip(m)
            .rev()
            .try_fold(x, |v, (l, &mf)| l.pullback(tape, mf, v))
    }

    pub fn forward(&self, tape: &mut Tape<T>, m: &[MaterializedFlow], u: NodeId) -> Result<NodeId> {
        check_one_hot(tape.value(u), self.cardinality)?;
        self.pushforward(tape, m, u)
    }

    pub fn inverse(&self, tape: &mut Tape<T>, m: &[MaterializedFlow], x: NodeId) -> Result<NodeId> {
        check_one_hot(tape.value(x), self.cardinality)?;
        self.pullback(tape, m, x)
    }

    pub(crate) fn params(&self) -> impl Iterator<Item = &[T]> {
        self.layers.iter().flat_map(|l| l.params())
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut Vec<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut())
    }
}

/// Bubble-sort arrangement of adjacent-pair partial flows:
/// `K(K-1)/2` layers, enough to express every permutation of `0..K`.
pub fn build_sorting_network<T: Real>(k: usize) -> Result<FlowStack<T>> {
    if k < 2 {
        return Err(Error::InvalidInput("a sorting network needs K >= 2".into()));
    }
    let mut layers = Vec::with_capacity(k * (k - 1) / 2);
    for pass in 0..k - 1 {
        for j in 0..k - 1 - pass {
            layers.push(DiscreteFlow::partial(k, vec![j, j + 1])?);
        }
    }
    FlowStack::new(k, layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tau1() -> Temperature<f64> {
        Temperature::new(1.0).unwrap()
    }

    fn traced_forward(flow: &DiscreteFlow<f64>, u: usize) -> usize {
        let mut tape = Tape::new();
        let leaves = flow.bind(&mut tape);
        let m = flow.materialize(&mut tape, leaves, tau1()).unwrap();
        let x = tape.one_hot(u, flow.cardinality());
        let y = flow.flow_forward(&mut tape, m, x).unwrap();
        let v = tape.value(y);
        assert_eq!(v.iter().sum::<f64>(), 1.0);
        argmax(v)
    }

    fn traced_inverse(flow: &DiscreteFlow<f64>, x: usize) -> usize {
        let mut tape = Tape::new();
        let leaves = flow.bind(&mut tape);
        let m = flow.materialize(&mut tape, leaves, tau1()).unwrap();
        let xv = tape.one_hot(x, flow.cardinality());
        let u = flow.flow_inverse(&mut tape, m, xv).unwrap();
        argmax(tape.value(u))
    }

    #[test]
    fn modular_helpers() {
        assert_eq!(mod_inverse(3, 5), Some(2));
        assert_eq!(mod_inverse(2, 4), None);
        assert_eq!(units_mod(5), vec![1, 2, 3, 4]);
        assert_eq!(units_mod(6), vec![1, 5]);
        assert!(validate_coprime(3, 5).is_ok());
        assert!(validate_coprime(2, 4).is_err());
        for k in 1..20 {
            assert!(validate_coprime(1, k).is_ok());
        }
    }

    #[test]
    fn forward_examples() {
        let mut f = DiscreteFlow::<f64>::shift_only(5).unwrap();
        f.set_shift(3);
        assert_eq!(traced_forward(&f, 2), 0);

        let mut f = DiscreteFlow::<f64>::loc_scale(5, 3).unwrap();
        f.set_shift(2);
        assert_eq!(traced_forward(&f, 4), 4);
        assert_eq!(traced_inverse(&f, 4), 4);

        let mut f = DiscreteFlow::<f64>::partial(5, vec![1, 2]).unwrap();
        f.set_shift(1);
        assert_eq!(traced_forward(&f, 1), 2);
        assert_eq!(traced_forward(&f, 0), 0);
    }

    #[test]
    fn rejects_bad_construction_and_inputs() {
        assert!(DiscreteFlow::<f64>::loc_scale(4, 2).is_err());
        assert!(DiscreteFlow::<f64>::partial(4, vec![1, 1]).is_err());
        assert!(DiscreteFlow::<f64>::partial(4, vec![4]).is_err());
        let f = DiscreteFlow::<f64>::shift_only(3).unwrap();
        let mut tape = Tape::new();
        let leaves = f.bind(&mut tape);
        let m = f.materialize(&mut tape, leaves, tau1()).unwrap();
        let soft = tape.constant(&[0.5, 0.5, 0.0]);
        assert!(matches!(f.flow_forward(&mut tape, m, soft), Err(Error::InvalidInput(_))));
        let mut g = DiscreteFlow::<f64>::shift_only(3).unwrap();
        assert!(g.set_shift_logits(&[0.0, f64::NAN, 0.0]).is_err());
    }

    fn all_flows(k: usize, rng: &mut SeededRng) -> Vec<DiscreteFlow<f64>> {
        let mut out = vec![DiscreteFlow::shift_only(k).unwrap(), DiscreteFlow::affine(k).unwrap()];
        for sigma in units_mod(k) {
            out.push(DiscreteFlow::loc_scale(k, sigma.max(1)).unwrap());
        }
        if k >= 2 {
            out.push(DiscreteFlow::partial(k, vec![k - 1, 0]).unwrap());
        }
        if k >= 4 {
            out.push(DiscreteFlow::partial(k, vec![3, 1, 0]).unwrap());
        }
        for f in &mut out {
            f.randomize(rng);
        }
        out
    }

    #[test]
    fn flows_are_bijections_with_exact_inverses() {
        let mut rng = SeededRng::new(17);
        for k in 1..=16 {
            for f in all_flows(k, &mut rng) {
                let mut seen = vec![false; k];
                for u in 0..k {
                    let x = traced_forward(&f, u);
                    assert_eq!(x, f.forward_index(u));
                    assert!(!seen[x]);
                    seen[x] = true;
                    assert_eq!(traced_inverse(&f, x), u);
                    assert_eq!(f.inverse_index(f.forward_index(u)), u);
                    assert_eq!(f.forward_index(f.inverse_index(u)), u);
                }
            }
        }
    }

    #[test]
    fn pushforward_conserves_probability_multiset() {
        let mut rng = SeededRng::new(18);
        for k in 1..=16 {
            let base: Vec<f64> = {
                let d = crate::dists::sample_dirichlet_base(1.0, k, &mut rng).unwrap();
                d.into_probs()
            };
            for f in all_flows(k, &mut rng) {
                let mut tape = Tape::new();
                let leaves = f.bind(&mut tape);
                let m = f.materialize(&mut tape, leaves, tau1()).unwrap();
                let p = tape.constant(&base);
                let q = f.pushforward(&mut tape, m, p).unwrap();
                let mut a = base.clone();
                let mut b = tape.value(q).to_vec();
                a.sort_by(f64::total_cmp);
                b.sort_by(f64::total_cmp);
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn shift_gradient_matches_finite_differences_on_soft_path() {
        // soft path: the relaxed shift feeds the convolution directly
        let eval = |logits: &[f64], grad: bool| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let l = tape.leaf(logits);
            let mu = tape.softmax_temp(l, Temperature::new(0.7).unwrap()).unwrap();
            let u = tape.constant(&[0.1, 0.6, 0.3, 0.0]);
            let x = tape.circular_convolve(mu, u).unwrap();
            let table = tape.constant(&[-1.0, 0.5, 2.0, -3.0]);
            let r = tape.log_lookup(x, table);
            let v = tape.scalar(r);
            let g = if grad { tape.backward(r).unwrap().wrt(l).to_vec() } else { vec![] };
            (v, g)
        };
        let logits = [0.3, -0.4, 1.1, 0.2];
        let (_, g) = eval(&logits, true);
        for j in 0..4 {
            let mut hi = logits;
            let mut lo = logits;
            hi[j] += 1e-5;
            lo[j] -= 1e-5;
            let fd = (eval(&hi, false).0 - eval(&lo, false).0) / 2e-5;
            assert!((fd - g[j]).abs() <= 1e-4 * g[j].abs().max(1e-6), "{fd} vs {}", g[j]);
        }
    }

    #[test]
    fn sorting_network_sizes() {
        assert_eq!(build_sorting_network::<f64>(5).unwrap().layers().len(), 10);
        assert_eq!(build_sorting_network::<f64>(7).unwrap().layers().len(), 21);
        let mut net = build_sorting_network::<f64>(2).unwrap();
        assert_eq!(net.layers().len(), 1);
        net.layers_mut()[0].set_shift(1);
        assert_eq!(net.permutation(), vec![1, 0]);
    }

    fn permutations(k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
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

    /// Sets swap states so the stack maps u to target[u], by bubble-sorting
    /// the values backwards through the network.
    fn configure(net: &mut FlowStack<f64>, target: &[usize]) {
        let k = target.len();
        // current[i] = where position i's original element must finally go
        let mut current = target.to_vec();
        let mut idx = 0;
        for pass in 0..k - 1 {
            for j in 0..k - 1 - pass {
                let swap = current[j] > current[j + 1];
                if swap {
                    current.swap(j, j + 1);
                }
                net.layers_mut()[idx].set_shift(usize::from(swap));
                idx += 1;
            }
        }
    }

    #[test]
    fn sorting_network_reaches_every_permutation() {
        for k in 2..=6 {
            let mut net = build_sorting_network::<f64>(k).unwrap();
            for target in permutations(k) {
                configure(&mut net, &target);
                assert_eq!(net.permutation(), target);
            }
        }
    }

    #[test]
    fn stack_traced_round_trip() {
        let mut rng = SeededRng::new(21);
        let mut stack = FlowStack::new(
            6,
            vec![
                DiscreteFlow::shift_only(6).unwrap(),
                DiscreteFlow::loc_scale(6, 5).unwrap(),
                DiscreteFlow::partial(6, vec![2, 4, 5]).unwrap(),
                DiscreteFlow::affine(6).unwrap(),
            ],
        )
        .unwrap();
        stack.randomize(&mut rng);
        for u in 0..6 {
            let mut tape = Tape::new();
            let leaves = stack.bind(&mut tape);
            let m = stack.materialize(&mut tape, &leaves, tau1()).unwrap();
            let uv = tape.one_hot(u, 6);
            let x = stack.forward(&mut tape, &m, uv).unwrap();
            assert_eq!(argmax(tape.value(x)), stack.forward_index(u));
            let back = stack.inverse(&mut tape, &m, x).unwrap();
            assert_eq!(argmax(tape.value(back)), u);
        }
        assert!(FlowStack::new(5, vec![DiscreteFlow::<f64>::shift_only(4).unwrap()]).is_err());
    }
}
