//! Reverse-mode differentiation over short dense vectors.
//!
//! A [`Tape`] records every operation of one optimisation step as a node in
//! an append-only arena. Values of all nodes live in a single flat buffer, so
//! recording a step allocates nothing once the tape has warmed up. Parents
//! always precede their consumers, which makes the arena order a valid
//! topological order for the reverse sweep.
//!
//! The operation set is deliberately small: it covers what discrete flows,
//! flow mixtures and the variational objectives need, including the
//! straight-through rule (forward: one-hot of the argmax, backward: identity).
//!
//! ```
//! use mdnf::diffcore::{Tape, Temperature};
//!
//! let mut tape = Tape::<f64>::new();
//! let logits = tape.leaf(&[1.0, 0.0]);
//! let probs = tape.softmax_temp(logits, Temperature::new(1.0).unwrap()).unwrap();
//! let table = tape.constant(&[0.0, 2.0]);
//! let out = tape.log_lookup(probs, table);
//! let grads = tape.backward(out).unwrap();
//! assert_eq!(grads.wrt(logits).len(), 2);
//! ```

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Finite stand-in for `ln 0` used by backward rules of log-table lookups.
///
/// `exp(-745)` is the smallest positive subnormal double.
pub const LOG_FLOOR: f64 = -745.0;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(u32);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Strictly positive, finite softmax temperature.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Temperature<T>(T);

impl<T: Real> Temperature<T> {
    pub fn new(tau: T) -> Result<Self> {
        if tau.is_finite() && tau > T::zero() {
            Ok(Self(tau))
        } else {
            Err(Error::InvalidInput(format!("temperature must be positive and finite, got {tau}")))
        }
    }

    #[inline]
    pub fn value(self) -> T {
        self.0
    }
}

/// How a fused mixture log-probability combines components across dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixtureLayout {
    /// One component index shared by all dimensions of a sample.
    Joint,
    /// An independent one-dimensional mixture per dimension.
    PerDimension,
}

#[derive(Clone, Copy, Debug)]
struct Span {
    start: u32,
    len: u32,
}

impl Span {
    #[inline]
    fn range(self) -> std::ops::Range<usize> {
        self.start as usize..(self.start + self.len) as usize
    }
}

#[derive(Clone, Copy, Debug)]
enum Op<T> {
    Leaf,
    Constant,
    SoftmaxTemp { src: NodeId, tau: T },
    StraightThrough { src: NodeId },
    CircularConvolve { a: NodeId, b: NodeId },
    CircularCorrelate { a: NodeId, b: NodeId },
    Permute { src: NodeId, map: Span },
    Select { src: NodeId, idx: Span },
    Splice { base: NodeId, sub: NodeId, idx: Span },
    UnitScale { sigma: NodeId, u: NodeId, units: Span },
    LogLookup { x: NodeId, table: NodeId, floor: T },
    LogDot { x: NodeId, p: NodeId },
    Outer { a: NodeId, b: NodeId },
    LinearMap { x: NodeId, matrix: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { src: NodeId, factor: T },
    Sum { src: NodeId },
    Stack { items: Span },
    SumScalars { items: Span, weight: T },
    LogSumExp { src: NodeId },
    Entropy { src: NodeId },
    Sigmoid { src: NodeId },
    LogSigmoid { src: NodeId },
    GsLogDensity { x: NodeId, p: NodeId, tau: T },
    MixtureLogProb { xs: Span, rs: Span, log_rho: NodeId, layout: MixtureLayout },
}

#[derive(Clone, Copy, Debug)]
struct Node<T> {
    op: Op<T>,
    value: Span,
}

/// Append-only record of one traced computation.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    values: Vec<T>,
    grads: Vec<T>,
    links: Vec<NodeId>,
    indices: Vec<usize>,
    scratch: Vec<T>,
}

/// Gradients of the last reverse sweep, borrowed from the tape.
pub struct Gradients<'a, T> {
    tape: &'a Tape<T>,
}

impl<'a, T: Real> Gradients<'a, T> {
    /// Gradient of the sweep root with respect to `node`.
    pub fn wrt(&self, node: NodeId) -> &'a [T] {
        &self.tape.grads[self.tape.nodes[node.index()].value.range()]
    }

    /// All leaves with their gradients, in recording order.
    pub fn leaves(&self) -> impl Iterator<Item = (NodeId, &'a [T])> + '_ {
        let tape = self.tape;
        tape.nodes.iter().enumerate().filter_map(move |(i, n)| match n.op {
            Op::Leaf => Some((NodeId(i as u32), &tape.grads[n.value.range()])),
            _ => None,
        })
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            links: Vec::new(),
            indices: Vec::new(),
            scratch: Vec::new(),
        }
    }

    /// Drops all recorded nodes, keeping allocated capacity.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.values.clear();
        self.links.clear();
        self.indices.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, node: NodeId) -> &[T] {
        &self.values[self.nodes[node.index()].value.range()]
    }

    /// Value of a scalar node.
    #[inline]
    pub fn scalar(&self, node: NodeId) -> T {
        let v = self.value(node);
        debug_assert_eq!(v.len(), 1, "node is not scalar");
        v[0]
    }

    #[inline]
    fn dim(&self, node: NodeId) -> usize {
        self.nodes[node.index()].value.len as usize
    }

    fn push<F>(&mut self, op: Op<T>, len: usize, fill: F) -> NodeId
    where
        F: FnOnce(&Self, &mut [T]),
    {
        let start = self.values.len();
        let mut out = std::mem::take(&mut self.scratch);
        out.clear();
        out.resize(len, T::zero());
        fill(self, &mut out);
        self.values.extend_from_slice(&out);
        self.scratch = out;
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node {
            op,
            value: Span {
                start: start as u32,
                len: len as u32,
            },
        });
        id
    }

    fn push_links(&mut self, items: &[NodeId]) -> Span {
        let start = self.links.len();
        self.links.extend_from_slice(items);
        Span {
            start: start as u32,
            len: items.len() as u32,
        }
    }

    fn push_indices(&mut self, items: &[usize]) -> Span {
        let start = self.indices.len();
        self.indices.extend_from_slice(items);
        Span {
            start: start as u32,
            len: items.len() as u32,
        }
    }

    /// Trainable input vector.
    pub fn leaf(&mut self, value: &[T]) -> NodeId {
        self.push(Op::Leaf, value.len(), |_, out| out.copy_from_slice(value))
    }

    pub fn constant(&mut self, value: &[T]) -> NodeId {
        self.push(Op::Constant, value.len(), |_, out| out.copy_from_slice(value))
    }

    pub fn one_hot(&mut self, index: usize, len: usize) -> NodeId {
        assert!(index < len, "one-hot index {index} out of range {len}");
        self.push(Op::Constant, len, |_, out| out[index] = T::one())
    }

    /// `softmax(logits / tau)`.
    pub fn softmax_temp(&mut self, logits: NodeId, tau: Temperature<T>) -> Result<NodeId> {
        let v = self.value(logits);
        if v.is_empty() {
            return Err(Error::InvalidInput("softmax of an empty vector".into()));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("softmax logits must be finite".into()));
        }
        let tau = tau.value();
        let len = v.len();
        Ok(self.push(Op::SoftmaxTemp { src: logits, tau }, len, |t, out| {
            softmax_into(t.value(logits), tau, out)
        }))
    }

    /// Forward: one-hot of the argmax (lowest index wins ties).
    /// Backward: the incoming gradient passes through unchanged.
    pub fn straight_through(&mut self, relaxed: NodeId) -> NodeId {
        let len = self.dim(relaxed);
        self.push(Op::StraightThrough { src: relaxed }, len, |t, out| {
            out[argmax(t.value(relaxed))] = T::one();
        })
    }

    /// `out[k] = sum_j a[j] * b[(k - j) mod K]`.
    ///
    /// One-hots at `i` and `j` map to the one-hot at `(i + j) mod K`.
    pub fn circular_convolve(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let k = self.check_same_len(a, b, "circular_convolve")?;
        Ok(self.push(Op::CircularConvolve { a, b }, k, |t, out| {
            let (av, bv) = (t.value(a), t.value(b));
            for (j, &aj) in av.iter().enumerate() {
                if aj == T::zero() {
                    continue;
                }
                for (m, &bm) in bv.iter().enumerate() {
                    out[(j + m) % k] += aj * bm;
                }
            }
        }))
    }

    /// `out[k] = sum_j a[j] * b[(j - k) mod K]`, the inverse shift of `a` by `b`.
    pub fn circular_correlate(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let k = self.check_same_len(a, b, "circular_correlate")?;
        Ok(self.push(Op::CircularCorrelate { a, b }, k, |t, out| {
            let (av, bv) = (t.value(a), t.value(b));
            for (j, &aj) in av.iter().enumerate() {
                if aj == T::zero() {
                    continue;
                }
                for (m, &bm) in bv.iter().enumerate() {
                    out[(j + k - m) % k] += aj * bm;
                }
            }
        }))
    }

    fn check_same_len(&self, a: NodeId, b: NodeId, what: &str) -> Result<usize> {
        let (la, lb) = (self.dim(a), self.dim(b));
        if la != lb || la == 0 {
            return Err(Error::InvalidInput(format!(
                "{what}: length mismatch ({la} vs {lb})"
            )));
        }
        Ok(la)
    }

    /// `out[map[i]] = src[i]`; `map` must be a permutation.
    pub fn permute(&mut self, src: NodeId, map: &[usize]) -> NodeId {
        let len = self.dim(src);
        assert_eq!(map.len(), len, "permutation length mismatch");
        let span = self.push_indices(map);
        self.push(Op::Permute { src, map: span }, len, |t, out| {
            let v = t.value(src);
            for (i, &m) in t.indices[span.range()].iter().enumerate() {
                out[m] = v[i];
            }
        })
    }

    /// `out[i] = src[idx[i]]`.
    pub fn select(&mut self, src: NodeId, idx: &[usize]) -> NodeId {
        let n = self.dim(src);
        assert!(idx.iter().all(|&i| i < n), "select index out of range");
        let span = self.push_indices(idx);
        self.push(Op::Select { src, idx: span }, idx.len(), |t, out| {
            let v = t.value(src);
            for (o, &i) in out.iter_mut().zip(&t.indices[span.range()]) {
                *o = v[i];
            }
        })
    }

    /// Copy of `base` with positions `idx[i]` overwritten by `sub[i]`.
    pub fn splice(&mut self, base: NodeId, sub: NodeId, idx: &[usize]) -> NodeId {
        let n = self.dim(base);
        assert_eq!(self.dim(sub), idx.len(), "splice length mismatch");
        assert!(idx.iter().all(|&i| i < n), "splice index out of range");
        let span = self.push_indices(idx);
        self.push(Op::Splice { base, sub, idx: span }, n, |t, out| {
            out.copy_from_slice(t.value(base));
            let s = t.value(sub);
            for (i, &p) in t.indices[span.range()].iter().enumerate() {
                out[p] = s[i];
            }
        })
    }

    /// Multiplicative relabelling `out[(units[t] * i) mod K] += sigma[t] * u[i]`,
    /// bilinear in a one-hot choice over the unit group and the input.
    pub fn unit_scale(&mut self, sigma: NodeId, u: NodeId, units: &[usize]) -> NodeId {
        let k = self.dim(u);
        assert_eq!(self.dim(sigma), units.len(), "unit_scale length mismatch");
        let span = self.push_indices(units);
        self.push(Op::UnitScale { sigma, u, units: span }, k, |t, out| {
            let (sv, uv) = (t.value(sigma), t.value(u));
            for (&s, &unit) in sv.iter().zip(&t.indices[span.range()]) {
                if s == T::zero() {
                    continue;
                }
                for (i, &ui) in uv.iter().enumerate() {
                    out[(unit * i) % k] += s * ui;
                }
            }
        })
    }

    /// `sum_k x[k] * table[k]`, skipping `x[k] == 0` so that impossible
    /// entries (`-inf`) only count where `x` has support. The backward rule
    /// substitutes [`LOG_FLOOR`] for `-inf` table entries.
    pub fn log_lookup(&mut self, x: NodeId, table: NodeId) -> NodeId {
        self.log_lookup_with_floor(x, table, T::lit(LOG_FLOOR))
    }

    pub fn log_lookup_with_floor(&mut self, x: NodeId, table: NodeId, floor: T) -> NodeId {
        assert_eq!(self.dim(x), self.dim(table), "log_lookup length mismatch");
        self.push(Op::LogLookup { x, table, floor }, 1, |t, out| {
            let mut acc = T::zero();
            for (&xk, &tk) in t.value(x).iter().zip(t.value(table)) {
                if xk != T::zero() {
                    acc += xk * tk;
                }
            }
            out[0] = acc;
        })
    }

    /// `ln(sum_k x[k] * p[k])`.
    pub fn log_dot(&mut self, x: NodeId, p: NodeId) -> NodeId {
        assert_eq!(self.dim(x), self.dim(p), "log_dot length mismatch");
        self.push(Op::LogDot { x, p }, 1, |t, out| {
            out[0] = dot(t.value(x), t.value(p)).ln();
        })
    }

    /// Row-major outer product, `out[i * |b| + j] = a[i] * b[j]`.
    pub fn outer(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, n) = (self.dim(a), self.dim(b));
        self.push(Op::Outer { a, b }, m * n, |t, out| {
            let bv = t.value(b);
            for (i, &ai) in t.value(a).iter().enumerate() {
                for (j, &bj) in bv.iter().enumerate() {
                    out[i * n + j] = ai * bj;
                }
            }
        })
    }

    /// `out[c] = sum_r x[r] * matrix[r * cols + c]`.
    pub fn linear_map(&mut self, x: NodeId, matrix: NodeId) -> NodeId {
        let rows = self.dim(x);
        let total = self.dim(matrix);
        assert!(rows > 0 && total.is_multiple_of(rows), "linear_map shape mismatch");
        let cols = total / rows;
        self.push(Op::LinearMap { x, matrix }, cols, |t, out| {
            let m = t.value(matrix);
            for (r, &xr) in t.value(x).iter().enumerate() {
                if xr == T::zero() {
                    continue;
                }
                for (c, o) in out.iter_mut().enumerate() {
                    *o += xr * m[r * cols + c];
                }
            }
        })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let n = self.dim(a);
        assert_eq!(n, self.dim(b), "add length mismatch");
        self.push(Op::Add { a, b }, n, |t, out| {
            for ((o, &x), &y) in out.iter_mut().zip(t.value(a)).zip(t.value(b)) {
                *o = x + y;
            }
        })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let n = self.dim(a);
        assert_eq!(n, self.dim(b), "sub length mismatch");
        self.push(Op::Sub { a, b }, n, |t, out| {
            for ((o, &x), &y) in out.iter_mut().zip(t.value(a)).zip(t.value(b)) {
                *o = x - y;
            }
        })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let n = self.dim(a);
        assert_eq!(n, self.dim(b), "mul length mismatch");
        self.push(Op::Mul { a, b }, n, |t, out| {
            for ((o, &x), &y) in out.iter_mut().zip(t.value(a)).zip(t.value(b)) {
                *o = x * y;
            }
        })
    }

    pub fn scale(&mut self, src: NodeId, factor: T) -> NodeId {
        let n = self.dim(src);
        self.push(Op::Scale { src, factor }, n, |t, out| {
            for (o, &x) in out.iter_mut().zip(t.value(src)) {
                *o = x * factor;
            }
        })
    }

    /// Sum of all entries of a vector.
    pub fn sum(&mut self, src: NodeId) -> NodeId {
        self.push(Op::Sum { src }, 1, |t, out| out[0] = t.value(src).iter().copied().sum())
    }

    /// Collects scalar nodes into one vector.
    pub fn stack(&mut self, items: &[NodeId]) -> NodeId {
        debug_assert!(items.iter().all(|&i| self.dim(i) == 1));
        let span = self.push_links(items);
        self.push(Op::Stack { items: span }, items.len(), |t, out| {
            for (o, &i) in out.iter_mut().zip(&t.links[span.range()]) {
                *o = t.scalar(i);
            }
        })
    }

    pub fn sum_scalars(&mut self, items: &[NodeId]) -> NodeId {
        self.weighted_sum(items, T::one())
    }

    pub fn mean_scalars(&mut self, items: &[NodeId]) -> NodeId {
        assert!(!items.is_empty(), "mean of no scalars");
        self.weighted_sum(items, T::one() / T::lit(items.len() as f64))
    }

    fn weighted_sum(&mut self, items: &[NodeId], weight: T) -> NodeId {
        debug_assert!(items.iter().all(|&i| self.dim(i) == 1));
        let span = self.push_links(items);
        self.push(Op::SumScalars { items: span, weight }, 1, |t, out| {
            let s: T = t.links[span.range()].iter().map(|&i| t.scalar(i)).sum();
            out[0] = weight * s;
        })
    }

    pub fn logsumexp(&mut self, src: NodeId) -> NodeId {
        self.push(Op::LogSumExp { src }, 1, |t, out| out[0] = logsumexp(t.value(src)))
    }

    /// `-sum_k p[k] ln p[k]` with `0 ln 0 = 0`.
    pub fn entropy(&mut self, src: NodeId) -> NodeId {
        self.push(Op::Entropy { src }, 1, |t, out| {
            out[0] = -t
                .value(src)
                .iter()
                .filter(|&&p| p > T::zero())
                .map(|&p| p * p.ln())
                .sum::<T>();
        })
    }

    pub fn sigmoid(&mut self, src: NodeId) -> NodeId {
        let n = self.dim(src);
        self.push(Op::Sigmoid { src }, n, |t, out| {
            for (o, &a) in out.iter_mut().zip(t.value(src)) {
                *o = sigmoid(a);
            }
        })
    }

    pub fn log_sigmoid(&mut self, src: NodeId) -> NodeId {
        let n = self.dim(src);
        self.push(Op::LogSigmoid { src }, n, |t, out| {
            for (o, &a) in out.iter_mut().zip(t.value(src)) {
                *o = log_sigmoid(a);
            }
        })
    }

    /// Log density of the Gumbel-Softmax distribution with class
    /// probabilities `p` at the relaxed sample `x`. Entries of `x` and `p`
    /// are clamped away from zero so the trace stays finite.
    pub fn gs_log_density(&mut self, x: NodeId, p: NodeId, tau: T) -> NodeId {
        assert_eq!(self.dim(x), self.dim(p), "gs_log_density length mismatch");
        self.push(Op::GsLogDensity { x, p, tau }, 1, |t, out| {
            out[0] = gs_log_density_clamped(t.value(x), t.value(p), tau);
        })
    }

    /// Log-probability of one-hot samples `xs` (one node per dimension)
    /// under a mixture whose component `b` assigns dimension `d` the
    /// probability vector `rs[b * D + d]`, with log mixing weights `log_rho`.
    pub fn mixture_log_prob(
        &mut self,
        xs: &[NodeId],
        rs: &[NodeId],
        log_rho: NodeId,
        layout: MixtureLayout,
    ) -> NodeId {
        let d = xs.len();
        let b = self.dim(log_rho);
        assert!(d > 0 && b > 0, "empty mixture");
        assert_eq!(rs.len(), b * d, "mixture_log_prob expects B*D pushforward vectors");
        let xs_span = self.push_links(xs);
        let rs_span = self.push_links(rs);
        self.push(
            Op::MixtureLogProb {
                xs: xs_span,
                rs: rs_span,
                log_rho,
                layout,
            },
            1,
            |t, out| {
                let xs = &t.links[xs_span.range()];
                let rs = &t.links[rs_span.range()];
                out[0] = mixture_value(t, xs, rs, t.value(log_rho), layout);
            },
        )
    }

    /// Reverse sweep from the scalar `root`. Gradients of every node recorded
    /// up to `root` are recomputed from zero.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients<'_, T>> {
        if root.index() >= self.nodes.len() {
            return Err(Error::InvalidInput("root is not on this tape".into()));
        }
        if self.dim(root) != 1 {
            return Err(Error::InvalidInput("reverse sweep root must be scalar".into()));
        }
        self.grads.clear();
        self.grads.resize(self.values.len(), T::zero());
        let root_start = self.nodes[root.index()].value.start as usize;
        self.grads[root_start] = T::one();

        let mut grads = std::mem::take(&mut self.grads);
        let mut scratch = std::mem::take(&mut self.scratch);
        let result = (0..=root.index())
            .rev()
            .try_for_each(|i| self.backward_node(i, &mut grads, &mut scratch));
        self.grads = grads;
        self.scratch = scratch;
        result?;
        Ok(Gradients { tape: self })
    }

    fn backward_node(&self, i: usize, grads: &mut [T], scratch: &mut Vec<T>) -> Result<()> {
        let node = self.nodes[i];
        let span = node.value.range();
        let (lower, upper) = grads.split_at_mut(span.start);
        let g = &upper[..span.len()];
        if g.iter().all(|&x| x == T::zero()) {
            return Ok(());
        }
        let here = NodeId(i as u32);
        let check = |p: NodeId| -> Result<()> {
            if p >= here {
                Err(Error::Internal(format!("cycle: node {i} consumes node {}", p.index())))
            } else {
                Ok(())
            }
        };
        let range = |id: NodeId| self.nodes[id.index()].value.range();
        let val = |id: NodeId| &self.values[range(id)];

        match node.op {
            Op::Leaf | Op::Constant => {}
            Op::SoftmaxTemp { src, tau } => {
                check(src)?;
                let y = &self.values[span.clone()];
                let inner = dot(g, y);
                let dst = &mut lower[range(src)];
                for ((d, &gk), &yk) in dst.iter_mut().zip(g).zip(y) {
                    *d += yk * (gk - inner) / tau;
                }
            }
            Op::StraightThrough { src } => {
                check(src)?;
                for (d, &gk) in lower[range(src)].iter_mut().zip(g) {
                    *d += gk;
                }
            }
            Op::CircularConvolve { a, b } => {
                check(a)?;
                check(b)?;
                let k = g.len();
                let (av, bv) = (val(a), val(b));
                // d a[j] = sum_m g[(j + m) mod K] b[m]
                scratch.clear();
                scratch.resize(k, T::zero());
                for j in 0..k {
                    scratch[j] = (0..k).map(|m| g[(j + m) % k] * bv[m]).sum();
                }
                add_into(&mut lower[range(a)], scratch);
                for m in 0..k {
                    scratch[m] = (0..k).map(|j| g[(j + m) % k] * av[j]).sum();
                }
                add_into(&mut lower[range(b)], scratch);
            }
            Op::CircularCorrelate { a, b } => {
                check(a)?;
                check(b)?;
                let k = g.len();
                let (av, bv) = (val(a), val(b));
                // out[(j - m) mod K] += a[j] b[m]
                scratch.clear();
                scratch.resize(k, T::zero());
                for j in 0..k {
                    scratch[j] = (0..k).map(|m| g[(j + k - m) % k] * bv[m]).sum();
                }
                add_into(&mut lower[range(a)], scratch);
                for m in 0..k {
                    scratch[m] = (0..k).map(|j| g[(j + k - m) % k] * av[j]).sum();
                }
                add_into(&mut lower[range(b)], scratch);
            }
            Op::Permute { src, map } => {
                check(src)?;
                let dst = &mut lower[range(src)];
                for (i, &m) in self.indices[map.range()].iter().enumerate() {
                    dst[i] += g[m];
                }
            }
            Op::Select { src, idx } => {
                check(src)?;
                let dst = &mut lower[range(src)];
                for (i, &p) in self.indices[idx.range()].iter().enumerate() {
                    dst[p] += g[i];
                }
            }
            Op::Splice { base, sub, idx } => {
                check(base)?;
                check(sub)?;
                let positions = &self.indices[idx.range()];
                scratch.clear();
                scratch.extend_from_slice(g);
                for &p in positions {
                    scratch[p] = T::zero();
                }
                add_into(&mut lower[range(base)], scratch);
                let dst = &mut lower[range(sub)];
                for (i, &p) in positions.iter().enumerate() {
                    dst[i] += g[p];
                }
            }
            Op::UnitScale { sigma, u, units } => {
                check(sigma)?;
                check(u)?;
                let k = g.len();
                let (sv, uv) = (val(sigma), val(u));
                let units = &self.indices[units.range()];
                scratch.clear();
                scratch.resize(sv.len(), T::zero());
                for (t, &unit) in units.iter().enumerate() {
                    scratch[t] = (0..k).map(|i| g[(unit * i) % k] * uv[i]).sum();
                }
                add_into(&mut lower[range(sigma)], scratch);
                let dst = &mut lower[range(u)];
                for (t, &unit) in units.iter().enumerate() {
                    if sv[t] == T::zero() {
                        continue;
                    }
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d += sv[t] * g[(unit * i) % k];
                    }
                }
            }
            Op::LogLookup { x, table, floor } => {
                check(x)?;
                check(table)?;
                let g0 = g[0];
                let (xv, tv) = (val(x), val(table));
                scratch.clear();
                scratch.extend(tv.iter().map(|&tk| {
                    let tk = if tk == T::neg_infinity() { floor } else { tk };
                    g0 * tk
                }));
                add_into(&mut lower[range(x)], scratch);
                scratch.clear();
                scratch.extend(xv.iter().map(|&xk| g0 * xk));
                add_into(&mut lower[range(table)], scratch);
            }
            Op::LogDot { x, p } => {
                check(x)?;
                check(p)?;
                let (xv, pv) = (val(x), val(p));
                let s = dot(xv, pv);
                if s > T::zero() {
                    let c = g[0] / s;
                    scratch.clear();
                    scratch.extend(pv.iter().map(|&pk| c * pk));
                    add_into(&mut lower[range(x)], scratch);
                    scratch.clear();
                    scratch.extend(xv.iter().map(|&xk| c * xk));
                    add_into(&mut lower[range(p)], scratch);
                }
            }
            Op::Outer { a, b } => {
                check(a)?;
                check(b)?;
                let (av, bv) = (val(a), val(b));
                let n = bv.len();
                scratch.clear();
                scratch.extend((0..av.len()).map(|i| dot(&g[i * n..(i + 1) * n], bv)));
                add_into(&mut lower[range(a)], scratch);
                scratch.clear();
                scratch.extend((0..n).map(|j| (0..av.len()).map(|i| g[i * n + j] * av[i]).sum::<T>()));
                add_into(&mut lower[range(b)], scratch);
            }
            Op::LinearMap { x, matrix } => {
                check(x)?;
                check(matrix)?;
                let (xv, mv) = (val(x), val(matrix));
                let cols = g.len();
                scratch.clear();
                scratch.extend((0..xv.len()).map(|r| dot(&mv[r * cols..(r + 1) * cols], g)));
                add_into(&mut lower[range(x)], scratch);
                scratch.clear();
                scratch.extend(xv.iter().flat_map(|&xr| g.iter().map(move |&gc| xr * gc)));
                add_into(&mut lower[range(matrix)], scratch);
            }
            Op::Add { a, b } => {
                check(a)?;
                check(b)?;
                add_into(&mut lower[range(a)], g);
                add_into(&mut lower[range(b)], g);
            }
            Op::Sub { a, b } => {
                check(a)?;
                check(b)?;
                add_into(&mut lower[range(a)], g);
                for (d, &gk) in lower[range(b)].iter_mut().zip(g) {
                    *d -= gk;
                }
            }
            Op::Mul { a, b } => {
                check(a)?;
                check(b)?;
                scratch.clear();
                scratch.extend(g.iter().zip(val(b)).map(|(&gk, &bk)| gk * bk));
                add_into(&mut lower[range(a)], scratch);
                scratch.clear();
                scratch.extend(g.iter().zip(val(a)).map(|(&gk, &ak)| gk * ak));
                add_into(&mut lower[range(b)], scratch);
            }
            Op::Scale { src, factor } => {
                check(src)?;
                for (d, &gk) in lower[range(src)].iter_mut().zip(g) {
                    *d += gk * factor;
                }
            }
            Op::Sum { src } => {
                check(src)?;
                for d in &mut lower[range(src)] {
                    *d += g[0];
                }
            }
            Op::Stack { items } => {
                for (k, &item) in self.links[items.range()].iter().enumerate() {
                    check(item)?;
                    lower[range(item).start] += g[k];
                }
            }
            Op::SumScalars { items, weight } => {
                let gw = g[0] * weight;
                for &item in &self.links[items.range()] {
                    check(item)?;
                    lower[range(item).start] += gw;
                }
            }
            Op::LogSumExp { src } => {
                check(src)?;
                let out = self.values[span.start];
                if out.is_finite() {
                    for (d, &a) in lower[range(src)].iter_mut().zip(val(src)) {
                        *d += g[0] * (a - out).exp();
                    }
                }
            }
            Op::Entropy { src } => {
                check(src)?;
                for (d, &p) in lower[range(src)].iter_mut().zip(val(src)) {
                    if p > T::zero() {
                        *d -= g[0] * (p.ln() + T::one());
                    }
                }
            }
            Op::Sigmoid { src } => {
                check(src)?;
                let y = &self.values[span.clone()];
                for ((d, &gk), &yk) in lower[range(src)].iter_mut().zip(g).zip(y) {
                    *d += gk * yk * (T::one() - yk);
                }
            }
            Op::LogSigmoid { src } => {
                check(src)?;
                for ((d, &gk), &a) in lower[range(src)].iter_mut().zip(g).zip(val(src)) {
                    *d += gk * sigmoid(-a);
                }
            }
            Op::GsLogDensity { x, p, tau } => {
                check(x)?;
                check(p)?;
                let (xv, pv) = (val(x), val(p));
                let k = T::lit(xv.len() as f64);
                let tiny = T::min_positive_value();
                let p_floor = T::lit(GS_PROB_FLOOR);
                scratch.clear();
                scratch.extend(
                    xv.iter()
                        .zip(pv)
                        .map(|(&xk, &pk)| pk.max(p_floor).ln() - tau * xk.max(tiny).ln()),
                );
                let lse = logsumexp(scratch);
                for z in scratch.iter_mut() {
                    *z = (*z - lse).exp();
                }
                let w = scratch.clone();
                scratch.clear();
                scratch.extend(xv.iter().zip(&w).map(|(&xk, &wk)| {
                    g[0] * (-(tau + T::one()) + k * tau * wk) / xk.max(tiny)
                }));
                add_into(&mut lower[range(x)], scratch);
                scratch.clear();
                scratch.extend(pv.iter().zip(&w).map(|(&pk, &wk)| {
                    g[0] * (T::one() - k * wk) / pk.max(p_floor)
                }));
                add_into(&mut lower[range(p)], scratch);
            }
            Op::MixtureLogProb { xs, rs, log_rho, layout } => {
                let xs = &self.links[xs.range()];
                let rs = &self.links[rs.range()];
                check(log_rho)?;
                for &id in xs.iter().chain(rs) {
                    check(id)?;
                }
                let out = self.values[span.start];
                mixture_backward(self, lower, g[0], out, xs, rs, log_rho, layout, scratch);
            }
        }
        Ok(())
    }
}

/// Relative floor applied to class probabilities inside the Gumbel-Softmax
/// density, which is undefined for zero-probability classes.
pub const GS_PROB_FLOOR: f64 = 1e-12;

fn softmax_into<T: Real>(logits: &[T], tau: T, out: &mut [T]) {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = ((l - m) / tau).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Numerically stable `ln sum exp`; `-inf` when every entry is `-inf`.
pub fn logsumexp<T: Real>(v: &[T]) -> T {
    let m = v.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

#[inline]
fn sigmoid<T: Real>(a: T) -> T {
    if a >= T::zero() {
        T::one() / (T::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn log_sigmoid<T: Real>(a: T) -> T {
    // -softplus(-a)
    if a >= T::zero() {
        -(-a).exp().ln_1p()
    } else {
        a - a.exp().ln_1p()
    }
}

pub(crate) fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|i| (i as f64).ln()).sum()
}

pub(crate) fn gs_log_density_clamped<T: Real>(x: &[T], p: &[T], tau: T) -> T {
    let k = x.len();
    let tiny = T::min_positive_value();
    let p_floor = T::lit(GS_PROB_FLOOR);
    let mut base = T::lit(k as f64 - 1.0) * tau.ln() + T::lit(ln_factorial(k - 1));
    let mut z = Vec::with_capacity(k);
    for (&xk, &pk) in x.iter().zip(p) {
        let lx = xk.max(tiny).ln();
        let lp = pk.max(p_floor).ln();
        base += lp - (tau + T::one()) * lx;
        z.push(lp - tau * lx);
    }
    base - T::lit(k as f64) * logsumexp(&z)
}

fn mixture_value<T: Real>(
    tape: &Tape<T>,
    xs: &[NodeId],
    rs: &[NodeId],
    log_rho: &[T],
    layout: MixtureLayout,
) -> T {
    let d = xs.len();
    let log_a = |b: usize, k: usize| dot(tape.value(xs[k]), tape.value(rs[b * d + k])).ln();
    match layout {
        MixtureLayout::Joint => {
            let terms: Vec<T> = log_rho
                .iter()
                .enumerate()
                .map(|(b, &lr)| lr + (0..d).map(|k| log_a(b, k)).sum::<T>())
                .collect();
            logsumexp(&terms)
        }
        MixtureLayout::PerDimension => (0..d)
            .map(|k| {
                let terms: Vec<T> = log_rho
                    .iter()
                    .enumerate()
                    .map(|(b, &lr)| lr + log_a(b, k))
                    .collect();
                logsumexp(&terms)
            })
            .sum(),
    }
}

#[allow(clippy::too_many_arguments)]
fn mixture_backward<T: Real>(
    tape: &Tape<T>,
    lower: &mut [T],
    g: T,
    out: T,
    xs: &[NodeId],
    rs: &[NodeId],
    log_rho: NodeId,
    layout: MixtureLayout,
    scratch: &mut Vec<T>,
) {
    let d = xs.len();
    let lr = tape.value(log_rho);
    let nb = lr.len();
    let range = |id: NodeId| tape.nodes[id.index()].value.range();
    // log a[b][k], row-major in scratch
    scratch.clear();
    for b in 0..nb {
        for k in 0..d {
            scratch.push(dot(tape.value(xs[k]), tape.value(rs[b * d + k])).ln());
        }
    }
    let log_a = scratch.clone();
    let mut d_log_rho = vec![T::zero(); nb];
    match layout {
        MixtureLayout::Joint => {
            if !out.is_finite() {
                return;
            }
            let mut prefix = vec![T::zero(); d + 1];
            let mut suffix = vec![T::zero(); d + 1];
            for b in 0..nb {
                let row = &log_a[b * d..(b + 1) * d];
                for k in 0..d {
                    prefix[k + 1] = prefix[k] + row[k];
                }
                suffix[d] = T::zero();
                for k in (0..d).rev() {
                    suffix[k] = suffix[k + 1] + row[k];
                }
                d_log_rho[b] = g * (lr[b] + prefix[d] - out).exp();
                for k in 0..d {
                    let coef = g * (lr[b] + prefix[k] + suffix[k + 1] - out).exp();
                    if coef == T::zero() || !coef.is_finite() {
                        continue;
                    }
                    accumulate_pair(tape, lower, &range, xs[k], rs[b * d + k], coef);
                }
            }
        }
        MixtureLayout::PerDimension => {
            for k in 0..d {
                let terms: Vec<T> = (0..nb).map(|b| lr[b] + log_a[b * d + k]).collect();
                let v = logsumexp(&terms);
                if !v.is_finite() {
                    continue;
                }
                for b in 0..nb {
                    d_log_rho[b] += g * (terms[b] - v).exp();
                    let coef = g * (lr[b] - v).exp();
                    if coef == T::zero() {
                        continue;
                    }
                    accumulate_pair(tape, lower, &range, xs[k], rs[b * d + k], coef);
                }
            }
        }
    }
    add_into(&mut lower[range(log_rho)], &d_log_rho);
}

/// d<x, r> scaled by `coef`: x receives `coef * r`, r receives `coef * x`.
fn accumulate_pair<T: Real>(
    tape: &Tape<T>,
    lower: &mut [T],
    range: &impl Fn(NodeId) -> std::ops::Range<usize>,
    x: NodeId,
    r: NodeId,
    coef: T,
) {
    let (rx, rr) = (range(x), range(r));
    for i in 0..rx.len() {
        let rv = tape.values[rr.start + i];
        let xv = tape.values[rx.start + i];
        lower[rx.start + i] += coef * rv;
        lower[rr.start + i] += coef * xv;
    }
}
