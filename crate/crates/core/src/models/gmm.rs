//! Bayesian Gaussian mixture with a Dirichlet prior on the weights and a
//! Gaussian-Wishart prior on each cluster, trained by variational EM.
//!
//! Notation follows the usual textbook treatment: `N_k`, `x̄_k`, `S_k` are
//! responsibility-weighted counts, means and covariances; `(α, β, m, W, ν)`
//! parameterise the variational posterior over weights, means and precisions.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::diffcore::{logsumexp, NodeId, Tape};
use crate::dists::SeededRng;
use crate::error::{Error, Result};
use crate::models::{ModelBinding, TracedModel};
use crate::scalar::Real;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const RIDGE: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GmmPrior {
    pub alpha0: f64,
    pub beta0: f64,
    pub m0: DVector<f64>,
    pub w0: DMatrix<f64>,
    pub nu0: f64,
}

impl GmmPrior {
    /// `α0 = 1/K`, `β0 = 1`, `m0` = data mean, `W0 = I`, `ν0` = feature count.
    pub fn default_for(data: &DMatrix<f64>, k: usize) -> Self {
        let dim = data.ncols();
        let m0 = data.row_mean().transpose();
        Self {
            alpha0: 1.0 / k as f64,
            beta0: 1.0,
            m0,
            w0: DMatrix::identity(dim, dim),
            nu0: dim as f64,
        }
    }
}

/// Data (one point per row) and the current variational posterior.
#[derive(Clone, Debug)]
pub struct GmmState {
    data: DMatrix<f64>,
    prior: GmmPrior,
    w0_inv: DMatrix<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub m: Vec<DVector<f64>>,
    pub w: Vec<DMatrix<f64>>,
    pub nu: Vec<f64>,
    ridge_events: usize,
}

/// Responsibility-weighted statistics of one cluster.
struct ClusterStats {
    n: f64,
    mean: DVector<f64>,
    /// `N_k S_k`
    scatter: DMatrix<f64>,
}

impl GmmState {
    /// Prior-initialised state; call [`Self::m_step`] before using the posterior.
    pub fn new(data: DMatrix<f64>, k: usize, prior: GmmPrior) -> Result<Self> {
        let dim = data.ncols();
        if k == 0 || data.nrows() == 0 || dim == 0 {
            return Err(Error::InvalidInput("GMM needs K >= 1 and non-empty data".into()));
        }
        if prior.m0.len() != dim || prior.w0.shape() != (dim, dim) || prior.nu0 <= dim as f64 - 1.0 {
            return Err(Error::InvalidInput("GMM prior does not match the data dimension".into()));
        }
        let w0_inv = prior
            .w0
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::InvalidInput("W0 is singular".into()))?;
        Ok(Self {
            alpha: vec![prior.alpha0; k],
            beta: vec![prior.beta0; k],
            m: vec![prior.m0.clone(); k],
            w: vec![prior.w0.clone(); k],
            nu: vec![prior.nu0; k],
            data,
            prior,
            w0_inv,
            ridge_events: 0,
        })
    }

    /// Default prior and an M-step from hard assignments to `K` distinct
    /// data points chosen at random.
    pub fn initialise(data: DMatrix<f64>, k: usize, rng: &mut SeededRng) -> Result<Self> {
        let prior = GmmPrior::default_for(&data, k);
        let mut state = Self::new(data, k, prior)?;
        let n = state.points();
        let picks = rand::seq::index::sample(rng, n, k.min(n)).into_vec();
        let centres: Vec<DVector<f64>> = picks.iter().map(|&i| state.point(i)).collect();
        let mut resp = DMatrix::zeros(n, k);
        for i in 0..n {
            let y = state.point(i);
            let best = (0..centres.len())
                .min_by(|&a, &b| (&y - &centres[a]).norm_squared().total_cmp(&(&y - &centres[b]).norm_squared()))
                .unwrap_or(0);
            resp[(i, best)] = 1.0;
        }
        state.m_step(&resp)?;
        Ok(state)
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn prior(&self) -> &GmmPrior {
        &self.prior
    }

    pub fn points(&self) -> usize {
        self.data.nrows()
    }

    pub fn features(&self) -> usize {
        self.data.ncols()
    }

    pub fn clusters(&self) -> usize {
        self.alpha.len()
    }

    /// Number of M-steps whose scatter needed a ridge to invert.
    pub fn ridge_events(&self) -> usize {
        self.ridge_events
    }

    fn point(&self, i: usize) -> DVector<f64> {
        self.data.row(i).transpose()
    }

    fn check_resp(&self, resp: &DMatrix<f64>) -> Result<()> {
        if resp.shape() != (self.points(), self.clusters()) {
            return Err(Error::InvalidInput("responsibilities must be points x clusters".into()));
        }
        for r in resp.row_iter() {
            if r.iter().any(|&v| !(v >= 0.0)) || (r.sum() - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidInput("each responsibility row must lie on the simplex".into()));
            }
        }
        Ok(())
    }

    fn stats(&self, resp: &DMatrix<f64>) -> Vec<ClusterStats> {
        let dim = self.features();
        (0..self.clusters())
            .map(|k| {
                let n: f64 = resp.column(k).sum();
                let mut mean = DVector::zeros(dim);
                if n > 0.0 {
                    for i in 0..self.points() {
                        mean += resp[(i, k)] * self.point(i);
                    }
                    mean /= n;
                }
                let mut scatter = DMatrix::zeros(dim, dim);
                for i in 0..self.points() {
                    let r = resp[(i, k)];
                    if r > 0.0 {
                        let dv = self.point(i) - &mean;
                        scatter += r * &dv * dv.transpose();
                    }
                }
                ClusterStats { n, mean, scatter }
            })
            .collect()
    }

    /// Conjugate updates of `(α, β, m, W, ν)` given responsibilities.
    pub fn m_step(&mut self, resp: &DMatrix<f64>) -> Result<()> {
        self.check_resp(resp)?;
        let p = self.prior.clone();
        let dim = self.features();
        for (k, s) in self.stats(resp).into_iter().enumerate() {
            self.alpha[k] = p.alpha0 + s.n;
            self.beta[k] = p.beta0 + s.n;
            self.nu[k] = p.nu0 + s.n;
            self.m[k] = (p.beta0 * &p.m0 + s.n * &s.mean) / self.beta[k];
            let dm = &s.mean - &p.m0;
            let w_inv = &self.w0_inv + &s.scatter + (p.beta0 * s.n / (p.beta0 + s.n)) * &dm * dm.transpose();
            let w_inv = (&w_inv + w_inv.transpose()) * 0.5;
            self.w[k] = match w_inv.clone().try_inverse() {
                Some(w) if w.iter().all(|v| v.is_finite()) => w,
                _ => {
                    self.ridge_events += 1;
                    (w_inv + RIDGE * DMatrix::identity(dim, dim))
                        .try_inverse()
                        .ok_or_else(|| Error::Domain("cluster scatter is singular even after ridge".into()))?
                }
            };
        }
        Ok(())
    }

    /// `E[ln |Λ_k|]`.
    pub fn expected_log_det(&self, k: usize) -> f64 {
        let dim = self.features();
        let det = self.w[k].determinant();
        (1..=dim)
            .map(|i| digamma((self.nu[k] + 1.0 - i as f64) / 2.0))
            .sum::<f64>()
            + dim as f64 * 2f64.ln()
            + det.ln()
    }

    /// `E[ln π_k]`.
    pub fn expected_log_weight(&self, k: usize) -> f64 {
        digamma(self.alpha[k]) - digamma(self.alpha.iter().sum())
    }

    /// Unnormalised log-responsibilities `ln ρ_nk` (points x clusters).
    pub fn log_scores(&self) -> DMatrix<f64> {
        let dim = self.features() as f64;
        let mut out = DMatrix::zeros(self.points(), self.clusters());
        for k in 0..self.clusters() {
            let base = self.expected_log_weight(k) + 0.5 * self.expected_log_det(k) - 0.5 * dim * LN_2PI;
            for i in 0..self.points() {
                let dv = self.point(i) - &self.m[k];
                let maha = dim / self.beta[k] + self.nu[k] * (dv.transpose() * &self.w[k] * &dv)[(0, 0)];
                out[(i, k)] = base - 0.5 * maha;
            }
        }
        out
    }

    /// Closed-form responsibilities.
    pub fn e_step(&self) -> DMatrix<f64> {
        let scores = self.log_scores();
        let mut resp = scores.clone();
        for (i, row) in scores.row_iter().enumerate() {
            let v: Vec<f64> = row.iter().copied().collect();
            let lse = logsumexp(&v);
            for k in 0..self.clusters() {
                resp[(i, k)] = (v[k] - lse).exp();
            }
        }
        resp
    }

    /// Variational lower bound for the current posterior and `resp`.
    pub fn elbo(&self, resp: &DMatrix<f64>) -> Result<f64> {
        self.check_resp(resp)?;
        let p = &self.prior;
        let dim = self.features() as f64;
        let kk = self.clusters();
        let stats = self.stats(resp);
        let ln_lambda: Vec<f64> = (0..kk).map(|k| self.expected_log_det(k)).collect();
        let ln_pi: Vec<f64> = (0..kk).map(|k| self.expected_log_weight(k)).collect();

        let mut e_lik = 0.0;
        let mut e_mu_lambda = 0.0;
        let mut e_q_mu_lambda = 0.0;
        for k in 0..kk {
            let s = &stats[k];
            let w = &self.w[k];
            let dm = &s.mean - &self.m[k];
            let tr_sw = if s.n > 0.0 { (&s.scatter * w).trace() / s.n } else { 0.0 };
            e_lik += 0.5
                * s.n
                * (ln_lambda[k]
                    - dim / self.beta[k]
                    - self.nu[k] * tr_sw
                    - self.nu[k] * (dm.transpose() * w * &dm)[(0, 0)]
                    - dim * LN_2PI);

            let dm0 = &self.m[k] - &p.m0;
            e_mu_lambda += 0.5
                * (dim * (p.beta0 / (2.0 * std::f64::consts::PI)).ln() + ln_lambda[k]
                    - dim * p.beta0 / self.beta[k]
                    - p.beta0 * self.nu[k] * (dm0.transpose() * w * &dm0)[(0, 0)])
                + 0.5 * (p.nu0 - dim - 1.0) * ln_lambda[k]
                - 0.5 * self.nu[k] * (&self.w0_inv * w).trace();

            let entropy_lambda = -ln_wishart_norm(w, self.nu[k]) - 0.5 * (self.nu[k] - dim - 1.0) * ln_lambda[k]
                + 0.5 * self.nu[k] * dim;
            e_q_mu_lambda += 0.5 * ln_lambda[k] + 0.5 * dim * (self.beta[k] / (2.0 * std::f64::consts::PI)).ln()
                - 0.5 * dim
                - entropy_lambda;
        }
        e_mu_lambda += kk as f64 * ln_wishart_norm(&p.w0, p.nu0);

        let mut e_z = 0.0;
        let mut e_qz = 0.0;
        for i in 0..self.points() {
            for k in 0..kk {
                let r = resp[(i, k)];
                e_z += r * ln_pi[k];
                if r > 0.0 {
                    e_qz += r * r.ln();
                }
            }
        }
        let alpha0 = vec![p.alpha0; kk];
        let e_pi = ln_dirichlet_norm(&alpha0) + (p.alpha0 - 1.0) * ln_pi.iter().sum::<f64>();
        let e_qpi = self
            .alpha
            .iter()
            .zip(&ln_pi)
            .map(|(a, l)| (a - 1.0) * l)
            .sum::<f64>()
            + ln_dirichlet_norm(&self.alpha);

        Ok(e_lik + e_z + e_pi + e_mu_lambda - e_qz - e_qpi - e_q_mu_lambda)
    }

    /// Closed-form variational EM: `iterations` rounds of E-step then
    /// M-step. Returns the bound after each M-step.
    pub fn fit_closed_form(&mut self, iterations: usize) -> Result<Vec<f64>> {
        let mut trace = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let resp = self.e_step();
            self.m_step(&resp)?;
            trace.push(self.elbo(&resp)?);
        }
        Ok(trace)
    }

    /// Allocation target whose log-joint is `Σ_d <x_d, ln ρ_d>`.
    pub fn allocation_model(&self) -> GmmAllocation {
        GmmAllocation::new(self.log_scores())
    }
}

/// `ln B(W, ν)`, the log normaliser of a Wishart density.
fn ln_wishart_norm(w: &DMatrix<f64>, nu: f64) -> f64 {
    let dim = w.nrows() as f64;
    let ln_gamma_sum: f64 = (1..=w.nrows()).map(|i| ln_gamma((nu + 1.0 - i as f64) / 2.0)).sum();
    -0.5 * nu * w.determinant().ln()
        - (0.5 * nu * dim * 2f64.ln() + 0.25 * dim * (dim - 1.0) * std::f64::consts::PI.ln() + ln_gamma_sum)
}

/// `ln C(α)`, the log normaliser of a Dirichlet density.
fn ln_dirichlet_norm(alpha: &[f64]) -> f64 {
    ln_gamma(alpha.iter().sum()) - alpha.iter().map(|&a| ln_gamma(a)).sum::<f64>()
}

/// Hard assignments `argmax_k resp[i, k]`.
pub fn hard_assignments(resp: &DMatrix<f64>) -> Vec<usize> {
    resp.row_iter()
        .map(|r| crate::diffcore::argmax(&r.iter().copied().collect::<Vec<_>>()))
        .collect()
}

/// E-step target over point allocations with cluster posteriors held fixed.
#[derive(Clone, Debug)]
pub struct GmmAllocation {
    scores: Vec<Vec<f64>>,
    cardinalities: Vec<usize>,
}

impl GmmAllocation {
    pub fn new(log_scores: DMatrix<f64>) -> Self {
        let k = log_scores.ncols();
        let scores: Vec<Vec<f64>> = log_scores
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect();
        let cardinalities = vec![k; scores.len()];
        Self { scores, cardinalities }
    }

    pub fn scores(&self) -> &[Vec<f64>] {
        &self.scores
    }

    /// Maximum of the allocation bound, `Σ_d ln Σ_k exp(ln ρ_dk)`.
    pub fn optimal_bound(&self) -> f64 {
        self.scores.iter().map(|s| logsumexp(s)).sum()
    }
}

impl<T: Real> TracedModel<T> for GmmAllocation {
    fn cardinalities(&self) -> &[usize] {
        &self.cardinalities
    }

    fn bind(&self, tape: &mut Tape<T>) -> ModelBinding {
        let nodes = self
            .scores
            .iter()
            .map(|s| {
                let v: Vec<T> = s.iter().map(|&x| T::lit(x)).collect();
                tape.constant(&v)
            })
            .collect();
        ModelBinding { nodes }
    }

    fn trace_log_joint(&self, tape: &mut Tape<T>, bind: &ModelBinding, xs: &[NodeId]) -> NodeId {
        let terms: Vec<NodeId> = xs
            .iter()
            .zip(&bind.nodes)
            .map(|(&x, &table)| tape.log_lookup(x, table))
            .collect();
        tape.sum_scalars(&terms)
    }

    fn log_joint(&self, x: &[usize]) -> f64 {
        x.iter().zip(&self.scores).map(|(&k, s)| s[k]).sum()
    }
}

/// Stacks equally long feature rows into an `N x F` data matrix.
pub fn data_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let f = rows.first().map(Vec::len).unwrap_or(0);
    if f == 0 {
        return Err(Error::InvalidInput("data set has no rows or no features".into()));
    }
    if let Some(i) = rows.iter().position(|r| r.len() != f) {
        return Err(Error::InvalidInput(format!("row {} has {} features, expected {f}", i + 1, rows[i].len())));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("data set contains non-finite values".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), f, |i, j| rows[i][j]))
}

/// The simulated three-cluster data set: 100 unit-covariance points around
/// each of (0, 2), (1.7, -1) and (-1.7, -1), returned with true labels.
pub fn simulated_three_clusters(rng: &mut SeededRng) -> (DMatrix<f64>, Vec<usize>) {
    use rand_distr::{Distribution, StandardNormal};
    let centres = [(0.0, 2.0), (1.7, -1.0), (-1.7, -1.0)];
    let mut data = DMatrix::zeros(300, 2);
    let mut labels = Vec::with_capacity(300);
    for (c, &(x, y)) in centres.iter().enumerate() {
        for i in 0..100 {
            let dx: f64 = StandardNormal.sample(rng);
            let dy: f64 = StandardNormal.sample(rng);
            data[(c * 100 + i, 0)] = x + dx;
            data[(c * 100 + i, 1)] = y + dy;
            labels.push(c);
        }
    }
    (data, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn single_point_update() {
        let data = DMatrix::from_row_slice(1, 2, &[1.5, -0.5]);
        let prior = GmmPrior {
            alpha0: 0.5,
            beta0: 1.0,
            m0: DVector::from_vec(vec![0.2, 0.4]),
            w0: DMatrix::identity(2, 2),
            nu0: 2.0,
        };
        let mut s = GmmState::new(data, 2, prior).unwrap();
        let resp = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        s.m_step(&resp).unwrap();
        assert_relative_eq!(s.m[0][0], (0.2 + 1.5) / 2.0, epsilon = 1e-14);
        assert_relative_eq!(s.m[0][1], (0.4 - 0.5) / 2.0, epsilon = 1e-14);
        // the empty cluster keeps its prior
        assert_eq!(s.alpha[1], 0.5);
        assert_eq!(s.beta[1], 1.0);
        assert_eq!(s.m[1], DVector::from_vec(vec![0.2, 0.4]));
        // W^-1 = I + beta0 N/(beta0+N) d d^T
        let d = [1.3, -0.9];
        let expected_inv = DMatrix::from_row_slice(2, 2, &[1.0 + 0.5 * d[0] * d[0], 0.5 * d[0] * d[1], 0.5 * d[0] * d[1], 1.0 + 0.5 * d[1] * d[1]]);
        let inv = s.w[0].clone().try_inverse().unwrap();
        for (a, b) in inv.iter().zip(expected_inv.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn symmetric_data_gives_symmetric_means() {
        let data = DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]);
        let prior = GmmPrior {
            alpha0: 0.5,
            beta0: 1.0,
            m0: DVector::from_vec(vec![0.0]),
            w0: DMatrix::identity(1, 1),
            nu0: 1.0,
        };
        let mut s = GmmState::new(data, 2, prior).unwrap();
        let resp = DMatrix::from_row_slice(2, 2, &[0.8, 0.2, 0.2, 0.8]);
        s.m_step(&resp).unwrap();
        assert_relative_eq!(s.m[0][0], -s.m[1][0], epsilon = 1e-14);
    }

    #[test]
    fn closed_form_em_is_monotone_and_recovers_clusters() {
        let mut rng = SeededRng::new(5);
        let (data, labels) = simulated_three_clusters(&mut rng);
        let mut s = GmmState::initialise(data, 3, &mut rng).unwrap();
        let trace = s.fit_closed_form(50).unwrap();
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "{} -> {}", w[0], w[1]);
        }
        let assign = hard_assignments(&s.e_step());
        // majority label per cluster
        let mut agree = 0;
        for k in 0..3 {
            let mut counts = [0; 3];
            for (a, l) in assign.iter().zip(&labels) {
                if *a == k {
                    counts[*l] += 1;
                }
            }
            agree += counts.iter().max().unwrap();
        }
        assert!(agree > 250, "{agree}");
    }

    #[test]
    fn elbo_is_maximised_by_closed_form_responsibilities() {
        let mut rng = SeededRng::new(6);
        let (data, _) = simulated_three_clusters(&mut rng);
        let mut s = GmmState::initialise(data, 3, &mut rng).unwrap();
        s.fit_closed_form(5).unwrap();
        let best = s.e_step();
        let at_best = s.elbo(&best).unwrap();
        let mut perturbed = best.clone();
        for i in 0..perturbed.nrows() {
            let row: Vec<f64> = perturbed.row(i).iter().map(|v| 0.9 * v + 0.1 / 3.0).collect();
            for k in 0..3 {
                perturbed[(i, k)] = row[k];
            }
        }
        assert!(s.elbo(&perturbed).unwrap() < at_best);
        // the allocation-only part matches sum of log-sum-exp of the scores
        let alloc = s.allocation_model();
        let scores = s.log_scores();
        let mut bound = 0.0;
        for i in 0..scores.nrows() {
            for k in 0..3 {
                let r = best[(i, k)];
                bound += r * (scores[(i, k)] - r.ln());
            }
        }
        assert_relative_eq!(bound, alloc.optimal_bound(), epsilon = 1e-8);
    }

    #[test]
    fn allocation_model_examples() {
        let scores = DMatrix::from_row_slice(2, 1, &[-1.0, -2.0]);
        let m = GmmAllocation::new(scores);
        assert_eq!(TracedModel::<f64>::log_joint(&m, &[0, 0]), -3.0);

        // a point at one mean, far from the other
        let data = DMatrix::from_row_slice(1, 1, &[0.0]);
        let prior = GmmPrior {
            alpha0: 0.5,
            beta0: 1.0,
            m0: DVector::from_vec(vec![0.0]),
            w0: DMatrix::identity(1, 1),
            nu0: 1.0,
        };
        let mut s = GmmState::new(data, 2, prior).unwrap();
        s.m[1] = DVector::from_vec(vec![10.0]);
        let sc = s.log_scores();
        assert_relative_eq!(sc[(0, 0)] - sc[(0, 1)], 0.5 * s.nu[1] * s.w[1][(0, 0)] * 100.0, epsilon = 1e-9);

        // relabelling clusters and columns together leaves the value unchanged
        let sc = DMatrix::from_row_slice(2, 3, &[-1.0, -2.0, -3.0, -0.5, -4.0, -1.5]);
        let swapped = DMatrix::from_row_slice(2, 3, &[-2.0, -1.0, -3.0, -4.0, -0.5, -1.5]);
        let (a, b) = (GmmAllocation::new(sc), GmmAllocation::new(swapped));
        assert_eq!(TracedModel::<f64>::log_joint(&a, &[0, 2]), TracedModel::<f64>::log_joint(&b, &[1, 2]));
    }

    #[test]
    fn rejects_bad_responsibilities() {
        let data = DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]);
        let prior = GmmPrior::default_for(&data, 2);
        let mut s = GmmState::new(data, 2, prior).unwrap();
        assert!(s.m_step(&DMatrix::from_row_slice(2, 2, &[0.5, 0.6, 0.5, 0.5])).is_err());
    }
}
