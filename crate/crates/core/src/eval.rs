//! External evaluation of trained variational distributions.
//!
//! Internal objectives are whatever a training loop optimises; the functions
//! here score the discrete distribution that the trained parameters define,
//! against the exact posterior when it can be enumerated.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::diffcore::{argmax, Tape};
use crate::dists::{categorical_entropy, gumbel_from_uniform, SeededRng};
use crate::error::{Error, Result};
use crate::infer::{elbo_value_on, Allocation, FitReport, Variational};
use crate::mdnf::FlowMixture;
use crate::models::{Posterior, TracedModel};
use crate::scalar::Real;
use crate::space::ENUMERATION_CAP;

/// `KL(q || p)` with a flag for `q` putting mass where `p` has none.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kl {
    pub value: f64,
    pub support_violation: bool,
}

/// `Σ_x q(x) [ln q(x) - ln p(x)]` with `0 ln 0 = 0`.
pub fn kl_to_exact(q: &[f64], p: &[f64]) -> Result<Kl> {
    if q.len() != p.len() {
        return Err(Error::InvalidInput(format!(
            "tables cover different spaces ({} vs {} entries)",
            q.len(),
            p.len()
        )));
    }
    let mut value = 0.0;
    for (&a, &b) in q.iter().zip(p) {
        if a > 0.0 {
            if b <= 0.0 {
                return Ok(Kl {
                    value: f64::INFINITY,
                    support_violation: true,
                });
            }
            value += a * (a.ln() - b.ln());
        }
    }
    Ok(Kl {
        value: value.max(0.0),
        support_violation: false,
    })
}

/// Half the L1 distance between two tables.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Exhaustive `q(x)` of a mixture, refusing spaces above the enumeration cap.
pub fn mdnf_q_table<T: Real>(m: &FlowMixture<T>) -> Result<Vec<f64>> {
    m.prob_table(ENUMERATION_CAP)
}

/// Exact ELBO `ln p(D) - KL(q || p(x|D))`.
pub fn exact_elbo(q: &[f64], posterior: &Posterior) -> Result<f64> {
    let kl = kl_to_exact(q, &posterior.table)?;
    Ok(posterior.log_evidence - kl.value)
}

/// Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

/// ELBO of discretised Gumbel-Softmax samples `x̃ = argmax(λ + g)`.
///
/// The joint term averages `ln p(D, x̃_s)`; the entropy term plugs the
/// per-dimension empirical frequencies into the categorical entropy. The
/// standard error is the delete-one jackknife.
pub fn gs_discretized_elbo<T: Real, M: TracedModel<T> + ?Sized>(
    logits: &[Vec<T>],
    model: &M,
    samples: usize,
    rng: &mut SeededRng,
) -> Result<Estimate> {
    if samples < 100 {
        return Err(Error::InvalidInput("discretised ELBO needs at least 100 samples".into()));
    }
    if logits.iter().map(Vec::len).ne(model.cardinalities().iter().copied()) {
        return Err(Error::InvalidInput("logits do not match the latent space".into()));
    }
    let d = logits.len();
    let mut counts: Vec<Vec<usize>> = logits.iter().map(|l| vec![0; l.len()]).collect();
    let mut draws = Vec::with_capacity(samples * d);
    let mut joint = Vec::with_capacity(samples);
    let mut x = vec![0; d];
    let mut perturbed = Vec::new();
    for _ in 0..samples {
        for (di, l) in logits.iter().enumerate() {
            perturbed.clear();
            perturbed.extend(l.iter().map(|v| v.as_f64() + gumbel_from_uniform(rng.uniform())));
            x[di] = argmax(&perturbed);
            counts[di][x[di]] += 1;
        }
        draws.extend_from_slice(&x);
        joint.push(model.log_joint(&x));
    }
    let n = samples as f64;
    let joint_sum: f64 = joint.iter().sum();
    let entropy: f64 = counts
        .iter()
        .map(|c| categorical_entropy(&c.iter().map(|&k| k as f64 / n).collect::<Vec<_>>()))
        .sum();
    let value = joint_sum / n + entropy;

    // delete-one estimates: H = ln m - (1/m) Σ c ln c over m = n - 1 samples
    let xlogx = |c: usize| if c == 0 { 0.0 } else { c as f64 * (c as f64).ln() };
    let a: Vec<f64> = counts.iter().map(|c| c.iter().map(|&k| xlogx(k)).sum()).collect();
    let m = n - 1.0;
    let loo: Vec<f64> = (0..samples)
        .map(|s| {
            let h: f64 = (0..d)
                .map(|di| {
                    let c = counts[di][draws[s * d + di]];
                    let ad = a[di] - xlogx(c) + xlogx(c - 1);
                    m.ln() - ad / m
                })
                .sum();
            (joint_sum - joint[s]) / m + h
        })
        .collect();
    let mean_loo = loo.iter().sum::<f64>() / n;
    let var = (m / n) * loo.iter().map(|v| (v - mean_loo).powi(2)).sum::<f64>();
    Ok(Estimate {
        value,
        std_error: var.sqrt(),
    })
}

/// Unbiased sample ELBO of a mixture from untraced draws.
pub fn mixture_elbo_mc<T: Real, M: TracedModel<T> + ?Sized>(
    m: &FlowMixture<T>,
    model: &M,
    samples: usize,
    rng: &mut SeededRng,
) -> Result<Estimate> {
    if samples < 2 {
        return Err(Error::InvalidInput("need at least two samples for a standard error".into()));
    }
    let vals: Vec<f64> = (0..samples)
        .map(|_| {
            let x = m.sample_indices(rng);
            model.log_joint(&x) - m.log_prob_exact(&x)
        })
        .collect();
    let (mean, sd) = mean_std(&vals);
    Ok(Estimate {
        value: mean,
        std_error: sd / (samples as f64).sqrt(),
    })
}

/// Default number of discretised draws behind a GS external ELBO.
pub const GS_EXTERNAL_SAMPLES: usize = 10_000;

/// External ELBO of any trained state: exact for enumerable mixtures when a
/// posterior is given, otherwise a sample estimate with `samples` draws.
pub fn external_elbo<T: Real, M: TracedModel<T> + ?Sized>(
    state: &Variational<T>,
    model: &M,
    posterior: Option<&Posterior>,
    samples: usize,
    rng: &mut SeededRng,
) -> Result<f64> {
    match state {
        Variational::Mixture(m) => match posterior {
            Some(p) => exact_elbo(&mdnf_q_table(m)?, p),
            None => Ok(mixture_elbo_mc(m, model, samples, rng)?.value),
        },
        Variational::Logits(l) => Ok(gs_discretized_elbo(l, model, samples, rng)?.value),
    }
}

pub fn kl_of_state<T: Real>(state: &Variational<T>, posterior: &Posterior) -> Result<Kl> {
    kl_to_exact(&state.prob_table(ENUMERATION_CAP)?, &posterior.table)
}

/// Fills `report.diagnostics` from the final state.
pub fn diagnose<T: Real, M: TracedModel<T> + ?Sized>(
    report: &mut FitReport<T>,
    model: &M,
    posterior: Option<&Posterior>,
    samples: usize,
    rng: &mut SeededRng,
) -> Result<()> {
    report.diagnostics.external_elbo = Some(external_elbo(&report.final_state, model, posterior, samples, rng)?);
    report.diagnostics.kl_exact = match posterior {
        Some(p) => Some(kl_of_state(&report.final_state, p)?.value),
        None => None,
    };
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapPoint {
    pub iteration: usize,
    pub internal: f64,
    pub external: f64,
    pub kl: Option<f64>,
}

/// Internal objective and external score at every snapshot of `report`.
pub fn objective_gap_trace<T, F>(report: &FitReport<T>, mut external: F) -> Result<Vec<GapPoint>>
where
    T: Real,
    F: FnMut(&Variational<T>) -> Result<(f64, Option<f64>)>,
{
    report
        .snapshots
        .iter()
        .filter(|s| s.iteration < report.records.len())
        .map(|s| {
            let (ext, kl) = external(&s.state)?;
            Ok(GapPoint {
                iteration: s.iteration,
                internal: report.records[s.iteration].objective,
                external: ext,
                kl,
            })
        })
        .collect()
}

/// Two-sided p-value of a paired t-test that `internal - external` has mean
/// zero. Non-finite pairs are skipped; returns 1 for fewer than two pairs.
pub fn paired_t_test(points: &[GapPoint]) -> f64 {
    let diffs: Vec<f64> = points
        .iter()
        .map(|p| p.internal - p.external)
        .filter(|d| d.is_finite())
        .collect();
    if diffs.len() < 2 {
        return 1.0;
    }
    let (mean, sd) = mean_std(&diffs);
    if sd == 0.0 {
        return if mean == 0.0 { 1.0 } else { 0.0 };
    }
    let t = mean / (sd / (diffs.len() as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (diffs.len() - 1) as f64).expect("valid degrees of freedom");
    2.0 * (1.0 - dist.cdf(t.abs()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceStats {
    pub mean: f64,
    pub std: f64,
    /// `std / |mean|`
    pub relative: f64,
}

/// Statistics of `repetitions` independent `samples`-sample ELBO estimates.
pub fn elbo_variance_study<T: Real, M: TracedModel<T> + ?Sized>(
    m: &FlowMixture<T>,
    model: &M,
    repetitions: usize,
    samples: usize,
    allocation: Allocation,
    rng: &mut SeededRng,
) -> Result<VarianceStats> {
    if repetitions < 100 {
        return Err(Error::InvalidInput("variance study needs at least 100 repetitions".into()));
    }
    let mut tape = Tape::new();
    let vals: Vec<f64> = (0..repetitions)
        .map(|_| elbo_value_on(&mut tape, m, model, samples, allocation, rng))
        .collect::<Result<_>>()?;
    let (mean, std) = mean_std(&vals);
    Ok(VarianceStats {
        mean,
        std,
        relative: std / mean.abs(),
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    // shifted by the first value so identical inputs give exactly zero spread
    let shift = v.first().copied().unwrap_or(0.0);
    if !shift.is_finite() {
        return (v.iter().sum::<f64>() / n, f64::NAN);
    }
    let offset = v.iter().map(|x| x - shift).sum::<f64>() / n;
    if v.len() < 2 {
        return (shift + offset, 0.0);
    }
    let var = v.iter().map(|x| (x - shift - offset).powi(2)).sum::<f64>() / (n - 1.0);
    (shift + offset, var.sqrt())
}

/// Linear-interpolated percentile (`q` in `[0, 1]`), ignoring NaN. Equal
/// neighbours (including equal infinities) are returned as is.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi || v[lo] == v[hi] {
        return v[lo];
    }
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    percentile(values, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::MixtureLayout;
    use crate::infer::{fit, initial_mixture, FitConfig};
    use crate::mdnf::constructive_fit_table;
    use crate::models::{BayesNet, BnPosterior, Evidence};
    use approx::assert_relative_eq;

    const TINY: &str = r#"
[[nodes]]
name = "A"
cardinality = 2
parents = []
cpt = [0.7, 0.3]

[[nodes]]
name = "B"
cardinality = 2
parents = ["A"]
cpt = [0.8, 0.2, 0.1, 0.9]
"#;

    fn tiny() -> BnPosterior {
        let net = BayesNet::parse(TINY).unwrap();
        let ev = Evidence::from_pairs(&net, &[("B", 1)]).unwrap();
        BnPosterior::new(net, ev).unwrap()
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_to_exact(&[0.2, 0.8], &[0.2, 0.8]).unwrap().value, 0.0);
        assert_relative_eq!(kl_to_exact(&[1.0, 0.0], &[0.5, 0.5]).unwrap().value, 2f64.ln(), epsilon = 1e-15);
        let v = kl_to_exact(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!(v.support_violation && v.value == f64::INFINITY);
        assert!(kl_to_exact(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn q_table_examples() {
        let mut rng = SeededRng::new(4);
        let cfg = FitConfig {
            components: 5,
            ..FitConfig::default()
        };
        let m: FlowMixture<f64> = initial_mixture(&[3, 2, 4], &cfg, &mut rng).unwrap();
        let t = mdnf_q_table(&m).unwrap();
        assert_relative_eq!(t.iter().sum::<f64>(), 1.0, epsilon = 1e-9);

        let p = [0.1, 0.25, 0.05, 0.4, 0.2];
        let fit: FlowMixture<f64> = constructive_fit_table(&p, &[5], 16).unwrap();
        let t = mdnf_q_table(&fit).unwrap();
        assert!(t.iter().zip(&p).all(|(a, b)| (a - b).abs() <= 1.0 / 16.0));

        let one: FlowMixture<f64> = FlowMixture::shift_mixture(&[4], 1, 1, MixtureLayout::Joint).unwrap();
        let t = mdnf_q_table(&one).unwrap();
        assert_eq!(t.iter().filter(|&&v| v == 1.0).count(), 1);

        let big: FlowMixture<f64> = FlowMixture::shift_mixture(&[10; 7], 1, 1, MixtureLayout::Joint).unwrap();
        assert!(mdnf_q_table(&big).is_err());
    }

    #[test]
    fn discretized_elbo_examples() {
        let model = tiny();
        let mut rng = SeededRng::new(8);
        // near-delta logits
        let est = gs_discretized_elbo(&[vec![0.0, 20.0]], &model, 1000, &mut rng).unwrap();
        assert_relative_eq!(est.value, TracedModel::<f64>::log_joint(&model, &[1]), epsilon = 1e-6);

        // exact posterior logits
        let post = model.exact_posterior_default().unwrap();
        let logits = vec![post.table.iter().map(|p| p.ln()).collect::<Vec<f64>>()];
        let est = gs_discretized_elbo(&logits, &model, 20_000, &mut rng).unwrap();
        assert!((est.value - 0.41f64.ln()).abs() < 3.0 * est.std_error + 1e-3, "{est:?}");
        assert!(gs_discretized_elbo(&logits, &model, 99, &mut rng).is_err());
    }

    #[test]
    fn discretized_entropy_converges_to_log_two() {
        // a flat model isolates the entropy term
        struct Flat;
        impl TracedModel<f64> for Flat {
            fn cardinalities(&self) -> &[usize] {
                &[2]
            }
            fn bind(&self, _: &mut Tape<f64>) -> crate::models::ModelBinding {
                Default::default()
            }
            fn trace_log_joint(&self, tape: &mut Tape<f64>, _: &crate::models::ModelBinding, _: &[crate::diffcore::NodeId]) -> crate::diffcore::NodeId {
                tape.constant(&[0.0])
            }
            fn log_joint(&self, _: &[usize]) -> f64 {
                0.0
            }
        }
        let mut rng = SeededRng::new(9);
        let est = gs_discretized_elbo(&[vec![0.0, 0.0]], &Flat, 100_000, &mut rng).unwrap();
        assert!((est.value - 2f64.ln()).abs() < 0.01);
    }

    #[test]
    fn jackknife_matches_brute_force() {
        let model = tiny();
        let logits = vec![vec![0.3, -0.2]];
        let est = gs_discretized_elbo(&logits, &model, 150, &mut SeededRng::new(2)).unwrap();
        // replay the same draws and recompute the delete-one estimates directly
        let mut rng = SeededRng::new(2);
        let xs: Vec<usize> = (0..150)
            .map(|_| argmax(&logits[0].iter().map(|v| v + gumbel_from_uniform(rng.uniform())).collect::<Vec<_>>()))
            .collect();
        let estimate = |idx: &[usize]| {
            let n = idx.len() as f64;
            let joint: f64 = idx.iter().map(|&i| TracedModel::<f64>::log_joint(&model, &[xs[i]])).sum::<f64>() / n;
            let c1 = idx.iter().filter(|&&i| xs[i] == 1).count() as f64 / n;
            joint + categorical_entropy(&[1.0 - c1, c1])
        };
        let all: Vec<usize> = (0..150).collect();
        assert_relative_eq!(est.value, estimate(&all), epsilon = 1e-12);
        let loo: Vec<f64> = (0..150)
            .map(|s| estimate(&all.iter().copied().filter(|&i| i != s).collect::<Vec<_>>()))
            .collect();
        let m = loo.iter().sum::<f64>() / 150.0;
        let se = ((149.0 / 150.0) * loo.iter().map(|v| (v - m).powi(2)).sum::<f64>()).sqrt();
        assert_relative_eq!(est.std_error, se, epsilon = 1e-10);
    }

    #[test]
    fn variance_study_examples() {
        let model = tiny();
        let mut rng = SeededRng::new(12);
        let cfg = FitConfig {
            components: 4,
            ..FitConfig::default()
        };
        let m: FlowMixture<f64> = initial_mixture(&[2], &cfg, &mut rng).unwrap();
        let s = elbo_variance_study(&m, &model, 100, 4, Allocation::Stratified, &mut rng).unwrap();
        assert_eq!(s.std, 0.0);
        let one = elbo_variance_study(&m, &model, 100, 1, Allocation::Random, &mut rng).unwrap();
        let many = elbo_variance_study(&m, &model, 100, 100, Allocation::Random, &mut rng).unwrap();
        assert!(many.std < one.std);
        assert!(elbo_variance_study(&m, &model, 99, 1, Allocation::Random, &mut rng).is_err());
    }

    #[test]
    fn gap_trace_of_mdnf_is_unbiased() {
        let model = tiny();
        let post = model.exact_posterior_default().unwrap();
        let cfg = FitConfig {
            components: 4,
            samples: 5,
            iterations: 3000,
            snapshot_every: 10,
            seed: 3,
            ..FitConfig::default()
        };
        let rep = fit::<f64, _>(&model, &cfg).unwrap();
        let trace = objective_gap_trace(&rep, |s| {
            let kl = kl_of_state(s, &post)?;
            Ok((post.log_evidence - kl.value, Some(kl.value)))
        })
        .unwrap();
        assert_eq!(trace.len(), 300);
        assert!(paired_t_test(&trace) > 0.001);
    }

    #[test]
    fn constant_parameters_give_a_flat_trace() {
        let model = tiny();
        let post = model.exact_posterior_default().unwrap();
        let cfg = FitConfig {
            components: 2,
            samples: 3,
            iterations: 300,
            learning_rate: 1e-300,
            ..FitConfig::default()
        };
        let rep = fit::<f64, _>(&model, &cfg).unwrap();
        let trace = objective_gap_trace(&rep, |s| Ok((exact_elbo(&s.prob_table(1 << 20)?, &post)?, None))).unwrap();
        assert!(trace.windows(2).all(|w| w[0].external == w[1].external));
    }

    #[test]
    fn percentiles() {
        let v = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(median(&v), 2.5);
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 1.0), 4.0);
        assert_eq!(percentile(&[1.0, f64::NAN], 0.5), 1.0);
        assert_eq!(median(&[f64::NEG_INFINITY; 4]), f64::NEG_INFINITY);
        assert_eq!(median(&[f64::NEG_INFINITY, f64::NEG_INFINITY, 1.0]), f64::NEG_INFINITY);
    }
}
