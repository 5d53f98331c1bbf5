//! Evaluation metrics: select-optimal rates, base-normalized utility,
//! margin-stratified sign agreement, WTP distribution diagnostics and
//! per-sample loss tracking.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::CardinalDataset;
use crate::error::{Error, Result};
use crate::impossibility::ModelId;
use crate::model::{policy_utility, Policy, RewardTable};
use crate::numeric::{mean, sigmoid};
use crate::policy_opt::{implicit_margin, LossKind, TabularRun};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial_id: usize,
    pub method: LossKind,
    pub selected: ModelId,
    pub selected_optimal: bool,
    pub theta: f64,
    /// Ground-truth `U(selected) - U(best)`; zero when optimal.
    pub utility_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub method: LossKind,
    pub n: usize,
    pub rate: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectOptimalReport {
    pub overall: Vec<RateSummary>,
    /// Trials where the methods picked different models.
    pub disagreement_trials: usize,
    pub disagreement: Vec<RateSummary>,
}

impl SelectOptimalReport {
    pub fn overall_rate(&self, method: LossKind) -> Option<f64> {
        self.overall.iter().find(|r| r.method == method).map(|r| r.rate)
    }

    pub fn disagreement_rate(&self, method: LossKind) -> Option<f64> {
        self.disagreement.iter().find(|r| r.method == method).map(|r| r.rate)
    }
}

/// Binomial proportion and its standard error `sqrt(p (1 - p) / n)`.
pub fn proportion(hits: usize, n: usize) -> (f64, f64) {
    let p = hits as f64 / n as f64;
    (p, (p * (1.0 - p) / n as f64).sqrt())
}

fn summarize<'a>(trials: impl Iterator<Item = &'a TrialResult>) -> Vec<RateSummary> {
    let mut by: BTreeMap<u8, (LossKind, usize, usize)> = BTreeMap::new();
    for t in trials {
        let key = match t.method {
            LossKind::Dpo => 0,
            LossKind::Cdpo => 1,
        };
        let e = by.entry(key).or_insert((t.method, 0, 0));
        e.1 += 1;
        e.2 += usize::from(t.selected_optimal);
    }
    by.into_values()
        .map(|(method, n, hits)| {
            let (rate, se) = proportion(hits, n);
            RateSummary { method, n, rate, se }
        })
        .collect()
}

pub fn select_optimal_rate(trials: &[TrialResult]) -> Result<SelectOptimalReport> {
    if trials.is_empty() {
        return Err(Error::Empty("trials"));
    }
    let mut picks: BTreeMap<usize, Vec<ModelId>> = BTreeMap::new();
    for t in trials {
        picks.entry(t.trial_id).or_default().push(t.selected);
    }
    let split: Vec<usize> = picks
        .iter()
        .filter(|(_, ps)| ps.len() > 1 && ps.iter().any(|p| *p != ps[0]))
        .map(|(id, _)| *id)
        .collect();
    Ok(SelectOptimalReport {
        overall: summarize(trials.iter()),
        disagreement_trials: split.len(),
        disagreement: summarize(trials.iter().filter(|t| split.binary_search(&t.trial_id).is_ok())),
    })
}

/// Utility relative to a base policy.
pub fn mean_utility_normalized(policy: &Policy, base: &Policy, reward_gt: &RewardTable) -> Result<f64> {
    policy.shape().expect(base.shape())?;
    Ok(policy_utility(policy, reward_gt, None)? - policy_utility(base, reward_gt, None)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationTuple {
    pub prompt: usize,
    pub first: usize,
    pub second: usize,
    /// `r(second) - r(first)` under the ground truth.
    pub true_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub agree: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedReport {
    pub edges: Vec<f64>,
    pub bins: Vec<BinStat>,
    /// Tuples with zero true margin, left out of every bin.
    pub zero_margin: usize,
}

/// `[min, q(1/3), q(2/3), max]` of `|margin|` over the nonzero margins.
pub fn tercile_edges(validation: &[ValidationTuple]) -> Result<Vec<f64>> {
    let mut m: Vec<f64> = validation.iter().map(|t| t.true_margin.abs()).filter(|m| *m > 0.0).collect();
    if m.is_empty() {
        return Err(Error::Empty("nonzero validation margins"));
    }
    m.sort_by(f64::total_cmp);
    let q = |p: f64| m[((m.len() as f64 * p).floor() as usize).min(m.len() - 1)];
    Ok(vec![m[0], q(1.0 / 3.0), q(2.0 / 3.0), m[m.len() - 1]])
}

/// Fraction of tuples per `|true margin|` bin where the implicit margin has
/// the same sign as the true margin. Bins are `[e_i, e_{i+1})`, the last one
/// closed. A zero implicit margin counts as disagreement.
pub fn margin_stratified_agreement(
    policy: &Policy,
    reference: &Policy,
    beta: f64,
    validation: &[ValidationTuple],
    edges: &[f64],
) -> Result<StratifiedReport> {
    if edges.len() < 2 || edges.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less)) {
        return Err(Error::Argument("bin edges must be strictly increasing, at least two".into()));
    }
    let k = edges.len() - 1;
    let mut count = vec![0usize; k];
    let mut agree = vec![0usize; k];
    let mut zero_margin = 0;
    for t in validation {
        if t.true_margin == 0.0 {
            zero_margin += 1;
            continue;
        }
        let a = t.true_margin.abs();
        let bin = (0..k)
            .find(|&i| a >= edges[i] && (a < edges[i + 1] || (i == k - 1 && a <= edges[k])))
            .ok_or_else(|| Error::Domain(format!("|margin| {a} lies outside every bin")))?;
        let m = implicit_margin(policy, reference, beta, t.prompt, t.first, t.second)?;
        count[bin] += 1;
        if m != 0.0 && m.signum() == t.true_margin.signum() {
            agree[bin] += 1;
        }
    }
    let bins = (0..k)
        .map(|i| BinStat {
            lo: edges[i],
            hi: edges[i + 1],
            count: count[i],
            agree: agree[i],
            rate: if count[i] == 0 { f64::NAN } else { agree[i] as f64 / count[i] as f64 },
        })
        .collect();
    Ok(StratifiedReport { edges: edges.to_vec(), bins, zero_margin })
}

pub const MIN_DISTRIBUTION_RECORDS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub excess_kurtosis: f64,
    pub logistic_location: f64,
    pub logistic_scale: f64,
    /// Kolmogorov-Smirnov distance to the fitted logistic.
    pub ks: f64,
}

/// Diagnostics on the signed WTP values (`+w` when `second` is preferred).
pub fn wtp_distribution_stats(data: &CardinalDataset) -> Result<DistributionStats> {
    let v: Vec<f64> = data.records().iter().map(|r| r.signed_wtp()).collect();
    distribution_stats(&v)
}

pub fn distribution_stats(values: &[f64]) -> Result<DistributionStats> {
    if values.len() < MIN_DISTRIBUTION_RECORDS {
        return Err(Error::TooFewRecords {
            needed: MIN_DISTRIBUTION_RECORDS,
            found: values.len(),
        });
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite value {v}")));
    }
    let n = values.len() as f64;
    let m = mean(values);
    let m2 = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    if m2 == 0.0 {
        return Err(Error::Degenerate("all values are equal (sd = 0)".into()));
    }
    let m4 = values.iter().map(|v| (v - m).powi(4)).sum::<f64>() / n;
    let (loc, scale) = fit_logistic(values, m, m2.sqrt());
    Ok(DistributionStats {
        n: values.len(),
        mean: m,
        sd: m2.sqrt(),
        excess_kurtosis: m4 / (m2 * m2) - 3.0,
        logistic_location: loc,
        logistic_scale: scale,
        ks: ks_statistic(values, |x| sigmoid((x - loc) / scale)),
    })
}

/// Largest gap between the empirical CDF of `values` and `cdf`.
pub fn ks_statistic(values: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter().enumerate().fold(0.0f64, |d, (i, &x)| {
        let f = cdf(x);
        d.max(f - i as f64 / n).max((i + 1) as f64 / n - f)
    })
}

/// Find the root of a decreasing function by bisection on a bracket that is
/// grown until it contains a sign change.
fn decreasing_root(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, positive: bool) -> f64 {
    for _ in 0..200 {
        if f(lo) > 0.0 {
            break;
        }
        lo = if positive { lo / 2.0 } else { lo - (hi - lo) };
    }
    for _ in 0..200 {
        if f(hi) < 0.0 {
            break;
        }
        hi = if positive { hi * 2.0 } else { hi + (hi - lo) };
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Maximum-likelihood logistic location and scale. The score equations are
/// `sum tanh(z/2) = 0` and `sum z tanh(z/2) = n` with `z = (x - mu)/s`;
/// each is monotone in its own parameter, so they are solved alternately.
pub fn fit_logistic(values: &[f64], mean: f64, sd: f64) -> (f64, f64) {
    let n = values.len() as f64;
    let mut mu = mean;
    let mut s = sd * 3f64.sqrt() / std::f64::consts::PI;
    for _ in 0..100 {
        let s_fixed = s;
        let new_mu = decreasing_root(
            |m| values.iter().map(|x| ((x - m) / (2.0 * s_fixed)).tanh()).sum(),
            mu - s,
            mu + s,
            false,
        );
        let new_s = decreasing_root(
            |sc| {
                values
                    .iter()
                    .map(|x| {
                        let z = (x - new_mu) / sc;
                        z * (z / 2.0).tanh()
                    })
                    .sum::<f64>()
                    - n
            },
            s / 2.0,
            s * 2.0,
            true,
        );
        let done = (new_mu - mu).abs() <= 1e-10 * s && (new_s - s).abs() <= 1e-10 * s;
        mu = new_mu;
        s = new_s;
        if done {
            break;
        }
    }
    (mu, s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub steps: Vec<usize>,
    pub sample_ids: Vec<usize>,
    /// `deltas[t][j]`: loss of sample `sample_ids[j]` at `steps[t]` minus
    /// its loss at step 0.
    pub deltas: Vec<Vec<f64>>,
    pub mean_loss: Vec<f64>,
    /// Fraction of tracked samples whose final loss exceeds the initial one.
    pub fraction_degraded: f64,
}

/// Per-sample loss changes relative to initialization. `tracked = None`
/// tracks every record.
pub fn per_sample_loss_trace(run: &TabularRun, tracked: Option<&[usize]>) -> Result<LossTrace> {
    let first = run.sample_losses.first().ok_or(Error::Empty("optimizer trace"))?;
    let n = first.len();
    let ids: Vec<usize> = match tracked {
        Some(t) => {
            if let Some(bad) = t.iter().find(|&&i| i >= n) {
                return Err(Error::Argument(format!("unknown sample id {bad} (run has {n} samples)")));
            }
            t.to_vec()
        }
        None => (0..n).collect(),
    };
    let deltas: Vec<Vec<f64>> = run
        .sample_losses
        .iter()
        .map(|row| ids.iter().map(|&i| row[i] - first[i]).collect())
        .collect();
    let last = deltas.last().expect("non-empty");
    let degraded = last.iter().filter(|d| **d > 1e-12).count();
    Ok(LossTrace {
        steps: run.trace.iter().map(|t| t.step).collect(),
        fraction_degraded: if ids.is_empty() { 0.0 } else { degraded as f64 / ids.len() as f64 },
        sample_ids: ids,
        mean_loss: run.trace.iter().map(|t| t.loss).collect(),
        deltas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{CardinalRecord, Comparison, ScaleTag, Side};
    use crate::model::Shape;
    use crate::policy_opt::kl_regularized_optimum;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trial(id: usize, method: LossKind, selected: ModelId, ok: bool) -> TrialResult {
        TrialResult {
            trial_id: id,
            method,
            selected,
            selected_optimal: ok,
            theta: 0.5,
            utility_gap: 0.0,
        }
    }

    #[test]
    fn rate_examples() {
        let all: Vec<_> = (0..5).map(|i| trial(i, LossKind::Cdpo, ModelId::Pi1, true)).collect();
        let r = select_optimal_rate(&all).unwrap();
        assert_eq!((r.overall[0].rate, r.overall[0].se), (1.0, 0.0));

        let ten: Vec<_> = (0..10).map(|i| trial(i, LossKind::Dpo, ModelId::Pi1, i < 7)).collect();
        let r = select_optimal_rate(&ten).unwrap();
        assert!((r.overall[0].rate - 0.7).abs() < 1e-15);
        assert!((r.overall[0].se - (0.21f64 / 10.0).sqrt()).abs() < 1e-15);
        assert!((r.overall[0].se - 0.1449).abs() < 1e-4);
        assert!(select_optimal_rate(&[]).is_err());
    }

    #[test]
    fn disagreement_subset() {
        let trials = vec![
            trial(0, LossKind::Dpo, ModelId::Pi1, true),
            trial(0, LossKind::Cdpo, ModelId::Pi1, true),
            trial(1, LossKind::Dpo, ModelId::Pi2, false),
            trial(1, LossKind::Cdpo, ModelId::Pi1, true),
        ];
        let r = select_optimal_rate(&trials).unwrap();
        assert_eq!(r.disagreement_trials, 1);
        assert_eq!(r.disagreement_rate(LossKind::Cdpo), Some(1.0));
        assert_eq!(r.disagreement_rate(LossKind::Dpo), Some(0.0));
        assert_eq!(r.overall_rate(LossKind::Dpo), Some(0.5));
    }

    fn random_policy(rng: &mut impl Rng, shape: Shape) -> Policy {
        let rows: Vec<Vec<f64>> = (0..shape.prompts)
            .map(|_| {
                let raw: Vec<f64> = (0..shape.responses).map(|_| rng.random::<f64>() + 0.05).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            })
            .collect();
        Policy::from_rows(&rows).unwrap()
    }

    fn random_reward(rng: &mut impl Rng, shape: Shape) -> RewardTable {
        let rows: Vec<Vec<f64>> = (0..shape.prompts)
            .map(|_| (0..shape.responses).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        RewardTable::from_rows(&rows).unwrap()
    }

    #[test]
    fn normalized_utility() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = Shape::new(3, 4).unwrap();
        let base = random_policy(&mut rng, shape);
        let r = random_reward(&mut rng, shape);
        assert_eq!(mean_utility_normalized(&base, &base, &r).unwrap(), 0.0);
        let opt = kl_regularized_optimum(&base, &r, 0.5).unwrap();
        assert!(mean_utility_normalized(&opt, &base, &r).unwrap() > 0.0);
        let other = random_policy(&mut rng, shape);
        let mut oracle = 0.0;
        for x in 0..3 {
            for y in 0..4 {
                oracle += (other.prob(x, y) - base.prob(x, y)) * r.get(x, y);
            }
        }
        assert!((mean_utility_normalized(&other, &base, &r).unwrap() - oracle).abs() < 1e-12);
    }

    fn validation(rng: &mut impl Rng, r: &RewardTable, n: usize) -> Vec<ValidationTuple> {
        let shape = r.shape();
        (0..n)
            .map(|_| {
                let x = rng.random_range(0..shape.prompts);
                let a = rng.random_range(0..shape.responses);
                let b = (a + rng.random_range(1..shape.responses)) % shape.responses;
                ValidationTuple { prompt: x, first: a, second: b, true_margin: r.margin(x, a, b) }
            })
            .collect()
    }

    #[test]
    fn stratified_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = Shape::new(5, 4).unwrap();
        let reference = random_policy(&mut rng, shape);
        let r = random_reward(&mut rng, shape);
        let mut val = validation(&mut rng, &r, 300);
        val.push(ValidationTuple { prompt: 0, first: 0, second: 1, true_margin: 0.0 });
        let edges = tercile_edges(&val).unwrap();
        let opt = kl_regularized_optimum(&reference, &r, 0.1).unwrap();
        let rep = margin_stratified_agreement(&opt, &reference, 0.1, &val, &edges).unwrap();
        assert!(rep.bins.iter().all(|b| b.rate == 1.0));
        assert_eq!(rep.bins.iter().map(|b| b.count).sum::<usize>() + rep.zero_margin, val.len());
        assert_eq!(rep.zero_margin, 1);

        let rep = margin_stratified_agreement(&reference, &reference, 0.1, &val, &edges).unwrap();
        assert!(rep.bins.iter().all(|b| b.rate == 0.0));

        let narrow = [edges[0], edges[1]];
        assert!(margin_stratified_agreement(&opt, &reference, 0.1, &val, &narrow).is_err());
    }

    fn logistic_samples(seed: u64, n: usize, mu: f64, s: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let u: f64 = rng.random_range(1e-12..1.0 - 1e-12);
                mu + s * (u / (1.0 - u)).ln()
            })
            .collect()
    }

    #[test]
    fn logistic_fit_recovers_parameters() {
        let v = logistic_samples(3, 20_000, 1.5, 0.7);
        let st = distribution_stats(&v).unwrap();
        assert!((st.logistic_location - 1.5).abs() < 0.03);
        assert!((st.logistic_scale - 0.7).abs() < 0.02);
        assert!(st.ks < 0.015);
        // Logistic excess kurtosis is 1.2.
        assert!((st.excess_kurtosis - 1.2).abs() < 0.3);
    }

    #[test]
    fn logistic_fit_is_stationary() {
        let v = logistic_samples(4, 5_000, -2.0, 3.0);
        let st = distribution_stats(&v).unwrap();
        let ll = |mu: f64, s: f64| {
            v.iter()
                .map(|x| {
                    let z = (x - mu) / s;
                    -z - s.ln() - 2.0 * (-z).exp().ln_1p()
                })
                .sum::<f64>()
        };
        let (mu, s) = (st.logistic_location, st.logistic_scale);
        let best = ll(mu, s);
        for (dm, ds) in [(1e-3, 0.0), (-1e-3, 0.0), (0.0, 1e-3), (0.0, -1e-3)] {
            assert!(ll(mu + dm, s + ds) <= best);
        }
    }

    #[test]
    fn two_point_moments() {
        let v: Vec<f64> = (0..40).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let st = distribution_stats(&v).unwrap();
        assert_eq!(st.mean, 0.0);
        assert!((st.excess_kurtosis + 2.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_and_small_inputs() {
        assert!(matches!(distribution_stats(&[1.0; 40]), Err(Error::Degenerate(_))));
        assert!(matches!(distribution_stats(&[1.0, 2.0]), Err(Error::TooFewRecords { .. })));
    }

    #[test]
    fn wtp_stats_use_signed_values_and_ignore_order() {
        let shape = Shape::new(1, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let recs: Vec<CardinalRecord> = (0..60)
            .map(|_| CardinalRecord {
                comparison: Comparison { prompt: 0, first: 0, second: 1 },
                preferred: if rng.random() { Side::First } else { Side::Second },
                wtp: rng.random_range(0.0..4.0),
                labeler: "l".into(),
                scale_tag: ScaleTag::Money,
            })
            .collect();
        let mut rev = recs.clone();
        rev.reverse();
        let a = wtp_distribution_stats(&CardinalDataset::new(shape, recs.clone()).unwrap()).unwrap();
        let b = wtp_distribution_stats(&CardinalDataset::new(shape, rev).unwrap()).unwrap();
        assert!((a.mean - b.mean).abs() < 1e-12 && (a.ks - b.ks).abs() < 1e-12);
        let signed: Vec<f64> = recs.iter().map(|r| r.signed_wtp()).collect();
        assert!((a.mean - mean(&signed)).abs() < 1e-12);
    }

    #[test]
    fn ks_against_exact_cdf() {
        let v = [0.1, 0.4, 0.7];
        // Uniform CDF: gaps are 1/3-0.1, 2/3-0.4, 1-0.7, 0.4-1/3, 0.7-2/3 ...
        let d = ks_statistic(&v, |x| x);
        assert!((d - (1.0 - 0.7f64).max(2.0 / 3.0 - 0.4).max(1.0 / 3.0 - 0.1)).abs() < 1e-15);
    }
}
