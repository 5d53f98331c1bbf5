//! Policy selection.
//!
//! * exact argmax of expected reward over an explicit candidate list;
//! * the closed-form KL-regularized optimum
//!   `pi*(y|x) ∝ pi_ref(y|x) exp(r(x, y) / beta)`;
//! * DPO and cardinal DPO (CDPO) losses with analytic gradients, for a
//!   one-parameter mixture family and for a full softmax-logit table;
//! * optimizers over both parameterizations.
//!
//! CDPO regresses the implicit margin
//! `beta log(pi(y'|x)/pi_ref(y'|x)) - beta log(pi(y|x)/pi_ref(y|x))` onto the
//! signed WTP value; DPO maximizes the log-sigmoid of the implicit
//! winner-minus-loser margin.

use serde::{Deserialize, Serialize};

use crate::dataset::{CardinalDataset, DatasetRef, OrdinalDataset};
use crate::error::{Error, Result};
use crate::model::{
    kl_to_reference, mixture_policy, policy_utility, FeasibleSet, MixtureFamily, Policy, RewardTable, Shape, Table,
};
use crate::numeric::{grid_then_golden, log_sigmoid, sigmoid};
use crate::reward_fit::FittedReward;

pub const DEFAULT_BETA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Dpo,
    Cdpo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub beta: f64,
}

impl LossSpec {
    pub fn new(kind: LossKind, beta: f64) -> Result<Self> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::Domain(format!("beta must be positive, got {beta}")));
        }
        Ok(Self { kind, beta })
    }

    pub fn dpo(beta: f64) -> Result<Self> {
        Self::new(LossKind::Dpo, beta)
    }

    pub fn cdpo(beta: f64) -> Result<Self> {
        Self::new(LossKind::Cdpo, beta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Grid size for the one-parameter search.
    pub grid_points: usize,
    /// Bracket width at which golden-section refinement stops.
    pub theta_tolerance: f64,
    /// Initial gradient step for the logit optimizer.
    pub step_size: f64,
    pub max_iter: usize,
    /// Gradient sup-norm at which the logit optimizer stops.
    pub tolerance: f64,
    /// Record a trace row every this many steps.
    pub log_every: usize,
    /// Rescale WTP values to `wtp_target_rms` root-mean-square before CDPO.
    pub standardize_wtp: bool,
    pub wtp_target_rms: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            grid_points: 201,
            theta_tolerance: 1e-10,
            step_size: 1.0,
            max_iter: 5_000,
            tolerance: 1e-9,
            log_every: 10,
            standardize_wtp: true,
            wtp_target_rms: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_points < 3 {
            return Err(Error::Argument("grid_points must be at least 3".into()));
        }
        if !(self.step_size > 0.0 && self.theta_tolerance > 0.0 && self.tolerance > 0.0) {
            return Err(Error::Argument("step size and tolerances must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Argument("log_every must be positive".into()));
        }
        let t = self.wtp_target_rms;
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::Argument(format!("wtp_target_rms must be positive, got {t}")));
        }
        Ok(())
    }
}

/// Rescale all WTP values so their root-mean-square is `target`. Returns
/// the data unchanged (factor 1) when every value is zero.
pub fn standardize_wtp(data: &CardinalDataset, target: f64) -> Result<(CardinalDataset, f64)> {
    if data.is_empty() {
        return Ok((data.clone(), 1.0));
    }
    let rms = (data.records().iter().map(|r| r.wtp * r.wtp).sum::<f64>() / data.len() as f64).sqrt();
    if rms == 0.0 {
        return Ok((data.clone(), 1.0));
    }
    let factor = target / rms;
    Ok((data.scaled(factor)?, factor))
}

/// Index of the candidate with the highest expected reward; ties go to the
/// lowest index.
pub fn argmax_over_finite<'a>(candidates: &'a [Policy], reward: &RewardTable) -> Result<(usize, &'a Policy)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in candidates.iter().enumerate() {
        let u = policy_utility(p, reward, None)?;
        if best.is_none_or(|(_, b)| u > b) {
            best = Some((i, u));
        }
    }
    let (i, _) = best.ok_or(Error::Empty("candidate list"))?;
    Ok((i, &candidates[i]))
}

/// `pi*(y|x) = pi_ref(y|x) exp(r(x, y) / beta) / Z(x)`.
pub fn kl_regularized_optimum(reference: &Policy, reward: &RewardTable, beta: f64) -> Result<Policy> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::Domain(format!("beta must be positive, got {beta}")));
    }
    let shape = reference.shape();
    shape.expect(reward.shape())?;
    let mut logits = Table::filled(shape, f64::NEG_INFINITY);
    for x in 0..shape.prompts {
        for y in 0..shape.responses {
            let p = reference.prob(x, y);
            if p > 0.0 {
                logits.set(x, y, p.ln() + reward.get(x, y) / beta);
            }
        }
    }
    Ok(Policy::softmax(&logits))
}

/// `beta log(pi(y|x) / pi_ref(y|x))`.
pub fn implicit_reward(policy: &Policy, reference: &Policy, beta: f64, x: usize, y: usize) -> Result<f64> {
    policy.shape().expect(reference.shape())?;
    policy.shape().check_cell(x, y)?;
    let (p, q) = (policy.prob(x, y), reference.prob(x, y));
    if p <= 0.0 || q <= 0.0 {
        return Err(Error::Support { prompt: x, response: y });
    }
    Ok(beta * (p / q).ln())
}

/// Implicit margin on `second` over `first`.
pub fn implicit_margin(policy: &Policy, reference: &Policy, beta: f64, x: usize, first: usize, second: usize) -> Result<f64> {
    Ok(implicit_reward(policy, reference, beta, x, second)? - implicit_reward(policy, reference, beta, x, first)?)
}

/// A differentiable policy: either a point on a mixture family or a
/// softmax over a logit table.
#[derive(Debug, Clone, Copy)]
pub enum PolicyParams<'a> {
    Mixture { family: &'a MixtureFamily, theta: f64 },
    Logits(&'a Table),
}

impl PolicyParams<'_> {
    pub fn shape(&self) -> Shape {
        match self {
            PolicyParams::Mixture { family, .. } => family.shape(),
            PolicyParams::Logits(t) => t.shape(),
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            PolicyParams::Mixture { .. } => 1,
            PolicyParams::Logits(t) => t.shape().cells(),
        }
    }

    pub fn policy(&self) -> Result<Policy> {
        match *self {
            PolicyParams::Mixture { family, theta } => mixture_policy(family, theta),
            PolicyParams::Logits(t) => Ok(Policy::softmax(t)),
        }
    }

    /// Chain rule from `dL/d log pi(y|x)` to the parameters.
    fn pullback(&self, policy: &Policy, cell_grad: &Table) -> Vec<f64> {
        let shape = self.shape();
        match *self {
            PolicyParams::Mixture { family, .. } => {
                let mut g = 0.0;
                for x in 0..shape.prompts {
                    for y in 0..shape.responses {
                        let c = cell_grad.get(x, y);
                        if c != 0.0 {
                            g += c * (family.pi1().prob(x, y) - family.pi2().prob(x, y)) / policy.prob(x, y);
                        }
                    }
                }
                vec![g]
            }
            PolicyParams::Logits(_) => {
                let mut out = vec![0.0; shape.cells()];
                for x in 0..shape.prompts {
                    let row = cell_grad.row(x);
                    let total: f64 = row.iter().sum();
                    for y in 0..shape.responses {
                        out[x * shape.responses + y] = row[y] - policy.prob(x, y) * total;
                    }
                }
                out
            }
        }
    }
}

/// Loss value, parameter gradient and per-record loss.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub loss: f64,
    pub gradient: Vec<f64>,
    pub per_record: Vec<f64>,
}

fn log_ratio(policy: &Policy, reference: &Policy, x: usize, y: usize) -> Result<f64> {
    let (p, q) = (policy.prob(x, y), reference.prob(x, y));
    if p <= 0.0 || q <= 0.0 {
        return Err(Error::Support { prompt: x, response: y });
    }
    Ok((p / q).ln())
}

fn check_inputs(params: &PolicyParams<'_>, reference: &Policy, n: usize, beta: f64) -> Result<()> {
    params.shape().expect(reference.shape())?;
    if n == 0 {
        return Err(Error::Empty("batch"));
    }
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::Domain(format!("beta must be positive, got {beta}")));
    }
    Ok(())
}

/// Mean squared deviation between implicit margins and signed WTP values.
pub fn cdpo_eval(params: PolicyParams<'_>, reference: &Policy, batch: &CardinalDataset, beta: f64) -> Result<LossEval> {
    check_inputs(&params, reference, batch.len(), beta)?;
    params.shape().expect(batch.shape())?;
    let policy = params.policy()?;
    let n = batch.len() as f64;
    let mut cell_grad = Table::filled(policy.shape(), 0.0);
    let mut per_record = Vec::with_capacity(batch.len());
    for r in batch.records() {
        let c = r.comparison;
        let margin = beta * (log_ratio(&policy, reference, c.prompt, c.second)? - log_ratio(&policy, reference, c.prompt, c.first)?);
        let e = margin - r.signed_wtp();
        per_record.push(e * e);
        let g = 2.0 * e * beta / n;
        cell_grad.set(c.prompt, c.second, cell_grad.get(c.prompt, c.second) + g);
        cell_grad.set(c.prompt, c.first, cell_grad.get(c.prompt, c.first) - g);
    }
    Ok(LossEval {
        loss: per_record.iter().sum::<f64>() / n,
        gradient: params.pullback(&policy, &cell_grad),
        per_record,
    })
}

/// Mean `-log sigmoid(beta (log-ratio(winner) - log-ratio(loser)))`.
pub fn dpo_eval(params: PolicyParams<'_>, reference: &Policy, batch: &OrdinalDataset, beta: f64) -> Result<LossEval> {
    check_inputs(&params, reference, batch.len(), beta)?;
    params.shape().expect(batch.shape())?;
    let policy = params.policy()?;
    let n = batch.len() as f64;
    let mut cell_grad = Table::filled(policy.shape(), 0.0);
    let mut per_record = Vec::with_capacity(batch.len());
    for r in batch.records() {
        let x = r.comparison.prompt;
        let (w, l) = (r.winner_response(), r.loser_response());
        let z = beta * (log_ratio(&policy, reference, x, w)? - log_ratio(&policy, reference, x, l)?);
        per_record.push(-log_sigmoid(z));
        let g = -sigmoid(-z) * beta / n;
        cell_grad.set(x, w, cell_grad.get(x, w) + g);
        cell_grad.set(x, l, cell_grad.get(x, l) - g);
    }
    Ok(LossEval {
        loss: per_record.iter().sum::<f64>() / n,
        gradient: params.pullback(&policy, &cell_grad),
        per_record,
    })
}

pub fn cdpo_loss(params: PolicyParams<'_>, reference: &Policy, batch: &CardinalDataset, beta: f64) -> Result<(f64, Vec<f64>)> {
    cdpo_eval(params, reference, batch, beta).map(|e| (e.loss, e.gradient))
}

pub fn dpo_loss(params: PolicyParams<'_>, reference: &Policy, batch: &OrdinalDataset, beta: f64) -> Result<(f64, Vec<f64>)> {
    dpo_eval(params, reference, batch, beta).map(|e| (e.loss, e.gradient))
}

/// Either loss on either dataset kind.
pub fn evaluate_loss(params: PolicyParams<'_>, reference: &Policy, data: DatasetRef<'_>, loss: LossSpec) -> Result<LossEval> {
    match (loss.kind, data) {
        (LossKind::Dpo, DatasetRef::Ordinal(d)) => dpo_eval(params, reference, d, loss.beta),
        (LossKind::Dpo, DatasetRef::Cardinal(d)) => dpo_eval(params, reference, &d.to_ordinal(), loss.beta),
        (LossKind::Cdpo, DatasetRef::Cardinal(d)) => cdpo_eval(params, reference, d, loss.beta),
        (LossKind::Cdpo, DatasetRef::Ordinal(_)) => {
            Err(Error::Argument("CDPO needs willingness-to-pay data".into()))
        }
    }
}

/// Apply the configured WTP standardization for CDPO; DPO data passes
/// through untouched.
fn prepare_data<'a>(data: DatasetRef<'a>, loss: LossSpec, config: &OptimizerConfig, owned: &'a mut Option<CardinalDataset>) -> Result<DatasetRef<'a>> {
    match (loss.kind, data, config.standardize_wtp) {
        (LossKind::Cdpo, DatasetRef::Cardinal(d), true) => {
            *owned = Some(standardize_wtp(d, config.wtp_target_rms)?.0);
            Ok(DatasetRef::Cardinal(owned.as_ref().expect("just set")))
        }
        (LossKind::Dpo, DatasetRef::Cardinal(d), _) => {
            // handled in evaluate_loss; keep the borrowed form
            Ok(DatasetRef::Cardinal(d))
        }
        _ => Ok(data),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaResult {
    pub theta: f64,
    pub loss: f64,
}

/// Minimize a preference loss along `pi_theta = theta pi1 + (1 - theta) pi2`
/// by grid search followed by golden-section refinement. Points where the
/// mixture loses support score `+inf`.
pub fn optimize_theta(
    family: &MixtureFamily,
    loss: LossSpec,
    data: DatasetRef<'_>,
    reference: &Policy,
    config: &OptimizerConfig,
) -> Result<ThetaResult> {
    config.validate()?;
    if family.is_degenerate() {
        return Err(Error::Degenerate("pi1 and pi2 are identical".into()));
    }
    family.shape().expect(reference.shape())?;
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut owned = None;
    let data = prepare_data(data, loss, config, &mut owned)?;
    // Surface shape and kind errors before the search swallows them.
    if let Err(e) = evaluate_loss(PolicyParams::Mixture { family, theta: 0.5 }, reference, data, loss) {
        if !matches!(e, Error::Support { .. }) {
            return Err(e);
        }
    }
    let objective = |theta: f64| {
        evaluate_loss(PolicyParams::Mixture { family, theta }, reference, data, loss)
            .map(|e| e.loss)
            .unwrap_or(f64::INFINITY)
    };
    let (theta, value) = grid_then_golden(objective, config.grid_points, config.theta_tolerance);
    if !value.is_finite() {
        return Err(Error::Degenerate("loss is infinite on the whole grid".into()));
    }
    Ok(ThetaResult { theta, loss: value })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Converged,
    /// Iteration cap reached before the gradient tolerance.
    MaxIterations,
    /// Line search could not decrease the loss further.
    Stalled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub loss: f64,
    pub kl_to_reference: f64,
    /// Ground-truth utility of the current iterate, when tracked.
    pub utility: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TabularRun {
    pub policy: Policy,
    pub logits: Table,
    pub status: RunStatus,
    pub iterations: usize,
    pub trace: Vec<TraceStep>,
    /// Per-record loss at every traced step (`trace[i]` ↔ `sample_losses[i]`).
    pub sample_losses: Vec<Vec<f64>>,
}

/// Full-batch gradient descent on per-cell logits initialized at
/// `log pi_ref`, with Barzilai-Borwein steps and Armijo backtracking.
pub fn optimize_tabular(reference: &Policy, data: DatasetRef<'_>, loss: LossSpec, config: &OptimizerConfig) -> Result<TabularRun> {
    optimize_tabular_tracked(reference, data, loss, config, None)
}

/// [`optimize_tabular`] that also records ground-truth utility in the trace.
pub fn optimize_tabular_tracked(
    reference: &Policy,
    data: DatasetRef<'_>,
    loss: LossSpec,
    config: &OptimizerConfig,
    ground_truth: Option<&RewardTable>,
) -> Result<TabularRun> {
    config.validate()?;
    let shape = reference.shape();
    shape.expect(data.shape())?;
    if let Some(gt) = ground_truth {
        shape.expect(gt.shape())?;
    }
    if let Some(i) = reference.table().as_slice().iter().position(|&p| p <= 0.0) {
        return Err(Error::Support {
            prompt: i / shape.responses,
            response: i % shape.responses,
        });
    }
    let mut owned = None;
    let data = prepare_data(data, loss, config, &mut owned)?;

    let logits_of = |v: &[f64]| Table::from_flat(shape, v.to_vec());
    let mut theta: Vec<f64> = reference.table().as_slice().iter().map(|p| p.ln()).collect();
    let mut eval = evaluate_loss(PolicyParams::Logits(&logits_of(&theta)?), reference, data, loss)?;

    let mut trace = Vec::new();
    let mut sample_losses = Vec::new();
    let mut record = |step: usize, theta: &[f64], eval: &LossEval| -> Result<()> {
        let policy = Policy::softmax(&logits_of(theta)?);
        trace.push(TraceStep {
            step,
            loss: eval.loss,
            kl_to_reference: kl_to_reference(&policy, reference)?,
            utility: ground_truth.map(|gt| policy_utility(&policy, gt, None)).transpose()?,
        });
        sample_losses.push(eval.per_record.clone());
        Ok(())
    };
    record(0, &theta, &eval)?;
    let mut last_logged = 0;

    let mut step = config.step_size;
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut status = RunStatus::MaxIterations;
    let mut iterations = 0;
    while iterations < config.max_iter {
        let gnorm = eval.gradient.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gnorm < config.tolerance {
            status = RunStatus::Converged;
            break;
        }
        if let Some((pt, pg)) = &prev {
            let (mut ss, mut sy) = (0.0, 0.0);
            for i in 0..theta.len() {
                let s = theta[i] - pt[i];
                ss += s * s;
                sy += s * (eval.gradient[i] - pg[i]);
            }
            if sy > 0.0 {
                step = ss / sy;
            }
        }
        let g2: f64 = eval.gradient.iter().map(|g| g * g).sum();
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> = theta.iter().zip(&eval.gradient).map(|(t, g)| t - step * g).collect();
            if let Ok(c) = evaluate_loss(PolicyParams::Logits(&logits_of(&cand)?), reference, data, loss) {
                let armijo = c.loss < eval.loss && c.loss <= eval.loss - 1e-4 * step * g2;
                let cnorm = c.gradient.iter().fold(0.0f64, |m, g| m.max(g.abs()));
                let flat = (c.loss - eval.loss).abs() <= 1e-13 * eval.loss.abs().max(1e-300) && cnorm < gnorm;
                if armijo || flat {
                    accepted = Some((cand, c));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((cand, c)) = accepted else {
            status = RunStatus::Stalled;
            break;
        };
        prev = Some((std::mem::replace(&mut theta, cand), std::mem::replace(&mut eval, c).gradient));
        iterations += 1;
        if iterations % config.log_every == 0 {
            record(iterations, &theta, &eval)?;
            last_logged = iterations;
        }
    }
    if status == RunStatus::MaxIterations && eval.gradient.iter().all(|g| g.abs() < config.tolerance) {
        status = RunStatus::Converged;
    }
    if last_logged != iterations {
        record(iterations, &theta, &eval)?;
    }
    let logits = logits_of(&theta)?;
    Ok(TabularRun {
        policy: Policy::softmax(&logits),
        logits,
        status,
        iterations,
        trace,
        sample_losses,
    })
}

/// Mean-reward maximization over a feasible set with a fitted reward.
pub fn rlhf_select(fitted: &FittedReward, feasible: &FeasibleSet, config: &OptimizerConfig) -> Result<Policy> {
    feasible.validate()?;
    let reward = &fitted.table;
    match feasible {
        FeasibleSet::Explicit(ps) => argmax_over_finite(ps, reward).map(|(_, p)| p.clone()),
        FeasibleSet::KlBall { reference, beta } => kl_regularized_optimum(reference, reward, *beta),
        FeasibleSet::Mixture(family) => {
            if family.is_degenerate() {
                return Ok(family.pi1().clone());
            }
            let u1 = policy_utility(family.pi1(), reward, None)?;
            let u2 = policy_utility(family.pi2(), reward, None)?;
            // utility is linear in theta
            let (theta, _) = grid_then_golden(|t| -(t * u1 + (1.0 - t) * u2), config.grid_points, config.theta_tolerance);
            mixture_policy(family, theta)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotator::{generate_cardinal, AnnotatorKind, AnnotatorModel, Assignment};
    use crate::dataset::{CardinalRecord, Comparison, OrdinalRecord, ScaleTag, Side};
    use crate::reward_fit::fit_wtp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

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

    fn random_pairs(rng: &mut impl Rng, shape: Shape, n: usize) -> Vec<Comparison> {
        (0..n)
            .map(|_| {
                let x = rng.random_range(0..shape.prompts);
                let a = rng.random_range(0..shape.responses);
                let b = (a + rng.random_range(1..shape.responses)) % shape.responses;
                Comparison { prompt: x, first: a, second: b }
            })
            .collect()
    }

    fn exact_wtp(reward: &RewardTable, reqs: &[Comparison]) -> CardinalDataset {
        generate_cardinal(&[AnnotatorModel::new("w", AnnotatorKind::ExactWtp)], reqs, reward, Assignment::RoundRobin).unwrap()
    }

    fn figure_one_family() -> MixtureFamily {
        let shape = Shape::new(3, 2).unwrap();
        MixtureFamily::new(
            Policy::deterministic(shape, &[0, 0, 0]).unwrap(),
            Policy::deterministic(shape, &[1, 1, 1]).unwrap(),
        )
        .unwrap()
    }

    fn figure_one_cardinal() -> CardinalDataset {
        let shape = Shape::new(3, 2).unwrap();
        let rec = |x, side, w| CardinalRecord {
            comparison: Comparison { prompt: x, first: 0, second: 1 },
            preferred: side,
            wtp: w,
            labeler: "l".into(),
            scale_tag: ScaleTag::Money,
        };
        CardinalDataset::new(shape, vec![rec(0, Side::First, 100.0), rec(1, Side::Second, 0.2), rec(2, Side::Second, 0.2)]).unwrap()
    }

    #[test]
    fn argmax_picks_higher_utility_and_breaks_ties_low() {
        let fam = figure_one_family();
        let fitted = fit_wtp(&figure_one_cardinal()).unwrap();
        let candidates = vec![fam.pi2().clone(), fam.pi1().clone()];
        assert_eq!(argmax_over_finite(&candidates, &fitted.table).unwrap().0, 1);
        let same = vec![fam.pi1().clone(); 4];
        assert_eq!(argmax_over_finite(&same, &fitted.table).unwrap().0, 0);
        assert!(argmax_over_finite(&[], &fitted.table).is_err());
    }

    #[test]
    fn argmax_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = Shape::new(3, 4).unwrap();
        let r = random_reward(&mut rng, shape);
        let cands: Vec<Policy> = (0..20).map(|_| random_policy(&mut rng, shape)).collect();
        let mut best = (0, f64::NEG_INFINITY);
        for (i, c) in cands.iter().enumerate() {
            let mut u = 0.0;
            for x in 0..3 {
                for y in 0..4 {
                    u += c.prob(x, y) * r.get(x, y);
                }
            }
            if u > best.1 {
                best = (i, u);
            }
        }
        assert_eq!(argmax_over_finite(&cands, &r).unwrap().0, best.0);
    }

    #[test]
    fn kl_optimum_examples() {
        let shape = Shape::new(2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let reference = random_policy(&mut rng, shape);
        let constant = RewardTable::from_rows(&[vec![2.0; 3], vec![-1.0; 3]]).unwrap();
        let p = kl_regularized_optimum(&reference, &constant, 0.1).unwrap();
        assert!(p.max_total_variation(&reference) < 1e-12);

        let beta = 0.1;
        let uniform = Policy::uniform(Shape::new(1, 2).unwrap());
        let r = RewardTable::from_rows(&[vec![0.0, beta * 3f64.ln()]]).unwrap();
        let p = kl_regularized_optimum(&uniform, &r, beta).unwrap();
        assert!((p.prob(0, 0) - 0.25).abs() < 1e-12 && (p.prob(0, 1) - 0.75).abs() < 1e-12);

        let r = random_reward(&mut rng, shape);
        let p = kl_regularized_optimum(&reference, &r, 1e6).unwrap();
        assert!(p.max_total_variation(&reference) < 1e-4);
        assert!(kl_regularized_optimum(&reference, &r, 0.0).is_err());
    }

    #[test]
    fn kl_optimum_is_stable_for_tiny_beta() {
        let uniform = Policy::uniform(Shape::new(1, 3).unwrap());
        let r = RewardTable::from_rows(&[vec![0.0, 5.0, 4.0]]).unwrap();
        let p = kl_regularized_optimum(&uniform, &r, 1e-3).unwrap();
        assert!(p.row(0).iter().all(|v| v.is_finite()));
        assert!((p.prob(0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn implicit_reward_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = Shape::new(2, 3).unwrap();
        let reference = random_policy(&mut rng, shape);
        assert_eq!(implicit_reward(&reference, &reference, 0.1, 1, 2).unwrap(), 0.0);

        let r = random_reward(&mut rng, shape);
        let beta = 0.25;
        let opt = kl_regularized_optimum(&reference, &r, beta).unwrap();
        for x in 0..2 {
            for (a, b) in [(0, 1), (1, 2), (0, 2)] {
                let m = implicit_margin(&opt, &reference, beta, x, a, b).unwrap();
                assert!((m - r.margin(x, a, b)).abs() < 1e-9);
            }
        }
        let p = random_policy(&mut rng, shape);
        let one = implicit_reward(&p, &reference, 0.3, 0, 1).unwrap();
        let two = implicit_reward(&p, &reference, 0.6, 0, 1).unwrap();
        assert!((two - 2.0 * one).abs() < 1e-12);

        let point = Policy::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let half = Policy::uniform(Shape::new(1, 2).unwrap());
        assert!(matches!(implicit_reward(&point, &half, 0.1, 0, 1), Err(Error::Support { .. })));
    }

    #[test]
    fn cdpo_zero_at_reference_with_zero_wtp() {
        let shape = Shape::new(2, 3).unwrap();
        let reference = Policy::uniform(shape);
        let logits = Table::filled(shape, 0.3);
        let zero = RewardTable::zeros(shape);
        let d = exact_wtp(&zero, &Comparison::all_pairs(shape));
        let (l, g) = cdpo_loss(PolicyParams::Logits(&logits), &reference, &d, 0.1).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cdpo_zero_at_closed_form_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = Shape::new(3, 4).unwrap();
        let reference = random_policy(&mut rng, shape);
        let truth = random_reward(&mut rng, shape);
        let d = exact_wtp(&truth, &Comparison::all_pairs(shape));
        let fitted = fit_wtp(&d).unwrap();
        let beta = 0.1;
        let opt = kl_regularized_optimum(&reference, &fitted.table, beta).unwrap();
        let logits = Table::from_flat(shape, opt.table().as_slice().iter().map(|p| p.ln()).collect()).unwrap();
        let (l, _) = cdpo_loss(PolicyParams::Logits(&logits), &reference, &d, beta).unwrap();
        assert!(l < 1e-10, "{l}");
    }

    #[test]
    fn dpo_examples() {
        let shape = Shape::new(1, 2).unwrap();
        let reference = Policy::uniform(shape);
        let rec = OrdinalRecord {
            comparison: Comparison { prompt: 0, first: 0, second: 1 },
            winner: Side::Second,
            labeler: "l".into(),
        };
        let d = OrdinalDataset::new(shape, vec![rec.clone(), rec]).unwrap();
        let at_ref = Table::filled(shape, 0.0);
        let (l, _) = dpo_loss(PolicyParams::Logits(&at_ref), &reference, &d, 0.1).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        // beta * logit gap = 10
        let far = Table::from_flat(shape, vec![0.0, 100.0]).unwrap();
        let (l, _) = dpo_loss(PolicyParams::Logits(&far), &reference, &d, 0.1).unwrap();
        assert!(l < 1e-4);
        assert!((l - (-log_sigmoid(10.0))).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for gap in [0.0, 5.0, 20.0, 60.0, 100.0] {
            let t = Table::from_flat(shape, vec![0.0, gap]).unwrap();
            let (l, _) = dpo_loss(PolicyParams::Logits(&t), &reference, &d, 0.1).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    fn rel_close(fd: f64, a: f64) -> bool {
        (fd - a).abs() <= 1e-4 * fd.abs().max(a.abs()).max(1e-6)
    }

    #[test]
    fn logit_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let shape = Shape::new(2, 3).unwrap();
        for _ in 0..5 {
            let reference = random_policy(&mut rng, shape);
            let truth = random_reward(&mut rng, shape);
            let reqs = random_pairs(&mut rng, shape, 12);
            let card = generate_cardinal(
                &[AnnotatorModel::new("n", AnnotatorKind::NoisyWtp).with_noise(0.5).with_seed(rng.random())],
                &reqs,
                &truth,
                Assignment::RoundRobin,
            )
            .unwrap();
            let ord = card.to_ordinal();
            let vals: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let at = |v: &[f64]| Table::from_flat(shape, v.to_vec()).unwrap();
            let (_, gc) = cdpo_loss(PolicyParams::Logits(&at(&vals)), &reference, &card, 0.3).unwrap();
            let (_, gd) = dpo_loss(PolicyParams::Logits(&at(&vals)), &reference, &ord, 0.3).unwrap();
            let h = 1e-5;
            for i in 0..6 {
                let (mut p, mut m) = (vals.clone(), vals.clone());
                p[i] += h;
                m[i] -= h;
                let fc = (cdpo_loss(PolicyParams::Logits(&at(&p)), &reference, &card, 0.3).unwrap().0
                    - cdpo_loss(PolicyParams::Logits(&at(&m)), &reference, &card, 0.3).unwrap().0)
                    / (2.0 * h);
                let fd = (dpo_loss(PolicyParams::Logits(&at(&p)), &reference, &ord, 0.3).unwrap().0
                    - dpo_loss(PolicyParams::Logits(&at(&m)), &reference, &ord, 0.3).unwrap().0)
                    / (2.0 * h);
                assert!(rel_close(fc, gc[i]), "cdpo coord {i}: {fc} vs {}", gc[i]);
                assert!(rel_close(fd, gd[i]), "dpo coord {i}: {fd} vs {}", gd[i]);
            }
        }
    }

    #[test]
    fn theta_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shape = Shape::new(3, 3).unwrap();
        let fam = MixtureFamily::new(random_policy(&mut rng, shape), random_policy(&mut rng, shape)).unwrap();
        let reference = mixture_policy(&fam, 0.5).unwrap();
        let truth = random_reward(&mut rng, shape);
        let card = exact_wtp(&truth, &random_pairs(&mut rng, shape, 10));
        let ord = card.to_ordinal();
        let h = 1e-5;
        for theta in [0.1, 0.37, 0.8] {
            let p = |t| PolicyParams::Mixture { family: &fam, theta: t };
            let (_, gc) = cdpo_loss(p(theta), &reference, &card, 0.2).unwrap();
            let fc = (cdpo_loss(p(theta + h), &reference, &card, 0.2).unwrap().0 - cdpo_loss(p(theta - h), &reference, &card, 0.2).unwrap().0) / (2.0 * h);
            assert!(rel_close(fc, gc[0]), "{fc} vs {}", gc[0]);
            let (_, gd) = dpo_loss(p(theta), &reference, &ord, 0.2).unwrap();
            let fd = (dpo_loss(p(theta + h), &reference, &ord, 0.2).unwrap().0 - dpo_loss(p(theta - h), &reference, &ord, 0.2).unwrap().0) / (2.0 * h);
            assert!(rel_close(fd, gd[0]), "{fd} vs {}", gd[0]);
        }
    }

    #[test]
    fn cdpo_invariant_to_row_constant_logit_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shape = Shape::new(2, 3).unwrap();
        let reference = random_policy(&mut rng, shape);
        let d = exact_wtp(&random_reward(&mut rng, shape), &Comparison::all_pairs(shape));
        let vals: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let shifted: Vec<f64> = vals.iter().enumerate().map(|(i, v)| v + if i < 3 { 7.5 } else { -3.0 }).collect();
        let a = cdpo_loss(PolicyParams::Logits(&Table::from_flat(shape, vals).unwrap()), &reference, &d, 0.1).unwrap().0;
        let b = cdpo_loss(PolicyParams::Logits(&Table::from_flat(shape, shifted).unwrap()), &reference, &d, 0.1).unwrap().0;
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn loss_support_errors() {
        let fam = figure_one_family();
        let reference = mixture_policy(&fam, 0.5).unwrap();
        let d = figure_one_cardinal();
        let r = cdpo_loss(PolicyParams::Mixture { family: &fam, theta: 1.0 }, &reference, &d, 0.1);
        assert!(matches!(r, Err(Error::Support { .. })));
    }

    #[test]
    fn figure_one_theta_directions() {
        let fam = figure_one_family();
        let reference = mixture_policy(&fam, 0.5).unwrap();
        let card = figure_one_cardinal();
        let ord = card.to_ordinal();
        let config = OptimizerConfig::default();
        let dpo = optimize_theta(&fam, LossSpec::dpo(0.1).unwrap(), DatasetRef::Ordinal(&ord), &reference, &config).unwrap();
        let cdpo = optimize_theta(&fam, LossSpec::cdpo(0.1).unwrap(), DatasetRef::Cardinal(&card), &reference, &config).unwrap();
        assert!(dpo.theta < 0.5, "{dpo:?}");
        assert!(cdpo.theta > 0.5, "{cdpo:?}");
        // Cross-check against plain grid evaluation.
        let grid_loss = |t: f64| {
            dpo_loss(PolicyParams::Mixture { family: &fam, theta: t }, &reference, &ord, 0.1).unwrap().0
        };
        assert!(grid_loss(0.3) < grid_loss(0.7));
        let raw = OptimizerConfig { standardize_wtp: false, ..config };
        let cdpo_raw = optimize_theta(&fam, LossSpec::cdpo(0.1).unwrap(), DatasetRef::Cardinal(&card), &reference, &raw).unwrap();
        assert!(cdpo_raw.theta > 0.5);
    }

    #[test]
    fn theta_with_large_wtp_for_pi1() {
        let fam = figure_one_family();
        let reference = mixture_policy(&fam, 0.5).unwrap();
        let shape = fam.shape();
        let recs = (0..3)
            .map(|x| CardinalRecord {
                comparison: Comparison { prompt: x, first: 0, second: 1 },
                preferred: Side::First,
                wtp: 50.0,
                labeler: "l".into(),
                scale_tag: ScaleTag::Money,
            })
            .collect();
        let d = CardinalDataset::new(shape, recs).unwrap();
        let r = optimize_theta(&fam, LossSpec::cdpo(0.1).unwrap(), DatasetRef::Cardinal(&d), &reference, &OptimizerConfig::default()).unwrap();
        assert!(r.theta > 0.5);
    }

    #[test]
    fn theta_symmetric_data_gives_half() {
        let fam = figure_one_family();
        let reference = mixture_policy(&fam, 0.5).unwrap();
        let shape = fam.shape();
        let mk = |x, side| CardinalRecord {
            comparison: Comparison { prompt: x, first: 0, second: 1 },
            preferred: side,
            wtp: 2.0,
            labeler: "l".into(),
            scale_tag: ScaleTag::Money,
        };
        let d = CardinalDataset::new(shape, vec![mk(0, Side::First), mk(0, Side::Second), mk(1, Side::First), mk(2, Side::Second)]).unwrap();
        let config = OptimizerConfig::default();
        for loss in [LossSpec::cdpo(0.1).unwrap(), LossSpec::dpo(0.1).unwrap()] {
            let r = optimize_theta(&fam, loss, DatasetRef::Cardinal(&d), &reference, &config).unwrap();
            assert!((r.theta - 0.5).abs() <= 1.0 / 200.0, "{loss:?}: {r:?}");
        }
    }

    #[test]
    fn theta_swap_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let shape = Shape::new(3, 3).unwrap();
        let fam = MixtureFamily::new(random_policy(&mut rng, shape), random_policy(&mut rng, shape)).unwrap();
        let reference = mixture_policy(&fam, 0.5).unwrap();
        let d = exact_wtp(&random_reward(&mut rng, shape), &random_pairs(&mut rng, shape, 15));
        let config = OptimizerConfig::default();
        let swapped = fam.swapped();
        for loss in [LossSpec::cdpo(0.5).unwrap(), LossSpec::dpo(0.5).unwrap()] {
            let a = optimize_theta(&fam, loss, DatasetRef::Cardinal(&d), &reference, &config).unwrap();
            let b = optimize_theta(&swapped, loss, DatasetRef::Cardinal(&d), &reference, &config).unwrap();
            assert!((a.theta - (1.0 - b.theta)).abs() < 1e-6, "{a:?} {b:?}");
        }
    }

    #[test]
    fn theta_degenerate_family() {
        let p = Policy::uniform(Shape::new(3, 2).unwrap());
        let fam = MixtureFamily::new(p.clone(), p.clone()).unwrap();
        let r = optimize_theta(&fam, LossSpec::cdpo(0.1).unwrap(), DatasetRef::Cardinal(&figure_one_cardinal()), &p, &OptimizerConfig::default());
        assert!(matches!(r, Err(Error::Degenerate(_))));
    }

    #[test]
    fn tabular_zero_steps_returns_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape = Shape::new(2, 3).unwrap();
        let reference = random_policy(&mut rng, shape);
        let d = exact_wtp(&random_reward(&mut rng, shape), &Comparison::all_pairs(shape));
        let config = OptimizerConfig { max_iter: 0, ..Default::default() };
        let run = optimize_tabular(&reference, DatasetRef::Cardinal(&d), LossSpec::cdpo(0.1).unwrap(), &config).unwrap();
        assert!(run.policy.max_total_variation(&reference) < 1e-12);
        assert_eq!(run.iterations, 0);
    }

    #[test]
    fn tabular_cdpo_reaches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let shape = Shape::new(3, 4).unwrap();
        let reference = random_policy(&mut rng, shape);
        let d = exact_wtp(&random_reward(&mut rng, shape), &Comparison::all_pairs(shape));
        let config = OptimizerConfig { standardize_wtp: false, tolerance: 1e-12, max_iter: 20_000, ..Default::default() };
        let beta = 0.1;
        let run = optimize_tabular(&reference, DatasetRef::Cardinal(&d), LossSpec::cdpo(beta).unwrap(), &config).unwrap();
        let target = kl_regularized_optimum(&reference, &fit_wtp(&d).unwrap().table, beta).unwrap();
        assert_eq!(run.status, RunStatus::Converged);
        assert!(run.policy.max_total_variation(&target) < 1e-3);
        for w in run.trace.windows(2) {
            assert!(w[1].loss <= w[0].loss + 1e-15);
        }
    }

    #[test]
    fn tabular_rejects_zero_reference() {
        let shape = Shape::new(1, 2).unwrap();
        let reference = Policy::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let d = exact_wtp(&RewardTable::zeros(shape), &Comparison::all_pairs(shape));
        let r = optimize_tabular(&reference, DatasetRef::Cardinal(&d), LossSpec::cdpo(0.1).unwrap(), &OptimizerConfig::default());
        assert!(matches!(r, Err(Error::Support { .. })));
    }

    #[test]
    fn rlhf_select_dispatch() {
        let fam = figure_one_family();
        let fitted = fit_wtp(&figure_one_cardinal()).unwrap();
        let config = OptimizerConfig::default();
        let explicit = FeasibleSet::Explicit(vec![fam.pi2().clone(), fam.pi1().clone()]);
        assert_eq!(&rlhf_select(&fitted, &explicit, &config).unwrap(), fam.pi1());

        let mixture = FeasibleSet::Mixture(fam.clone());
        assert_eq!(&rlhf_select(&fitted, &mixture, &config).unwrap(), fam.pi1());

        let reference = Policy::uniform(fam.shape());
        let mut constant = fitted.clone();
        constant.table = RewardTable::zeros(fam.shape());
        let ball = FeasibleSet::KlBall { reference: reference.clone(), beta: 0.1 };
        assert!(rlhf_select(&constant, &ball, &config).unwrap().max_total_variation(&reference) < 1e-12);
    }

    #[test]
    fn rlhf_select_is_affine_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let shape = Shape::new(3, 3).unwrap();
        let truth = random_reward(&mut rng, shape);
        let fitted = fit_wtp(&exact_wtp(&truth, &Comparison::all_pairs(shape))).unwrap();
        let cands: Vec<Policy> = (0..10).map(|_| random_policy(&mut rng, shape)).collect();
        let feasible = FeasibleSet::Explicit(cands);
        let base = rlhf_select(&fitted, &feasible, &OptimizerConfig::default()).unwrap();
        let mut moved = fitted.clone();
        moved.table = fitted.table.affine(3.7, &[1.0, -4.0, 2.5]).unwrap();
        assert_eq!(rlhf_select(&moved, &feasible, &OptimizerConfig::default()).unwrap(), base);
    }
}
