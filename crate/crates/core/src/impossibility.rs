//! Counterexamples on which ordinal data cannot identify the better model.
//!
//! Two deterministic policies differ only on a handful of prompts, each with
//! two responses: `pi1` answers response 0 and `pi2` answers response 1.
//! Every reward in an instance prefers `pi1`'s answer on the "`pi1`
//! prompts" and `pi2`'s answer on the "`pi2` prompts", so any ordinal labeler
//! produces the same labels under either reward. Only the margin sizes
//! differ, and they flip which policy has higher total utility.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotator::{generate_cardinal, generate_ordinal, AnnotatorKind, AnnotatorModel, Assignment};
use crate::dataset::{CardinalDataset, Comparison, DatasetRef, OrdinalDataset};
use crate::error::{Error, Result};
use crate::model::{mixture_policy, policy_utility, MixtureFamily, Policy, RewardTable, Shape, TIE_TOLERANCE};
use crate::policy_opt::{optimize_theta, LossSpec, OptimizerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelId {
    Pi1,
    Pi2,
    /// Neither policy; e.g. a strict mixture.
    Other,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CounterexampleInstance {
    family: MixtureFamily,
    reward_a: RewardTable,
    reward_b: RewardTable,
    pi1_prompts: Vec<usize>,
    pi2_prompts: Vec<usize>,
}

/// Serializable description of an instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSummary {
    pub prompts: usize,
    pub responses: usize,
    pub pi1_prompts: Vec<usize>,
    pub pi2_prompts: Vec<usize>,
    pub reward_a: Vec<Vec<f64>>,
    pub reward_b: Vec<Vec<f64>>,
    pub preferred_under_a: ModelId,
    pub preferred_under_b: ModelId,
}

fn check_margins(label: &str, ms: &[f64]) -> Result<()> {
    if ms.is_empty() {
        return Err(Error::Construction(format!("{label}: need at least one prompt")));
    }
    if let Some(m) = ms.iter().find(|m| !(m.is_finite() && **m > 0.0)) {
        return Err(Error::Construction(format!("{label}: margin {m} is not positive")));
    }
    Ok(())
}

/// The two-prompt instance: `pi1` wins prompt `x1` by `m1` and `pi2` wins
/// `x2` by `m2`, with margins `(m1_a, m2_a)` under reward A and
/// `(m1_b, m2_b)` under reward B.
pub fn build_counterexample(m1_a: f64, m2_a: f64, m1_b: f64, m2_b: f64) -> Result<CounterexampleInstance> {
    build_counterexample_general(&[m1_a], &[m2_a], &[m1_b], &[m2_b])
}

/// Like [`build_counterexample`] but with the `pi2` prompt repeated
/// `copies` times. `copies = 2` with margins `(100, 0.2 | 0.2, 100)` gives
/// the layout where one large win outweighs two small losses.
pub fn build_counterexample_replicated(m1_a: f64, m2_a: f64, m1_b: f64, m2_b: f64, copies: usize) -> Result<CounterexampleInstance> {
    build_counterexample_general(&[m1_a], &vec![m2_a; copies], &[m1_b], &vec![m2_b; copies])
}

/// Prompts `0..k1` favor `pi1` with margins `pi1_a` / `pi1_b`; the next
/// `k2` prompts favor `pi2` with margins `pi2_a` / `pi2_b`.
pub fn build_counterexample_general(pi1_a: &[f64], pi2_a: &[f64], pi1_b: &[f64], pi2_b: &[f64]) -> Result<CounterexampleInstance> {
    for (label, ms) in [("pi1 margins under A", pi1_a), ("pi2 margins under A", pi2_a), ("pi1 margins under B", pi1_b), ("pi2 margins under B", pi2_b)] {
        check_margins(label, ms)?;
    }
    if pi1_a.len() != pi1_b.len() || pi2_a.len() != pi2_b.len() {
        return Err(Error::Construction("margin lists for A and B must have equal lengths".into()));
    }
    let (k1, k2) = (pi1_a.len(), pi2_a.len());
    let shape = Shape::new(k1 + k2, 2)?;
    let table = |p1: &[f64], p2: &[f64]| {
        let rows: Vec<Vec<f64>> = p1.iter().map(|&m| vec![m, 0.0]).chain(p2.iter().map(|&m| vec![0.0, m])).collect();
        RewardTable::from_rows(&rows)
    };
    let pi1 = Policy::deterministic(shape, &vec![0; k1 + k2])?;
    let pi2 = Policy::deterministic(shape, &vec![1; k1 + k2])?;
    let instance = CounterexampleInstance {
        family: MixtureFamily::new(pi1, pi2)?,
        reward_a: table(pi1_a, pi2_a)?,
        reward_b: table(pi1_b, pi2_b)?,
        pi1_prompts: (0..k1).collect(),
        pi2_prompts: (k1..k1 + k2).collect(),
    };
    instance.check()?;
    Ok(instance)
}

impl CounterexampleInstance {
    /// Re-verify the defining properties.
    pub fn check(&self) -> Result<()> {
        let shape = self.shape();
        for c in Comparison::all_pairs(shape) {
            let a = self.reward_a.margin(c.prompt, c.first, c.second);
            let b = self.reward_b.margin(c.prompt, c.first, c.second);
            if a.signum() != b.signum() || (a == 0.0) != (b == 0.0) {
                return Err(Error::InstanceInvariant(format!(
                    "ordinal preference differs on prompt {} between responses {} and {}",
                    c.prompt, c.first, c.second
                )));
            }
        }
        let gap_a = self.utility_gap(Branch::A)?;
        if gap_a <= TIE_TOLERANCE {
            return Err(Error::Construction(format!("reward A must strictly prefer pi1 (gap {gap_a})")));
        }
        let gap_b = self.utility_gap(Branch::B)?;
        if gap_b >= -TIE_TOLERANCE {
            return Err(Error::Construction(format!("reward B must strictly prefer pi2 (gap {gap_b})")));
        }
        Ok(())
    }

    pub fn shape(&self) -> Shape {
        self.family.shape()
    }

    pub fn family(&self) -> &MixtureFamily {
        &self.family
    }

    pub fn pi1(&self) -> &Policy {
        self.family.pi1()
    }

    pub fn pi2(&self) -> &Policy {
        self.family.pi2()
    }

    pub fn reward(&self, branch: Branch) -> &RewardTable {
        match branch {
            Branch::A => &self.reward_a,
            Branch::B => &self.reward_b,
        }
    }

    /// Which model has higher utility under `branch`.
    pub fn preferred(&self, branch: Branch) -> ModelId {
        match branch {
            Branch::A => ModelId::Pi1,
            Branch::B => ModelId::Pi2,
        }
    }

    /// `U(pi1) - U(pi2)` under the branch's reward.
    pub fn utility_gap(&self, branch: Branch) -> Result<f64> {
        let r = self.reward(branch);
        Ok(policy_utility(self.pi1(), r, None)? - policy_utility(self.pi2(), r, None)?)
    }

    /// Uniform mixture of the two policies.
    pub fn reference(&self) -> Policy {
        mixture_policy(&self.family, 0.5).expect("0.5 is in range")
    }

    pub fn summary(&self) -> InstanceSummary {
        let shape = self.shape();
        InstanceSummary {
            prompts: shape.prompts,
            responses: shape.responses,
            pi1_prompts: self.pi1_prompts.clone(),
            pi2_prompts: self.pi2_prompts.clone(),
            reward_a: self.reward_a.table().to_rows(),
            reward_b: self.reward_b.table().to_rows(),
            preferred_under_a: self.preferred(Branch::A),
            preferred_under_b: self.preferred(Branch::B),
        }
    }

    pub fn classify(&self, policy: &Policy) -> ModelId {
        if policy.max_total_variation(self.pi1()) < TIE_TOLERANCE {
            ModelId::Pi1
        } else if policy.max_total_variation(self.pi2()) < TIE_TOLERANCE {
            ModelId::Pi2
        } else {
            ModelId::Other
        }
    }
}

/// Which comparison requests to label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Coverage {
    /// Every ordered pair `(x, y, y')`.
    #[default]
    Full,
    /// `n` requests drawn uniformly with replacement.
    Sampled { seed: u64, n: usize },
}

pub fn requests(shape: Shape, coverage: Coverage) -> Result<Vec<Comparison>> {
    match coverage {
        Coverage::Full => Ok(Comparison::all_pairs(shape)),
        Coverage::Sampled { n: 0, .. } => Err(Error::Argument("sampled coverage needs n > 0".into())),
        Coverage::Sampled { seed, n } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok((0..n)
                .map(|_| {
                    let prompt = rng.random_range(0..shape.prompts);
                    let first = rng.random_range(0..shape.responses);
                    let second = (first + rng.random_range(1..shape.responses)) % shape.responses;
                    Comparison { prompt, first, second }
                })
                .collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchOutcome {
    pub branch: Branch,
    pub optimal: ModelId,
    pub selected_utility: f64,
    pub optimal_utility: f64,
    /// `optimal_utility - selected_utility`, never negative.
    pub regret: f64,
    /// `U(pi1) - U(pi2)` under this branch.
    pub utility_gap: f64,
    pub suboptimal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpossibilityReport {
    pub instance: InstanceSummary,
    pub coverage: Coverage,
    pub records: usize,
    pub datasets_identical: bool,
    pub dataset_sha256: String,
    pub selected: ModelId,
    pub branches: Vec<BranchOutcome>,
    pub failing_branches: Vec<Branch>,
}

fn ordinal_bytes(d: &OrdinalDataset) -> Vec<u8> {
    serde_json::to_vec(d.records()).expect("records serialize")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn outcome(instance: &CounterexampleInstance, branch: Branch, selected: &Policy) -> Result<BranchOutcome> {
    let r = instance.reward(branch);
    let optimal = instance.preferred(branch);
    let best = match optimal {
        ModelId::Pi1 => instance.pi1(),
        _ => instance.pi2(),
    };
    let selected_utility = policy_utility(selected, r, None)?;
    let optimal_utility = policy_utility(best, r, None)?;
    let regret = (optimal_utility - selected_utility).max(0.0);
    Ok(BranchOutcome {
        branch,
        optimal,
        selected_utility,
        optimal_utility,
        regret,
        utility_gap: instance.utility_gap(branch)?,
        suboptimal: regret > TIE_TOLERANCE,
    })
}

/// Label the instance under both rewards with a deterministic ordinal
/// annotator, confirm the datasets are byte-identical, run `algorithm` once
/// on the shared dataset and score its choice under each reward.
pub fn demonstrate_impossibility<F>(algorithm: F, instance: &CounterexampleInstance, coverage: Coverage) -> Result<ImpossibilityReport>
where
    F: FnOnce(&OrdinalDataset) -> Result<Policy>,
{
    let reqs = requests(instance.shape(), coverage)?;
    let annotator = [AnnotatorModel::new("deterministic", AnnotatorKind::DeterministicOrdinal)];
    let da = generate_ordinal(&annotator, &reqs, instance.reward(Branch::A), Assignment::RoundRobin)?;
    let db = generate_ordinal(&annotator, &reqs, instance.reward(Branch::B), Assignment::RoundRobin)?;
    let (ba, bb) = (ordinal_bytes(&da), ordinal_bytes(&db));
    if ba != bb {
        return Err(Error::InstanceInvariant("ordinal datasets differ between the two rewards".into()));
    }
    let selected = algorithm(&da)?;
    instance.shape().expect(selected.shape())?;
    let branches = vec![outcome(instance, Branch::A, &selected)?, outcome(instance, Branch::B, &selected)?];
    let failing_branches = branches.iter().filter(|b| b.suboptimal).map(|b| b.branch).collect();
    Ok(ImpossibilityReport {
        instance: instance.summary(),
        coverage,
        records: da.len(),
        datasets_identical: true,
        dataset_sha256: sha256_hex(&ba),
        selected: instance.classify(&selected),
        branches,
        failing_branches,
    })
}

/// Fit `theta` on the mixture family (reference at `theta = 0.5`) and return
/// `pi1` when `theta > 0.5`, else `pi2`.
pub fn mixture_selector<'a>(
    instance: &'a CounterexampleInstance,
    loss: LossSpec,
    config: OptimizerConfig,
) -> impl Fn(DatasetRef<'_>) -> Result<Policy> + 'a {
    move |data| {
        let reference = instance.reference();
        let r = optimize_theta(instance.family(), loss, data, &reference, &config)?;
        Ok(if r.theta > 0.5 { instance.pi1().clone() } else { instance.pi2().clone() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CardinalBranch {
    pub branch: Branch,
    pub dataset_sha256: String,
    pub theta: f64,
    pub selected: ModelId,
    pub outcome: BranchOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CardinalReport {
    pub instance: InstanceSummary,
    pub datasets_differ: bool,
    pub branches: Vec<CardinalBranch>,
    pub correct_on_both: bool,
}

/// Exact-WTP labels under each reward, CDPO on each dataset separately.
pub fn demonstrate_cardinal(instance: &CounterexampleInstance, coverage: Coverage, loss: LossSpec, config: &OptimizerConfig) -> Result<CardinalReport> {
    let reqs = requests(instance.shape(), coverage)?;
    let annotator = [AnnotatorModel::new("exact", AnnotatorKind::ExactWtp)];
    let reference = instance.reference();
    let mut branches = Vec::new();
    let mut hashes = Vec::new();
    for branch in [Branch::A, Branch::B] {
        let d: CardinalDataset = generate_cardinal(&annotator, &reqs, instance.reward(branch), Assignment::RoundRobin)?;
        let bytes = serde_json::to_vec(d.records()).expect("records serialize");
        let r = optimize_theta(instance.family(), loss, DatasetRef::Cardinal(&d), &reference, config)?;
        let chosen = if r.theta > 0.5 { instance.pi1() } else { instance.pi2() };
        let out = outcome(instance, branch, chosen)?;
        hashes.push(sha256_hex(&bytes));
        branches.push(CardinalBranch {
            branch,
            dataset_sha256: sha256_hex(&bytes),
            theta: r.theta,
            selected: instance.classify(chosen),
            outcome: out,
        });
    }
    Ok(CardinalReport {
        instance: instance.summary(),
        datasets_differ: hashes[0] != hashes[1],
        correct_on_both: branches.iter().all(|b| !b.outcome.suboptimal),
        branches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotator::Annotator;
    use crate::model::ModelPreference;

    #[test]
    fn two_prompt_gaps() {
        let inst = build_counterexample(100.0, 0.2, 0.2, 100.0).unwrap();
        assert!((inst.utility_gap(Branch::A).unwrap() - 99.8).abs() < 1e-9);
        assert!((inst.utility_gap(Branch::B).unwrap() + 99.8).abs() < 1e-9);
    }

    #[test]
    fn replicated_gap() {
        let inst = build_counterexample_replicated(100.0, 0.2, 0.2, 100.0, 2).unwrap();
        assert!((inst.utility_gap(Branch::A).unwrap() - 99.6).abs() < 1e-9);
        assert_eq!(inst.shape().prompts, 3);
    }

    #[test]
    fn minimal_instance_signs_by_enumeration() {
        let inst = build_counterexample(2.0, 1.0, 1.0, 2.0).unwrap();
        for c in Comparison::all_pairs(inst.shape()) {
            let a = inst.reward(Branch::A).margin(c.prompt, c.first, c.second);
            let b = inst.reward(Branch::B).margin(c.prompt, c.first, c.second);
            assert_eq!(a > 0.0, b > 0.0);
            assert_eq!(a < 0.0, b < 0.0);
        }
        let pref = |b| crate::model::model_prefers(inst.reward(b), inst.pi1(), inst.pi2()).unwrap();
        assert_eq!(pref(Branch::A), ModelPreference::APreferred);
        assert_eq!(pref(Branch::B), ModelPreference::BPreferred);
    }

    #[test]
    fn invalid_margins_rejected() {
        assert!(matches!(build_counterexample(1.0, 2.0, 1.0, 2.0), Err(Error::Construction(_))));
        assert!(matches!(build_counterexample(2.0, 1.0, 2.0, 1.0), Err(Error::Construction(_))));
        assert!(matches!(build_counterexample(0.0, 1.0, 1.0, 2.0), Err(Error::Construction(_))));
        assert!(build_counterexample(1.0, 1.0, 1.0, 2.0).is_err());
    }

    fn dpo_pick(inst: &CounterexampleInstance) -> impl Fn(&OrdinalDataset) -> Result<Policy> + '_ {
        let sel = mixture_selector(inst, LossSpec::dpo(0.1).unwrap(), OptimizerConfig::default());
        move |d| sel(DatasetRef::Ordinal(d))
    }

    #[test]
    fn dpo_fails_exactly_one_branch() {
        for inst in [
            build_counterexample(100.0, 0.2, 0.2, 100.0).unwrap(),
            build_counterexample_replicated(100.0, 0.2, 0.2, 100.0, 2).unwrap(),
        ] {
            let rep = demonstrate_impossibility(dpo_pick(&inst), &inst, Coverage::Full).unwrap();
            assert!(rep.datasets_identical);
            assert_eq!(rep.failing_branches.len(), 1, "{rep:?}");
        }
    }

    #[test]
    fn replicated_dpo_picks_pi2_and_loses_on_a() {
        let inst = build_counterexample_replicated(100.0, 0.2, 0.2, 100.0, 2).unwrap();
        let rep = demonstrate_impossibility(dpo_pick(&inst), &inst, Coverage::Full).unwrap();
        assert_eq!(rep.selected, ModelId::Pi2);
        assert_eq!(rep.failing_branches, vec![Branch::A]);
        assert!((rep.branches[0].regret - 99.6).abs() < 1e-9);
        assert_eq!(rep.dataset_sha256.len(), 64);
    }

    #[test]
    fn constant_algorithms_fail_one_branch() {
        let inst = build_counterexample(3.0, 1.0, 1.0, 5.0).unwrap();
        for fixed in [inst.pi1().clone(), inst.pi2().clone()] {
            let rep = demonstrate_impossibility(|_| Ok(fixed.clone()), &inst, Coverage::Sampled { seed: 5, n: 40 }).unwrap();
            assert_eq!(rep.failing_branches.len(), 1);
        }
        let mid = mixture_policy(inst.family(), 0.5).unwrap();
        let rep = demonstrate_impossibility(|_| Ok(mid.clone()), &inst, Coverage::Full).unwrap();
        assert_eq!(rep.selected, ModelId::Other);
        assert_eq!(rep.failing_branches.len(), 2);
    }

    #[test]
    fn coin_flip_algorithm_fails_one_branch_every_run() {
        let inst = build_counterexample(100.0, 0.2, 0.2, 100.0).unwrap();
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let heads = rng.random::<bool>();
            let pick = if heads { inst.pi1().clone() } else { inst.pi2().clone() };
            let rep = demonstrate_impossibility(|_| Ok(pick), &inst, Coverage::Full).unwrap();
            assert_eq!(rep.failing_branches.len(), 1);
        }
    }

    #[test]
    fn cardinal_selects_correctly_on_both() {
        for inst in [
            build_counterexample(100.0, 0.2, 0.2, 100.0).unwrap(),
            build_counterexample(2.0, 1.0, 1.0, 2.0).unwrap(),
            build_counterexample_replicated(100.0, 0.2, 0.2, 100.0, 2).unwrap(),
        ] {
            let rep = demonstrate_cardinal(&inst, Coverage::Full, LossSpec::cdpo(0.1).unwrap(), &OptimizerConfig::default()).unwrap();
            assert!(rep.datasets_differ);
            assert!(rep.correct_on_both, "{rep:?}");
        }
    }

    #[test]
    fn sampled_coverage_is_seeded() {
        let shape = Shape::new(3, 2).unwrap();
        let a = requests(shape, Coverage::Sampled { seed: 1, n: 50 }).unwrap();
        assert_eq!(a, requests(shape, Coverage::Sampled { seed: 1, n: 50 }).unwrap());
        assert_ne!(a, requests(shape, Coverage::Sampled { seed: 2, n: 50 }).unwrap());
        assert!(requests(shape, Coverage::Sampled { seed: 1, n: 0 }).is_err());
    }

    #[test]
    fn bt_labels_differ_across_branches() {
        // Same seed, different margins: stochastic labels are not shared.
        let inst = build_counterexample(100.0, 0.2, 0.2, 100.0).unwrap();
        let reqs = requests(inst.shape(), Coverage::Sampled { seed: 3, n: 2000 }).unwrap();
        let m = AnnotatorModel::new("bt", AnnotatorKind::BtStochastic).with_seed(9);
        let mut a = Annotator::new(m.clone()).unwrap();
        let mut b = Annotator::new(m).unwrap();
        let differ = reqs
            .iter()
            .filter(|c| a.label_ordinal(inst.reward(Branch::A), c).unwrap() != b.label_ordinal(inst.reward(Branch::B), c).unwrap())
            .count();
        assert!(differ > 0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn datasets_identical_and_one_failure(
                big in 1.0f64..1000.0, small_frac in 0.01f64..0.99, copies in 1usize..4, seed in 0u64..1000
            ) {
                let small = big * small_frac / copies as f64;
                let inst = build_counterexample_replicated(big, small, small, big, copies).unwrap();
                let rep = demonstrate_impossibility(|_| Ok(inst.pi1().clone()), &inst, Coverage::Sampled { seed, n: 30 }).unwrap();
                prop_assert!(rep.datasets_identical);
                prop_assert!(!rep.failing_branches.is_empty());
            }
        }
    }
}
