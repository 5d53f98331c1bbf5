//! Seeded simulation drivers behind the evaluation reports.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};

use crate::annotator::{generate_cardinal, generate_ordinal, AnnotatorKind, AnnotatorModel, Assignment};
use crate::data_io::ExperimentConfig;
use crate::dataset::{CardinalDataset, CardinalRecord, Comparison, DatasetRef, OrdinalDataset, OrdinalRecord, ScaleTag, Side};
use crate::error::{Error, Result};
use crate::eval::{
    mean_utility_normalized, margin_stratified_agreement, per_sample_loss_trace, select_optimal_rate, tercile_edges,
    LossTrace, SelectOptimalReport, StratifiedReport, TrialResult, ValidationTuple,
};
use crate::impossibility::{requests, ModelId};
use crate::model::{mixture_policy, policy_utility, MixtureFamily, Policy, RewardTable, Shape, TIE_TOLERANCE};
use crate::policy_opt::{optimize_tabular, optimize_tabular_tracked, optimize_theta, LossKind, LossSpec, OptimizerConfig, TraceStep};
use crate::reward_fit::{fit_bt, fit_wtp, heldout_margin_mse, BtFitConfig, DEFAULT_BT_L2};

/// Two-component Laplace scale mixture: sharply peaked at zero with heavy
/// tails.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakedLaplace {
    pub narrow_scale: f64,
    pub wide_scale: f64,
    pub narrow_weight: f64,
}

impl Default for PeakedLaplace {
    fn default() -> Self {
        Self {
            narrow_scale: 0.3,
            wide_scale: 3.0,
            narrow_weight: 0.8,
        }
    }
}

impl Distribution<f64> for PeakedLaplace {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let b = if rng.random::<f64>() < self.narrow_weight { self.narrow_scale } else { self.wide_scale };
        let (e1, e2): (f64, f64) = (Exp1.sample(rng), Exp1.sample(rng));
        b * (e1 - e2)
    }
}

pub fn peaked_laplace_sample(seed: u64, n: usize, dist: PeakedLaplace) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| dist.sample(&mut rng)).collect()
}

/// Standard logistic location/scale draws by inverse CDF.
pub fn logistic_sample(seed: u64, n: usize, location: f64, scale: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(f64::EPSILON..1.0 - f64::EPSILON);
            location + scale * (u / (1.0 - u)).ln()
        })
        .collect()
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Select-optimal-model trials on random mixture instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub trials: usize,
    pub seed: u64,
    /// Prompts on which the two deterministic policies differ.
    pub prompts: usize,
    pub annotators: usize,
    /// Annotator noise sd as a fraction of the trial's median |margin|.
    pub noise_fraction: f64,
    /// `|margin| = exp(N(0, margin_log_sd))`.
    pub margin_log_sd: f64,
    pub beta: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            trials: 400,
            seed: 0,
            prompts: 3,
            annotators: 3,
            noise_fraction: 0.25,
            margin_log_sd: 1.0,
            beta: 0.1,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Argument("trials must be positive".into()));
        }
        if self.prompts == 0 || self.annotators == 0 {
            return Err(Error::Argument("prompts and annotators must be positive".into()));
        }
        if !(self.noise_fraction >= 0.0 && self.margin_log_sd >= 0.0) {
            return Err(Error::Argument("noise_fraction and margin_log_sd must be non-negative".into()));
        }
        LossSpec::cdpo(self.beta)?;
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionExperiment {
    pub config: SelectionConfig,
    pub trials: Vec<TrialResult>,
    pub report: SelectOptimalReport,
}

/// One trial: random margins, noisy WTP labels, then DPO on the ordinal
/// projection and CDPO on the WTP values, both along the mixture with the
/// uniform mixture as reference.
pub fn selection_trial(config: &SelectionConfig, trial_id: usize) -> Result<[TrialResult; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (trial_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let shape = Shape::new(config.prompts, 2)?;
    let lognormal = Normal::new(0.0, config.margin_log_sd).map_err(|e| Error::Argument(e.to_string()))?;
    let margins: Vec<f64> = (0..config.prompts)
        .map(|_| {
            let m = lognormal.sample(&mut rng).exp();
            if rng.random() {
                m
            } else {
                -m
            }
        })
        .collect();
    let rows: Vec<Vec<f64>> = margins.iter().map(|&m| vec![0.0, m]).collect();
    let truth = RewardTable::from_rows(&rows)?;
    let family = MixtureFamily::new(
        Policy::deterministic(shape, &vec![0; config.prompts])?,
        Policy::deterministic(shape, &vec![1; config.prompts])?,
    )?;
    let u1 = policy_utility(family.pi1(), &truth, None)?;
    let u2 = policy_utility(family.pi2(), &truth, None)?;

    let abs: Vec<f64> = margins.iter().map(|m| m.abs()).collect();
    let noise = config.noise_fraction * median(&abs);
    let annotators: Vec<AnnotatorModel> = (0..config.annotators)
        .map(|i| AnnotatorModel::new(format!("a{i}"), AnnotatorKind::NoisyWtp).with_noise(noise).with_seed(rng.random()))
        .collect();
    let requests: Vec<Comparison> = (0..config.prompts)
        .flat_map(|x| std::iter::repeat_n(Comparison { prompt: x, first: 0, second: 1 }, config.annotators))
        .collect();
    let card = generate_cardinal(&annotators, &requests, &truth, Assignment::RoundRobin)?;
    let ord = card.to_ordinal();
    let reference = mixture_policy(&family, 0.5)?;

    let run = |kind: LossKind, data: DatasetRef<'_>| -> Result<TrialResult> {
        let r = optimize_theta(&family, LossSpec::new(kind, config.beta)?, data, &reference, &config.optimizer)?;
        let (selected, u) = if r.theta > 0.5 { (ModelId::Pi1, u1) } else { (ModelId::Pi2, u2) };
        let gap = u - u1.max(u2);
        Ok(TrialResult {
            trial_id,
            method: kind,
            selected,
            selected_optimal: gap >= -TIE_TOLERANCE,
            theta: r.theta,
            utility_gap: gap,
        })
    };
    Ok([run(LossKind::Dpo, DatasetRef::Ordinal(&ord))?, run(LossKind::Cdpo, DatasetRef::Cardinal(&card))?])
}

pub fn selection_experiment(config: &SelectionConfig) -> Result<SelectionExperiment> {
    config.validate()?;
    let mut trials = Vec::with_capacity(2 * config.trials);
    for id in 0..config.trials {
        trials.extend(selection_trial(config, id)?);
    }
    let report = select_optimal_rate(&trials)?;
    Ok(SelectionExperiment {
        config: config.clone(),
        trials,
        report,
    })
}

/// Tabular DPO vs CDPO, evaluated by utility and stratified sign agreement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StratifiedConfig {
    pub seed: u64,
    pub prompts: usize,
    pub responses: usize,
    /// Ordered comparison pairs drawn per prompt for training.
    pub pairs_per_prompt: usize,
    pub annotators: usize,
    pub noise_fraction: f64,
    pub reward_sd: f64,
    pub validation_size: usize,
    pub beta: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for StratifiedConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            prompts: 40,
            responses: 5,
            pairs_per_prompt: 6,
            annotators: 2,
            noise_fraction: 0.25,
            reward_sd: 1.0,
            validation_size: 1000,
            beta: 0.1,
            optimizer: OptimizerConfig {
                max_iter: 300,
                ..OptimizerConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: LossKind,
    /// Ground-truth utility minus the reference's.
    pub normalized_utility: f64,
    pub agreement: StratifiedReport,
    pub trace: Vec<TraceStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedExperiment {
    pub config: StratifiedConfig,
    pub edges: Vec<f64>,
    pub methods: Vec<MethodOutcome>,
}

impl StratifiedExperiment {
    pub fn method(&self, kind: LossKind) -> Option<&MethodOutcome> {
        self.methods.iter().find(|m| m.method == kind)
    }
}

fn random_pair(rng: &mut impl Rng, responses: usize) -> (usize, usize) {
    let a = rng.random_range(0..responses);
    let b = (a + rng.random_range(1..responses)) % responses;
    (a, b)
}

/// I.i.d. `N(0, sd)` reward entries, drawn row by row.
pub fn gaussian_reward(rng: &mut impl Rng, shape: Shape, sd: f64) -> Result<RewardTable> {
    let normal = Normal::new(0.0, sd).map_err(|e| Error::Argument(e.to_string()))?;
    let rows: Vec<Vec<f64>> = (0..shape.prompts)
        .map(|_| (0..shape.responses).map(|_| normal.sample(rng)).collect())
        .collect();
    RewardTable::from_rows(&rows)
}

/// Uniformly drawn prompts and ordered response pairs, labeled with their
/// true margin.
pub fn validation_tuples(rng: &mut impl Rng, truth: &RewardTable, n: usize) -> Vec<ValidationTuple> {
    let shape = truth.shape();
    (0..n)
        .map(|_| {
            let x = rng.random_range(0..shape.prompts);
            let (a, b) = random_pair(rng, shape.responses);
            ValidationTuple { prompt: x, first: a, second: b, true_margin: truth.margin(x, a, b) }
        })
        .collect()
}

/// Ground truth plus the judgments collected on it.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub truth: RewardTable,
    /// Present when every annotator reports WTP.
    pub cardinal: Option<CardinalDataset>,
    /// The annotators' own labels, or the projection of `cardinal`.
    pub ordinal: OrdinalDataset,
}

/// Draw a Gaussian ground truth from `config.seed` and label the requested
/// comparisons with the configured annotators. Annotators must be all
/// ordinal or all WTP.
pub fn simulate(config: &ExperimentConfig) -> Result<Simulation> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let shape = Shape::new(config.prompts, config.responses)?;
    let truth = gaussian_reward(&mut rng, shape, config.reward_sd)?;
    let reqs = requests(shape, config.coverage)?;
    let ordinal_kinds = config.annotators.iter().filter(|a| a.kind.is_ordinal()).count();
    if ordinal_kinds == config.annotators.len() {
        let ordinal = generate_ordinal(&config.annotators, &reqs, &truth, config.assignment)?;
        Ok(Simulation { truth, cardinal: None, ordinal })
    } else if ordinal_kinds == 0 {
        let cardinal = generate_cardinal(&config.annotators, &reqs, &truth, config.assignment)?;
        let ordinal = cardinal.to_ordinal();
        Ok(Simulation { truth, cardinal: Some(cardinal), ordinal })
    } else {
        Err(Error::Config("annotators must be all ordinal or all WTP".into()))
    }
}

pub fn stratified_experiment(config: &StratifiedConfig) -> Result<StratifiedExperiment> {
    if config.validation_size == 0 || config.pairs_per_prompt == 0 || config.annotators == 0 {
        return Err(Error::Argument("validation_size, pairs_per_prompt and annotators must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let shape = Shape::new(config.prompts, config.responses)?;
    let truth = gaussian_reward(&mut rng, shape, config.reward_sd)?;

    let mut requests = Vec::new();
    for x in 0..shape.prompts {
        for _ in 0..config.pairs_per_prompt {
            let (a, b) = random_pair(&mut rng, shape.responses);
            for _ in 0..config.annotators {
                requests.push(Comparison { prompt: x, first: a, second: b });
            }
        }
    }
    let mut all_margins = Vec::new();
    for x in 0..shape.prompts {
        for c in Comparison::unordered_pairs(Shape::new(1, shape.responses)?) {
            all_margins.push(truth.margin(x, c.first, c.second).abs());
        }
    }
    let noise = config.noise_fraction * median(&all_margins);
    let annotators: Vec<AnnotatorModel> = (0..config.annotators)
        .map(|i| AnnotatorModel::new(format!("a{i}"), AnnotatorKind::NoisyWtp).with_noise(noise).with_seed(rng.random()))
        .collect();
    let card = generate_cardinal(&annotators, &requests, &truth, Assignment::RoundRobin)?;
    let ord = card.to_ordinal();

    let validation = validation_tuples(&mut rng, &truth, config.validation_size);
    let edges = tercile_edges(&validation)?;
    let reference = Policy::uniform(shape);

    let mut methods = Vec::new();
    for (kind, data) in [(LossKind::Dpo, DatasetRef::Ordinal(&ord)), (LossKind::Cdpo, DatasetRef::Cardinal(&card))] {
        let run = optimize_tabular_tracked(&reference, data, LossSpec::new(kind, config.beta)?, &config.optimizer, Some(&truth))?;
        methods.push(MethodOutcome {
            method: kind,
            normalized_utility: mean_utility_normalized(&run.policy, &reference, &truth)?,
            agreement: margin_stratified_agreement(&run.policy, &reference, config.beta, &validation, &edges)?,
            trace: run.trace,
        });
    }
    Ok(StratifiedExperiment {
        config: config.clone(),
        edges,
        methods,
    })
}

/// Held-out margin error of the WTP fit and the Bradley-Terry fit on the
/// same judgments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeldoutConfig {
    pub seed: u64,
    pub prompts: usize,
    pub responses: usize,
    /// Judgments per unordered pair.
    pub labels_per_pair: usize,
    pub holdout_fraction: f64,
    /// Ground-truth rewards.
    pub reward: PeakedLaplace,
    /// Judgment noise added to the true margin before the annotator reports
    /// a side and an amount.
    pub noise: PeakedLaplace,
    pub bt_l2: f64,
}

impl Default for HeldoutConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            prompts: 8,
            responses: 4,
            labels_per_pair: 8,
            holdout_fraction: 0.3,
            reward: PeakedLaplace::default(),
            noise: PeakedLaplace::default(),
            bt_l2: DEFAULT_BT_L2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeldoutComparison {
    pub seed: u64,
    pub train: usize,
    pub holdout: usize,
    pub wtp_mse: f64,
    pub bt_mse: f64,
}

/// Judgments with noise on the latent margin: `d = m + eps`, preferred side
/// `sign(d)`, WTP `|d|`. Ordinal labels are the sides of the same judgments.
pub fn latent_noise_judgments(truth: &RewardTable, requests: &[Comparison], noise: PeakedLaplace, rng: &mut impl Rng) -> Result<CardinalDataset> {
    let records = requests
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let d = truth.margin(c.prompt, c.first, c.second) + noise.sample(rng);
            CardinalRecord {
                comparison: *c,
                preferred: if d > 0.0 { Side::Second } else { Side::First },
                wtp: d.abs(),
                labeler: format!("l{}", i % 4),
                scale_tag: ScaleTag::Money,
            }
        })
        .collect();
    CardinalDataset::new(truth.shape(), records)
}

pub fn heldout_comparison(config: &HeldoutConfig) -> Result<HeldoutComparison> {
    if !(config.holdout_fraction > 0.0 && config.holdout_fraction < 1.0) {
        return Err(Error::Argument(format!("holdout fraction {} must lie in (0, 1)", config.holdout_fraction)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let shape = Shape::new(config.prompts, config.responses)?;
    let rows: Vec<Vec<f64>> = (0..shape.prompts)
        .map(|_| (0..shape.responses).map(|_| config.reward.sample(&mut rng)).collect())
        .collect();
    let truth = RewardTable::from_rows(&rows)?;
    let requests: Vec<Comparison> = Comparison::unordered_pairs(shape)
        .into_iter()
        .flat_map(|c| std::iter::repeat_n(c, config.labels_per_pair))
        .collect();
    let data = latent_noise_judgments(&truth, &requests, config.noise, &mut rng)?;
    let mut records = data.into_records();
    records.shuffle(&mut rng);
    let n_hold = ((records.len() as f64 * config.holdout_fraction).round() as usize).clamp(1, records.len() - 1);
    let holdout = CardinalDataset::new(shape, records.split_off(records.len() - n_hold))?;
    let train = CardinalDataset::new(shape, records)?;

    let wtp = fit_wtp(&train)?;
    let bt = match fit_bt(&train.to_ordinal(), config.bt_l2, BtFitConfig::default()) {
        Ok(f) => f,
        Err(Error::Convergence { last, .. }) => {
            let mut f = wtp.clone();
            f.table = *last;
            f
        }
        Err(e) => return Err(e),
    };
    Ok(HeldoutComparison {
        seed: config.seed,
        train: train.len(),
        holdout: holdout.len(),
        wtp_mse: heldout_margin_mse(&wtp, &holdout)?,
        bt_mse: heldout_margin_mse(&bt, &holdout)?,
    })
}

/// Two contradictory DPO labels on the same pair (`weight_majority`
/// copies favoring response 1, one favoring response 0) on a single prompt.
pub fn conflicting_pair_dataset(weight_majority: usize) -> Result<OrdinalDataset> {
    let shape = Shape::new(1, 2)?;
    let c = Comparison { prompt: 0, first: 0, second: 1 };
    let mut records: Vec<OrdinalRecord> = (0..weight_majority)
        .map(|_| OrdinalRecord { comparison: c, winner: Side::Second, labeler: "majority".into() })
        .collect();
    records.push(OrdinalRecord { comparison: c, winner: Side::First, labeler: "minority".into() });
    OrdinalDataset::new(shape, records)
}

/// DPO on [`conflicting_pair_dataset`] from a uniform reference, with the
/// per-sample loss trace.
pub fn conflicting_pair_trace(weight_majority: usize, beta: f64, config: &OptimizerConfig) -> Result<LossTrace> {
    let data = conflicting_pair_dataset(weight_majority)?;
    let reference = Policy::uniform(data.shape());
    let run = optimize_tabular(&reference, DatasetRef::Ordinal(&data), LossSpec::dpo(beta)?, config)?;
    per_sample_loss_trace(&run, None)
}
