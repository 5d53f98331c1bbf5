//! Simulated labelers that turn a ground-truth reward into ordinal and
//! willingness-to-pay judgments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    CardinalDataset, CardinalRecord, Comparison, OrdinalDataset, OrdinalRecord, ScaleTag, Side,
};
use crate::error::{Error, Result};
use crate::model::RewardTable;
use crate::numeric::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnnotatorKind {
    /// Always picks the higher-reward response; ties go to the first.
    DeterministicOrdinal,
    /// Picks `second` with probability `sigmoid(r(second) - r(first))`.
    BtStochastic,
    /// Reports `scale * |margin|` exactly.
    ExactWtp,
    /// `max(0, scale * |margin| + N(0, noise_sd))`.
    NoisyWtp,
}

impl AnnotatorKind {
    pub fn is_ordinal(self) -> bool {
        matches!(self, AnnotatorKind::DeterministicOrdinal | AnnotatorKind::BtStochastic)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorModel {
    pub id: String,
    pub kind: AnnotatorKind,
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default)]
    pub noise_sd: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_scale() -> f64 {
    1.0
}

impl AnnotatorModel {
    pub fn new(id: impl Into<String>, kind: AnnotatorKind) -> Self {
        Self {
            id: id.into(),
            kind,
            scale: 1.0,
            noise_sd: 0.0,
            seed: 0,
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_noise(mut self, noise_sd: f64) -> Self {
        self.noise_sd = noise_sd;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Argument(format!(
                "annotator `{}`: scale must be positive, got {}",
                self.id, self.scale
            )));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return Err(Error::Argument(format!(
                "annotator `{}`: noise_sd must be non-negative, got {}",
                self.id, self.noise_sd
            )));
        }
        Ok(())
    }
}

/// An annotator together with its own seeded random stream.
#[derive(Debug, Clone)]
pub struct Annotator {
    model: AnnotatorModel,
    rng: ChaCha8Rng,
}

impl Annotator {
    pub fn new(model: AnnotatorModel) -> Result<Self> {
        model.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(model.seed);
        Ok(Self { model, rng })
    }

    pub fn model(&self) -> &AnnotatorModel {
        &self.model
    }

    pub fn label_ordinal(&mut self, reward: &RewardTable, req: &Comparison) -> Result<Side> {
        req.validate(reward.shape())?;
        let margin = reward.margin(req.prompt, req.first, req.second);
        match self.model.kind {
            AnnotatorKind::DeterministicOrdinal => Ok(higher_side(margin)),
            AnnotatorKind::BtStochastic => {
                let u: f64 = self.rng.random();
                Ok(if u < sigmoid(margin) { Side::Second } else { Side::First })
            }
            k => Err(Error::Kind(format!(
                "annotator `{}` is {k:?}, not an ordinal kind",
                self.model.id
            ))),
        }
    }

    /// Returns the preferred side and the (non-negative) WTP to move to it.
    pub fn label_wtp(&mut self, reward: &RewardTable, req: &Comparison) -> Result<(Side, f64)> {
        req.validate(reward.shape())?;
        let margin = reward.margin(req.prompt, req.first, req.second);
        let exact = self.model.scale * margin.abs();
        match self.model.kind {
            AnnotatorKind::ExactWtp => Ok((higher_side(margin), exact)),
            AnnotatorKind::NoisyWtp => {
                let noise = if self.model.noise_sd > 0.0 {
                    Normal::new(0.0, self.model.noise_sd)
                        .map_err(|e| Error::Argument(e.to_string()))?
                        .sample(&mut self.rng)
                } else {
                    0.0
                };
                Ok((higher_side(margin), (exact + noise).max(0.0)))
            }
            k => Err(Error::Kind(format!(
                "annotator `{}` is {k:?}, not a WTP kind",
                self.model.id
            ))),
        }
    }
}

fn higher_side(margin: f64) -> Side {
    if margin > 0.0 {
        Side::Second
    } else {
        Side::First
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Assignment {
    #[default]
    RoundRobin,
    Random { seed: u64 },
}

fn assign(n_annotators: usize, n_requests: usize, assignment: Assignment) -> Vec<usize> {
    match assignment {
        Assignment::RoundRobin => (0..n_requests).map(|i| i % n_annotators).collect(),
        Assignment::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n_requests).map(|_| rng.random_range(0..n_annotators)).collect()
        }
    }
}

fn prepare(annotators: &[AnnotatorModel], requests: &[Comparison]) -> Result<Vec<Annotator>> {
    if annotators.is_empty() {
        return Err(Error::Argument("no annotators".into()));
    }
    if requests.is_empty() {
        return Err(Error::Argument("no comparison requests".into()));
    }
    annotators.iter().cloned().map(Annotator::new).collect()
}

/// One ordinal record per request, labeled by the assigned annotator.
pub fn generate_ordinal(
    annotators: &[AnnotatorModel],
    requests: &[Comparison],
    reward_gt: &RewardTable,
    assignment: Assignment,
) -> Result<OrdinalDataset> {
    let mut pool = prepare(annotators, requests)?;
    let who = assign(pool.len(), requests.len(), assignment);
    let records = requests
        .iter()
        .zip(who)
        .map(|(req, a)| {
            let annotator = &mut pool[a];
            Ok(OrdinalRecord {
                comparison: *req,
                winner: annotator.label_ordinal(reward_gt, req)?,
                labeler: annotator.model.id.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    OrdinalDataset::new(reward_gt.shape(), records)
}

/// One WTP record per request, labeled by the assigned annotator.
pub fn generate_cardinal(
    annotators: &[AnnotatorModel],
    requests: &[Comparison],
    reward_gt: &RewardTable,
    assignment: Assignment,
) -> Result<CardinalDataset> {
    let mut pool = prepare(annotators, requests)?;
    let who = assign(pool.len(), requests.len(), assignment);
    let records = requests
        .iter()
        .zip(who)
        .map(|(req, a)| {
            let annotator = &mut pool[a];
            let (preferred, wtp) = annotator.label_wtp(reward_gt, req)?;
            Ok(CardinalRecord {
                comparison: *req,
                preferred,
                wtp,
                labeler: annotator.model.id.clone(),
                scale_tag: ScaleTag::Money,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    CardinalDataset::new(reward_gt.shape(), records)
}
