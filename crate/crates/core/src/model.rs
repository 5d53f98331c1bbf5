//! Finite prompt/response spaces, policies, reward tables and feasible sets.
//!
//! A policy is a row-stochastic table: one row per prompt, one column per
//! response. A reward table has the same layout and is measured in money
//! units. Model-level utility is the expected reward summed over prompts,
//! `sum_x sum_y pi(y|x) r(x, y)`, which is the representation every
//! selection routine in this crate optimizes.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on row sums of a policy.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// Absolute utility difference under which two models are indifferent.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// Default cap on `|X| * |Y|`.
pub const DEFAULT_MAX_CELLS: usize = 10_000;

fn check_labels(labels: &[String], min: usize, what: &str) -> Result<HashMap<String, usize>> {
    if labels.len() < min {
        return Err(Error::Space(format!(
            "{what} space needs at least {min} labels, got {}",
            labels.len()
        )));
    }
    let mut index = HashMap::with_capacity(labels.len());
    for (i, l) in labels.iter().enumerate() {
        if index.insert(l.clone(), i).is_some() {
            return Err(Error::Space(format!("duplicate {what} label `{l}`")));
        }
    }
    Ok(index)
}

macro_rules! label_space {
    ($name:ident, $min:expr, $what:expr, $prefix:expr) => {
        #[derive(Debug, Clone, PartialEq, Eq)]
        pub struct $name {
            labels: Vec<String>,
            index: HashMap<String, usize>,
        }

        impl $name {
            pub fn new(labels: Vec<String>) -> Result<Self> {
                let index = check_labels(&labels, $min, $what)?;
                Ok(Self { labels, index })
            }

            /// Labels `"<prefix>0"`, `"<prefix>1"`, ...
            pub fn indexed(n: usize) -> Result<Self> {
                Self::new((0..n).map(|i| format!("{}{i}", $prefix)).collect())
            }

            pub fn len(&self) -> usize {
                self.labels.len()
            }

            pub fn is_empty(&self) -> bool {
                self.labels.is_empty()
            }

            pub fn label(&self, i: usize) -> &str {
                &self.labels[i]
            }

            pub fn labels(&self) -> &[String] {
                &self.labels
            }

            pub fn index_of(&self, label: &str) -> Option<usize> {
                self.index.get(label).copied()
            }
        }
    };
}

label_space!(PromptSpace, 1, "prompt", "x");
label_space!(ResponseSpace, 2, "response", "y");

/// Dimensions of every table in one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub prompts: usize,
    pub responses: usize,
}

impl Shape {
    pub fn new(prompts: usize, responses: usize) -> Result<Self> {
        Self::with_cell_limit(prompts, responses, DEFAULT_MAX_CELLS)
    }

    pub fn with_cell_limit(prompts: usize, responses: usize, max_cells: usize) -> Result<Self> {
        if prompts < 1 || responses < 2 {
            return Err(Error::Space(format!(
                "need |X| >= 1 and |Y| >= 2, got {prompts} x {responses}"
            )));
        }
        match prompts.checked_mul(responses) {
            Some(cells) if cells <= max_cells => Ok(Self { prompts, responses }),
            _ => Err(Error::Space(format!(
                "{prompts} x {responses} exceeds the cell cap of {max_cells}"
            ))),
        }
    }

    pub fn cells(&self) -> usize {
        self.prompts * self.responses
    }

    pub(crate) fn check_cell(&self, x: usize, y: usize) -> Result<()> {
        if x >= self.prompts || y >= self.responses {
            return Err(Error::Shape(format!(
                "cell ({x}, {y}) outside {} x {}",
                self.prompts, self.responses
            )));
        }
        Ok(())
    }

    pub(crate) fn expect(&self, other: Shape) -> Result<()> {
        if *self != other {
            return Err(Error::Shape(format!(
                "{} x {} vs {} x {}",
                self.prompts, self.responses, other.prompts, other.responses
            )));
        }
        Ok(())
    }
}

/// Dense row-major `|X| x |Y|` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    shape: Shape,
    data: Vec<f64>,
}

impl Table {
    pub fn filled(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.cells()],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let prompts = rows.len();
        let responses = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != responses) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let shape = Shape::new(prompts, responses)?;
        Ok(Self {
            shape,
            data: rows.concat(),
        })
    }

    pub fn from_flat(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.cells() {
            return Err(Error::Shape(format!(
                "{} values for {} cells",
                data.len(),
                shape.cells()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[x * self.shape.responses + y]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        let r = self.shape.responses;
        self.data[x * r + y] = v;
    }

    pub fn row(&self, x: usize) -> &[f64] {
        let r = self.shape.responses;
        &self.data[x * r..(x + 1) * r]
    }

    pub fn row_mut(&mut self, x: usize) -> &mut [f64] {
        let r = self.shape.responses;
        &mut self.data[x * r..(x + 1) * r]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.shape.responses)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(<[f64]>::to_vec).collect()
    }
}

/// A model: each prompt mapped to a distribution over responses.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy(Table);

impl Policy {
    pub fn new(table: Table) -> Result<Self> {
        for (x, row) in table.rows().enumerate() {
            if let Some(y) = row.iter().position(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(Error::Policy(format!(
                    "entry ({x}, {y}) = {} is not a probability",
                    row[y]
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::Policy(format!("row {x} sums to {sum}")));
            }
        }
        Ok(Self(table))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Table::from_rows(rows)?)
    }

    pub fn uniform(shape: Shape) -> Self {
        Self(Table::filled(shape, 1.0 / shape.responses as f64))
    }

    /// Point mass on `choices[x]` for every prompt `x`.
    pub fn deterministic(shape: Shape, choices: &[usize]) -> Result<Self> {
        if choices.len() != shape.prompts {
            return Err(Error::Shape(format!(
                "{} choices for {} prompts",
                choices.len(),
                shape.prompts
            )));
        }
        let mut t = Table::filled(shape, 0.0);
        for (x, &y) in choices.iter().enumerate() {
            shape.check_cell(x, y)?;
            t.set(x, y, 1.0);
        }
        Ok(Self(t))
    }

    /// Row-wise softmax of a logit table.
    pub fn softmax(logits: &Table) -> Self {
        let mut t = logits.clone();
        for row in t.as_mut_slice().chunks_mut(logits.shape().responses) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        Self(t)
    }

    pub fn shape(&self) -> Shape {
        self.0.shape()
    }

    pub fn prob(&self, x: usize, y: usize) -> f64 {
        self.0.get(x, y)
    }

    pub fn row(&self, x: usize) -> &[f64] {
        self.0.row(x)
    }

    pub fn table(&self) -> &Table {
        &self.0
    }

    /// Total variation distance on prompt `x`.
    pub fn total_variation(&self, other: &Policy, x: usize) -> f64 {
        0.5 * self
            .row(x)
            .iter()
            .zip(other.row(x))
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }

    /// Largest per-prompt total variation distance.
    pub fn max_total_variation(&self, other: &Policy) -> f64 {
        (0..self.shape().prompts)
            .map(|x| self.total_variation(other, x))
            .fold(0.0, f64::max)
    }
}

/// Reward `r(x, y)` in money units. Entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardTable(Table);

impl RewardTable {
    pub fn new(table: Table) -> Result<Self> {
        if let Some(i) = table.as_slice().iter().position(|v| !v.is_finite()) {
            let r = table.shape().responses;
            return Err(Error::Reward(format!(
                "entry ({}, {}) is not finite",
                i / r,
                i % r
            )));
        }
        Ok(Self(table))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Table::from_rows(rows)?)
    }

    pub fn zeros(shape: Shape) -> Self {
        Self(Table::filled(shape, 0.0))
    }

    pub fn shape(&self) -> Shape {
        self.0.shape()
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.0.get(x, y)
    }

    pub fn row(&self, x: usize) -> &[f64] {
        self.0.row(x)
    }

    pub fn table(&self) -> &Table {
        &self.0
    }

    /// `r(x, second) - r(x, first)`.
    pub fn margin(&self, x: usize, first: usize, second: usize) -> f64 {
        self.get(x, second) - self.get(x, first)
    }

    /// `scale * r(x, y) + offsets[x]`.
    pub fn affine(&self, scale: f64, offsets: &[f64]) -> Result<Self> {
        let shape = self.shape();
        if offsets.len() != shape.prompts {
            return Err(Error::Shape(format!(
                "{} offsets for {} prompts",
                offsets.len(),
                shape.prompts
            )));
        }
        let mut t = self.0.clone();
        for (x, row) in t.as_mut_slice().chunks_mut(shape.responses).enumerate() {
            for v in row {
                *v = scale * *v + offsets[x];
            }
        }
        Self::new(t)
    }

    /// Subtract each row's mean so every prompt row sums to zero.
    pub fn centered(&self) -> Self {
        let mut t = self.0.clone();
        for row in t.as_mut_slice().chunks_mut(self.shape().responses) {
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            for v in row {
                *v -= mean;
            }
        }
        Self(t)
    }
}

/// The one-parameter family `theta * pi1 + (1 - theta) * pi2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureFamily {
    pi1: Policy,
    pi2: Policy,
    differing_prompts: BTreeSet<usize>,
}

impl MixtureFamily {
    pub fn new(pi1: Policy, pi2: Policy) -> Result<Self> {
        pi1.shape().expect(pi2.shape())?;
        let differing_prompts = (0..pi1.shape().prompts)
            .filter(|&x| pi1.row(x) != pi2.row(x))
            .collect();
        Ok(Self {
            pi1,
            pi2,
            differing_prompts,
        })
    }

    pub fn pi1(&self) -> &Policy {
        &self.pi1
    }

    pub fn pi2(&self) -> &Policy {
        &self.pi2
    }

    pub fn differing_prompts(&self) -> &BTreeSet<usize> {
        &self.differing_prompts
    }

    pub fn is_degenerate(&self) -> bool {
        self.differing_prompts.is_empty()
    }

    pub fn shape(&self) -> Shape {
        self.pi1.shape()
    }

    /// The same family with the roles of `pi1` and `pi2` exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            pi1: self.pi2.clone(),
            pi2: self.pi1.clone(),
            differing_prompts: self.differing_prompts.clone(),
        }
    }

    /// `theta * pi1(y|x) + (1 - theta) * pi2(y|x)` for a single cell.
    pub fn prob(&self, theta: f64, x: usize, y: usize) -> f64 {
        theta * self.pi1.prob(x, y) + (1.0 - theta) * self.pi2.prob(x, y)
    }
}

pub fn mixture_policy(family: &MixtureFamily, theta: f64) -> Result<Policy> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::Domain(format!("theta = {theta} outside [0, 1]")));
    }
    let a = family.pi1.table().as_slice();
    let b = family.pi2.table().as_slice();
    let data = a
        .iter()
        .zip(b)
        .map(|(p, q)| theta * p + (1.0 - theta) * q)
        .collect();
    Policy::new(Table::from_flat(family.shape(), data)?)
}

/// The set of models a fine-tuning run may select from.
#[derive(Debug, Clone)]
pub enum FeasibleSet {
    Explicit(Vec<Policy>),
    Mixture(MixtureFamily),
    KlBall { reference: Policy, beta: f64 },
}

impl FeasibleSet {
    pub fn validate(&self) -> Result<()> {
        match self {
            FeasibleSet::Explicit(ps) => {
                let first = ps.first().ok_or(Error::Empty("explicit feasible set"))?;
                ps.iter().try_for_each(|p| first.shape().expect(p.shape()))
            }
            FeasibleSet::Mixture(_) => Ok(()),
            FeasibleSet::KlBall { beta, .. } if *beta > 0.0 && beta.is_finite() => Ok(()),
            FeasibleSet::KlBall { beta, .. } => {
                Err(Error::Domain(format!("kl-ball beta must be positive, got {beta}")))
            }
        }
    }
}

/// `sum_x weight(x) sum_y pi(y|x) r(x, y)`; weights default to 1.
pub fn policy_utility(policy: &Policy, reward: &RewardTable, weights: Option<&[f64]>) -> Result<f64> {
    let shape = policy.shape();
    shape.expect(reward.shape())?;
    if let Some(w) = weights {
        if w.len() != shape.prompts {
            return Err(Error::Shape(format!(
                "{} prompt weights for {} prompts",
                w.len(),
                shape.prompts
            )));
        }
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Domain("prompt weights must be non-negative".into()));
        }
    }
    Ok((0..shape.prompts)
        .map(|x| {
            let expected: f64 = policy.row(x).iter().zip(reward.row(x)).map(|(p, r)| p * r).sum();
            weights.map_or(1.0, |w| w[x]) * expected
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelPreference {
    APreferred,
    BPreferred,
    Indifferent,
}

pub fn model_prefers(reward_gt: &RewardTable, pi_a: &Policy, pi_b: &Policy) -> Result<ModelPreference> {
    let gap = policy_utility(pi_a, reward_gt, None)? - policy_utility(pi_b, reward_gt, None)?;
    Ok(if gap > TIE_TOLERANCE {
        ModelPreference::APreferred
    } else if gap < -TIE_TOLERANCE {
        ModelPreference::BPreferred
    } else {
        ModelPreference::Indifferent
    })
}

/// `sum_x sum_y pi(y|x) log(pi(y|x) / ref(y|x))` with `0 log 0 = 0`.
pub fn kl_to_reference(policy: &Policy, reference: &Policy) -> Result<f64> {
    let shape = policy.shape();
    shape.expect(reference.shape())?;
    let mut kl = 0.0;
    for x in 0..shape.prompts {
        for y in 0..shape.responses {
            let p = policy.prob(x, y);
            if p == 0.0 {
                continue;
            }
            let q = reference.prob(x, y);
            if q == 0.0 {
                return Err(Error::Support { prompt: x, response: y });
            }
            kl += p * (p / q).ln();
        }
    }
    Ok(kl)
}
