//! Index-level comparison records: the in-memory form of ordinal and
//! cardinal (willingness-to-pay) preference data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Shape;

/// Which of the two listed responses a label points at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    #[serde(rename = "a")]
    First,
    #[serde(rename = "b")]
    Second,
}

impl Side {
    pub fn opposite(self) -> Self {
        match self {
            Side::First => Side::Second,
            Side::Second => Side::First,
        }
    }

    /// +1 for `Second`, -1 for `First`.
    pub fn sign(self) -> f64 {
        match self {
            Side::First => -1.0,
            Side::Second => 1.0,
        }
    }

    pub fn as_wire(self) -> &'static str {
        match self {
            Side::First => "a",
            Side::Second => "b",
        }
    }

    pub fn from_wire(s: &str) -> Option<Self> {
        match s {
            "a" => Some(Side::First),
            "b" => Some(Side::Second),
            _ => None,
        }
    }
}

/// Numeraire a WTP value was elicited in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleTag {
    #[default]
    Money,
    ReferenceUnit,
}

impl ScaleTag {
    pub fn as_wire(self) -> &'static str {
        match self {
            ScaleTag::Money => "money",
            ScaleTag::ReferenceUnit => "reference-unit",
        }
    }

    pub fn from_wire(s: &str) -> Option<Self> {
        match s {
            "money" => Some(ScaleTag::Money),
            "reference-unit" => Some(ScaleTag::ReferenceUnit),
            _ => None,
        }
    }
}

/// A request to compare responses `first` and `second` on `prompt`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Comparison {
    pub prompt: usize,
    pub first: usize,
    pub second: usize,
}

impl Comparison {
    pub fn new(shape: Shape, prompt: usize, first: usize, second: usize) -> Result<Self> {
        let c = Self { prompt, first, second };
        c.validate(shape)?;
        Ok(c)
    }

    pub fn validate(&self, shape: Shape) -> Result<()> {
        shape.check_cell(self.prompt, self.first)?;
        shape.check_cell(self.prompt, self.second)?;
        if self.first == self.second {
            return Err(Error::Argument(format!(
                "comparison on prompt {} repeats response {}",
                self.prompt, self.first
            )));
        }
        Ok(())
    }

    /// Every ordered pair `(x, y, y')` with `y != y'`.
    pub fn all_pairs(shape: Shape) -> Vec<Self> {
        let mut out = Vec::with_capacity(shape.prompts * shape.responses * (shape.responses - 1));
        for prompt in 0..shape.prompts {
            for first in 0..shape.responses {
                for second in 0..shape.responses {
                    if first != second {
                        out.push(Self { prompt, first, second });
                    }
                }
            }
        }
        out
    }

    /// Unordered pairs, `first < second`.
    pub fn unordered_pairs(shape: Shape) -> Vec<Self> {
        Self::all_pairs(shape)
            .into_iter()
            .filter(|c| c.first < c.second)
            .collect()
    }

    pub fn response(&self, side: Side) -> usize {
        match side {
            Side::First => self.first,
            Side::Second => self.second,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrdinalRecord {
    pub comparison: Comparison,
    pub winner: Side,
    pub labeler: String,
}

impl OrdinalRecord {
    pub fn winner_response(&self) -> usize {
        self.comparison.response(self.winner)
    }

    pub fn loser_response(&self) -> usize {
        self.comparison.response(self.winner.opposite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CardinalRecord {
    pub comparison: Comparison,
    pub preferred: Side,
    pub wtp: f64,
    pub labeler: String,
    pub scale_tag: ScaleTag,
}

impl CardinalRecord {
    /// WTP signed so that it targets `r(second) - r(first)`.
    pub fn signed_wtp(&self) -> f64 {
        self.preferred.sign() * self.wtp
    }

    /// The ordinal label this judgment implies.
    pub fn to_ordinal(&self) -> OrdinalRecord {
        OrdinalRecord {
            comparison: self.comparison,
            winner: self.preferred,
            labeler: self.labeler.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrdinalDataset {
    shape: Shape,
    records: Vec<OrdinalRecord>,
}

impl OrdinalDataset {
    pub fn new(shape: Shape, records: Vec<OrdinalRecord>) -> Result<Self> {
        for r in &records {
            r.comparison.validate(shape)?;
        }
        Ok(Self { shape, records })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn records(&self) -> &[OrdinalRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn into_records(self) -> Vec<OrdinalRecord> {
        self.records
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CardinalDataset {
    shape: Shape,
    records: Vec<CardinalRecord>,
}

impl CardinalDataset {
    pub fn new(shape: Shape, records: Vec<CardinalRecord>) -> Result<Self> {
        for r in &records {
            r.comparison.validate(shape)?;
            if !(r.wtp.is_finite() && r.wtp >= 0.0) {
                return Err(Error::Argument(format!(
                    "wtp must be finite and non-negative, got {}",
                    r.wtp
                )));
            }
        }
        Ok(Self { shape, records })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn records(&self) -> &[CardinalRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn into_records(self) -> Vec<CardinalRecord> {
        self.records
    }

    /// Drop the strength information.
    pub fn to_ordinal(&self) -> OrdinalDataset {
        OrdinalDataset {
            shape: self.shape,
            records: self.records.iter().map(CardinalRecord::to_ordinal).collect(),
        }
    }

    /// Multiply every WTP value by `factor > 0`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor.is_finite() && factor > 0.0) {
            return Err(Error::Domain(format!("scale factor {factor} must be positive")));
        }
        let records = self
            .records
            .iter()
            .map(|r| CardinalRecord {
                wtp: r.wtp * factor,
                ..r.clone()
            })
            .collect();
        Ok(Self {
            shape: self.shape,
            records,
        })
    }
}

/// Either kind of preference dataset.
#[derive(Debug, Clone, Copy)]
pub enum DatasetRef<'a> {
    Ordinal(&'a OrdinalDataset),
    Cardinal(&'a CardinalDataset),
}

impl DatasetRef<'_> {
    pub fn shape(&self) -> Shape {
        match self {
            DatasetRef::Ordinal(d) => d.shape(),
            DatasetRef::Cardinal(d) => d.shape(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            DatasetRef::Ordinal(d) => d.len(),
            DatasetRef::Cardinal(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
