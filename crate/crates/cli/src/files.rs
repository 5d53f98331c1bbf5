//! On-disk forms of reward tables, policies and input datasets.

use std::path::Path;

use cardinal_core::data_io::{read_records, FieldMap, IndexMaps, LoadOptions, Loaded, ResponseIndexing, WireCardinal, WireOrdinal};
use cardinal_core::reward_fit::FitMeta;
use cardinal_core::{Policy, RewardTable};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};
use crate::output::Artifacts;

/// A reward table with the strings its rows and columns stand for.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardFile {
    pub source: String,
    pub maps: IndexMaps,
    pub reward: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<FitMeta>,
}

impl RewardFile {
    pub fn new(source: &str, maps: IndexMaps, reward: &RewardTable, meta: Option<FitMeta>) -> Self {
        Self { source: source.to_string(), maps, reward: reward.table().to_rows(), meta }
    }

    pub fn table(&self) -> CliResult<RewardTable> {
        Ok(RewardTable::from_rows(&self.reward)?)
    }

    pub fn read(arts: &mut Artifacts, path: &Path) -> CliResult<Self> {
        let bytes = arts.input(path)?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyFile {
    pub maps: IndexMaps,
    pub policy: Vec<Vec<f64>>,
}

impl PolicyFile {
    pub fn new(maps: IndexMaps, policy: &Policy) -> Self {
        Self { maps, policy: policy.table().to_rows() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KindArg {
    /// Decide from the first record.
    #[default]
    Auto,
    Cardinal,
    Ordinal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum IndexingArg {
    #[default]
    Global,
    PerPrompt,
}

impl From<IndexingArg> for ResponseIndexing {
    fn from(a: IndexingArg) -> Self {
        match a {
            IndexingArg::Global => ResponseIndexing::Global,
            IndexingArg::PerPrompt => ResponseIndexing::PerPrompt,
        }
    }
}

pub enum Input {
    Cardinal(Loaded<WireCardinal>),
    Ordinal(Loaded<WireOrdinal>),
}

impl Input {
    pub fn maps(&self) -> &IndexMaps {
        match self {
            Input::Cardinal(l) => &l.maps,
            Input::Ordinal(l) => &l.maps,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Input::Cardinal(l) => l.len(),
            Input::Ordinal(l) => l.len(),
        }
    }
}

fn detect(bytes: &[u8], fields: &FieldMap) -> CliResult<KindArg> {
    let text = std::str::from_utf8(bytes).map_err(|e| CliError::data(e.to_string()))?;
    let Some(first) = text.lines().find(|l| !l.trim().is_empty()) else {
        return Err(CliError::data("input file has no records"));
    };
    let v: Value = serde_json::from_str(first).map_err(|e| CliError::data(format!("line 1: {e}")))?;
    if v.get(&fields.wtp).is_some() {
        Ok(KindArg::Cardinal)
    } else if v.get(&fields.winner).is_some() {
        Ok(KindArg::Ordinal)
    } else {
        Err(CliError::data(format!("line 1 has neither `{}` nor `{}`", fields.wtp, fields.winner)))
    }
}

/// Parse a JSONL dataset, registering it as an input of `arts`.
pub fn load_input(arts: &mut Artifacts, path: &Path, kind: KindArg, opts: &LoadOptions) -> CliResult<Input> {
    let bytes = arts.input(path)?;
    let kind = match kind {
        KindArg::Auto => detect(&bytes, &opts.fields)?,
        k => k,
    };
    let with_path = |e: cardinal_core::Error| CliError::data(format!("{}: {e}", path.display()));
    Ok(match kind {
        KindArg::Ordinal => Input::Ordinal(read_records(bytes.as_slice(), opts).map_err(with_path)?),
        _ => Input::Cardinal(read_records(bytes.as_slice(), opts).map_err(with_path)?),
    })
}
