//! Line-delimited JSON preference files.
//!
//! Each line is one comparison. Cardinal lines carry
//! `id, prompt, response_a, response_b, preferred, wtp, labeler_id, scale_tag`;
//! ordinal lines carry `id, prompt, response_a, response_b, winner,
//! labeler_id`. Fields are written in that order, followed by any fields the
//! loader did not recognize, which are kept verbatim.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::annotator::{AnnotatorModel, Assignment};
use crate::dataset::{CardinalDataset, CardinalRecord, Comparison, OrdinalDataset, OrdinalRecord, ScaleTag, Side};
use crate::error::{Error, Result};
use crate::impossibility::Coverage;
use crate::model::{PromptSpace, ResponseSpace, Shape};
use crate::policy_opt::OptimizerConfig;

/// External names of the wire fields. The defaults are the canonical names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldMap {
    pub id: String,
    pub prompt: String,
    pub response_a: String,
    pub response_b: String,
    pub preferred: String,
    pub winner: String,
    pub wtp: String,
    pub labeler_id: String,
    pub scale_tag: String,
}

impl Default for FieldMap {
    fn default() -> Self {
        Self {
            id: "id".into(),
            prompt: "prompt".into(),
            response_a: "response_a".into(),
            response_b: "response_b".into(),
            preferred: "preferred".into(),
            winner: "winner".into(),
            wtp: "wtp".into(),
            labeler_id: "labeler_id".into(),
            scale_tag: "scale_tag".into(),
        }
    }
}

impl FieldMap {
    /// Parse `canonical=external` pairs separated by commas.
    pub fn parse_overrides(spec: &str) -> Result<Self> {
        let mut map = Self::default();
        for pair in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("field mapping `{pair}` is not canonical=external")))?;
            let slot = match k.trim() {
                "id" => &mut map.id,
                "prompt" => &mut map.prompt,
                "response_a" => &mut map.response_a,
                "response_b" => &mut map.response_b,
                "preferred" => &mut map.preferred,
                "winner" => &mut map.winner,
                "wtp" => &mut map.wtp,
                "labeler_id" => &mut map.labeler_id,
                "scale_tag" => &mut map.scale_tag,
                other => return Err(Error::Config(format!("unknown canonical field `{other}`"))),
            };
            *slot = v.trim().to_string();
        }
        Ok(map)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireCardinal {
    pub id: String,
    pub prompt: String,
    pub response_a: String,
    pub response_b: String,
    pub preferred: Side,
    pub wtp: f64,
    pub labeler_id: String,
    pub scale_tag: ScaleTag,
    /// Unrecognized fields, kept for round trips.
    #[serde(skip)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireOrdinal {
    pub id: String,
    pub prompt: String,
    pub response_a: String,
    pub response_b: String,
    pub winner: Side,
    pub labeler_id: String,
    #[serde(skip)]
    pub extra: Map<String, Value>,
}

pub trait Labeled {
    fn labeler(&self) -> &str;
}

impl Labeled for WireCardinal {
    fn labeler(&self) -> &str {
        &self.labeler_id
    }
}

impl Labeled for WireOrdinal {
    fn labeler(&self) -> &str {
        &self.labeler_id
    }
}

impl Labeled for CardinalRecord {
    fn labeler(&self) -> &str {
        &self.labeler
    }
}

impl Labeled for OrdinalRecord {
    fn labeler(&self) -> &str {
        &self.labeler
    }
}

/// Field access for one parsed line.
struct LineFields {
    line: usize,
    map: Map<String, Value>,
}

impl LineFields {
    fn err(&self, field: &str, reason: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, field: &str) -> Result<Value> {
        self.map.shift_remove(field).ok_or_else(|| self.err(field, "missing"))
    }

    fn string(&mut self, field: &str) -> Result<String> {
        match self.take(field)? {
            Value::String(s) => Ok(s),
            other => Err(self.err(field, format!("expected a string, got {other}"))),
        }
    }

    fn side(&mut self, field: &str) -> Result<Side> {
        let s = self.string(field)?;
        Side::from_wire(&s).ok_or_else(|| self.err(field, format!("expected \"a\" or \"b\", got {s:?}")))
    }

    fn wtp(&mut self, field: &str) -> Result<f64> {
        let v = self.take(field)?;
        match v.as_f64() {
            Some(w) if w.is_finite() && w >= 0.0 => Ok(w),
            Some(w) => Err(self.err(field, format!("must be a finite non-negative number, got {w}"))),
            None => Err(self.err(field, format!("expected a number, got {v}"))),
        }
    }

    fn scale_tag(&mut self, field: &str) -> Result<ScaleTag> {
        match self.map.shift_remove(field) {
            None => Ok(ScaleTag::default()),
            Some(Value::String(s)) => {
                ScaleTag::from_wire(&s).ok_or_else(|| self.err(field, format!("expected \"money\" or \"reference-unit\", got {s:?}")))
            }
            Some(other) => Err(self.err(field, format!("expected a string, got {other}"))),
        }
    }
}

fn parse_object(line: usize, text: &str) -> Result<LineFields> {
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(map)) => Ok(LineFields { line, map }),
        Ok(_) => Err(Error::Parse {
            line,
            field: String::new(),
            reason: "expected a JSON object".into(),
        }),
        Err(e) => Err(Error::Parse {
            line,
            field: String::new(),
            reason: format!("invalid JSON: {e}"),
        }),
    }
}

fn check_pair(f: &LineFields, fields: &FieldMap, a: &str, b: &str) -> Result<()> {
    if a == b {
        return Err(f.err(&fields.response_b, "identical to response_a"));
    }
    Ok(())
}

impl WireCardinal {
    pub fn parse_line(line: usize, text: &str, fields: &FieldMap) -> Result<Self> {
        let mut f = parse_object(line, text)?;
        let id = f.string(&fields.id)?;
        let prompt = f.string(&fields.prompt)?;
        let response_a = f.string(&fields.response_a)?;
        let response_b = f.string(&fields.response_b)?;
        check_pair(&f, fields, &response_a, &response_b)?;
        let preferred = f.side(&fields.preferred)?;
        let wtp = f.wtp(&fields.wtp)?;
        let labeler_id = f.string(&fields.labeler_id)?;
        let scale_tag = f.scale_tag(&fields.scale_tag)?;
        Ok(Self {
            id,
            prompt,
            response_a,
            response_b,
            preferred,
            wtp,
            labeler_id,
            scale_tag,
            extra: f.map,
        })
    }

    pub fn to_line(&self, fields: &FieldMap) -> String {
        let mut m = Map::new();
        m.insert(fields.id.clone(), self.id.clone().into());
        m.insert(fields.prompt.clone(), self.prompt.clone().into());
        m.insert(fields.response_a.clone(), self.response_a.clone().into());
        m.insert(fields.response_b.clone(), self.response_b.clone().into());
        m.insert(fields.preferred.clone(), self.preferred.as_wire().into());
        m.insert(fields.wtp.clone(), self.wtp.into());
        m.insert(fields.labeler_id.clone(), self.labeler_id.clone().into());
        m.insert(fields.scale_tag.clone(), self.scale_tag.as_wire().into());
        for (k, v) in &self.extra {
            m.entry(k.clone()).or_insert_with(|| v.clone());
        }
        Value::Object(m).to_string()
    }

    pub fn to_ordinal(&self) -> WireOrdinal {
        WireOrdinal {
            id: self.id.clone(),
            prompt: self.prompt.clone(),
            response_a: self.response_a.clone(),
            response_b: self.response_b.clone(),
            winner: self.preferred,
            labeler_id: self.labeler_id.clone(),
            extra: self.extra.clone(),
        }
    }
}

impl WireOrdinal {
    pub fn parse_line(line: usize, text: &str, fields: &FieldMap) -> Result<Self> {
        let mut f = parse_object(line, text)?;
        let id = f.string(&fields.id)?;
        let prompt = f.string(&fields.prompt)?;
        let response_a = f.string(&fields.response_a)?;
        let response_b = f.string(&fields.response_b)?;
        check_pair(&f, fields, &response_a, &response_b)?;
        let winner = f.side(&fields.winner)?;
        let labeler_id = f.string(&fields.labeler_id)?;
        Ok(Self {
            id,
            prompt,
            response_a,
            response_b,
            winner,
            labeler_id,
            extra: f.map,
        })
    }

    pub fn to_line(&self, fields: &FieldMap) -> String {
        let mut m = Map::new();
        m.insert(fields.id.clone(), self.id.clone().into());
        m.insert(fields.prompt.clone(), self.prompt.clone().into());
        m.insert(fields.response_a.clone(), self.response_a.clone().into());
        m.insert(fields.response_b.clone(), self.response_b.clone().into());
        m.insert(fields.winner.clone(), self.winner.as_wire().into());
        m.insert(fields.labeler_id.clone(), self.labeler_id.clone().into());
        for (k, v) in &self.extra {
            m.entry(k.clone()).or_insert_with(|| v.clone());
        }
        Value::Object(m).to_string()
    }
}

/// Something that lives on one line of a dataset file.
pub trait WireRecord: Sized + Clone + Labeled {
    fn parse(line: usize, text: &str, fields: &FieldMap) -> Result<Self>;
    fn render(&self, fields: &FieldMap) -> String;
    fn id(&self) -> &str;
    fn texts(&self) -> (&str, &str, &str);
}

impl WireRecord for WireCardinal {
    fn parse(line: usize, text: &str, fields: &FieldMap) -> Result<Self> {
        Self::parse_line(line, text, fields)
    }
    fn render(&self, fields: &FieldMap) -> String {
        self.to_line(fields)
    }
    fn id(&self) -> &str {
        &self.id
    }
    fn texts(&self) -> (&str, &str, &str) {
        (&self.prompt, &self.response_a, &self.response_b)
    }
}

impl WireRecord for WireOrdinal {
    fn parse(line: usize, text: &str, fields: &FieldMap) -> Result<Self> {
        Self::parse_line(line, text, fields)
    }
    fn render(&self, fields: &FieldMap) -> String {
        self.to_line(fields)
    }
    fn id(&self) -> &str {
        &self.id
    }
    fn texts(&self) -> (&str, &str, &str) {
        (&self.prompt, &self.response_a, &self.response_b)
    }
}

/// How response strings become indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ResponseIndexing {
    /// One response space shared by all prompts.
    #[default]
    Global,
    /// Responses numbered separately within each prompt; the shape's
    /// response count is the largest per-prompt count.
    PerPrompt,
}

/// String-to-index maps, in order of first appearance.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "IndexMapsWire")]
pub struct IndexMaps {
    pub indexing: ResponseIndexing,
    pub prompts: Vec<String>,
    /// One list for [`ResponseIndexing::Global`], one per prompt otherwise.
    pub responses: Vec<Vec<String>>,
    #[serde(skip)]
    prompt_index: HashMap<String, usize>,
    #[serde(skip)]
    response_index: Vec<HashMap<String, usize>>,
}

#[derive(Deserialize)]
struct IndexMapsWire {
    indexing: ResponseIndexing,
    prompts: Vec<String>,
    responses: Vec<Vec<String>>,
}

impl From<IndexMapsWire> for IndexMaps {
    fn from(w: IndexMapsWire) -> Self {
        let prompt_index = w.prompts.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        let response_index = w
            .responses
            .iter()
            .map(|rs| rs.iter().enumerate().map(|(i, r)| (r.clone(), i)).collect())
            .collect();
        Self {
            indexing: w.indexing,
            prompts: w.prompts,
            responses: w.responses,
            prompt_index,
            response_index,
        }
    }
}

impl IndexMaps {
    pub fn new(indexing: ResponseIndexing) -> Self {
        Self {
            indexing,
            ..Self::default()
        }
    }

    fn slot(&self, prompt: usize) -> usize {
        match self.indexing {
            ResponseIndexing::Global => 0,
            ResponseIndexing::PerPrompt => prompt,
        }
    }

    fn intern(&mut self, prompt: &str, response: &str) -> (usize, usize) {
        let x = match self.prompt_index.get(prompt) {
            Some(&x) => x,
            None => {
                self.prompts.push(prompt.to_string());
                self.prompt_index.insert(prompt.to_string(), self.prompts.len() - 1);
                self.prompts.len() - 1
            }
        };
        let s = self.slot(x);
        while self.responses.len() <= s {
            self.responses.push(Vec::new());
            self.response_index.push(HashMap::new());
        }
        let y = match self.response_index[s].get(response) {
            Some(&y) => y,
            None => {
                self.responses[s].push(response.to_string());
                self.response_index[s].insert(response.to_string(), self.responses[s].len() - 1);
                self.responses[s].len() - 1
            }
        };
        (x, y)
    }

    pub fn prompt_index(&self, prompt: &str) -> Option<usize> {
        self.prompt_index.get(prompt).copied()
    }

    pub fn response_index(&self, prompt: usize, response: &str) -> Option<usize> {
        self.response_index.get(self.slot(prompt))?.get(response).copied()
    }

    pub fn response_label(&self, prompt: usize, response: usize) -> Option<&str> {
        self.responses.get(self.slot(prompt))?.get(response).map(String::as_str)
    }

    pub fn prompt_space(&self) -> Result<PromptSpace> {
        PromptSpace::new(self.prompts.clone())
    }

    /// The global response space; only meaningful for global indexing.
    pub fn response_space(&self) -> Result<ResponseSpace> {
        match self.indexing {
            ResponseIndexing::Global => ResponseSpace::new(self.responses.first().cloned().unwrap_or_default()),
            ResponseIndexing::PerPrompt => Err(Error::Space("per-prompt indexing has no global response space".into())),
        }
    }

    /// Shape covering every interned string. Bypasses the default cell cap,
    /// since real datasets may exceed it.
    pub fn shape(&self) -> Result<Shape> {
        let responses = self.responses.iter().map(Vec::len).max().unwrap_or(0);
        Shape::with_cell_limit(self.prompts.len(), responses, usize::MAX)
    }

    /// Maps built from known spaces: `x0..`, `y0..` or any labels.
    pub fn from_spaces(prompts: &PromptSpace, responses: &ResponseSpace) -> Self {
        let mut m = Self::new(ResponseIndexing::Global);
        for p in prompts.labels() {
            for r in responses.labels() {
                m.intern(p, r);
            }
        }
        m
    }
}

/// Parsed file contents plus the index maps built from them.
#[derive(Debug, Clone, PartialEq)]
pub struct Loaded<T> {
    pub records: Vec<T>,
    pub maps: IndexMaps,
    /// Index triple `(prompt, a, b)` per record.
    pub indices: Vec<(usize, usize, usize)>,
}

impl<T> Loaded<T> {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl Loaded<WireCardinal> {
    pub fn to_dataset(&self) -> Result<CardinalDataset> {
        let shape = self.maps.shape()?;
        let records = self
            .records
            .iter()
            .zip(&self.indices)
            .map(|(r, &(x, a, b))| CardinalRecord {
                comparison: Comparison { prompt: x, first: a, second: b },
                preferred: r.preferred,
                wtp: r.wtp,
                labeler: r.labeler_id.clone(),
                scale_tag: r.scale_tag,
            })
            .collect();
        CardinalDataset::new(shape, records)
    }
}

impl Loaded<WireOrdinal> {
    pub fn to_dataset(&self) -> Result<OrdinalDataset> {
        let shape = self.maps.shape()?;
        let records = self
            .records
            .iter()
            .zip(&self.indices)
            .map(|(r, &(x, a, b))| OrdinalRecord {
                comparison: Comparison { prompt: x, first: a, second: b },
                winner: r.winner,
                labeler: r.labeler_id.clone(),
            })
            .collect();
        OrdinalDataset::new(shape, records)
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub fields: FieldMap,
    pub indexing: ResponseIndexing,
    /// Start from existing maps so indices line up with a known space.
    pub known: Option<IndexMaps>,
}

/// Parse records from any reader. Blank lines are skipped; line numbers in
/// errors are 1-based physical lines.
pub fn read_records<T: WireRecord, R: BufRead>(reader: R, opts: &LoadOptions) -> Result<Loaded<T>> {
    let mut maps = opts.known.clone().unwrap_or_else(|| IndexMaps::new(opts.indexing));
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    let mut indices = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = T::parse(i + 1, &line, &opts.fields)?;
        if !seen.insert(rec.id().to_string()) {
            return Err(Error::Duplicate {
                line: i + 1,
                id: rec.id().to_string(),
            });
        }
        let (p, a, b) = rec.texts();
        let (x, ya) = maps.intern(p, a);
        let (_, yb) = maps.intern(p, b);
        indices.push((x, ya, yb));
        records.push(rec);
    }
    Ok(Loaded { records, maps, indices })
}

pub fn load_records<T: WireRecord>(path: &Path, opts: &LoadOptions) -> Result<Loaded<T>> {
    read_records(BufReader::new(File::open(path)?), opts)
}

pub fn load_cardinal(path: &Path, opts: &LoadOptions) -> Result<Loaded<WireCardinal>> {
    load_records(path, opts)
}

pub fn load_ordinal(path: &Path, opts: &LoadOptions) -> Result<Loaded<WireOrdinal>> {
    load_records(path, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Ordinal,
    Cardinal,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LoadedDataset {
    Ordinal(Loaded<WireOrdinal>),
    Cardinal(Loaded<WireCardinal>),
}

pub fn load_dataset(path: &Path, kind: DatasetKind, opts: &LoadOptions) -> Result<LoadedDataset> {
    Ok(match kind {
        DatasetKind::Ordinal => LoadedDataset::Ordinal(load_ordinal(path, opts)?),
        DatasetKind::Cardinal => LoadedDataset::Cardinal(load_cardinal(path, opts)?),
    })
}

/// Render records one per line, each terminated by `\n`.
pub fn render_records<T: WireRecord>(records: &[T], fields: &FieldMap) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.render(fields));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct SaveOptions {
    pub fields: FieldMap,
    /// Replace an existing file instead of refusing.
    pub overwrite: bool,
}

/// Write the file through a sibling temporary and a rename, so readers never
/// see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8], overwrite: bool) -> Result<()> {
    if !overwrite && path.exists() {
        return Err(Error::Exists(path.display().to_string()));
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = BufWriter::new(File::create(&tmp)?);
        f.write_all(bytes)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_records<T: WireRecord>(records: &[T], path: &Path, opts: &SaveOptions) -> Result<()> {
    write_atomic(path, render_records(records, &opts.fields).as_bytes(), opts.overwrite)
}

/// Append one record as a single write of a complete line.
pub fn append_record<T: WireRecord>(file: &mut File, record: &T, fields: &FieldMap) -> Result<()> {
    let mut line = record.render(fields);
    line.push('\n');
    file.write_all(line.as_bytes())?;
    Ok(())
}

pub fn open_append(path: &Path) -> Result<File> {
    Ok(OpenOptions::new().create(true).append(true).open(path)?)
}

fn default_id(i: usize) -> String {
    format!("r{i:06}")
}

/// Wire form of an index-level dataset. Strings come from `maps` when
/// given, else `x{i}` / `y{j}`.
pub fn cardinal_to_wire(data: &CardinalDataset, maps: Option<&IndexMaps>) -> Result<Vec<WireCardinal>> {
    let names = Names::new(data.shape(), maps)?;
    Ok(data
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let c = r.comparison;
            WireCardinal {
                id: default_id(i),
                prompt: names.prompt(c.prompt),
                response_a: names.response(c.prompt, c.first),
                response_b: names.response(c.prompt, c.second),
                preferred: r.preferred,
                wtp: r.wtp,
                labeler_id: r.labeler.clone(),
                scale_tag: r.scale_tag,
                extra: Map::new(),
            }
        })
        .collect())
}

pub fn ordinal_to_wire(data: &OrdinalDataset, maps: Option<&IndexMaps>) -> Result<Vec<WireOrdinal>> {
    let names = Names::new(data.shape(), maps)?;
    Ok(data
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let c = r.comparison;
            WireOrdinal {
                id: default_id(i),
                prompt: names.prompt(c.prompt),
                response_a: names.response(c.prompt, c.first),
                response_b: names.response(c.prompt, c.second),
                winner: r.winner,
                labeler_id: r.labeler.clone(),
                extra: Map::new(),
            }
        })
        .collect())
}

struct Names<'a> {
    maps: Option<&'a IndexMaps>,
}

impl<'a> Names<'a> {
    fn new(shape: Shape, maps: Option<&'a IndexMaps>) -> Result<Self> {
        if let Some(m) = maps {
            let s = m.shape()?;
            if s.prompts < shape.prompts || s.responses < shape.responses {
                return Err(Error::Shape(format!(
                    "index maps cover {}x{}, dataset needs {}x{}",
                    s.prompts, s.responses, shape.prompts, shape.responses
                )));
            }
        }
        Ok(Self { maps })
    }

    fn prompt(&self, x: usize) -> String {
        match self.maps {
            Some(m) => m.prompts[x].clone(),
            None => format!("x{x}"),
        }
    }

    fn response(&self, x: usize, y: usize) -> String {
        match self.maps.and_then(|m| m.response_label(x, y)) {
            Some(s) => s.to_string(),
            None => format!("y{y}"),
        }
    }
}

/// Deterministic train/holdout split, stratified by labeler. Each labeler
/// with `n >= 2` records sends `round(n * fraction)` of them, clamped to
/// `[1, n - 1]`, to the holdout; single-record labelers stay in train.
/// Both halves keep the input order.
pub fn split<T: Labeled + Clone>(records: &[T], holdout_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::Argument(format!("holdout fraction {holdout_fraction} must lie in (0, 1)")));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(r.labeler()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hold = vec![false; records.len()];
    for idx in groups.values_mut() {
        let n = idx.len();
        if n < 2 {
            continue;
        }
        let k = ((n as f64 * holdout_fraction).round() as usize).clamp(1, n - 1);
        idx.shuffle(&mut rng);
        for &i in &idx[..k] {
            hold[i] = true;
        }
    }
    let (mut train, mut holdout) = (Vec::new(), Vec::new());
    for (r, h) in records.iter().zip(hold) {
        if h {
            holdout.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok((train, holdout))
}

/// Settings for a simulated end-to-end run, stored as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub prompts: usize,
    pub responses: usize,
    /// Standard deviation of the Gaussian ground-truth reward entries.
    pub reward_sd: f64,
    pub annotators: Vec<AnnotatorModel>,
    pub assignment: Assignment,
    pub coverage: Coverage,
    pub beta: f64,
    pub bt_l2: f64,
    pub holdout_fraction: f64,
    pub optimizer: OptimizerConfig,
    /// Explicit `|margin|` bin edges; terciles when absent.
    pub bin_edges: Option<Vec<f64>>,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            prompts: 20,
            responses: 4,
            reward_sd: 1.0,
            annotators: vec![
                AnnotatorModel::new("sim-0", crate::annotator::AnnotatorKind::NoisyWtp).with_noise(0.25).with_seed(1),
                AnnotatorModel::new("sim-1", crate::annotator::AnnotatorKind::NoisyWtp).with_noise(0.25).with_seed(2),
            ],
            assignment: Assignment::RoundRobin,
            coverage: Coverage::Full,
            beta: 0.1,
            bt_l2: crate::reward_fit::DEFAULT_BT_L2,
            holdout_fraction: 0.2,
            optimizer: OptimizerConfig {
                max_iter: 500,
                ..OptimizerConfig::default()
            },
            bin_edges: None,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        Shape::new(self.prompts, self.responses)?;
        if self.annotators.is_empty() {
            return Err(Error::Config("at least one annotator is required".into()));
        }
        for a in &self.annotators {
            a.validate()?;
        }
        if !(self.reward_sd.is_finite() && self.reward_sd > 0.0) {
            return Err(Error::Config(format!("reward_sd must be positive, got {}", self.reward_sd)));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::Config(format!("holdout_fraction must lie in (0, 1), got {}", self.holdout_fraction)));
        }
        if let Some(e) = &self.bin_edges {
            if e.len() < 2 || e.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less)) {
                return Err(Error::Config("bin_edges must be strictly increasing, at least two".into()));
            }
        }
        if let Some(dir) = &self.output_dir {
            if dir.exists() && fs::metadata(dir)?.permissions().readonly() {
                return Err(Error::Config(format!("output directory {} is not writable", dir.display())));
            }
        }
        self.optimizer.validate()
    }
}
