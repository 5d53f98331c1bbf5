//! Task leasing, submission validation and the append-only label store.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use cardinal_core::data_io::{self, append_record, open_append, FieldMap, LoadOptions, WireCardinal};
use cardinal_core::dataset::{ScaleTag, Side};
use cardinal_core::numeric::population_sd;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const DEFAULT_LEASE: Duration = Duration::from_secs(15 * 60);

pub trait Clock: Send + Sync {
    /// Milliseconds since the Unix epoch.
    fn now_ms(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
    }
}

/// A clock that only moves when told to.
#[derive(Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        Self(AtomicU64::new(start_ms))
    }

    pub fn advance(&self, by: Duration) {
        self.0.fetch_add(by.as_millis() as u64, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("unknown labeler `{0}`")]
    UnknownLabeler(String),
    #[error("tasks file line {line}: {reason}")]
    Tasks { line: usize, reason: String },
    #[error("store is inconsistent with the task list: {0}")]
    Store(String),
    #[error(transparent)]
    Data(#[from] cardinal_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One comparison to be labeled, as listed in the tasks file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub prompt: String,
    pub response_a: String,
    pub response_b: String,
}

/// Read a JSONL file of `{id, prompt, response_a, response_b}` objects;
/// other fields are ignored.
pub fn load_tasks(path: &Path) -> Result<Vec<TaskSpec>, ServiceError> {
    let text = std::fs::read_to_string(path)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let t: TaskSpec = serde_json::from_str(line).map_err(|e| ServiceError::Tasks { line: i + 1, reason: e.to_string() })?;
        if t.response_a == t.response_b {
            return Err(ServiceError::Tasks { line: i + 1, reason: "response_a equals response_b".into() });
        }
        if !seen.insert(t.id.clone()) {
            return Err(ServiceError::Tasks { line: i + 1, reason: format!("duplicate id `{}`", t.id) });
        }
        out.push(t);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelTask {
    pub task_id: String,
    pub prompt: String,
    pub response_a: String,
    pub response_b: String,
    pub labeler_id: String,
    pub issued_at_ms: u64,
    pub lease_expires_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSubmission {
    pub task_id: String,
    pub labeler_id: String,
    pub preferred: Side,
    pub wtp: f64,
    #[serde(default)]
    pub scale_tag: ScaleTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_timestamp: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    Validation,
    StaleLease,
    Duplicate,
    UnknownTask,
    Budget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum SubmitOutcome {
    Accepted {
        record_id: String,
    },
    Rejected {
        reason: RejectReason,
        #[serde(skip_serializing_if = "Option::is_none")]
        field: Option<String>,
        message: String,
    },
}

impl SubmitOutcome {
    fn reject(reason: RejectReason, field: Option<&str>, message: impl Into<String>) -> Self {
        SubmitOutcome::Rejected {
            reason,
            field: field.map(str::to_string),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelerProgress {
    pub count: usize,
    /// Population sd of the labeler's WTP values; `None` below 2 labels.
    pub wtp_sd: Option<f64>,
    pub wtp_sum: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget_remaining: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub total: usize,
    pub completed: usize,
    pub leased: usize,
    pub per_labeler: BTreeMap<String, LabelerProgress>,
}

/// Order in which free tasks are handed out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TaskOrder {
    /// File order.
    #[default]
    Sequential,
    /// A seeded shuffle of file order.
    Shuffled { seed: u64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub lease: Duration,
    /// How many distinct labelers judge each task (cross-labeling).
    pub labels_per_task: usize,
    pub order: TaskOrder,
    /// Per-labeler total WTP budget.
    pub budget: Option<f64>,
    /// Reject submissions that would exceed the budget.
    pub enforce_budget: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            lease: DEFAULT_LEASE,
            labels_per_task: 1,
            order: TaskOrder::Sequential,
            budget: None,
            enforce_budget: false,
        }
    }
}

#[derive(Debug, Clone)]
enum Slot {
    Free,
    Leased { labeler: String, issued: u64, expires: u64 },
    Done,
}

#[derive(Debug)]
struct Unit {
    id: String,
    spec: usize,
    slot: Slot,
}

struct State {
    specs: Vec<TaskSpec>,
    units: Vec<Unit>,
    by_id: HashMap<String, usize>,
    /// Task indices each labeler has already been given or has labeled.
    touched: HashMap<String, HashSet<usize>>,
    accepted: Vec<WireCardinal>,
    store: Option<File>,
}

/// The queue. All mutation happens under one lock, which also serializes
/// appends to the store file.
pub struct LabelService {
    config: ServiceConfig,
    tokens: HashMap<String, String>,
    labelers: HashSet<String>,
    clock: Arc<dyn Clock>,
    state: Mutex<State>,
    store_path: Option<PathBuf>,
}

fn unit_id(spec: &TaskSpec, k: usize, per_task: usize) -> String {
    if per_task == 1 {
        spec.id.clone()
    } else {
        format!("{}#{k}", spec.id)
    }
}

/// Deterministic permutation for [`TaskOrder::Shuffled`].
fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    // splitmix64-keyed sort keeps this free of extra dependencies
    let key = |i: usize| {
        let mut z = seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by_key(|&i| key(i));
    idx
}

impl LabelService {
    /// `tokens` maps a shared-secret token to the labeler id it
    /// authenticates. With a `store_path`, previously accepted labels are
    /// replayed from it and new ones are appended.
    pub fn new(
        tasks: Vec<TaskSpec>,
        tokens: HashMap<String, String>,
        config: ServiceConfig,
        store_path: Option<PathBuf>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, ServiceError> {
        let per = config.labels_per_task.max(1);
        let order: Vec<usize> = match config.order {
            TaskOrder::Sequential => (0..tasks.len()).collect(),
            TaskOrder::Shuffled { seed } => shuffled(tasks.len(), seed),
        };
        let mut units = Vec::new();
        for k in 0..per {
            for &s in &order {
                units.push(Unit {
                    id: unit_id(&tasks[s], k, per),
                    spec: s,
                    slot: Slot::Free,
                });
            }
        }
        let by_id = units.iter().enumerate().map(|(i, u)| (u.id.clone(), i)).collect();
        let mut state = State {
            specs: tasks,
            units,
            by_id,
            touched: HashMap::new(),
            accepted: Vec::new(),
            store: None,
        };
        if let Some(path) = &store_path {
            if path.exists() {
                let loaded = data_io::read_records::<WireCardinal, _>(BufReader::new(File::open(path)?), &LoadOptions::default())?;
                for rec in loaded.records {
                    let &u = state
                        .by_id
                        .get(&rec.id)
                        .ok_or_else(|| ServiceError::Store(format!("record `{}` matches no task", rec.id)))?;
                    state.units[u].slot = Slot::Done;
                    let spec = state.units[u].spec;
                    state.touched.entry(rec.labeler_id.clone()).or_default().insert(spec);
                    state.accepted.push(rec);
                }
            }
            state.store = Some(open_append(path)?);
        }
        let labelers = tokens.values().cloned().collect();
        Ok(Self {
            config,
            tokens,
            labelers,
            clock,
            state: Mutex::new(state),
            store_path,
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn store_path(&self) -> Option<&Path> {
        self.store_path.as_deref()
    }

    /// Labeler id for a token.
    pub fn authenticate(&self, token: &str) -> Option<&str> {
        self.tokens.get(token).map(String::as_str)
    }

    fn check_labeler(&self, labeler: &str) -> Result<(), ServiceError> {
        if self.labelers.contains(labeler) {
            Ok(())
        } else {
            Err(ServiceError::UnknownLabeler(labeler.to_string()))
        }
    }

    /// The labeler's current lease if it still holds one, else the oldest
    /// free or lease-expired task the labeler has not seen.
    pub fn next_task(&self, labeler: &str) -> Result<Option<LabelTask>, ServiceError> {
        self.check_labeler(labeler)?;
        let now = self.clock.now_ms();
        let mut st = self.state.lock();
        let held = st
            .units
            .iter()
            .position(|u| matches!(&u.slot, Slot::Leased { labeler: l, expires, .. } if l == labeler && *expires > now));
        let pick = held.or_else(|| {
            let seen = st.touched.get(labeler);
            st.units.iter().position(|u| {
                let free = match &u.slot {
                    Slot::Free => true,
                    Slot::Leased { expires, .. } => *expires <= now,
                    Slot::Done => false,
                };
                free && !seen.is_some_and(|s| s.contains(&u.spec))
            })
        });
        let Some(i) = pick else {
            return Ok(None);
        };
        let lease = self.config.lease.as_millis() as u64;
        let (issued, expires) = match (&st.units[i].slot, held.is_some()) {
            (Slot::Leased { issued, expires, .. }, true) => (*issued, *expires),
            _ => (now, now + lease),
        };
        st.units[i].slot = Slot::Leased {
            labeler: labeler.to_string(),
            issued,
            expires,
        };
        let spec = &st.specs[st.units[i].spec];
        let task = LabelTask {
            task_id: st.units[i].id.clone(),
            prompt: spec.prompt.clone(),
            response_a: spec.response_a.clone(),
            response_b: spec.response_b.clone(),
            labeler_id: labeler.to_string(),
            issued_at_ms: issued,
            lease_expires_at_ms: expires,
        };
        Ok(Some(task))
    }

    pub fn submit_label(&self, sub: &LabelSubmission) -> Result<SubmitOutcome, ServiceError> {
        self.check_labeler(&sub.labeler_id)?;
        if !(sub.wtp.is_finite() && sub.wtp >= 0.0) {
            return Ok(SubmitOutcome::reject(
                RejectReason::Validation,
                Some("wtp"),
                format!("wtp must be a finite non-negative number, got {}", sub.wtp),
            ));
        }
        let now = self.clock.now_ms();
        let mut st = self.state.lock();
        let Some(&i) = st.by_id.get(&sub.task_id) else {
            return Ok(SubmitOutcome::reject(RejectReason::UnknownTask, Some("task_id"), format!("no task `{}`", sub.task_id)));
        };
        match &st.units[i].slot {
            Slot::Done => {
                return Ok(SubmitOutcome::reject(RejectReason::Duplicate, None, format!("task `{}` is already labeled", sub.task_id)));
            }
            Slot::Leased { labeler, expires, .. } if labeler == &sub.labeler_id && *expires > now => {}
            _ => {
                return Ok(SubmitOutcome::reject(
                    RejectReason::StaleLease,
                    None,
                    format!("task `{}` is not leased to `{}`", sub.task_id, sub.labeler_id),
                ));
            }
        }
        if let (Some(budget), true) = (self.config.budget, self.config.enforce_budget) {
            let spent: f64 = st.accepted.iter().filter(|r| r.labeler_id == sub.labeler_id).map(|r| r.wtp).sum();
            if spent + sub.wtp > budget {
                return Ok(SubmitOutcome::reject(
                    RejectReason::Budget,
                    Some("wtp"),
                    format!("exceeds remaining budget {}", budget - spent),
                ));
            }
        }
        let spec = &st.specs[st.units[i].spec];
        let mut extra = Map::new();
        if let Some(ts) = &sub.client_timestamp {
            extra.insert("client_timestamp".into(), Value::String(ts.clone()));
        }
        let record = WireCardinal {
            id: sub.task_id.clone(),
            prompt: spec.prompt.clone(),
            response_a: spec.response_a.clone(),
            response_b: spec.response_b.clone(),
            preferred: sub.preferred,
            wtp: sub.wtp,
            labeler_id: sub.labeler_id.clone(),
            scale_tag: sub.scale_tag,
            extra,
        };
        if let Some(f) = st.store.as_mut() {
            append_record(f, &record, &FieldMap::default())?;
        }
        let spec_idx = st.units[i].spec;
        st.units[i].slot = Slot::Done;
        st.touched.entry(sub.labeler_id.clone()).or_default().insert(spec_idx);
        st.accepted.push(record);
        Ok(SubmitOutcome::Accepted {
            record_id: sub.task_id.clone(),
        })
    }

    pub fn progress(&self) -> Progress {
        let now = self.clock.now_ms();
        let st = self.state.lock();
        let mut values: BTreeMap<String, Vec<f64>> = self.labelers.iter().map(|l| (l.clone(), Vec::new())).collect();
        for r in &st.accepted {
            values.entry(r.labeler_id.clone()).or_default().push(r.wtp);
        }
        let per_labeler = values
            .into_iter()
            .map(|(l, v)| {
                let sum: f64 = v.iter().sum();
                let p = LabelerProgress {
                    count: v.len(),
                    wtp_sd: (v.len() >= 2).then(|| population_sd(&v)),
                    wtp_sum: sum,
                    budget_remaining: self.config.budget.map(|b| b - sum),
                };
                (l, p)
            })
            .collect();
        Progress {
            total: st.units.len(),
            completed: st.units.iter().filter(|u| matches!(u.slot, Slot::Done)).count(),
            leased: st.units.iter().filter(|u| matches!(u.slot, Slot::Leased { expires, .. } if expires > now)).count(),
            per_labeler,
        }
    }

    /// Accepted labels in acceptance order.
    pub fn accepted(&self) -> Vec<WireCardinal> {
        self.state.lock().accepted.clone()
    }

    /// Canonical JSONL of every accepted label.
    pub fn export(&self, fields: &FieldMap) -> String {
        data_io::render_records(&self.state.lock().accepted, fields)
    }
}
