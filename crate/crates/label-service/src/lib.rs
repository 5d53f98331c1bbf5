//! A small HTTP queue that hands out pairwise comparisons and collects
//! preference-plus-WTP labels into an append-only JSONL store.

pub mod http;
pub mod queue;

pub use http::{router, serve};
pub use queue::{
    load_tasks, Clock, LabelService, LabelSubmission, LabelTask, LabelerProgress, ManualClock, Progress, RejectReason,
    ServiceConfig, ServiceError, SubmitOutcome, SystemClock, TaskOrder, TaskSpec, DEFAULT_LEASE,
};
