use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use cardinal_label_service::{load_tasks, serve, LabelService, ServiceConfig, SystemClock, TaskOrder};

use crate::cli::ServeArgs;
use crate::error::{CliError, CliResult};

pub fn run(args: &ServeArgs) -> CliResult<()> {
    let tasks = load_tasks(&args.tasks).map_err(|e| CliError::data(e.to_string()))?;
    let text = std::fs::read_to_string(&args.tokens).map_err(|e| CliError::data(format!("{}: {e}", args.tokens.display())))?;
    let tokens: HashMap<String, String> =
        serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", args.tokens.display())))?;
    if tokens.is_empty() {
        return Err(CliError::usage("the token file lists no labelers"));
    }
    if args.labels_per_task == 0 {
        return Err(CliError::usage("--labels-per-task must be positive"));
    }
    let config = ServiceConfig {
        lease: Duration::from_secs(args.lease_secs),
        labels_per_task: args.labels_per_task,
        order: args.shuffle_seed.map_or(TaskOrder::Sequential, |seed| TaskOrder::Shuffled { seed }),
        budget: args.budget,
        enforce_budget: args.enforce_budget,
    };
    let service = LabelService::new(tasks, tokens, config, Some(args.store.clone()), Arc::new(SystemClock))
        .map_err(|e| CliError::data(e.to_string()))?;
    let runtime = tokio::runtime::Runtime::new()?;
    eprintln!("serving {} on http://{}", args.tasks.display(), args.addr);
    runtime.block_on(serve(Arc::new(service), args.addr))?;
    Ok(())
}
