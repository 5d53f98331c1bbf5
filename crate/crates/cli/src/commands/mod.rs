mod data;
mod demo;
mod evaluate;
mod fit;
mod optimize;
mod pipeline;
mod serve;
mod simulate;

use cardinal_core::data_io::{ExperimentConfig, FieldMap, IndexMaps};
use cardinal_core::eval::LossTrace;
use cardinal_core::model::{PromptSpace, ResponseSpace};
use cardinal_core::policy_opt::TraceStep;
use cardinal_core::reward_fit::{bt_nll_and_gradient, fit_bt, BtFitConfig, FitMeta, FittedReward, Gauge};
use cardinal_core::{Error, OrdinalDataset, Shape};
use serde::Serialize;

use crate::cli::{Command, ExperimentOverrides};
use crate::error::{CliError, CliResult};
use crate::output::{resolve_out, Artifacts};
use crate::plots;

/// Run one subcommand. Returns the artifact set still to be finalized, or
/// `None` for commands that write no artifact directory.
pub fn run(command: &Command) -> CliResult<Option<Artifacts>> {
    match command {
        Command::Simulate(a) => simulate::run(a).map(Some),
        Command::FitReward(a) => fit::run(a).map(Some),
        Command::Optimize(a) => optimize::run(a).map(Some),
        Command::DemoImpossibility(a) => demo::run(a).map(Some),
        Command::Evaluate(a) => evaluate::run(a).map(Some),
        Command::Stats(a) => data::stats(a).map(Some),
        Command::Normalize(a) => data::normalize(a).map(Some),
        Command::Split(a) => data::split(a).map(Some),
        Command::Serve(a) => serve::run(a).map(|()| None),
        Command::Pipeline(a) => pipeline::run(a).map(Some),
    }
}

fn artifacts(out: &crate::cli::OutArgs, command: &str, args: &impl Serialize) -> CliResult<Artifacts> {
    Artifacts::create(resolve_out(out.out.as_deref(), command), out.force, command, args)
}

fn field_map(spec: Option<&str>) -> CliResult<FieldMap> {
    Ok(match spec {
        Some(s) => FieldMap::parse_overrides(s)?,
        None => FieldMap::default(),
    })
}

/// Defaults, then the config file, then flags.
fn resolve_experiment(o: &ExperimentOverrides, arts: &mut Artifacts) -> CliResult<ExperimentConfig> {
    let mut c = match &o.config {
        Some(path) => {
            let bytes = arts.input(path)?;
            let text = String::from_utf8(bytes).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            ExperimentConfig::from_toml(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(v) = o.seed {
        c.seed = v;
    }
    if let Some(v) = o.prompts {
        c.prompts = v;
    }
    if let Some(v) = o.responses {
        c.responses = v;
    }
    if let Some(v) = o.reward_sd {
        c.reward_sd = v;
    }
    if let Some(v) = o.noise {
        for a in &mut c.annotators {
            a.noise_sd = v;
        }
    }
    if let Some(v) = o.beta {
        c.beta = v;
    }
    if let Some(v) = o.max_iter {
        c.optimizer.max_iter = v;
    }
    c.validate()?;
    arts.config(&c)?;
    arts.seed("experiment", c.seed);
    for a in &c.annotators {
        arts.seed(&format!("annotator:{}", a.id), a.seed);
    }
    Ok(c)
}

/// Bradley-Terry fit that keeps the last iterate, with a warning, when the
/// iteration cap is hit. The flag reports convergence.
fn fit_bt_lenient(arts: &mut Artifacts, data: &OrdinalDataset, l2: f64, config: BtFitConfig) -> CliResult<(FittedReward, bool)> {
    match fit_bt(data, l2, config) {
        Ok(f) => Ok((f, true)),
        Err(Error::Convergence { iterations, grad_norm, last }) => {
            arts.warn(format!("Bradley-Terry fit stopped after {iterations} iterations (gradient {grad_norm:.3e})"));
            let (loss, _) = bt_nll_and_gradient(&last, data, l2)?;
            let meta = FitMeta { method: "bt".into(), loss, iterations, l2 };
            Ok((FittedReward { table: *last, gauge: Gauge::ZeroMeanPerPrompt, meta }, false))
        }
        Err(e) => Err(e.into()),
    }
}

/// Maps for the `x{i}` / `y{j}` names used by simulated datasets.
fn indexed_maps(shape: Shape) -> CliResult<IndexMaps> {
    Ok(IndexMaps::from_spaces(&PromptSpace::indexed(shape.prompts)?, &ResponseSpace::indexed(shape.responses)?))
}

#[derive(Serialize)]
struct TraceRow {
    step: usize,
    loss: f64,
    kl_to_reference: f64,
    utility: Option<f64>,
}

fn trace_rows(trace: &[TraceStep]) -> Vec<TraceRow> {
    trace
        .iter()
        .map(|t| TraceRow { step: t.step, loss: t.loss, kl_to_reference: t.kl_to_reference, utility: t.utility })
        .collect()
}

#[derive(Serialize)]
struct SampleRow {
    step: usize,
    sample: usize,
    delta_loss: f64,
}

fn sample_rows(t: &LossTrace) -> Vec<SampleRow> {
    t.steps
        .iter()
        .zip(&t.deltas)
        .flat_map(|(&step, row)| row.iter().zip(&t.sample_ids).map(move |(&d, &s)| SampleRow { step, sample: s, delta_loss: d }))
        .collect()
}

/// Sample-by-step grid of loss changes since initialization.
fn write_loss_heatmap(arts: &mut Artifacts, name: &str, title: &str, t: &LossTrace) -> CliResult<()> {
    let cells: Vec<Vec<f64>> = (0..t.sample_ids.len()).map(|j| t.deltas.iter().map(|row| row[j]).collect()).collect();
    let svg = plots::heatmap(title, "logged step", "sample", &cells)?;
    arts.write(name, svg.as_bytes())
}

fn write_utility_plot(arts: &mut Artifacts, name: &str, runs: &[(&str, &[TraceStep])]) -> CliResult<()> {
    let series: Vec<plots::Series<'_>> = runs
        .iter()
        .map(|(label, trace)| {
            let pts = trace.iter().filter_map(|t| t.utility.map(|u| (t.step as f64, u))).collect();
            (*label, pts)
        })
        .collect();
    let svg = plots::line_chart("Ground-truth utility during fine-tuning", "step", "utility", &series)?;
    arts.write(name, svg.as_bytes())
}

/// Evenly spaced record indices, at most `k` of them.
fn spread(n: usize, k: usize) -> Vec<usize> {
    if k == 0 || n == 0 {
        return Vec::new();
    }
    if n <= k {
        return (0..n).collect();
    }
    let mut v: Vec<usize> = (0..k).map(|i| i * n / k).collect();
    v.dedup();
    v
}
