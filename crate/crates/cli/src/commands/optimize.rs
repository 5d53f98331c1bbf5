use cardinal_core::data_io::LoadOptions;
use cardinal_core::eval::{mean_utility_normalized, per_sample_loss_trace};
use cardinal_core::model::kl_to_reference;
use cardinal_core::policy_opt::{optimize_tabular_tracked, RunStatus};
use cardinal_core::{DatasetRef, LossKind, LossSpec, OptimizerConfig, Policy};
use serde::Serialize;

use super::{artifacts, field_map, sample_rows, spread, trace_rows, write_loss_heatmap, write_utility_plot};
use crate::cli::{LossArg, OptimizeArgs};
use crate::error::{CliError, CliResult};
use crate::files::{load_input, Input, PolicyFile, RewardFile};
use crate::output::Artifacts;

#[derive(Serialize)]
struct OptimizeSummary {
    loss: LossArg,
    beta: f64,
    records: usize,
    status: RunStatus,
    iterations: usize,
    initial_loss: f64,
    final_loss: f64,
    kl_to_reference: f64,
    fraction_degraded: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    normalized_utility: Option<f64>,
}

pub fn run(args: &OptimizeArgs) -> CliResult<Artifacts> {
    let mut arts = artifacts(&args.out, "optimize", args)?;
    let truth = args.ground_truth.as_deref().map(|p| RewardFile::read(&mut arts, p)).transpose()?;
    let opts = LoadOptions {
        fields: field_map(args.input.fields.as_deref())?,
        indexing: args.input.indexing.into(),
        known: truth.as_ref().map(|t| t.maps.clone()),
    };
    let input = load_input(&mut arts, &args.input.data, args.input.kind, &opts)?;
    if let Some(t) = &truth {
        if input.maps() != &t.maps {
            return Err(CliError::data("dataset mentions prompts or responses absent from the ground truth"));
        }
    }
    let truth = truth.map(|t| t.table()).transpose()?;
    let kind = LossKind::from(args.loss);
    let (card, ord) = match (&input, kind) {
        (Input::Cardinal(l), LossKind::Cdpo) => (Some(l.to_dataset()?), None),
        (Input::Cardinal(l), LossKind::Dpo) => (None, Some(l.to_dataset()?.to_ordinal())),
        (Input::Ordinal(l), LossKind::Dpo) => (None, Some(l.to_dataset()?)),
        (Input::Ordinal(_), LossKind::Cdpo) => return Err(CliError::usage("CDPO needs a cardinal dataset")),
    };
    let data = match (&card, &ord) {
        (Some(c), _) => DatasetRef::Cardinal(c),
        (_, Some(o)) => DatasetRef::Ordinal(o),
        _ => unreachable!(),
    };
    let config = OptimizerConfig {
        max_iter: args.max_iter,
        tolerance: args.tolerance,
        standardize_wtp: !args.raw_wtp,
        ..OptimizerConfig::default()
    };
    let reference = Policy::uniform(data.shape());
    let run = optimize_tabular_tracked(&reference, data, LossSpec::new(kind, args.beta)?, &config, truth.as_ref())?;
    if run.status != RunStatus::Converged {
        arts.warn(format!("optimizer stopped with status {:?} after {} iterations", run.status, run.iterations));
    }
    let n = run.sample_losses.first().map_or(0, Vec::len);
    let tracked = spread(n, args.heatmap_samples);
    let samples = per_sample_loss_trace(&run, Some(&tracked))?;
    let summary = OptimizeSummary {
        loss: args.loss,
        beta: args.beta,
        records: input.len(),
        status: run.status,
        iterations: run.iterations,
        initial_loss: run.trace.first().map_or(f64::NAN, |t| t.loss),
        final_loss: run.trace.last().map_or(f64::NAN, |t| t.loss),
        kl_to_reference: kl_to_reference(&run.policy, &reference)?,
        fraction_degraded: samples.fraction_degraded,
        normalized_utility: truth.as_ref().map(|t| mean_utility_normalized(&run.policy, &reference, t)).transpose()?,
    };

    arts.json("policy.json", &PolicyFile::new(input.maps().clone(), &run.policy))?;
    arts.csv("trace.csv", &trace_rows(&run.trace))?;
    arts.csv("per_sample_loss.csv", &sample_rows(&samples))?;
    write_loss_heatmap(&mut arts, "loss_heatmap.svg", "Per-sample loss change since initialization", &samples)?;
    if truth.is_some() {
        let label = match args.loss {
            LossArg::Dpo => "DPO",
            LossArg::Cdpo => "CDPO",
        };
        write_utility_plot(&mut arts, "utility_vs_steps.svg", &[(label, &run.trace)])?;
    }
    arts.json("summary.json", &summary)?;
    println!("{:?} after {} iterations, loss {:.6} -> {:.6}", run.status, run.iterations, summary.initial_loss, summary.final_loss);
    Ok(arts)
}
