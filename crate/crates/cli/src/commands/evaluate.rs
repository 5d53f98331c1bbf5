use cardinal_core::eval::{RateSummary, TrialResult};
use cardinal_core::experiments::{
    conflicting_pair_trace, heldout_comparison, selection_experiment, stratified_experiment, HeldoutComparison, HeldoutConfig,
    SelectionConfig, StratifiedConfig,
};
use cardinal_core::impossibility::ModelId;
use cardinal_core::{LossKind, OptimizerConfig};
use serde::Serialize;
use serde_json::json;

use super::{artifacts, sample_rows, write_loss_heatmap, write_utility_plot};
use crate::cli::{EvaluateArgs, ExperimentArg};
use crate::error::{CliError, CliResult};
use crate::output::Artifacts;
use crate::plots;

/// Majority size in the conflicting-pair instance.
const TRADEOFF_MAJORITY: usize = 2;

#[derive(Serialize)]
struct TrialRow {
    trial: usize,
    method: LossKind,
    selected: ModelId,
    optimal: bool,
    theta: f64,
    utility_gap: f64,
}

#[derive(Serialize)]
struct BinRow {
    method: LossKind,
    bin: usize,
    lo: f64,
    hi: f64,
    count: usize,
    agree: usize,
    rate: f64,
}

fn rates(rs: &[RateSummary]) -> serde_json::Value {
    rs.iter().map(|r| (format!("{:?}", r.method).to_lowercase(), json!({ "n": r.n, "rate": r.rate, "se": r.se }))).collect()
}

fn selection(arts: &mut Artifacts, args: &EvaluateArgs) -> CliResult<()> {
    let config = SelectionConfig { trials: args.trials, seed: args.seed, beta: args.beta, ..SelectionConfig::default() };
    let exp = selection_experiment(&config)?;
    let rows: Vec<TrialRow> = exp
        .trials
        .iter()
        .map(|t: &TrialResult| TrialRow {
            trial: t.trial_id,
            method: t.method,
            selected: t.selected,
            optimal: t.selected_optimal,
            theta: t.theta,
            utility_gap: t.utility_gap,
        })
        .collect();
    arts.csv("selection_trials.csv", &rows)?;
    let summary = json!({
        "config": exp.config,
        "overall": rates(&exp.report.overall),
        "disagreement_trials": exp.report.disagreement_trials,
        "disagreement": rates(&exp.report.disagreement),
        "human_data_reference": {
            "note": "published human-preference results, shown for orientation only",
            "overall": { "cdpo": 0.9027, "dpo": 0.8329 },
            "disagreement": { "cdpo": 0.9167, "dpo": 0.3333 },
        },
    });
    arts.json("selection.json", &summary)?;
    let rate = |k| exp.report.overall_rate(k).unwrap_or(f64::NAN);
    let drate = |k| exp.report.disagreement_rate(k).unwrap_or(f64::NAN);
    println!(
        "selection: select-optimal CDPO {:.4} vs DPO {:.4}; on {} disagreement trials CDPO {:.4} vs DPO {:.4}",
        rate(LossKind::Cdpo),
        rate(LossKind::Dpo),
        exp.report.disagreement_trials,
        drate(LossKind::Cdpo),
        drate(LossKind::Dpo)
    );
    Ok(())
}

fn stratified(arts: &mut Artifacts, args: &EvaluateArgs) -> CliResult<()> {
    let config = StratifiedConfig { seed: args.seed, validation_size: args.validation, beta: args.beta, ..StratifiedConfig::default() };
    let exp = stratified_experiment(&config)?;
    let rows: Vec<BinRow> = exp
        .methods
        .iter()
        .flat_map(|m| {
            m.agreement.bins.iter().enumerate().map(|(i, b)| BinRow {
                method: m.method,
                bin: i,
                lo: b.lo,
                hi: b.hi,
                count: b.count,
                agree: b.agree,
                rate: b.rate,
            })
        })
        .collect();
    arts.csv("stratified.csv", &rows)?;
    arts.json(
        "stratified.json",
        &json!({
            "config": exp.config,
            "edges": exp.edges,
            "normalized_utility": exp.methods.iter().map(|m| (format!("{:?}", m.method).to_lowercase(), m.normalized_utility)).collect::<std::collections::BTreeMap<_, _>>(),
        }),
    )?;
    let labels: Vec<String> = ["low", "medium", "high"].iter().map(|s| s.to_string()).collect();
    let labels = if exp.edges.len() == 4 { labels } else { (0..exp.edges.len() - 1).map(|i| format!("bin {i}")).collect() };
    let series: Vec<(&str, Vec<f64>)> = exp
        .methods
        .iter()
        .map(|m| (if m.method == LossKind::Dpo { "DPO" } else { "CDPO" }, m.agreement.bins.iter().map(|b| b.rate).collect()))
        .collect();
    let svg = plots::grouped_bars("Implicit-reward sign agreement by |true margin|", "agreement", &labels, &series)?;
    arts.write("stratified_bars.svg", svg.as_bytes())?;
    let runs: Vec<(&str, &[_])> = exp
        .methods
        .iter()
        .map(|m| (if m.method == LossKind::Dpo { "DPO" } else { "CDPO" }, m.trace.as_slice()))
        .collect();
    write_utility_plot(arts, "utility_vs_steps.svg", &runs)?;
    for m in &exp.methods {
        let top = m.agreement.bins.last().map_or(f64::NAN, |b| b.rate);
        println!("stratified: {:?} utility {:+.4}, top-bin agreement {:.4}", m.method, m.normalized_utility, top);
    }
    Ok(())
}

fn heldout(arts: &mut Artifacts, args: &EvaluateArgs) -> CliResult<()> {
    if args.runs == 0 {
        return Err(CliError::usage("--runs must be positive"));
    }
    let runs: Vec<HeldoutComparison> = (0..args.runs as u64)
        .map(|i| heldout_comparison(&HeldoutConfig { seed: args.seed + i, ..HeldoutConfig::default() }))
        .collect::<Result<_, _>>()?;
    arts.csv("heldout.csv", &runs)?;
    let wins = runs.iter().filter(|r| r.wtp_mse < r.bt_mse).count();
    arts.json(
        "heldout.json",
        &json!({ "config": HeldoutConfig::default(), "runs": runs.len(), "wtp_better": wins, "fraction_wtp_better": wins as f64 / runs.len() as f64 }),
    )?;
    println!("heldout: WTP margin MSE below Bradley-Terry in {wins}/{} runs", runs.len());
    Ok(())
}

fn tradeoff(arts: &mut Artifacts, args: &EvaluateArgs) -> CliResult<()> {
    let config = OptimizerConfig { max_iter: 300, ..OptimizerConfig::default() };
    let t = conflicting_pair_trace(TRADEOFF_MAJORITY, args.beta, &config)?;
    arts.csv("tradeoff.csv", &sample_rows(&t))?;
    arts.json(
        "tradeoff.json",
        &json!({
            "majority": TRADEOFF_MAJORITY,
            "initial_mean_loss": t.mean_loss.first(),
            "final_mean_loss": t.mean_loss.last(),
            "fraction_degraded": t.fraction_degraded,
        }),
    )?;
    write_loss_heatmap(arts, "tradeoff_heatmap.svg", "Per-sample loss change on a conflicting pair", &t)?;
    println!("tradeoff: {:.2}% of samples end above their initial loss", 100.0 * t.fraction_degraded);
    Ok(())
}

pub fn run(args: &EvaluateArgs) -> CliResult<Artifacts> {
    let all = [ExperimentArg::Selection, ExperimentArg::Stratified, ExperimentArg::Heldout, ExperimentArg::Tradeoff];
    let chosen: &[ExperimentArg] = if args.experiment.is_empty() { &all } else { &args.experiment };
    if chosen.contains(&ExperimentArg::Selection) && args.trials == 0 {
        return Err(CliError::usage("--trials must be positive"));
    }
    let mut arts = artifacts(&args.out, "evaluate", args)?;
    arts.seed("evaluate", args.seed);
    for e in all.iter().filter(|e| chosen.contains(e)) {
        match e {
            ExperimentArg::Selection => selection(&mut arts, args)?,
            ExperimentArg::Stratified => stratified(&mut arts, args)?,
            ExperimentArg::Heldout => heldout(&mut arts, args)?,
            ExperimentArg::Tradeoff => tradeoff(&mut arts, args)?,
        }
    }
    Ok(arts)
}
