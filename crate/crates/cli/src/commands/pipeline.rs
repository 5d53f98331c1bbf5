use cardinal_core::data_io::{self, cardinal_to_wire, read_records, render_records, FieldMap, LoadOptions, WireCardinal};
use cardinal_core::eval::{margin_stratified_agreement, mean_utility_normalized, per_sample_loss_trace, tercile_edges, wtp_distribution_stats};
use cardinal_core::experiments::{simulate, validation_tuples};
use cardinal_core::model::{kl_to_reference, policy_utility};
use cardinal_core::policy_opt::{optimize_tabular_tracked, rlhf_select, RunStatus};
use cardinal_core::reward_fit::{fit_wtp, heldout_margin_mse, BtFitConfig};
use cardinal_core::{DatasetRef, Error, FeasibleSet, LossKind, LossSpec, Policy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{artifacts, fit_bt_lenient, indexed_maps, resolve_experiment, sample_rows, spread, trace_rows, write_loss_heatmap, write_utility_plot};
use crate::cli::PipelineArgs;
use crate::error::{CliError, CliResult};
use crate::files::{PolicyFile, RewardFile};
use crate::output::Artifacts;
use crate::plots;

/// Offset separating the validation stream from the simulation seed.
const VALIDATION_SEED_OFFSET: u64 = 0x5EED;

#[derive(Serialize)]
struct MethodRow {
    method: String,
    utility: f64,
    normalized_utility: f64,
    kl_to_reference: f64,
    agreement_low: f64,
    agreement_mid: f64,
    agreement_high: f64,
}

#[derive(Serialize)]
struct FitRow {
    method: &'static str,
    loss: f64,
    iterations: usize,
    heldout_margin_mse: f64,
}

pub fn run(args: &PipelineArgs) -> CliResult<Artifacts> {
    let mut arts = artifacts(&args.out, "pipeline", args)?;
    let config = resolve_experiment(&args.experiment, &mut arts)?;
    if args.validation == 0 {
        return Err(CliError::usage("--validation must be positive"));
    }

    // simulate
    let sim = simulate(&config)?;
    let card = sim.cardinal.as_ref().ok_or_else(|| CliError::usage("the pipeline needs WTP annotators"))?;
    let maps = indexed_maps(sim.truth.shape())?;
    let fields = FieldMap::default();
    arts.json("ground_truth.json", &RewardFile::new("ground-truth", maps.clone(), &sim.truth, None))?;
    let wire = cardinal_to_wire(card, Some(&maps))?;
    arts.write("cardinal.jsonl", render_records(&wire, &fields).as_bytes())?;

    // split, then reload through the file format
    let (train_w, hold_w) = data_io::split(&wire, config.holdout_fraction, config.seed)?;
    let train_text = render_records(&train_w, &fields);
    let hold_text = render_records(&hold_w, &fields);
    arts.write("train.jsonl", train_text.as_bytes())?;
    arts.write("holdout.jsonl", hold_text.as_bytes())?;
    let opts = LoadOptions { known: Some(maps.clone()), ..LoadOptions::default() };
    let train = read_records::<WireCardinal, _>(train_text.as_bytes(), &opts)?.to_dataset()?;
    let hold = read_records::<WireCardinal, _>(hold_text.as_bytes(), &opts)?.to_dataset()?;
    let train_ord = train.to_ordinal();

    // fit
    let wtp = fit_wtp(&train)?;
    let (bt, _) = fit_bt_lenient(&mut arts, &train_ord, config.bt_l2, BtFitConfig::default())?;
    let fits = [
        FitRow { method: "wtp", loss: wtp.meta.loss, iterations: wtp.meta.iterations, heldout_margin_mse: heldout_margin_mse(&wtp, &hold)? },
        FitRow { method: "bt", loss: bt.meta.loss, iterations: bt.meta.iterations, heldout_margin_mse: heldout_margin_mse(&bt, &hold)? },
    ];
    arts.json("reward_wtp.json", &RewardFile::new("wtp", maps.clone(), &wtp.table, Some(wtp.meta.clone())))?;
    arts.json("reward_bt.json", &RewardFile::new("bt", maps.clone(), &bt.table, Some(bt.meta.clone())))?;
    arts.csv("fits.csv", &fits)?;

    // optimize
    let reference = Policy::uniform(sim.truth.shape());
    let mut runs = Vec::new();
    for (kind, data) in [(LossKind::Dpo, DatasetRef::Ordinal(&train_ord)), (LossKind::Cdpo, DatasetRef::Cardinal(&train))] {
        let run = optimize_tabular_tracked(&reference, data, LossSpec::new(kind, config.beta)?, &config.optimizer, Some(&sim.truth))?;
        if run.status != RunStatus::Converged {
            arts.warn(format!("{kind:?} optimizer stopped with status {:?} after {} iterations", run.status, run.iterations));
        }
        let name = format!("{kind:?}").to_lowercase();
        arts.json(&format!("policy_{name}.json"), &PolicyFile::new(maps.clone(), &run.policy))?;
        arts.csv(&format!("trace_{name}.csv"), &trace_rows(&run.trace))?;
        let n = run.sample_losses.first().map_or(0, Vec::len);
        let samples = per_sample_loss_trace(&run, Some(&spread(n, 60)))?;
        arts.csv(&format!("per_sample_loss_{name}.csv"), &sample_rows(&samples))?;
        write_loss_heatmap(&mut arts, &format!("loss_heatmap_{name}.svg"), &format!("{kind:?}: per-sample loss change"), &samples)?;
        runs.push((kind, run));
    }
    write_utility_plot(
        &mut arts,
        "utility_vs_steps.svg",
        &runs.iter().map(|(k, r)| (if *k == LossKind::Dpo { "DPO" } else { "CDPO" }, r.trace.as_slice())).collect::<Vec<_>>(),
    )?;
    let rlhf: Vec<(String, Policy)> = [("rlhf-wtp", &wtp), ("rlhf-bt", &bt)]
        .into_iter()
        .map(|(name, fit)| {
            let feasible = FeasibleSet::KlBall { reference: reference.clone(), beta: config.beta };
            Ok((name.to_string(), rlhf_select(fit, &feasible, &config.optimizer)?))
        })
        .collect::<Result<_, Error>>()?;

    // evaluate
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(VALIDATION_SEED_OFFSET));
    arts.seed("validation", config.seed.wrapping_add(VALIDATION_SEED_OFFSET));
    let validation = validation_tuples(&mut rng, &sim.truth, args.validation);
    let edges = match &config.bin_edges {
        Some(e) => e.clone(),
        None => tercile_edges(&validation)?,
    };
    let policies: Vec<(String, &Policy)> = runs
        .iter()
        .map(|(k, r)| (format!("{k:?}").to_lowercase(), &r.policy))
        .chain(rlhf.iter().map(|(n, p)| (n.clone(), p)))
        .collect();
    let mut rows = Vec::new();
    let mut bars = Vec::new();
    for (name, policy) in &policies {
        let agreement = margin_stratified_agreement(policy, &reference, config.beta, &validation, &edges)?;
        let rate = |i: usize| agreement.bins.get(i).map_or(f64::NAN, |b| b.rate);
        rows.push(MethodRow {
            method: name.clone(),
            utility: policy_utility(policy, &sim.truth, None)?,
            normalized_utility: mean_utility_normalized(policy, &reference, &sim.truth)?,
            kl_to_reference: kl_to_reference(policy, &reference)?,
            agreement_low: rate(0),
            agreement_mid: rate(1),
            agreement_high: rate(agreement.bins.len().saturating_sub(1)),
        });
        bars.push((name.as_str(), agreement.bins.iter().map(|b| b.rate).collect::<Vec<_>>()));
    }
    arts.csv("evaluation.csv", &rows)?;
    let labels: Vec<String> = (0..edges.len() - 1).map(|i| format!("[{:.2}, {:.2})", edges[i], edges[i + 1])).collect();
    let svg = plots::grouped_bars("Implicit-reward sign agreement by |true margin|", "agreement", &labels, &bars)?;
    arts.write("stratified_bars.svg", svg.as_bytes())?;

    let st = wtp_distribution_stats(card)?;
    let values: Vec<f64> = card.records().iter().map(|r| r.signed_wtp()).collect();
    let (mu, s) = (st.logistic_location, st.logistic_scale);
    let svg = plots::histogram_with_density("Signed WTP with fitted logistic", &values, 40, |x| {
        let e = (-((x - mu) / s).abs()).exp();
        e / (s * (1.0 + e).powi(2))
    })?;
    arts.write("wtp_histogram.svg", svg.as_bytes())?;
    arts.json("wtp_stats.json", &st)?;

    for r in &rows {
        println!("{:<9} normalized utility {:+.4}  top-bin agreement {:.4}", r.method, r.normalized_utility, r.agreement_high);
    }
    Ok(arts)
}
