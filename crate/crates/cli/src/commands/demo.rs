use cardinal_core::impossibility::{
    build_counterexample_replicated, demonstrate_cardinal, demonstrate_impossibility, mixture_selector, CardinalReport, Coverage,
    ImpossibilityReport,
};
use cardinal_core::{DatasetRef, Error, LossSpec, OptimizerConfig};
use serde::Serialize;

use super::artifacts;
use crate::cli::DemoArgs;
use crate::error::{CliError, CliResult};
use crate::output::Artifacts;

#[derive(Serialize)]
struct DemoReport {
    ordinal: ImpossibilityReport,
    cardinal: CardinalReport,
}

fn parse_margins(text: &str) -> CliResult<[f64; 4]> {
    let v: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::usage(format!("--margins: {e}")))?;
    v.try_into().map_err(|v: Vec<f64>| CliError::usage(format!("--margins needs 4 values, got {}", v.len())))
}

pub fn run(args: &DemoArgs) -> CliResult<Artifacts> {
    let [m1_a, m2_a, m1_b, m2_b] = parse_margins(&args.margins)?;
    let instance = build_counterexample_replicated(m1_a, m2_a, m1_b, m2_b, args.copies).map_err(|e| match e {
        Error::Construction(_) | Error::InstanceInvariant(_) | Error::Shape(_) => CliError::usage(e.to_string()),
        e => e.into(),
    })?;
    let mut arts = artifacts(&args.out, "demo-impossibility", args)?;
    let coverage = match args.sample {
        Some(n) => {
            arts.seed("coverage", args.seed);
            Coverage::Sampled { seed: args.seed, n }
        }
        None => Coverage::Full,
    };
    let config = OptimizerConfig::default();
    let selector = mixture_selector(&instance, LossSpec::new(args.loss.into(), args.beta)?, config);
    let ordinal = demonstrate_impossibility(|d| selector(DatasetRef::Ordinal(d)), &instance, coverage)?;
    let cardinal = demonstrate_cardinal(&instance, coverage, LossSpec::cdpo(args.beta)?, &config)?;

    println!(
        "ordinal datasets identical under both rewards: {} ({} records, sha256 {})",
        ordinal.datasets_identical, ordinal.records, ordinal.dataset_sha256
    );
    for b in &ordinal.branches {
        println!(
            "  branch {:?}: optimal {:?}, selected {:?}, utility gap {:.6}, regret {:.6}{}",
            b.branch,
            b.optimal,
            ordinal.selected,
            b.utility_gap,
            b.regret,
            if b.suboptimal { "  <- suboptimal" } else { "" }
        );
    }
    println!("cardinal data differs across rewards: {}; correct on both: {}", cardinal.datasets_differ, cardinal.correct_on_both);
    for b in &cardinal.branches {
        println!("  branch {:?}: theta {:.6}, selected {:?}", b.branch, b.theta, b.selected);
    }
    arts.json("report.json", &DemoReport { ordinal, cardinal })?;
    Ok(arts)
}
