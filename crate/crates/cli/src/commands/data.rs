use cardinal_core::data_io::{self, render_records, LoadOptions, WireCardinal};
use cardinal_core::eval::wtp_distribution_stats;
use cardinal_core::reward_fit::normalize_per_labeler;
use serde::Serialize;

use super::{artifacts, field_map};
use crate::cli::{NormalizeArgs, SplitArgs, StatsArgs};
use crate::error::{CliError, CliResult};
use crate::files::{load_input, Input, KindArg};
use crate::output::Artifacts;
use crate::plots;

fn cardinal(arts: &mut Artifacts, path: &std::path::Path, fields: Option<&str>) -> CliResult<data_io::Loaded<WireCardinal>> {
    let opts = LoadOptions { fields: field_map(fields)?, ..LoadOptions::default() };
    match load_input(arts, path, KindArg::Cardinal, &opts)? {
        Input::Cardinal(l) => Ok(l),
        Input::Ordinal(_) => unreachable!(),
    }
}

#[derive(Serialize)]
struct HistogramRow {
    signed_wtp: f64,
}

pub fn stats(args: &StatsArgs) -> CliResult<Artifacts> {
    let mut arts = artifacts(&args.out, "stats", args)?;
    let loaded = cardinal(&mut arts, &args.data, args.fields.as_deref())?;
    let data = loaded.to_dataset()?;
    let st = wtp_distribution_stats(&data)?;
    let values: Vec<f64> = data.records().iter().map(|r| r.signed_wtp()).collect();
    let (mu, s) = (st.logistic_location, st.logistic_scale);
    let density = |x: f64| {
        let z = (x - mu) / s;
        let e = (-z.abs()).exp();
        e / (s * (1.0 + e).powi(2))
    };
    let svg = plots::histogram_with_density("Signed WTP with fitted logistic", &values, args.bins, density)?;
    arts.json("stats.json", &st)?;
    arts.csv("signed_wtp.csv", &values.iter().map(|&v| HistogramRow { signed_wtp: v }).collect::<Vec<_>>())?;
    arts.write("wtp_histogram.svg", svg.as_bytes())?;
    println!(
        "n {} mean {:.4} sd {:.4} excess kurtosis {:.4}; logistic({:.4}, {:.4}) KS {:.4}",
        st.n, st.mean, st.sd, st.excess_kurtosis, mu, s, st.ks
    );
    Ok(arts)
}

pub fn normalize(args: &NormalizeArgs) -> CliResult<Artifacts> {
    let mut arts = artifacts(&args.out, "normalize", args)?;
    let fields = field_map(args.fields.as_deref())?;
    let loaded = cardinal(&mut arts, &args.data, args.fields.as_deref())?;
    let normalized = normalize_per_labeler(&loaded.to_dataset()?)?;
    let records: Vec<WireCardinal> = loaded
        .records
        .iter()
        .zip(normalized.records())
        .map(|(w, r)| WireCardinal { wtp: r.wtp, ..w.clone() })
        .collect();
    arts.write("normalized.jsonl", render_records(&records, &fields).as_bytes())?;
    println!("normalized {} records", records.len());
    Ok(arts)
}

pub fn split(args: &SplitArgs) -> CliResult<Artifacts> {
    let mut arts = artifacts(&args.out, "split", args)?;
    arts.seed("split", args.seed);
    let fields = field_map(args.fields.as_deref())?;
    let opts = LoadOptions { fields: fields.clone(), ..LoadOptions::default() };
    let (train, hold) = match load_input(&mut arts, &args.data, args.kind, &opts)? {
        Input::Cardinal(l) => {
            let (t, h) = data_io::split(&l.records, args.fraction, args.seed)?;
            (render_records(&t, &fields), render_records(&h, &fields))
        }
        Input::Ordinal(l) => {
            let (t, h) = data_io::split(&l.records, args.fraction, args.seed)?;
            (render_records(&t, &fields), render_records(&h, &fields))
        }
    };
    if train.is_empty() {
        return Err(CliError::data("split left the training set empty"));
    }
    arts.write("train.jsonl", train.as_bytes())?;
    arts.write("holdout.jsonl", hold.as_bytes())?;
    println!("train {} / holdout {} records", train.lines().count(), hold.lines().count());
    Ok(arts)
}
