use cardinal_core::data_io::{cardinal_to_wire, ordinal_to_wire, render_records, FieldMap};
use cardinal_core::experiments::simulate;

use super::{artifacts, indexed_maps, resolve_experiment};
use crate::cli::SimulateArgs;
use crate::error::CliResult;
use crate::files::RewardFile;
use crate::output::Artifacts;

pub fn run(args: &SimulateArgs) -> CliResult<Artifacts> {
    let mut arts = artifacts(&args.out, "simulate", args)?;
    let config = resolve_experiment(&args.experiment, &mut arts)?;
    let sim = simulate(&config)?;
    let maps = indexed_maps(sim.truth.shape())?;
    arts.json("ground_truth.json", &RewardFile::new("ground-truth", maps.clone(), &sim.truth, None))?;
    let fields = FieldMap::default();
    if let Some(card) = &sim.cardinal {
        arts.write("cardinal.jsonl", render_records(&cardinal_to_wire(card, Some(&maps))?, &fields).as_bytes())?;
    }
    arts.write("ordinal.jsonl", render_records(&ordinal_to_wire(&sim.ordinal, Some(&maps))?, &fields).as_bytes())?;
    arts.write("config.toml", config.to_toml()?.as_bytes())?;
    println!(
        "simulated {} comparisons on {} prompts x {} responses",
        sim.ordinal.records().len(),
        config.prompts,
        config.responses
    );
    Ok(arts)
}
