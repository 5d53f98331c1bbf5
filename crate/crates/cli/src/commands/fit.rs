use cardinal_core::data_io::{read_records, LoadOptions, WireCardinal};
use cardinal_core::reward_fit::{fit_wtp, heldout_margin_mse, normalize_per_labeler, BtFitConfig};
use cardinal_core::{CardinalDataset, Comparison};
use serde::Serialize;

use super::{artifacts, field_map, fit_bt_lenient};
use crate::cli::{FitArgs, FitMethod};
use crate::error::{CliError, CliResult};
use crate::files::{load_input, Input, RewardFile};
use crate::output::Artifacts;

#[derive(Serialize)]
struct FitSummary {
    method: FitMethod,
    records: usize,
    prompts: usize,
    responses: usize,
    loss: f64,
    iterations: usize,
    converged: bool,
    normalized: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    heldout_margin_mse: Option<f64>,
    /// Mean squared difference between fitted and true margins over every
    /// ordered pair.
    #[serde(skip_serializing_if = "Option::is_none")]
    truth_margin_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    truth_sign_agreement: Option<f64>,
}

pub fn run(args: &FitArgs) -> CliResult<Artifacts> {
    let mut arts = artifacts(&args.out, "fit-reward", args)?;
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
    let maps = input.maps().clone();
    let cardinal: Option<CardinalDataset> = match &input {
        Input::Cardinal(l) => Some(l.to_dataset()?),
        Input::Ordinal(_) => None,
    };
    if args.normalize && args.method == FitMethod::Bt {
        arts.warn("--normalize has no effect on a Bradley-Terry fit");
    }
    let (fit, converged) = match args.method {
        FitMethod::Wtp => {
            let card = cardinal.clone().ok_or_else(|| CliError::usage("WTP fitting needs a cardinal dataset"))?;
            let card = if args.normalize { normalize_per_labeler(&card)? } else { card };
            (fit_wtp(&card)?, true)
        }
        FitMethod::Bt => {
            let ord = match (&input, &cardinal) {
                (Input::Ordinal(l), _) => l.to_dataset()?,
                (_, Some(c)) => c.to_ordinal(),
                _ => unreachable!(),
            };
            fit_bt_lenient(&mut arts, &ord, args.l2, BtFitConfig { max_iter: args.max_iter, ..BtFitConfig::default() })?
        }
    };

    let heldout_margin_mse = match &args.holdout {
        Some(path) => {
            let bytes = arts.input(path)?;
            let known = LoadOptions { known: Some(maps.clone()), ..opts.clone() };
            let hold = read_records::<WireCardinal, _>(bytes.as_slice(), &known)
                .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
            if hold.maps != maps {
                return Err(CliError::data("holdout mentions prompts or responses absent from the training data"));
            }
            Some(heldout_margin_mse(&fit, &hold.to_dataset()?)?)
        }
        None => None,
    };
    let (truth_margin_mse, truth_sign_agreement) = match &truth {
        Some(t) => {
            let table = t.table()?;
            let pairs = Comparison::all_pairs(table.shape());
            let n = pairs.len().max(1) as f64;
            let mut se = 0.0;
            let mut agree = 0usize;
            for c in &pairs {
                let (f, g) = (fit.margin(c.prompt, c.first, c.second), table.margin(c.prompt, c.first, c.second));
                se += (f - g).powi(2);
                agree += usize::from(f.signum() == g.signum());
            }
            (Some(se / n), Some(agree as f64 / n))
        }
        None => (None, None),
    };

    let shape = fit.table.shape();
    let summary = FitSummary {
        method: args.method,
        records: input.len(),
        prompts: shape.prompts,
        responses: shape.responses,
        loss: fit.meta.loss,
        iterations: fit.meta.iterations,
        converged,
        normalized: args.normalize && args.method == FitMethod::Wtp,
        heldout_margin_mse,
        truth_margin_mse,
        truth_sign_agreement,
    };
    let source = match args.method {
        FitMethod::Bt => "bt",
        FitMethod::Wtp => "wtp",
    };
    arts.json("reward.json", &RewardFile::new(source, maps, &fit.table, Some(fit.meta.clone())))?;
    arts.json("fit.json", &summary)?;
    println!("fitted {source} reward on {} records (loss {:.6})", summary.records, summary.loss);
    Ok(arts)
}
