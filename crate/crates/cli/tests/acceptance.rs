//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use cardinal_core::annotator::{generate_cardinal, AnnotatorKind, AnnotatorModel, Assignment};
use cardinal_core::dataset::{CardinalRecord, OrdinalRecord};
use cardinal_core::eval::{distribution_stats, wtp_distribution_stats};
use cardinal_core::experiments::{
    conflicting_pair_trace, heldout_comparison, logistic_sample, peaked_laplace_sample, selection_experiment, stratified_experiment,
    HeldoutConfig, PeakedLaplace, SelectionConfig, StratifiedConfig,
};
use cardinal_core::impossibility::{build_counterexample_replicated, demonstrate_impossibility, mixture_selector, Branch, Coverage};
use cardinal_core::policy_opt::{argmax_over_finite, cdpo_loss, dpo_loss, optimize_tabular, optimize_theta, rlhf_select, PolicyParams};
use cardinal_core::reward_fit::{bt_nll_and_gradient, fit_wtp};
use cardinal_core::{
    CardinalDataset, Comparison, DatasetRef, FeasibleSet, LossKind, LossSpec, OptimizerConfig, OrdinalDataset, Policy, RewardTable,
    ScaleTag, Shape, Side, Table,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn random_reward(rng: &mut impl Rng, shape: Shape, scale: f64) -> RewardTable {
    let rows: Vec<Vec<f64>> = (0..shape.prompts)
        .map(|_| (0..shape.responses).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect())
        .collect();
    RewardTable::from_rows(&rows).unwrap()
}

fn random_policy(rng: &mut impl Rng, shape: Shape) -> Policy {
    let rows: Vec<Vec<f64>> = (0..shape.prompts)
        .map(|_| {
            let w: Vec<f64> = (0..shape.responses).map(|_| 0.05 + rng.random::<f64>()).collect();
            let s: f64 = w.iter().sum();
            w.iter().map(|v| v / s).collect()
        })
        .collect();
    Policy::from_rows(&rows).unwrap()
}

/// Direct double sum, independent of the library's utility routine.
fn utility(p: &Policy, r: &RewardTable) -> f64 {
    let s = p.shape();
    (0..s.prompts).map(|x| (0..s.responses).map(|y| p.prob(x, y) * r.get(x, y)).sum::<f64>()).sum()
}

fn exact_wtp(truth: &RewardTable, reqs: &[Comparison]) -> CardinalDataset {
    generate_cardinal(&[AnnotatorModel::new("exact", AnnotatorKind::ExactWtp)], reqs, truth, Assignment::RoundRobin).unwrap()
}

// ---------------------------------------------------------------------------

fn impossibility() -> Check {
    let inst = build_counterexample_replicated(100.0, 0.2, 0.2, 100.0, 2).map_err(e)?;
    let config = OptimizerConfig::default();
    let select = mixture_selector(&inst, LossSpec::dpo(0.1).map_err(e)?, config);
    let rep = demonstrate_impossibility(|d| select(DatasetRef::Ordinal(d)), &inst, Coverage::Full).map_err(e)?;
    ensure(rep.datasets_identical, "ordinal datasets differ")?;
    ensure(rep.failing_branches.len() == 1, format!("failing branches {:?}", rep.failing_branches))?;
    let fail = rep.branches.iter().find(|b| b.suboptimal).unwrap();
    // One prompt won by 100 against two lost by 0.2 each.
    let oracle_gap = 100.0 - 2.0 * 0.2;
    ensure(fail.branch == Branch::A, "expected the failure under reward A")?;
    ensure((fail.regret - oracle_gap).abs() < 1e-9, format!("regret {} vs {oracle_gap}", fail.regret))?;
    ensure((fail.utility_gap - oracle_gap).abs() < 1e-9, format!("gap {}", fail.utility_gap))?;
    Ok(format!("identical datasets ({} records), one failing branch, gap {:.12}", rep.records, fail.utility_gap))
}

fn sufficiency() -> Check {
    let shape = Shape::new(5, 4).unwrap();
    let mut hits = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = random_reward(&mut rng, shape, 5.0);
        let data = exact_wtp(&truth, &Comparison::all_pairs(shape));
        let fitted = fit_wtp(&data).map_err(e)?;
        let candidates: Vec<Policy> = (0..100).map(|_| random_policy(&mut rng, shape)).collect();
        let chosen = rlhf_select(&fitted, &FeasibleSet::Explicit(candidates.clone()), &OptimizerConfig::default()).map_err(e)?;
        let best = (0..candidates.len())
            .max_by(|&a, &b| utility(&candidates[a], &truth).total_cmp(&utility(&candidates[b], &truth)))
            .unwrap();
        hits += usize::from(chosen == candidates[best]);
    }
    ensure(hits == 100, format!("{hits}/100"))?;
    Ok(format!("{hits}/100 instances select the true-utility argmax"))
}

fn equivalence() -> Check {
    let shape = Shape::new(4, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let reference = random_policy(&mut rng, shape);
    let truth = random_reward(&mut rng, shape, 1.0);
    let data = exact_wtp(&truth, &Comparison::all_pairs(shape));
    let config = OptimizerConfig { standardize_wtp: false, max_iter: 20_000, tolerance: 1e-12, ..OptimizerConfig::default() };
    let mut worst = Vec::new();
    for beta in [0.01, 0.1, 0.25] {
        let run = optimize_tabular(&reference, DatasetRef::Cardinal(&data), LossSpec::cdpo(beta).map_err(e)?, &config).map_err(e)?;
        let mut max_tv: f64 = 0.0;
        for x in 0..shape.prompts {
            // pi*(y) proportional to pi_ref(y) exp(r(y) / beta), via log-sum-exp.
            let logits: Vec<f64> = (0..shape.responses).map(|y| reference.prob(x, y).ln() + truth.get(x, y) / beta).collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let tv: f64 = (0..shape.responses).map(|y| ((logits[y] - m).exp() / z - run.policy.prob(x, y)).abs()).sum::<f64>() / 2.0;
            max_tv = max_tv.max(tv);
        }
        ensure(max_tv < 1e-3, format!("beta {beta}: TV {max_tv:.3e}"))?;
        worst.push(format!("beta {beta}: {max_tv:.1e}"));
    }
    Ok(format!("max per-prompt TV {}", worst.join(", ")))
}

fn affine_invariance() -> Check {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let shape = Shape::new(rng.random_range(1..6), rng.random_range(2..6)).unwrap();
        let r = random_reward(&mut rng, shape, 3.0);
        let policies: Vec<Policy> = (0..rng.random_range(2..30)).map(|_| random_policy(&mut rng, shape)).collect();
        let a = 10.0 * (1.0 - rng.random::<f64>());
        let b: Vec<f64> = (0..shape.prompts).map(|_| rng.random_range(-5.0..=5.0)).collect();
        let rows: Vec<Vec<f64>> = (0..shape.prompts).map(|x| r.row(x).iter().map(|v| a * v + b[x]).collect()).collect();
        let moved = RewardTable::from_rows(&rows).unwrap();
        let (i, _) = argmax_over_finite(&policies, &r).map_err(e)?;
        let (j, _) = argmax_over_finite(&policies, &moved).map_err(e)?;
        ensure(i == j, format!("seed {seed}: index {i} became {j} (a = {a})"))?;
    }
    Ok("100/100 instances keep the selected index".into())
}

/// Sup-norm relative error between an analytic and a central-difference
/// gradient.
fn grad_error(x: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 1e-8;
    let mut p = x.to_vec();
    for i in 0..x.len() {
        p[i] = x[i] + h;
        let up = f(&p);
        p[i] = x[i] - h;
        let down = f(&p);
        p[i] = x[i];
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((fd - analytic[i]).abs());
        scale = scale.max(fd.abs()).max(analytic[i].abs());
    }
    worst / scale
}

fn random_pairs(rng: &mut impl Rng, shape: Shape, n: usize) -> Vec<Comparison> {
    (0..n)
        .map(|_| {
            let x = rng.random_range(0..shape.prompts);
            let a = rng.random_range(0..shape.responses);
            let b = (a + rng.random_range(1..shape.responses)) % shape.responses;
            Comparison { prompt: x, first: a, second: b }
        })
        .collect()
}

fn gradients() -> Check {
    let mut worst = BTreeMap::new();
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let shape = Shape::new(rng.random_range(1..5), rng.random_range(2..6)).unwrap();
        let n = rng.random_range(1..40);
        let pairs = random_pairs(&mut rng, shape, n);
        let side = |rng: &mut ChaCha8Rng| if rng.random::<bool>() { Side::First } else { Side::Second };
        let ord = OrdinalDataset::new(
            shape,
            pairs.iter().map(|&c| OrdinalRecord { comparison: c, winner: side(&mut rng), labeler: "l".into() }).collect(),
        )
        .map_err(e)?;
        let card = CardinalDataset::new(
            shape,
            pairs
                .iter()
                .map(|&c| CardinalRecord {
                    comparison: c,
                    preferred: side(&mut rng),
                    wtp: 3.0 * rng.random::<f64>(),
                    labeler: "l".into(),
                    scale_tag: ScaleTag::Money,
                })
                .collect(),
        )
        .map_err(e)?;
        let reference = random_policy(&mut rng, shape);
        let beta = rng.random_range(0.05..1.0);
        let l2 = rng.random_range(0.0..0.5);
        let point: Vec<f64> = (0..shape.cells()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let table = |v: &[f64]| Table::from_flat(shape, v.to_vec()).unwrap();

        let (_, g) = bt_nll_and_gradient(&RewardTable::new(table(&point)).unwrap(), &ord, l2).map_err(e)?;
        let bt = grad_error(&point, g.as_slice(), |v| bt_nll_and_gradient(&RewardTable::new(table(v)).unwrap(), &ord, l2).unwrap().0);
        let (_, g) = dpo_loss(PolicyParams::Logits(&table(&point)), &reference, &ord, beta).map_err(e)?;
        let dpo = grad_error(&point, &g, |v| dpo_loss(PolicyParams::Logits(&table(v)), &reference, &ord, beta).unwrap().0);
        let (_, g) = cdpo_loss(PolicyParams::Logits(&table(&point)), &reference, &card, beta).map_err(e)?;
        let cdpo = grad_error(&point, &g, |v| cdpo_loss(PolicyParams::Logits(&table(v)), &reference, &card, beta).unwrap().0);
        for (name, err) in [("bt_nll", bt), ("dpo", dpo), ("cdpo", cdpo)] {
            ensure(err < 1e-4, format!("{name} seed {seed}: relative error {err:.3e}"))?;
            let w = worst.entry(name).or_insert(0.0f64);
            *w = w.max(err);
        }
    }
    Ok(format!("worst relative error over 50 instances each: {}", worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ")))
}

fn least_squares() -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let shape = Shape::new(rng.random_range(1..5), rng.random_range(2..6)).unwrap();
        // A path per prompt keeps every prompt's comparison graph connected.
        let mut pairs: Vec<Comparison> = (0..shape.prompts)
            .flat_map(|x| (1..shape.responses).map(move |y| Comparison { prompt: x, first: y - 1, second: y }))
            .collect();
        let target = rng.random_range(pairs.len()..=200);
        pairs.extend(random_pairs(&mut rng, shape, target - pairs.len()));
        let records: Vec<CardinalRecord> = pairs
            .iter()
            .map(|&c| CardinalRecord {
                comparison: c,
                preferred: if rng.random::<bool>() { Side::First } else { Side::Second },
                wtp: 5.0 * rng.random::<f64>(),
                labeler: "l".into(),
                scale_tag: ScaleTag::Money,
            })
            .collect();
        let data = CardinalDataset::new(shape, records.clone()).map_err(e)?;
        let fit = fit_wtp(&data).map_err(e)?;

        // Dense normal equations over every cell, one gauge row per prompt.
        let cells = shape.cells();
        let mut a = DMatrix::<f64>::zeros(records.len(), cells);
        let mut s = DVector::<f64>::zeros(records.len());
        for (i, r) in records.iter().enumerate() {
            let c = r.comparison;
            a[(i, c.prompt * shape.responses + c.second)] += 1.0;
            a[(i, c.prompt * shape.responses + c.first)] -= 1.0;
            s[i] = if r.preferred == Side::Second { r.wtp } else { -r.wtp };
        }
        let mut normal = a.transpose() * &a;
        let rhs = a.transpose() * &s;
        for x in 0..shape.prompts {
            for i in 0..shape.responses {
                for j in 0..shape.responses {
                    normal[(x * shape.responses + i, x * shape.responses + j)] += 1.0;
                }
            }
        }
        let oracle = normal.lu().solve(&rhs).ok_or("singular normal equations")?;
        for c in Comparison::all_pairs(shape) {
            let o = oracle[c.prompt * shape.responses + c.second] - oracle[c.prompt * shape.responses + c.first];
            let diff = (fit.margin(c.prompt, c.first, c.second) - o).abs();
            worst = worst.max(diff);
            ensure(diff < 1e-8, format!("seed {seed}: margin differs by {diff:.3e}"))?;
        }
    }
    Ok(format!("20 instances, worst margin difference {worst:.1e}"))
}

fn figure_one() -> Check {
    let inst = build_counterexample_replicated(100.0, 0.2, 0.2, 100.0, 2).map_err(e)?;
    let shape = inst.shape();
    let reference = inst.reference();
    let mk = |x: usize, side: Side, w: f64| CardinalRecord {
        comparison: Comparison { prompt: x, first: 0, second: 1 },
        preferred: side,
        wtp: w,
        labeler: "l".into(),
        scale_tag: ScaleTag::Money,
    };
    let card =
        CardinalDataset::new(shape, vec![mk(0, Side::First, 100.0), mk(1, Side::Second, 0.2), mk(2, Side::Second, 0.2)]).map_err(e)?;
    let ord = card.to_ordinal();
    let config = OptimizerConfig::default();
    let dpo = optimize_theta(inst.family(), LossSpec::dpo(0.1).map_err(e)?, DatasetRef::Ordinal(&ord), &reference, &config).map_err(e)?;
    let cdpo = optimize_theta(inst.family(), LossSpec::cdpo(0.1).map_err(e)?, DatasetRef::Cardinal(&card), &reference, &config).map_err(e)?;
    ensure(dpo.theta < 0.5, format!("DPO theta {}", dpo.theta))?;
    ensure(cdpo.theta > 0.5, format!("CDPO theta {}", cdpo.theta))?;
    Ok(format!("DPO theta {:.4} (model B), CDPO theta {:.4} (model A)", dpo.theta, cdpo.theta))
}

fn selection() -> Check {
    let exp = selection_experiment(&SelectionConfig { trials: 400, ..SelectionConfig::default() }).map_err(e)?;
    let r = &exp.report;
    let (c, d) = (r.overall_rate(LossKind::Cdpo).unwrap(), r.overall_rate(LossKind::Dpo).unwrap());
    let (cd, dd) = (r.disagreement_rate(LossKind::Cdpo).unwrap_or(0.0), r.disagreement_rate(LossKind::Dpo).unwrap_or(0.0));
    ensure(c > d, format!("overall CDPO {c:.4} <= DPO {d:.4}"))?;
    ensure(cd - dd >= 0.30, format!("disagreement gap {:.4}", cd - dd))?;
    Ok(format!(
        "overall CDPO {:.2}% vs DPO {:.2}%; disagreement ({} trials) CDPO {:.2}% vs DPO {:.2}% [human data: 90.27% vs 83.29%; 91.67% vs 33.33%]",
        100.0 * c,
        100.0 * d,
        r.disagreement_trials,
        100.0 * cd,
        100.0 * dd
    ))
}

fn stratification() -> Check {
    let exp = stratified_experiment(&StratifiedConfig { validation_size: 1000, ..StratifiedConfig::default() }).map_err(e)?;
    let top = |k| exp.method(k).and_then(|m| m.agreement.bins.last()).map(|b| b.rate).unwrap();
    let n: usize = exp.method(LossKind::Cdpo).unwrap().agreement.bins.iter().map(|b| b.count).sum();
    ensure(exp.edges.len() == 4, "expected three bins")?;
    ensure(top(LossKind::Cdpo) >= top(LossKind::Dpo), format!("top bin CDPO {:.4} < DPO {:.4}", top(LossKind::Cdpo), top(LossKind::Dpo)))?;
    Ok(format!("top tercile agreement CDPO {:.4} vs DPO {:.4} ({n} binned tuples)", top(LossKind::Cdpo), top(LossKind::Dpo)))
}

fn heldout() -> Check {
    let mut wins = 0;
    for seed in 0..100 {
        let r = heldout_comparison(&HeldoutConfig { seed, ..HeldoutConfig::default() }).map_err(e)?;
        wins += usize::from(r.wtp_mse < r.bt_mse);
    }
    ensure(wins >= 95, format!("{wins}/100"))?;
    Ok(format!("WTP held-out margin MSE below Bradley-Terry in {wins}/100 runs"))
}

fn tradeoff() -> Check {
    let t = conflicting_pair_trace(2, 0.1, &OptimizerConfig { max_iter: 300, ..OptimizerConfig::default() }).map_err(e)?;
    let last = t.deltas.last().ok_or("empty trace")?;
    let worse = last.iter().filter(|d| **d > 0.0).count();
    let (m0, m1) = (t.mean_loss[0], *t.mean_loss.last().unwrap());
    ensure(worse >= 1, "no sample ends above its initial loss")?;
    ensure(m1 < m0, format!("mean loss {m0} -> {m1}"))?;
    Ok(format!("{worse}/{} samples end above initialization; mean loss {m0:.4} -> {m1:.4}", last.len()))
}

fn as_dataset(values: &[f64]) -> CardinalDataset {
    let shape = Shape::new(1, 2).unwrap();
    let records = values
        .iter()
        .map(|&v| CardinalRecord {
            comparison: Comparison { prompt: 0, first: 0, second: 1 },
            preferred: if v >= 0.0 { Side::Second } else { Side::First },
            wtp: v.abs(),
            labeler: "l".into(),
            scale_tag: ScaleTag::Money,
        })
        .collect();
    CardinalDataset::new(shape, records).unwrap()
}

fn distribution() -> Check {
    let null = wtp_distribution_stats(&as_dataset(&logistic_sample(1, 100_000, 0.0, 1.0))).map_err(e)?;
    let peaked = wtp_distribution_stats(&as_dataset(&peaked_laplace_sample(2, 100_000, PeakedLaplace::default()))).map_err(e)?;
    ensure(null.ks < 0.01, format!("null KS {}", null.ks))?;
    ensure(peaked.ks > 0.05, format!("power KS {}", peaked.ks))?;
    let direct = distribution_stats(&logistic_sample(1, 100_000, 0.0, 1.0)).map_err(e)?;
    ensure((direct.ks - null.ks).abs() < 1e-12, "signing the sample changed the statistic")?;
    Ok(format!("KS {:.4} on logistic samples, {:.4} on the peaked mixture", null.ks, peaked.ks))
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|f| {
            let p = f.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect()
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(e)?;
    let mut outputs = Vec::new();
    for run in ["first", "second"] {
        let out = tmp.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_cardinal"))
            .args(["pipeline", "--seed", "42", "--out"])
            .arg(&out)
            .output()
            .map_err(e)?;
        ensure(status.status.success(), String::from_utf8_lossy(&status.stderr).into_owned())?;
        outputs.push(files(&out));
    }
    ensure(outputs[0].len() > 10, "too few artifacts")?;
    let names: Vec<_> = outputs[0].keys().collect();
    ensure(names == outputs[1].keys().collect::<Vec<_>>(), "artifact lists differ")?;
    for (name, bytes) in &outputs[0] {
        ensure(outputs[1][name] == *bytes, format!("{name} differs between runs"))?;
    }
    Ok(format!("{} artifacts byte-identical across two seeded runs", outputs[0].len()))
}

type Criterion = (&'static str, fn() -> Check, Option<Duration>);

fn main() {
    let criteria: [Criterion; 13] = [
        ("impossibility demonstration", impossibility, Some(Duration::from_secs(1))),
        ("sufficiency of exact WTP", sufficiency, Some(Duration::from_secs(10))),
        ("CDPO matches the KL-regularized optimum", equivalence, Some(Duration::from_secs(60))),
        ("affine invariance of selection", affine_invariance, None),
        ("gradient correctness", gradients, None),
        ("least-squares oracle", least_squares, None),
        ("three-prompt mixture scenario", figure_one, None),
        ("select-optimal rate", selection, Some(Duration::from_secs(300))),
        ("margin stratification", stratification, None),
        ("held-out margin MSE", heldout, None),
        ("per-sample tradeoff", tradeoff, None),
        ("distribution diagnostics", distribution, None),
        ("pipeline determinism", determinism, None),
    ];
    let mut failed = 0;
    for (name, check, budget) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let outcome = match (outcome, budget) {
            (Ok(_), Some(b)) if elapsed > b => Err(format!("took {elapsed:.2?}, budget {b:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{elapsed:.2?}]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail} [{elapsed:.2?}]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 13 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
