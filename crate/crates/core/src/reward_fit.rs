//! Reward estimation from preference data.
//!
//! Two estimators over the same `|X| x |Y|` table:
//!
//! * [`fit_bt`]: Bradley-Terry maximum likelihood on ordinal labels, with a
//!   ridge term, by gradient descent.
//! * [`fit_wtp`]: least squares on willingness-to-pay margins,
//!   `min_r sum_i (r(x_i, y'_i) - r(x_i, y_i) - w_i)^2`, solved exactly.
//!
//! Rewards are identified only up to a per-prompt additive constant, so
//! every fitted table is gauge-fixed to zero mean in each prompt row.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{CardinalDataset, CardinalRecord, OrdinalDataset, Side};
use crate::error::{Error, Result};
use crate::model::{RewardTable, Table};
use crate::numeric::{log_sigmoid, population_sd, sigmoid};

pub const DEFAULT_BT_L2: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Gauge {
    ZeroMeanPerPrompt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub method: String,
    pub loss: f64,
    pub iterations: usize,
    pub l2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedReward {
    pub table: RewardTable,
    pub gauge: Gauge,
    pub meta: FitMeta,
}

impl FittedReward {
    /// `r(x, second) - r(x, first)` under the fitted table.
    pub fn margin(&self, x: usize, first: usize, second: usize) -> f64 {
        self.table.margin(x, first, second)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BtFitConfig {
    pub max_iter: usize,
    /// Stop once the gradient sup-norm drops below this.
    pub tolerance: f64,
}

impl Default for BtFitConfig {
    fn default() -> Self {
        Self {
            max_iter: 50_000,
            tolerance: 1e-8,
        }
    }
}

/// Negative Bradley-Terry log-likelihood plus `l2 * ||r||^2`, and its
/// exact gradient.
pub fn bt_nll_and_gradient(table: &RewardTable, data: &OrdinalDataset, l2: f64) -> Result<(f64, Table)> {
    table.shape().expect(data.shape())?;
    let mut grad = Table::filled(table.shape(), 0.0);
    let mut loss = 0.0;
    for rec in data.records() {
        let x = rec.comparison.prompt;
        let (w, l) = (rec.winner_response(), rec.loser_response());
        let d = table.get(x, w) - table.get(x, l);
        loss -= log_sigmoid(d);
        let g = sigmoid(-d);
        grad.set(x, w, grad.get(x, w) - g);
        grad.set(x, l, grad.get(x, l) + g);
    }
    for (g, v) in grad.as_mut_slice().iter_mut().zip(table.table().as_slice()) {
        loss += l2 * v * v;
        *g += 2.0 * l2 * v;
    }
    Ok((loss, grad))
}

fn sup_norm(t: &Table) -> f64 {
    t.as_slice().iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Bradley-Terry fit by gradient descent with Barzilai-Borwein step sizes
/// safeguarded by an Armijo backtracking search.
pub fn fit_bt(data: &OrdinalDataset, l2: f64, opt: BtFitConfig) -> Result<FittedReward> {
    if !(l2.is_finite() && l2 >= 0.0) {
        return Err(Error::Domain(format!("l2 must be non-negative, got {l2}")));
    }
    if data.is_empty() {
        return Err(Error::Empty("ordinal dataset"));
    }
    let shape = data.shape();
    let mut r = RewardTable::zeros(shape);
    let (mut loss, mut grad) = bt_nll_and_gradient(&r, data, l2)?;
    let mut step = 1.0 / (data.len() as f64).max(1.0);
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;

    for iter in 0..opt.max_iter {
        let gnorm = sup_norm(&grad);
        if gnorm < opt.tolerance {
            return Ok(FittedReward {
                table: r.centered(),
                gauge: Gauge::ZeroMeanPerPrompt,
                meta: FitMeta {
                    method: "bradley-terry".into(),
                    loss,
                    iterations: iter,
                    l2,
                },
            });
        }
        if let Some((p_r, p_g)) = &prev {
            let s: Vec<f64> = r.table().as_slice().iter().zip(p_r).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = grad.as_slice().iter().zip(p_g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > 0.0 {
                step = dot(&s, &s) / sy;
            }
        }
        let g2 = dot(grad.as_slice(), grad.as_slice());
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> = r
                .table()
                .as_slice()
                .iter()
                .zip(grad.as_slice())
                .map(|(v, g)| v - step * g)
                .collect();
            let cand = RewardTable::new(Table::from_flat(shape, cand)?)?;
            let (c_loss, c_grad) = bt_nll_and_gradient(&cand, data, l2)?;
            let armijo = c_loss < loss && c_loss <= loss - 1e-4 * step * g2;
            // Near the optimum the loss is flat to rounding; fall back to
            // requiring a smaller gradient instead.
            let flat = (c_loss - loss).abs() <= 1e-12 * loss.abs().max(1.0) && sup_norm(&c_grad) < gnorm;
            if armijo || flat {
                accepted = Some((cand, c_loss, c_grad));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, c_loss, c_grad)) = accepted else {
            // No decrease possible at floating-point resolution.
            break;
        };
        prev = Some((r.table().as_slice().to_vec(), grad.as_slice().to_vec()));
        r = cand;
        loss = c_loss;
        grad = c_grad;
    }
    let grad_norm = sup_norm(&grad);
    if grad_norm < opt.tolerance {
        return Ok(FittedReward {
            table: r.centered(),
            gauge: Gauge::ZeroMeanPerPrompt,
            meta: FitMeta {
                method: "bradley-terry".into(),
                loss,
                iterations: opt.max_iter,
                l2,
            },
        });
    }
    Err(Error::Convergence {
        iterations: opt.max_iter,
        grad_norm,
        last: Box::new(r.centered()),
    })
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Minimum-norm solution of one prompt's least-squares problem. Each
/// connected component of the comparison graph is grounded at its first
/// node, solved by Cholesky on the reduced Laplacian, then centered; that
/// is exactly the minimum-norm solution since the Laplacian's null space
/// is spanned by component indicators.
fn solve_prompt(n: usize, edges: &[(usize, usize, f64)]) -> Vec<f64> {
    let mut parent: Vec<usize> = (0..n).collect();
    let mut touched = vec![false; n];
    for &(a, b, _) in edges {
        touched[a] = true;
        touched[b] = true;
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent[ra] = rb;
    }
    let mut components: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for node in (0..n).filter(|&i| touched[i]) {
        let root = find(&mut parent, node);
        components.entry(root).or_default().push(node);
    }

    let mut out = vec![0.0; n];
    for nodes in components.values() {
        let k = nodes.len();
        let pos: BTreeMap<usize, usize> = nodes.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let mut lap = DMatrix::<f64>::zeros(k, k);
        let mut rhs = DVector::<f64>::zeros(k);
        for &(a, b, t) in edges {
            let (Some(&i), Some(&j)) = (pos.get(&a), pos.get(&b)) else {
                continue;
            };
            // residual r_b - r_a - t
            lap[(i, i)] += 1.0;
            lap[(j, j)] += 1.0;
            lap[(i, j)] -= 1.0;
            lap[(j, i)] -= 1.0;
            rhs[j] += t;
            rhs[i] -= t;
        }
        let reduced = lap.view((1, 1), (k - 1, k - 1)).into_owned();
        let reduced_rhs = rhs.rows(1, k - 1).into_owned();
        let sol = reduced
            .cholesky()
            .expect("grounded Laplacian of a connected component is positive definite")
            .solve(&reduced_rhs);
        let mut values = vec![0.0; k];
        values[1..].copy_from_slice(sol.as_slice());
        let m = values.iter().sum::<f64>() / k as f64;
        for (i, &v) in nodes.iter().enumerate() {
            out[v] = values[i] - m;
        }
    }
    out
}

/// Residual sum of squares of a table against WTP records.
pub fn wtp_residual(table: &RewardTable, records: &[CardinalRecord]) -> f64 {
    records
        .iter()
        .map(|r| {
            let c = r.comparison;
            (table.margin(c.prompt, c.first, c.second) - r.signed_wtp()).powi(2)
        })
        .sum()
}

/// Exact least-squares reward fit to WTP margins.
pub fn fit_wtp(data: &CardinalDataset) -> Result<FittedReward> {
    if data.is_empty() {
        return Err(Error::Empty("cardinal dataset"));
    }
    let shape = data.shape();
    let mut per_prompt: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); shape.prompts];
    for r in data.records() {
        let c = r.comparison;
        per_prompt[c.prompt].push((c.first, c.second, r.signed_wtp()));
    }
    let mut table = Table::filled(shape, 0.0);
    for (x, edges) in per_prompt.iter().enumerate() {
        if !edges.is_empty() {
            table.row_mut(x).copy_from_slice(&solve_prompt(shape.responses, edges));
        }
    }
    let table = RewardTable::new(table)?;
    let loss = wtp_residual(&table, data.records());
    Ok(FittedReward {
        table,
        gauge: Gauge::ZeroMeanPerPrompt,
        meta: FitMeta {
            method: "wtp-least-squares".into(),
            loss,
            iterations: 1,
            l2: 0.0,
        },
    })
}

/// Divide each labeler's WTP values by that labeler's population standard
/// deviation. Labels elicited in different numeraires are normalized as
/// separate groups.
pub fn normalize_per_labeler(data: &CardinalDataset) -> Result<CardinalDataset> {
    let mut groups: BTreeMap<(&str, _), Vec<f64>> = BTreeMap::new();
    for r in data.records() {
        groups.entry((r.labeler.as_str(), r.scale_tag)).or_default().push(r.wtp);
    }
    let mut sds = BTreeMap::new();
    for ((labeler, tag), ws) in &groups {
        if ws.len() < 2 {
            return Err(Error::Normalization {
                labeler: labeler.to_string(),
                reason: format!("only {} record(s)", ws.len()),
            });
        }
        let sd = population_sd(ws);
        if sd <= 0.0 || !sd.is_finite() {
            return Err(Error::Normalization {
                labeler: labeler.to_string(),
                reason: "all WTP values identical".into(),
            });
        }
        sds.insert((labeler.to_string(), *tag), sd);
    }
    let records = data
        .records()
        .iter()
        .map(|r| CardinalRecord {
            wtp: r.wtp / sds[&(r.labeler.clone(), r.scale_tag)],
            ..r.clone()
        })
        .collect();
    CardinalDataset::new(data.shape(), records)
}

/// Mean squared error between fitted signed margins and held-out signed
/// WTP values.
pub fn heldout_margin_mse(fit: &FittedReward, holdout: &CardinalDataset) -> Result<f64> {
    if holdout.is_empty() {
        return Err(Error::Empty("holdout"));
    }
    fit.table.shape().expect(holdout.shape())?;
    Ok(wtp_residual(&fit.table, holdout.records()) / holdout.len() as f64)
}

/// Fraction of doubly-labeled requests on which both labelers prefer the
/// same response.
pub fn congruence(overlap: &[(Side, Side)]) -> Result<f64> {
    if overlap.is_empty() {
        return Err(Error::Empty("congruence overlap"));
    }
    Ok(overlap.iter().filter(|(a, b)| a == b).count() as f64 / overlap.len() as f64)
}
