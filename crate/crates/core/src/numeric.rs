//! Small numerical helpers shared across modules.

/// Logistic function, stable for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x)) = -softplus(-x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation (divides by `n`).
pub fn population_sd(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Golden-section search for a minimum of `f` on `[lo, hi]`.
pub fn golden_section<F: FnMut(f64) -> f64>(mut f: F, mut lo: f64, mut hi: f64, tol: f64, max_iter: usize) -> f64 {
    let mut c = hi - INV_PHI * (hi - lo);
    let mut d = lo + INV_PHI * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..max_iter {
        if (hi - lo).abs() <= tol {
            break;
        }
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - INV_PHI * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + INV_PHI * (hi - lo);
            fd = f(d);
        }
    }
    if fc <= fd {
        c
    } else {
        d
    }
}

/// Minimize `f` on `[0, 1]`: evaluate an evenly spaced grid, then refine
/// by golden-section search inside the bracket around the best grid point.
/// Non-finite values count as `+inf`. Returns `(argmin, min)`.
pub fn grid_then_golden<F: FnMut(f64) -> f64>(mut f: F, grid_points: usize, tol: f64) -> (f64, f64) {
    let n = grid_points.max(3);
    let step = 1.0 / (n - 1) as f64;
    let mut eval = |t: f64| {
        let v = f(t);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let values: Vec<f64> = (0..n).map(|i| eval(i as f64 * step)).collect();
    let (best, best_val) = values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) });
    if !best_val.is_finite() {
        return (best as f64 * step, best_val);
    }
    let lo = best.saturating_sub(1) as f64 * step;
    let hi = ((best + 1).min(n - 1)) as f64 * step;
    let t = golden_section(&mut eval, lo, hi, tol, 200);
    let v = eval(t);
    if v < best_val {
        (t, v)
    } else {
        (best as f64 * step, best_val)
    }
}
