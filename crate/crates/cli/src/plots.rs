//! Static SVG figures. Each function returns the SVG document as a string.

use plotters::prelude::*;

use crate::error::{CliError, CliResult};

const SIZE: (u32, u32) = (800, 500);
const PALETTE: [RGBColor; 4] = [RGBColor(31, 119, 180), RGBColor(214, 39, 40), RGBColor(44, 160, 44), RGBColor(148, 103, 189)];

fn err(e: impl std::fmt::Display) -> CliError {
    CliError::data(format!("plot: {e}"))
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn bounds(points: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = points.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    padded(lo, hi)
}

pub type Series<'a> = (&'a str, Vec<(f64, f64)>);

pub fn line_chart(title: &str, x_desc: &str, y_desc: &str, series: &[Series<'_>]) -> CliResult<String> {
    let mut out = String::new();
    {
        let root = SVGBackend::with_string(&mut out, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(err)?;
        let xs = bounds(series.iter().flat_map(|(_, s)| s.iter().map(|p| p.0)));
        let ys = bounds(series.iter().flat_map(|(_, s)| s.iter().map(|p| p.1)));
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 22))
            .margin(15)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d(xs.0..xs.1, ys.0..ys.1)
            .map_err(err)?;
        chart.configure_mesh().x_desc(x_desc).y_desc(y_desc).draw().map_err(err)?;
        for (i, (name, points)) in series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            chart
                .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))
                .map_err(err)?
                .label(*name)
                .legend(move |(x, y)| PathElement::new([(x, y), (x + 20, y)], color.stroke_width(2)));
        }
        chart.configure_series_labels().background_style(WHITE).border_style(BLACK).draw().map_err(err)?;
        root.present().map_err(err)?;
    }
    Ok(out)
}

/// Side-by-side bars per category, values in `[0, 1]`.
pub fn grouped_bars(title: &str, y_desc: &str, categories: &[String], series: &[(&str, Vec<f64>)]) -> CliResult<String> {
    let mut out = String::new();
    {
        let root = SVGBackend::with_string(&mut out, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(err)?;
        let n = categories.len().max(1) as f64;
        let labels = categories.to_vec();
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 22))
            .margin(15)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d(0f64..n, 0f64..1.05f64)
            .map_err(err)?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(categories.len() * 2 + 1)
            .x_label_formatter(&|v| {
                let i = v.floor() as usize;
                if (v - v.floor() - 0.5).abs() < 1e-9 {
                    labels.get(i).cloned().unwrap_or_default()
                } else {
                    String::new()
                }
            })
            .y_desc(y_desc)
            .draw()
            .map_err(err)?;
        let width = 0.8 / series.len().max(1) as f64;
        for (k, (name, values)) in series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            chart
                .draw_series(values.iter().enumerate().map(|(i, &v)| {
                    let x0 = i as f64 + 0.1 + k as f64 * width;
                    Rectangle::new([(x0, 0.0), (x0 + width, v)], color.filled())
                }))
                .map_err(err)?
                .label(*name)
                .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 15, y + 5)], color.filled()));
        }
        chart
            .configure_series_labels()
            .position(SeriesLabelPosition::LowerRight)
            .background_style(WHITE)
            .border_style(BLACK)
            .draw()
            .map_err(err)?;
        root.present().map_err(err)?;
    }
    Ok(out)
}

/// Density-scaled histogram with an overlaid reference density.
pub fn histogram_with_density(title: &str, values: &[f64], bins: usize, density: impl Fn(f64) -> f64) -> CliResult<String> {
    let mut out = String::new();
    {
        let root = SVGBackend::with_string(&mut out, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(err)?;
        let (lo, hi) = bounds(values.iter().copied());
        let bins = bins.max(1);
        let w = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins];
        for &v in values {
            let i = (((v - lo) / w) as usize).min(bins - 1);
            counts[i] += 1;
        }
        let n = values.len().max(1) as f64;
        let heights: Vec<f64> = counts.iter().map(|&c| c as f64 / (n * w)).collect();
        let curve: Vec<(f64, f64)> = (0..=400).map(|i| lo + (hi - lo) * i as f64 / 400.0).map(|x| (x, density(x))).collect();
        let top = heights.iter().copied().chain(curve.iter().map(|p| p.1)).fold(0.0, f64::max) * 1.1;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 22))
            .margin(15)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d(lo..hi, 0.0..top.max(1e-9))
            .map_err(err)?;
        chart.configure_mesh().x_desc("value").y_desc("density").draw().map_err(err)?;
        let bar = PALETTE[0].mix(0.5);
        chart
            .draw_series(heights.iter().enumerate().map(|(i, &h)| {
                let x0 = lo + i as f64 * w;
                Rectangle::new([(x0, 0.0), (x0 + w, h)], bar.filled())
            }))
            .map_err(err)?
            .label("data")
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 15, y + 5)], bar.filled()));
        chart
            .draw_series(LineSeries::new(curve, PALETTE[1].stroke_width(2)))
            .map_err(err)?
            .label("fitted logistic")
            .legend(|(x, y)| PathElement::new([(x, y), (x + 20, y)], PALETTE[1].stroke_width(2)));
        chart.configure_series_labels().background_style(WHITE).border_style(BLACK).draw().map_err(err)?;
        root.present().map_err(err)?;
    }
    Ok(out)
}

/// `cells[row][col]` on a diverging blue/white/red scale centred at zero.
pub fn heatmap(title: &str, x_desc: &str, y_desc: &str, cells: &[Vec<f64>]) -> CliResult<String> {
    let mut out = String::new();
    {
        let root = SVGBackend::with_string(&mut out, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(err)?;
        let rows = cells.len().max(1);
        let cols = cells.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let scale = cells.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 22))
            .margin(15)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d(0..cols, 0..rows)
            .map_err(err)?;
        chart.configure_mesh().disable_mesh().x_desc(x_desc).y_desc(y_desc).draw().map_err(err)?;
        chart
            .draw_series(cells.iter().enumerate().flat_map(|(r, row)| {
                row.iter().enumerate().map(move |(c, &v)| {
                    let t = (v / scale).clamp(-1.0, 1.0);
                    let fade = |k: f64| (255.0 * (1.0 - k * t.abs())) as u8;
                    let color = if t >= 0.0 {
                        RGBColor(255, fade(1.0), fade(1.0))
                    } else {
                        RGBColor(fade(1.0), fade(1.0), 255)
                    };
                    Rectangle::new([(c, r), (c + 1, r + 1)], color.filled())
                })
            }))
            .map_err(err)?;
        root.present().map_err(err)?;
    }
    Ok(out)
}
