//! SVG figures from `eval` outputs: error against the swept parameter,
//! stacked miss/false-alarm bars, and the CDF of localization error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, ensure, Context};
use plotters::prelude::*;

use crate::commands::{DumpRow, ReportRow};

const SIZE: (u32, u32) = (800, 500);
const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn color(i: usize) -> RGBColor {
    PALETTE[i % PALETTE.len()]
}

/// Empirical CDF: sorted values with cumulative fractions `(i + 1) / n`.
pub fn cdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.into_iter().enumerate().map(|(i, x)| (x, (i + 1) as f64 / n)).collect()
}

/// Bottom and top of the miss (lower) and false-alarm (upper) segments.
pub fn stacked_segments(row: &ReportRow) -> [(f64, f64); 2] {
    [(0.0, row.miss_rate), (row.miss_rate, row.miss_rate + row.false_alarm_rate)]
}

/// Range padded so that a single point still gets a drawable axis.
fn padded(lo: f64, hi: f64) -> std::ops::Range<f64> {
    let span = (hi - lo).abs();
    let pad = if span > 0.0 { 0.08 * span } else { lo.abs().max(1.0) * 0.5 };
    (lo - pad)..(hi + pad)
}

fn bounds(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    values.filter(|v| v.is_finite()).fold(None, |acc, v| match acc {
        None => Some((v, v)),
        Some((a, b)) => Some((a.min(v), b.max(v))),
    })
}

pub enum Input {
    Report(Vec<ReportRow>),
    Dump(String, Vec<DumpRow>),
}

pub fn read_input(path: &Path) -> anyhow::Result<Input> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = r.headers()?.clone();
    if headers.iter().any(|h| h == "sweep_param") {
        Ok(Input::Report(r.deserialize().collect::<Result<_, _>>()?))
    } else if headers.iter().any(|h| h == "distances") {
        let name = path.file_stem().map(|s| s.to_string_lossy().trim_start_matches("errors-").to_string()).unwrap_or_default();
        Ok(Input::Dump(name, r.deserialize().collect::<Result<_, _>>()?))
    } else {
        Err(anyhow!(txloc::Error::Config(format!("{} is neither a report nor an error dump", path.display()))))
    }
}

fn err<E: std::fmt::Display>(e: E) -> anyhow::Error {
    anyhow!("plotting failed: {e}")
}

fn plot_error_lines(param: &str, rows: &[&ReportRow], path: &Path) -> anyhow::Result<()> {
    let mut by_variant: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        if let Some(l) = r.l_err {
            by_variant.entry(&r.variant).or_default().push((r.value, l));
        }
    }
    let (x0, x1) = bounds(rows.iter().map(|r| r.value)).unwrap_or((0.0, 1.0));
    let (_, y1) = bounds(by_variant.values().flatten().map(|p| p.1)).unwrap_or((0.0, 1.0));
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("Localization error vs {param}"), ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(55)
        .build_cartesian_2d(padded(x0, x1), 0.0..padded(0.0, y1).end)
        .map_err(err)?;
    chart.configure_mesh().x_desc(param).y_desc("L_err (m)").draw().map_err(err)?;
    for (i, (variant, mut pts)) in by_variant.into_iter().enumerate() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let c = color(i);
        chart
            .draw_series(LineSeries::new(pts.clone(), c.stroke_width(2)))
            .map_err(err)?
            .label(variant)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], c.stroke_width(2)));
        chart.draw_series(pts.into_iter().map(|p| Circle::new(p, 4, c.filled()))).map_err(err)?;
    }
    chart.configure_series_labels().background_style(WHITE).border_style(BLACK).draw().map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}

fn plot_stacked_bars(param: &str, rows: &[&ReportRow], path: &Path) -> anyhow::Result<()> {
    let mut values: Vec<f64> = rows.iter().map(|r| r.value).collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let mut variants: Vec<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
    variants.sort();
    variants.dedup();
    let slots = variants.len() + 1;
    let top = rows.iter().map(|r| r.miss_rate + r.false_alarm_rate).fold(0.0, f64::max);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let n_slots = (values.len() * slots) as f64;
    let labels = values.clone();
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("Miss and false alarm rate vs {param}"), ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(55)
        .build_cartesian_2d(-0.5..n_slots - 0.5, 0.0..(top * 1.1).max(0.05))
        .map_err(err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_desc(param)
        .y_desc("M_r + F_r")
        .x_labels(values.len().max(2) * slots)
        .x_label_formatter(&move |x| {
            let slot = x.round() as usize;
            if x.fract().abs() < 1e-9 && slot % slots == (slots - 1) / 2 {
                labels.get(slot / slots).map(|v| format!("{v}")).unwrap_or_default()
            } else {
                String::new()
            }
        })
        .draw()
        .map_err(err)?;
    for (vi, variant) in variants.iter().enumerate() {
        let c = color(vi);
        let light = c.mix(0.45);
        for r in rows.iter().filter(|r| r.variant == *variant) {
            let i = values.iter().position(|v| *v == r.value).expect("value listed");
            let x = (i * slots + vi) as f64;
            let [miss, fa] = stacked_segments(r);
            chart
                .draw_series([
                    Rectangle::new([(x - 0.4, miss.0), (x + 0.4, miss.1)], c.filled()),
                    Rectangle::new([(x - 0.4, fa.0), (x + 0.4, fa.1)], light.filled()),
                ])
                .map_err(err)?;
        }
        chart
            .draw_series(std::iter::empty::<Rectangle<(f64, f64)>>())
            .map_err(err)?
            .label(format!("{variant}: miss (dark) / false alarm (light)"))
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 15, y + 5)], c.filled()));
    }
    chart.configure_series_labels().background_style(WHITE).border_style(BLACK).draw().map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}

fn plot_cdf(dumps: &[(String, Vec<DumpRow>)], path: &Path) -> anyhow::Result<()> {
    let curves: Vec<(String, Vec<(f64, f64)>)> = dumps
        .iter()
        .map(|(name, rows)| {
            let d: Vec<f64> = rows
                .iter()
                .flat_map(|r| r.distances.split(';').filter(|s| !s.is_empty()).map(|s| s.parse::<f64>().unwrap_or(f64::NAN)))
                .collect();
            (name.clone(), cdf(&d))
        })
        .collect();
    let (_, x1) = bounds(curves.iter().flat_map(|c| c.1.iter().map(|p| p.0))).unwrap_or((0.0, 1.0));
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("CDF of localization error", ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(55)
        .build_cartesian_2d(0.0..padded(0.0, x1).end, 0.0..1.02)
        .map_err(err)?;
    chart.configure_mesh().x_desc("error (m)").y_desc("fraction").draw().map_err(err)?;
    for (i, (name, pts)) in curves.into_iter().enumerate() {
        let c = color(i);
        // step function: each jump at the sample value
        let mut steps = vec![(0.0, 0.0)];
        let mut prev = 0.0;
        for (x, y) in pts {
            steps.push((x, prev));
            steps.push((x, y));
            prev = y;
        }
        chart
            .draw_series(LineSeries::new(steps, c.stroke_width(2)))
            .map_err(err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], c.stroke_width(2)));
    }
    chart.configure_series_labels().background_style(WHITE).border_style(BLACK).draw().map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}

/// Writes one figure per type found in the inputs and returns their paths.
pub fn cmd_plot(inputs: &[PathBuf], out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    ensure!(!inputs.is_empty(), txloc::Error::EmptyDataset);
    let mut rows = Vec::new();
    let mut dumps = Vec::new();
    for p in inputs {
        match read_input(p)? {
            Input::Report(r) => rows.extend(r),
            Input::Dump(name, d) => dumps.push((name, d)),
        }
    }
    ensure!(!rows.is_empty() || !dumps.is_empty(), txloc::Error::EmptyDataset);
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let mut params: Vec<&str> = rows.iter().map(|r| r.sweep_param.as_str()).collect();
    params.sort();
    params.dedup();
    for param in params {
        let sel: Vec<&ReportRow> = rows.iter().filter(|r| r.sweep_param == param).collect();
        let lines = out.join(format!("l_err_vs_{param}.svg"));
        plot_error_lines(param, &sel, &lines)?;
        let bars = out.join(format!("miss_false_{param}.svg"));
        plot_stacked_bars(param, &sel, &bars)?;
        written.extend([lines, bars]);
    }
    if !dumps.is_empty() {
        let path = out.join("error_cdf.svg");
        plot_cdf(&dumps, &path)?;
        written.push(path);
    }
    Ok(written)
}
