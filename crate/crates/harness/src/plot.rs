//! SVG line charts for run metrics, cost sweeps and the softmax experiments.

use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde_json::Value;
use sparc_core::cost::{relative_to_clip, CostEntry, CostSource};
use sparc_core::losses::Objective;

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.into(),
            points,
        }
    }
}

fn plot_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Plot(e.to_string())
}

fn padded_range(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let lo = values.clone().fold(f64::INFINITY, f64::min);
    let hi = values.fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 * lo.abs().max(1.0) };
    (lo - pad, hi + pad)
}

/// Writes one chart with a line per series. Non-finite points are dropped.
pub fn line_chart(path: &Path, title: &str, x_desc: &str, y_desc: &str, series: &[Series]) -> Result<()> {
    let clean: Vec<Series> = series
        .iter()
        .map(|s| Series {
            name: s.name.clone(),
            points: s.points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect(),
        })
        .filter(|s| !s.points.is_empty())
        .collect();
    if clean.is_empty() {
        return Err(HarnessError::Plot(format!("nothing to draw for {}", path.display())));
    }
    let all = clean.iter().flat_map(|s| s.points.iter());
    let (x0, x1) = padded_range(all.clone().map(|p| p.0));
    let (y0, y1) = padded_range(all.map(|p| p.1));

    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(70)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(x_desc)
        .y_desc(y_desc)
        .draw()
        .map_err(plot_err)?;
    for (i, s) in clean.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(s.points.clone(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(s.name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        if s.points.len() <= 32 {
            chart
                .draw_series(s.points.iter().map(|&p| Circle::new(p, 3, color.filled())))
                .map_err(plot_err)?;
        }
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

fn read_records(run_dir: &Path) -> Result<Vec<Value>> {
    let text = fs::read_to_string(run_dir.join("metrics.jsonl"))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Every numeric key of the records that passes `keep`, as one series over
/// steps, sorted by name.
fn series_by_prefix(records: &[Value], keep: impl Fn(&str) -> bool) -> Vec<Series> {
    let mut out: std::collections::BTreeMap<String, Vec<(f64, f64)>> = Default::default();
    for r in records {
        let Some(obj) = r.as_object() else { continue };
        let Some(step) = obj.get("step").and_then(Value::as_f64) else { continue };
        for (k, v) in obj {
            if let (true, Some(y)) = (keep(k), v.as_f64()) {
                out.entry(k.clone()).or_default().push((step, y));
            }
        }
    }
    out.into_iter().map(|(k, v)| Series::new(k, v)).collect()
}

/// Charts for a training run, written to `<run>/plots/`: losses,
/// held-out evaluation and temperature.
pub fn plot_run(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let records = read_records(run_dir)?;
    let dir = run_dir.join("plots");
    fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    let charts: [(&str, &str, &str, Box<dyn Fn(&str) -> bool>); 3] = [
        ("loss.svg", "training loss", "loss", Box::new(|k| k == "loss" || k.starts_with("loss."))),
        ("eval.svg", "held-out evaluation", "score", Box::new(|k| k.starts_with("eval."))),
        ("temperature.svg", "temperature", "tau", Box::new(|k| k == "diag.temperature")),
    ];
    for (file, title, y, keep) in charts {
        let series = series_by_prefix(&records, keep);
        if series.is_empty() {
            continue;
        }
        let path = dir.join(file);
        line_chart(&path, title, "step", y, &series)?;
        written.push(path);
    }
    Ok(written)
}

/// Four cost charts over batch size from the whole-step measurements:
/// absolute mults and peak bytes, and both relative to CLIP.
pub fn plot_costs(entries: &[CostEntry], out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let source = CostSource::MeasuredStep;
    let mut objectives: Vec<Objective> = Vec::new();
    for e in entries.iter().filter(|e| e.source == source) {
        if !objectives.contains(&e.objective) {
            objectives.push(e.objective);
        }
    }
    let absolute = |f: &dyn Fn(&CostEntry) -> f64| -> Vec<Series> {
        objectives
            .iter()
            .map(|&o| {
                let pts = entries
                    .iter()
                    .filter(|e| e.source == source && e.objective == o)
                    .map(|e| (e.dims.batch as f64, f(e)))
                    .collect();
                Series::new(o.to_string(), pts)
            })
            .collect()
    };
    let rel = relative_to_clip(entries, source);
    let relative = |f: &dyn Fn(&sparc_core::cost::RelativeCost) -> f64| -> Vec<Series> {
        objectives
            .iter()
            .filter(|&&o| o != Objective::Clip)
            .map(|&o| {
                let pts = rel.iter().filter(|r| r.objective == o).map(|r| (r.batch as f64, f(r))).collect();
                Series::new(o.to_string(), pts)
            })
            .collect()
    };
    let charts = [
        ("flops.svg", "multiplications per training step", "mults", absolute(&|e| e.flops_total as f64)),
        ("peak_bytes.svg", "peak activation memory per step", "bytes", absolute(&|e| e.peak_bytes as f64)),
        ("flops_vs_clip.svg", "multiplications relative to CLIP", "ratio", relative(&|r| r.flops)),
        ("peak_vs_clip.svg", "peak memory relative to CLIP", "ratio", relative(&|r| r.peak_bytes)),
    ];
    let mut written = Vec::new();
    for (file, title, y, series) in charts {
        let path = out_dir.join(file);
        line_chart(&path, title, "batch size B", y, &series)?;
        written.push(path);
    }
    Ok(written)
}
