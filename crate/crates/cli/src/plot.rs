//! SVG figures plus the CSV tables they are drawn from: adaptation curves
//! from an experiment report, and accumulation curves from a trace file.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use plotters::prelude::*;
use sylnet::evaluation::{AccumulationTrace, Aggregate, ExperimentReport, UNADAPTED_LABEL};

use crate::exit::UsageError;

const SIZE: (u32, u32) = (800, 500);

fn plot_err<E: std::fmt::Debug>(e: E) -> anyhow::Error {
    anyhow!("drawing failed: {e:?}")
}

fn safe_name(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes one figure per input and returns the paths written (SVG and CSV).
pub fn plot(input: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("{} is not JSON", input.display()))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    if value.get("cells").is_some() {
        let report = ExperimentReport::load(input).with_context(|| format!("report {}", input.display()))?;
        plot_report(&report, out)
    } else if value.get("decoded").is_some() {
        let trace: AccumulationTrace = serde_json::from_value(value)?;
        plot_trace(&trace, out)
    } else {
        Err(UsageError(format!("{} is neither an experiment report nor a trace", input.display())).into())
    }
}

/// The size axis is categorical: the unadapted point first, then sizes
/// in increasing order.
fn size_axis(aggs: &[Aggregate]) -> Vec<(String, f64)> {
    let mut sizes: Vec<(String, f64)> = aggs.iter().map(|a| (a.size_label.clone(), a.size_s)).collect();
    sizes.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    sizes.dedup();
    sizes
}

pub fn plot_report(report: &ExperimentReport, out: &Path) -> Result<Vec<PathBuf>> {
    if report.aggregates.is_empty() {
        bail!("report for {} has no successful cells to plot", report.corpus);
    }
    let sizes = size_axis(&report.aggregates);
    let mut methods: Vec<&str> = report.methods.iter().map(|m| m.name.as_str()).collect();
    if methods.is_empty() {
        methods = report.aggregates.iter().map(|a| a.method.as_str()).collect();
        methods.dedup();
    }
    let stem = format!("{}_adaptation", safe_name(&report.corpus));
    let csv_path = out.join(format!("{stem}.csv"));
    let svg_path = out.join(format!("{stem}.svg"));

    let mut csv = String::from("method,size_label,size_s,mean_pct,std_pct,n_folds\n");
    for m in &methods {
        for (label, _) in &sizes {
            if let Some(a) = report.aggregate_for(m, label) {
                csv += &format!("{},{},{},{},{},{}\n", a.method, a.size_label, a.size_s, a.mean_pct, a.std_pct, a.n_folds);
            }
        }
    }
    fs::write(&csv_path, csv)?;

    let y_max = report
        .aggregates
        .iter()
        .map(|a| a.mean_pct + if a.std_pct.is_finite() { a.std_pct } else { 0.0 })
        .fold(1.0, f64::max)
        * 1.1;
    let n = sizes.len();
    {
        let root = SVGBackend::new(&svg_path, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("{}: error vs adaptation data", report.corpus), ("sans-serif", 20))
            .margin(15)
            .x_label_area_size(40)
            .y_label_area_size(55)
            .build_cartesian_2d(-0.5f64..(n as f64 - 0.5), 0f64..y_max)
            .map_err(plot_err)?;
        let labels: Vec<String> = sizes
            .iter()
            .map(|(l, _)| if l == UNADAPTED_LABEL { "none".to_string() } else { l.clone() })
            .collect();
        chart
            .configure_mesh()
            .x_labels(n)
            .x_label_formatter(&|x| {
                let i = x.round();
                if (x - i).abs() < 1e-6 && i >= 0.0 && (i as usize) < labels.len() {
                    labels[i as usize].clone()
                } else {
                    String::new()
                }
            })
            .x_desc("adaptation data")
            .y_desc("relative error (%)")
            .draw()
            .map_err(plot_err)?;
        for (k, m) in methods.iter().enumerate() {
            let color = Palette99::pick(k).to_rgba();
            let pts: Vec<(f64, &Aggregate)> = sizes
                .iter()
                .enumerate()
                .filter_map(|(i, (label, _))| report.aggregate_for(m, label).map(|a| (i as f64, a)))
                .collect();
            chart
                .draw_series(LineSeries::new(pts.iter().map(|(x, a)| (*x, a.mean_pct)), color.stroke_width(2)))
                .map_err(plot_err)?
                .label(*m)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
            chart
                .draw_series(pts.iter().map(|(x, a)| {
                    let sd = if a.std_pct.is_finite() { a.std_pct } else { 0.0 };
                    ErrorBar::new_vertical(*x, (a.mean_pct - sd).max(0.0), a.mean_pct, a.mean_pct + sd, color.filled(), 8)
                }))
                .map_err(plot_err)?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(vec![svg_path, csv_path])
}

pub fn plot_trace(trace: &AccumulationTrace, out: &Path) -> Result<Vec<PathBuf>> {
    if trace.decoded.is_empty() {
        bail!("trace for {} has no frames", trace.utterance_id);
    }
    let stem = format!("{}_accumulation", safe_name(&trace.utterance_id));
    let csv_path = out.join(format!("{stem}.csv"));
    let svg_path = out.join(format!("{stem}.svg"));
    let time = |i: usize| i as f64 * trace.hop_ms / 1000.0;

    let mut csv = String::from("frame,time_s,decoded\n");
    for (i, d) in trace.decoded.iter().enumerate() {
        csv += &format!("{i},{},{d}\n", time(i));
    }
    fs::write(&csv_path, csv)?;

    let t_end = time(trace.decoded.len());
    let reference = trace.reference_count.map(f64::from);
    let y_max = trace.decoded.iter().copied().chain(reference).fold(1.0, f64::max) + 1.0;
    {
        let root = SVGBackend::new(&svg_path, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("{}: accumulated count", trace.utterance_id), ("sans-serif", 20))
            .margin(15)
            .x_label_area_size(40)
            .y_label_area_size(45)
            .build_cartesian_2d(0f64..t_end, 0f64..y_max)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc("time (s)")
            .y_desc("decoded count")
            .draw()
            .map_err(plot_err)?;
        let mut steps = Vec::with_capacity(2 * trace.decoded.len());
        for (i, &d) in trace.decoded.iter().enumerate() {
            steps.push((time(i), d));
            steps.push((time(i + 1), d));
        }
        chart
            .draw_series(LineSeries::new(steps, BLUE.stroke_width(2)))
            .map_err(plot_err)?
            .label("decoded")
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], BLUE.stroke_width(2)));
        if let Some(r) = reference {
            chart
                .draw_series(DashedLineSeries::new(vec![(0.0, r), (t_end, r)], 6, 4, RED.stroke_width(1)))
                .map_err(plot_err)?
                .label("reference")
                .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], RED.stroke_width(1)));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(vec![svg_path, csv_path])
}
