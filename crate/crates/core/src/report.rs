//! Report emission: deterministic CSV, JSON with full provenance, and SVG
//! line charts with error bars.
//!
//! CSV content is a pure function of seeds and configuration — wallclock
//! figures live in the JSON only, so same-seed replays emit byte-identical
//! CSV files.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::{ExperimentReport, MarginSearchResult};
use crate::trainer::EpochStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Svg,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "svg" => Ok(ReportFormat::Svg),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

/// Per-run rows plus summary rows. Deterministic.
pub fn experiment_csv(report: &ExperimentReport) -> String {
    let mut out = String::new();
    out.push_str("row,run,split_seed,accuracy\n");
    for r in &report.runs {
        out.push_str(&format!("run,{},{},{}\n", r.run, r.split_seed, r.accuracy));
    }
    out.push_str(&format!("mean,,,{}\n", report.mean_accuracy()));
    out.push_str(&format!("std,,,{}\n", report.std_accuracy()));
    if report.single_run {
        out.push_str("note,,,single run\n");
    }
    out
}

/// Full provenance: config snapshot, seeds, per-run confusion matrices,
/// histories and wallclock.
pub fn experiment_json(report: &ExperimentReport) -> Result<String> {
    serde_json::to_string_pretty(report)
        .map_err(|e| Error::Config(format!("report serialization failed: {e}")))
}

pub fn margin_csv(result: &MarginSearchResult) -> String {
    let mut out = String::new();
    out.push_str("margin,mean_accuracy,std_accuracy\n");
    for i in 0..result.margins.len() {
        out.push_str(&format!(
            "{},{},{}\n",
            result.margins[i], result.mean[i], result.std[i]
        ));
    }
    out
}

/// Training history CSV (`train` subcommand artifact).
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::new();
    out.push_str("epoch,mean_loss,mean_d1,mean_d2,wallclock_ms\n");
    for e in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.mean_loss, e.mean_d1, e.mean_d2, e.wallclock_ms
        ));
    }
    out
}

struct Series<'a> {
    label: &'a str,
    points: Vec<(f64, f64)>,
    /// Optional symmetric error bar per point.
    bars: Option<Vec<f64>>,
}

/// Minimal line chart: one polyline per series, optional error bars,
/// labeled axes. Coordinates are formatted with fixed precision so output
/// is deterministic.
fn svg_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 400.0);
    let (ml, mr, mt, mb) = (60.0, 20.0, 40.0, 50.0);
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for s in series {
        for (i, &(x, y)) in s.points.iter().enumerate() {
            let bar = s.bars.as_ref().map(|b| b[i]).unwrap_or(0.0);
            xs.push(x);
            ys.push(y - bar);
            ys.push(y + bar);
        }
    }
    let (x0, x1) = bounds(&xs);
    let (y0, y1) = bounds(&ys);
    let px = |x: f64| ml + (x - x0) / (x1 - x0) * (w - ml - mr);
    let py = |y: f64| h - mb - (y - y0) / (y1 - y0) * (h - mt - mb);

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    out.push_str(&format!(
        "<text x=\"{:.2}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\">{title}</text>\n",
        w / 2.0
    ));
    // Axes.
    out.push_str(&format!(
        "<line x1=\"{ml:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        h - mb,
        w - mr,
        h - mb
    ));
    out.push_str(&format!(
        "<line x1=\"{ml:.2}\" y1=\"{mt:.2}\" x2=\"{ml:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        h - mb
    ));
    out.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\">{x_label}</text>\n",
        (ml + w - mr) / 2.0,
        h - 12.0
    ));
    out.push_str(&format!(
        "<text x=\"16\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">{y_label}</text>\n",
        (mt + h - mb) / 2.0,
        (mt + h - mb) / 2.0
    ));
    // Axis extent labels.
    for (v, x, y, anchor) in [
        (x0, px(x0), h - mb + 16.0, "middle"),
        (x1, px(x1), h - mb + 16.0, "middle"),
        (y0, ml - 6.0, py(y0) + 4.0, "end"),
        (y1, ml - 6.0, py(y1) + 4.0, "end"),
    ] {
        out.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{y:.2}\" font-size=\"10\" text-anchor=\"{anchor}\">{v:.3}</text>\n"
        ));
    }

    let colors = ["#1f6fb2", "#c0392b", "#27ae60", "#8e44ad"];
    for (si, s) in series.iter().enumerate() {
        let color = colors[si % colors.len()];
        if let Some(bars) = &s.bars {
            for (&(x, y), &b) in s.points.iter().zip(bars) {
                if b > 0.0 {
                    out.push_str(&format!(
                        "<line x1=\"{0:.2}\" y1=\"{1:.2}\" x2=\"{0:.2}\" y2=\"{2:.2}\" stroke=\"{color}\" stroke-width=\"1\"/>\n",
                        px(x),
                        py(y - b),
                        py(y + b)
                    ));
                }
            }
        }
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        out.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        out.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" fill=\"{color}\">{}</text>\n",
            w - mr - 120.0,
            mt + 14.0 * (si as f64 + 1.0),
            s.label
        ));
    }
    out.push_str("</svg>\n");
    out
}

fn bounds(vals: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in vals {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Accuracy-vs-margin chart with one error-bar series.
pub fn margin_svg(result: &MarginSearchResult) -> String {
    let series = Series {
        label: "mean accuracy",
        points: result
            .margins
            .iter()
            .zip(&result.mean)
            .map(|(&m, &a)| (m as f64, a))
            .collect(),
        bars: Some(result.std.clone()),
    };
    svg_chart("accuracy vs margin", "margin", "accuracy", &[series])
}

/// Mean loss per epoch across runs, error bars over runs.
pub fn experiment_svg(report: &ExperimentReport) -> String {
    let epochs = report
        .runs
        .iter()
        .map(|r| r.history.len())
        .min()
        .unwrap_or(0);
    let mut points = Vec::with_capacity(epochs);
    let mut bars = Vec::with_capacity(epochs);
    for e in 0..epochs {
        let losses: Vec<f64> = report.runs.iter().map(|r| r.history[e].mean_loss).collect();
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        let std = if losses.len() < 2 {
            0.0
        } else {
            (losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (losses.len() - 1) as f64)
                .sqrt()
        };
        points.push((e as f64, mean));
        bars.push(std);
    }
    let series = Series {
        label: "mean triplet loss",
        points,
        bars: Some(bars),
    };
    svg_chart("loss vs epoch", "epoch", "mean loss", &[series])
}

fn write(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Write the requested formats under `out_dir`; returns the created paths.
pub fn emit_experiment(
    report: &ExperimentReport,
    formats: &[ReportFormat],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut paths = Vec::new();
    for f in formats {
        let (name, content) = match f {
            ReportFormat::Csv => ("report.csv".to_string(), experiment_csv(report)),
            ReportFormat::Json => ("report.json".to_string(), experiment_json(report)?),
            ReportFormat::Svg => ("loss_vs_epoch.svg".to_string(), experiment_svg(report)),
        };
        let path = out_dir.join(name);
        write(&path, &content)?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn emit_margin_search(
    result: &MarginSearchResult,
    formats: &[ReportFormat],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut paths = Vec::new();
    for f in formats {
        let (name, content) = match f {
            ReportFormat::Csv => ("margin_search.csv".to_string(), margin_csv(result)),
            ReportFormat::Json => (
                "margin_search.json".to_string(),
                serde_json::to_string_pretty(result)
                    .map_err(|e| Error::Config(format!("serialization failed: {e}")))?,
            ),
            ReportFormat::Svg => ("accuracy_vs_margin.svg".to_string(), margin_svg(result)),
        };
        let path = out_dir.join(name);
        write(&path, &content)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{ExperimentConfig, MarginCell, RunResult};
    use crate::trainer::Variant;

    fn toy_report(accs: &[f64]) -> ExperimentReport {
        ExperimentReport {
            dataset: "toy".into(),
            classes: 2,
            variant: Variant::Ddipnet,
            config_hash: "deadbeef".into(),
            config: ExperimentConfig::default(),
            single_run: accs.len() == 1,
            runs: accs
                .iter()
                .enumerate()
                .map(|(i, &a)| RunResult {
                    run: i,
                    split_seed: 42 + i as u64,
                    accuracy: a,
                    confusion: vec![vec![1, 0], vec![0, 1]],
                    eval_generator_forwards: 0,
                    history: vec![],
                })
                .collect(),
            wallclock_ms: 1234,
        }
    }

    #[test]
    fn summary_matches_hand_arithmetic() {
        // runs [0.9, 1.0]: mean 0.95, sample std sqrt(2*0.05^2/1) ~= 0.0707.
        let r = toy_report(&[0.9, 1.0]);
        assert!((r.mean_accuracy() - 0.95).abs() < 1e-12);
        assert!((r.std_accuracy() - 0.07071067811865474).abs() < 1e-12);
        let csv = experiment_csv(&r);
        assert!(csv.contains("mean,,,0.95"), "{csv}");
        assert!(csv.contains("std,,,0.0707106781186547"), "{csv}");
    }

    #[test]
    fn single_run_flagged() {
        let r = toy_report(&[0.8]);
        let csv = experiment_csv(&r);
        assert!(csv.contains("note,,,single run"));
        assert!(csv.contains("std,,,0\n"));
    }

    #[test]
    fn json_round_trips_to_an_equal_report() {
        let r = toy_report(&[0.9, 1.0]);
        let json = experiment_json(&r).unwrap();
        let back: ExperimentReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn svg_has_one_polyline_per_series_and_balanced_tags() {
        let result = MarginSearchResult {
            margins: vec![0.1, 0.2, 0.3],
            mean: vec![0.8, 0.9, 0.85],
            std: vec![0.02, 0.01, 0.03],
            cells: vec![MarginCell {
                margin: 0.1,
                round: 0,
                accuracy: 0.8,
            }],
            rounds: 1,
            epochs_per_round: 1,
            config_hash: "x".into(),
            wallclock_ms: 0,
        };
        let svg = margin_svg(&result);
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        // Every opened element is self-closed or closed.
        let opens = svg.matches('<').count();
        let closes = svg.matches('>').count();
        assert_eq!(opens, closes);
    }

    #[test]
    fn margin_csv_row_count() {
        let result = MarginSearchResult {
            margins: (1..=10).map(|i| i as f32 * 0.1).collect(),
            mean: vec![0.5; 10],
            std: vec![0.0; 10],
            cells: vec![],
            rounds: 5,
            epochs_per_round: 15,
            config_hash: "x".into(),
            wallclock_ms: 0,
        };
        let csv = margin_csv(&result);
        assert_eq!(csv.lines().count(), 11); // header + 10 rows
    }
}
