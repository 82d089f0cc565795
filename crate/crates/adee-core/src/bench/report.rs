//! Deterministic report rendering: markdown and CSV tables for paired
//! policy evaluations and multi-task exit-layer summaries, plus JSON
//! passthrough. Identical inputs produce identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use crate::profiler::ProfileReport;

use super::{BenchError, ClassCell, EvalReport, EvalResult};

pub const DASH: &str = "\u{2212}"; // minus sign used for absent cells

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Md,
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "md" | "markdown" => Ok(ReportFormat::Md),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!(
                "unknown format '{other}' (expected md, csv, or json)"
            )),
        }
    }
}

fn fmt_pct(v: f64) -> String {
    format!("{v:.2}")
}

fn fmt_frac(v: f64) -> String {
    format!("{v:.4}")
}

fn fmt_ms(v: f64) -> String {
    format!("{v:.3}")
}

fn class_names(result: &EvalResult) -> Vec<&String> {
    result.classes.keys().collect()
}

enum Metric {
    AccuracyPct,
    LayerFraction,
    WallMs,
}

fn metric_cell(cell: &ClassCell, metric: &Metric) -> String {
    match cell.stats() {
        None => DASH.to_string(),
        Some(s) => match metric {
            Metric::AccuracyPct => fmt_pct(s.accuracy_pct),
            Metric::LayerFraction => fmt_frac(s.mean_layer_fraction),
            Metric::WallMs => s.mean_wall_ms.map(fmt_ms).unwrap_or_else(|| DASH.into()),
        },
    }
}

fn metric_avg(result: &EvalResult, metric: &Metric) -> String {
    match &result.avg {
        None => DASH.to_string(),
        Some(avg) => match metric {
            Metric::AccuracyPct => fmt_pct(avg.accuracy_pct),
            Metric::LayerFraction => fmt_frac(avg.mean_layer_fraction),
            Metric::WallMs => avg.mean_wall_ms.map(fmt_ms).unwrap_or_else(|| DASH.into()),
        },
    }
}

fn has_wall(result: &EvalResult) -> bool {
    result
        .classes
        .values()
        .filter_map(|c| c.stats())
        .any(|s| s.mean_wall_ms.is_some())
}

/// One row per class plus an Avg row, one block per metric, with the
/// baseline and early-exit policy side by side.
pub fn render_eval_markdown(report: &EvalReport) -> String {
    let base = &report.baseline;
    let ee = &report.early_exit;
    let base_label = base.descriptor.label();
    let ee_label = ee.descriptor.label();
    let mut out = String::new();
    let _ = writeln!(out, "# Evaluation: task `{}`", report.task_id);
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "Model depth {} layers. Baseline `{}` vs early-exit `{}`.",
        report.n_layers, base_label, ee_label
    );

    let mut block = |title: &str, metric: Metric| {
        let _ = writeln!(out);
        let _ = writeln!(out, "## {title}");
        let _ = writeln!(out);
        let _ = writeln!(out, "| Class | {base_label} | {ee_label} |");
        let _ = writeln!(out, "| --- | --- | --- |");
        for class in class_names(base) {
            let b = metric_cell(&base.classes[class], &metric);
            let e = ee
                .classes
                .get(class)
                .map(|c| metric_cell(c, &metric))
                .unwrap_or_else(|| DASH.into());
            let _ = writeln!(out, "| {class} | {b} | {e} |");
        }
        let _ = writeln!(
            out,
            "| **Avg** | {} | {} |",
            metric_avg(base, &metric),
            metric_avg(ee, &metric)
        );
    };
    block("Accuracy (%)", Metric::AccuracyPct);
    block("Latency (layer fraction)", Metric::LayerFraction);
    if has_wall(base) || has_wall(ee) {
        block("Latency (ms)", Metric::WallMs);
    }

    let _ = writeln!(out);
    match &report.deltas {
        Some(d) => {
            let wall = d
                .wall_latency_improvement_pct
                .map(|v| format!(", wall-clock improvement {}%", fmt_pct(v)))
                .unwrap_or_default();
            let _ = writeln!(
                out,
                "Deltas vs baseline: accuracy {:+.2} pts, latency improvement {}% by layer count{}.",
                d.avg_accuracy_delta_pts,
                fmt_pct(d.latency_improvement_pct),
                wall
            );
        }
        None => {
            let _ = writeln!(out, "Deltas vs baseline: {DASH} (no comparable averages).");
        }
    }
    out
}

/// Long-form CSV: one row per class and policy, then an Avg row per
/// policy. Columns are fixed regardless of content.
pub fn render_eval_csv(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str("task_id,policy,class,n,correct,accuracy_pct,mean_layer_fraction,mean_wall_ms\n");
    for result in [&report.baseline, &report.early_exit] {
        let policy = result.descriptor.label();
        for (class, cell) in &result.classes {
            match cell.stats() {
                Some(s) => {
                    let wall = s.mean_wall_ms.map(fmt_ms).unwrap_or_default();
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{},{},{}",
                        report.task_id,
                        policy,
                        class,
                        s.n,
                        s.correct,
                        fmt_pct(s.accuracy_pct),
                        fmt_frac(s.mean_layer_fraction),
                        wall
                    );
                }
                None => {
                    let _ = writeln!(out, "{},{},{},,,-,-,", report.task_id, policy, class);
                }
            }
        }
        match &result.avg {
            Some(avg) => {
                let wall = avg.mean_wall_ms.map(fmt_ms).unwrap_or_default();
                let _ = writeln!(
                    out,
                    "{},{},Avg,,,{},{},{}",
                    report.task_id,
                    policy,
                    fmt_pct(avg.accuracy_pct),
                    fmt_frac(avg.mean_layer_fraction),
                    wall
                );
            }
            None => {
                let _ = writeln!(out, "{},{},Avg,,,-,-,", report.task_id, policy);
            }
        }
    }
    out
}

/// Multi-task exit-layer summary, one row per profiled task. Tasks where
/// no layer ever classified correctly render a dash.
pub fn render_exit_table_markdown(reports: &[ProfileReport]) -> Result<String, BenchError> {
    if reports.is_empty() {
        return Err(BenchError::NoResults);
    }
    let mut out = String::new();
    let _ = writeln!(out, "# Exit layer summary");
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "| Task | Full Layers | Optimal Exit Layer | Restoration Validated | ATE |"
    );
    let _ = writeln!(out, "| --- | --- | --- | --- | --- |");
    for r in reports {
        let (layer, validated, ate) = match r.optimal_layer {
            Some(l) => (
                l.to_string(),
                if r.restoration_validated { "yes" } else { "no" }.to_string(),
                r.ate.map(fmt_frac).unwrap_or_else(|| DASH.into()),
            ),
            None => (DASH.into(), DASH.into(), DASH.into()),
        };
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} |",
            r.task_id,
            r.full_layers(),
            layer,
            validated,
            ate
        );
    }
    Ok(out)
}

pub fn render_exit_table_csv(reports: &[ProfileReport]) -> Result<String, BenchError> {
    if reports.is_empty() {
        return Err(BenchError::NoResults);
    }
    let mut out = String::new();
    out.push_str("task_id,full_layers,optimal_layer,restoration_validated,ate\n");
    for r in reports {
        let layer = r.optimal_layer.map(|l| l.to_string()).unwrap_or_default();
        let validated = r
            .optimal_layer
            .map(|_| r.restoration_validated.to_string())
            .unwrap_or_default();
        let ate = r.ate.map(fmt_frac).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.task_id,
            r.full_layers(),
            layer,
            validated,
            ate
        );
    }
    Ok(out)
}

pub fn emit_eval_report(
    report: &EvalReport,
    format: ReportFormat,
    path: &Path,
) -> Result<(), BenchError> {
    let content = match format {
        ReportFormat::Md => render_eval_markdown(report),
        ReportFormat::Csv => render_eval_csv(report),
        ReportFormat::Json => report.to_json(),
    };
    std::fs::write(path, content)?;
    Ok(())
}

pub fn emit_exit_table(
    reports: &[ProfileReport],
    format: ReportFormat,
    path: &Path,
) -> Result<(), BenchError> {
    let content = match format {
        ReportFormat::Md => render_exit_table_markdown(reports)?,
        ReportFormat::Csv => render_exit_table_csv(reports)?,
        ReportFormat::Json => {
            if reports.is_empty() {
                return Err(BenchError::NoResults);
            }
            let mut s = serde_json::to_string_pretty(reports).expect("profile reports serialize");
            s.push('\n');
            s
        }
    };
    std::fs::write(path, content)?;
    Ok(())
}
