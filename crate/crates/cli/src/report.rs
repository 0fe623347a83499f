//! Merging runs into one report with plots.
//!
//! A "run" directory may hold an evaluation report (`report.json`), training
//! logs (`loss_log.csv`, `val_log.csv`), or both; a bare `report.json` path
//! also works. Merging concatenates all report rows verbatim and recomputes
//! the summary over the union, so numbers never survive from stale
//! aggregates; training logs become line charts, summaries become bar charts
//! with sample-spread whiskers.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use cycden_core::{Error, Result};

use crate::dataset::{sanitize_label, write_atomic};
use crate::eval::EvalReport;
use crate::svg::{self, Bar, Series};

/// Reads a headered CSV of floats into (header, column-major values).
fn read_csv_columns(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is empty", path.display())))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); header.len()];
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(Error::InvalidArgument(format!(
                "{} line {}: {} fields, expected {}",
                path.display(),
                lineno + 2,
                fields.len(),
                header.len()
            )));
        }
        for (c, f) in fields.iter().enumerate() {
            let v: f64 = f.trim().parse().map_err(|_| {
                Error::InvalidArgument(format!(
                    "{} line {}: bad number {f:?}",
                    path.display(),
                    lineno + 2
                ))
            })?;
            cols[c].push(v);
        }
    }
    Ok((header, cols))
}

/// Line-chart series for a set of columns against the `epoch` column.
fn curve_series(
    header: &[String],
    cols: &[Vec<f64>],
    pick: impl Fn(&str) -> bool,
) -> Vec<Series> {
    let epochs = &cols[0];
    header
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, name)| pick(name))
        .map(|(i, name)| Series {
            name: name.clone(),
            points: epochs.iter().copied().zip(cols[i].iter().copied()).collect(),
        })
        .collect()
}

struct RunInputs {
    name: String,
    report: Option<EvalReport>,
    loss_log: Option<PathBuf>,
    val_log: Option<PathBuf>,
}

fn inspect_run(path: &Path, used: &mut BTreeSet<String>) -> Result<RunInputs> {
    let (dir, direct_report) = if path.is_file() {
        (path.parent().unwrap_or(Path::new(".")).to_path_buf(), Some(path.to_path_buf()))
    } else if path.is_dir() {
        (path.to_path_buf(), None)
    } else {
        return Err(Error::InvalidArgument(format!(
            "run {} does not exist",
            path.display()
        )));
    };

    let base = dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("run")
        .to_string();
    let mut name = sanitize_label(&base);
    let mut k = 2;
    while !used.insert(name.clone()) {
        name = format!("{}-{k}", sanitize_label(&base));
        k += 1;
    }

    let report_path = direct_report.unwrap_or_else(|| dir.join("report.json"));
    let report = if report_path.is_file() {
        Some(EvalReport::load(&report_path)?)
    } else {
        None
    };
    let loss_log = Some(dir.join("loss_log.csv")).filter(|p| p.is_file());
    let val_log = Some(dir.join("val_log.csv")).filter(|p| p.is_file());
    if report.is_none() && loss_log.is_none() && val_log.is_none() {
        return Err(Error::InvalidArgument(format!(
            "{} holds neither report.json nor training logs",
            path.display()
        )));
    }
    Ok(RunInputs {
        name,
        report,
        loss_log,
        val_log,
    })
}

/// Merges the given runs into `out`: `merged.csv`, `merged.json`, `plots/`.
pub fn merge_runs(runs: &[PathBuf], out: &Path) -> Result<EvalReport> {
    let plots = out.join("plots");
    std::fs::create_dir_all(&plots)?;

    let mut used = BTreeSet::new();
    let mut rows = Vec::new();
    let mut n_plots = 0usize;
    for path in runs {
        let run = inspect_run(path, &mut used)?;
        if let Some(r) = run.report {
            rows.extend(r.rows);
        }
        if let Some(log) = run.loss_log {
            let (header, cols) = read_csv_columns(&log)?;
            let losses = curve_series(&header, &cols, |n| {
                !n.starts_with("lambda_") && n != "epoch"
            });
            let chart = svg::line_chart(
                &format!("{} training losses", run.name),
                "epoch",
                "epoch-mean loss",
                &losses,
            );
            write_atomic(&plots.join(format!("{}_losses.svg", run.name)), chart.as_bytes())?;
            let weights = curve_series(&header, &cols, |n| n.starts_with("lambda_"));
            if !weights.is_empty() {
                let chart = svg::line_chart(
                    &format!("{} loss weights", run.name),
                    "epoch",
                    "weight",
                    &weights,
                );
                write_atomic(
                    &plots.join(format!("{}_weights.svg", run.name)),
                    chart.as_bytes(),
                )?;
                n_plots += 1;
            }
            n_plots += 1;
        }
        if let Some(log) = run.val_log {
            let (header, cols) = read_csv_columns(&log)?;
            for metric in ["psnr", "ssim"] {
                let series = curve_series(&header, &cols, |n| n == metric);
                if series.is_empty() {
                    continue;
                }
                let chart = svg::line_chart(
                    &format!("{} validation {metric}", run.name),
                    "epoch",
                    metric,
                    &series,
                );
                write_atomic(
                    &plots.join(format!("{}_val_{metric}.svg", run.name)),
                    chart.as_bytes(),
                )?;
                n_plots += 1;
            }
        }
    }

    let merged = EvalReport::new(rows);
    merged.write(out, "merged")?;

    if !merged.summary.is_empty() {
        let metric_bars = |f: fn(&crate::eval::SummaryRow) -> (f64, Option<f64>)| -> Vec<Bar> {
            merged
                .summary
                .iter()
                .map(|s| {
                    let (value, err) = f(s);
                    Bar {
                        label: format!("{}:{}", s.run, s.arm),
                        value,
                        err,
                    }
                })
                .collect()
        };
        for (name, bars) in [
            ("psnr", metric_bars(|s| (s.psnr_mean, s.psnr_std))),
            ("ssim", metric_bars(|s| (s.ssim_mean, s.ssim_std))),
            ("nrmse", metric_bars(|s| (s.nrmse_mean, s.nrmse_std))),
            ("epi", metric_bars(|s| (s.epi_mean, s.epi_std))),
        ] {
            let chart = svg::bar_chart(&format!("{name} by run"), name, &bars);
            write_atomic(&plots.join(format!("{name}.svg")), chart.as_bytes())?;
            n_plots += 1;
        }
    }
    println!("wrote {n_plots} plot(s) under {}", plots.display());
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::MetricRow;

    fn row(run: &str, case: &str, arm: &str, psnr: f64) -> MetricRow {
        MetricRow {
            run: run.into(),
            case_id: case.into(),
            arm: arm.into(),
            psnr,
            ssim: 0.9,
            nrmse: 0.3,
            epi: 0.95,
            cnr: None,
            hausdorff: None,
        }
    }

    #[test]
    fn merge_concatenates_rows_and_recomputes_summary() {
        let dir = tempfile::tempdir().unwrap();
        let run_a = dir.path().join("a");
        let run_b = dir.path().join("b");
        std::fs::create_dir_all(&run_a).unwrap();
        std::fs::create_dir_all(&run_b).unwrap();
        let ra = EvalReport::new(vec![row("a", "c0", "denoised", 20.0)]);
        let rb = EvalReport::new(vec![row("b", "c0", "denoised", 30.0)]);
        ra.write(&run_a, "report").unwrap();
        rb.write(&run_b, "report").unwrap();

        let out = dir.path().join("merged");
        std::fs::create_dir_all(&out).unwrap();
        let merged = merge_runs(&[run_a, run_b], &out).unwrap();

        let mut expect_rows = ra.rows.clone();
        expect_rows.extend(rb.rows.clone());
        assert_eq!(merged.rows, expect_rows, "rows are the concatenation");
        assert_eq!(merged.summary, crate::eval::summarize(&expect_rows));
        assert!(out.join("merged.csv").is_file());
        assert!(out.join("plots/psnr.svg").is_file());
    }

    #[test]
    fn duplicate_run_names_get_disambiguated() {
        let dir = tempfile::tempdir().unwrap();
        let one = dir.path().join("x").join("run");
        let two = dir.path().join("y").join("run");
        std::fs::create_dir_all(&one).unwrap();
        std::fs::create_dir_all(&two).unwrap();
        EvalReport::new(vec![row("p", "c", "denoised", 1.0)])
            .write(&one, "report")
            .unwrap();
        EvalReport::new(vec![row("q", "c", "denoised", 2.0)])
            .write(&two, "report")
            .unwrap();
        let mut used = BTreeSet::new();
        let a = inspect_run(&one, &mut used).unwrap();
        let b = inspect_run(&two, &mut used).unwrap();
        assert_eq!(a.name, "run");
        assert_eq!(b.name, "run-2");
    }

    #[test]
    fn malformed_csv_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss_log.csv");
        std::fs::write(&p, "epoch,gan\n1,0.5\n2\n").unwrap();
        let err = read_csv_columns(&p).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("line 3"));
    }
}
