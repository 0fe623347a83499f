//! Metric reports: per-case rows, per-arm summaries, CSV/JSON emission.
//!
//! A report is a flat list of rows, one per (case, arm) pair — `arm` tells
//! apart the denoised output from the raw low-dose baseline — plus summary
//! rows holding mean and spread per (run, arm) group. PSNR of a perfect
//! match is infinite, which JSON cannot carry as a number, so that one field
//! round-trips through a string when non-finite; CSV uses the standard float
//! forms (`inf`) which parse back natively.

use std::path::Path;

use cycden_core::metrics::CaseMetrics;
use cycden_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::dataset::write_atomic;

pub const REPORT_FORMAT: &str = "cycden-report-v1";

/// Serialize a possibly non-finite float; JSON numbers cannot say `inf`.
mod maybe_inf {
    use serde::de::{self, Visitor};
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    struct MaybeInf;

    impl Visitor<'_> for MaybeInf {
        type Value = f64;

        fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
            write!(f, "a float or the strings \"inf\", \"-inf\", \"nan\"")
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
            Ok(v)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
            v.parse()
                .map_err(|_| E::custom(format!("bad float string {v:?}")))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        d.deserialize_any(MaybeInf)
    }
}

/// All metrics for one case under one arm of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run: String,
    pub case_id: String,
    /// `"denoised"` or `"low"`.
    pub arm: String,
    #[serde(with = "maybe_inf")]
    pub psnr: f64,
    pub ssim: f64,
    pub nrmse: f64,
    pub epi: f64,
    pub cnr: Option<f64>,
    pub hausdorff: Option<f64>,
}

impl MetricRow {
    pub const CSV_HEADER: &'static str =
        "run,case,arm,psnr,ssim,nrmse,epi,cnr,hausdorff";

    pub fn from_metrics(run: &str, case_id: &str, arm: &str, m: &CaseMetrics) -> MetricRow {
        MetricRow {
            run: run.to_string(),
            case_id: case_id.to_string(),
            arm: arm.to_string(),
            psnr: m.psnr,
            ssim: m.ssim,
            nrmse: m.nrmse,
            epi: m.epi,
            cnr: m.cnr,
            hausdorff: m.hausdorff,
        }
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.run,
            self.case_id,
            self.arm,
            self.psnr,
            self.ssim,
            self.nrmse,
            self.epi,
            opt(self.cnr),
            opt(self.hausdorff),
        )
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Mean and spread of every metric over one (run, arm) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run: String,
    pub arm: String,
    pub n: usize,
    #[serde(with = "maybe_inf")]
    pub psnr_mean: f64,
    pub psnr_std: Option<f64>,
    pub ssim_mean: f64,
    pub ssim_std: Option<f64>,
    pub nrmse_mean: f64,
    pub nrmse_std: Option<f64>,
    pub epi_mean: f64,
    pub epi_std: Option<f64>,
    pub cnr_mean: Option<f64>,
    pub cnr_std: Option<f64>,
    pub hausdorff_mean: Option<f64>,
    pub hausdorff_std: Option<f64>,
}

impl SummaryRow {
    pub const CSV_HEADER: &'static str = "run,arm,n,psnr_mean,psnr_std,ssim_mean,ssim_std,\
         nrmse_mean,nrmse_std,epi_mean,epi_std,cnr_mean,cnr_std,hausdorff_mean,hausdorff_std";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.run,
            self.arm,
            self.n,
            self.psnr_mean,
            opt(self.psnr_std),
            self.ssim_mean,
            opt(self.ssim_std),
            self.nrmse_mean,
            opt(self.nrmse_std),
            self.epi_mean,
            opt(self.epi_std),
            opt(self.cnr_mean),
            opt(self.cnr_std),
            opt(self.hausdorff_mean),
            opt(self.hausdorff_std),
        )
    }
}

/// Mean of a slice; `None` when empty.
fn mean_of(vals: &[f64]) -> Option<f64> {
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Sample standard deviation; `None` below two points or for a non-finite
/// mean (a spread around infinity carries no information).
fn std_of(vals: &[f64], mean: f64) -> Option<f64> {
    if vals.len() < 2 || !mean.is_finite() {
        return None;
    }
    let ss: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum();
    Some((ss / (vals.len() - 1) as f64).sqrt())
}

fn stats(vals: &[f64]) -> (Option<f64>, Option<f64>) {
    match mean_of(vals) {
        Some(m) => (Some(m), std_of(vals, m)),
        None => (None, None),
    }
}

/// Groups rows by (run, arm) — first-appearance order — and reduces each
/// group to means and sample standard deviations. Optional metrics average
/// over the cases that have them.
pub fn summarize(rows: &[MetricRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows {
        let key = (r.run.clone(), r.arm.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.iter()
        .map(|(run, arm)| {
            let group: Vec<&MetricRow> = rows
                .iter()
                .filter(|r| &r.run == run && &r.arm == arm)
                .collect();
            let col = |f: fn(&MetricRow) -> f64| -> Vec<f64> {
                group.iter().map(|r| f(r)).collect()
            };
            let opt_col = |f: fn(&MetricRow) -> Option<f64>| -> Vec<f64> {
                group.iter().filter_map(|r| f(r)).collect()
            };
            let psnr = col(|r| r.psnr);
            let ssim = col(|r| r.ssim);
            let nrmse = col(|r| r.nrmse);
            let epi = col(|r| r.epi);
            let (psnr_mean, psnr_std) = stats(&psnr);
            let (ssim_mean, ssim_std) = stats(&ssim);
            let (nrmse_mean, nrmse_std) = stats(&nrmse);
            let (epi_mean, epi_std) = stats(&epi);
            let (cnr_mean, cnr_std) = stats(&opt_col(|r| r.cnr));
            let (hausdorff_mean, hausdorff_std) = stats(&opt_col(|r| r.hausdorff));
            SummaryRow {
                run: run.clone(),
                arm: arm.clone(),
                n: group.len(),
                psnr_mean: psnr_mean.expect("group is never empty"),
                psnr_std,
                ssim_mean: ssim_mean.expect("group is never empty"),
                ssim_std,
                nrmse_mean: nrmse_mean.expect("group is never empty"),
                nrmse_std,
                epi_mean: epi_mean.expect("group is never empty"),
                epi_std,
                cnr_mean,
                cnr_std,
                hausdorff_mean,
                hausdorff_std,
            }
        })
        .collect()
}

/// A full report: rows plus their summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub rows: Vec<MetricRow>,
    pub summary: Vec<SummaryRow>,
}

impl EvalReport {
    pub fn new(rows: Vec<MetricRow>) -> EvalReport {
        let summary = summarize(&rows);
        EvalReport {
            format: REPORT_FORMAT.to_string(),
            rows,
            summary,
        }
    }

    /// Writes `<stem>.csv`, `<stem>_summary.csv` and `<stem>.json` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let mut csv = String::from(MetricRow::CSV_HEADER);
        csv.push('\n');
        for r in &self.rows {
            csv.push_str(&r.csv_line());
            csv.push('\n');
        }
        write_atomic(&dir.join(format!("{stem}.csv")), csv.as_bytes())?;

        let mut csv = String::from(SummaryRow::CSV_HEADER);
        csv.push('\n');
        for s in &self.summary {
            csv.push_str(&s.csv_line());
            csv.push('\n');
        }
        write_atomic(&dir.join(format!("{stem}_summary.csv")), csv.as_bytes())?;

        let mut json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidArgument(format!("report serialization: {e}")))?;
        json.push('\n');
        write_atomic(&dir.join(format!("{stem}.json")), json.as_bytes())
    }

    /// Reads a report back from `<path>` (the JSON form).
    pub fn load(path: &Path) -> Result<EvalReport> {
        if !path.is_file() {
            return Err(Error::InvalidArgument(format!(
                "report {} does not exist",
                path.display()
            )));
        }
        let text = std::fs::read_to_string(path)?;
        let report: EvalReport = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidArgument(format!("report {}: {e}", path.display())))?;
        if report.format != REPORT_FORMAT {
            return Err(Error::InvalidArgument(format!(
                "report {} has format {:?}, expected {REPORT_FORMAT:?}",
                path.display(),
                report.format
            )));
        }
        Ok(report)
    }
}

/// One console table line per summary row, fixed-width.
pub fn format_summary_table(summary: &[SummaryRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:<9} {:>3} {:>8} {:>8} {:>8} {:>8} {:>8} {:>9}\n",
        "run", "arm", "n", "psnr", "ssim", "nrmse", "epi", "cnr", "hausdorff"
    ));
    for s in summary {
        let f2 = |v: f64| format!("{v:.3}");
        let o2 = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{:<12} {:<9} {:>3} {:>8} {:>8} {:>8} {:>8} {:>8} {:>9}\n",
            s.run,
            s.arm,
            s.n,
            f2(s.psnr_mean),
            f2(s.ssim_mean),
            f2(s.nrmse_mean),
            f2(s.epi_mean),
            o2(s.cnr_mean),
            o2(s.hausdorff_mean),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(run: &str, case: &str, arm: &str, psnr: f64, ssim: f64) -> MetricRow {
        MetricRow {
            run: run.into(),
            case_id: case.into(),
            arm: arm.into(),
            psnr,
            ssim,
            nrmse: 0.5,
            epi: 0.9,
            cnr: Some(3.0),
            hausdorff: None,
        }
    }

    #[test]
    fn summary_means_and_sample_std_are_exact() {
        let rows = vec![
            row("r", "a", "denoised", 20.0, 0.8),
            row("r", "b", "denoised", 24.0, 0.9),
        ];
        let s = summarize(&rows);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].n, 2);
        assert_eq!(s[0].psnr_mean, 22.0);
        // sample std of {20, 24}: sqrt(((-2)^2 + 2^2) / 1) = sqrt(8)
        assert!((s[0].psnr_std.unwrap() - 8.0f64.sqrt()).abs() < 1e-12);
        assert_eq!(s[0].cnr_mean, Some(3.0));
        assert_eq!(s[0].hausdorff_mean, None);
    }

    #[test]
    fn single_row_groups_have_no_spread() {
        let s = summarize(&[row("r", "a", "low", 18.0, 0.7)]);
        assert_eq!(s[0].n, 1);
        assert_eq!(s[0].psnr_std, None);
    }

    #[test]
    fn groups_follow_first_appearance_order() {
        let rows = vec![
            row("r", "a", "denoised", 20.0, 0.8),
            row("r", "a", "low", 15.0, 0.6),
            row("r", "b", "denoised", 22.0, 0.85),
        ];
        let s = summarize(&rows);
        let arms: Vec<&str> = s.iter().map(|x| x.arm.as_str()).collect();
        assert_eq!(arms, ["denoised", "low"]);
    }

    #[test]
    fn infinite_psnr_round_trips_through_json_and_csv() {
        let rows = vec![row("r", "a", "denoised", f64::INFINITY, 1.0)];
        let report = EvalReport::new(rows);
        let text = serde_json::to_string(&report).unwrap();
        assert!(text.contains("\"inf\""));
        let back: EvalReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.rows[0].psnr, f64::INFINITY);
        assert_eq!(back.summary[0].psnr_mean, f64::INFINITY);
        assert_eq!(back.summary[0].psnr_std, None);

        let line = back.rows[0].csv_line();
        let field = line.split(',').nth(3).unwrap();
        assert_eq!(field.parse::<f64>().unwrap(), f64::INFINITY);
    }

    #[test]
    fn report_files_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let report = EvalReport::new(vec![
            row("r", "a", "denoised", 20.0, 0.8),
            row("r", "a", "low", 15.0, 0.6),
        ]);
        report.write(dir.path(), "report").unwrap();
        let back = EvalReport::load(&dir.path().join("report.json")).unwrap();
        assert_eq!(back, report);
        let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with(MetricRow::CSV_HEADER));
    }
}
