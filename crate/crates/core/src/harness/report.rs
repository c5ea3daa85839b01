use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::run::{read_json, read_jsonl, BerRow, RunSummary, BER_SWEEP_FILE, CONFIG_FILE, SUMMARY_FILE};
use crate::error::{Error, Result};
use crate::mape::EmbeddingVariant;
use crate::metrics::{format_csv, format_table, RegionMetrics};

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub label: String,
    /// `None` when the run has no summary yet.
    pub metrics: Option<RegionMetrics>,
}

fn variant_rank(name: &str) -> usize {
    EmbeddingVariant::ALL
        .iter()
        .position(|v| v.as_str() == name)
        .unwrap_or(EmbeddingVariant::ALL.len())
}

fn is_run_dir(dir: &Path) -> bool {
    dir.join(SUMMARY_FILE).is_file() || dir.join(CONFIG_FILE).is_file()
}

fn row_for(dir: &Path, name: &str, missing: &mut Vec<String>) -> Result<ReportRow> {
    let summary = dir.join(SUMMARY_FILE);
    if summary.is_file() {
        let s: RunSummary = read_json(&summary)?;
        return Ok(ReportRow {
            label: s.label,
            metrics: Some(s.metrics),
        });
    }
    missing.push(format!("{name}/{SUMMARY_FILE}"));
    let label = name
        .parse::<EmbeddingVariant>()
        .map_or_else(|_| name.to_string(), |v| v.table_label().to_string());
    Ok(ReportRow { label, metrics: None })
}

fn ber_table(rows: &[BerRow]) -> (String, String) {
    let mut text = String::from("BER target | achieved |  S MAE | NS MAE | All MAE\n");
    let mut csv = String::from("target_ber,achieved_ber,S_mae_lab,NS_mae_lab,All_mae_lab\n");
    let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
    let raw = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            text,
            "{:>10.2} | {:>8.2} | {:>6} | {:>6} | {:>7}",
            r.target_ber,
            r.mean_achieved_ber,
            cell(m.shadow.mae_lab),
            cell(m.non_shadow.mae_lab),
            cell(m.all.mae_lab)
        );
        let _ = writeln!(
            csv,
            "{:.6},{:.6},{},{},{}",
            r.target_ber,
            r.mean_achieved_ber,
            raw(m.shadow.mae_lab),
            raw(m.non_shadow.mae_lab),
            raw(m.all.mae_lab)
        );
    }
    (text, csv)
}

/// Formats the results under `dir` as text and CSV tables, written to
/// `report.txt` and `report.csv` (plus `report_ber.csv` when a BER sweep is
/// present). `dir` is either a single run or a directory of runs.
pub fn report(dir: impl AsRef<Path>) -> Result<String> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("missing results directory {}", dir.display())));
    }
    let mut missing = Vec::new();
    let mut rows = Vec::new();
    if is_run_dir(dir) {
        rows.push(row_for(dir, ".", &mut missing)?);
    } else {
        let mut subdirs: Vec<String> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| is_run_dir(&e.path()))
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        subdirs.sort_by(|a, b| (variant_rank(a), a).cmp(&(variant_rank(b), b)));
        for name in &subdirs {
            rows.push(row_for(&dir.join(name), name, &mut missing)?);
        }
    }
    let pairs: Vec<(String, Option<RegionMetrics>)> = rows.into_iter().map(|r| (r.label, r.metrics)).collect();
    let mut text = format_table(&pairs);
    let csv = format_csv(&pairs);

    let ber_path = dir.join(BER_SWEEP_FILE);
    if ber_path.is_file() {
        let ber: Vec<BerRow> = read_jsonl(&ber_path)?;
        let (t, c) = ber_table(&ber);
        text.push('\n');
        text.push_str(&t);
        let p = dir.join("report_ber.csv");
        fs::write(&p, c).map_err(|e| Error::io(&p, e))?;
    }
    for m in &missing {
        let _ = writeln!(text, "missing: {m}");
    }
    for (name, body) in [("report.txt", &text), ("report.csv", &csv)] {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(text)
}
