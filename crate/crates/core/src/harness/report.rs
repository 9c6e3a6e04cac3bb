//! Result files: metrics csv, per-cell records, and a summary table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::metrics::{median, MetricsRow};

pub const METRICS_CSV: &str = "metrics.csv";
pub const RECORDS: &str = "records.jsonl";
pub const SUMMARY: &str = "summary.md";

const HEADER: [&str; 11] = [
    "cell",
    "defense",
    "mode",
    "besa",
    "probe_accuracy",
    "detection_accuracy",
    "recovery_mse",
    "recovery_cosine",
    "queries",
    "seed",
    "status",
];

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.into())
}

/// Writes `metrics.csv`, `records.jsonl` and `summary.md` into `dir`.
pub fn emit_reports(rows: &[MetricsRow], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let csv_path = dir.join(METRICS_CSV);
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(&csv_path)
        .map_err(csv_err)?;
    w.write_record(HEADER).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;

    let mut records = String::new();
    for r in rows {
        records.push_str(&serde_json::to_string(r)?);
        records.push('\n');
    }
    let records_path = dir.join(RECORDS);
    fs::write(&records_path, records)?;

    let summary_path = dir.join(SUMMARY);
    fs::write(&summary_path, summary_table(rows))?;
    Ok(vec![csv_path, records_path, summary_path])
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// Median probe accuracy (%) per defense column and mode row, with a
/// `mode+BESA` row under each mode. The larger entry of each pair is bold.
pub fn summary_table(rows: &[MetricsRow]) -> String {
    let mut defenses: Vec<&str> = Vec::new();
    let mut modes: Vec<&str> = Vec::new();
    let mut cells: BTreeMap<(&str, &str, bool), Vec<f64>> = BTreeMap::new();
    for r in rows {
        if !defenses.contains(&r.defense.as_str()) {
            defenses.push(&r.defense);
        }
        if !modes.contains(&r.mode.as_str()) {
            modes.push(&r.mode);
        }
        if let (Some(acc), "ok") = (r.probe_accuracy, r.status.as_str()) {
            cells.entry((&r.defense, &r.mode, r.besa)).or_default().push(acc * 100.0);
        }
    }
    let value = |d: &str, m: &str, b: bool| cells.get(&(d, m, b)).map(|v| median(&mut v.clone()));

    let mut out = String::from("| attack |");
    for d in &defenses {
        let _ = write!(out, " {d} |");
    }
    out.push_str("\n|---|");
    out.push_str(&"---:|".repeat(defenses.len()));
    out.push('\n');
    for m in &modes {
        for besa in [false, true] {
            let _ = write!(out, "| {m}{} |", if besa { "+BESA" } else { "" });
            for d in &defenses {
                let mine = value(d, m, besa);
                let other = value(d, m, !besa);
                let text = match mine {
                    None => "-".to_string(),
                    Some(v) if other.is_some_and(|o| v >= o) => format!("**{v:.2}**"),
                    Some(v) => format!("{v:.2}"),
                };
                let _ = write!(out, " {text} |");
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(defense: &str, mode: &str, besa: bool, acc: f64, seed: u64) -> MetricsRow {
        MetricsRow {
            cell: format!("{defense}/{mode}/{besa}/r{seed}"),
            defense: defense.into(),
            mode: mode.into(),
            besa,
            probe_accuracy: Some(acc),
            detection_accuracy: besa.then_some(0.5),
            recovery_mse: None,
            recovery_cosine: Some(0.9),
            queries: 10,
            seed,
            status: "ok".into(),
        }
    }

    #[test]
    fn empty_rows_give_header_only_csv() {
        let dir = tempfile::tempdir().unwrap();
        emit_reports(&[], dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(METRICS_CSV)).unwrap();
        assert_eq!(text, format!("{}\n", HEADER.join(",")));
        assert!(read_metrics(&dir.path().join(METRICS_CSV)).unwrap().is_empty());
    }

    #[test]
    fn re_emission_is_byte_identical_and_reads_back() {
        let rows = vec![row("np", "plain", false, 0.5, 0), row("np", "plain", true, 0.625, 0)];
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        emit_reports(&rows, a.path()).unwrap();
        emit_reports(&rows, b.path()).unwrap();
        for f in [METRICS_CSV, RECORDS, SUMMARY] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
        assert_eq!(read_metrics(&a.path().join(METRICS_CSV)).unwrap(), rows);
    }

    #[test]
    fn summary_bolds_the_larger_of_each_pair() {
        let rows = vec![
            row("np", "plain", false, 0.40, 0),
            row("np", "plain", false, 0.50, 1),
            row("np", "plain", true, 0.70, 0),
            row("np", "plain", true, 0.60, 1),
            row("topk", "plain", false, 0.90, 0),
            row("topk", "plain", true, 0.80, 0),
        ];
        let table = summary_table(&rows);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], "| attack | np | topk |");
        assert_eq!(lines[2], "| plain | 45.00 | **90.00** |");
        assert_eq!(lines[3], "| plain+BESA | **65.00** | 80.00 |");
    }
}
