//! Prediction dumps (one JSON object per line) and reports (TOML plus a
//! plain-text table).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{DifferenceReport, EvalReport, Prediction};
use crate::error::{Error, Result};

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let mut text = String::new();
    for p in predictions {
        text.push_str(&serde_json::to_string(p).expect("prediction serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let p: Prediction = serde_json::from_str(line)
                .map_err(|e| Error::format("prediction file", format!("line {}: {e}", i + 1)))?;
            p.validate()?;
            Ok(p)
        })
        .collect()
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let text = toml::to_string(report).map_err(|e| Error::format("report", e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::format("report", e.to_string()))
}

/// Human-readable summary with per-category rows.
pub fn write_report_table(path: &Path, report: &EvalReport, class_names: &[String]) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "videos  {}", report.num_videos);
    let _ = writeln!(s, "top-1   {:.4}", report.top1);
    let _ = writeln!(s, "top-5   {:.4}", report.top5);
    let _ = writeln!(s, "\n{:<24} {:>6} {:>8}", "category", "videos", "top-1");
    for (c, acc) in report.per_category_acc.iter().enumerate() {
        let name = class_names.get(c).map(String::as_str).unwrap_or("?");
        let _ = writeln!(s, "{name:<24} {:>6} {acc:>8.4}", report.category_counts[c]);
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn write_difference_report(path: &Path, r: &DifferenceReport, pearson: f64) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "pearson_r {pearson:.6}\n\nbest-5");
    for d in &r.best {
        let _ = writeln!(s, "  {:<24} {:+.4}", d.name, d.difference);
    }
    let _ = writeln!(s, "worst-5");
    for d in &r.worst {
        let _ = writeln!(s, "  {:<24} {:+.4}", d.name, d.difference);
    }
    let _ = writeln!(s, "\nall categories");
    for d in &r.ranked {
        let _ = writeln!(s, "  {:<24} {:+.4}", d.name, d.difference);
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
