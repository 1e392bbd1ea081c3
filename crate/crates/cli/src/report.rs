//! `report`: a plain-text summary of the metrics a run left in its output
//! directory.

use std::fmt::Write as _;
use std::path::Path;

use semmae::{Error, Result};

use crate::formats::csv_error;

/// Means over consecutive, non-overlapping windows; a trailing partial
/// window is dropped.
pub fn window_means(values: &[f64], window: usize) -> Vec<f64> {
    values
        .chunks_exact(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}

pub fn strictly_decreasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] < w[0])
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    let header = r.headers().map_err(csv_error)?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()).map_err(csv_error))
        .collect::<Result<Vec<Vec<String>>>>()?;
    Ok((header, rows))
}

fn column(header: &[String], rows: &[Vec<String>], name: &str) -> Option<Vec<f64>> {
    let i = header.iter().position(|h| h == name)?;
    rows.iter().map(|r| r[i].parse().ok()).collect()
}

pub fn summarize(dir: &Path) -> Result<String> {
    let path = dir.join("metrics.csv");
    if !path.exists() {
        return Err(Error::Format(format!("no metrics.csv in {}", dir.display())));
    }
    let (header, rows) = read_table(&path)?;
    let mut out = String::new();
    let _ = writeln!(out, "{}: {} epochs", path.display(), rows.len());
    let loss_col = if header.iter().any(|h| h == "mim_loss") { "mim_loss" } else { "recon_loss" };
    for name in header.iter().skip(1) {
        let Some(v) = column(&header, &rows, name) else {
            continue;
        };
        if let (Some(first), Some(last)) = (v.first(), v.last()) {
            let _ = writeln!(out, "  {name:<12} first {first:<12.6} last {last:<12.6}");
        }
    }
    if let Some(v) = column(&header, &rows, loss_col) {
        let means = window_means(&v, 10);
        if !means.is_empty() {
            let shown: Vec<String> = means.iter().map(|m| format!("{m:.5}")).collect();
            let _ = writeln!(out, "  {loss_col} 10-epoch means: {}", shown.join(" "));
            let _ = writeln!(out, "  strictly decreasing: {}", strictly_decreasing(&means));
        }
    }
    let eval = dir.join("eval.csv");
    if eval.exists() {
        let (h, r) = read_table(&eval)?;
        for row in r {
            let pairs: Vec<String> = h.iter().zip(&row).map(|(k, v)| format!("{k}={v}")).collect();
            let _ = writeln!(out, "  eval: {}", pairs.join(" "));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows() {
        let v: Vec<f64> = (0..25).map(|i| 100.0 - i as f64).collect();
        let m = window_means(&v, 10);
        assert_eq!(m, vec![95.5, 85.5]);
        assert!(strictly_decreasing(&m));
        assert!(!strictly_decreasing(&[1.0, 1.0]));
    }
}
