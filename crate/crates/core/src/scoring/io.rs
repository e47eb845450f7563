use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LineScores, MaskClass};
use crate::{Error, Result};

pub const SCORES_HEADER: &str = "line,f_rec,f_reg,f_rec_detrended,f_reg_detrended,f_reg_normalized,flag,mask";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub line: usize,
    pub f_rec: Option<f64>,
    pub f_reg: f64,
    pub f_rec_detrended: Option<f64>,
    pub f_reg_detrended: f64,
    pub f_reg_normalized: f64,
    pub flag: u8,
    pub mask: MaskClass,
}

pub fn score_rows(scores: &LineScores, flags: &[bool], mask: &[MaskClass]) -> Result<Vec<ScoreRow>> {
    let n = scores.lines();
    let normalized = scores.normalized()?;
    if flags.len() != n || mask.len() != n {
        return Err(Error::Shape(format!(
            "{n} lines, {} flags, {} mask entries",
            flags.len(),
            mask.len()
        )));
    }
    Ok((0..n)
        .map(|i| ScoreRow {
            line: i,
            f_rec: scores.f_rec[i],
            f_reg: scores.f_reg[i],
            f_rec_detrended: scores.f_rec_detrended[i],
            f_reg_detrended: scores.f_reg_detrended[i],
            f_reg_normalized: normalized[i],
            flag: flags[i] as u8,
            mask: mask[i],
        })
        .collect())
}

pub fn scores_csv_string(scores: &LineScores, flags: &[bool], mask: &[MaskClass]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in score_rows(scores, flags, mask)? {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_scores_csv(path: &Path, scores: &LineScores, flags: &[bool], mask: &[MaskClass]) -> Result<()> {
    let text = scores_csv_string(scores, flags, mask)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses and validates a scores CSV: exact header, consecutive line
/// numbers from 0, finite values, flag 0 or 1.
pub fn parse_scores_csv(bytes: &[u8]) -> Result<Vec<ScoreRow>> {
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != SCORES_HEADER {
        return Err(Error::Format(format!("unexpected scores header {header:?}")));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.deserialize::<ScoreRow>().enumerate() {
        let row = rec?;
        if row.line != i {
            return Err(Error::Format(format!("row {i} has line number {}", row.line)));
        }
        if row.flag > 1 {
            return Err(Error::Format(format!("line {i}: flag must be 0 or 1")));
        }
        let values = [row.f_reg, row.f_reg_detrended, row.f_reg_normalized];
        if values
            .iter()
            .chain(row.f_rec.iter())
            .chain(row.f_rec_detrended.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("scores CSV"));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Format("scores CSV has no rows".into()));
    }
    Ok(rows)
}

fn check_grid(values: &[Option<f64>], rows: usize, cols: usize) -> Result<()> {
    if rows == 0 || cols == 0 || values.len() != rows * cols {
        return Err(Error::Shape(format!(
            "heatmap grid {rows}x{cols} does not hold {} values",
            values.len()
        )));
    }
    Ok(())
}

/// 16-bit binary PGM, one row per line, one column per frame. Values are
/// scaled so the largest maps to 65535; missing and negative values map to 0.
pub fn write_heatmap_pgm(path: &Path, values: &[Option<f64>], rows: usize, cols: usize) -> Result<()> {
    check_grid(values, rows, cols)?;
    let max = values.iter().flatten().fold(0.0f64, |m, &v| m.max(v));
    let mut bytes = format!("P5\n{cols} {rows}\n65535\n").into_bytes();
    for v in values {
        let level = match v {
            Some(v) if max > 0.0 && *v > 0.0 => (v / max * 65535.0).round() as u16,
            _ => 0,
        };
        bytes.extend_from_slice(&level.to_be_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_heatmap_csv(path: &Path, values: &[Option<f64>], rows: usize, cols: usize) -> Result<()> {
    check_grid(values, rows, cols)?;
    let mut text = String::new();
    for row in values.chunks(cols) {
        let cells: Vec<String> = row.iter().map(|v| v.map(|v| v.to_string()).unwrap_or_default()).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
