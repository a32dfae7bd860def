//! MOT Challenge text files.
//!
//! Ground truth: `frame,id,left,top,width,height,1,1,1.0`.
//! Detections: `frame,-1,left,top,width,height,conf,-1,-1,-1`.
//! Results: `frame,id,left,top,width,height,conf,-1,-1,-1`.
//!
//! All three share the first seven columns; readers accept any number of
//! trailing columns. Blank lines are skipped.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// One parsed row, box as `[left, top, width, height]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotRow {
    pub frame: u64,
    pub id: i64,
    pub tlwh: [f64; 4],
    pub conf: f64,
}

impl MotRow {
    /// `[cx, cy, a, h]`.
    pub fn cxcyah(&self) -> [f64; 4] {
        let [l, t, w, h] = self.tlwh;
        [l + w / 2.0, t + h / 2.0, w / h, h]
    }

    /// `[x1, y1, x2, y2]`.
    pub fn corners(&self) -> [f64; 4] {
        let [l, t, w, h] = self.tlwh;
        [l, t, l + w, t + h]
    }
}

pub fn tlwh_from_cxcyah(b: [f64; 4]) -> [f64; 4] {
    let [cx, cy, a, h] = b;
    let w = a * h;
    [cx - w / 2.0, cy - h / 2.0, w, h]
}

/// Parses MOT rows from text; `path` only labels error messages.
pub fn parse_rows(text: &str, path: &Path) -> Result<Vec<MotRow>> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() < 7 {
            return Err(err(format!("expected at least 7 comma-separated columns, found {}", cols.len())));
        }
        let num = |i: usize| -> Result<f64> {
            cols[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("column {}: not a finite number: {:?}", i + 1, cols[i])))
        };
        let frame = cols[0]
            .parse::<u64>()
            .ok()
            .filter(|&f| f >= 1)
            .ok_or_else(|| err(format!("frame must be a positive integer, got {:?}", cols[0])))?;
        let id = cols[1]
            .parse::<f64>()
            .ok()
            .filter(|v| v.fract() == 0.0)
            .map(|v| v as i64)
            .ok_or_else(|| err(format!("id must be an integer, got {:?}", cols[1])))?;
        let tlwh = [num(2)?, num(3)?, num(4)?, num(5)?];
        if tlwh[2] <= 0.0 || tlwh[3] <= 0.0 {
            return Err(err(format!("box width and height must be positive, got {} x {}", tlwh[2], tlwh[3])));
        }
        rows.push(MotRow {
            frame,
            id,
            tlwh,
            conf: num(6)?,
        });
    }
    Ok(rows)
}

pub fn read_rows(path: &Path) -> Result<Vec<MotRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_rows(&text, path)
}

/// Ground-truth lines; floats use the shortest representation that parses
/// back to the same value.
pub fn write_gt<W: Write>(mut w: W, rows: &[MotRow]) -> std::io::Result<()> {
    for r in rows {
        let [l, t, wd, h] = r.tlwh;
        writeln!(w, "{},{},{},{},{},{},1,1,1.0", r.frame, r.id, l, t, wd, h)?;
    }
    Ok(())
}

pub fn write_det<W: Write>(mut w: W, rows: &[MotRow]) -> std::io::Result<()> {
    for r in rows {
        let [l, t, wd, h] = r.tlwh;
        writeln!(w, "{},-1,{},{},{},{},{},-1,-1,-1", r.frame, l, t, wd, h, r.conf)?;
    }
    Ok(())
}

/// Writes `contents` produced by `f` to `path`, attaching the path to errors.
pub fn write_file(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Groups rows by frame into `frames[f - 1]` for `f` in `1..=last`.
pub fn by_frame(rows: &[MotRow], last: u64) -> Vec<Vec<MotRow>> {
    let mut out = vec![Vec::new(); last as usize];
    for r in rows {
        if r.frame <= last {
            out[r.frame as usize - 1].push(*r);
        }
    }
    out
}
