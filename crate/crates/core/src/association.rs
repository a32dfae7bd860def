//! Box geometry, the three-term match score and optimal assignment.
//!
//! The score between a track's fused prediction and a detection is
//! `w_iou * IoU + w_trend * trend + w_pen * penalty`, where `trend` is the cosine
//! between the predicted displacement and the prediction-to-detection vector and
//! `penalty = exp(-d^2 / sigma_bar^2)` shrinks with the positional uncertainty.
//! Pairs below the IoU gate carry no score at all (`None`) and are never matched.

use crate::error::{Error, Result};
use crate::kalman::{MEAS_DIM, STATE_DIM};

/// Lower bound on `sigma_bar^2` in the penalty denominator.
pub const PENALTY_VAR_FLOOR: f64 = 1e-4;
/// Displacements shorter than this give a trend of 0.
pub const TREND_MIN_NORM: f64 = 1e-9;

/// `[cx, cy, a, h]` → `[x1, y1, x2, y2]` with `w = a * h`.
pub fn cxcyah_to_corners(b: [f64; MEAS_DIM]) -> Result<[f64; 4]> {
    let [cx, cy, a, h] = b;
    if !(a > 0.0 && h > 0.0) || !a.is_finite() || !h.is_finite() {
        return Err(Error::InvalidBox(format!("aspect {a}, height {h}")));
    }
    let (hw, hh) = (0.5 * a * h, 0.5 * h);
    Ok([cx - hw, cy - hh, cx + hw, cy + hh])
}

pub fn corners_to_cxcyah(c: [f64; 4]) -> [f64; MEAS_DIM] {
    let (w, h) = (c[2] - c[0], c[3] - c[1]);
    [c[0] + 0.5 * w, c[1] + 0.5 * h, w / h, h]
}

/// Intersection over union of two corner boxes; 0 for disjoint boxes.
pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let area = |c: &[f64; 4]| (c[2] - c[0]) * (c[3] - c[1]);
    // written symmetrically so iou(a, b) == iou(b, a) bit for bit
    inter / ((area(a) + area(b)) - inter)
}

/// Direction convention of the detection vector in the trend term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TrendSign {
    /// `v_det = pred - det`.
    #[default]
    PredMinusDet,
    /// `v_det = det - pred`.
    DetMinusPred,
}

impl std::str::FromStr for TrendSign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pred_minus_det" => Ok(TrendSign::PredMinusDet),
            "det_minus_pred" => Ok(TrendSign::DetMinusPred),
            _ => Err(Error::Config(format!("trend_sign must be pred_minus_det or det_minus_pred, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for TrendSign {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrendSign::PredMinusDet => "pred_minus_det",
            TrendSign::DetMinusPred => "det_minus_pred",
        })
    }
}

fn cosine(u: [f64; 2], v: [f64; 2]) -> f64 {
    let (nu, nv) = (u[0].hypot(u[1]), v[0].hypot(v[1]));
    if nu < TREND_MIN_NORM || nv < TREND_MIN_NORM {
        return 0.0;
    }
    ((u[0] * v[0] + u[1] * v[1]) / (nu * nv)).clamp(-1.0, 1.0)
}

/// Cosine between the track's predicted center displacement and the vector
/// between prediction and detection centers.
pub fn trend_sim(x_pred: &[f64; STATE_DIM], x_pred_prev: &[f64; STATE_DIM], det: &[f64; MEAS_DIM], sign: TrendSign) -> f64 {
    let v_track = [x_pred[0] - x_pred_prev[0], x_pred[1] - x_pred_prev[1]];
    let v_det = match sign {
        TrendSign::PredMinusDet => [x_pred[0] - det[0], x_pred[1] - det[1]],
        TrendSign::DetMinusPred => [det[0] - x_pred[0], det[1] - x_pred[1]],
    };
    cosine(v_track, v_det)
}

/// `exp(-|c_pred - c_det|^2 / max(sigma_bar^2, floor))` with
/// `sigma_bar = (sigma_cx + sigma_cy) / 2`.
pub fn uncertainty_penalty(x_pred: &[f64; STATE_DIM], sigma: &[f64; STATE_DIM], det: &[f64; MEAS_DIM]) -> f64 {
    let d2 = (x_pred[0] - det[0]).powi(2) + (x_pred[1] - det[1]).powi(2);
    let s = 0.5 * (sigma[0] + sigma[1]);
    (-d2 / (s * s).max(PENALTY_VAR_FLOOR)).exp()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreWeights {
    pub iou: f64,
    pub trend: f64,
    pub penalty: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        ScoreWeights {
            iou: 0.7,
            trend: 0.2,
            penalty: 0.1,
        }
    }
}

/// Weighted sum; the two minor terms are added first so that the default
/// weights sum to exactly 1.0 in binary floating point.
pub fn match_score(iou: f64, trend: f64, penalty: f64, w: &ScoreWeights) -> f64 {
    w.iou * iou + (w.trend * trend + w.penalty * penalty)
}

/// Track × detection scores; `None` marks a pair that failed a gate.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    scores: Vec<Option<f64>>,
    iou: Vec<f64>,
}

impl ScoreMatrix {
    /// Fills every cell from `cell(i, j) -> Some((iou, score))`, or `None` for a
    /// pair that is not allowed at all (e.g. class mismatch). Pairs with
    /// `iou < iou_gate` are gated out.
    pub fn build(rows: usize, cols: usize, iou_gate: f64, mut cell: impl FnMut(usize, usize) -> Option<(f64, f64)>) -> Self {
        let mut scores = Vec::with_capacity(rows * cols);
        let mut ious = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                match cell(i, j) {
                    Some((o, s)) => {
                        ious.push(o);
                        scores.push((o >= iou_gate && s.is_finite()).then_some(s));
                    }
                    None => {
                        ious.push(0.0);
                        scores.push(None);
                    }
                }
            }
        }
        ScoreMatrix {
            rows,
            cols,
            scores,
            iou: ious,
        }
    }

    /// Direct construction from raw cells (row-major).
    pub fn from_cells(rows: usize, cols: usize, scores: Vec<Option<f64>>) -> Result<Self> {
        if scores.len() != rows * cols {
            return Err(Error::shape("ScoreMatrix", &[rows, cols], &[scores.len()]));
        }
        Ok(ScoreMatrix {
            rows,
            cols,
            iou: vec![f64::NAN; rows * cols],
            scores,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn score(&self, i: usize, j: usize) -> Option<f64> {
        self.scores[i * self.cols + j]
    }

    pub fn iou(&self, i: usize, j: usize) -> f64 {
        self.iou[i * self.cols + j]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs in increasing row order.
    pub matched: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

impl Assignment {
    /// Sum of matched scores in row order.
    pub fn total(&self, m: &ScoreMatrix) -> f64 {
        self.matched.iter().map(|&(i, j)| m.score(i, j).unwrap_or(0.0)).sum()
    }
}

/// Maximum-total-score matching in which any row or column may stay unmatched
/// and gated cells are never used.
///
/// The problem is padded to a square of side `rows + cols`: every real row may
/// fall through to a dummy column at zero score and vice versa, so a pair is
/// only chosen when it adds positive value. Ties resolve by scan order and are
/// reproducible run to run.
pub fn solve_assignment(m: &ScoreMatrix) -> Assignment {
    let (n_r, n_c) = (m.rows, m.cols);
    let n = n_r + n_c;
    if n_r == 0 || n_c == 0 {
        return Assignment {
            matched: vec![],
            unmatched_rows: (0..n_r).collect(),
            unmatched_cols: (0..n_c).collect(),
        };
    }
    // cost of padded cell (1-based i, j), None when forbidden
    let cost = |i: usize, j: usize| -> Option<f64> {
        let (r, c) = (i - 1, j - 1);
        if r < n_r && c < n_c {
            m.score(r, c).map(|s| -s)
        } else {
            Some(0.0)
        }
    };
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                if let Some(c) = cost(i0, j) {
                    let cur = c - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            debug_assert!(j1 != 0, "padded problem always has a free column");
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![None; n_r];
    for j in 1..=n_c {
        let i = p[j];
        if i >= 1 && i <= n_r && m.score(i - 1, j - 1).is_some() {
            row_to_col[i - 1] = Some(j - 1);
        }
    }
    let mut out = Assignment::default();
    let mut col_used = vec![false; n_c];
    for (i, c) in row_to_col.iter().enumerate() {
        match c {
            Some(j) => {
                out.matched.push((i, *j));
                col_used[*j] = true;
            }
            None => out.unmatched_rows.push(i),
        }
    }
    out.unmatched_cols = (0..n_c).filter(|&j| !col_used[j]).collect();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corner_conversion() {
        assert_eq!(cxcyah_to_corners([10.0, 10.0, 1.0, 4.0]).unwrap(), [8.0, 8.0, 12.0, 12.0]);
        assert_eq!(cxcyah_to_corners([0.0, 0.0, 2.0, 2.0]).unwrap(), [-2.0, -1.0, 2.0, 1.0]);
        assert!(cxcyah_to_corners([0.0, 0.0, 0.0, 2.0]).is_err());
        assert!(cxcyah_to_corners([0.0, 0.0, 1.0, -2.0]).is_err());
    }

    #[test]
    fn iou_values() {
        let a = [0.0, 0.0, 2.0, 2.0];
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &[5.0, 5.0, 6.0, 6.0]), 0.0);
        assert!((iou(&a, &[1.0, 0.0, 3.0, 2.0]) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn trend_cases() {
        let prev = [0.0; 8];
        let mut pred = [0.0; 8];
        pred[0] = 1.0;
        // default: v_det = pred - det
        assert_eq!(trend_sim(&pred, &prev, &[0.0, 0.0, 1.0, 1.0], TrendSign::PredMinusDet), 1.0);
        assert_eq!(trend_sim(&pred, &prev, &[1.0, -1.0, 1.0, 1.0], TrendSign::PredMinusDet), 0.0);
        assert_eq!(trend_sim(&pred, &prev, &[2.0, 0.0, 1.0, 1.0], TrendSign::DetMinusPred), 1.0);
        assert_eq!(trend_sim(&prev, &prev, &[2.0, 0.0, 1.0, 1.0], TrendSign::PredMinusDet), 0.0);
    }

    #[test]
    fn penalty_values() {
        let mut s = [1.0; 8];
        assert_eq!(uncertainty_penalty(&[0.0; 8], &s, &[0.0, 0.0, 1.0, 1.0]), 1.0);
        assert!((uncertainty_penalty(&[0.0; 8], &s, &[0.6, 0.8, 1.0, 1.0]) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((uncertainty_penalty(&[0.0; 8], &s, &[3.0, 0.0, 1.0, 1.0]) - 1.234_098e-4).abs() < 1e-9);
        s[0] = 1e-7;
        s[1] = 1e-7;
        assert!((uncertainty_penalty(&[0.0; 8], &s, &[0.01, 0.0, 1.0, 1.0]) - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn score_examples() {
        let w = ScoreWeights::default();
        assert_eq!(match_score(1.0, 1.0, 1.0, &w), 1.0);
        assert_eq!(match_score(0.0, 0.0, 1.0, &w), 0.1);
        let s = match_score(0.5, -1.0, (-1.0f64).exp(), &w);
        assert!((s - 0.186_787_944_117_144_2).abs() < 1e-15);
    }

    #[test]
    fn small_assignments() {
        let one = ScoreMatrix::build(1, 1, 0.3, |_, _| Some((0.8, 0.9)));
        assert_eq!(solve_assignment(&one).matched, vec![(0, 0)]);
        let gated = ScoreMatrix::build(1, 1, 0.3, |_, _| Some((0.2, 0.9)));
        let a = solve_assignment(&gated);
        assert!(a.matched.is_empty());
        assert_eq!((a.unmatched_rows, a.unmatched_cols), (vec![0], vec![0]));
        let m = ScoreMatrix::from_cells(2, 2, vec![Some(0.9), Some(0.8), Some(0.8), Some(0.1)]).unwrap();
        assert_eq!(solve_assignment(&m).matched, vec![(0, 1), (1, 0)]);
        let empty = ScoreMatrix::from_cells(0, 3, vec![]).unwrap();
        assert_eq!(solve_assignment(&empty).unmatched_cols, vec![0, 1, 2]);
    }
}
