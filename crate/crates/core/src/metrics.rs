//! CLEAR-MOT accuracy and identity F1.
//!
//! Frame matching follows the reference CLEAR procedure: correspondences from
//! earlier frames are kept while they still overlap enough, the remaining pairs
//! are assigned optimally by IoU, and an identity switch is counted whenever a
//! ground-truth object is matched to a different track than the last time it was
//! matched.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::association::{iou, solve_assignment, ScoreMatrix};
use crate::error::{Error, Result};
use crate::mot_io::MotRow;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameStats {
    pub frame: u64,
    pub gt: usize,
    pub hyp: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub idsw: usize,
    /// `(gt id, track id)` correspondences in this frame, sorted.
    pub pairs: Vec<(i64, i64)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameMatching {
    pub frames: Vec<FrameStats>,
}

impl FrameMatching {
    fn total(&self, f: impl Fn(&FrameStats) -> usize) -> usize {
        self.frames.iter().map(f).sum()
    }

    pub fn gt_total(&self) -> usize {
        self.total(|s| s.gt)
    }

    pub fn hyp_total(&self) -> usize {
        self.total(|s| s.hyp)
    }

    pub fn tp(&self) -> usize {
        self.total(|s| s.tp)
    }

    pub fn fp(&self) -> usize {
        self.total(|s| s.fp)
    }

    pub fn fn_(&self) -> usize {
        self.total(|s| s.fn_)
    }

    pub fn idsw(&self) -> usize {
        self.total(|s| s.idsw)
    }
}

fn group(rows: &[MotRow]) -> BTreeMap<u64, Vec<&MotRow>> {
    let mut m: BTreeMap<u64, Vec<&MotRow>> = BTreeMap::new();
    for r in rows {
        m.entry(r.frame).or_default().push(r);
    }
    m
}

pub fn match_frames(gt: &[MotRow], hyp: &[MotRow], iou_threshold: f64) -> FrameMatching {
    let g_by = group(gt);
    let h_by = group(hyp);
    let frames: BTreeSet<u64> = g_by.keys().chain(h_by.keys()).copied().collect();
    let empty = Vec::new();
    let mut last_match: HashMap<i64, i64> = HashMap::new();
    let mut out = FrameMatching::default();
    for f in frames {
        let g = g_by.get(&f).unwrap_or(&empty);
        let h = h_by.get(&f).unwrap_or(&empty);
        let gc: Vec<[f64; 4]> = g.iter().map(|r| r.corners()).collect();
        let hc: Vec<[f64; 4]> = h.iter().map(|r| r.corners()).collect();
        let mut g_used = vec![false; g.len()];
        let mut h_used = vec![false; h.len()];
        let mut pairs = Vec::new();

        // keep last correspondences that still overlap
        for (i, gr) in g.iter().enumerate() {
            if let Some(&t) = last_match.get(&gr.id) {
                if let Some(j) = (0..h.len()).find(|&j| !h_used[j] && h[j].id == t) {
                    if iou(&gc[i], &hc[j]) >= iou_threshold {
                        g_used[i] = true;
                        h_used[j] = true;
                        pairs.push((gr.id, t));
                    }
                }
            }
        }

        let gi: Vec<usize> = (0..g.len()).filter(|&i| !g_used[i]).collect();
        let hj: Vec<usize> = (0..h.len()).filter(|&j| !h_used[j]).collect();
        let cells = gi
            .iter()
            .flat_map(|&i| {
                hj.iter().map(move |&j| (i, j))
            })
            .map(|(i, j)| {
                let o = iou(&gc[i], &hc[j]);
                (o >= iou_threshold).then_some(o)
            })
            .collect();
        let m = ScoreMatrix::from_cells(gi.len(), hj.len(), cells).expect("cell count matches");
        let mut idsw = 0;
        for (a, b) in solve_assignment(&m).matched {
            let (gid, tid) = (g[gi[a]].id, h[hj[b]].id);
            if last_match.get(&gid).is_some_and(|&prev| prev != tid) {
                idsw += 1;
            }
            pairs.push((gid, tid));
        }
        for &(gid, tid) in &pairs {
            last_match.insert(gid, tid);
        }
        pairs.sort_unstable();
        let tp = pairs.len();
        out.frames.push(FrameStats {
            frame: f,
            gt: g.len(),
            hyp: h.len(),
            tp,
            fp: h.len() - tp,
            fn_: g.len() - tp,
            idsw,
            pairs,
        });
    }
    out
}

/// `1 - (FN + FP + IDSW) / GT`, evaluated as `(GT - FN - FP - IDSW) / GT` so the
/// only rounding is the final division.
pub fn mota(m: &FrameMatching) -> Result<f64> {
    let gt = m.gt_total();
    if gt == 0 {
        return Err(Error::UndefinedMetric("MOTA needs at least one ground-truth box".into()));
    }
    let errors = (m.fn_() + m.fp() + m.idsw()) as i64;
    Ok((gt as i64 - errors) as f64 / gt as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IdentityScores {
    pub idtp: usize,
    pub idfp: usize,
    pub idfn: usize,
    pub idf1: f64,
}

/// Identity F1 under the one-to-one gt/track identity matching that maximizes
/// the number of overlapping frames.
pub fn identity_scores(gt: &[MotRow], hyp: &[MotRow], iou_threshold: f64) -> Result<IdentityScores> {
    if gt.is_empty() && hyp.is_empty() {
        return Err(Error::UndefinedMetric("IDF1 of two empty sequences".into()));
    }
    let g_ids: Vec<i64> = gt.iter().map(|r| r.id).collect::<BTreeSet<_>>().into_iter().collect();
    let h_ids: Vec<i64> = hyp.iter().map(|r| r.id).collect::<BTreeSet<_>>().into_iter().collect();
    let g_idx: HashMap<i64, usize> = g_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let h_idx: HashMap<i64, usize> = h_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut overlap = vec![0usize; g_ids.len() * h_ids.len()];
    let h_by = group(hyp);
    for r in gt {
        let Some(hs) = h_by.get(&r.frame) else { continue };
        let gc = r.corners();
        for h in hs {
            if iou(&gc, &h.corners()) >= iou_threshold {
                overlap[g_idx[&r.id] * h_ids.len() + h_idx[&h.id]] += 1;
            }
        }
    }
    let cells = overlap.iter().map(|&c| (c > 0).then_some(c as f64)).collect();
    let m = ScoreMatrix::from_cells(g_ids.len(), h_ids.len(), cells)?;
    let idtp: usize = solve_assignment(&m)
        .matched
        .iter()
        .map(|&(i, j)| overlap[i * h_ids.len() + j])
        .sum();
    let (idfn, idfp) = (gt.len() - idtp, hyp.len() - idtp);
    Ok(IdentityScores {
        idtp,
        idfp,
        idfn,
        idf1: (2 * idtp) as f64 / (gt.len() + hyp.len()) as f64,
    })
}

pub fn idf1(gt: &[MotRow], hyp: &[MotRow], iou_threshold: f64) -> Result<f64> {
    identity_scores(gt, hyp, iou_threshold).map(|s| s.idf1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotSummary {
    pub mota: f64,
    pub idf1: f64,
    pub idsw: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tp: usize,
    pub gt: usize,
    pub hyp: usize,
}

pub fn summarize(gt: &[MotRow], hyp: &[MotRow], iou_threshold: f64) -> Result<MotSummary> {
    let m = match_frames(gt, hyp, iou_threshold);
    Ok(MotSummary {
        mota: mota(&m)?,
        idf1: idf1(gt, hyp, iou_threshold)?,
        idsw: m.idsw(),
        fp: m.fp(),
        fn_: m.fn_(),
        tp: m.tp(),
        gt: m.gt_total(),
        hyp: m.hyp_total(),
    })
}

const COLUMNS: [&str; 9] = ["name", "MOTA", "IDF1", "IDSW", "FP", "FN", "TP", "GT", "HYP"];

fn cells(name: &str, s: &MotSummary) -> [String; 9] {
    [
        name.to_string(),
        format!("{:.4}", s.mota),
        format!("{:.4}", s.idf1),
        s.idsw.to_string(),
        s.fp.to_string(),
        s.fn_.to_string(),
        s.tp.to_string(),
        s.gt.to_string(),
        s.hyp.to_string(),
    ]
}

pub fn summary_csv(rows: &[(String, MotSummary)]) -> String {
    let mut out = COLUMNS.join(",") + "\n";
    for (name, s) in rows {
        out += &cells(name, s).join(",");
        out.push('\n');
    }
    out
}

/// Right-aligned plain-text table with the same columns as the CSV.
pub fn summary_table(rows: &[(String, MotSummary)]) -> String {
    let body: Vec<[String; 9]> = rows.iter().map(|(n, s)| cells(n, s)).collect();
    let widths: Vec<usize> = (0..COLUMNS.len())
        .map(|c| body.iter().map(|r| r[c].len()).chain([COLUMNS[c].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let mut line = |cols: &[String]| {
        let parts: Vec<String> = cols
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&COLUMNS.map(String::from));
    for r in &body {
        line(r);
    }
    out
}
