//! Seeded synthetic motion scenes with ground truth and corrupted detections.
//!
//! Every object follows a program of motion segments integrated one frame at a
//! time; boxes bounce off the image border. Detections are the true boxes with
//! Gaussian center noise, relative size noise, random misses and uniformly
//! scattered false positives. All randomness comes from [`SplitMix64`] streams
//! derived from the scenario seed, so the same scenario always yields the same
//! bytes.

mod presets;

pub use presets::{preset, PRESETS};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mot_io::{self, MotRow};
use crate::rng::SplitMix64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Segment {
    ConstantVelocity { frames: u32 },
    /// Velocity rotates by `rate` radians every frame.
    Turn { frames: u32, rate: f64 },
    /// Velocity changes by `accel` px/frame² every frame, capped at `v_max`.
    Accel { frames: u32, accel: [f64; 2] },
    /// Object halts; the previous velocity resumes afterwards.
    Stop { frames: u32 },
}

impl Segment {
    pub fn frames(&self) -> u32 {
        match *self {
            Segment::ConstantVelocity { frames }
            | Segment::Turn { frames, .. }
            | Segment::Accel { frames, .. }
            | Segment::Stop { frames } => frames,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectProgram {
    /// Box center at frame 1.
    pub start: [f64; 2],
    pub velocity: [f64; 2],
    pub aspect: f64,
    pub height: f64,
    /// Durations sum to the scenario's frame count.
    pub segments: Vec<Segment>,
    /// `(first_frame, length)` intervals during which the object is invisible.
    pub occlusions: Vec<(u32, u32)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionScenario {
    pub preset: String,
    pub frames: u32,
    pub width: f64,
    pub height: f64,
    pub objects: Vec<ObjectProgram>,
    /// Center noise standard deviation (px).
    pub sigma_det: f64,
    /// Relative standard deviation of width and height noise.
    pub size_noise_rel: f64,
    pub p_miss: f64,
    /// Mean number of false positives per frame.
    pub fp_rate: f64,
    pub v_max: f64,
    pub seed: u64,
}

impl MotionScenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Scenario(m));
        if self.frames == 0 {
            return bad("frame count must be positive".into());
        }
        if !(self.width > 0.0 && self.height > 0.0) {
            return bad(format!("image extent {}x{} must be positive", self.width, self.height));
        }
        if !(0.0..=1.0).contains(&self.p_miss) {
            return bad(format!("p_miss {} outside [0, 1]", self.p_miss));
        }
        if !(self.sigma_det >= 0.0 && self.size_noise_rel >= 0.0 && self.fp_rate >= 0.0 && self.v_max > 0.0) {
            return bad("noise levels and rates must be non-negative, v_max positive".into());
        }
        for (i, o) in self.objects.iter().enumerate() {
            let total: u64 = o.segments.iter().map(|s| s.frames() as u64).sum();
            if total != self.frames as u64 {
                return bad(format!("object {i}: segments cover {total} frames, scenario has {}", self.frames));
            }
            if !(o.aspect > 0.0 && o.height > 0.0) || o.aspect * o.height >= self.width || o.height >= self.height {
                return bad(format!("object {i}: box {}x{} does not fit the image", o.aspect * o.height, o.height));
            }
            if let Some(&(s, l)) = o.occlusions.iter().find(|&&(s, l)| s == 0 || l == 0) {
                return bad(format!("object {i}: occlusion ({s}, {l}) must start at frame >= 1 with length >= 1"));
            }
        }
        Ok(())
    }
}

/// Detection with its origin; `source` is the ground-truth id or `None` for a
/// false positive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthDetection {
    pub row: MotRow,
    pub source: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    pub scenario: MotionScenario,
    /// Visible ground-truth boxes ordered by frame, then id (ids start at 1).
    pub gt: Vec<MotRow>,
    /// Ordered by frame; within a frame true detections precede false ones.
    pub detections: Vec<SynthDetection>,
}

impl SyntheticSequence {
    pub fn det_rows(&self) -> Vec<MotRow> {
        self.detections.iter().map(|d| d.row).collect()
    }
}

/// Per-object ground-truth trajectory `[cx, cy]` for frames `1..=frames`
/// (occlusions not applied).
pub fn integrate(scn: &MotionScenario, obj: &ObjectProgram) -> Vec<[f64; 2]> {
    let half_w = 0.5 * obj.aspect * obj.height;
    let half_h = 0.5 * obj.height;
    let lo = [half_w, half_h];
    let hi = [scn.width - half_w, scn.height - half_h];
    let mut p = [obj.start[0].clamp(lo[0], hi[0]), obj.start[1].clamp(lo[1], hi[1])];
    let mut v = obj.velocity;
    let mut resume: Option<[f64; 2]> = None;
    let mut out = Vec::with_capacity(scn.frames as usize);
    out.push(p);
    let mut seg_of_frame = obj.segments.iter().flat_map(|s| std::iter::repeat_n(*s, s.frames() as usize));
    seg_of_frame.next();
    for seg in seg_of_frame {
        if !matches!(seg, Segment::Stop { .. }) {
            if let Some(r) = resume.take() {
                v = r;
            }
        }
        match seg {
            Segment::ConstantVelocity { .. } => {}
            Segment::Turn { rate, .. } => {
                let (s, c) = rate.sin_cos();
                v = [c * v[0] - s * v[1], s * v[0] + c * v[1]];
            }
            Segment::Accel { accel, .. } => {
                v = [v[0] + accel[0], v[1] + accel[1]];
                let speed = v[0].hypot(v[1]);
                if speed > scn.v_max {
                    v = [v[0] * scn.v_max / speed, v[1] * scn.v_max / speed];
                }
            }
            Segment::Stop { .. } => {
                if resume.is_none() {
                    resume = Some(v);
                }
                v = [0.0, 0.0];
            }
        }
        for k in 0..2 {
            p[k] += v[k];
            if p[k] < lo[k] {
                p[k] = 2.0 * lo[k] - p[k];
                v[k] = -v[k];
            } else if p[k] > hi[k] {
                p[k] = 2.0 * hi[k] - p[k];
                v[k] = -v[k];
            }
            p[k] = p[k].clamp(lo[k], hi[k]);
        }
        out.push(p);
    }
    out
}

fn occluded(obj: &ObjectProgram, frame: u32) -> bool {
    obj.occlusions.iter().any(|&(s, l)| frame >= s && frame < s + l)
}

pub fn generate(scn: &MotionScenario) -> Result<SyntheticSequence> {
    scn.validate()?;
    let tracks: Vec<Vec<[f64; 2]>> = scn.objects.iter().map(|o| integrate(scn, o)).collect();
    let mut rng = SplitMix64::derived(scn.seed, "synth.detections");
    let mut gt = Vec::new();
    let mut detections = Vec::new();
    for f in 1..=scn.frames {
        for (i, (obj, traj)) in scn.objects.iter().zip(&tracks).enumerate() {
            if occluded(obj, f) {
                continue;
            }
            let [cx, cy] = traj[f as usize - 1];
            let (w, h) = (obj.aspect * obj.height, obj.height);
            let id = i as u64 + 1;
            let tlwh = [cx - w / 2.0, cy - h / 2.0, w, h];
            gt.push(MotRow {
                frame: f as u64,
                id: id as i64,
                tlwh,
                conf: 1.0,
            });
            // fixed draw count per opportunity keeps streams aligned across settings
            let missed = rng.bernoulli(scn.p_miss);
            let (nx, ny) = (rng.normal(), rng.normal());
            let (nw, nh) = (rng.normal(), rng.normal());
            let conf = rng.uniform_range(0.7, 1.0);
            if missed {
                continue;
            }
            let row = if scn.sigma_det == 0.0 && scn.size_noise_rel == 0.0 {
                MotRow { conf, ..gt[gt.len() - 1] }
            } else {
                let dw = w * (1.0 + scn.size_noise_rel * nw).max(0.5);
                let dh = h * (1.0 + scn.size_noise_rel * nh).max(0.5);
                let (dx, dy) = (cx + scn.sigma_det * nx, cy + scn.sigma_det * ny);
                MotRow {
                    frame: f as u64,
                    id: -1,
                    tlwh: [dx - dw / 2.0, dy - dh / 2.0, dw, dh],
                    conf,
                }
            };
            detections.push(SynthDetection {
                row: MotRow { id: -1, ..row },
                source: Some(id),
            });
        }
        for _ in 0..rng.poisson(scn.fp_rate) {
            let h = rng.uniform_range(15.0, 80.0);
            let w = h * rng.uniform_range(0.4, 1.5);
            let cx = rng.uniform_range(w / 2.0, scn.width - w / 2.0);
            let cy = rng.uniform_range(h / 2.0, scn.height - h / 2.0);
            let conf = rng.uniform_range(0.1, 0.5);
            detections.push(SynthDetection {
                row: MotRow {
                    frame: f as u64,
                    id: -1,
                    tlwh: [cx - w / 2.0, cy - h / 2.0, w, h],
                    conf,
                },
                source: None,
            });
        }
    }
    Ok(SyntheticSequence {
        scenario: scn.clone(),
        gt,
        detections,
    })
}

pub const GT_FILE: &str = "gt.txt";
pub const DET_FILE: &str = "det.txt";
pub const ORIGIN_FILE: &str = "det_origin.txt";
pub const SCENARIO_FILE: &str = "scenario.json";

/// Writes `gt.txt`, `det.txt`, `det_origin.txt` (one ground-truth id or `-1`
/// per detection line) and `scenario.json` into `dir`.
pub fn export(seq: &SyntheticSequence, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    mot_io::write_file(&dir.join(GT_FILE), |b| mot_io::write_gt(b, &seq.gt))?;
    mot_io::write_file(&dir.join(DET_FILE), |b| mot_io::write_det(b, &seq.det_rows()))?;
    mot_io::write_file(&dir.join(ORIGIN_FILE), |b| {
        use std::io::Write;
        for d in &seq.detections {
            writeln!(b, "{}", d.source.map_or(-1, |s| s as i64))?;
        }
        Ok(())
    })?;
    let json = serde_json::to_string_pretty(&seq.scenario).map_err(|e| Error::Scenario(e.to_string()))?;
    let path = dir.join(SCENARIO_FILE);
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

/// Reads back a directory written by [`export`].
pub fn load(dir: &Path) -> Result<SyntheticSequence> {
    let path = dir.join(SCENARIO_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let scenario: MotionScenario = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let gt = mot_io::read_rows(&dir.join(GT_FILE))?;
    let dets = mot_io::read_rows(&dir.join(DET_FILE))?;
    let opath = dir.join(ORIGIN_FILE);
    let origins: Vec<Option<u64>> = match std::fs::read_to_string(&opath) {
        Ok(t) => t
            .lines()
            .enumerate()
            .map(|(n, l)| {
                l.trim().parse::<i64>().map(|v| u64::try_from(v).ok()).map_err(|e| Error::Parse {
                    path: opath.clone(),
                    line: n + 1,
                    msg: e.to_string(),
                })
            })
            .collect::<Result<_>>()?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => vec![None; dets.len()],
        Err(e) => return Err(Error::io(&opath, e)),
    };
    if origins.len() != dets.len() {
        return Err(Error::Scenario(format!(
            "{} has {} lines for {} detections",
            opath.display(),
            origins.len(),
            dets.len()
        )));
    }
    Ok(SyntheticSequence {
        scenario,
        gt,
        detections: dets
            .into_iter()
            .zip(origins)
            .map(|(row, source)| SynthDetection { row, source })
            .collect(),
    })
}
