//! Frame-by-frame tracking: predict, fuse, associate in two stages, manage
//! track lifecycles.

use std::io::Write;

use crate::association::{
    cxcyah_to_corners, iou, match_score, solve_assignment, trend_sim, uncertainty_penalty, ScoreMatrix, ScoreWeights,
    TrendSign,
};
use crate::deform_mamba::TrajectoryWindow;
use crate::error::{Error, Result};
use crate::kalman::{KalmanFilter, KalmanTrackState, MotionState, MEAS_DIM, STATE_DIM};
use crate::model::{FusionMode, MotionModel, PredictionInput};
use crate::mot_io::{by_frame, parse_rows, MotRow};
use crate::motion_gate::FusedPrediction;
use crate::tensor::Tape;

/// Length of the per-track history fed to the learned predictor.
pub const HISTORY_LEN: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    /// `[cx, cy, a, h]`.
    pub bbox: [f64; MEAS_DIM],
    pub confidence: f64,
    pub class: u32,
}

impl Detection {
    pub fn new(bbox: [f64; MEAS_DIM], confidence: f64) -> Self {
        Detection {
            bbox,
            confidence,
            class: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        let [_, _, a, h] = self.bbox;
        if !self.bbox.iter().all(|v| v.is_finite()) || a <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidMeasurement(format!("detection box {:?}", self.bbox)));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::InvalidMeasurement(format!("confidence {}", self.confidence)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrackStatus {
    Tentative,
    Confirmed,
    Removed,
}

#[derive(Clone, Debug)]
pub struct Track {
    pub id: u64,
    pub status: TrackStatus,
    pub kalman: KalmanTrackState<f64>,
    /// Oldest first, at most [`HISTORY_LEN`] entries.
    pub history: Vec<MotionState<f64>>,
    /// Prediction made for the current frame.
    pub last_fused: Option<FusedPrediction<f64>>,
    /// Prediction made for the previous frame.
    pub prev_fused: Option<FusedPrediction<f64>>,
    pub hits: u32,
    pub time_since_update: u32,
    pub class: u32,
    pub last_confidence: f64,
}

impl Track {
    /// Appends `bbox` to the history with velocities taken as the difference to
    /// the previous entry, evicting the oldest entry past capacity.
    pub fn history_push(&mut self, bbox: [f64; MEAS_DIM]) {
        let mut s = MotionState::from_box(bbox);
        if let Some(prev) = self.history.last() {
            for k in 0..MEAS_DIM {
                s.0[MEAS_DIM + k] = bbox[k] - prev.0[k];
            }
        }
        self.history.push(s);
        if self.history.len() > HISTORY_LEN {
            self.history.remove(0);
        }
    }

    pub fn is_live(&self) -> bool {
        self.status != TrackStatus::Removed
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackerConfig {
    pub tau_high: f64,
    pub tau_low: f64,
    pub iou_gate: f64,
    pub n_init: u32,
    pub max_age: u32,
    pub weights: ScoreWeights,
    pub trend_sign: TrendSign,
    pub fusion: FusionMode,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            tau_high: 0.6,
            tau_low: 0.1,
            iou_gate: 0.3,
            n_init: 3,
            max_age: 30,
            weights: ScoreWeights::default(),
            trend_sign: TrendSign::PredMinusDet,
            fusion: FusionMode::Gate,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.tau_low && self.tau_low < self.tau_high && self.tau_high <= 1.0) {
            return Err(Error::Config(format!(
                "thresholds must satisfy 0 <= tau_low < tau_high <= 1 (got {}, {})",
                self.tau_low, self.tau_high
            )));
        }
        if !(0.0..=1.0).contains(&self.iou_gate) {
            return Err(Error::Config(format!("iou_gate {} outside [0, 1]", self.iou_gate)));
        }
        if let FusionMode::FixedAlpha(a) = self.fusion {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("fixed alpha {a} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// One confirmed track reported for a frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackOutput {
    pub frame: u64,
    pub id: u64,
    /// Kalman posterior `[cx, cy, a, h]`.
    pub bbox: [f64; MEAS_DIM],
    pub confidence: f64,
}

/// Bookkeeping of the most recent step, indices refer to the input slice.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepStats {
    pub matched: Vec<(u64, usize)>,
    pub unmatched_tracks: Vec<u64>,
    pub spawned: Vec<usize>,
    /// High-confidence leftovers never exist; these are low-confidence
    /// detections that matched nothing plus everything below `tau_low`.
    pub discarded: Vec<usize>,
}

pub struct Tracker {
    pub config: TrackerConfig,
    pub kalman: KalmanFilter,
    model: Option<MotionModel<f64>>,
    tracks: Vec<Track>,
    next_id: u64,
    last_frame: Option<u64>,
    stats: StepStats,
}

impl Tracker {
    /// `model` may be `None` only in [`FusionMode::KalmanOnly`].
    pub fn new(config: TrackerConfig, model: Option<MotionModel<f64>>) -> Result<Self> {
        config.validate()?;
        if model.is_none() && config.fusion != FusionMode::KalmanOnly {
            return Err(Error::Config("a learned model is required unless fusion is Kalman-only".into()));
        }
        Ok(Tracker {
            config,
            kalman: KalmanFilter::default(),
            model,
            tracks: Vec::new(),
            next_id: 1,
            last_frame: None,
            stats: StepStats::default(),
        })
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn last_stats(&self) -> &StepStats {
        &self.stats
    }

    /// Fused predictions for every live track, in track order.
    fn predict_all(&mut self) -> Result<()> {
        for t in &mut self.tracks {
            t.kalman = self.kalman.predict(&t.kalman);
        }
        let inputs: Vec<PredictionInput<f64>> = self
            .tracks
            .iter()
            .map(|t| {
                Ok(PredictionInput {
                    window: TrajectoryWindow::from_history(&t.history, HISTORY_LEN)?,
                    x_kal: t.kalman.mean.0,
                    sigma_kal: self.kalman.sigma_diag(&t.kalman),
                })
            })
            .collect::<Result<_>>()?;
        let fused: Vec<FusedPrediction<f64>> = match (&self.model, self.config.fusion) {
            (_, FusionMode::KalmanOnly) | (None, _) => inputs
                .iter()
                .map(|i| FusedPrediction {
                    x_fuse: i.x_kal,
                    sigma_fuse: i.sigma_kal,
                    alpha: [1.0; STATE_DIM],
                })
                .collect(),
            (Some(model), mode) if !inputs.is_empty() => {
                let mut tape = Tape::inference();
                let b = model.forward(&mut tape, &inputs, mode)?;
                let row = |v, i: usize| -> [f64; STATE_DIM] { std::array::from_fn(|k| tape.value(v)[i * STATE_DIM + k]) };
                (0..inputs.len())
                    .map(|i| FusedPrediction {
                        x_fuse: row(b.x_fuse, i),
                        sigma_fuse: row(b.sigma_fuse, i),
                        alpha: row(b.alpha, i),
                    })
                    .collect()
            }
            _ => Vec::new(),
        };
        for (t, f) in self.tracks.iter_mut().zip(fused) {
            t.prev_fused = t.last_fused.take();
            t.last_fused = Some(f);
        }
        Ok(())
    }

    fn score_matrix(&self, rows: &[usize], dets: &[Detection], cols: &[usize], full: bool) -> ScoreMatrix {
        let c = &self.config;
        ScoreMatrix::build(rows.len(), cols.len(), c.iou_gate, |i, j| {
            let t = &self.tracks[rows[i]];
            let d = &dets[cols[j]];
            if t.class != d.class {
                return None;
            }
            let f = t.last_fused.as_ref()?;
            let pb = cxcyah_to_corners([f.x_fuse[0], f.x_fuse[1], f.x_fuse[2], f.x_fuse[3]]).ok()?;
            let db = cxcyah_to_corners(d.bbox).ok()?;
            let o = iou(&pb, &db);
            if !full {
                return Some((o, o));
            }
            let trend = t
                .prev_fused
                .as_ref()
                .map_or(0.0, |p| trend_sim(&f.x_fuse, &p.x_fuse, &d.bbox, c.trend_sign));
            let pen = uncertainty_penalty(&f.x_fuse, &f.sigma_fuse, &d.bbox);
            Some((o, match_score(o, trend, pen, &c.weights)))
        })
    }

    /// Processes the detections of `frame`, which must directly follow the
    /// previous frame.
    pub fn step(&mut self, frame: u64, dets: &[Detection]) -> Result<Vec<TrackOutput>> {
        if let Some(last) = self.last_frame {
            if frame != last + 1 {
                return Err(Error::Sequencing {
                    expected: last + 1,
                    got: frame,
                });
            }
        }
        for d in dets {
            d.validate()?;
        }
        self.predict_all()?;
        let c = self.config;
        let mut stats = StepStats::default();

        let high: Vec<usize> = (0..dets.len()).filter(|&j| dets[j].confidence >= c.tau_high).collect();
        let low: Vec<usize> = (0..dets.len())
            .filter(|&j| dets[j].confidence >= c.tau_low && dets[j].confidence < c.tau_high)
            .collect();
        stats.discarded.extend((0..dets.len()).filter(|&j| dets[j].confidence < c.tau_low));

        // stage 1: every live track against confident detections, full score
        let rows: Vec<usize> = (0..self.tracks.len()).collect();
        let m1 = self.score_matrix(&rows, dets, &high, true);
        let a1 = solve_assignment(&m1);
        let mut matches: Vec<(usize, usize)> = a1.matched.iter().map(|&(i, j)| (rows[i], high[j])).collect();
        let left_tracks: Vec<usize> = a1.unmatched_rows.iter().map(|&i| rows[i]).collect();
        let left_high: Vec<usize> = a1.unmatched_cols.iter().map(|&j| high[j]).collect();

        // stage 2: what is left against weak detections, IoU only
        let m2 = self.score_matrix(&left_tracks, dets, &low, false);
        let a2 = solve_assignment(&m2);
        matches.extend(a2.matched.iter().map(|&(i, j)| (left_tracks[i], low[j])));
        let unmatched: Vec<usize> = a2.unmatched_rows.iter().map(|&i| left_tracks[i]).collect();
        stats.discarded.extend(a2.unmatched_cols.iter().map(|&j| low[j]));
        stats.discarded.sort_unstable();

        for &(ti, dj) in &matches {
            let d = dets[dj];
            let t = &mut self.tracks[ti];
            t.kalman = self.kalman.update(&t.kalman, d.bbox)?;
            t.history_push(t.kalman.mean.bbox());
            t.hits += 1;
            t.time_since_update = 0;
            t.last_confidence = d.confidence;
            if t.status == TrackStatus::Tentative && t.hits >= c.n_init {
                t.status = TrackStatus::Confirmed;
            }
            stats.matched.push((t.id, dj));
        }
        for &ti in &unmatched {
            let t = &mut self.tracks[ti];
            t.time_since_update += 1;
            t.hits = 0;
            let f = t.last_fused.map(|f| f.x_fuse).filter(|x| x.iter().all(|v| v.is_finite()));
            let guess = f.unwrap_or(t.kalman.mean.0);
            t.history_push([guess[0], guess[1], guess[2], guess[3]]);
            match t.status {
                TrackStatus::Tentative => t.status = TrackStatus::Removed,
                TrackStatus::Confirmed if t.time_since_update > c.max_age => t.status = TrackStatus::Removed,
                _ => {}
            }
            stats.unmatched_tracks.push(t.id);
        }
        for &dj in &left_high {
            let d = dets[dj];
            let kalman = self.kalman.initiate(d.bbox)?;
            let mut t = Track {
                id: self.next_id,
                status: if c.n_init <= 1 {
                    TrackStatus::Confirmed
                } else {
                    TrackStatus::Tentative
                },
                kalman,
                history: Vec::with_capacity(HISTORY_LEN + 1),
                last_fused: None,
                prev_fused: None,
                hits: 1,
                time_since_update: 0,
                class: d.class,
                last_confidence: d.confidence,
            };
            t.history_push(d.bbox);
            self.next_id += 1;
            self.tracks.push(t);
            stats.spawned.push(dj);
        }
        self.tracks.retain(Track::is_live);
        self.last_frame = Some(frame);
        self.stats = stats;

        let mut out: Vec<TrackOutput> = self
            .tracks
            .iter()
            .filter(|t| t.status == TrackStatus::Confirmed && t.time_since_update == 0)
            .map(|t| TrackOutput {
                frame,
                id: t.id,
                bbox: t.kalman.mean.bbox(),
                confidence: t.last_confidence,
            })
            .collect();
        out.sort_by_key(|o| o.id);
        Ok(out)
    }
}

/// Runs `tracker` over frames `1..=last_frame`; frames without detections
/// are stepped with an empty list.
pub fn track_sequence(tracker: &mut Tracker, dets: &[MotRow], last_frame: u64) -> Result<Vec<TrackOutput>> {
    let mut out = Vec::new();
    for (i, rows) in by_frame(dets, last_frame).into_iter().enumerate() {
        let d: Vec<Detection> = rows.iter().map(|r| Detection::new(r.cxcyah(), r.conf)).collect();
        out.extend(tracker.step(i as u64 + 1, &d)?);
    }
    Ok(out)
}

/// Results as MOT rows, exactly as they read back from the written file.
pub fn output_rows(rows: &[TrackOutput]) -> Vec<MotRow> {
    let mut buf = Vec::new();
    write_mot_results(&mut buf, rows).expect("writing to memory");
    let text = String::from_utf8(buf).expect("ascii output");
    parse_rows(&text, std::path::Path::new("<results>")).expect("results parse back")
}

/// Writes `frame,id,left,top,width,height,conf,-1,-1,-1` lines.
pub fn write_mot_results<W: Write>(mut w: W, rows: &[TrackOutput]) -> std::io::Result<()> {
    for r in rows {
        let [cx, cy, a, h] = r.bbox;
        let wd = a * h;
        writeln!(
            w,
            "{},{},{:.2},{:.2},{:.2},{:.2},{:.2},-1,-1,-1",
            r.frame,
            r.id,
            cx - wd / 2.0,
            cy - h / 2.0,
            wd,
            h,
            r.confidence
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kalman_tracker() -> Tracker {
        let config = TrackerConfig {
            fusion: FusionMode::KalmanOnly,
            ..Default::default()
        };
        Tracker::new(config, None).unwrap()
    }

    #[test]
    fn lifecycle_start_and_confirmation() {
        let mut tr = kalman_tracker();
        let d = [Detection::new([100.0, 100.0, 0.5, 40.0], 0.9)];
        assert!(tr.step(1, &d).unwrap().is_empty());
        assert_eq!(tr.tracks().len(), 1);
        assert_eq!(tr.tracks()[0].status, TrackStatus::Tentative);
        assert!(tr.step(2, &d).unwrap().is_empty());
        let out = tr.step(3, &d).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].id, 1);
    }

    #[test]
    fn removal_after_max_age() {
        let mut tr = kalman_tracker();
        let d = [Detection::new([100.0, 100.0, 0.5, 40.0], 0.9)];
        for f in 1..=3 {
            tr.step(f, &d).unwrap();
        }
        for f in 4..=33 {
            assert!(tr.step(f, &[]).unwrap().is_empty());
            assert_eq!(tr.tracks().len(), 1, "frame {f}");
        }
        tr.step(34, &[]).unwrap();
        assert!(tr.tracks().is_empty());
    }

    #[test]
    fn out_of_order_frame_rejected() {
        let mut tr = kalman_tracker();
        tr.step(5, &[]).unwrap();
        assert!(matches!(tr.step(7, &[]), Err(Error::Sequencing { expected: 6, got: 7 })));
    }

    #[test]
    fn history_ring_and_velocity() {
        let mut tr = kalman_tracker();
        tr.step(1, &[Detection::new([0.0, 0.0, 1.0, 10.0], 0.9)]).unwrap();
        let t = &mut tr.tracks[0];
        assert_eq!(t.history[0].velocity(), [0.0; 4]);
        t.history_push([3.0, 4.0, 1.0, 10.0]);
        assert_eq!(t.history[1].velocity(), [3.0, 4.0, 0.0, 0.0]);
        for k in 0..9 {
            t.history_push([k as f64, 0.0, 1.0, 10.0]);
        }
        assert_eq!(t.history.len(), 8);
        assert_eq!(t.history[7].x(), 8.0);
    }

    #[test]
    fn result_line_format() {
        let mut buf = Vec::new();
        let row = TrackOutput {
            frame: 3,
            id: 7,
            bbox: [50.0, 40.0, 0.5, 20.0],
            confidence: 0.875,
        };
        write_mot_results(&mut buf, &[row]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "3,7,45.00,30.00,10.00,20.00,0.88,-1,-1,-1\n");
    }
}
