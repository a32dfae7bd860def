//! Joint training of the learned predictor and the gate on ground-truth
//! trajectories.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::deform_mamba::TrajectoryWindow;
use crate::error::{Error, Result};
use crate::kalman::{KalmanFilter, MotionState, MEAS_DIM, STATE_DIM};
use crate::model::{FusionMode, MotionModel, PredictionInput};
use crate::rng::SplitMix64;
use crate::synth::SyntheticSequence;
use crate::tensor::{clip_global_norm, AdamW, AdamWConfig, Tape, Tensor, Var};
use crate::tracker::HISTORY_LEN;

#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub input: PredictionInput<f64>,
    pub target: MotionState<f64>,
    pub target_frame: u64,
    pub track_id: i64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WindowCounts {
    pub samples: usize,
    /// Tracks without any run of `HISTORY_LEN + 1` consecutive frames.
    pub skipped_tracks: usize,
}

/// Sliding windows of `HISTORY_LEN` consecutive ground-truth states with the
/// following state as target.
///
/// Velocities are frame-to-frame differences (zero at the start of a run). The
/// Kalman context is the prior at the target frame from filtering the track's
/// ground-truth boxes from its first frame, predicting through gaps.
pub fn build_windows(seqs: &[SyntheticSequence], kf: &KalmanFilter) -> Result<(Vec<TrainingSample>, WindowCounts)> {
    let mut samples = Vec::new();
    let mut counts = WindowCounts::default();
    for seq in seqs {
        let mut tracks: BTreeMap<i64, Vec<(u64, [f64; MEAS_DIM])>> = BTreeMap::new();
        for r in &seq.gt {
            tracks.entry(r.id).or_default().push((r.frame, r.cxcyah()));
        }
        for (id, mut boxes) in tracks {
            boxes.sort_by_key(|b| b.0);
            let before = samples.len();
            track_windows(id, &boxes, kf, &mut samples)?;
            if samples.len() == before {
                counts.skipped_tracks += 1;
            }
        }
    }
    counts.samples = samples.len();
    Ok((samples, counts))
}

fn track_windows(id: i64, boxes: &[(u64, [f64; MEAS_DIM])], kf: &KalmanFilter, out: &mut Vec<TrainingSample>) -> Result<()> {
    let Some(&(first, b0)) = boxes.first() else { return Ok(()) };
    // states with finite-difference velocities, reset at gaps
    let states: Vec<MotionState<f64>> = boxes
        .iter()
        .enumerate()
        .map(|(i, &(f, b))| {
            let mut s = MotionState::from_box(b);
            if i > 0 && boxes[i - 1].0 + 1 == f {
                for k in 0..MEAS_DIM {
                    s.0[MEAS_DIM + k] = b[k] - boxes[i - 1].1[k];
                }
            }
            s
        })
        .collect();
    let mut kal = kf.initiate(b0)?;
    let mut frame = first;
    let mut run_start = 0;
    for i in 1..boxes.len() {
        let (f, b) = boxes[i];
        while frame + 1 < f {
            kal = kf.predict(&kal);
            frame += 1;
        }
        kal = kf.predict(&kal);
        frame = f;
        if boxes[i - 1].0 + 1 != f {
            run_start = i;
        }
        if i - run_start >= HISTORY_LEN {
            out.push(TrainingSample {
                input: PredictionInput {
                    window: TrajectoryWindow::from_history(&states[i - HISTORY_LEN..i], HISTORY_LEN)?,
                    x_kal: kal.mean.0,
                    sigma_kal: kf.sigma_diag(&kal),
                },
                target: states[i],
                target_frame: f,
                track_id: id,
            });
        }
        kal = kf.update(&kal, b)?;
    }
    Ok(())
}

/// Windows that mimic a track coasting through an occlusion, so the model sees
/// at training time what the tracker feeds it after missed frames.
///
/// For every target state with enough consecutive history, a gap length
/// `k` in `1..=max_gap` is drawn. The Kalman filter is updated on ground truth
/// up to `k` frames before the target and then only predicts. The window ends
/// with the last updated state followed by the `k - 1` Kalman priors of the
/// missed frames, the way the tracker extends a history on a miss.
pub fn occlusion_windows(seqs: &[SyntheticSequence], kf: &KalmanFilter, max_gap: usize, seed: u64) -> Result<Vec<TrainingSample>> {
    let mut rng = SplitMix64::derived(seed, "training.occlusion_windows");
    let mut out = Vec::new();
    if max_gap == 0 {
        return Ok(out);
    }
    for seq in seqs {
        let mut tracks: BTreeMap<i64, Vec<(u64, [f64; MEAS_DIM])>> = BTreeMap::new();
        for r in &seq.gt {
            tracks.entry(r.id).or_default().push((r.frame, r.cxcyah()));
        }
        for (id, mut boxes) in tracks {
            boxes.sort_by_key(|b| b.0);
            track_occlusion_windows(id, &boxes, kf, max_gap, &mut rng, &mut out)?;
        }
    }
    Ok(out)
}

fn track_occlusion_windows(
    id: i64,
    boxes: &[(u64, [f64; MEAS_DIM])],
    kf: &KalmanFilter,
    max_gap: usize,
    rng: &mut SplitMix64,
    out: &mut Vec<TrainingSample>,
) -> Result<()> {
    let Some(&(_, b0)) = boxes.first() else { return Ok(()) };
    let state = |j: usize| {
        let mut s = MotionState::from_box(boxes[j].1);
        if j > 0 && boxes[j - 1].0 + 1 == boxes[j].0 {
            for d in 0..MEAS_DIM {
                s.0[MEAS_DIM + d] = boxes[j].1[d] - boxes[j - 1].1[d];
            }
        }
        s
    };
    // posterior after each ground-truth box
    let mut posts = Vec::with_capacity(boxes.len());
    let mut kal = kf.initiate(b0)?;
    posts.push(kal);
    for j in 1..boxes.len() {
        for _ in boxes[j - 1].0..boxes[j].0 {
            kal = kf.predict(&kal);
        }
        kal = kf.update(&kal, boxes[j].1)?;
        posts.push(kal);
    }
    // consecutive[j]: length of the run of consecutive frames ending at j
    let mut consecutive = vec![1usize; boxes.len()];
    for j in 1..boxes.len() {
        if boxes[j - 1].0 + 1 == boxes[j].0 {
            consecutive[j] = consecutive[j - 1] + 1;
        }
    }
    for i in 1..boxes.len() {
        let k = 1 + rng.below(max_gap as u64) as usize;
        // HISTORY_LEN real states, k frames of coasting, one more for the first velocity
        if consecutive[i] < HISTORY_LEN + k + 1 {
            continue;
        }
        let last = i - k;
        let mut hist: Vec<MotionState<f64>> = (last + 1 - HISTORY_LEN..=last).map(state).collect();
        let mut prior = posts[last];
        for step in 0..k {
            prior = kf.predict(&prior);
            if step + 1 < k {
                let b = prior.mean.bbox();
                let prev = hist[hist.len() - 1].bbox();
                let mut s = MotionState::from_box(b);
                for d in 0..MEAS_DIM {
                    s.0[MEAS_DIM + d] = b[d] - prev[d];
                }
                hist.push(s);
            }
        }
        out.push(TrainingSample {
            input: PredictionInput {
                window: TrajectoryWindow::from_history(&hist[hist.len() - HISTORY_LEN..], HISTORY_LEN)?,
                x_kal: prior.mean.0,
                sigma_kal: kf.sigma_diag(&prior),
            },
            target: state(i),
            target_frame: boxes[i].0,
            track_id: id,
        });
    }
    Ok(())
}

/// `sum_i |x_i - gt_i|`.
pub fn loss_state(x: &[f64; STATE_DIM], gt: &[f64; STATE_DIM]) -> f64 {
    x.iter().zip(gt).map(|(a, b)| (a - b).abs()).sum()
}

/// `sum_i (x_i - gt_i)^2 / (2 sigma_i^2) + ln sigma_i`.
pub fn loss_conf(x: &[f64; STATE_DIM], gt: &[f64; STATE_DIM], sigma: &[f64; STATE_DIM]) -> f64 {
    (0..STATE_DIM)
        .map(|i| 0.5 * (x[i] - gt[i]).powi(2) / (sigma[i] * sigma[i]) + sigma[i].ln())
        .sum()
}

pub fn loss_total(l_state: f64, l_conf: f64, cfg: &TrainConfig) -> f64 {
    cfg.lambda1 * l_state + cfg.lambda2 * l_conf
}

/// Batch mean of the per-sample L1 state loss; `x` is `[B, 8]`.
pub fn loss_state_tape(tape: &mut Tape<f64>, x: Var, gt: Var) -> Result<Var> {
    let b = tape.shape(x)[0] as f64;
    let d = tape.sub(x, gt)?;
    let a = tape.abs(d)?;
    let s = tape.sum(a);
    Ok(tape.scale(s, 1.0 / b))
}

/// Batch mean of the per-sample Gaussian negative log-likelihood.
pub fn loss_conf_tape(tape: &mut Tape<f64>, x: Var, gt: Var, sigma: Var) -> Result<Var> {
    let b = tape.shape(x)[0] as f64;
    let d = tape.sub(x, gt)?;
    let d2 = tape.square(d)?;
    let s2 = tape.square(sigma)?;
    let q = tape.div(d2, s2)?;
    let q = tape.scale(q, 0.5);
    let l = tape.log(sigma)?;
    let t = tape.add(q, l)?;
    let s = tape.sum(t);
    Ok(tape.scale(s, 1.0 / b))
}

/// Which prediction the state loss supervises.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StateLossTarget {
    #[default]
    Fused,
    Mamba,
    Both,
}

impl std::str::FromStr for StateLossTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(StateLossTarget::Fused),
            "mamba" => Ok(StateLossTarget::Mamba),
            "both" => Ok(StateLossTarget::Both),
            _ => Err(Error::Config(format!("state_loss_target must be fused, mamba or both, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for StateLossTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StateLossTarget::Fused => "fused",
            StateLossTarget::Mamba => "mamba",
            StateLossTarget::Both => "both",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: u32,
    pub warmup_epochs: u32,
    pub lambda1: f64,
    pub lambda2: f64,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub state_loss_target: StateLossTarget,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch: 64,
            epochs: 50,
            warmup_epochs: 2,
            lambda1: 1.0,
            lambda2: 0.2,
            clip_norm: 5.0,
            weight_decay: 0.01,
            state_loss_target: StateLossTarget::Fused,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warm-up: `lr * step / warmup_steps` for `step <= warmup_steps`
/// (steps counted from 1), `lr` afterwards.
pub fn lr_at(step: u64, warmup_steps: u64, lr: f64) -> f64 {
    if step < warmup_steps {
        lr * step as f64 / warmup_steps as f64
    } else {
        lr
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLoss {
    pub state: f64,
    pub conf: f64,
    pub total: f64,
}

/// Builds the loss of one batch on `tape`; returns the total node and values.
pub fn batch_loss(
    tape: &mut Tape<f64>,
    model: &MotionModel<f64>,
    store: &crate::tensor::ParamStore<f64>,
    batch: &[&TrainingSample],
    cfg: &TrainConfig,
) -> Result<(Var, BatchLoss)> {
    let inputs: Vec<PredictionInput<f64>> = batch.iter().map(|s| s.input.clone()).collect();
    let out = model.forward_with(tape, store, &inputs, FusionMode::Gate)?;
    let gt: Vec<f64> = batch.iter().flat_map(|s| s.target.0).collect();
    let gt = tape.constant(&[batch.len(), STATE_DIM], gt)?;
    let l_state = match cfg.state_loss_target {
        StateLossTarget::Fused => loss_state_tape(tape, out.x_fuse, gt)?,
        StateLossTarget::Mamba => loss_state_tape(tape, out.x_mam, gt)?,
        StateLossTarget::Both => {
            let a = loss_state_tape(tape, out.x_fuse, gt)?;
            let b = loss_state_tape(tape, out.x_mam, gt)?;
            tape.add(a, b)?
        }
    };
    let weighted_state = tape.scale(l_state, cfg.lambda1);
    let mut values = BatchLoss {
        state: tape.item(l_state),
        ..Default::default()
    };
    // with lambda2 = 0 the uncertainty branch stays off the graph entirely
    let total = if cfg.lambda2 != 0.0 {
        let l_conf = loss_conf_tape(tape, out.x_fuse, gt, out.sigma_fuse)?;
        values.conf = tape.item(l_conf);
        let w = tape.scale(l_conf, cfg.lambda2);
        tape.add(weighted_state, w)?
    } else {
        weighted_state
    };
    values.total = tape.item(total);
    Ok((total, values))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: u32,
    pub state: f64,
    pub conf: f64,
    pub total: f64,
}

pub fn loss_curve_csv(curve: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,mean_state_loss,mean_conf_loss,mean_total\n");
    for e in curve {
        let _ = writeln!(out, "{},{},{},{}", e.epoch, e.state, e.conf, e.total);
    }
    out
}

/// Optimizer and progress, enough to continue an interrupted run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub optimizer: AdamW<f64>,
    /// Completed epochs.
    pub epoch: u32,
}

impl TrainState {
    pub fn new(model: &MotionModel<f64>, cfg: &TrainConfig) -> Self {
        let opt = AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        };
        TrainState {
            optimizer: AdamW::new(opt, &model.store),
            epoch: 0,
        }
    }

    /// Extra checkpoint entries: `optim.step`, `optim.m.<param>`,
    /// `optim.v.<param>` and `train.epoch`.
    pub fn to_named(&self, model: &MotionModel<f64>) -> Vec<(String, Tensor<f64>)> {
        let mut out = vec![
            ("optim.step".to_string(), Tensor::scalar(self.optimizer.step_count() as f64)),
            ("train.epoch".to_string(), Tensor::scalar(self.epoch as f64)),
        ];
        for (k, (_, name, t)) in model.store.iter().enumerate() {
            let shape = t.shape();
            let m = Tensor::new(shape, self.optimizer.first_moments()[k].clone()).expect("moment shape");
            let v = Tensor::new(shape, self.optimizer.second_moments()[k].clone()).expect("moment shape");
            out.push((format!("optim.m.{name}"), m));
            out.push((format!("optim.v.{name}"), v));
        }
        out
    }

    pub fn from_named(model: &MotionModel<f64>, cfg: &TrainConfig, entries: &[(String, Tensor<f64>)]) -> Result<Self> {
        let find = |n: &str| {
            entries
                .iter()
                .find(|(k, _)| k == n)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("missing {n}; not a training checkpoint")))
        };
        let mut st = TrainState::new(model, cfg);
        let step = find("optim.step")?.data()[0] as u64;
        let epoch = find("train.epoch")?.data()[0] as u32;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (_, name, _) in model.store.iter() {
            m.push(find(&format!("optim.m.{name}"))?.data().to_vec());
            v.push(find(&format!("optim.v.{name}"))?.data().to_vec());
        }
        st.optimizer.restore(step, m, v)?;
        st.epoch = epoch;
        Ok(st)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub curve: Vec<EpochLoss>,
}

/// Trains `model` from `state.epoch` up to `cfg.epochs`.
///
/// `on_epoch` runs after every epoch (e.g. to write a checkpoint). A
/// non-finite loss or gradient stops training with [`Error::Diverged`]; the
/// offending step is never applied, so `model` keeps its last good values.
pub fn train(
    model: &mut MotionModel<f64>,
    samples: &[TrainingSample],
    cfg: &TrainConfig,
    state: &mut TrainState,
    mut on_epoch: impl FnMut(&MotionModel<f64>, &TrainState, &EpochLoss) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let steps_per_epoch = samples.len().div_ceil(cfg.batch) as u64;
    let warmup_steps = cfg.warmup_epochs as u64 * steps_per_epoch;
    let mut report = TrainReport::default();
    while state.epoch < cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        SplitMix64::derived(cfg.seed, &format!("train.shuffle.{}", state.epoch)).shuffle(&mut order);
        let mut sums = BatchLoss::default();
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&TrainingSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let step = state.optimizer.step_count() + 1;
            let mut tape = Tape::new();
            let (loss, vals) = batch_loss(&mut tape, model, &model.store, &batch, cfg)?;
            if !vals.total.is_finite() {
                return Err(Error::Diverged {
                    step,
                    reason: format!("loss is {}", vals.total),
                });
            }
            let mut grads = tape.backward(loss)?.param_grads(&model.store);
            let norm = clip_global_norm(&mut grads, cfg.clip_norm);
            if !norm.is_finite() {
                return Err(Error::Diverged {
                    step,
                    reason: format!("gradient norm is {norm}"),
                });
            }
            state
                .optimizer
                .step(&mut model.store, &grads, lr_at(step, warmup_steps, cfg.lr))?;
            let n = batch.len() as f64;
            sums.state += vals.state * n;
            sums.conf += vals.conf * n;
            sums.total += vals.total * n;
        }
        state.epoch += 1;
        let n = samples.len() as f64;
        let e = EpochLoss {
            epoch: state.epoch,
            state: sums.state / n,
            conf: sums.conf / n,
            total: sums.total / n,
        };
        report.curve.push(e);
        on_epoch(model, state, &e)?;
    }
    Ok(report)
}

/// Repeated optimizer steps on one fixed batch at constant `cfg.lr` (no
/// warm-up). Returns the loss before every step followed by the final loss.
pub fn fit_batch(model: &mut MotionModel<f64>, batch: &[TrainingSample], cfg: &TrainConfig, steps: usize) -> Result<Vec<f64>> {
    let mut state = TrainState::new(model, cfg);
    let batch: Vec<&TrainingSample> = batch.iter().collect();
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let mut tape = Tape::new();
        let (loss, vals) = batch_loss(&mut tape, model, &model.store, &batch, cfg)?;
        if !vals.total.is_finite() {
            return Err(Error::Diverged {
                step: step as u64,
                reason: format!("loss is {}", vals.total),
            });
        }
        losses.push(vals.total);
        if step == steps {
            break;
        }
        let mut grads = tape.backward(loss)?.param_grads(&model.store);
        clip_global_norm(&mut grads, cfg.clip_norm);
        state.optimizer.step(&mut model.store, &grads, cfg.lr)?;
    }
    Ok(losses)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictionEval {
    pub samples: usize,
    /// Mean center error of the fused prediction (px).
    pub ade: f64,
    /// Single-step horizon: equal to `ade`.
    pub fde: f64,
    pub ade_kalman: f64,
    pub fde_kalman: f64,
}

fn center_err(p: &[f64], t: &MotionState<f64>) -> f64 {
    (p[0] - t.x()).hypot(p[1] - t.y())
}

/// Single-step displacement errors of the fused prediction and of the Kalman
/// prior on the same samples.
pub fn evaluate_prediction(model: &MotionModel<f64>, samples: &[TrainingSample], mode: FusionMode) -> Result<PredictionEval> {
    if samples.is_empty() {
        return Err(Error::UndefinedMetric("no samples to evaluate".into()));
    }
    let (mut fused, mut kal) = (0.0, 0.0);
    for chunk in samples.chunks(256) {
        let inputs: Vec<_> = chunk.iter().map(|s| s.input.clone()).collect();
        let mut tape = Tape::inference();
        let out = model.forward(&mut tape, &inputs, mode)?;
        let x = tape.value(out.x_fuse);
        for (i, s) in chunk.iter().enumerate() {
            fused += center_err(&x[i * STATE_DIM..], &s.target);
            kal += center_err(&s.input.x_kal, &s.target);
        }
    }
    let n = samples.len() as f64;
    Ok(PredictionEval {
        samples: samples.len(),
        ade: fused / n,
        fde: fused / n,
        ade_kalman: kal / n,
        fde_kalman: kal / n,
    })
}
