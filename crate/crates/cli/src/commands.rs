use std::collections::HashMap;
use std::path::{Path, PathBuf};

use dmtrack_core::association::iou;
use dmtrack_core::gradcheck;
use dmtrack_core::kalman::KalmanFilter;
use dmtrack_core::metrics::{match_frames, summarize, summary_csv, summary_table};
use dmtrack_core::model::{FusionMode, MotionModel};
use dmtrack_core::mot_io::{read_rows, write_file, MotRow};
use dmtrack_core::synth;
use dmtrack_core::tracker::{track_sequence, write_mot_results, Tracker, TrackerConfig};
use dmtrack_core::training::{build_windows, loss_curve_csv, occlusion_windows, train, EpochLoss, TrainState};
use dmtrack_core::{Error, Result};

use crate::Command;

/// Tolerance on the worst relative gradient error.
const GRAD_TOL: f64 = 1e-4;

/// Runs one subcommand; `Ok(code)` carries a non-error exit status such as a
/// failed gradient check.
pub fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Synth { out, preset, cfg } => {
            let cfg = cfg.resolve(&[("preset", preset)])?;
            let seq = synth::generate(&synth::preset(&cfg.preset, cfg.seed)?)?;
            synth::export(&seq, &out)?;
            println!(
                "{}: {} frames, {} objects, {} gt rows, {} detections -> {}",
                cfg.preset,
                seq.scenario.frames,
                seq.scenario.objects.len(),
                seq.gt.len(),
                seq.detections.len(),
                out.display()
            );
            Ok(0)
        }
        Command::Train {
            data,
            checkpoint,
            loss_csv,
            resume,
            epochs,
            cfg,
        } => {
            let cfg = cfg.resolve(&[("epochs", epochs.map(|e| e.to_string()))])?;
            let mut tcfg = cfg.train.clone();
            tcfg.seed = cfg.seed;
            let seqs = data.iter().map(|d| synth::load(d)).collect::<Result<Vec<_>>>()?;
            let kf = KalmanFilter::default();
            let (mut samples, counts) = build_windows(&seqs, &kf)?;
            let occluded = occlusion_windows(&seqs, &kf, cfg.occlusion_gap, cfg.seed)?;
            println!(
                "{} training windows + {} with simulated occlusion from {} sequences ({} tracks too short)",
                counts.samples,
                occluded.len(),
                seqs.len(),
                counts.skipped_tracks
            );
            samples.extend(occluded);
            let csv_path = loss_csv.unwrap_or_else(|| checkpoint.with_extension("loss.csv"));
            let (mut model, mut state, mut curve) = if resume {
                let (model, extras) = MotionModel::load(&checkpoint)?;
                let state = TrainState::from_named(&model, &tcfg, &extras)?;
                let curve = read_curve(&csv_path, state.epoch)?;
                println!("resuming after epoch {}, step {}", state.epoch, state.optimizer.step_count());
                (model, state, curve)
            } else {
                let model = MotionModel::new(cfg.seed);
                let state = TrainState::new(&model, &tcfg);
                (model, state, Vec::new())
            };
            let result = train(&mut model, &samples, &tcfg, &mut state, |m, st, e| {
                println!("epoch {:>3}  state {:.6}  conf {:.6}  total {:.6}", e.epoch, e.state, e.conf, e.total);
                curve.push(*e);
                m.save(&checkpoint, &st.to_named(m))?;
                write_file(&csv_path, |b| {
                    b.extend_from_slice(loss_curve_csv(&curve).as_bytes());
                    Ok(())
                })
            });
            if let Err(e) = result {
                if e.is_numerical() {
                    // keep the last good weights on disk
                    model.save(&checkpoint, &state.to_named(&model))?;
                }
                return Err(e);
            }
            println!("checkpoint {}\nloss curve {}", checkpoint.display(), csv_path.display());
            Ok(0)
        }
        Command::Track {
            det,
            checkpoint,
            out,
            kalman_only,
            frames,
            cfg,
        } => {
            let cfg = cfg.resolve(&[])?;
            let fusion = if kalman_only { FusionMode::KalmanOnly } else { cfg.fusion_mode() };
            let model = match (fusion, checkpoint) {
                (FusionMode::KalmanOnly, _) => None,
                (_, Some(path)) => Some(MotionModel::load(&path)?.0),
                (_, None) => {
                    return Err(Error::Config(
                        "--checkpoint is required unless --kalman-only or fusion = kalman".into(),
                    ))
                }
            };
            let rows = read_rows(&det)?;
            let last = frames.unwrap_or_else(|| rows.iter().map(|r| r.frame).max().unwrap_or(0));
            let mut tracker = Tracker::new(TrackerConfig { fusion, ..cfg.tracker }, model)?;
            let results = track_sequence(&mut tracker, &rows, last)?;
            write_file(&out, |b| write_mot_results(b, &results))?;
            println!("{} frames, {} result rows -> {}", last, results.len(), out.display());
            Ok(0)
        }
        Command::Eval {
            gt,
            results,
            csv,
            name,
            cfg,
        } => {
            let cfg = cfg.resolve(&[])?;
            let gt = read_rows(&gt)?;
            let hyp = read_rows(&results)?;
            let rows = vec![(name, summarize(&gt, &hyp, cfg.eval_iou)?)];
            print!("{}", summary_table(&rows));
            if let Some(path) = csv {
                write_file(&path, |b| {
                    b.extend_from_slice(summary_csv(&rows).as_bytes());
                    Ok(())
                })?;
            }
            Ok(0)
        }
        Command::Gradcheck {
            trials,
            corrupt_gradient,
            cfg,
        } => {
            let cfg = cfg.resolve(&[])?;
            let reports = gradcheck::suite(trials, cfg.seed, corrupt_gradient)?;
            let mut ok = true;
            for r in &reports {
                let pass = r.report.passes(GRAD_TOL);
                ok &= pass;
                let worst = r.report.worst.as_ref().map_or("-".to_string(), |w| {
                    format!("{}[{}] analytic {:.6e} numeric {:.6e}", w.param, w.index, w.analytic, w.numeric)
                });
                println!(
                    "{:<13} {}  max rel err {:.3e} over {} coords / {} trials  worst {}",
                    r.module,
                    if pass { "PASS" } else { "FAIL" },
                    r.report.max_rel_error(),
                    r.report.checked,
                    r.trials,
                    worst
                );
            }
            println!("{}", if ok { "all gradient checks passed" } else { "gradient check FAILED" });
            Ok(if ok { 0 } else { 3 })
        }
        Command::Plotdata { results, gt, out, cfg } => {
            let cfg = cfg.resolve(&[])?;
            let gt = read_rows(&gt)?;
            let hyp = read_rows(&results)?;
            write_file(&out, |b| {
                b.extend_from_slice(plot_csv(&gt, &hyp, cfg.eval_iou).as_bytes());
                Ok(())
            })?;
            println!("{} rows -> {}", hyp.len(), out.display());
            Ok(0)
        }
    }
}

/// Earlier epochs of a resumed run, so the CSV covers the whole run.
fn read_curve(path: &Path, epochs: u32) -> Result<Vec<EpochLoss>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => {
            return Err(Error::Io {
                path: PathBuf::from(path),
                source: e,
            })
        }
    };
    let mut curve = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let bad = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let v: Vec<f64> = line
            .split(',')
            .map(|c| c.trim().parse::<f64>().map_err(|e| bad(e.to_string())))
            .collect::<Result<_>>()?;
        let [epoch, state, conf, total] = v[..] else {
            return Err(bad(format!("expected 4 columns, found {}", v.len())));
        };
        if epoch as u32 <= epochs {
            curve.push(EpochLoss {
                epoch: epoch as u32,
                state,
                conf,
                total,
            });
        }
    }
    Ok(curve)
}

/// One line per result row, in file order.
pub fn plot_csv(gt: &[MotRow], hyp: &[MotRow], iou_threshold: f64) -> String {
    let matching = match_frames(gt, hyp, iou_threshold);
    let mut pair: HashMap<(u64, i64), i64> = HashMap::new();
    for f in &matching.frames {
        for &(g, h) in &f.pairs {
            pair.insert((f.frame, h), g);
        }
    }
    let gt_box: HashMap<(u64, i64), [f64; 4]> = gt.iter().map(|r| ((r.frame, r.id), r.corners())).collect();
    let mut out = String::from("frame,id,cx,cy,w,h,conf,matched_gt_id,iou\n");
    for r in hyp {
        let [l, t, w, h] = r.tlwh;
        let (gid, ov) = match pair.get(&(r.frame, r.id)) {
            Some(&g) => (g, iou(&r.corners(), &gt_box[&(r.frame, g)])),
            None => (-1, 0.0),
        };
        out += &format!("{},{},{},{},{},{},{},{},{:.6}\n", r.frame, r.id, l + w / 2.0, t + h / 2.0, w, h, r.conf, gid, ov);
    }
    out
}
