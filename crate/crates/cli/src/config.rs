//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Every key has a built-in
//! default; a config file overrides defaults and `--set key=value` flags
//! override the file. Unknown keys are errors.

use std::path::Path;

use dmtrack_core::association::TrendSign;
use dmtrack_core::model::FusionMode;
use dmtrack_core::tracker::TrackerConfig;
use dmtrack_core::training::{StateLossTarget, TrainConfig};
use dmtrack_core::{Error, Result};

/// How `track` blends the two predictors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    Gate,
    Fixed,
    Kalman,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: String,
    pub tracker: TrackerConfig,
    pub fusion: Fusion,
    pub fixed_alpha: f64,
    pub train: TrainConfig,
    /// Longest simulated occlusion in the extra training windows; 0 disables them.
    pub occlusion_gap: usize,
    pub window: usize,
    pub keyframes: usize,
    pub eval_iou: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            preset: "uav-mix".into(),
            tracker: TrackerConfig::default(),
            fusion: Fusion::Gate,
            fixed_alpha: 0.5,
            train: TrainConfig::default(),
            occlusion_gap: 20,
            window: 8,
            keyframes: 4,
            eval_iou: 0.5,
        }
    }
}

/// `(key, description)` in help order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "root seed; every random stream is derived from it"),
    ("preset", "synthetic scenario: linear, turns, occlusion, crowd, uav-mix"),
    ("tau_high", "confidence threshold of first-stage detections"),
    ("tau_low", "detections below this are ignored"),
    ("iou_gate", "minimum IoU for any match"),
    ("n_init", "consecutive matches to confirm a track"),
    ("max_age", "frames a confirmed track may go unmatched"),
    ("w_iou", "match-score weight of IoU"),
    ("w_trend", "match-score weight of motion-trend agreement"),
    ("w_penalty", "match-score weight of the uncertainty penalty"),
    ("trend_sign", "pred_minus_det or det_minus_pred"),
    ("fusion", "gate, fixed or kalman"),
    ("fixed_alpha", "Kalman weight when fusion = fixed"),
    ("lr", "peak learning rate"),
    ("batch", "mini-batch size"),
    ("epochs", "training epochs"),
    ("warmup_epochs", "epochs of linear learning-rate warm-up"),
    ("lambda1", "weight of the L1 state loss"),
    ("lambda2", "weight of the Gaussian NLL loss"),
    ("clip_norm", "global gradient-norm clip"),
    ("weight_decay", "AdamW decoupled weight decay"),
    ("state_loss_target", "fused, mamba or both"),
    ("occlusion_gap", "longest simulated occlusion in extra training windows (0 = none)"),
    ("window", "trajectory window length (fixed at 8)"),
    ("keyframes", "deformable keyframes (fixed at 4)"),
    ("eval_iou", "IoU threshold of the evaluation matching"),
];

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl RunConfig {
    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.tracker;
        let r = &self.train;
        Some(match key {
            "seed" => self.seed.to_string(),
            "preset" => self.preset.clone(),
            "tau_high" => t.tau_high.to_string(),
            "tau_low" => t.tau_low.to_string(),
            "iou_gate" => t.iou_gate.to_string(),
            "n_init" => t.n_init.to_string(),
            "max_age" => t.max_age.to_string(),
            "w_iou" => t.weights.iou.to_string(),
            "w_trend" => t.weights.trend.to_string(),
            "w_penalty" => t.weights.penalty.to_string(),
            "trend_sign" => t.trend_sign.to_string(),
            "fusion" => match self.fusion {
                Fusion::Gate => "gate",
                Fusion::Fixed => "fixed",
                Fusion::Kalman => "kalman",
            }
            .into(),
            "fixed_alpha" => self.fixed_alpha.to_string(),
            "lr" => r.lr.to_string(),
            "batch" => r.batch.to_string(),
            "epochs" => r.epochs.to_string(),
            "warmup_epochs" => r.warmup_epochs.to_string(),
            "lambda1" => r.lambda1.to_string(),
            "lambda2" => r.lambda2.to_string(),
            "clip_norm" => r.clip_norm.to_string(),
            "weight_decay" => r.weight_decay.to_string(),
            "state_loss_target" => r.state_loss_target.to_string(),
            "occlusion_gap" => self.occlusion_gap.to_string(),
            "window" => self.window.to_string(),
            "keyframes" => self.keyframes.to_string(),
            "eval_iou" => self.eval_iou.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        let t = &mut self.tracker;
        let r = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "preset" => self.preset = v.to_string(),
            "tau_high" => t.tau_high = parse(key, v)?,
            "tau_low" => t.tau_low = parse(key, v)?,
            "iou_gate" => t.iou_gate = parse(key, v)?,
            "n_init" => t.n_init = parse(key, v)?,
            "max_age" => t.max_age = parse(key, v)?,
            "w_iou" => t.weights.iou = parse(key, v)?,
            "w_trend" => t.weights.trend = parse(key, v)?,
            "w_penalty" => t.weights.penalty = parse(key, v)?,
            "trend_sign" => t.trend_sign = v.parse::<TrendSign>().map_err(|e| Error::Config(format!("{key}: {e}")))?,
            "fusion" => {
                self.fusion = match v {
                    "gate" => Fusion::Gate,
                    "fixed" => Fusion::Fixed,
                    "kalman" => Fusion::Kalman,
                    _ => return Err(Error::Config(format!("fusion must be gate, fixed or kalman, got {v:?}"))),
                }
            }
            "fixed_alpha" => self.fixed_alpha = parse(key, v)?,
            "lr" => r.lr = parse(key, v)?,
            "batch" => r.batch = parse(key, v)?,
            "epochs" => r.epochs = parse(key, v)?,
            "warmup_epochs" => r.warmup_epochs = parse(key, v)?,
            "lambda1" => r.lambda1 = parse(key, v)?,
            "lambda2" => r.lambda2 = parse(key, v)?,
            "clip_norm" => r.clip_norm = parse(key, v)?,
            "weight_decay" => r.weight_decay = parse(key, v)?,
            "state_loss_target" => r.state_loss_target = v.parse::<StateLossTarget>()?,
            "occlusion_gap" => self.occlusion_gap = parse(key, v)?,
            "window" => self.window = parse(key, v)?,
            "keyframes" => self.keyframes = parse(key, v)?,
            "eval_iou" => self.eval_iou = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `origin` labels error messages.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("{}:{}: {msg}", origin.display(), n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Defaults, then the optional file, then `key=value` overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            cfg.apply_text(&text, path)?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got {o:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.tracker.validate()?;
        self.train.validate()?;
        if self.window != 8 || self.keyframes != 4 {
            return Err(Error::Config(format!(
                "window = {} / keyframes = {}: this build supports window 8 with 4 keyframes",
                self.window, self.keyframes
            )));
        }
        if !(0.0..=1.0).contains(&self.fixed_alpha) {
            return Err(Error::Config(format!("fixed_alpha {} outside [0, 1]", self.fixed_alpha)));
        }
        if !(self.eval_iou > 0.0 && self.eval_iou <= 1.0) {
            return Err(Error::Config(format!("eval_iou {} outside (0, 1]", self.eval_iou)));
        }
        Ok(())
    }

    pub fn fusion_mode(&self) -> FusionMode {
        match self.fusion {
            Fusion::Gate => FusionMode::Gate,
            Fusion::Fixed => FusionMode::FixedAlpha(self.fixed_alpha),
            Fusion::Kalman => FusionMode::KalmanOnly,
        }
    }

    /// Every key with its built-in default, for `--help`.
    pub fn defaults_help() -> String {
        let d = RunConfig::default();
        let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::from("Config keys (file or --set key=value; flag > file > default):\n");
        for (k, desc) in KEYS {
            let v = d.get(k).expect("every listed key has a value");
            out += &format!("  {k:<width$} = {v:<10} {desc}\n");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let d = RunConfig::default();
        let text: String = KEYS.iter().map(|(k, _)| format!("{k} = {}\n", d.get(k).unwrap())).collect();
        let mut c = RunConfig::default();
        c.seed = 99;
        c.apply_text(&text, Path::new("x")).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::resolve(None, &["learning_rate=0.1".into()]).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn published_defaults() {
        let d = RunConfig::default();
        for (k, v) in [
            ("w_iou", "0.7"),
            ("w_trend", "0.2"),
            ("w_penalty", "0.1"),
            ("iou_gate", "0.3"),
            ("lambda1", "1"),
            ("lambda2", "0.2"),
            ("window", "8"),
            ("keyframes", "4"),
            ("lr", "0.0001"),
            ("batch", "64"),
            ("epochs", "50"),
            ("warmup_epochs", "2"),
        ] {
            assert_eq!(d.get(k).unwrap(), v, "{k}");
        }
    }
}
