//! The learned half of the motion predictor: DeformMamba followed by the gate,
//! sharing one parameter store.

use std::path::Path;

use crate::deform_mamba::{DeformMamba, DeformMambaConfig, Normalizer, TrajectoryWindow};
use crate::error::{Error, Result};
use crate::kalman::STATE_DIM;
use crate::motion_gate::{blend_on_tape, fuse, FusedPrediction, MotionGate};
use crate::rng::SplitMix64;
use crate::scalar::Real;
use crate::tensor::{load_checkpoint, save_checkpoint, ParamStore, Tape, Tensor, Var};

/// How the Kalman and learned predictions are combined.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FusionMode {
    /// Learned per-dimension gate.
    Gate,
    /// Constant blend weight on the Kalman side.
    FixedAlpha(f64),
    /// Gate forced to 1: the learned branch is never evaluated.
    KalmanOnly,
}

#[derive(Clone, Debug)]
pub struct MotionModel<T> {
    pub store: ParamStore<T>,
    pub mamba: DeformMamba,
    pub gate: MotionGate,
}

/// Tape nodes of one batched prediction, all `[B, 8]` in pixel units.
#[derive(Clone, Copy, Debug)]
pub struct FusedBatch {
    pub x_mam: Var,
    pub sigma_mam: Var,
    pub alpha: Var,
    pub x_fuse: Var,
    pub sigma_fuse: Var,
}

/// One prediction request: the track's history plus the Kalman prior.
#[derive(Clone, Debug)]
pub struct PredictionInput<T> {
    pub window: TrajectoryWindow<T>,
    pub x_kal: [T; STATE_DIM],
    pub sigma_kal: [T; STATE_DIM],
}

impl<T: Real> MotionModel<T> {
    /// Fresh model; weights drawn from streams derived from `seed`.
    pub fn new(seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mamba = DeformMamba::new(
            &mut store,
            DeformMambaConfig::default(),
            &mut SplitMix64::derived(seed, "init.deform_mamba"),
        );
        let gate = MotionGate::new(&mut store, &mut SplitMix64::derived(seed, "init.motion_gate"));
        MotionModel { store, mamba, gate }
    }

    pub fn forward(&self, tape: &mut Tape<T>, inputs: &[PredictionInput<T>], mode: FusionMode) -> Result<FusedBatch> {
        self.forward_with(tape, &self.store, inputs, mode)
    }

    /// Same as [`MotionModel::forward`] with an explicit parameter store, so
    /// perturbed copies can be evaluated.
    pub fn forward_with(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        inputs: &[PredictionInput<T>],
        mode: FusionMode,
    ) -> Result<FusedBatch> {
        let b = inputs.len();
        let windows: Vec<_> = inputs.iter().map(|i| i.window.clone()).collect();
        let out = self.mamba.forward(tape, store, &windows)?;

        let mut kal_n = Vec::with_capacity(b * 2 * STATE_DIM);
        let mut x_kal = Vec::with_capacity(b * STATE_DIM);
        let mut s_kal = Vec::with_capacity(b * STATE_DIM);
        for (inp, n) in inputs.iter().zip(&out.normalizers) {
            check_finite(inp)?;
            kal_n.extend_from_slice(&n.normalize(&inp.x_kal));
            kal_n.extend_from_slice(&n.normalize_sigma(&inp.sigma_kal));
            x_kal.extend_from_slice(&inp.x_kal);
            s_kal.extend_from_slice(&inp.sigma_kal);
        }
        let kal_n = tape.constant(&[b, 2 * STATE_DIM], kal_n)?;
        let gate_in = tape.concat_cols(&[kal_n, out.head])?;
        let (gate_alpha, sigma_mam) = self.gate.forward(tape, store, gate_in)?;
        let alpha = match mode {
            FusionMode::Gate => gate_alpha,
            FusionMode::FixedAlpha(a) => tape.constant(&[b, STATE_DIM], vec![T::c(a); b * STATE_DIM])?,
            FusionMode::KalmanOnly => tape.constant(&[b, STATE_DIM], vec![T::one(); b * STATE_DIM])?,
        };
        let x_kal = tape.constant(&[b, STATE_DIM], x_kal)?;
        let s_kal = tape.constant(&[b, STATE_DIM], s_kal)?;
        let x_fuse = blend_on_tape(tape, x_kal, out.x_mam, alpha)?;
        let sigma_fuse = blend_on_tape(tape, s_kal, sigma_mam, alpha)?;
        Ok(FusedBatch {
            x_mam: out.x_mam,
            sigma_mam,
            alpha,
            x_fuse,
            sigma_fuse,
        })
    }

    /// Inference for a single track.
    pub fn predict(&self, input: &PredictionInput<T>, mode: FusionMode) -> Result<FusedPrediction<T>> {
        check_finite(input)?;
        if mode == FusionMode::KalmanOnly {
            return Ok(FusedPrediction {
                x_fuse: input.x_kal,
                sigma_fuse: input.sigma_kal,
                alpha: [T::one(); STATE_DIM],
            });
        }
        let mut tape = Tape::inference();
        let out = self.mamba.forward(&mut tape, &self.store, std::slice::from_ref(&input.window))?;
        let n: &Normalizer<T> = &out.normalizers[0];
        let x_mam: [T; STATE_DIM] = std::array::from_fn(|i| tape.value(out.x_mam)[i]);
        let head: [T; STATE_DIM] = std::array::from_fn(|i| tape.value(out.head)[i]);
        let (alpha, sigma_mam) = self.gate.gate(
            &self.store,
            &n.normalize(&input.x_kal),
            &n.normalize_sigma(&input.sigma_kal),
            &head,
        )?;
        let alpha = match mode {
            FusionMode::FixedAlpha(a) => [T::c(a); STATE_DIM],
            _ => alpha,
        };
        Ok(fuse(&input.x_kal, &input.sigma_kal, &x_mam, &alpha, &sigma_mam))
    }

    pub fn save(&self, path: &Path, extra: &[(String, Tensor<f64>)]) -> Result<()> {
        let mut entries = self.store.to_named();
        entries.extend_from_slice(extra);
        save_checkpoint(path, &entries)
    }

    /// Loads parameters from `path`; entries that are not parameters are
    /// returned to the caller.
    pub fn load(path: &Path) -> Result<(Self, Vec<(String, Tensor<f64>)>)> {
        let entries = load_checkpoint(path)?;
        let mut model = Self::new(0);
        model.store.load_named(&entries)?;
        let extra = entries
            .into_iter()
            .filter(|(n, _)| model.store.id(n).is_none())
            .collect();
        Ok((model, extra))
    }
}

fn check_finite<T: Real>(inp: &PredictionInput<T>) -> Result<()> {
    if !inp.window.is_finite() || !inp.x_kal.iter().chain(&inp.sigma_kal).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("prediction input".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kalman::MotionState;

    fn input() -> PredictionInput<f64> {
        let hist: Vec<_> = (0..8)
            .map(|t| MotionState([200.0 + 4.0 * t as f64, 80.0, 0.6, 30.0, 4.0, 0.0, 0.0, 0.0]))
            .collect();
        PredictionInput {
            window: TrajectoryWindow::from_history(&hist, 8).unwrap(),
            x_kal: [232.0, 80.0, 0.6, 30.0, 4.0, 0.0, 0.0, 0.0],
            sigma_kal: [2.0, 2.0, 0.01, 2.0, 0.5, 0.5, 1e-5, 0.5],
        }
    }

    #[test]
    fn kalman_only_is_bit_exact() {
        let m = MotionModel::<f64>::new(1);
        let i = input();
        let p = m.predict(&i, FusionMode::KalmanOnly).unwrap();
        assert_eq!(p.x_fuse, i.x_kal);
        let mut tape = Tape::inference();
        let b = m.forward(&mut tape, &[i.clone()], FusionMode::KalmanOnly).unwrap();
        assert_eq!(tape.value(b.x_fuse), &i.x_kal);
    }

    #[test]
    fn batched_and_single_predictions_agree() {
        let m = MotionModel::<f64>::new(2);
        let i = input();
        let p = m.predict(&i, FusionMode::Gate).unwrap();
        let mut tape = Tape::inference();
        let b = m.forward(&mut tape, &[i], FusionMode::Gate).unwrap();
        for k in 0..8 {
            assert!((tape.value(b.x_fuse)[k] - p.x_fuse[k]).abs() < 1e-9);
            assert!((tape.value(b.sigma_fuse)[k] - p.sigma_fuse[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_roundtrip_keeps_extras() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = MotionModel::<f64>::new(3);
        m.save(&path, &[("train.epoch".into(), Tensor::scalar(4.0))]).unwrap();
        let (back, extra) = MotionModel::<f64>::load(&path).unwrap();
        assert_eq!(back.store.to_named(), m.store.to_named());
        assert_eq!(extra.len(), 1);
        assert_eq!(extra[0].0, "train.epoch");
    }
}
