use crate::error::{Error, Result};
use crate::kalman::{MotionState, STATE_DIM};
use crate::scalar::Real;

/// Fixed-length history of motion states, oldest first.
///
/// Tracks younger than the window are padded by repeating the oldest real
/// state backward in time with its velocity components zeroed.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryWindow<T> {
    states: Vec<MotionState<T>>,
    valid_count: usize,
}

impl<T: Real> TrajectoryWindow<T> {
    /// Builds a window of length `len` from the most recent `history` entries.
    pub fn from_history(history: &[MotionState<T>], len: usize) -> Result<Self> {
        if history.is_empty() || len == 0 {
            return Err(Error::InvalidDimension("trajectory window needs at least one state".into()));
        }
        let real = &history[history.len().saturating_sub(len)..];
        let mut pad = real[0];
        for v in &mut pad.0[4..] {
            *v = T::zero();
        }
        let mut states = vec![pad; len - real.len()];
        states.extend_from_slice(real);
        Ok(TrajectoryWindow {
            states,
            valid_count: real.len(),
        })
    }

    pub fn states(&self) -> &[MotionState<T>] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid_count
    }

    pub fn newest(&self) -> &MotionState<T> {
        self.states.last().expect("window is never empty")
    }

    pub fn is_finite(&self) -> bool {
        self.states.iter().all(MotionState::is_finite)
    }
}

/// Track-relative frame attached to the newest state of a window.
///
/// Centers and height are expressed relative to the newest box in units of its
/// height, the aspect ratio relative to the newest aspect ratio.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalizer<T> {
    pub anchor: [T; STATE_DIM],
    pub scale: [T; STATE_DIM],
}

impl<T: Real> Normalizer<T> {
    pub fn for_window(w: &TrajectoryWindow<T>) -> Self {
        let n = w.newest();
        let h = n.h().max(T::c(1e-6));
        let (z, o) = (T::zero(), T::one());
        Normalizer {
            anchor: [n.x(), n.y(), n.a(), n.h(), z, z, z, z],
            scale: [h, h, o, h, h, h, o, h],
        }
    }

    pub fn normalize(&self, s: &[T; STATE_DIM]) -> [T; STATE_DIM] {
        std::array::from_fn(|i| (s[i] - self.anchor[i]) / self.scale[i])
    }

    pub fn normalize_sigma(&self, s: &[T; STATE_DIM]) -> [T; STATE_DIM] {
        std::array::from_fn(|i| s[i] / self.scale[i])
    }

    pub fn denormalize(&self, n: &[T; STATE_DIM]) -> [T; STATE_DIM] {
        std::array::from_fn(|i| self.anchor[i] + self.scale[i] * n[i])
    }
}
