//! Per-dimension confidence gate between the Kalman and learned predictions.
//!
//! ```text
//! h         = GeLU(W_s [x_kal | sigma_kal | x_mam] + b_s)
//! alpha     = eps_a + (1 - 2 eps_a) * sigmoid(W_a h + b_a)
//! sigma_mam = softplus(W_s' h + b_s') + eps
//! x_fuse    = alpha * x_kal + (1 - alpha) * x_mam
//! sigma_fuse= alpha * sigma_kal + (1 - alpha) * sigma_mam
//! ```

use crate::error::{Error, Result};
use crate::kalman::STATE_DIM;
use crate::rng::SplitMix64;
use crate::scalar::Real;
use crate::tensor::{Linear, ParamStore, Tape, Var};

pub const PREFIX: &str = "motion_gate";
/// Lower bound added to the learned uncertainty.
pub const SIGMA_EPS: f64 = 1e-6;
/// Keeps alpha strictly inside (0, 1) even where the sigmoid rounds to 0 or 1.
pub const ALPHA_EPS: f64 = 1e-9;
pub const GATE_HIDDEN: usize = 64;

#[derive(Clone, Debug)]
pub struct MotionGate {
    pub shared: Linear,
    pub alpha_head: Linear,
    pub sigma_head: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusedPrediction<T> {
    pub x_fuse: [T; STATE_DIM],
    pub sigma_fuse: [T; STATE_DIM],
    pub alpha: [T; STATE_DIM],
}

impl MotionGate {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut SplitMix64) -> Self {
        MotionGate {
            shared: Linear::new(store, &format!("{PREFIX}.shared"), 3 * STATE_DIM, GATE_HIDDEN, true, rng),
            alpha_head: Linear::new(store, &format!("{PREFIX}.alpha"), GATE_HIDDEN, STATE_DIM, true, rng),
            sigma_head: Linear::new(store, &format!("{PREFIX}.sigma"), GATE_HIDDEN, STATE_DIM, true, rng),
        }
    }

    pub fn zero<T: Real>(&self, store: &mut ParamStore<T>) {
        self.shared.zero(store);
        self.alpha_head.zero(store);
        self.sigma_head.zero(store);
    }

    /// `input` is `[B, 24]` laid out as `[x_kal | sigma_kal | x_mam]`; returns
    /// `(alpha, sigma_mam)`, each `[B, 8]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, input: Var) -> Result<(Var, Var)> {
        let h = self.shared.forward(tape, store, input)?;
        let h = tape.gelu(h)?;
        let a = self.alpha_head.forward(tape, store, h)?;
        let alpha = tape.sigmoid(a)?;
        let alpha = tape.affine(alpha, T::c(1.0 - 2.0 * ALPHA_EPS), T::c(ALPHA_EPS));
        let s = self.sigma_head.forward(tape, store, h)?;
        let s = tape.softplus(s)?;
        let sigma = tape.affine(s, T::one(), T::c(SIGMA_EPS));
        Ok((alpha, sigma))
    }

    /// Concatenates the three parts and runs [`MotionGate::forward`].
    pub fn forward_parts<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x_kal: Var,
        sigma_kal: Var,
        x_mam: Var,
    ) -> Result<(Var, Var)> {
        let input = tape.concat_cols(&[x_kal, sigma_kal, x_mam])?;
        self.forward(tape, store, input)
    }

    /// Gate evaluation on plain vectors.
    pub fn gate<T: Real>(
        &self,
        store: &ParamStore<T>,
        x_kal: &[T; STATE_DIM],
        sigma_kal: &[T; STATE_DIM],
        x_mam: &[T; STATE_DIM],
    ) -> Result<([T; STATE_DIM], [T; STATE_DIM])> {
        let all = x_kal.iter().chain(sigma_kal).chain(x_mam);
        if let Some(i) = all.clone().position(|v| !v.is_finite()) {
            let part = ["x_kal", "sigma_kal", "x_mam"][i / STATE_DIM];
            return Err(Error::NonFinite(format!("gate input {part}[{}]", i % STATE_DIM)));
        }
        let mut tape = Tape::inference();
        let input = tape.constant(&[1, 3 * STATE_DIM], all.copied().collect())?;
        let (a, s) = self.forward(&mut tape, store, input)?;
        let (a, s) = (tape.value(a), tape.value(s));
        Ok((std::array::from_fn(|i| a[i]), std::array::from_fn(|i| s[i])))
    }
}

/// Convex blend of state and uncertainty, written exactly as
/// `alpha * kal + (1 - alpha) * mam` so `alpha = 1` returns the Kalman values
/// bit for bit.
pub fn fuse<T: Real>(
    x_kal: &[T; STATE_DIM],
    sigma_kal: &[T; STATE_DIM],
    x_mam: &[T; STATE_DIM],
    alpha: &[T; STATE_DIM],
    sigma_mam: &[T; STATE_DIM],
) -> FusedPrediction<T> {
    let blend = |k: T, m: T, a: T| a * k + (T::one() - a) * m;
    FusedPrediction {
        x_fuse: std::array::from_fn(|i| blend(x_kal[i], x_mam[i], alpha[i])),
        sigma_fuse: std::array::from_fn(|i| blend(sigma_kal[i], sigma_mam[i], alpha[i])),
        alpha: *alpha,
    }
}

/// Tape version of [`fuse`] for one pair of quantities.
pub fn blend_on_tape<T: Real>(tape: &mut Tape<T>, kal: Var, mam: Var, alpha: Var) -> Result<Var> {
    let one_minus = tape.affine(alpha, -T::one(), T::one());
    let a = tape.mul(alpha, kal)?;
    let b = tape.mul(one_minus, mam)?;
    tape.add(a, b)
}
