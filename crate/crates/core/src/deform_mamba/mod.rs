//! Deformable state-space motion predictor.
//!
//! A window of recent states is resampled at `K` learned fractional offsets,
//! the keyframes are embedded as tokens, encoded by a stack of selective SSM
//! blocks, and the last token is decoded into the next state.
//!
//! Inputs and outputs live in a frame anchored at the newest state of each
//! window (see [`Normalizer`]); [`MambaOutput::x_mam`] is mapped back to pixels.

mod interp;
mod ssm;
mod window;

pub use interp::{bracket, interpolate_keyframes, interpolate_rows};
pub use ssm::{discretize, selective_scan, MambaBlock, MambaDims};
pub use window::{Normalizer, TrajectoryWindow};

use crate::error::{Error, Result};
use crate::kalman::STATE_DIM;
use crate::rng::SplitMix64;
use crate::scalar::Real;
use crate::tensor::{LayerNormParams, Linear, ParamStore, Tape, Var};

/// Parameter-name prefix in checkpoints.
pub const PREFIX: &str = "deform_mamba";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeformMambaConfig {
    pub window: usize,
    pub keyframes: usize,
    pub offset_hidden: usize,
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub dt_rank: usize,
    pub layers: usize,
}

impl Default for DeformMambaConfig {
    fn default() -> Self {
        DeformMambaConfig {
            window: 8,
            keyframes: 4,
            offset_hidden: 64,
            d_model: 64,
            d_inner: 128,
            d_state: 16,
            dt_rank: 4,
            layers: 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DeformMamba {
    pub config: DeformMambaConfig,
    pub offset_fc1: Linear,
    pub offset_fc2: Linear,
    pub embed: Linear,
    pub embed_norm: LayerNormParams,
    pub blocks: Vec<MambaBlock>,
    pub head: Linear,
}

/// Intermediate and final nodes of one batched forward pass.
#[derive(Clone, Debug)]
pub struct MambaOutput<T> {
    /// `[B, K]` fractional indices in `[0, T-1]`.
    pub offsets: Var,
    /// `[B*K, 8]` interpolated (normalized) keyframes.
    pub keyframes: Var,
    /// `[B*K, d_model]` layer-normalized tokens.
    pub tokens: Var,
    /// `[B, 8]` head output in the normalized frame.
    pub head: Var,
    /// `[B, 8]` prediction in pixel units.
    pub x_mam: Var,
    pub normalizers: Vec<Normalizer<T>>,
}

impl DeformMamba {
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: DeformMambaConfig, rng: &mut SplitMix64) -> Self {
        let c = config;
        let flat = c.window * STATE_DIM;
        let offset_fc1 = Linear::new(store, &format!("{PREFIX}.offset.fc1"), flat, c.offset_hidden, true, rng);
        let offset_fc2 = Linear::new(store, &format!("{PREFIX}.offset.fc2"), c.offset_hidden, c.keyframes, true, rng);
        let embed = Linear::new(store, &format!("{PREFIX}.embed"), STATE_DIM, c.d_model, true, rng);
        let embed_norm = LayerNormParams::new(store, &format!("{PREFIX}.embed_norm"), c.d_model);
        let dims = MambaDims {
            d_model: c.d_model,
            d_inner: c.d_inner,
            d_state: c.d_state,
            dt_rank: c.dt_rank,
        };
        let blocks = (0..c.layers)
            .map(|i| MambaBlock::new(store, &format!("{PREFIX}.blocks.{i}"), dims, rng))
            .collect();
        let head = Linear::new(store, &format!("{PREFIX}.head"), c.d_model, STATE_DIM, true, rng);
        // start close to "no change from the newest state"
        let w = store.get_mut(head.weight).data_mut();
        for v in w.iter_mut() {
            *v = *v * T::c(0.1);
        }
        if let Some(b) = head.bias {
            store.get_mut(b).data_mut().fill(T::zero());
        }
        DeformMamba {
            config,
            offset_fc1,
            offset_fc2,
            embed,
            embed_norm,
            blocks,
            head,
        }
    }

    /// Zeroes the offset MLP so every offset sits at `(T-1)/2`.
    pub fn zero_offsets<T: Real>(&self, store: &mut ParamStore<T>) {
        self.offset_fc1.zero(store);
        self.offset_fc2.zero(store);
    }

    /// Flattened, normalized windows as a `[B, T*8]` constant.
    pub fn window_input<T: Real>(&self, tape: &mut Tape<T>, windows: &[TrajectoryWindow<T>]) -> Result<(Var, Vec<Normalizer<T>>)> {
        let t = self.config.window;
        let mut data = Vec::with_capacity(windows.len() * t * STATE_DIM);
        let mut norms = Vec::with_capacity(windows.len());
        for w in windows {
            if w.len() != t {
                return Err(Error::InvalidDimension(format!("window length {} (expected {t})", w.len())));
            }
            if !w.is_finite() {
                return Err(Error::NonFinite("trajectory window".into()));
            }
            let n = Normalizer::for_window(w);
            for s in w.states() {
                data.extend_from_slice(&n.normalize(&s.0));
            }
            norms.push(n);
        }
        let v = tape.constant(&[windows.len(), t * STATE_DIM], data)?;
        Ok((v, norms))
    }

    /// `[B, T*8]` → `[B, K]` offsets in `[0, T-1]`.
    pub fn predict_offsets<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, flat: Var) -> Result<Var> {
        let h = self.offset_fc1.forward(tape, store, flat)?;
        let h = tape.relu(h)?;
        let o = self.offset_fc2.forward(tape, store, h)?;
        let o = tape.sigmoid(o)?;
        Ok(tape.scale(o, T::c((self.config.window - 1) as f64)))
    }

    /// `[B*K, d_model]` tokens → `[B, 8]` head output.
    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, tokens: Var, batch: usize) -> Result<Var> {
        let k = self.config.keyframes;
        let mut z = tokens;
        for (i, block) in self.blocks.iter().enumerate() {
            z = block.forward(tape, store, z, k, i)?;
        }
        let last: Vec<usize> = (0..batch).map(|b| b * k + k - 1).collect();
        let z = tape.gather_rows(z, &last)?;
        self.head.forward(tape, store, z)
    }

    /// Runs the predictor on a batch of windows whose input node is `flat`.
    pub fn forward_input<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        flat: Var,
        normalizers: Vec<Normalizer<T>>,
    ) -> Result<MambaOutput<T>> {
        let batch = normalizers.len();
        let offsets = self.predict_offsets(tape, store, flat)?;
        let keyframes = interpolate_keyframes(tape, flat, offsets, self.config.window, STATE_DIM)?;
        let e = self.embed.forward(tape, store, keyframes)?;
        let tokens = self.embed_norm.forward(tape, store, e)?;
        let head = self.encode(tape, store, tokens, batch)?;
        let mut scale = Vec::with_capacity(batch * STATE_DIM);
        let mut anchor = Vec::with_capacity(batch * STATE_DIM);
        for n in &normalizers {
            scale.extend_from_slice(&n.scale);
            anchor.extend_from_slice(&n.anchor);
        }
        let scale = tape.constant(&[batch, STATE_DIM], scale)?;
        let anchor = tape.constant(&[batch, STATE_DIM], anchor)?;
        let scaled = tape.mul(head, scale)?;
        let x_mam = tape.add(scaled, anchor)?;
        Ok(MambaOutput {
            offsets,
            keyframes,
            tokens,
            head,
            x_mam,
            normalizers,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, windows: &[TrajectoryWindow<T>]) -> Result<MambaOutput<T>> {
        let (flat, norms) = self.window_input(tape, windows)?;
        self.forward_input(tape, store, flat, norms)
    }

    /// Single-window inference without gradients.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, window: &TrajectoryWindow<T>) -> Result<[T; STATE_DIM]> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, store, std::slice::from_ref(window))?;
        let v = tape.value(out.x_mam);
        Ok(std::array::from_fn(|i| v[i]))
    }
}
