//! Selective state-space layer.
//!
//! Continuous dynamics `h' = A h + B x`, `y = C h + D x` with diagonal `A`,
//! discretized by the bilinear rule
//!
//! ```text
//! A_bar = (I - dt/2 A)^-1 (I + dt/2 A)
//! B_bar = (I - dt/2 A)^-1 dt B
//! ```
//!
//! and scanned sequentially: `h_t = A_bar h_{t-1} + B_bar x_t`, `y_t = C_t h_t + D x_t`, `h_0 = 0`.
//! `dt`, `B` and `C` are functions of the current token.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Real;
use crate::tensor::{CustomBackward, LayerNormParams, Linear, ParamId, ParamStore, Tape, Tensor, Var};

/// Bilinear discretization of a diagonal system for one step size.
///
/// Returns `(A_bar, B_bar)` elementwise.
pub fn discretize<T: Real>(a: &[T], b: &[T], delta: T) -> Result<(Vec<T>, Vec<T>)> {
    let half = T::c(0.5) * delta;
    let mut abar = Vec::with_capacity(a.len());
    let mut bbar = Vec::with_capacity(a.len());
    for (i, (&ai, &bi)) in a.iter().zip(b).enumerate() {
        let den = T::one() - half * ai;
        if den == T::zero() {
            return Err(Error::SingularDiscretization { channel: i });
        }
        abar.push((T::one() + half * ai) / den);
        bbar.push(delta * bi / den);
    }
    Ok((abar, bbar))
}

/// Dimensions of one scan call.
#[derive(Clone, Copy, Debug)]
pub struct ScanShape {
    pub batch: usize,
    pub seq_len: usize,
    pub d_inner: usize,
    pub d_state: usize,
}

struct ScanBackward<T> {
    shape: ScanShape,
    /// Hidden states `h_t` for every (b, t), laid out `[b, t, i, n]`.
    states: Vec<T>,
}

/// Selective scan on the tape.
///
/// Inputs: `u` and `delta` are `[batch * seq_len, d_inner]`, `a` is
/// `[d_inner, d_state]` (negative), `b` and `c` are `[batch * seq_len, d_state]`,
/// `d` is `[d_inner]`. Output is `[batch * seq_len, d_inner]`.
pub fn selective_scan<T: Real>(
    tape: &mut Tape<T>,
    u: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    d: Var,
    seq_len: usize,
) -> Result<Var> {
    let su = tape.shape(u).to_vec();
    let sa = tape.shape(a).to_vec();
    if su.len() != 2 || sa.len() != 2 || seq_len == 0 || su[0] % seq_len != 0 {
        return Err(Error::shape("selective_scan", &su, &sa));
    }
    let shape = ScanShape {
        batch: su[0] / seq_len,
        seq_len,
        d_inner: su[1],
        d_state: sa[1],
    };
    let (rows, di, n) = (su[0], shape.d_inner, shape.d_state);
    if tape.shape(delta) != su.as_slice()
        || sa[0] != di
        || tape.shape(b) != [rows, n]
        || tape.shape(c) != [rows, n]
        || tape.shape(d) != [di]
    {
        return Err(Error::shape("selective_scan", &su, tape.shape(b)));
    }
    let (y, states) = scan_forward(
        shape,
        tape.value(u),
        tape.value(delta),
        tape.value(a),
        tape.value(b),
        tape.value(c),
        tape.value(d),
    );
    tape.custom(&[u, delta, a, b, c, d], vec![rows, di], y, Box::new(ScanBackward { shape, states }))
}

fn scan_forward<T: Real>(s: ScanShape, u: &[T], delta: &[T], a: &[T], b: &[T], c: &[T], d: &[T]) -> (Vec<T>, Vec<T>) {
    let (l, di, n) = (s.seq_len, s.d_inner, s.d_state);
    let half = T::c(0.5);
    let mut y = vec![T::zero(); s.batch * l * di];
    let mut states = vec![T::zero(); s.batch * l * di * n];
    for bi in 0..s.batch {
        for t in 0..l {
            let row = bi * l + t;
            let (brow, crow) = (&b[row * n..(row + 1) * n], &c[row * n..(row + 1) * n]);
            for i in 0..di {
                let dt = delta[row * di + i];
                let x = u[row * di + i];
                let base = (row * di + i) * n;
                let mut acc = T::zero();
                for k in 0..n {
                    let ak = a[i * n + k];
                    let den = T::one() - half * dt * ak;
                    let abar = (T::one() + half * dt * ak) / den;
                    let bbar = dt * brow[k] / den;
                    let prev = if t == 0 { T::zero() } else { states[base - di * n + k] };
                    let h = abar * prev + bbar * x;
                    states[base + k] = h;
                    acc += crow[k] * h;
                }
                y[row * di + i] = acc + d[i] * x;
            }
        }
    }
    (y, states)
}

impl<T: Real> CustomBackward<T> for ScanBackward<T> {
    fn backward(&self, inputs: &[&[T]], _output: &[T], gy: &[T]) -> Vec<Option<Vec<T>>> {
        let (u, delta, a, b, c, d) = (inputs[0], inputs[1], inputs[2], inputs[3], inputs[4], inputs[5]);
        let s = self.shape;
        let (l, di, n) = (s.seq_len, s.d_inner, s.d_state);
        let h = &self.states;
        let half = T::c(0.5);
        let two = T::c(2.0);

        let mut gu = vec![T::zero(); u.len()];
        let mut gdelta = vec![T::zero(); delta.len()];
        let mut ga = vec![T::zero(); a.len()];
        let mut gb = vec![T::zero(); b.len()];
        let mut gc = vec![T::zero(); c.len()];
        let mut gd = vec![T::zero(); d.len()];
        // running dL/dh_t for one (batch, channel)
        let mut carry = vec![T::zero(); n];

        for bi in 0..s.batch {
            for i in 0..di {
                carry.iter_mut().for_each(|v| *v = T::zero());
                for t in (0..l).rev() {
                    let row = bi * l + t;
                    let g = gy[row * di + i];
                    let x = u[row * di + i];
                    let dt = delta[row * di + i];
                    gd[i] += g * x;
                    gu[row * di + i] += g * d[i];
                    let base = (row * di + i) * n;
                    let mut g_dt = T::zero();
                    let mut g_x = T::zero();
                    for k in 0..n {
                        let hk = h[base + k];
                        gc[row * n + k] += g * hk;
                        let gh = carry[k] + g * c[row * n + k];
                        let prev = if t == 0 { T::zero() } else { h[base - di * n + k] };
                        let ak = a[i * n + k];
                        let bk = b[row * n + k];
                        let den = T::one() - half * dt * ak;
                        let inv = T::one() / den;
                        let abar = (T::one() + half * dt * ak) * inv;
                        let bbar = dt * bk * inv;
                        let g_abar = gh * prev;
                        let g_bbar = gh * x;
                        g_x += gh * bbar;
                        // dA_bar/dc = 2 / den^2 with c = dt * a / 2
                        let dabar_dc = two * inv * inv;
                        g_dt += g_abar * dabar_dc * half * ak + g_bbar * (bk * inv + dt * bk * half * ak * inv * inv);
                        ga[i * n + k] += g_abar * dabar_dc * half * dt + g_bbar * dt * bk * half * dt * inv * inv;
                        gb[row * n + k] += g_bbar * dt * inv;
                        carry[k] = gh * abar;
                    }
                    gdelta[row * di + i] += g_dt;
                    gu[row * di + i] += g_x;
                }
            }
        }
        vec![Some(gu), Some(gdelta), Some(ga), Some(gb), Some(gc), Some(gd)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MambaDims {
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub dt_rank: usize,
}

/// Pre-norm gated selective-SSM block with a residual connection.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub dims: MambaDims,
    pub norm: LayerNormParams,
    pub in_proj: Linear,
    pub x_proj: Linear,
    pub dt_proj: Linear,
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub out_proj: Linear,
}

impl MambaBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dims: MambaDims, rng: &mut SplitMix64) -> Self {
        let MambaDims {
            d_model,
            d_inner,
            d_state,
            dt_rank,
        } = dims;
        let norm = LayerNormParams::new(store, &format!("{name}.norm"), d_model);
        let in_proj = Linear::new(store, &format!("{name}.in_proj"), d_model, 2 * d_inner, false, rng);
        let x_proj = Linear::new(store, &format!("{name}.x_proj"), d_inner, dt_rank + 2 * d_state, false, rng);
        let dt_proj = Linear::new(store, &format!("{name}.dt_proj"), dt_rank, d_inner, true, rng);
        // step sizes log-uniform in [1e-3, 1e-1], stored through the inverse softplus
        if let Some(bias) = dt_proj.bias {
            for v in store.get_mut(bias).data_mut() {
                let dt = (rng.uniform() * (0.1f64.ln() - 1e-3f64.ln()) + 1e-3f64.ln()).exp();
                *v = T::c(dt + (-(-dt).exp_m1()).ln());
            }
        }
        let a_log: Vec<T> = (0..d_inner)
            .flat_map(|_| (1..=d_state).map(|k| T::c((k as f64).ln())))
            .collect();
        let a_log = store.add(format!("{name}.a_log"), Tensor::new(&[d_inner, d_state], a_log).expect("a_log shape"));
        let d_skip = store.add(format!("{name}.d"), Tensor::full(&[d_inner], T::one()));
        let out_proj = Linear::new(store, &format!("{name}.out_proj"), d_inner, d_model, false, rng);
        MambaBlock {
            dims,
            norm,
            in_proj,
            x_proj,
            dt_proj,
            a_log,
            d_skip,
            out_proj,
        }
    }

    /// `tokens` is `[batch * seq_len, d_model]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, tokens: Var, seq_len: usize, layer: usize) -> Result<Var> {
        let MambaDims {
            d_inner,
            d_state,
            dt_rank,
            ..
        } = self.dims;
        let xn = self.norm.forward(tape, store, tokens)?;
        let xz = self.in_proj.forward(tape, store, xn)?;
        let xs = tape.slice_cols(xz, 0, d_inner)?;
        let z = tape.slice_cols(xz, d_inner, d_inner)?;
        let proj = self.x_proj.forward(tape, store, xs)?;
        let dt_low = tape.slice_cols(proj, 0, dt_rank)?;
        let bm = tape.slice_cols(proj, dt_rank, d_state)?;
        let cm = tape.slice_cols(proj, dt_rank + d_state, d_state)?;
        let dt = self.dt_proj.forward(tape, store, dt_low)?;
        let delta = tape.softplus(dt)?;
        let a_log = tape.param(store, self.a_log);
        let a_exp = tape.exp(a_log)?;
        let a = tape.neg(a_exp)?;
        let d = tape.param(store, self.d_skip);
        let y = selective_scan(tape, xs, delta, a, bm, cm, d, seq_len)?;
        let gate = tape.silu(z)?;
        let gated = tape.mul(y, gate)?;
        let out = self.out_proj.forward(tape, store, gated)?;
        let res = tape.add(tokens, out)?;
        if let Some(pos) = tape.value(res).iter().position(|v| !v.is_finite()) {
            let row = pos / self.dims.d_model;
            return Err(Error::NonFinite(format!(
                "mamba layer {layer}, token {} of sequence {}",
                row % seq_len,
                row / seq_len
            )));
        }
        Ok(res)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_dynamics_is_identity() {
        let (abar, bbar) = discretize(&[0.0, 0.0], &[2.0, -1.0], 0.3).unwrap();
        assert_eq!(abar, vec![1.0, 1.0]);
        assert_eq!(bbar, vec![0.6, -0.3]);
    }

    #[test]
    fn scalar_bilinear_value() {
        let (abar, _) = discretize::<f64>(&[-1.0], &[1.0], 0.1).unwrap();
        assert!((abar[0] - 0.95 / 1.05).abs() < 1e-15);
        assert!((abar[0] - 0.904_761_9).abs() < 1e-7);
    }

    #[test]
    fn singular_channel_reported() {
        // 1 - dt*a/2 == 0 at a = 2/dt
        assert!(matches!(
            discretize(&[-1.0, 20.0], &[1.0, 1.0], 0.1),
            Err(Error::SingularDiscretization { channel: 1 })
        ));
    }

    #[test]
    fn small_step_first_order_bound() {
        let a = [-0.5, -2.0, -7.0];
        let norm_a = 7.0;
        for dt in [1e-2, 1e-3, 1e-4] {
            let (abar, _) = discretize(&a, &[1.0; 3], dt).unwrap();
            let dev = abar.iter().map(|v| (v - 1.0f64).abs()).fold(0.0, f64::max);
            assert!(dev <= dt * norm_a + 2.0 * (dt * norm_a).powi(2), "dt={dt} dev={dev}");
            // slope ratio ~ 10 between successive decades
            let (abar10, _) = discretize(&a, &[1.0; 3], dt * 10.0).unwrap();
            let dev10 = abar10.iter().map(|v| (v - 1.0f64).abs()).fold(0.0, f64::max);
            let ratio = dev10 / dev;
            assert!((ratio - 10.0).abs() < 10.0 * 0.5, "ratio {ratio}");
        }
    }
}
