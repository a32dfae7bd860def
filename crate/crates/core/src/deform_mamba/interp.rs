use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{CustomBackward, Tape, Var};

/// Bracketing indices and blend weight for a fractional offset into a window of
/// `len` entries. The upper index is clamped so `o = len - 1` reads nothing past
/// the end.
#[inline]
pub fn bracket<T: Real>(o: T, len: usize) -> (usize, usize, T) {
    let last = T::c((len - 1) as f64);
    let o = o.max(T::zero()).min(last);
    let lo = o.floor();
    let l = lo.to_usize().unwrap_or(0).min(len - 1);
    let r = o.ceil().to_usize().unwrap_or(0).min(len - 1);
    (l, r, o - lo)
}

/// `(1 - alpha) * X[floor(o)] + alpha * X[ceil(o)]` for every offset.
///
/// `rows` holds `len` rows of `dim` values.
pub fn interpolate_rows<T: Real>(rows: &[T], len: usize, dim: usize, offsets: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(offsets.len() * dim);
    for &o in offsets {
        let (l, r, a) = bracket(o, len);
        let (xl, xr) = (&rows[l * dim..(l + 1) * dim], &rows[r * dim..(r + 1) * dim]);
        out.extend(xl.iter().zip(xr).map(|(&p, &q)| (T::one() - a) * p + a * q));
    }
    out
}

struct InterpBackward {
    batch: usize,
    len: usize,
    dim: usize,
    keyframes: usize,
}

impl<T: Real> CustomBackward<T> for InterpBackward {
    fn backward(&self, inputs: &[&[T]], _output: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let (window, offsets) = (inputs[0], inputs[1]);
        let (len, dim, k) = (self.len, self.dim, self.keyframes);
        let mut gw = vec![T::zero(); window.len()];
        let mut go = vec![T::zero(); offsets.len()];
        for b in 0..self.batch {
            let rows = &window[b * len * dim..(b + 1) * len * dim];
            for i in 0..k {
                let (l, r, a) = bracket(offsets[b * k + i], len);
                let gi = &g[(b * k + i) * dim..(b * k + i + 1) * dim];
                let mut d_off = T::zero();
                for j in 0..dim {
                    gw[b * len * dim + l * dim + j] += (T::one() - a) * gi[j];
                    gw[b * len * dim + r * dim + j] += a * gi[j];
                    d_off += gi[j] * (rows[r * dim + j] - rows[l * dim + j]);
                }
                go[b * k + i] = d_off;
            }
        }
        vec![Some(gw), Some(go)]
    }
}

/// Keyframe interpolation on the tape.
///
/// `window` is `[batch, len * dim]`, `offsets` is `[batch, keyframes]`; the
/// result is `[batch * keyframes, dim]` with gradients to both inputs.
pub fn interpolate_keyframes<T: Real>(tape: &mut Tape<T>, window: Var, offsets: Var, len: usize, dim: usize) -> Result<Var> {
    let (sw, so) = (tape.shape(window).to_vec(), tape.shape(offsets).to_vec());
    if sw.len() != 2 || so.len() != 2 || sw[0] != so[0] || sw[1] != len * dim {
        return Err(Error::shape("interpolate_keyframes", &sw, &so));
    }
    let (batch, keyframes) = (so[0], so[1]);
    let mut out = Vec::with_capacity(batch * keyframes * dim);
    {
        let (w, o) = (tape.value(window), tape.value(offsets));
        for b in 0..batch {
            out.extend(interpolate_rows(
                &w[b * len * dim..(b + 1) * len * dim],
                len,
                dim,
                &o[b * keyframes..(b + 1) * keyframes],
            ));
        }
    }
    tape.custom(
        &[window, offsets],
        vec![batch * keyframes, dim],
        out,
        Box::new(InterpBackward {
            batch,
            len,
            dim,
            keyframes,
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window() -> Vec<f64> {
        // 8 rows of 2 values: row t = [2t, -t]
        (0..8).flat_map(|t| [2.0 * t as f64, -(t as f64)]).collect()
    }

    #[test]
    fn integer_offset_reads_exact_row() {
        let out = interpolate_rows(&window(), 8, 2, &[2.0]);
        assert_eq!(out, vec![4.0, -2.0]);
    }

    #[test]
    fn midpoint_blend() {
        let out = interpolate_rows(&window(), 8, 2, &[1.5]);
        assert_eq!(out[0], 3.0);
        let rows = [0.0, 0.0, 0.0, 0.0, 2.0, 0.0];
        assert_eq!(interpolate_rows(&rows, 3, 2, &[1.5])[0], 1.0);
    }

    #[test]
    fn last_offset_stays_in_range() {
        let out = interpolate_rows(&window(), 8, 2, &[7.0]);
        assert_eq!(out, vec![14.0, -7.0]);
        assert_eq!(bracket(7.0, 8), (7, 7, 0.0));
    }

    #[test]
    fn offset_gradient_is_row_difference() {
        let mut tape = Tape::<f64>::new();
        let w = tape.variable(&[1, 16], window()).unwrap();
        let o = tape.variable(&[1, 2], vec![2.25, 5.5]).unwrap();
        let x = interpolate_keyframes(&mut tape, w, o, 8, 2).unwrap();
        assert_eq!(tape.shape(x), &[2, 2]);
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        // d/do sum = (2 - 1) per step along the window
        assert_eq!(g.wrt(o).unwrap(), &[1.0, 1.0]);
        let gw = g.wrt(w).unwrap();
        assert_eq!(gw[4], 0.75);
        assert_eq!(gw[6], 0.25);
        assert_eq!(gw[10], 0.5);
        assert_eq!(gw[12], 0.5);
    }
}
