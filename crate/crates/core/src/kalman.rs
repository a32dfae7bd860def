//! Constant-velocity Kalman filter over the `[x, y, a, h, vx, vy, va, vh]` box state.
//!
//! Noise follows the SORT/DeepSORT convention: position and size deviations
//! scale with the box height, the aspect ratio gets small fixed deviations.

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const STATE_DIM: usize = 8;
pub const MEAS_DIM: usize = 4;

pub type Mat8<T> = [[T; STATE_DIM]; STATE_DIM];

/// Box state: center `(x, y)`, aspect ratio `a = w / h`, height `h` and the
/// per-frame deltas of those four.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionState<T>(pub [T; STATE_DIM]);

impl<T: Real> MotionState<T> {
    pub fn from_box(b: [T; MEAS_DIM]) -> Self {
        let z = T::zero();
        MotionState([b[0], b[1], b[2], b[3], z, z, z, z])
    }

    pub fn x(&self) -> T {
        self.0[0]
    }

    pub fn y(&self) -> T {
        self.0[1]
    }

    pub fn a(&self) -> T {
        self.0[2]
    }

    pub fn h(&self) -> T {
        self.0[3]
    }

    pub fn velocity(&self) -> [T; MEAS_DIM] {
        [self.0[4], self.0[5], self.0[6], self.0[7]]
    }

    /// `[cx, cy, a, h]`.
    pub fn bbox(&self) -> [T; MEAS_DIM] {
        [self.0[0], self.0[1], self.0[2], self.0[3]]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KalmanTrackState<T> {
    pub mean: MotionState<T>,
    pub covariance: Mat8<T>,
}

/// Noise model. Deviations are `weight * h` unless noted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KalmanNoise {
    pub w_pos: f64,
    pub w_vel: f64,
    /// Fixed aspect-ratio deviation (process and initial).
    pub aspect_std: f64,
    /// Fixed aspect-ratio velocity deviation.
    pub aspect_vel_std: f64,
    /// Measurement deviation weight for x, y, h.
    pub meas_w_pos: f64,
    pub meas_aspect_std: f64,
}

impl Default for KalmanNoise {
    fn default() -> Self {
        KalmanNoise {
            w_pos: 1.0 / 20.0,
            w_vel: 1.0 / 160.0,
            aspect_std: 1e-2,
            aspect_vel_std: 1e-5,
            meas_w_pos: 1.0 / 20.0,
            meas_aspect_std: 1e-2,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KalmanFilter {
    pub noise: KalmanNoise,
}

/// Floor on reported standard deviations.
pub const SIGMA_FLOOR: f64 = 1e-6;

impl KalmanFilter {
    pub fn new(noise: KalmanNoise) -> Self {
        KalmanFilter { noise }
    }

    pub fn initiate<T: Real>(&self, measurement: [T; MEAS_DIM]) -> Result<KalmanTrackState<T>> {
        check_measurement(&measurement)?;
        let h = measurement[3].to_f64_lossy();
        let n = &self.noise;
        let std = [
            2.0 * n.w_pos * h,
            2.0 * n.w_pos * h,
            n.aspect_std,
            2.0 * n.w_pos * h,
            10.0 * n.w_vel * h,
            10.0 * n.w_vel * h,
            n.aspect_vel_std,
            10.0 * n.w_vel * h,
        ];
        let mut covariance = [[T::zero(); STATE_DIM]; STATE_DIM];
        for i in 0..STATE_DIM {
            covariance[i][i] = T::c(std[i] * std[i]);
        }
        Ok(KalmanTrackState {
            mean: MotionState::from_box(measurement),
            covariance,
        })
    }

    fn process_noise(&self, h: f64) -> [f64; STATE_DIM] {
        let n = &self.noise;
        let p = n.w_pos * h;
        let v = n.w_vel * h;
        [
            p * p,
            p * p,
            n.aspect_std * n.aspect_std,
            p * p,
            v * v,
            v * v,
            n.aspect_vel_std * n.aspect_vel_std,
            v * v,
        ]
    }

    /// One constant-velocity step: `x <- F x`, `P <- F P F^T + Q`.
    pub fn predict<T: Real>(&self, state: &KalmanTrackState<T>) -> KalmanTrackState<T> {
        let m = &state.mean.0;
        let mut mean = *m;
        for i in 0..MEAS_DIM {
            mean[i] = m[i] + m[i + MEAS_DIM];
        }
        // F P F^T with F = [[I, I], [0, I]] in 4x4 blocks
        let p = &state.covariance;
        let mut fp = *p;
        for i in 0..MEAS_DIM {
            for j in 0..STATE_DIM {
                fp[i][j] = p[i][j] + p[i + MEAS_DIM][j];
            }
        }
        let mut cov = fp;
        for i in 0..STATE_DIM {
            for j in 0..MEAS_DIM {
                cov[i][j] = fp[i][j] + fp[i][j + MEAS_DIM];
            }
        }
        let q = self.process_noise(m[3].to_f64_lossy());
        for i in 0..STATE_DIM {
            cov[i][i] += T::c(q[i]);
        }
        symmetrize(&mut cov);
        KalmanTrackState {
            mean: MotionState(mean),
            covariance: cov,
        }
    }

    fn measurement_noise(&self, h: f64) -> [f64; MEAS_DIM] {
        let n = &self.noise;
        let p = n.meas_w_pos * h;
        [p * p, p * p, n.meas_aspect_std * n.meas_aspect_std, p * p]
    }

    /// Kalman correction with `H = [I 0]`; covariance `P - K H P`, symmetrized.
    pub fn update<T: Real>(&self, state: &KalmanTrackState<T>, measurement: [T; MEAS_DIM]) -> Result<KalmanTrackState<T>> {
        check_measurement(&measurement)?;
        let p = &state.covariance;
        let r = self.measurement_noise(state.mean.h().to_f64_lossy());
        let mut s = [[T::zero(); MEAS_DIM]; MEAS_DIM];
        for i in 0..MEAS_DIM {
            for j in 0..MEAS_DIM {
                s[i][j] = p[i][j];
            }
            s[i][i] += T::c(r[i]);
        }
        let chol = cholesky4(&s)?;
        // K^T = S^-1 (H P), a 4x8 matrix
        let mut kt = [[T::zero(); STATE_DIM]; MEAS_DIM];
        for j in 0..STATE_DIM {
            let col = [p[0][j], p[1][j], p[2][j], p[3][j]];
            let sol = chol_solve4(&chol, col);
            for i in 0..MEAS_DIM {
                kt[i][j] = sol[i];
            }
        }
        let m = &state.mean.0;
        let innovation: [T; MEAS_DIM] = std::array::from_fn(|i| measurement[i] - m[i]);
        let mut mean = *m;
        for (j, mj) in mean.iter_mut().enumerate() {
            for i in 0..MEAS_DIM {
                *mj += kt[i][j] * innovation[i];
            }
        }
        let mut cov = *p;
        for a in 0..STATE_DIM {
            for b in 0..STATE_DIM {
                let mut khp = T::zero();
                for i in 0..MEAS_DIM {
                    khp += kt[i][a] * p[i][b];
                }
                cov[a][b] = p[a][b] - khp;
            }
        }
        symmetrize(&mut cov);
        Ok(KalmanTrackState {
            mean: MotionState(mean),
            covariance: cov,
        })
    }

    /// Square roots of the covariance diagonal, floored at [`SIGMA_FLOOR`].
    pub fn sigma_diag<T: Real>(&self, state: &KalmanTrackState<T>) -> [T; STATE_DIM] {
        sigma_diag(state)
    }
}

pub fn sigma_diag<T: Real>(state: &KalmanTrackState<T>) -> [T; STATE_DIM] {
    std::array::from_fn(|i| state.covariance[i][i].max(T::zero()).sqrt().max(T::c(SIGMA_FLOOR)))
}

fn check_measurement<T: Real>(m: &[T; MEAS_DIM]) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidMeasurement(format!("non-finite measurement {m:?}")));
    }
    if m[2] <= T::zero() || m[3] <= T::zero() {
        return Err(Error::InvalidMeasurement(format!(
            "aspect ratio and height must be positive, got a={} h={}",
            m[2], m[3]
        )));
    }
    Ok(())
}

fn symmetrize<T: Real>(p: &mut Mat8<T>) {
    let half = T::c(0.5);
    for i in 0..STATE_DIM {
        for j in i + 1..STATE_DIM {
            let v = (p[i][j] + p[j][i]) * half;
            p[i][j] = v;
            p[j][i] = v;
        }
    }
}

/// Lower Cholesky factor of a symmetric 4x4 matrix.
fn cholesky4<T: Real>(s: &[[T; MEAS_DIM]; MEAS_DIM]) -> Result<[[T; MEAS_DIM]; MEAS_DIM]> {
    let mut l = [[T::zero(); MEAS_DIM]; MEAS_DIM];
    let mut pivots = [0.0f64; MEAS_DIM];
    for j in 0..MEAS_DIM {
        let mut d = s[j][j];
        for k in 0..j {
            d -= l[j][k] * l[j][k];
        }
        pivots[j] = d.to_f64_lossy();
        let scale = (0..MEAS_DIM).map(|i| s[i][i].to_f64_lossy().abs()).fold(0.0, f64::max);
        if !(d.to_f64_lossy() > scale * 1e-14) {
            let min = pivots[..=j].iter().copied().fold(f64::INFINITY, f64::min);
            let max = pivots[..=j].iter().copied().fold(0.0, f64::max);
            let condition = if min > 0.0 { max / min } else { f64::INFINITY };
            return Err(Error::SingularInnovation { condition });
        }
        let dj = d.sqrt();
        l[j][j] = dj;
        for i in j + 1..MEAS_DIM {
            let mut v = s[i][j];
            for k in 0..j {
                v -= l[i][k] * l[j][k];
            }
            l[i][j] = v / dj;
        }
    }
    Ok(l)
}

fn chol_solve4<T: Real>(l: &[[T; MEAS_DIM]; MEAS_DIM], b: [T; MEAS_DIM]) -> [T; MEAS_DIM] {
    let mut y = [T::zero(); MEAS_DIM];
    for i in 0..MEAS_DIM {
        let mut v = b[i];
        for k in 0..i {
            v -= l[i][k] * y[k];
        }
        y[i] = v / l[i][i];
    }
    let mut x = [T::zero(); MEAS_DIM];
    for i in (0..MEAS_DIM).rev() {
        let mut v = y[i];
        for k in i + 1..MEAS_DIM {
            v -= l[k][i] * x[k];
        }
        x[i] = v / l[i][i];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kf() -> KalmanFilter {
        KalmanFilter::default()
    }

    #[test]
    fn initiate_zero_velocity_and_positive_diagonal() {
        let s = kf().initiate([10.0, 20.0, 0.5, 40.0]).unwrap();
        assert_eq!(s.mean.0, [10.0, 20.0, 0.5, 40.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(s, kf().initiate([10.0, 20.0, 0.5, 40.0]).unwrap());
        for i in 0..STATE_DIM {
            assert!(s.covariance[i][i] > 0.0);
        }
    }

    #[test]
    fn initiate_rejects_bad_extent() {
        assert!(matches!(kf().initiate([0.0, 0.0, 0.5, 0.0]), Err(Error::InvalidMeasurement(_))));
        assert!(matches!(kf().initiate([0.0, 0.0, -1.0, 4.0]), Err(Error::InvalidMeasurement(_))));
    }

    #[test]
    fn predict_advances_position_by_velocity() {
        let mut s = kf().initiate([0.0, 0.0, 1.0, 10.0]).unwrap();
        s.mean.0 = [0.0, 0.0, 1.0, 10.0, 2.0, 3.0, 0.0, 0.0];
        let p = kf().predict(&s);
        assert_eq!(p.mean.0, [2.0, 3.0, 1.0, 10.0, 2.0, 3.0, 0.0, 0.0]);
        let trace = |m: &Mat8<f64>| (0..8).map(|i| m[i][i]).sum::<f64>();
        assert!(trace(&p.covariance) > trace(&s.covariance));
        let (a, b) = (kf().sigma_diag(&s), kf().sigma_diag(&p));
        for i in 0..STATE_DIM {
            assert!(b[i] >= a[i]);
        }
    }

    #[test]
    fn sigma_diag_roots_and_floor() {
        let mut s = kf().initiate([0.0, 0.0, 1.0, 10.0]).unwrap();
        let diag = [4.0, 9.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        s.covariance = [[0.0; 8]; 8];
        for i in 0..8 {
            s.covariance[i][i] = diag[i];
        }
        assert_eq!(sigma_diag(&s), [2.0, 3.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        s.covariance[5][5] = 0.0;
        assert_eq!(sigma_diag(&s)[5], 1e-6);
    }

    #[test]
    fn zero_innovation_keeps_mean() {
        let noise = KalmanNoise {
            meas_w_pos: 1e-9,
            meas_aspect_std: 1e-9,
            ..Default::default()
        };
        let f = KalmanFilter::new(noise);
        let mut s = f.initiate::<f64>([5.0, 6.0, 1.0, 20.0]).unwrap();
        s.mean.0[4] = 1.0;
        let p = f.predict(&s);
        let u = f.update(&p, p.mean.bbox()).unwrap();
        for i in 0..STATE_DIM {
            assert!((u.mean.0[i] - p.mean.0[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_measurement_limit() {
        let noise = KalmanNoise {
            meas_w_pos: 1e-12,
            meas_aspect_std: 1e-12,
            ..Default::default()
        };
        let f = KalmanFilter::new(noise);
        let s = f.predict(&f.initiate::<f64>([5.0, 6.0, 1.0, 20.0]).unwrap());
        let z = [9.0, 2.0, 1.3, 22.0];
        let u = f.update(&s, z).unwrap();
        for i in 0..MEAS_DIM {
            assert!((u.mean.0[i] - z[i]).abs() < 1e-6, "{i}: {}", u.mean.0[i]);
        }
    }

    #[test]
    fn singular_innovation_reports_condition() {
        let f = KalmanFilter::new(KalmanNoise {
            meas_w_pos: 0.0,
            meas_aspect_std: 0.0,
            ..Default::default()
        });
        let mut s = f.initiate([0.0, 0.0, 1.0, 10.0]).unwrap();
        s.covariance = [[0.0; 8]; 8];
        match f.update(&s, [1.0, 1.0, 1.0, 10.0]) {
            Err(Error::SingularInnovation { .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn single_precision_predict() {
        let s = kf().initiate([1.0f32, 2.0, 0.5, 30.0]).unwrap();
        let p = kf().predict(&s);
        assert_eq!(p.mean.0[0], 1.0f32);
        assert!(p.covariance[0][0] > s.covariance[0][0]);
    }
}
