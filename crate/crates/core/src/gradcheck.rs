//! Central finite-difference checks of tape gradients.

use crate::deform_mamba::{DeformMamba, DeformMambaConfig, TrajectoryWindow};
use crate::error::Result;
use crate::kalman::{MotionState, STATE_DIM};
use crate::model::{MotionModel, PredictionInput};
use crate::motion_gate::{blend_on_tape, MotionGate};
use crate::rng::SplitMix64;
use crate::scalar::Real;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::tracker::HISTORY_LEN;
use crate::training::{batch_loss, loss_conf_tape, loss_state_tape, TrainConfig, TrainingSample};

/// Relative error is `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates sampled per parameter tensor; `None` checks every one.
    pub per_param: Option<usize>,
    pub seed: u64,
    /// Scales analytic gradients by `1 + corrupt`; a negative control.
    pub corrupt: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            per_param: None,
            seed: 0,
            corrupt: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst: Option<CoordError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |w| w.rel_error)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() <= tol
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_error() > self.max_rel_error() || self.worst.is_none() {
            if other.worst.is_some() {
                self.worst = other.worst;
            }
        }
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the tape gradient of `loss_fn` against central differences for
/// every (or a sample of) stored parameter coordinates.
///
/// `loss_fn` must build a scalar loss from the store on the given tape.
pub fn check<T, F>(store: &mut ParamStore<T>, loss_fn: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&ParamStore<T>, &mut Tape<T>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(store, &mut tape)?;
    let grads = tape.backward(loss)?.param_grads(store);

    let eval = |store: &ParamStore<T>| -> Result<f64> {
        let mut tape = Tape::inference();
        let l = loss_fn(store, &mut tape)?;
        Ok(tape.item(l).to_f64_lossy())
    };

    let mut rng = SplitMix64::derived(opts.seed, "gradcheck");
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let n = store.get(id).numel();
        let coords: Vec<usize> = match opts.per_param {
            Some(c) if c < n => (0..c).map(|_| rng.below(n as u64) as usize).collect(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = store.get(id).data()[i];
            let h = T::c(opts.step);
            store.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let analytic = grads[k][i].to_f64_lossy() * (1.0 + opts.corrupt);
            let e = rel_error(analytic, numeric);
            report.checked += 1;
            if report.worst.as_ref().is_none_or(|w| e > w.rel_error) {
                report.worst = Some(CoordError {
                    param: store.name(id).to_string(),
                    index: i,
                    analytic,
                    numeric,
                    rel_error: e,
                });
            }
        }
    }
    Ok(report)
}

/// Worst result per learnable component over a number of seeded trials.
#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub module: &'static str,
    pub trials: usize,
    pub report: GradCheckReport,
}

/// Components covered by [`suite`].
pub const SUITE_MODULES: [&str; 5] = ["deform_mamba", "motion_gate", "loss_state", "loss_conf", "model"];

fn random_window(rng: &mut SplitMix64) -> TrajectoryWindow<f64> {
    let valid = 1 + rng.below(8) as usize;
    let mut s = MotionState([
        rng.uniform_range(50.0, 1200.0),
        rng.uniform_range(50.0, 700.0),
        rng.uniform_range(0.4, 1.2),
        rng.uniform_range(20.0, 80.0),
        0.0,
        0.0,
        0.0,
        0.0,
    ]);
    let v = [rng.normal() * 4.0, rng.normal() * 4.0];
    let hist: Vec<_> = (0..valid)
        .map(|_| {
            s.0[4] = v[0] + rng.normal() * 0.5;
            s.0[5] = v[1] + rng.normal() * 0.5;
            s.0[0] += s.0[4];
            s.0[1] += s.0[5];
            s
        })
        .collect();
    TrajectoryWindow::from_history(&hist, HISTORY_LEN).expect("non-empty history")
}

fn random_input(rng: &mut SplitMix64) -> PredictionInput<f64> {
    let window = random_window(rng);
    let last = *window.states().last().expect("window");
    let mut x_kal = last.0;
    for i in 0..4 {
        x_kal[i] += x_kal[i + 4] + rng.normal();
    }
    let h = last.h();
    let sigma_kal = std::array::from_fn(|i| if i == 2 || i == 6 { 0.01 } else { rng.uniform_range(0.02, 0.2) * h });
    PredictionInput { window, x_kal, sigma_kal }
}

fn vec_param(store: &mut ParamStore<f64>, name: &str, rng: &mut SplitMix64, n: usize, positive: bool) -> ParamId {
    let data = (0..n)
        .map(|_| if positive { rng.uniform_range(0.3, 3.0) } else { rng.normal() * 2.0 })
        .collect();
    store.add(name, Tensor::new(&[2, n / 2], data).expect("even length"))
}

/// Finite-difference checks of every learnable component over `trials`
/// seeded trials; `corrupt` is forwarded as a negative control.
pub fn suite(trials: usize, seed: u64, corrupt: f64) -> Result<Vec<SuiteReport>> {
    let mut out: Vec<SuiteReport> = SUITE_MODULES
        .iter()
        .map(|&module| SuiteReport {
            module,
            trials,
            report: GradCheckReport::default(),
        })
        .collect();
    for trial in 0..trials as u64 {
        let tseed = seed.wrapping_add(trial);
        let opts = GradCheckOptions {
            per_param: Some(3),
            seed: tseed,
            corrupt,
            ..Default::default()
        };
        let mut rng = SplitMix64::derived(tseed, "gradcheck.inputs");
        let inputs: Vec<_> = (0..2).map(|_| random_input(&mut rng)).collect();

        // DeformMamba on its own
        let mut store = ParamStore::new();
        let dm = DeformMamba::new(&mut store, DeformMambaConfig::default(), &mut SplitMix64::derived(tseed, "gradcheck.dm"));
        let windows: Vec<_> = inputs.iter().map(|i| i.window.clone()).collect();
        let r = check(
            &mut store,
            |s, t| {
                let o = dm.forward(t, s, &windows)?;
                let sq = t.square(o.head)?;
                Ok(t.sum(sq))
            },
            opts,
        )?;
        out[0].report.merge(r);

        // gate and fusion on random inputs
        let mut store = ParamStore::new();
        let gate = MotionGate::new(&mut store, &mut SplitMix64::derived(tseed, "gradcheck.gate"));
        let gin: Vec<f64> = (0..2 * 3 * STATE_DIM).map(|_| rng.normal()).collect();
        let kal: Vec<f64> = (0..2 * STATE_DIM).map(|_| rng.normal()).collect();
        let mam: Vec<f64> = (0..2 * STATE_DIM).map(|_| rng.normal()).collect();
        let r = check(
            &mut store,
            |s, t| {
                let input = t.constant(&[2, 3 * STATE_DIM], gin.clone())?;
                let (alpha, sigma) = gate.forward(t, s, input)?;
                let k = t.constant(&[2, STATE_DIM], kal.clone())?;
                let m = t.constant(&[2, STATE_DIM], mam.clone())?;
                let x = blend_on_tape(t, k, m, alpha)?;
                let sf = blend_on_tape(t, k, sigma, alpha)?;
                let a = t.square(x)?;
                let b = t.square(sf)?;
                let l = t.add(a, b)?;
                Ok(t.sum(l))
            },
            opts,
        )?;
        out[1].report.merge(r);

        // losses with respect to prediction and uncertainty
        let mut store = ParamStore::new();
        let x = vec_param(&mut store, "x", &mut rng, 2 * STATE_DIM, false);
        let sg = vec_param(&mut store, "sigma", &mut rng, 2 * STATE_DIM, true);
        let gt: Vec<f64> = (0..2 * STATE_DIM).map(|_| rng.normal() * 2.0).collect();
        let r = check(
            &mut store,
            |s, t| {
                let xv = t.param(s, x);
                let g = t.constant(&[2, STATE_DIM], gt.clone())?;
                loss_state_tape(t, xv, g)
            },
            GradCheckOptions { per_param: None, ..opts },
        )?;
        out[2].report.merge(r);
        let r = check(
            &mut store,
            |s, t| {
                let xv = t.param(s, x);
                let sv = t.param(s, sg);
                let g = t.constant(&[2, STATE_DIM], gt.clone())?;
                loss_conf_tape(t, xv, g, sv)
            },
            GradCheckOptions { per_param: None, ..opts },
        )?;
        out[3].report.merge(r);

        // the whole model under the training objective
        let mut model = MotionModel::<f64>::new(tseed);
        let samples: Vec<TrainingSample> = inputs
            .iter()
            .map(|inp| {
                let mut target = inp.x_kal;
                for v in &mut target {
                    *v += rng.normal();
                }
                TrainingSample {
                    input: inp.clone(),
                    target: MotionState(target),
                    target_frame: 0,
                    track_id: 0,
                }
            })
            .collect();
        let batch: Vec<&TrainingSample> = samples.iter().collect();
        let cfg = TrainConfig::default();
        let mut store = std::mem::take(&mut model.store);
        let r = check(&mut store, |s, t| Ok(batch_loss(t, &model, s, &batch, &cfg)?.0), opts)?;
        out[4].report.merge(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_passes_and_corruption_fails() {
        let mut store = ParamStore::<f64>::new();
        store.add("x", Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap());
        let f = |s: &ParamStore<f64>, t: &mut Tape<f64>| {
            let x = t.param(s, s.id("x").unwrap());
            let y = t.square(x)?;
            Ok(t.sum(y))
        };
        let ok = check(&mut store, f, GradCheckOptions::default()).unwrap();
        assert_eq!(ok.checked, 3);
        assert!(ok.passes(1e-8), "{ok:?}");
        let bad = check(
            &mut store,
            f,
            GradCheckOptions {
                corrupt: 1e-2,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(!bad.passes(1e-4));
    }
}
