use crate::error::{Error, Result};
use crate::scalar::Real;

use super::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = |_| store.iter().map(|(_, _, t)| vec![T::zero(); t.numel()]).collect();
        AdamW {
            config,
            step: 0,
            m: zeros(()),
            v: zeros(()),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.v
    }

    /// Restores a saved state; shapes must match the current moments.
    pub fn restore(&mut self, step: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) -> Result<()> {
        let same = |a: &[Vec<T>], b: &[Vec<T>]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len());
        if !same(&m, &self.m) || !same(&v, &self.v) {
            return Err(Error::Checkpoint("optimizer moments do not match parameters".into()));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update at learning rate `lr`. Rejected without side effects when
    /// any gradient is non-finite or shapes disagree.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Vec<T>], lr: f64) -> Result<()> {
        if lr <= 0.0 || !lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if grads.len() != store.len() {
            return Err(Error::InvalidDimension(format!(
                "{} gradient buffers for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for ((id, name, t), g) in store.iter().zip(grads) {
            if g.len() != t.numel() {
                return Err(Error::shape("adamw_step", t.shape(), &[g.len()]));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {name} (param {}) at index {i}",
                    id.index()
                )));
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = T::c(1.0 - c.beta1.powi(t));
        let bc2 = T::c(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let (lr_t, eps) = (T::c(lr), T::c(c.eps));
        let decay = T::one() - T::c(lr * c.weight_decay);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for i in 0..p.len() {
                p[i] *= decay;
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr_t * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| {
            let x = v.to_f64_lossy();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::c(max_norm / norm);
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::full(&[1], value));
        s
    }

    fn no_decay() -> AdamWConfig {
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_gradient_no_decay_keeps_params() {
        let mut s = single(0.3);
        let mut opt = AdamW::new(no_decay(), &s);
        for _ in 0..5 {
            opt.step(&mut s, &[vec![0.0]], 1e-4).unwrap();
        }
        assert_eq!(s.get(s.id("p").unwrap()).data(), &[0.3]);
        assert_eq!(opt.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // t=1: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
        let mut s = single(1.0);
        let mut opt = AdamW::new(no_decay(), &s);
        opt.step(&mut s, &[vec![1.0]], 1e-4).unwrap();
        let expected = 1.0 - 1e-4 * 1.0 / (1.0 + 1e-8);
        let got = s.get(s.id("p").unwrap()).data()[0];
        assert!((got - expected).abs() < 1e-15, "{got}");
        assert!((1.0 - got - 1e-4).abs() < 1e-11);
    }

    #[test]
    fn constant_gradient_monotone_decrease() {
        let mut s = single(0.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        let mut prev = 0.0;
        for _ in 0..3 {
            opt.step(&mut s, &[vec![0.5]], 1e-3).unwrap();
            let now = s.get(s.id("p").unwrap()).data()[0];
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn non_finite_gradient_rejected_without_update() {
        let mut s = single(2.0);
        let mut opt = AdamW::new(no_decay(), &s);
        let err = opt.step(&mut s, &[vec![f64::NAN]], 1e-4).unwrap_err();
        assert!(err.to_string().contains("p"), "{err}");
        assert_eq!(opt.step_count(), 0);
        assert_eq!(s.get(s.id("p").unwrap()).data(), &[2.0]);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g: Vec<Vec<f64>> = vec![vec![3.0, 4.0], vec![0.0]];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[0][1] - 0.8).abs() < 1e-15);
    }
}
