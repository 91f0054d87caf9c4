use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore};

/// Inverse square root schedule with linear warmup; `step` counts from 1.
pub fn lr_schedule(step: usize, lr_peak: f64, warmup: usize) -> f64 {
    let (s, w) = (step.max(1) as f64, warmup.max(1) as f64);
    lr_peak * (s / w).min((w / s).sqrt())
}

/// Adam with bias correction. Parameters that receive no gradient in a
/// step are left untouched, moments included.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    t: Vec<u64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        let zeros: Vec<Vec<S>> = store
            .iter()
            .map(|(_, p)| vec![S::zero(); p.value.numel()])
            .collect();
        Adam {
            v: zeros.clone(),
            m: zeros,
            t: vec![0; store.len()],
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }

    /// Applies one update. When `clip > 0` the gradient is rescaled to at
    /// most that global L2 norm. Returns the norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[(ParamId, &[S])], lr: f64, clip: f64) -> Result<f64> {
        let norm = grads
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let (one, eps, scale) = (S::one(), S::of(self.eps), S::of(scale));
        for &(pid, g) in grads {
            let i = pid.index();
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let c1 = S::of(1.0 - self.beta1.powi(t));
            let c2 = S::of(1.0 - self.beta2.powi(t));
            let step = S::of(lr);
            let p = store.get_mut(pid).value.data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.len() {
                let gk = g[k] * scale;
                m[k] = b1 * m[k] + (one - b1) * gk;
                v[k] = b2 * v[k] + (one - b2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= step * mh / (vh.sqrt() + eps);
            }
        }
        Ok(norm)
    }
}
