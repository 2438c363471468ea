//! AdamW with decoupled weight decay and global-norm gradient clipping.

use crate::param::ParamStore;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

pub struct AdamW<T> {
    cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    /// Weight decay applies to matrices and kernels only, not to biases or
    /// normalization affines.
    decay: Vec<bool>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamWConfig) -> Self {
        let zeros = |p: &crate::param::Parameter<T>| vec![T::zero(); p.tensor.len()];
        Self {
            cfg,
            step: 0,
            m: store.iter().map(|(_, p)| zeros(p)).collect(),
            v: store.iter().map(|(_, p)| zeros(p)).collect(),
            decay: store.iter().map(|(_, p)| p.tensor.rank() >= 2).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr`; `grads` is aligned with the
    /// store (see [`crate::Gradients::for_store`]).
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Vec<T>], lr: f64) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.trainable)).collect();
        for (id, trainable) in ids {
            if !trainable {
                continue;
            }
            let i = id.index();
            let decay = if self.decay[i] {
                T::of(1.0 - lr * c.weight_decay)
            } else {
                T::one()
            };
            let p = store.get_mut(id).tensor.data_mut();
            for (j, &g) in grads[i].iter().enumerate() {
                let m = b1 * self.m[i][j] + (T::one() - b1) * g;
                let v = b2 * self.v[i][j] + (T::one() - b2) * g * g;
                self.m[i][j] = m;
                self.v[i][j] = v;
                let mhat = m.f64() / bc1;
                let vhat = v.f64() / bc2;
                p[j] = p[j] * decay - T::of(lr * mhat / (vhat.sqrt() + c.eps));
            }
        }
    }
}

pub fn global_norm<T: Real>(grads: &[Vec<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| {
            let x = v.f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global L2 norm does not exceed
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::of(max_norm / (norm + 1e-6));
        grads
            .iter_mut()
            .flat_map(|g| g.iter_mut())
            .for_each(|v| *v = *v * s);
    }
    norm
}
