//! Parameterized layers built from graph primitives. Layers only hold
//! parameter ids, so one layer value works with any store precision.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::param::{Init, ParamId, ParamStore};
use crate::real::Real;

pub const WEIGHT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        seed: u64,
    ) -> Result<Self> {
        let w = store.init(
            &format!("{name}.w"),
            &[d_in, d_out],
            Init::TruncNormal { std: WEIGHT_STD },
            seed,
        )?;
        let b = if bias {
            Some(store.init(&format!("{name}.b"), &[d_out], Init::Zeros, seed)?)
        } else {
            None
        };
        Ok(Self { w, b, d_in, d_out })
    }

    /// Applies `x @ w + b` along the last axis.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Square `k x k` kernel; padding `k / 2` keeps stride-1 outputs the same
    /// size as the input.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        bias: bool,
        seed: u64,
    ) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(TensorError::Invalid {
                op: "conv2d",
                reason: format!("kernel size {k} must be odd"),
            });
        }
        let fan_in = c_in * k * k;
        let w = store.init(
            &format!("{name}.w"),
            &[c_out, c_in, k, k],
            Init::FanInUniform { fan_in },
            seed,
        )?;
        let b = if bias {
            Some(store.init(&format!("{name}.b"), &[c_out], Init::Zeros, seed)?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            stride,
            pad: k / 2,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl ConvTranspose2d {
    /// `k x k` kernel with stride `k`, so the output extent is exactly `k`
    /// times the input.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        seed: u64,
    ) -> Result<Self> {
        let w = store.init(
            &format!("{name}.w"),
            &[c_in, c_out, k, k],
            Init::FanInUniform { fan_in: c_in },
            seed,
        )?;
        let b = store.init(&format!("{name}.b"), &[c_out], Init::Zeros, seed)?;
        Ok(Self { w, b, stride: k })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv_transpose2d(x, w, Some(b), self.stride)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        eps: f64,
        seed: u64,
    ) -> Result<Self> {
        let gamma = store.init(&format!("{name}.gamma"), &[width], Init::Ones, seed)?;
        let beta = store.init(&format!("{name}.beta"), &[width], Init::Zeros, seed)?;
        Ok(Self { gamma, beta, eps })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, axis: usize) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, axis, gamma, beta, self.eps)
    }
}

/// Batch norm with running moments kept as non-trainable buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    /// Counts applied moment updates, so eval before training can be flagged.
    pub updates: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm2d {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            gamma: store.init(&format!("{name}.gamma"), &[channels], Init::Ones, seed)?,
            beta: store.init(&format!("{name}.beta"), &[channels], Init::Zeros, seed)?,
            running_mean: store.buffer(&format!("{name}.running_mean"), &[channels], 0.0)?,
            running_var: store.buffer(&format!("{name}.running_var"), &[channels], 1.0)?,
            updates: store.buffer(&format!("{name}.updates"), &[1], 0.0)?,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        })
    }

    /// Training mode: normalizes with batch moments and returns them so the
    /// caller can fold them into the running moments after the step.
    pub fn forward_train<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
    ) -> Result<(Var, crate::graph::BatchMoments)> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.batch_norm_train(x, gamma, beta, self.eps)
    }

    /// Eval mode: `(x - running_mean) / sqrt(running_var + eps) * gamma + beta`.
    pub fn forward_eval<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let c = g.shape(x)[1];
        let (rm, rv, n) = {
            let rm = g.param(self.running_mean);
            let rv = g.param(self.running_var);
            let n = g.param(self.updates);
            (rm, rv, n)
        };
        if g.data(n)[0] == T::zero() {
            log::warn!(
                "batch norm evaluated before any training update; using initial running moments"
            );
        }
        let inv: Vec<T> = g
            .data(rv)
            .iter()
            .map(|&v| T::one() / (v + T::of(self.eps)).sqrt())
            .collect();
        let inv = g.input(crate::tensor::Tensor::new(vec![1, c, 1, 1], inv)?);
        let rm = g.reshape(rm, &[1, c, 1, 1])?;
        let gamma = g.param(self.gamma);
        let gamma = g.reshape(gamma, &[1, c, 1, 1])?;
        let beta = g.param(self.beta);
        let beta = g.reshape(beta, &[1, c, 1, 1])?;
        let centered = g.sub(x, rm)?;
        let normed = g.mul(centered, inv)?;
        let scaled = g.mul(normed, gamma)?;
        g.add(scaled, beta)
    }

    /// `running = momentum * batch + (1 - momentum) * running`.
    pub fn update_running<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        moments: &crate::graph::BatchMoments,
    ) {
        let m = self.momentum;
        for (id, batch) in [
            (self.running_mean, &moments.mean),
            (self.running_var, &moments.var),
        ] {
            for (r, &b) in store.get_mut(id).tensor.data_mut().iter_mut().zip(batch) {
                *r = T::of(m * b + (1.0 - m) * r.f64());
            }
        }
        let n = &mut store.get_mut(self.updates).tensor.data_mut()[0];
        *n = *n + T::one();
    }
}

/// Gated recurrent cell applied row-wise to `[N, d_in]` inputs with one
/// shared parameter set:
///
/// ```text
/// r = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
/// z = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
/// n = tanh(x W_in + b_in + r * (h W_hn + b_hn))
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub ir: Linear,
    pub iz: Linear,
    pub in_: Linear,
    pub hr: Linear,
    pub hz: Linear,
    pub hn: Linear,
    pub d_in: usize,
    pub d_hidden: usize,
}

impl GruCell {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut lin =
            |part: &str, d| Linear::new(store, &format!("{name}.{part}"), d, d_hidden, true, seed);
        Ok(Self {
            ir: lin("ir", d_in)?,
            iz: lin("iz", d_in)?,
            in_: lin("in", d_in)?,
            hr: lin("hr", d_hidden)?,
            hz: lin("hz", d_hidden)?,
            hn: lin("hn", d_hidden)?,
            d_in,
            d_hidden,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, h: Var, x: Var) -> Result<Var> {
        let (hs, xs) = (g.shape(h).to_vec(), g.shape(x).to_vec());
        if hs.last() != Some(&self.d_hidden) || xs.last() != Some(&self.d_in) {
            return Err(TensorError::ShapeMismatch {
                op: "gru_cell",
                lhs: hs,
                rhs: xs,
            });
        }
        let xr = self.ir.forward(g, x)?;
        let hr = self.hr.forward(g, h)?;
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r);
        let xz = self.iz.forward(g, x)?;
        let hz = self.hz.forward(g, h)?;
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z);
        let xn = self.in_.forward(g, x)?;
        let hn = self.hn.forward(g, h)?;
        let rhn = g.mul(r, hn)?;
        let n = g.add(xn, rhn)?;
        let n = g.tanh(n);
        // h' = n + z * (h - n)
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        g.add(n, zd)
    }
}
