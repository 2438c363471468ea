//! Index stream: 1x1 projection, windowed self-attention encoder, state-space
//! filtering over the raster sequence, slot grouping with mean-slot
//! broadcast, and a convolutional refinement stage with an auxiliary head.

use visa_tensor::nn::{Conv2d, GruCell, LayerNorm, Linear, WEIGHT_STD};
use visa_tensor::{Graph, Init, ParamId, ParamStore, Real, Tensor, TensorError, Var};

use crate::error::{CoreError, Result};
use crate::indices::INDICES;
use crate::model::config::VimbConfig;
use crate::model::LN_EPS;

/// `[B, d, H, W] -> [B * (H/s) * (W/s), s*s, d]`, windows in raster order and
/// tokens in raster order within each window.
pub fn window_partition<T: Real>(g: &mut Graph<'_, T>, x: Var, s: usize) -> Result<Var> {
    let sh = g.shape(x).to_vec();
    let (b, d, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(CoreError::Config(format!(
            "window size s = {s} must divide H = {h} and W = {w}"
        )));
    }
    let x = g.reshape(x, &[b, d, h / s, s, w / s, s])?;
    let x = g.permute(x, &[0, 2, 4, 3, 5, 1])?;
    Ok(g.reshape(x, &[b * (h / s) * (w / s), s * s, d])?)
}

/// Inverse of [`window_partition`], back to `[B, d, H, W]`.
pub fn window_merge<T: Real>(
    g: &mut Graph<'_, T>,
    t: Var,
    b: usize,
    h: usize,
    w: usize,
    s: usize,
) -> Result<Var> {
    let d = g.shape(t)[2];
    let x = g.reshape(t, &[b, h / s, w / s, s, s, d])?;
    let x = g.permute(x, &[0, 5, 1, 3, 2, 4])?;
    Ok(g.reshape(x, &[b, d, h, w])?)
}

/// `[B, d, H, W] -> [B, H*W, d]` in row-major raster order.
pub fn to_sequence<T: Real>(g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    let sh = g.shape(x).to_vec();
    let x = g.permute(x, &[0, 2, 3, 1])?;
    Ok(g.reshape(x, &[sh[0], sh[2] * sh[3], sh[1]])?)
}

pub fn from_sequence<T: Real>(g: &mut Graph<'_, T>, t: Var, h: usize, w: usize) -> Result<Var> {
    let sh = g.shape(t).to_vec();
    let x = g.reshape(t, &[sh[0], h, w, sh[2]])?;
    Ok(g.permute(x, &[0, 3, 1, 2])?)
}

/// Indices into a `[heads, 2s-1]` offset table giving the `[heads, n, n]`
/// bias for row (`axis = 0`) or column (`axis = 1`) offsets.
fn offset_index(heads: usize, s: usize, axis: usize) -> Vec<usize> {
    let n = s * s;
    let m = 2 * s - 1;
    let mut idx = Vec::with_capacity(heads * n * n);
    for h in 0..heads {
        for i in 0..n {
            for j in 0..n {
                let (a, b) = if axis == 0 {
                    (i / s, j / s)
                } else {
                    (i % s, j % s)
                };
                idx.push(h * m + a + s - 1 - b);
            }
        }
    }
    idx
}

#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub out: Linear,
    /// Row and column offset tables, `[heads, 2s-1]` each.
    pub rel_bias: Option<(ParamId, ParamId)>,
    pub heads: usize,
    pub window: usize,
}

impl WindowAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &VimbConfig,
        seed: u64,
    ) -> Result<Self> {
        let d = cfg.d;
        let rel_bias = if cfg.use_rel_bias {
            let shape = [cfg.heads, 2 * cfg.window - 1];
            let init = Init::TruncNormal { std: WEIGHT_STD };
            Some((
                store.init(&format!("{name}.rel_row"), &shape, init, seed)?,
                store.init(&format!("{name}.rel_col"), &shape, init, seed)?,
            ))
        } else {
            None
        };
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), d, 3 * d, true, seed)?,
            out: Linear::new(store, &format!("{name}.out"), d, d, true, seed)?,
            rel_bias,
            heads: cfg.heads,
            window: cfg.window,
        })
    }

    /// `[Bw, n, d] -> ([Bw, n, d], attention [Bw, heads, n, n])`.
    pub fn forward_with_weights<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        t: Var,
    ) -> Result<(Var, Var)> {
        let sh = g.shape(t).to_vec();
        let (bw, n, d) = (sh[0], sh[1], sh[2]);
        let h = self.heads;
        let dh = d / h;
        let qkv = self.qkv.forward(g, t)?;
        let qkv = g.reshape(qkv, &[bw, n, 3, h, dh])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let part = |i: usize, g: &mut Graph<'_, T>| -> Result<Var> {
            let p = g.slice(qkv, 0, i, 1)?;
            Ok(g.reshape(p, &[bw * h, n, dh])?)
        };
        let q = part(0, g)?;
        let k = part(1, g)?;
        let v = part(2, g)?;
        let scores = g.bmm(q, k, false, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let mut scores = g.reshape(scores, &[bw, h, n, n])?;
        if let Some((row, col)) = self.rel_bias {
            let s = self.window;
            let row = g.param(row);
            let col = g.param(col);
            let rb = g.gather(row, offset_index(h, s, 0), &[1, h, n, n])?;
            let cb = g.gather(col, offset_index(h, s, 1), &[1, h, n, n])?;
            let bias = g.add(rb, cb)?;
            scores = g.add(scores, bias)?;
        }
        g.ensure_finite(scores, "attention logits")?;
        let attn = g.softmax(scores, 3, 1.0)?;
        let a = g.reshape(attn, &[bw * h, n, n])?;
        let o = g.bmm(a, v, false, false)?;
        let o = g.reshape(o, &[bw, h, n, dh])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[bw, n, d])?;
        Ok((self.out.forward(g, o)?, attn))
    }
}

/// Pre-norm encoder layer: `U + WSA(LN(U))`, then `+ FFN(LN(.))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: WindowAttention,
    pub ln2: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
}

impl EncoderLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &VimbConfig,
        seed: u64,
    ) -> Result<Self> {
        let d = cfg.d;
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d, LN_EPS, seed)?,
            attn: WindowAttention::new(store, &format!("{name}.attn"), cfg, seed)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d, LN_EPS, seed)?,
            ffn1: Linear::new(
                store,
                &format!("{name}.ffn1"),
                d,
                cfg.ffn_mult * d,
                true,
                seed,
            )?,
            ffn2: Linear::new(
                store,
                &format!("{name}.ffn2"),
                cfg.ffn_mult * d,
                d,
                true,
                seed,
            )?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, t: Var) -> Result<Var> {
        let n = self.ln1.forward(g, t, 2)?;
        let (a, _) = self.attn.forward_with_weights(g, n)?;
        let t = g.add(t, a)?;
        let n = self.ln2.forward(g, t, 2)?;
        let f = self.ffn1.forward(g, n)?;
        let f = g.gelu(f);
        let f = self.ffn2.forward(g, f)?;
        Ok(g.add(t, f)?)
    }
}

/// `x_{t+1} = A * x_t + B * (u_t * sigmoid(W_g u_t))` with `A = sigmoid(raw_a)`,
/// output `u_t + proj(x_{t+1})`.
#[derive(Clone, Debug)]
pub struct SsmBlock {
    pub gate: Linear,
    pub raw_a: ParamId,
    pub b_bar: ParamId,
    pub proj: Linear,
}

// A spread over (0.5, 0.98) so channels see different memory lengths, with
// B = 1 - A for unit steady-state gain.
fn raw_a_init(i: usize, n: usize) -> f64 {
    4.0 * i as f64 / (n.max(2) - 1) as f64
}

fn b_bar_init(i: usize, n: usize) -> f64 {
    1.0 - visa_tensor::sigmoid(raw_a_init(i, n))
}

impl SsmBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            gate: Linear::new(store, &format!("{name}.gate"), d, d, false, seed)?,
            raw_a: store.init(
                &format!("{name}.raw_a"),
                &[d],
                Init::Values(raw_a_init),
                seed,
            )?,
            b_bar: store.init(
                &format!("{name}.b_bar"),
                &[d],
                Init::Values(b_bar_init),
                seed,
            )?,
            proj: Linear::new(store, &format!("{name}.proj"), d, d, true, seed)?,
        })
    }

    /// All states `x_1 .. x_L` for `u[B, L, d]`.
    pub fn states<T: Real>(&self, g: &mut Graph<'_, T>, u: Var) -> Result<Var> {
        let gate = self.gate.forward(g, u)?;
        let gate = g.sigmoid(gate);
        let gu = g.mul(u, gate)?;
        let raw = g.param(self.raw_a);
        let a = g.sigmoid(raw);
        let b = g.param(self.b_bar);
        Ok(g.scan(a, b, gu)?)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, u: Var) -> Result<Var> {
        let x = self.states(g, u)?;
        let p = self.proj.forward(g, x)?;
        Ok(g.add(u, p)?)
    }
}

#[derive(Clone, Debug)]
pub struct SlotOutput {
    /// Final slots `[B, K, d]`.
    pub slots: Var,
    /// Token-to-slot weights `[B, L, K]`, one per iteration.
    pub attention: Vec<Var>,
    /// Slot updates `[B, K, d]`, one per iteration.
    pub updates: Vec<Var>,
}

/// Slot grouping with learned initial slots, a shared GRU update plus MLP,
/// and an optional mean-slot broadcast back onto the tokens.
#[derive(Clone, Debug)]
pub struct SlotAttention {
    pub init: ParamId,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub gru: GruCell,
    pub ln: LayerNorm,
    pub mlp1: Linear,
    pub mlp2: Linear,
    pub broadcast: Option<Linear>,
    pub slots: usize,
    pub iters: usize,
}

impl SlotAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &VimbConfig,
        seed: u64,
    ) -> Result<Self> {
        if cfg.slots == 0 || cfg.slot_iters == 0 {
            return Err(CoreError::Config(
                "slot attention needs at least one slot and one iteration".into(),
            ));
        }
        let d = cfg.d;
        let lin = |store: &mut ParamStore<T>, part: &str, bias| {
            Linear::new(store, &format!("{name}.{part}"), d, d, bias, seed)
        };
        Ok(Self {
            init: store.init(
                &format!("{name}.init"),
                &[cfg.slots, d],
                Init::TruncNormal { std: 1.0 },
                seed,
            )?,
            wq: lin(store, "wq", false)?,
            wk: lin(store, "wk", false)?,
            wv: lin(store, "wv", false)?,
            gru: GruCell::new(store, &format!("{name}.gru"), d, d, seed)?,
            ln: LayerNorm::new(store, &format!("{name}.ln"), d, LN_EPS, seed)?,
            mlp1: lin(store, "mlp1", true)?,
            mlp2: lin(store, "mlp2", true)?,
            broadcast: if cfg.use_broadcast {
                Some(lin(store, "broadcast", false)?)
            } else {
                None
            },
            slots: cfg.slots,
            iters: cfg.slot_iters,
        })
    }

    /// Runs the iterations on tokens `u[B, L, d]`.
    pub fn group<T: Real>(&self, g: &mut Graph<'_, T>, u: Var) -> Result<SlotOutput> {
        let sh = g.shape(u).to_vec();
        let (b, d) = (sh[0], sh[2]);
        let k_slots = self.slots;
        let init = g.param(self.init);
        let init = g.reshape(init, &[1, k_slots, d])?;
        let mut slots = g.broadcast_to(init, &[b, k_slots, d])?;
        let k = self.wk.forward(g, u)?;
        let v = self.wv.forward(g, u)?;
        let mut attention = Vec::with_capacity(self.iters);
        let mut updates = Vec::with_capacity(self.iters);
        for _ in 0..self.iters {
            let q = self.wq.forward(g, slots)?;
            let logits = g.bmm(k, q, false, true)?;
            let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
            // normalized over slots, not tokens
            let a = g.softmax(logits, 2, 1.0)?;
            let delta = g.bmm(a, v, true, false)?;
            let prev = g.reshape(slots, &[b * k_slots, d])?;
            let dflat = g.reshape(delta, &[b * k_slots, d])?;
            let gru = self.gru.forward(g, prev, dflat)?;
            let n = self.ln.forward(g, prev, 1)?;
            let m = self.mlp1.forward(g, n)?;
            let m = g.gelu(m);
            let m = self.mlp2.forward(g, m)?;
            let next = g.add(gru, m)?;
            slots = g.reshape(next, &[b, k_slots, d])?;
            attention.push(a);
            updates.push(delta);
        }
        Ok(SlotOutput {
            slots,
            attention,
            updates,
        })
    }

    /// `U_t + W_b m` with `m` the mean slot; identity without a broadcast
    /// projection.
    pub fn apply_broadcast<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        u: Var,
        slots: Var,
    ) -> Result<Var> {
        match &self.broadcast {
            Some(wb) => {
                let m = g.mean_axis(slots, 1)?;
                let m = wb.forward(g, m)?;
                Ok(g.add(u, m)?)
            }
            None => Ok(u),
        }
    }
}

/// `x + conv2(GELU(LN(conv1(x))))` on the native grid.
#[derive(Clone, Debug)]
pub struct Refinement {
    pub conv1: Conv2d,
    pub norm: LayerNorm,
    pub conv2: Conv2d,
}

impl Refinement {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c, c, 3, 1, true, seed)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), c, LN_EPS, seed)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c, c, 3, 1, true, seed)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(g, x)?;
        let y = self.norm.forward(g, y, 1)?;
        let y = g.gelu(y);
        let y = self.conv2.forward(g, y)?;
        Ok(g.add(x, y)?)
    }
}

#[derive(Clone, Debug)]
pub struct IndexOutput {
    /// `[B, F, H, W]`.
    pub features: Var,
    /// Auxiliary logits `[B, 3, H, W]`.
    pub aux_logits: Var,
}

#[derive(Clone, Debug)]
pub struct Vimb {
    pub cfg: VimbConfig,
    pub proj: Conv2d,
    pub proj_norm: LayerNorm,
    pub layers: Vec<EncoderLayer>,
    pub ssm: Vec<SsmBlock>,
    pub slots: Option<SlotAttention>,
    pub to_features: Conv2d,
    pub feature_norm: LayerNorm,
    pub refine: Option<Refinement>,
    pub aux: Conv2d,
}

impl Vimb {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        cfg: &VimbConfig,
        features: usize,
        refine: bool,
        seed: u64,
    ) -> Result<Self> {
        let d = cfg.d;
        Ok(Self {
            cfg: cfg.clone(),
            proj: Conv2d::new(store, "vimb.proj", INDICES, d, 1, 1, true, seed)?,
            proj_norm: LayerNorm::new(store, "vimb.proj_norm", d, LN_EPS, seed)?,
            layers: (0..cfg.encoder_layers)
                .map(|i| EncoderLayer::new(store, &format!("vimb.enc{i}"), cfg, seed))
                .collect::<Result<_>>()?,
            ssm: (0..cfg.ssm_layers)
                .map(|i| SsmBlock::new(store, &format!("vimb.ssm{i}"), d, seed))
                .collect::<Result<_>>()?,
            slots: if cfg.use_slots {
                Some(SlotAttention::new(store, "vimb.slots", cfg, seed)?)
            } else {
                None
            },
            to_features: Conv2d::new(store, "vimb.to_features", d, features, 3, 1, true, seed)?,
            feature_norm: LayerNorm::new(store, "vimb.feature_norm", features, LN_EPS, seed)?,
            refine: if refine {
                Some(Refinement::new(store, "vimb.refine", features, seed)?)
            } else {
                None
            },
            aux: Conv2d::new(store, "vimb.aux", features, 3, 1, 1, true, seed)?,
        })
    }

    /// `Z = LN(W_proj x + b)` over channels, `[B, 5, H, W] -> [B, d, H, W]`.
    pub fn project<T: Real>(&self, g: &mut Graph<'_, T>, idx: Var) -> Result<Var> {
        let z = self.proj.forward(g, idx)?;
        Ok(self.proj_norm.forward(g, z, 1)?)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, idx: Var) -> Result<IndexOutput> {
        let sh = g.shape(idx).to_vec();
        if sh.len() != 4 || sh[1] != INDICES {
            return Err(TensorError::Invalid {
                op: "index branch",
                reason: format!("expected [B, {INDICES}, H, W], got {sh:?}"),
            }
            .into());
        }
        let (b, h, w) = (sh[0], sh[2], sh[3]);
        let s = self.cfg.window;
        let z = self.project(g, idx)?;
        let mut t = window_partition(g, z, s)?;
        for layer in &self.layers {
            t = layer.forward(g, t)?;
        }
        let z = window_merge(g, t, b, h, w, s)?;
        let mut u = to_sequence(g, z)?;
        for block in &self.ssm {
            u = block.forward(g, u)?;
        }
        if let Some(sa) = &self.slots {
            let out = sa.group(g, u)?;
            u = sa.apply_broadcast(g, u, out.slots)?;
        }
        let z = from_sequence(g, u, h, w)?;
        let f = self.to_features.forward(g, z)?;
        let mut f = self.feature_norm.forward(g, f, 1)?;
        if let Some(r) = &self.refine {
            f = r.forward(g, f)?;
        }
        let aux_logits = self.aux.forward(g, f)?;
        Ok(IndexOutput {
            features: f,
            aux_logits,
        })
    }
}

/// Stacks standardized index maps into a `[B, 5, H, W]` tensor. Raw index
/// values are a contract violation.
pub fn index_tensor<T: Real>(stacks: &[&crate::indices::IndexStack]) -> Result<Tensor<T>> {
    let first = stacks
        .first()
        .ok_or_else(|| CoreError::Invalid("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(stacks.len() * INDICES * h * w);
    for s in stacks {
        if !s.standardized {
            return Err(CoreError::Invalid(
                "index branch input must be standardized with training-split statistics".into(),
            ));
        }
        if (s.height, s.width) != (h, w) {
            return Err(CoreError::Invalid(
                "index stacks in one batch differ in extent".into(),
            ));
        }
        data.extend(s.data.iter().map(|&v| T::of(v as f64)));
    }
    Ok(Tensor::new(vec![stacks.len(), INDICES, h, w], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn micro() -> VimbConfig {
        VimbConfig {
            d: 8,
            window: 4,
            heads: 2,
            ssm_layers: 1,
            slots: 2,
            slot_iters: 2,
            ..VimbConfig::default()
        }
    }

    fn set(store: &mut ParamStore<f64>, id: ParamId, f: impl Fn(usize) -> f64) {
        for (i, v) in store.get_mut(id).tensor.data_mut().iter_mut().enumerate() {
            *v = f(i);
        }
    }

    #[test]
    fn partition_round_trip_and_errors() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(random(&[2, 3, 8, 12], 1));
        let t = window_partition(&mut g, x, 4).unwrap();
        assert_eq!(g.shape(t), [2 * 2 * 3, 16, 3]);
        let back = window_merge(&mut g, t, 2, 8, 12, 4).unwrap();
        assert_eq!(g.data(back), g.data(x));

        // one window: token i of the window is pixel i in raster order
        let y = g.input(random(&[1, 2, 4, 4], 2));
        let t = window_partition(&mut g, y, 4).unwrap();
        for i in 0..16 {
            for c in 0..2 {
                assert_eq!(g.data(t)[i * 2 + c], g.data(y)[c * 16 + i]);
            }
        }
        let err = window_partition(&mut g, x, 5).unwrap_err().to_string();
        assert!(
            err.contains("s = 5") && err.contains("H = 8") && err.contains("W = 12"),
            "{err}"
        );
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut store = ParamStore::<f64>::new();
        let attn = WindowAttention::new(&mut store, "a", &micro(), 3).unwrap();
        let mut g = Graph::new(&store);
        let t = g.input(random(&[3, 16, 8], 4));
        let (_, a) = attn.forward_with_weights(&mut g, t).unwrap();
        assert_eq!(g.shape(a), [3, 2, 16, 16]);
        for row in g.data(a).chunks(16) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_tokens_attend_to_their_value() {
        let mut store = ParamStore::<f64>::new();
        let attn = WindowAttention::new(&mut store, "a", &micro(), 5).unwrap();
        let u: Vec<f64> = random(&[8], 6).data().to_vec();
        let mut g = Graph::new(&store);
        let t = g.input(Tensor::new(vec![1, 16, 8], u.repeat(16)).unwrap());
        let (o, _) = attn.forward_with_weights(&mut g, t).unwrap();

        let qkv_w = store.get(attn.qkv.w).tensor.data();
        let qkv_b = store.get(attn.qkv.b.unwrap()).tensor.data();
        let v: Vec<f64> = (0..8)
            .map(|j| qkv_b[16 + j] + (0..8).map(|i| u[i] * qkv_w[i * 24 + 16 + j]).sum::<f64>())
            .collect();
        let out_w = store.get(attn.out.w).tensor.data();
        let out_b = store.get(attn.out.b.unwrap()).tensor.data();
        let want: Vec<f64> = (0..8)
            .map(|j| out_b[j] + (0..8).map(|i| v[i] * out_w[i * 8 + j]).sum::<f64>())
            .collect();
        for tok in g.data(o).chunks(8) {
            for (a, b) in tok.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rel_bias_index_depends_on_offset_only() {
        let s = 3;
        let n = s * s;
        for axis in 0..2 {
            let idx = offset_index(2, s, axis);
            for h in 0..2 {
                for i in 0..n {
                    for j in 0..n {
                        let (a, b) = if axis == 0 {
                            (i / s, j / s)
                        } else {
                            (i % s, j % s)
                        };
                        assert_eq!(idx[(h * n + i) * n + j], h * (2 * s - 1) + (a + s - 1 - b));
                    }
                }
            }
        }
    }

    fn scalar_ssm(raw_a: f64, gate: f64) -> (ParamStore<f64>, SsmBlock) {
        let mut store = ParamStore::<f64>::new();
        let ssm = SsmBlock::new(&mut store, "s", 1, 0).unwrap();
        set(&mut store, ssm.raw_a, |_| raw_a);
        set(&mut store, ssm.b_bar, |_| 1.0);
        set(&mut store, ssm.gate.w, |_| gate);
        (store, ssm)
    }

    #[test]
    fn ssm_unrolled_by_hand() {
        // A = sigmoid(0) = 0.5, gate saturated at 1
        let (store, ssm) = scalar_ssm(0.0, 1e3);
        let mut g = Graph::new(&store);
        let u = g.input(Tensor::new(vec![1, 3, 1], vec![1.0, 0.0, 0.0]).unwrap());
        let x = ssm.states(&mut g, u).unwrap();
        assert_eq!(g.data(x), [1.0, 0.5, 0.25]);

        let z = g.input(Tensor::zeros(&[2, 5, 1]));
        let x = ssm.states(&mut g, z).unwrap();
        assert!(g.data(x).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ssm_without_memory_only_gates() {
        let (store, ssm) = scalar_ssm(-1e3, 0.7);
        let mut g = Graph::new(&store);
        let seq = [0.3, -1.2, 2.0, 0.5];
        let u = g.input(Tensor::new(vec![1, 4, 1], seq.to_vec()).unwrap());
        let x = ssm.states(&mut g, u).unwrap();
        for (s, &v) in g.data(x).iter().zip(&seq) {
            assert!((s - v * visa_tensor::sigmoid(0.7 * v)).abs() < 1e-12);
        }
    }

    #[test]
    fn ssm_states_are_bounded() {
        let mut store = ParamStore::<f64>::new();
        let ssm = SsmBlock::new(&mut store, "s", 4, 9).unwrap();
        let mut g = Graph::new(&store);
        let u = g.input(random(&[2, 50, 4], 10));
        let x = ssm.states(&mut g, u).unwrap();
        let a_max = store
            .get(ssm.raw_a)
            .tensor
            .data()
            .iter()
            .map(|&r| visa_tensor::sigmoid(r))
            .fold(0.0, f64::max);
        let b_max = store
            .get(ssm.b_bar)
            .tensor
            .data()
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        // gated input |u * sigmoid(.)| <= |u| <= 1
        let bound = b_max / (1.0 - a_max);
        assert!(g.data(x).iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn slot_weights_normalize_over_slots() {
        let mut store = ParamStore::<f64>::new();
        let sa = SlotAttention::new(&mut store, "sl", &micro(), 11).unwrap();
        let mut g = Graph::new(&store);
        let u = g.input(random(&[2, 20, 8], 12));
        let out = sa.group(&mut g, u).unwrap();
        assert_eq!(out.attention.len(), 2);
        for a in &out.attention {
            assert_eq!(g.shape(*a), [2, 20, 2]);
            for row in g.data(*a).chunks(2) {
                assert!((row[0] + row[1] - 1.0).abs() < 1e-6);
            }
        }
        assert_eq!(g.shape(out.slots), [2, 2, 8]);
    }

    #[test]
    fn single_slot_takes_every_value() {
        let cfg = VimbConfig {
            slots: 1,
            slot_iters: 1,
            ..micro()
        };
        let mut store = ParamStore::<f64>::new();
        let sa = SlotAttention::new(&mut store, "sl", &cfg, 13).unwrap();
        let mut g = Graph::new(&store);
        let u = g.input(random(&[1, 6, 8], 14));
        let out = sa.group(&mut g, u).unwrap();
        assert!(g.data(out.attention[0]).iter().all(|&a| a == 1.0));
        let v = sa.wv.forward(&mut g, u).unwrap();
        let vs = g.data(v).to_vec();
        for (j, d) in g.data(out.updates[0]).iter().enumerate() {
            let want: f64 = (0..6).map(|t| vs[t * 8 + j]).sum();
            assert!((d - want).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_tokens_and_slots_give_identical_updates() {
        let cfg = VimbConfig {
            slots: 3,
            slot_iters: 1,
            ..micro()
        };
        let mut store = ParamStore::<f64>::new();
        let sa = SlotAttention::new(&mut store, "sl", &cfg, 15).unwrap();
        // symmetric start: every slot begins from the same vector
        set(&mut store, sa.init, |i| 0.1 * (i % 8) as f64 - 0.3);
        let u: Vec<f64> = random(&[8], 16).data().to_vec();
        let mut g = Graph::new(&store);
        let t = g.input(Tensor::new(vec![1, 5, 8], u.repeat(5)).unwrap());
        let out = sa.group(&mut g, t).unwrap();
        let d = g.data(out.updates[0]);
        for k in 1..3 {
            assert_eq!(d[k * 8..(k + 1) * 8], d[..8]);
        }
        assert!(SlotAttention::new(
            &mut ParamStore::<f64>::new(),
            "x",
            &VimbConfig {
                slot_iters: 0,
                ..micro()
            },
            0
        )
        .is_err());
        assert!(SlotAttention::new(
            &mut ParamStore::<f64>::new(),
            "x",
            &VimbConfig {
                slots: 0,
                ..micro()
            },
            0
        )
        .is_err());
    }

    #[test]
    fn broadcast_is_a_constant_shift() {
        let mut store = ParamStore::<f64>::new();
        let sa = SlotAttention::new(&mut store, "sl", &micro(), 17).unwrap();
        let mut g = Graph::new(&store);
        let u = g.input(random(&[1, 7, 8], 18));
        let slots = g.input(random(&[1, 2, 8], 19));
        let ub = sa.apply_broadcast(&mut g, u, slots).unwrap();
        let (a, b) = (g.data(u).to_vec(), g.data(ub).to_vec());
        let shift: Vec<f64> = (0..8).map(|j| b[j] - a[j]).collect();
        for t in 1..7 {
            for j in 0..8 {
                assert!((b[t * 8 + j] - a[t * 8 + j] - shift[j]).abs() < 1e-12);
            }
        }
        let m = g.mean_axis(slots, 1).unwrap();
        let s = g.data(slots).to_vec();
        for j in 0..8 {
            assert!((g.data(m)[j] - (s[j] + s[8 + j]) / 2.0).abs() < 1e-12);
        }

        let mut store = ParamStore::<f64>::new();
        let sa = SlotAttention::new(&mut store, "sl", &micro(), 17).unwrap();
        set(&mut store, sa.broadcast.as_ref().unwrap().w, |_| 0.0);
        let mut g = Graph::new(&store);
        let u = g.input(random(&[1, 7, 8], 18));
        let slots = g.input(random(&[1, 2, 8], 19));
        let ub = sa.apply_broadcast(&mut g, u, slots).unwrap();
        assert_eq!(g.data(ub), g.data(u));
    }

    #[test]
    fn projection_is_channel_normalized() {
        let mut store = ParamStore::<f64>::new();
        let v = Vimb::new(&mut store, &micro(), 8, true, 20).unwrap();
        let mut g = Graph::new(&store);
        let x = g.input(random(&[2, INDICES, 4, 4], 21));
        let z = v.project(&mut g, x).unwrap();
        assert_eq!(g.shape(z), [2, 8, 4, 4]);
        let zd = g.data(z);
        for b in 0..2 {
            for p in 0..16 {
                let col: Vec<f64> = (0..8).map(|c| zd[(b * 8 + c) * 16 + p]).collect();
                let mean = col.iter().sum::<f64>() / 8.0;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
                assert!(
                    mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-3,
                    "{mean} {var}"
                );
            }
        }
        let zero = g.input(Tensor::zeros(&[1, INDICES, 4, 4]));
        let z = v.project(&mut g, zero).unwrap();
        assert!(g.data(z).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_refinement_passes_through() {
        let mut store = ParamStore::<f64>::new();
        let r = Refinement::new(&mut store, "r", 4, 22).unwrap();
        set(&mut store, r.conv2.w, |_| 0.0);
        let mut g = Graph::new(&store);
        let x = g.input(random(&[1, 4, 6, 6], 23));
        let y = r.forward(&mut g, x).unwrap();
        assert_eq!(g.data(y), g.data(x));
    }

    fn proj_grad(alpha: f64) -> Vec<f64> {
        let mut store = ParamStore::<f64>::new();
        let v = Vimb::new(&mut store, &micro(), 8, true, 24).unwrap();
        let mut g = Graph::new(&store);
        let x = g.input(random(&[1, INDICES, 8, 8], 25));
        let out = v.forward(&mut g, x).unwrap();
        let f = g.sum_all(out.features);
        let a = g.sum_all(out.aux_logits);
        let a = g.scale(a, alpha);
        let loss = g.add(f, a).unwrap();
        let grads = g.backward(loss).unwrap();
        grads.param(v.proj.w).unwrap().to_vec()
    }

    #[test]
    fn branch_shapes_and_gradient_reach() {
        let mut store = ParamStore::<f64>::new();
        let v = Vimb::new(&mut store, &micro(), 8, true, 24).unwrap();
        let mut g = Graph::new(&store);
        let x = g.input(random(&[2, INDICES, 8, 8], 25));
        let out = v.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(out.features), [2, 8, 8, 8]);
        assert_eq!(g.shape(out.aux_logits), [2, 3, 8, 8]);
        let wrong = g.input(Tensor::zeros(&[1, 4, 8, 8]));
        assert!(v.forward(&mut g, wrong).is_err());

        let g0 = proj_grad(0.0);
        let g3 = proj_grad(0.3);
        assert!(g0.iter().any(|&v| v != 0.0));
        assert!(g0.iter().zip(&g3).any(|(a, b)| a != b));
    }

    #[test]
    fn zero_aux_head_is_uniform() {
        let mut store = ParamStore::<f64>::new();
        let v = Vimb::new(&mut store, &micro(), 8, true, 26).unwrap();
        set(&mut store, v.aux.w, |_| 0.0);
        let mut g = Graph::new(&store);
        let x = g.input(random(&[1, INDICES, 4, 4], 27));
        let out = v.forward(&mut g, x).unwrap();
        assert!(g.data(out.aux_logits).iter().all(|&z| z == 0.0));
        let p = g.softmax(out.aux_logits, 1, 1.0).unwrap();
        assert!(g.data(p).iter().all(|&q| (q - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn ablation_toggles_keep_the_shape_contract() {
        let base = VimbConfig {
            d: 24,
            heads: 4,
            ..micro()
        };
        let mut variants = vec![
            VimbConfig {
                use_rel_bias: false,
                ..base.clone()
            },
            VimbConfig {
                use_slots: false,
                ..base.clone()
            },
            VimbConfig {
                use_broadcast: false,
                ..base.clone()
            },
        ];
        variants.extend((0..4).map(|l| VimbConfig {
            ssm_layers: l,
            ..base.clone()
        }));
        variants.extend([4, 8, 12].map(|h| VimbConfig {
            heads: h,
            ..base.clone()
        }));
        for cfg in variants {
            let mut store = ParamStore::<f64>::new();
            let v = Vimb::new(&mut store, &cfg, 6, true, 28).unwrap();
            let mut g = Graph::new(&store);
            let x = g.input(random(&[1, INDICES, 8, 8], 29));
            let out = v.forward(&mut g, x).unwrap();
            assert_eq!(g.shape(out.features), [1, 6, 8, 8]);
            assert!(g.data(out.features).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn raw_indices_are_rejected() {
        let stack = crate::indices::IndexStack {
            height: 1,
            width: 1,
            data: vec![0.0; INDICES],
            standardized: false,
            flagged: vec![],
        };
        assert!(index_tensor::<f64>(&[&stack]).is_err());
    }
}
