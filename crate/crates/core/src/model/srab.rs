//! Radiance stream: residual-attention encoder over the raw bands and a
//! U-shaped decoder with concatenated skips.

use visa_tensor::nn::{Conv2d, ConvTranspose2d, Linear};
use visa_tensor::{Graph, ParamStore, Real, TensorError, Var};

use crate::data::patch::BANDS;
use crate::error::Result;
use crate::model::config::SrabConfig;

/// Channel reweighting from globally pooled features:
/// `a = sigmoid(W2 GELU(W1 g))`, `U_se = a * U`.
#[derive(Clone, Debug)]
pub struct SeGate {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SeGate {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        reduction: usize,
        seed: u64,
    ) -> Result<Self> {
        let hidden = (c / reduction).max(1);
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), c, hidden, true, seed)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, c, true, seed)?,
        })
    }

    /// Gate values `[B, C]`.
    pub fn gate<T: Real>(&self, g: &mut Graph<'_, T>, u: Var) -> Result<Var> {
        let sh = g.shape(u).to_vec();
        let p = g.reshape(u, &[sh[0], sh[1], sh[2] * sh[3]])?;
        let p = g.mean_axis(p, 2)?;
        let p = g.reshape(p, &[sh[0], sh[1]])?;
        let a = self.fc1.forward(g, p)?;
        let a = g.gelu(a);
        let a = self.fc2.forward(g, a)?;
        Ok(g.sigmoid(a))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, u: Var) -> Result<Var> {
        let sh = g.shape(u).to_vec();
        let a = self.gate(g, u)?;
        let a = g.reshape(a, &[sh[0], sh[1], 1, 1])?;
        Ok(g.mul(u, a)?)
    }
}

/// Spatial mask from channel-mean and channel-max maps through one wide
/// convolution and a sigmoid, shared across channels.
#[derive(Clone, Debug)]
pub struct CbamGate {
    pub conv: Conv2d,
}

impl CbamGate {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        k: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), 2, 1, k, 1, true, seed)?,
        })
    }

    /// Mask `[B, 1, H, W]`.
    pub fn mask<T: Real>(&self, g: &mut Graph<'_, T>, u: Var) -> Result<Var> {
        let avg = g.mean_axis(u, 1)?;
        let max = g.max_axis(u, 1)?;
        let pooled = g.concat(&[avg, max], 1)?;
        let m = self.conv.forward(g, pooled)?;
        Ok(g.sigmoid(m))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, u: Var) -> Result<Var> {
        let m = self.mask(g, u)?;
        Ok(g.mul(u, m)?)
    }
}

/// `Y = CBAM(SE(U + W2 * GELU(W1 * U)))`.
#[derive(Clone, Debug)]
pub struct ResidualAttentionUnit {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub se: SeGate,
    pub cbam: CbamGate,
}

impl ResidualAttentionUnit {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        cfg: &SrabConfig,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c, c, 3, 1, true, seed)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c, c, 3, 1, true, seed)?,
            se: SeGate::new(store, &format!("{name}.se"), c, cfg.se_reduction, seed)?,
            cbam: CbamGate::new(store, &format!("{name}.cbam"), cfg.cbam_kernel, seed)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, u: Var) -> Result<Var> {
        let y = self.conv1.forward(g, u)?;
        let y = g.gelu(y);
        let y = self.conv2.forward(g, y)?;
        let y = g.add(u, y)?;
        let y = self.se.forward(g, y)?;
        self.cbam.forward(g, y)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLevel {
    /// Stem convolution at level 0, stride-2 downsampling after that.
    pub entry: Conv2d,
    pub units: Vec<ResidualAttentionUnit>,
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub up: ConvTranspose2d,
    /// Merges the upsampled map with its skip back to the stage width.
    pub merge: Conv2d,
    pub unit: ResidualAttentionUnit,
}

#[derive(Clone, Debug)]
pub struct SrabOutput {
    pub features: Var,
    /// Encoder outputs per level, finest first.
    pub skips: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Srab {
    pub cfg: SrabConfig,
    pub encoder: Vec<EncoderLevel>,
    /// Coarsest stage first.
    pub decoder: Vec<DecoderStage>,
    pub head: Conv2d,
}

impl Srab {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        cfg: &SrabConfig,
        features: usize,
        seed: u64,
    ) -> Result<Self> {
        let w = &cfg.widths;
        let mut encoder = Vec::with_capacity(w.len());
        for (l, &c) in w.iter().enumerate() {
            let name = format!("srab.enc{l}");
            let entry = if l == 0 {
                Conv2d::new(store, &format!("{name}.stem"), BANDS, c, 3, 1, true, seed)?
            } else {
                Conv2d::new(
                    store,
                    &format!("{name}.down"),
                    w[l - 1],
                    c,
                    3,
                    2,
                    true,
                    seed,
                )?
            };
            let units = (0..cfg.units_per_level)
                .map(|u| {
                    ResidualAttentionUnit::new(store, &format!("{name}.unit{u}"), c, cfg, seed)
                })
                .collect::<Result<_>>()?;
            encoder.push(EncoderLevel { entry, units });
        }
        let mut decoder = Vec::new();
        for l in (0..w.len() - 1).rev() {
            let name = format!("srab.dec{l}");
            decoder.push(DecoderStage {
                up: ConvTranspose2d::new(store, &format!("{name}.up"), w[l + 1], w[l], 2, seed)?,
                merge: Conv2d::new(
                    store,
                    &format!("{name}.merge"),
                    2 * w[l],
                    w[l],
                    3,
                    1,
                    true,
                    seed,
                )?,
                unit: ResidualAttentionUnit::new(store, &format!("{name}.unit"), w[l], cfg, seed)?,
            });
        }
        let head = Conv2d::new(store, "srab.head", w[0], features, 1, 1, true, seed)?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            decoder,
            head,
        })
    }

    pub fn encode<T: Real>(&self, g: &mut Graph<'_, T>, raw: Var) -> Result<Vec<Var>> {
        let sh = g.shape(raw).to_vec();
        if sh.len() != 4 || sh[1] != BANDS {
            return Err(TensorError::Invalid {
                op: "radiance branch",
                reason: format!("expected [B, {BANDS}, H, W], got {sh:?}"),
            }
            .into());
        }
        let mut x = raw;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for level in &self.encoder {
            x = level.entry.forward(g, x)?;
            for u in &level.units {
                x = u.forward(g, x)?;
            }
            skips.push(x);
        }
        Ok(skips)
    }

    /// Decodes from encoder outputs (finest first). The coarsest entry is the
    /// bottleneck.
    pub fn decode<T: Real>(&self, g: &mut Graph<'_, T>, skips: &[Var]) -> Result<Var> {
        let mut x = *skips.last().expect("at least one level");
        for (stage, &skip) in self.decoder.iter().zip(skips.iter().rev().skip(1)) {
            let up = stage.up.forward(g, x)?;
            let cat = g.concat(&[up, skip], 1)?;
            let m = stage.merge.forward(g, cat)?;
            x = stage.unit.forward(g, m)?;
        }
        Ok(self.head.forward(g, x)?)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, raw: Var) -> Result<SrabOutput> {
        let skips = self.encode(g, raw)?;
        let features = self.decode(g, &skips)?;
        Ok(SrabOutput { features, skips })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use visa_tensor::{ParamId, Tensor};

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn fill(store: &mut ParamStore<f64>, id: ParamId, v: f64) {
        store.get_mut(id).tensor.data_mut().fill(v);
    }

    fn micro() -> SrabConfig {
        SrabConfig {
            widths: vec![8, 16, 32],
            ..SrabConfig::default()
        }
    }

    #[test]
    fn unit_with_open_gates_and_zero_convs_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let u = ResidualAttentionUnit::new(&mut store, "u", 4, &micro(), 1).unwrap();
        fill(&mut store, u.conv2.w, 0.0);
        fill(&mut store, u.se.fc2.w, 0.0);
        fill(&mut store, u.se.fc2.b.unwrap(), 1e3);
        fill(&mut store, u.cbam.conv.w, 0.0);
        fill(&mut store, u.cbam.conv.b.unwrap(), 1e3);
        let mut g = Graph::new(&store);
        let x = g.input(random(&[2, 4, 6, 6], 2));
        let y = u.forward(&mut g, x).unwrap();
        assert_eq!(g.data(y), g.data(x));
    }

    #[test]
    fn zero_se_weights_halve_each_channel() {
        let mut store = ParamStore::<f64>::new();
        let se = SeGate::new(&mut store, "se", 64, 4, 3).unwrap();
        assert_eq!(store.get(se.fc1.w).tensor.shape(), [64, 16]);
        fill(&mut store, se.fc1.w, 0.0);
        fill(&mut store, se.fc2.w, 0.0);
        let mut g = Graph::new(&store);
        let x = g.input(random(&[1, 64, 3, 3], 4));
        let y = se.forward(&mut g, x).unwrap();
        for (a, b) in g.data(y).iter().zip(g.data(x)) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn se_gate_depends_on_pooled_features_only() {
        let mut store = ParamStore::<f64>::new();
        let se = SeGate::new(&mut store, "se", 6, 4, 5).unwrap();
        let mut g = Graph::new(&store);
        let x = random(&[1, 6, 4, 4], 6);
        // same channel means, different layout
        let mut shuffled = x.data().to_vec();
        for c in 0..6 {
            shuffled[c * 16..(c + 1) * 16].reverse();
        }
        let a = g.input(x);
        let b = g.input(Tensor::new(vec![1, 6, 4, 4], shuffled).unwrap());
        let ga = se.gate(&mut g, a).unwrap();
        let gb = se.gate(&mut g, b).unwrap();
        for (p, q) in g.data(ga).iter().zip(g.data(gb)) {
            assert!((p - q).abs() < 1e-15);
            assert!(*p > 0.0 && *p < 1.0);
        }
        // pooling is linear: scaling U scales the pooled vector
        let s = g.scale(a, 3.0);
        let pa = g.reshape(a, &[1, 6, 16]).unwrap();
        let pa = g.mean_axis(pa, 2).unwrap();
        let ps = g.reshape(s, &[1, 6, 16]).unwrap();
        let ps = g.mean_axis(ps, 2).unwrap();
        for (p, q) in g.data(pa).iter().zip(g.data(ps)) {
            assert!((3.0 * p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn cbam_mask_is_shared_and_bounded() {
        let mut store = ParamStore::<f64>::new();
        let cb = CbamGate::new(&mut store, "cb", 7, 7).unwrap();
        let mut g = Graph::new(&store);
        let x = g.input(random(&[2, 3, 9, 9], 8));
        let m = cb.mask(&mut g, x).unwrap();
        assert_eq!(g.shape(m), [2, 1, 9, 9]);
        assert!(g.data(m).iter().all(|&v| v > 0.0 && v < 1.0));
        let y = cb.forward(&mut g, x).unwrap();
        let (xd, yd) = (g.data(x), g.data(y));
        for b in 0..2 {
            for p in 0..81 {
                let i0 = (b * 3) * 81 + p;
                let i1 = (b * 3 + 1) * 81 + p;
                assert!((yd[i0] / yd[i1] - xd[i0] / xd[i1]).abs() < 1e-9);
            }
        }

        let mut store = ParamStore::<f64>::new();
        let cb = CbamGate::new(&mut store, "cb", 7, 7).unwrap();
        fill(&mut store, cb.conv.w, 0.0);
        let mut g = Graph::new(&store);
        let x = g.input(random(&[1, 3, 5, 5], 9));
        let m = cb.mask(&mut g, x).unwrap();
        assert!(g.data(m).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn encoder_ladder_and_output_extent() {
        let mut store = ParamStore::<f64>::new();
        let srab = Srab::new(&mut store, &micro(), 8, 10).unwrap();
        let mut g = Graph::new(&store);
        let x = g.input(random(&[2, BANDS, 16, 12], 11));
        let out = srab.forward(&mut g, x).unwrap();
        let shapes: Vec<Vec<usize>> = out.skips.iter().map(|&s| g.shape(s).to_vec()).collect();
        assert_eq!(
            shapes,
            [vec![2, 8, 16, 12], vec![2, 16, 8, 6], vec![2, 32, 4, 3]]
        );
        assert_eq!(g.shape(out.features), [2, 8, 16, 12]);
        let four = g.input(random(&[1, 4, 16, 16], 12));
        assert!(srab.forward(&mut g, four).is_err());
    }

    #[test]
    fn default_widths_give_the_feature_width() {
        let mut store = ParamStore::<f32>::new();
        let srab = Srab::new(&mut store, &SrabConfig::default(), 64, 13).unwrap();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(&[1, BANDS, 16, 16]));
        let out = srab.forward(&mut g, x).unwrap();
        let shapes: Vec<Vec<usize>> = out.skips.iter().map(|&s| g.shape(s).to_vec()).collect();
        assert_eq!(
            shapes,
            [vec![1, 64, 16, 16], vec![1, 128, 8, 8], vec![1, 256, 4, 4]]
        );
        assert_eq!(g.shape(out.features), [1, 64, 16, 16]);
    }

    #[test]
    fn every_skip_reaches_the_output() {
        let mut store = ParamStore::<f64>::new();
        let srab = Srab::new(&mut store, &micro(), 8, 14).unwrap();
        let mut g = Graph::new(&store);
        let x = g.input(random(&[1, BANDS, 8, 8], 15));
        let skips = srab.encode(&mut g, x).unwrap();
        let base = srab.decode(&mut g, &skips).unwrap();
        let base = g.data(base).to_vec();
        for l in 0..skips.len() {
            let mut s = skips.clone();
            s[l] = g.scale(skips[l], 0.0);
            let y = srab.decode(&mut g, &s).unwrap();
            assert_ne!(g.data(y), base.as_slice(), "skip {l}");
        }
    }
}
