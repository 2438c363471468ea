//! The two-stream segmentation network and its fusion head.

pub mod config;
pub mod srab;
pub mod vimb;

use visa_tensor::nn::{BatchNorm2d, Conv2d};
use visa_tensor::{BatchMoments, Graph, ParamStore, Real, Tensor, Var};

use crate::data::patch::{MultispectralPatch, BANDS};
use crate::data::synth::Sample;
use crate::error::{CoreError, Result};
use crate::indices::{
    apply_standardization, compute_indices, IndexStack, StandardizationStats, INDEX_EPS,
};

pub use config::{ModelConfig, SrabConfig, VimbConfig};
use srab::Srab;
use vimb::Vimb;

pub const LN_EPS: f64 = 1e-6;
pub const NUM_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Concat, 3x3 conv, batch norm, ReLU, then a 1x1 classifier.
#[derive(Clone, Debug)]
pub struct FusionHead {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub classifier: Conv2d,
}

impl FusionHead {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        streams: usize,
        features: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(
                store,
                "fusion.conv",
                streams * features,
                features,
                3,
                1,
                true,
                seed,
            )?,
            bn: BatchNorm2d::new(store, "fusion.bn", features, seed)?,
            classifier: Conv2d::new(
                store,
                "fusion.classifier",
                features,
                NUM_CLASSES,
                1,
                1,
                true,
                seed,
            )?,
        })
    }

    /// Logits `[B, 3, H, W]` and, in training mode, the batch moments.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        streams: &[Var],
        mode: Mode,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let first = g.shape(streams[0]).to_vec();
        for &s in &streams[1..] {
            if g.shape(s) != first.as_slice() {
                return Err(CoreError::Invalid(format!(
                    "fusion inputs differ in shape: {first:?} vs {:?}",
                    g.shape(s)
                )));
            }
        }
        let cat = if streams.len() == 1 {
            streams[0]
        } else {
            g.concat(streams, 1)?
        };
        let x = self.conv.forward(g, cat)?;
        let (x, moments) = match mode {
            Mode::Train => {
                let (y, m) = self.bn.forward_train(g, x)?;
                (y, Some(m))
            }
            Mode::Eval => (self.bn.forward_eval(g, x)?, None),
        };
        let x = g.relu(x);
        Ok((self.classifier.forward(g, x)?, moments))
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Softmax posteriors at temperature `tau`.
    pub posteriors: Var,
    pub aux_logits: Option<Var>,
    pub raw_features: Var,
    pub index_features: Option<Var>,
    pub moments: Option<BatchMoments>,
}

#[derive(Clone, Debug)]
pub struct Visa {
    pub cfg: ModelConfig,
    pub vimb: Option<Vimb>,
    pub srab: Srab,
    pub fusion: FusionHead,
}

impl Visa {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let vimb = if cfg.use_vimb {
            Some(Vimb::new(
                store,
                &cfg.vimb,
                cfg.features,
                !cfg.single_scale_decoder,
                seed,
            )?)
        } else {
            None
        };
        let srab = Srab::new(store, &cfg.srab, cfg.features, seed)?;
        let streams = if cfg.use_vimb { 2 } else { 1 };
        let fusion = FusionHead::new(store, streams, cfg.features, seed)?;
        Ok(Self {
            cfg: cfg.clone(),
            vimb,
            srab,
            fusion,
        })
    }

    /// `raw` and `idx` are standardized `[B, 5, H, W]` grids.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        raw: Var,
        idx: Var,
        mode: Mode,
    ) -> Result<ForwardOutput> {
        let sh = g.shape(raw).to_vec();
        if sh.len() != 4 {
            return Err(CoreError::Invalid(format!(
                "expected [B, 5, H, W] input, got {sh:?}"
            )));
        }
        self.cfg.check_extent(sh[2], sh[3])?;
        let raw_out = self.srab.forward(g, raw)?;
        let mut streams = vec![raw_out.features];
        let (mut aux_logits, mut index_features) = (None, None);
        if let Some(v) = &self.vimb {
            let out = v.forward(g, idx)?;
            streams.push(out.features);
            aux_logits = Some(out.aux_logits);
            index_features = Some(out.features);
        }
        let (logits, moments) = self.fusion.forward(g, &streams, mode)?;
        let posteriors = g.softmax(logits, 1, self.cfg.tau)?;
        Ok(ForwardOutput {
            logits,
            posteriors,
            aux_logits,
            raw_features: raw_out.features,
            index_features,
            moments,
        })
    }

    /// Folds training-mode batch moments into the running statistics.
    pub fn update_running<T: Real>(&self, store: &mut ParamStore<T>, moments: &BatchMoments) {
        self.fusion.bn.update_running(store, moments);
    }
}

/// Number of trainable scalars.
pub fn parameter_count<T: Real>(store: &ParamStore<T>) -> usize {
    store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(_, p)| p.tensor.len())
        .sum()
}

/// Model inputs for a batch of equally sized patches.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub raw: Tensor<T>,
    pub idx: Tensor<T>,
    /// Label codes `[B * H * W]`, including ignore.
    pub labels: Vec<u8>,
    pub height: usize,
    pub width: usize,
}

impl<T: Real> Batch<T> {
    pub fn len(&self) -> usize {
        self.raw.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Standardized index stack of one patch.
pub fn standardized_indices(
    p: &MultispectralPatch,
    stats: &StandardizationStats,
    tag: &str,
) -> Result<IndexStack> {
    apply_standardization(&compute_indices(p, INDEX_EPS), stats, tag)
}

/// Standardized band and index tensors `[B, 5, H, W]` for equally sized
/// patches. `stats` must have been fitted on the split named `tag`.
pub fn make_inputs<T: Real>(
    patches: &[&MultispectralPatch],
    stats: &StandardizationStats,
    tag: &str,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = patches
        .first()
        .ok_or_else(|| CoreError::Invalid("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut raw = Vec::with_capacity(patches.len() * BANDS * h * w);
    let mut stacks = Vec::with_capacity(patches.len());
    for p in patches {
        if (p.height, p.width) != (h, w) {
            return Err(CoreError::Invalid(
                "patches in one batch differ in extent".into(),
            ));
        }
        raw.extend(
            stats
                .bands
                .apply(&p.data)
                .into_iter()
                .map(|v| T::of(v as f64)),
        );
        stacks.push(standardized_indices(p, stats, tag)?);
    }
    let refs: Vec<&IndexStack> = stacks.iter().collect();
    Ok((
        Tensor::new(vec![patches.len(), BANDS, h, w], raw)?,
        vimb::index_tensor(&refs)?,
    ))
}

/// Inputs plus label codes for a batch of samples.
pub fn make_batch<T: Real>(
    samples: &[&Sample],
    stats: &StandardizationStats,
    tag: &str,
) -> Result<Batch<T>> {
    let patches: Vec<&MultispectralPatch> = samples.iter().map(|s| &s.patch).collect();
    let (raw, idx) = make_inputs(&patches, stats, tag)?;
    let mut labels = Vec::with_capacity(raw.len() / BANDS);
    for s in samples {
        labels.extend_from_slice(&s.mask.codes);
    }
    Ok(Batch {
        raw,
        idx,
        labels,
        height: samples[0].patch.height,
        width: samples[0].patch.width,
    })
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

    fn run(cfg: &ModelConfig, b: usize, mode: Mode, seed: u64) -> (Vec<usize>, Vec<f64>, bool) {
        let mut store = ParamStore::<f64>::new();
        let m = Visa::new(&mut store, cfg, 1).unwrap();
        let mut g = Graph::new(&store);
        let raw = g.input(random(&[b, BANDS, 8, 8], seed));
        let idx = g.input(random(&[b, BANDS, 8, 8], seed + 1));
        let out = m.forward(&mut g, raw, idx, mode).unwrap();
        (
            g.shape(out.posteriors).to_vec(),
            g.data(out.posteriors).to_vec(),
            out.aux_logits.is_some(),
        )
    }

    #[test]
    fn posteriors_are_distributions() {
        let (shape, p, aux) = run(&ModelConfig::micro(), 2, Mode::Train, 3);
        assert_eq!(shape, [2, 3, 8, 8]);
        assert!(aux);
        for b in 0..2 {
            for px in 0..64 {
                let s: f64 = (0..3).map(|c| p[(b * 3 + c) * 64 + px]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_stream_model_has_no_auxiliary_output() {
        let cfg = ModelConfig {
            use_vimb: false,
            ..ModelConfig::micro()
        };
        let (shape, _, aux) = run(&cfg, 1, Mode::Eval, 4);
        assert_eq!(shape, [1, 3, 8, 8]);
        assert!(!aux);
    }

    #[test]
    fn eval_mode_is_independent_of_batch_company() {
        let cfg = ModelConfig::micro();
        let mut store = ParamStore::<f64>::new();
        let m = Visa::new(&mut store, &cfg, 5).unwrap();
        let (raw, idx) = (random(&[2, BANDS, 8, 8], 6), random(&[2, BANDS, 8, 8], 7));
        let mut g = Graph::new(&store);
        let r = g.input(raw.clone());
        let i = g.input(idx.clone());
        let both = m.forward(&mut g, r, i, Mode::Eval).unwrap();
        let n = BANDS * 64;
        let r1 = g.input(Tensor::new(vec![1, BANDS, 8, 8], raw.data()[..n].to_vec()).unwrap());
        let i1 = g.input(Tensor::new(vec![1, BANDS, 8, 8], idx.data()[..n].to_vec()).unwrap());
        let one = m.forward(&mut g, r1, i1, Mode::Eval).unwrap();
        let (a, b) = (g.data(both.logits), g.data(one.logits));
        for (x, y) in a[..3 * 64].iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_rejects_mismatched_streams() {
        let mut store = ParamStore::<f64>::new();
        let head = FusionHead::new(&mut store, 2, 4, 8).unwrap();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::zeros(&[1, 4, 4, 4]));
        let b = g.input(Tensor::zeros(&[1, 4, 4, 8]));
        assert!(head.forward(&mut g, &[a, b], Mode::Eval).is_err());
    }

    #[test]
    fn extent_must_fit_window_and_ladder() {
        let mut store = ParamStore::<f64>::new();
        let m = Visa::new(&mut store, &ModelConfig::micro(), 9).unwrap();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(&[1, BANDS, 6, 8]));
        assert!(m.forward(&mut g, x, x, Mode::Eval).is_err());
    }
}
