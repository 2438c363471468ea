//! Run configuration, learning-rate schedule and the training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use visa_tensor::optim::{clip_global_norm, AdamW, AdamWConfig};
use visa_tensor::{checkpoint, Graph, ParamStore, Real};

use crate::data::augment::augment;
use crate::data::dataset::Dataset;
use crate::data::split::{audit, Partition, Protocol, SplitManifest};
use crate::data::synth::Sample;
use crate::error::{io_err, CoreError, Result};
use crate::indices::{fit_standardization, StandardizationStats};
use crate::loss::{
    class_frequencies, median_frequency_weights_floored, total_loss, LossBreakdown, LossWeights,
    Targets,
};
use crate::metrics::{metrics, ConfusionMatrix};
use crate::model::{
    make_batch, make_inputs, parameter_count, Mode, ModelConfig, Visa, NUM_CLASSES,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup_iters: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Batches whose gradients are averaged per optimizer step.
    pub accumulation: usize,
    /// Random flips and right-angle rotations of training patches.
    pub augment: bool,
    /// Replace `loss.class_weights` with median-frequency weights of the
    /// training split.
    pub median_frequency: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch: 16,
            lr: 6e-4,
            warmup_iters: 1500,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            clip_norm: 1.0,
            seed: 2026,
            accumulation: 1,
            augment: true,
            median_frequency: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub replicates: usize,
    pub bootstrap_seed: u64,
    /// Sliding-window extent; the training patch size when absent.
    pub window: Option<usize>,
    /// Half the window when absent.
    pub stride: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            replicates: crate::metrics::DEFAULT_REPLICATES,
            bootstrap_seed: 2026,
            window: None,
            stride: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub protocol: String,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::WithinPlot.name().into(),
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Desk-scale settings for 64 x 64 patches.
    pub fn micro() -> Self {
        let mut model = ModelConfig::micro();
        model.features = 16;
        model.vimb.d = 16;
        model.vimb.slots = 3;
        model.vimb.ssm_layers = 2;
        Self {
            train: TrainConfig {
                epochs: 10,
                batch: 8,
                lr: 3e-3,
                warmup_iters: 20,
                ..TrainConfig::default()
            },
            model,
            eval: EvalConfig {
                replicates: 2000,
                ..EvalConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn protocol(&self) -> Result<Protocol> {
        self.protocol.parse()
    }

    /// Model configuration with the posterior temperature from `loss.tau`.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            tau: self.loss.tau,
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.protocol()?;
        let t = &self.train;
        if t.epochs == 0 || t.batch == 0 || t.accumulation == 0 {
            return Err(CoreError::Config(
                "train.epochs, train.batch and train.accumulation must be positive".into(),
            ));
        }
        if !(t.lr > 0.0) || !t.lr.is_finite() {
            return Err(CoreError::Config(format!(
                "train.lr must be positive, got {}",
                t.lr
            )));
        }
        if !(t.clip_norm > 0.0) {
            return Err(CoreError::Config(format!(
                "train.clip_norm must be positive, got {}",
                t.clip_norm
            )));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || t.weight_decay < 0.0
        {
            return Err(CoreError::Config(
                "betas must lie in [0, 1) and weight decay must be non-negative".into(),
            ));
        }
        if let (Some(w), Some(s)) = (self.eval.window, self.eval.stride) {
            if s == 0 || s > w {
                return Err(CoreError::Config(format!(
                    "eval.stride {s} must lie in 1..={w}"
                )));
            }
        }
        self.loss.validate()?;
        self.model_config().validate()
    }
}

/// Linear warm-up to `base` over `warmup` iterations, then cosine decay to
/// zero at `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: u64,
    pub total: u64,
}

impl LrSchedule {
    pub fn at(&self, it: u64) -> f64 {
        if it < self.warmup {
            return self.base * it as f64 / self.warmup as f64;
        }
        if self.total <= self.warmup {
            return self.base;
        }
        let t = ((it - self.warmup) as f64 / (self.total - self.warmup) as f64).min(1.0);
        0.5 * self.base * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Mixes a run seed with stream labels into an independent seed.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z =
        seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub train_miou: f64,
    pub val_miou: f64,
    pub lr: f64,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,ce,dice,edge,aux,total,train_miou,val_miou,lr";

pub fn epoch_csv(rows: &[EpochLog]) -> String {
    let mut s = format!("{EPOCH_CSV_HEADER}\n");
    for r in rows {
        let l = &r.loss;
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6e}",
            r.epoch, l.ce, l.dice, l.edge, l.aux, l.total, r.train_miou, r.val_miou, r.lr
        );
    }
    s
}

/// Model weights with everything needed to run them on new imagery.
pub struct TrainedModel {
    pub run: RunConfig,
    pub store: ParamStore<f32>,
    pub model: Visa,
    pub stats: StandardizationStats,
    pub patch_size: usize,
}

pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const CONFIG_FILE: &str = "config.toml";
pub const STATS_FILE: &str = "standardization.txt";
pub const RUN_FILE: &str = "run.txt";
pub const EPOCHS_FILE: &str = "epochs.csv";

impl TrainedModel {
    pub fn build(run: &RunConfig, stats: StandardizationStats, patch_size: usize) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = Visa::new(&mut store, &run.model_config(), run.train.seed)?;
        Ok(Self {
            run: run.clone(),
            store,
            model,
            stats,
            patch_size,
        })
    }

    /// Loads a run directory, or the directory of a checkpoint file.
    pub fn load(path: &Path) -> Result<Self> {
        let (dir, ckpt) = if path.is_dir() {
            (path.to_path_buf(), path.join(CHECKPOINT_FILE))
        } else {
            let dir = path
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."));
            (dir, path.to_path_buf())
        };
        if !ckpt.exists() {
            return Err(CoreError::Invalid(format!(
                "checkpoint {} does not exist",
                ckpt.display()
            )));
        }
        let run = RunConfig::load(&dir.join(CONFIG_FILE))?;
        let stats = StandardizationStats::load(&dir.join(STATS_FILE))?;
        let info = read_run_info(&dir.join(RUN_FILE))?;
        let patch_size = info
            .iter()
            .find(|(k, _)| k == "patch_size")
            .and_then(|(_, v)| v.parse().ok())
            .ok_or_else(|| CoreError::Format {
                what: dir.join(RUN_FILE).display().to_string(),
                reason: "missing patch_size".into(),
            })?;
        let mut m = Self::build(&run, stats, patch_size)?;
        checkpoint::load_into(&ckpt, &mut m.store).map_err(|e| match e {
            checkpoint::CheckpointError::Io { .. } => {
                CoreError::Invalid(format!("cannot read checkpoint {}: {e}", ckpt.display()))
            }
            other => other.into(),
        })?;
        Ok(m)
    }

    pub fn tag(&self) -> &str {
        &self.stats.source
    }

    pub fn parameter_count(&self) -> usize {
        parameter_count(&self.store)
    }

    /// Eval-mode logits `[3, H, W]` for each patch, in batches of `batch`.
    pub fn logits(
        &self,
        patches: &[&crate::data::patch::MultispectralPatch],
        batch: usize,
    ) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(batch.max(1)) {
            let (raw, idx) = make_inputs::<f32>(chunk, &self.stats, self.tag())?;
            let mut g = Graph::new(&self.store);
            let r = g.input(raw);
            let i = g.input(idx);
            let fwd = self.model.forward(&mut g, r, i, Mode::Eval)?;
            let z = g.data(fwd.logits);
            let per = z.len() / chunk.len();
            out.extend(z.chunks(per).map(<[f32]>::to_vec));
        }
        Ok(out)
    }
}

/// Argmax over the class axis of `[B, 3, H, W]`, lowest index on ties.
pub fn argmax_classes<T: Real>(z: &[T], b: usize, hw: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(b * hw);
    for n in 0..b {
        let base = n * NUM_CLASSES * hw;
        for p in 0..hw {
            let mut best = 0;
            for k in 1..NUM_CLASSES {
                if z[base + k * hw + p] > z[base + best * hw + p] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

fn read_run_info(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect())
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_miou: f64,
    pub manifest_hash: String,
    pub class_weights: [f64; NUM_CLASSES],
    pub run_dir: PathBuf,
}

/// Patch-level mIoU of eval-mode predictions.
pub fn patch_miou(m: &TrainedModel, samples: &[Sample], batch: usize) -> Result<f64> {
    let mut cm = ConfusionMatrix::default();
    for chunk in samples.chunks(batch.max(1)) {
        let patches: Vec<_> = chunk.iter().map(|s| &s.patch).collect();
        for (s, z) in chunk.iter().zip(m.logits(&patches, batch)?) {
            let pred = argmax_classes(&z, 1, s.patch.pixels());
            cm.add_labels(&s.mask.codes, &pred)?;
        }
    }
    Ok(metrics(&cm)?.miou)
}

fn load_partition(ds: &Dataset, m: &SplitManifest, part: Partition) -> Result<Vec<Sample>> {
    let ids: Vec<u32> = m.blocks(part).iter().map(|b| b.block_id).collect();
    ds.load_blocks(&ids)
}

/// Trains on the configured protocol's training split, selecting the
/// checkpoint with the best validation mIoU (later epoch on ties). Writes
/// the run directory under `out`.
pub fn train(cfg: &RunConfig, ds: &Dataset, out: &Path) -> Result<(TrainedModel, TrainReport)> {
    cfg.validate()?;
    let manifest = ds.manifest(cfg.protocol()?)?;
    audit(&manifest)?;
    train_with_manifest(cfg, ds, &manifest, out)
}

pub fn train_with_manifest(
    cfg: &RunConfig,
    ds: &Dataset,
    manifest: &SplitManifest,
    out: &Path,
) -> Result<(TrainedModel, TrainReport)> {
    audit(manifest)?;
    let t = &cfg.train;
    let train_set = load_partition(ds, manifest, Partition::Train)?;
    let val_set = load_partition(ds, manifest, Partition::Val)?;
    if train_set.is_empty() {
        return Err(CoreError::Invalid("training split is empty".into()));
    }
    let patch_size = train_set[0].patch.height;
    let tag = manifest.train_tag();
    let train_patches: Vec<_> = train_set.iter().map(|s| &s.patch).collect();
    let stats = fit_standardization(&train_patches, &tag)?;

    let mut weights = cfg.loss.clone();
    if t.median_frequency {
        let freqs = class_frequencies(train_set.iter().map(|s| &s.mask.codes[..]));
        weights.class_weights = median_frequency_weights_floored(freqs).0;
    }

    let mut m = TrainedModel::build(cfg, stats, patch_size)?;
    let mut opt = AdamW::new(
        &m.store,
        AdamWConfig {
            beta1: t.beta1,
            beta2: t.beta2,
            weight_decay: t.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let batches_per_epoch = train_set.len().div_ceil(t.batch);
    let steps_per_epoch = batches_per_epoch.div_ceil(t.accumulation) as u64;
    let sched = LrSchedule {
        base: t.lr,
        warmup: t.warmup_iters,
        total: steps_per_epoch * t.epochs as u64,
    };

    fs::create_dir_all(out).map_err(io_err(out))?;
    let manifest_hash = manifest.content_hash();
    let config_text = cfg.to_toml();
    write_file(&out.join(CONFIG_FILE), &config_text)?;
    m.stats.save(&out.join(STATS_FILE))?;
    let mut info = String::new();
    let _ = writeln!(info, "seed = {}", t.seed);
    let _ = writeln!(info, "protocol = {}", manifest.protocol);
    let _ = writeln!(info, "manifest_hash = {manifest_hash}");
    let _ = writeln!(
        info,
        "config_hash = {}",
        hex::encode(Sha256::digest(config_text.as_bytes()))
    );
    let _ = writeln!(info, "dataset_seed = {}", ds.info.seed);
    let _ = writeln!(info, "patch_size = {patch_size}");
    let _ = writeln!(info, "class_weights = {:?}", weights.class_weights);
    let _ = writeln!(info, "parameters = {}", m.parameter_count());
    let _ = writeln!(
        info,
        "version = {} {}",
        env!("CARGO_PKG_NAME"),
        env!("CARGO_PKG_VERSION")
    );
    write_file(&out.join(RUN_FILE), &info)?;
    if val_set.is_empty() {
        warn!("validation split is empty; the last epoch is kept");
    }

    let mut history = Vec::with_capacity(t.epochs);
    let (mut best_epoch, mut best_val) = (0, f64::NEG_INFINITY);
    let mut step: u64 = 0;
    for epoch in 1..=t.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            t.seed,
            1,
            epoch as u64,
        )));
        let mut sum = LossBreakdown::default();
        let mut train_cm = ConfusionMatrix::default();
        let mut acc: Option<Vec<Vec<f32>>> = None;
        let mut pending = 0;
        let mut lr = sched.at(step);
        for (bi, idx) in order.chunks(t.batch).enumerate() {
            let owned: Vec<Sample> = idx
                .iter()
                .map(|&i| {
                    let s = &train_set[i];
                    if t.augment {
                        let (patch, mask) = augment(
                            &s.patch,
                            &s.mask,
                            derive_seed(t.seed, epoch as u64, i as u64),
                        );
                        Sample { patch, mask }
                    } else {
                        s.clone()
                    }
                })
                .collect();
            let refs: Vec<&Sample> = owned.iter().collect();
            let batch = make_batch::<f32>(&refs, &m.stats, &tag)?;
            let (grads, moments, breakdown) = {
                let mut g = Graph::new(&m.store);
                let r = g.input(batch.raw.clone());
                let i = g.input(batch.idx.clone());
                let fwd = m.model.forward(&mut g, r, i, Mode::Train)?;
                let targets = Targets::new(&batch.labels, batch.len(), batch.height, batch.width)?;
                let (loss, breakdown) =
                    total_loss(&mut g, fwd.posteriors, fwd.aux_logits, &targets, &weights)?;
                let pred =
                    argmax_classes(g.data(fwd.logits), batch.len(), batch.height * batch.width);
                train_cm.add_labels(&batch.labels, &pred)?;
                (
                    g.backward(loss)?.for_store(&m.store),
                    fwd.moments,
                    breakdown,
                )
            };
            sum.accumulate(&breakdown, idx.len() as f64 / train_set.len() as f64);
            if let Some(mo) = &moments {
                m.model.update_running(&mut m.store, mo);
            }
            match &mut acc {
                None => acc = Some(grads),
                Some(a) => {
                    for (x, y) in a.iter_mut().zip(&grads) {
                        x.iter_mut().zip(y).for_each(|(p, q)| *p += *q);
                    }
                }
            }
            pending += 1;
            if pending == t.accumulation || bi + 1 == batches_per_epoch {
                let mut gr = acc.take().expect("accumulated gradients");
                if pending > 1 {
                    let s = 1.0 / pending as f32;
                    gr.iter_mut().flatten().for_each(|v| *v *= s);
                }
                if gr.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(CoreError::NonFinite(format!(
                        "gradients at epoch {epoch}, batch {bi}"
                    )));
                }
                clip_global_norm(&mut gr, t.clip_norm);
                lr = sched.at(step);
                opt.step(&mut m.store, &gr, lr);
                step += 1;
                pending = 0;
            }
        }
        let train_miou = metrics(&train_cm)?.miou;
        let val_miou = if val_set.is_empty() {
            f64::NAN
        } else {
            patch_miou(&m, &val_set, t.batch)?
        };
        let log = EpochLog {
            epoch,
            loss: sum,
            train_miou,
            val_miou,
            lr,
        };
        info!(
            "epoch {epoch}: loss {:.4} (ce {:.4} dice {:.4} edge {:.4} aux {:.4}) train mIoU {:.4} val mIoU {:.4}",
            sum.total, sum.ce, sum.dice, sum.edge, sum.aux, train_miou, val_miou
        );
        history.push(log);
        write_file(&out.join(EPOCHS_FILE), &epoch_csv(&history))?;
        let better = val_set.is_empty() || val_miou >= best_val;
        if better {
            best_val = val_miou;
            best_epoch = epoch;
            checkpoint::save(&out.join(CHECKPOINT_FILE), &m.store)?;
        }
    }
    checkpoint::load_into(&out.join(CHECKPOINT_FILE), &mut m.store)?;
    let report = TrainReport {
        history,
        best_epoch,
        best_val_miou: best_val,
        manifest_hash,
        class_weights: weights.class_weights,
        run_dir: out.to_path_buf(),
    };
    Ok((m, report))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}
