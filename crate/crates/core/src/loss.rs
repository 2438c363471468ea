//! Training objective: weighted cross-entropy, soft Dice and a Sobel edge
//! penalty on the fused posteriors, plus cross-entropy on the auxiliary
//! index-stream logits.

use log::warn;
use serde::{Deserialize, Serialize};
use visa_tensor::{Graph, Real, Tensor, Var};

use crate::data::patch::{IGNORE, NUM_CLASSES};
use crate::error::{CoreError, Result};

pub const CE_LOG_FLOOR: f64 = 1e-12;
pub const DICE_EPS: f64 = 1e-6;
/// Substitute frequency for a class absent from the training split.
pub const FREQ_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_dice: f64,
    pub lambda_edge: f64,
    pub alpha_aux: f64,
    /// Per-class cross-entropy weights, normally from
    /// [`median_frequency_weights`].
    pub class_weights: [f64; NUM_CLASSES],
    /// Softmax temperature applied to both logit streams.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_dice: 1.0,
            lambda_edge: 0.5,
            alpha_aux: 0.3,
            class_weights: [1.0; NUM_CLASSES],
            tau: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let scalars = [
            ("lambda_dice", self.lambda_dice),
            ("lambda_edge", self.lambda_edge),
            ("alpha_aux", self.alpha_aux),
        ];
        for (name, v) in scalars {
            if !v.is_finite() || v < 0.0 {
                return Err(CoreError::Config(format!(
                    "loss.{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(CoreError::Config(format!(
                "loss.tau must be positive, got {}",
                self.tau
            )));
        }
        if self
            .class_weights
            .iter()
            .any(|w| !w.is_finite() || *w <= 0.0)
        {
            return Err(CoreError::Config(format!(
                "class weights must be finite and positive, got {:?}",
                self.class_weights
            )));
        }
        Ok(())
    }
}

/// Share of labeled pixels per class; ignore pixels are not counted.
pub fn class_frequencies<'a>(masks: impl IntoIterator<Item = &'a [u8]>) -> [f64; NUM_CLASSES] {
    let mut counts = [0u64; NUM_CLASSES];
    for m in masks {
        for &c in m {
            if c != IGNORE {
                counts[c as usize] += 1;
            }
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return [0.0; NUM_CLASSES];
    }
    counts.map(|c| c as f64 / total as f64)
}

fn median3(f: &[f64; NUM_CLASSES]) -> f64 {
    let mut s = *f;
    s.sort_by(f64::total_cmp);
    s[1]
}

/// `w_c = median(f) / f_c`.
pub fn median_frequency_weights(freqs: [f64; NUM_CLASSES]) -> Result<[f64; NUM_CLASSES]> {
    if let Some(c) = freqs.iter().position(|&f| !(f > 0.0) || !f.is_finite()) {
        return Err(CoreError::Invalid(format!(
            "class {c} has frequency {} in the training split; exclude the class or floor it \
             (see median_frequency_weights_floored)",
            freqs[c]
        )));
    }
    let m = median3(&freqs);
    Ok(freqs.map(|f| m / f))
}

/// Like [`median_frequency_weights`] but floors zero frequencies at
/// [`FREQ_FLOOR`]. The returned flags mark the floored classes.
pub fn median_frequency_weights_floored(
    freqs: [f64; NUM_CLASSES],
) -> ([f64; NUM_CLASSES], [bool; NUM_CLASSES]) {
    let flags = freqs.map(|f| !(f > 0.0));
    for (c, &f) in flags.iter().enumerate() {
        if f {
            warn!("class {c} is absent from the training split; its frequency is floored at {FREQ_FLOOR}");
        }
    }
    let floored = freqs.map(|f| if f > 0.0 { f } else { FREQ_FLOOR });
    let w = median_frequency_weights(floored).expect("floored frequencies are positive");
    (w, flags)
}

/// Dense label targets for a batch of `b` masks of `h x w` pixels.
#[derive(Clone, Debug)]
pub struct Targets<T> {
    /// One-hot `[B, 3, H, W]`, all zero at ignore pixels.
    pub one_hot: Tensor<T>,
    /// `[B, 1, H, W]`, one on labeled pixels.
    pub mask: Tensor<T>,
    /// `|Omega|`.
    pub labeled: usize,
}

impl<T: Real> Targets<T> {
    pub fn new(labels: &[u8], b: usize, h: usize, w: usize) -> Result<Self> {
        let hw = h * w;
        if labels.len() != b * hw {
            return Err(CoreError::Invalid(format!(
                "expected {} labels for a [{b}, {h}, {w}] batch, got {}",
                b * hw,
                labels.len()
            )));
        }
        let mut one_hot = vec![T::zero(); b * NUM_CLASSES * hw];
        let mut mask = vec![T::zero(); b * hw];
        let mut labeled = 0;
        for (i, &c) in labels.iter().enumerate() {
            if c == IGNORE {
                continue;
            }
            if c as usize >= NUM_CLASSES {
                return Err(CoreError::Invalid(format!(
                    "label code {c} is not a class or ignore"
                )));
            }
            let (n, p) = (i / hw, i % hw);
            one_hot[(n * NUM_CLASSES + c as usize) * hw + p] = T::one();
            mask[i] = T::one();
            labeled += 1;
        }
        Ok(Self {
            one_hot: Tensor::new(vec![b, NUM_CLASSES, h, w], one_hot)?,
            mask: Tensor::new(vec![b, 1, h, w], mask)?,
            labeled,
        })
    }
}

/// `-(1/|Omega|) sum w_c y log P` with a log floor. Zero, with a warning,
/// when no pixel is labeled.
pub fn loss_ce<T: Real>(
    g: &mut Graph<'_, T>,
    p: Var,
    t: &Targets<T>,
    class_weights: &[f64; NUM_CLASSES],
) -> Result<Var> {
    if t.labeled == 0 {
        warn!("batch has no labeled pixels; cross-entropy contributes 0");
        return Ok(g.constant(&[1], 0.0));
    }
    let sh = t.one_hot.shape();
    let hw = sh[2] * sh[3];
    let scale = 1.0 / t.labeled as f64;
    let mut yw = t.one_hot.clone();
    for (i, v) in yw.data_mut().iter_mut().enumerate() {
        let c = (i / hw) % NUM_CLASSES;
        *v = *v * T::of(class_weights[c] * scale);
    }
    let yw = g.input(yw);
    let lp = g.log_floor(p, CE_LOG_FLOOR);
    let prod = g.mul(yw, lp)?;
    let s = g.sum_all(prod);
    Ok(g.scale(s, -1.0))
}

/// `1 - (2 sum P y + eps) / (sum P + sum y + eps)` over labeled pixels and
/// all classes.
pub fn loss_dice<T: Real>(g: &mut Graph<'_, T>, p: Var, t: &Targets<T>) -> Result<Var> {
    let y = g.input(t.one_hot.clone());
    let m = g.input(t.mask.clone());
    let py = g.mul(p, y)?;
    let inter = g.sum_all(py);
    let pm = g.mul(p, m)?;
    let sp = g.sum_all(pm);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, DICE_EPS);
    let den = g.add_scalar(sp, t.labeled as f64 + DICE_EPS);
    let ratio = g.div(num, den)?;
    let neg = g.scale(ratio, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

pub const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
pub const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// `E(x) = sum_c |S_x * x_c| + |S_y * x_c|` for `x[B, C, H, W]`, with zero
/// padding outside the grid. Returns `[B, 1, H, W]`.
pub fn edge_map<T: Real>(g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    let sh = g.shape(x).to_vec();
    if sh.len() != 4 {
        return Err(CoreError::Invalid(format!(
            "edge map needs [B, C, H, W], got {sh:?}"
        )));
    }
    let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let kernel: Vec<T> = SOBEL_X.iter().chain(&SOBEL_Y).map(|&v| T::of(v)).collect();
    let k = g.input(Tensor::new(vec![2, 1, 3, 3], kernel)?);
    let planes = g.reshape(x, &[b * c, 1, h, w])?;
    let grad = g.conv2d(planes, k, None, 1, 1)?;
    let mag = g.abs(grad);
    let mag = g.reshape(mag, &[b, 2 * c, h, w])?;
    Ok(g.sum_axis(mag, 1)?)
}

/// Mean over labeled pixels of `|E(P ⊙ M) - E(Y)|`, ignore pixels zero-filled
/// before filtering.
pub fn loss_edge<T: Real>(g: &mut Graph<'_, T>, p: Var, t: &Targets<T>) -> Result<Var> {
    if t.labeled == 0 {
        return Ok(g.constant(&[1], 0.0));
    }
    let y = g.input(t.one_hot.clone());
    let m = g.input(t.mask.clone());
    let pm = g.mul(p, m)?;
    let ep = edge_map(g, pm)?;
    let ey = edge_map(g, y)?;
    let d = g.sub(ep, ey)?;
    let d = g.abs(d);
    let d = g.mul(d, m)?;
    let s = g.sum_all(d);
    Ok(g.scale(s, 1.0 / t.labeled as f64))
}

/// Scalar values of each term, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub dice: f64,
    pub edge: f64,
    pub aux: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn accumulate(&mut self, o: &LossBreakdown, weight: f64) {
        self.ce += weight * o.ce;
        self.dice += weight * o.dice;
        self.edge += weight * o.edge;
        self.aux += weight * o.aux;
        self.total += weight * o.total;
    }
}

/// `L = CE + l_dice Dice + l_edge Edge + alpha CE_aux`. `aux_logits` is
/// absent when the index stream is disabled. Fails on the first non-finite
/// term, naming it.
pub fn total_loss<T: Real>(
    g: &mut Graph<'_, T>,
    posteriors: Var,
    aux_logits: Option<Var>,
    t: &Targets<T>,
    wts: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let check = |g: &Graph<'_, T>, v: Var, name: &str| -> Result<f64> {
        let x = g.value(v).item().f64();
        if x.is_finite() {
            Ok(x)
        } else {
            Err(CoreError::NonFinite(format!("{name} loss term")))
        }
    };
    let ce = loss_ce(g, posteriors, t, &wts.class_weights)?;
    let dice = loss_dice(g, posteriors, t)?;
    let edge = loss_edge(g, posteriors, t)?;
    let mut out = LossBreakdown {
        ce: check(g, ce, "cross-entropy")?,
        dice: check(g, dice, "dice")?,
        edge: check(g, edge, "edge")?,
        ..Default::default()
    };
    let d = g.scale(dice, wts.lambda_dice);
    let e = g.scale(edge, wts.lambda_edge);
    let mut total = g.add(ce, d)?;
    total = g.add(total, e)?;
    if let Some(z) = aux_logits {
        let pa = g.softmax(z, 1, wts.tau)?;
        let aux = loss_ce(g, pa, t, &[1.0; NUM_CLASSES])?;
        out.aux = check(g, aux, "auxiliary cross-entropy")?;
        let a = g.scale(aux, wts.alpha_aux);
        total = g.add(total, a)?;
    }
    out.total = check(g, total, "total")?;
    Ok((total, out))
}
