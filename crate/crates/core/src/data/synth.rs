//! Synthetic multispectral field generator.
//!
//! Each block is a `2P x 2P` tile split into four `P x P` patches that share
//! the block id. Crop grows in horizontal row stripes with jitter, weeds are
//! irregular blobs that override crop, and everything else is soil. A thin
//! border band on one random edge is coded ignore.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::patch::{
    Field, LabelMask, MultispectralPatch, Year, BANDS, CROP, IGNORE, OTHER, WEED,
};
use crate::data::preprocess::{median_denoise, saturation_gate, GateDecision, SATURATION_FRACTION};
use crate::error::{CoreError, Result};

/// Mean reflectance `[B, G, R, RE, NIR]` per class code 0 (soil), 1 (crop),
/// 2 (weed).
pub const CLASS_SPECTRA: [[f64; BANDS]; 3] = [
    [0.12, 0.15, 0.20, 0.24, 0.28],
    [0.04, 0.08, 0.04, 0.28, 0.52],
    [0.06, 0.14, 0.08, 0.30, 0.40],
];

const NOISE_STD: f64 = 0.01;
const VIGOR_STD: f64 = 0.06;
const MAX_GATE_RETRIES: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftParams {
    /// Target fraction of tile area covered by weed blobs.
    pub weed_density: f64,
    /// Mean blob radius as a fraction of the tile side.
    pub weed_blob_scale: f64,
    /// Peak-to-peak multiplicative illumination ramp across a tile.
    pub illumination_gradient: f64,
    /// Additive offset on every class spectrum.
    pub spectral_offset: [f64; BANDS],
    /// Crop share of the spectrum at weed-boundary pixels.
    pub canopy_mix: f64,
}

impl Default for ShiftParams {
    fn default() -> Self {
        Self {
            weed_density: 0.12,
            weed_blob_scale: 0.06,
            illumination_gradient: 0.3,
            spectral_offset: [0.0; BANDS],
            canopy_mix: 0.3,
        }
    }
}

impl ShiftParams {
    /// Per field and season. `E2` in `Y0..Y2` is the reference domain; `E8`
    /// and `Y3` each add their own shift.
    pub fn preset(field: Field, year: Year) -> Self {
        let mut p = Self::default();
        if field == Field::E8 {
            p.weed_density = 0.18;
            p.weed_blob_scale = 0.04;
            p.canopy_mix = 0.5;
            for (o, d) in p
                .spectral_offset
                .iter_mut()
                .zip([0.015, 0.03, 0.03, -0.02, -0.06])
            {
                *o += d;
            }
        }
        if year == Year(3) {
            p.illumination_gradient = 0.6;
            p.weed_density += 0.04;
            for (o, d) in p
                .spectral_offset
                .iter_mut()
                .zip([0.01, 0.01, 0.025, -0.01, -0.05])
            {
                *o += d;
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(format!("shift params: {m}")));
        if !(self.weed_density >= 0.0 && self.weed_density <= 1.0) {
            return bad("weed_density must lie in [0, 1]");
        }
        if !(self.weed_blob_scale > 0.0 && self.weed_blob_scale < 0.5) {
            return bad("weed_blob_scale must lie in (0, 0.5)");
        }
        if !(self.illumination_gradient >= 0.0 && self.illumination_gradient < 1.0) {
            return bad("illumination_gradient must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.canopy_mix) {
            return bad("canopy_mix must lie in [0, 1]");
        }
        if self
            .spectral_offset
            .iter()
            .any(|o| !o.is_finite() || o.abs() > 0.5)
        {
            return bad("spectral offsets must be finite and within +-0.5");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub patch: MultispectralPatch,
    pub mask: LabelMask,
}

fn block_seed(seed: u64, field: Field, year: Year, index: usize) -> u64 {
    let f = match field {
        Field::E2 => 0u64,
        Field::E8 => 1,
    };
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (f << 40)
        ^ ((year.0 as u64) << 32)
        ^ (index as u64).wrapping_mul(0x2545_f491_4f6c_dd1d)
}

/// Label layout of one `t x t` tile (before the ignore band).
fn layout(rng: &mut ChaCha8Rng, t: usize, shift: &ShiftParams) -> (Vec<u8>, Vec<f64>) {
    let tf = t as f64;
    let mut codes = vec![OTHER; t * t];
    // per-pixel vigor, constant per row or blob
    let mut vigor = vec![1.0; t * t];
    let vig = Normal::new(1.0, VIGOR_STD).unwrap();

    let period = (tf / 10.0).max(6.0);
    let phase = rng.random_range(0.0..period);
    let wave_len = rng.random_range(0.6..1.4) * tf;
    let n_rows = (tf / period).ceil() as usize + 2;
    struct Row {
        center: f64,
        amp: f64,
        phi: f64,
        half: f64,
        psi: f64,
        vigor: f64,
        gaps: Vec<(f64, f64)>,
    }
    let rows: Vec<Row> = (0..n_rows)
        .map(|k| {
            let n_gaps = rng.random_range(0..3);
            Row {
                center: phase + (k as f64 - 1.0) * period + rng.random_range(-0.08..0.08) * period,
                amp: rng.random_range(0.03..0.1) * period,
                phi: rng.random_range(0.0..2.0 * PI),
                half: rng.random_range(0.2..0.26) * period,
                psi: rng.random_range(0.0..2.0 * PI),
                vigor: vig.sample(rng),
                gaps: (0..n_gaps)
                    .map(|_| {
                        let s = rng.random_range(0.0..tf);
                        (s, s + rng.random_range(2.0..0.08 * tf + 3.0))
                    })
                    .collect(),
            }
        })
        .collect();
    for y in 0..t {
        for x in 0..t {
            let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
            for r in &rows {
                let c = r.center + r.amp * (2.0 * PI * xf / wave_len + r.phi).sin();
                let half = r.half * (1.0 + 0.2 * (2.0 * PI * xf / (0.37 * tf) + r.psi).sin());
                if (yf - c).abs() < half && !r.gaps.iter().any(|&(a, b)| xf >= a && xf < b) {
                    codes[y * t + x] = CROP;
                    vigor[y * t + x] = r.vigor;
                    break;
                }
            }
        }
    }

    let r_mean = shift.weed_blob_scale * tf;
    let n_blobs = (shift.weed_density * tf * tf / (PI * r_mean * r_mean)).round() as usize;
    for _ in 0..n_blobs {
        let cy = rng.random_range(0.0..tf);
        let cx = rng.random_range(0.0..tf);
        let r = r_mean * rng.random_range(0.6..1.4);
        let (p1, p2) = (
            rng.random_range(0.0..2.0 * PI),
            rng.random_range(0.0..2.0 * PI),
        );
        let v = vig.sample(rng);
        let reach = (r * 1.5).ceil() as isize;
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (y, x) = (cy as isize + dy, cx as isize + dx);
                if y < 0 || x < 0 || y >= t as isize || x >= t as isize {
                    continue;
                }
                let (ry, rx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let th = ry.atan2(rx);
                let rad = r * (1.0 + 0.25 * (3.0 * th + p1).sin() + 0.15 * (5.0 * th + p2).sin());
                if ry.hypot(rx) < rad {
                    let i = y as usize * t + x as usize;
                    codes[i] = WEED;
                    vigor[i] = v;
                }
            }
        }
    }
    (codes, vigor)
}

/// Renders reflectance for a label layout; values are not yet clipped.
fn render(
    rng: &mut ChaCha8Rng,
    t: usize,
    codes: &[u8],
    vigor: &[f64],
    shift: &ShiftParams,
) -> Vec<f32> {
    let noise = Normal::new(0.0, NOISE_STD).unwrap();
    let theta = rng.random_range(0.0..2.0 * PI);
    let brightness = rng.random_range(0.85..1.15);
    let (ct, st) = (theta.cos(), theta.sin());
    let tf = t as f64;
    let n = t * t;
    let mut out = vec![0.0f32; BANDS * n];
    let is_weed = |y: isize, x: isize| {
        y >= 0
            && x >= 0
            && y < t as isize
            && x < t as isize
            && codes[y as usize * t + x as usize] == WEED
    };
    for y in 0..t {
        for x in 0..t {
            let i = y * t + x;
            let class = codes[i] as usize;
            let mut spec = CLASS_SPECTRA[class];
            if codes[i] == WEED {
                let (yi, xi) = (y as isize, x as isize);
                let boundary = !(is_weed(yi - 1, xi)
                    && is_weed(yi + 1, xi)
                    && is_weed(yi, xi - 1)
                    && is_weed(yi, xi + 1));
                if boundary {
                    for b in 0..BANDS {
                        spec[b] = (1.0 - shift.canopy_mix) * spec[b]
                            + shift.canopy_mix * CLASS_SPECTRA[CROP as usize][b];
                    }
                }
            }
            let ramp = ((x as f64 + 0.5) / tf - 0.5) * ct + ((y as f64 + 0.5) / tf - 0.5) * st;
            let illum = brightness * (1.0 + shift.illumination_gradient * ramp);
            for b in 0..BANDS {
                let v = (spec[b] + shift.spectral_offset[b]).max(0.0) * vigor[i] * illum
                    + noise.sample(rng);
                out[b * n + i] = v as f32;
            }
        }
    }
    out
}

fn split_tile(tile: &MultispectralPatch, codes: &[u8], p: usize) -> Vec<Sample> {
    let t = 2 * p;
    let mut out = Vec::with_capacity(4);
    for (oy, ox) in [(0, 0), (0, p), (p, 0), (p, p)] {
        let mut data = Vec::with_capacity(BANDS * p * p);
        for b in 0..BANDS {
            let band = tile.band(b);
            for y in 0..p {
                data.extend_from_slice(&band[(oy + y) * t + ox..(oy + y) * t + ox + p]);
            }
        }
        let mut m = Vec::with_capacity(p * p);
        for y in 0..p {
            m.extend_from_slice(&codes[(oy + y) * t + ox..(oy + y) * t + ox + p]);
        }
        let mut patch = MultispectralPatch::new(p, p, data).expect("tile split");
        patch.block_id = tile.block_id;
        patch.field = tile.field;
        patch.year = tile.year;
        out.push(Sample {
            patch,
            mask: LabelMask::new(p, p, m).expect("tile split"),
        });
    }
    out
}

/// One full tile for block `index` of a field-year: denoised reflectance
/// clipped to `[0, 1]` and its label grid.
pub fn generate_tile(
    seed: u64,
    field: Field,
    year: Year,
    shift: &ShiftParams,
    index: usize,
    block_id: u32,
    patch_size: usize,
) -> Result<(MultispectralPatch, Vec<u8>)> {
    shift.validate()?;
    if patch_size < 4 || !patch_size.is_multiple_of(2) {
        return Err(CoreError::Config(format!(
            "patch size {patch_size} must be even and at least 4"
        )));
    }
    let t = 2 * patch_size;
    let mut rng = ChaCha8Rng::seed_from_u64(block_seed(seed, field, year, index));
    let (mut codes, vigor) = layout(&mut rng, t, shift);
    let mut raw = render(&mut rng, t, &codes, &vigor, shift);
    let mut attempts = 1;
    loop {
        let probe = MultispectralPatch::new(t, t, raw.clone())?;
        match saturation_gate(&probe, SATURATION_FRACTION) {
            GateDecision::Accept => break,
            GateDecision::Reject { band, fraction } if attempts < MAX_GATE_RETRIES => {
                log::debug!("block {block_id}: frame rejected ({band} saturated {fraction:.4}), re-rendering");
                raw = render(&mut rng, t, &codes, &vigor, shift);
                attempts += 1;
            }
            GateDecision::Reject { band, fraction } => {
                log::warn!("block {block_id}: keeping frame after {attempts} attempts ({band} saturated {fraction:.4})");
                break;
            }
        }
    }
    for v in &mut raw {
        *v = v.clamp(0.0, 1.0);
    }
    let mut tile = median_denoise(&MultispectralPatch::new(t, t, raw)?);
    tile.block_id = block_id;
    tile.field = field;
    tile.year = year;

    let thick = ((0.01 * t as f64).round() as usize).max(1);
    match rng.random_range(0..4) {
        0 => codes[..thick * t].fill(IGNORE),
        1 => codes[(t - thick) * t..].fill(IGNORE),
        2 => (0..t).for_each(|y| codes[y * t..y * t + thick].fill(IGNORE)),
        _ => (0..t).for_each(|y| codes[y * t + t - thick..(y + 1) * t].fill(IGNORE)),
    }
    Ok((tile, codes))
}

/// `blocks` tiles for one field-year, each split into four patches. Block
/// ids are `first_block_id ..`.
pub fn generate_field(
    seed: u64,
    field: Field,
    year: Year,
    shift: &ShiftParams,
    blocks: usize,
    patch_size: usize,
    first_block_id: u32,
) -> Result<Vec<Sample>> {
    if blocks == 0 {
        return Err(CoreError::Config(
            "at least one block per field-year is required".into(),
        ));
    }
    let mut out = Vec::with_capacity(4 * blocks);
    for i in 0..blocks {
        let (tile, codes) = generate_tile(
            seed,
            field,
            year,
            shift,
            i,
            first_block_id + i as u32,
            patch_size,
        )?;
        out.extend(split_tile(&tile, &codes, patch_size));
    }
    Ok(out)
}

/// Reassembles the four patches of one block into its `2P x 2P` tile.
pub fn assemble_block(samples: &[&Sample]) -> Result<(MultispectralPatch, LabelMask)> {
    if samples.len() != 4 {
        return Err(CoreError::Invalid(format!(
            "a block has 4 patches, got {}",
            samples.len()
        )));
    }
    let p = samples[0].patch.height;
    let t = 2 * p;
    let mut data = vec![0.0f32; BANDS * t * t];
    let mut codes = vec![0u8; t * t];
    for (s, (oy, ox)) in samples.iter().zip([(0, 0), (0, p), (p, 0), (p, p)]) {
        for b in 0..BANDS {
            let band = s.patch.band(b);
            for y in 0..p {
                let dst = b * t * t + (oy + y) * t + ox;
                data[dst..dst + p].copy_from_slice(&band[y * p..(y + 1) * p]);
            }
        }
        for y in 0..p {
            codes[(oy + y) * t + ox..(oy + y) * t + ox + p]
                .copy_from_slice(&s.mask.codes[y * p..(y + 1) * p]);
        }
    }
    let mut tile = MultispectralPatch::new(t, t, data)?;
    tile.block_id = samples[0].patch.block_id;
    tile.field = samples[0].patch.field;
    tile.year = samples[0].patch.year;
    Ok((tile, LabelMask::new(t, t, codes)?))
}
