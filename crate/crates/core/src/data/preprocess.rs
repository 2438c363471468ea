//! Simulator-side preprocessing: median denoising and the saturation gate.

use crate::data::patch::{MultispectralPatch, BANDS, BAND_NAMES};

/// Fraction of saturated pixels above which a frame is discarded.
pub const SATURATION_FRACTION: f64 = 0.005;

/// 3x3 median of one grid with replicate padding.
pub fn median3x3(src: &[f32], height: usize, width: usize) -> Vec<f32> {
    let mut out = vec![0.0; src.len()];
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut win = [0.0f32; 9];
    for y in 0..height {
        for x in 0..width {
            let mut k = 0;
            for dy in -1..=1 {
                let yy = clamp(y as isize + dy, height);
                for dx in -1..=1 {
                    let xx = clamp(x as isize + dx, width);
                    win[k] = src[yy * width + xx];
                    k += 1;
                }
            }
            win.sort_unstable_by(f32::total_cmp);
            out[y * width + x] = win[4];
        }
    }
    out
}

/// Per-band 3x3 median with replicate padding.
pub fn median_denoise(patch: &MultispectralPatch) -> MultispectralPatch {
    let mut out = patch.clone();
    for b in 0..BANDS {
        let m = median3x3(patch.band(b), patch.height, patch.width);
        out.band_mut(b).copy_from_slice(&m);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub enum GateDecision {
    Accept,
    Reject { band: &'static str, fraction: f64 },
}

/// Rejects a frame when any band has strictly more than `threshold` of its
/// pixels at or above reflectance 1.0. Must run before clipping.
pub fn saturation_gate(patch: &MultispectralPatch, threshold: f64) -> GateDecision {
    let n = patch.pixels();
    for b in 0..BANDS {
        let sat = patch.band(b).iter().filter(|&&v| v >= 1.0).count();
        // the quotient is correctly rounded, so an exact boundary compares equal
        if sat as f64 / n as f64 > threshold {
            return GateDecision::Reject {
                band: BAND_NAMES[b],
                fraction: sat as f64 / n as f64,
            };
        }
    }
    GateDecision::Accept
}
