//! Overlapped sliding-window inference over images larger than the model's
//! training patch.

use log::warn;

use crate::error::{CoreError, Result};
use crate::model::NUM_CLASSES;

/// Window origins along one axis: every `stride` from 0, plus a final
/// window flush with the far edge when the stride does not land on it.
pub fn window_starts(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    if extent <= window {
        return vec![0];
    }
    let last = extent - window;
    let mut s: Vec<usize> = (0..=last).step_by(stride.max(1)).collect();
    if *s.last().unwrap() != last {
        s.push(last);
    }
    s
}

/// Index into `0..n` under mirror reflection without edge repeat.
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlidingOutput {
    pub height: usize,
    pub width: usize,
    /// Averaged logits `[3, H, W]`.
    pub logits: Vec<f64>,
    pub coverage: Vec<u32>,
    pub labels: Vec<u8>,
    /// Maximum posterior per pixel.
    pub confidence: Vec<f32>,
    /// Set when the image was smaller than the window and reflect-padded.
    pub padded: bool,
}

/// Runs `model` over `window x window` crops of a channel-major image
/// `[C, H, W]` at the given stride. `model` receives a batch of crops and
/// returns `[3, window, window]` logits for each.
///
/// Logits are summed in f64 with per-pixel coverage counts and averaged
/// before the softmax at temperature `tau`. Argmax ties go to the lowest
/// class index. An axis shorter than the window is reflect-padded to one
/// centered window.
pub fn sliding_window<F>(
    image: &[f32],
    channels: usize,
    height: usize,
    width: usize,
    window: usize,
    stride: usize,
    tau: f64,
    mut model: F,
) -> Result<SlidingOutput>
where
    F: FnMut(&[Vec<f32>]) -> Result<Vec<Vec<f32>>>,
{
    if image.len() != channels * height * width || height == 0 || width == 0 {
        return Err(CoreError::Invalid(format!(
            "image of {} values is not {channels}x{height}x{width}",
            image.len()
        )));
    }
    if window == 0 || stride == 0 || stride > window {
        return Err(CoreError::Invalid(format!(
            "window {window} with stride {stride} leaves gaps"
        )));
    }
    let padded = height < window || width < window;
    if padded {
        warn!("image {height}x{width} is smaller than the {window} window; using one reflect-padded window");
    }
    // Extent of the (possibly padded) canvas and the image's offset in it.
    let (ch, cw) = (height.max(window), width.max(window));
    let (oy, ox) = ((ch - height) / 2, (cw - width) / 2);
    let ys = window_starts(ch, window, stride);
    let xs = window_starts(cw, window, stride);

    let hw = height * width;
    let mut sum = vec![0.0f64; NUM_CLASSES * hw];
    let mut coverage = vec![0u32; hw];
    let origins: Vec<(usize, usize)> = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (y, x)))
        .collect();
    let crops: Vec<Vec<f32>> = origins
        .iter()
        .map(|&(y0, x0)| {
            let mut crop = Vec::with_capacity(channels * window * window);
            for c in 0..channels {
                let plane = &image[c * hw..(c + 1) * hw];
                for y in 0..window {
                    let sy = reflect((y0 + y) as isize - oy as isize, height);
                    for x in 0..window {
                        let sx = reflect((x0 + x) as isize - ox as isize, width);
                        crop.push(plane[sy * width + sx]);
                    }
                }
            }
            crop
        })
        .collect();
    let outs = model(&crops)?;
    if outs.len() != crops.len() {
        return Err(CoreError::Invalid(format!(
            "model returned {} outputs for {} windows",
            outs.len(),
            crops.len()
        )));
    }
    let ww = window * window;
    for (&(y0, x0), logits) in origins.iter().zip(&outs) {
        if logits.len() != NUM_CLASSES * ww {
            return Err(CoreError::Invalid(format!(
                "window logits have {} values, expected {}",
                logits.len(),
                NUM_CLASSES * ww
            )));
        }
        for y in 0..window {
            let Some(iy) = (y0 + y).checked_sub(oy).filter(|&v| v < height) else {
                continue;
            };
            for x in 0..window {
                let Some(ix) = (x0 + x).checked_sub(ox).filter(|&v| v < width) else {
                    continue;
                };
                let p = iy * width + ix;
                coverage[p] += 1;
                for k in 0..NUM_CLASSES {
                    sum[k * hw + p] += logits[k * ww + y * window + x] as f64;
                }
            }
        }
    }
    let mut labels = vec![0u8; hw];
    let mut confidence = vec![0f32; hw];
    for p in 0..hw {
        let n = coverage[p] as f64;
        let mut z = [0.0; NUM_CLASSES];
        for k in 0..NUM_CLASSES {
            sum[k * hw + p] /= n;
            z[k] = sum[k * hw + p];
        }
        let mut best = 0;
        for k in 1..NUM_CLASSES {
            if z[k] > z[best] {
                best = k;
            }
        }
        let denom: f64 = z.iter().map(|v| ((v - z[best]) / tau).exp()).sum();
        labels[p] = best as u8;
        confidence[p] = (1.0 / denom) as f32;
    }
    Ok(SlidingOutput {
        height,
        width,
        logits: sum,
        coverage,
        labels,
        confidence,
        padded,
    })
}
