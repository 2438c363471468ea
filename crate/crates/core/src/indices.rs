//! Vegetation-index maps and train-split standardization.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::patch::{MultispectralPatch, BANDS, BAND_NAMES, BLUE, GREEN, NIR, RED};
use crate::error::{io_err, CoreError, Result};

pub const INDEX_EPS: f64 = 1e-6;
pub const STD_EPS: f64 = 1e-6;
pub const INDICES: usize = 5;
pub const INDEX_NAMES: [&str; INDICES] = ["ndvi", "gndvi", "evi", "savi", "msavi"];

/// Five index maps `[NDVI, GNDVI, EVI, SAVI, MSAVI] x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexStack {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    pub standardized: bool,
    /// Pixels with non-finite input or a clamped EVI denominator.
    pub flagged: Vec<usize>,
}

impl IndexStack {
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Index values for one pixel of reflectance `[B, G, R, RE, NIR]`.
/// Returns the values and whether the pixel must be flagged.
pub fn pixel_indices(px: [f64; BANDS], eps: f64) -> ([f64; INDICES], bool) {
    if px.iter().any(|v| !v.is_finite()) {
        return ([f64::NAN; INDICES], true);
    }
    let (b, g, r, nir) = (px[BLUE], px[GREEN], px[RED], px[NIR]);
    let ndvi = (nir - r) / (nir + r + eps);
    let gndvi = (nir - g) / (nir + g + eps);
    let mut den = nir + 6.0 * r - 7.5 * b + 1.0 + eps;
    let clamped = den.abs() <= eps;
    if clamped {
        den = if den < 0.0 { -eps } else { eps };
    }
    let evi = 2.5 * (nir - r) / den;
    let savi = 1.5 * (nir - r) / (nir + r + 0.5 + eps);
    let q = 2.0 * nir + 1.0;
    let msavi = (q - (q * q - 8.0 * (nir - r)).max(0.0).sqrt()) / 2.0;
    ([ndvi, gndvi, evi, savi, msavi], clamped)
}

pub fn compute_indices(patch: &MultispectralPatch, eps: f64) -> IndexStack {
    let n = patch.pixels();
    let mut data = vec![0.0f32; INDICES * n];
    let mut flagged = Vec::new();
    for i in 0..n {
        let px = patch.pixel(i).map(f64::from);
        let (v, flag) = pixel_indices(px, eps);
        if flag {
            flagged.push(i);
        }
        for c in 0..INDICES {
            data[c * n + i] = v[c] as f32;
        }
    }
    IndexStack {
        height: patch.height,
        width: patch.width,
        data,
        standardized: false,
        flagged,
    }
}

/// Per-channel mean and population standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mu: [f64; 5],
    pub sigma: [f64; 5],
}

impl ChannelStats {
    /// Fits over all finite values of band-major `[5, n]` grids.
    pub fn fit<'a>(grids: impl IntoIterator<Item = &'a [f32]>) -> Result<Self> {
        let mut sum = [0.0f64; 5];
        let mut count = [0u64; 5];
        let grids: Vec<&[f32]> = grids.into_iter().collect();
        if grids.is_empty() {
            return Err(CoreError::Invalid(
                "standardization needs at least one training patch".into(),
            ));
        }
        for g in &grids {
            let n = g.len() / 5;
            for c in 0..5 {
                for &v in &g[c * n..(c + 1) * n] {
                    if v.is_finite() {
                        sum[c] += v as f64;
                        count[c] += 1;
                    }
                }
            }
        }
        if count.contains(&0) {
            return Err(CoreError::Invalid("no finite training pixels".into()));
        }
        let mu: [f64; 5] = std::array::from_fn(|c| sum[c] / count[c] as f64);
        let mut ss = [0.0f64; 5];
        for g in &grids {
            let n = g.len() / 5;
            for c in 0..5 {
                for &v in &g[c * n..(c + 1) * n] {
                    if v.is_finite() {
                        let d = v as f64 - mu[c];
                        ss[c] += d * d;
                    }
                }
            }
        }
        let sigma = std::array::from_fn(|c| (ss[c] / count[c] as f64).sqrt());
        Ok(Self { mu, sigma })
    }

    pub fn identity() -> Self {
        Self {
            mu: [0.0; 5],
            sigma: [1.0; 5],
        }
    }

    /// `(x - mu) / (sigma + eps)` per channel of a band-major grid.
    pub fn apply(&self, grid: &[f32]) -> Vec<f32> {
        let n = grid.len() / 5;
        let mut out = Vec::with_capacity(grid.len());
        for c in 0..5 {
            let (m, s) = (self.mu[c], self.sigma[c] + STD_EPS);
            out.extend(
                grid[c * n..(c + 1) * n]
                    .iter()
                    .map(|&v| ((v as f64 - m) / s) as f32),
            );
        }
        out
    }
}

/// Standardization fitted on one training split, for both the index stack
/// and the raw bands.
#[derive(Clone, Debug, PartialEq)]
pub struct StandardizationStats {
    /// Tag of the split the statistics were fitted on, e.g. `within_plot/train`.
    pub source: String,
    pub indices: ChannelStats,
    pub bands: ChannelStats,
}

pub fn fit_standardization(
    train: &[&MultispectralPatch],
    source: &str,
) -> Result<StandardizationStats> {
    let stacks: Vec<IndexStack> = train
        .iter()
        .map(|p| compute_indices(p, INDEX_EPS))
        .collect();
    Ok(StandardizationStats {
        source: source.to_string(),
        indices: ChannelStats::fit(stacks.iter().map(|s| &s.data[..]))?,
        bands: ChannelStats::fit(train.iter().map(|p| &p.data[..]))?,
    })
}

/// Standardizes `stack` with statistics that must come from `expected_source`.
pub fn apply_standardization(
    stack: &IndexStack,
    stats: &StandardizationStats,
    expected_source: &str,
) -> Result<IndexStack> {
    if stats.source != expected_source {
        return Err(CoreError::Leakage(format!(
            "standardization statistics were fitted on `{}` but the active training split is `{expected_source}`",
            stats.source
        )));
    }
    if stack.standardized {
        return Err(CoreError::Invalid(
            "index stack is already standardized".into(),
        ));
    }
    Ok(IndexStack {
        height: stack.height,
        width: stack.width,
        data: stats.indices.apply(&stack.data),
        standardized: true,
        flagged: stack.flagged.clone(),
    })
}

impl StandardizationStats {
    pub fn to_text(&self) -> String {
        let mut s = format!("# split {}\n", self.source);
        let groups = [(&INDEX_NAMES, &self.indices), (&BAND_NAMES, &self.bands)];
        for (names, st) in groups {
            for c in 0..5 {
                let _ = writeln!(s, "{} {:.16e} {:.16e}", names[c], st.mu[c], st.sigma[c]);
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |reason: String| CoreError::Format {
            what: "standardization stats".into(),
            reason,
        };
        let mut lines = text.lines();
        let source = lines
            .next()
            .and_then(|l| l.strip_prefix("# split "))
            .ok_or_else(|| bad("missing `# split` header".into()))?
            .to_string();
        let mut out = Self {
            source,
            indices: ChannelStats::identity(),
            bands: ChannelStats::identity(),
        };
        let mut seen = 0;
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(bad(format!("malformed line `{line}`")));
            }
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| bad(format!("bad number `{s}`")))
            };
            let (mu, sigma) = (parse(parts[1])?, parse(parts[2])?);
            let (st, c) = if let Some(c) = INDEX_NAMES.iter().position(|&n| n == parts[0]) {
                (&mut out.indices, c)
            } else if let Some(c) = BAND_NAMES.iter().position(|&n| n == parts[0]) {
                (&mut out.bands, c)
            } else {
                return Err(bad(format!("unknown channel `{}`", parts[0])));
            };
            st.mu[c] = mu;
            st.sigma[c] = sigma;
            seen += 1;
        }
        if seen != 10 {
            return Err(bad(format!("expected 10 channel lines, found {seen}")));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn px(b: f64, g: f64, r: f64, re: f64, nir: f64) -> [f64; 5] {
        [b, g, r, re, nir]
    }

    #[test]
    fn closed_form_values() {
        let (v, flag) = pixel_indices(px(0.05, 0.1, 0.1, 0.3, 0.8), INDEX_EPS);
        assert!(!flag);
        assert!((v[0] - 0.7 / (0.9 + 1e-6)).abs() < 1e-15);
        assert!((v[0] - 0.777777).abs() < 1e-6);
        assert!((v[3] - 1.5 * 0.7 / (1.4 + 1e-6)).abs() < 1e-15);
        assert!((v[3] - 0.749999).abs() < 1e-6);
        // NIR = R gives a zero NDVI
        let (v, _) = pixel_indices(px(0.1, 0.2, 0.3, 0.3, 0.3), INDEX_EPS);
        assert_eq!(v[0], 0.0);
    }

    #[test]
    fn evi_and_msavi_literature_forms() {
        let (b, g, r, nir) = (0.04, 0.08, 0.06, 0.5);
        let (v, _) = pixel_indices(px(b, g, r, 0.3, nir), INDEX_EPS);
        let evi = 2.5 * (nir - r) / (nir + 6.0 * r - 7.5 * b + 1.0 + 1e-6);
        assert!((v[2] - evi).abs() < 1e-15);
        let msavi =
            (2.0 * nir + 1.0 - ((2.0 * nir + 1.0f64).powi(2) - 8.0 * (nir - r)).sqrt()) / 2.0;
        assert!((v[4] - msavi).abs() < 1e-15);
    }

    #[test]
    fn evi_denominator_is_clamped_and_flagged() {
        // nir + 6r - 7.5b + 1 is about -7.5e-7 here
        let (v, flag) = pixel_indices(px(0.2 + 1e-7, 0.1, 0.0, 0.1, 0.5), INDEX_EPS);
        assert!(flag);
        assert!(v[2].is_finite());
    }

    #[test]
    fn non_finite_pixel_propagates_flagged() {
        let mut p = MultispectralPatch::new(1, 2, vec![0.1; 10]).unwrap();
        p.data[NIR * 2 + 1] = f32::NAN;
        let s = compute_indices(&p, INDEX_EPS);
        assert_eq!(s.flagged, vec![1]);
        assert!(s.channel(0)[1].is_nan());
        assert!(s.channel(0)[0].is_finite());
    }

    #[test]
    fn standardization_closed_forms() {
        let st = ChannelStats::fit([&[-1.0f32, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0][..]])
            .unwrap();
        assert_eq!(st.mu[0], 0.0);
        assert_eq!(st.sigma[0], 1.0);
        let c = ChannelStats::fit([&[2.5f32; 10][..]]).unwrap();
        assert_eq!(c.mu[0], 2.5);
        assert_eq!(c.sigma[0], 0.0);
        assert!(c.apply(&[2.5f32; 10]).iter().all(|&v| v == 0.0));
        let s = ChannelStats {
            mu: [1.0; 5],
            sigma: [2.0; 5],
        };
        let out = s.apply(&[3.0f32; 5]);
        assert!((out[0] as f64 - 2.0 / (2.0 + 1e-6)).abs() < 1e-7);
        assert!(out[0] < 1.0);
        assert!(ChannelStats::fit(std::iter::empty()).is_err());
    }

    #[test]
    fn mismatched_source_is_leakage() {
        let p = MultispectralPatch::new(2, 2, vec![0.2; 20]).unwrap();
        let stats = fit_standardization(&[&p], "cross_plot/train").unwrap();
        let stack = compute_indices(&p, INDEX_EPS);
        assert!(matches!(
            apply_standardization(&stack, &stats, "within_plot/train"),
            Err(CoreError::Leakage(_))
        ));
        let ok = apply_standardization(&stack, &stats, "cross_plot/train").unwrap();
        assert!(ok.standardized);
    }

    #[test]
    fn stats_text_round_trip_is_exact() {
        let stats = StandardizationStats {
            source: "within_plot/train".into(),
            indices: ChannelStats {
                mu: [0.1, 1.0 / 3.0, -2.5e-7, 0.7777777777777777, 1e300],
                sigma: [0.0, 0.2, std::f64::consts::PI, 1.0, 5e-324],
            },
            bands: ChannelStats {
                mu: [0.04, 0.08, 0.04, 0.28, 0.52],
                sigma: [0.1, 0.2, 0.3, 0.4, 0.5],
            },
        };
        let back = StandardizationStats::from_text(&stats.to_text()).unwrap();
        assert_eq!(back, stats);
        assert!(StandardizationStats::from_text("ndvi 0 1\n").is_err());
    }
}
