use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VimbConfig {
    /// Token embedding width.
    pub d: usize,
    pub window: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub ssm_layers: usize,
    pub slots: usize,
    pub slot_iters: usize,
    pub ffn_mult: usize,
    pub use_rel_bias: bool,
    pub use_slots: bool,
    pub use_broadcast: bool,
}

impl Default for VimbConfig {
    fn default() -> Self {
        Self {
            d: 64,
            window: 8,
            heads: 8,
            encoder_layers: 2,
            ssm_layers: 2,
            slots: 6,
            slot_iters: 3,
            ffn_mult: 4,
            use_rel_bias: true,
            use_slots: true,
            use_broadcast: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrabConfig {
    pub widths: Vec<usize>,
    pub units_per_level: usize,
    pub se_reduction: usize,
    pub cbam_kernel: usize,
}

impl Default for SrabConfig {
    fn default() -> Self {
        Self {
            widths: vec![64, 128, 256],
            units_per_level: 2,
            se_reduction: 4,
            cbam_kernel: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channel width of both stream outputs and of the fusion block.
    pub features: usize,
    /// Without the index branch the fusion head sees the radiance stream only.
    pub use_vimb: bool,
    /// Skips the refinement stage of the index stream.
    pub single_scale_decoder: bool,
    /// Posterior temperature. Configured as `loss.tau` in run files.
    #[serde(skip)]
    pub tau: f64,
    pub vimb: VimbConfig,
    pub srab: SrabConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            features: 64,
            use_vimb: true,
            single_scale_decoder: false,
            tau: 1.0,
            vimb: VimbConfig::default(),
            srab: SrabConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Small configuration used by the finite-difference checks.
    pub fn micro() -> Self {
        Self {
            features: 8,
            vimb: VimbConfig {
                d: 8,
                window: 4,
                heads: 2,
                ssm_layers: 1,
                slots: 2,
                slot_iters: 2,
                ..VimbConfig::default()
            },
            srab: SrabConfig {
                widths: vec![8, 16, 32],
                ..SrabConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        let v = &self.vimb;
        if self.features == 0 {
            return bad("model.features must be positive".into());
        }
        if !(self.tau > 0.0) {
            return bad(format!("model.tau must be positive, got {}", self.tau));
        }
        if v.d == 0 || v.heads == 0 || !v.d.is_multiple_of(v.heads) {
            return bad(format!(
                "vimb.d = {} must be a positive multiple of vimb.heads = {}",
                v.d, v.heads
            ));
        }
        if v.window == 0 {
            return bad("vimb.window must be positive".into());
        }
        if v.slots == 0 {
            return bad("vimb.slots must be at least 1".into());
        }
        if v.slot_iters == 0 {
            return bad("vimb.slot_iters must be at least 1".into());
        }
        if v.ffn_mult == 0 {
            return bad("vimb.ffn_mult must be positive".into());
        }
        let s = &self.srab;
        if s.widths.is_empty() || s.widths.windows(2).any(|w| w[0] >= w[1]) || s.widths[0] == 0 {
            return bad(format!(
                "srab.widths {:?} must be positive and strictly increasing",
                s.widths
            ));
        }
        if s.cbam_kernel.is_multiple_of(2) {
            return bad(format!("srab.cbam_kernel = {} must be odd", s.cbam_kernel));
        }
        if s.units_per_level == 0 || s.se_reduction == 0 {
            return bad("srab.units_per_level and srab.se_reduction must be positive".into());
        }
        Ok(())
    }

    /// Checks that an `h x w` input fits the window grid and the encoder
    /// downsampling ladder.
    pub fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        let s = self.vimb.window;
        if self.use_vimb && (!h.is_multiple_of(s) || !w.is_multiple_of(s)) {
            return Err(CoreError::Config(format!(
                "window size s = {s} must divide H = {h} and W = {w}"
            )));
        }
        let f = 1usize << (self.srab.widths.len() - 1);
        if !h.is_multiple_of(f) || !w.is_multiple_of(f) {
            return Err(CoreError::Config(format!(
                "H = {h} and W = {w} must be divisible by {f}"
            )));
        }
        Ok(())
    }
}
