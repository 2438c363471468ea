//! Single-factor model variants trained under one shared configuration.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::dataset::Dataset;
use crate::error::{CoreError, Result};
use crate::eval::evaluate_protocol;
use crate::model::ModelConfig;
use crate::run::{train, RunConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub drop_vimb: bool,
    pub drop_rel_bias: bool,
    pub drop_slots: bool,
    pub drop_broadcast: bool,
    pub heads: Option<usize>,
    pub ssm_layers: Option<usize>,
    pub single_scale_decoder: bool,
}

impl Variant {
    pub fn named(name: &str) -> Self {
        Self {
            name: name.into(),
            ..Self::default()
        }
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut m = base.clone();
        if self.drop_vimb {
            m.use_vimb = false;
        }
        if self.drop_rel_bias {
            m.vimb.use_rel_bias = false;
        }
        if self.drop_slots {
            m.vimb.use_slots = false;
        }
        if self.drop_broadcast {
            m.vimb.use_broadcast = false;
        }
        if let Some(h) = self.heads {
            m.vimb.heads = h;
        }
        if let Some(l) = self.ssm_layers {
            m.vimb.ssm_layers = l;
        }
        if self.single_scale_decoder {
            m.single_scale_decoder = true;
        }
        m
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    #[serde(rename = "variant")]
    pub variants: Vec<Variant>,
}

impl AblationSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Self = toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        if s.variants.is_empty() {
            return Err(CoreError::Config(
                "ablation spec lists no [[variant]]".into(),
            ));
        }
        let mut names: Vec<&str> = s.variants.iter().map(|v| v.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(CoreError::Config(format!(
                "variant name `{}` is used twice",
                w[0]
            )));
        }
        if names
            .iter()
            .any(|n| n.is_empty() || n.contains(['/', '\\']))
        {
            return Err(CoreError::Config(
                "variant names must be non-empty and contain no path separators".into(),
            ));
        }
        Ok(s)
    }

    /// Checks every variant against `base` without training.
    pub fn validate(&self, base: &RunConfig) -> Result<()> {
        for v in &self.variants {
            let mut c = base.clone();
            c.model = v.apply(&base.model);
            c.validate()
                .map_err(|e| CoreError::Config(format!("variant `{}`: {e}", v.name)))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub miou: f64,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub weed_iou: f64,
    pub parameters: usize,
    pub manifest_hash: String,
}

/// Trains and evaluates each variant with the base configuration, seed and
/// manifest. Run directories go to `out/<variant>`.
pub fn run_ablation(
    base: &RunConfig,
    spec: &AblationSpec,
    ds: &Dataset,
    out: &Path,
) -> Result<Vec<AblationRow>> {
    spec.validate(base)?;
    let manifest = ds.manifest(base.protocol()?)?;
    let mut rows = Vec::with_capacity(spec.variants.len());
    for v in &spec.variants {
        let mut cfg = base.clone();
        cfg.model = v.apply(&base.model);
        log::info!("ablation variant `{}`", v.name);
        let (mut m, report) = train(&cfg, ds, &out.join(&v.name))?;
        let ev = evaluate_protocol(
            &mut m,
            ds,
            &manifest,
            cfg.eval.replicates,
            cfg.eval.bootstrap_seed,
        )?;
        let pooled = ev.pooled();
        rows.push(AblationRow {
            variant: v.name.clone(),
            miou: pooled.metrics.miou,
            ci_lo: pooled.ci.lo,
            ci_hi: pooled.ci.hi,
            weed_iou: pooled.metrics.iou[2],
            parameters: m.parameter_count(),
            manifest_hash: report.manifest_hash,
        });
    }
    Ok(rows)
}

pub const ABLATION_CSV_HEADER: &str = "variant,miou,ci_lo,ci_hi,iou_weed,parameters,manifest_hash";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut s = format!("{ABLATION_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.6},{},{},{:.6},{},{}",
            r.variant,
            r.miou,
            f(r.ci_lo),
            f(r.ci_hi),
            r.weed_iou,
            r.parameters,
            r.manifest_hash
        );
    }
    s
}

/// Fixed-width table for terminals.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let width = rows
        .iter()
        .map(|r| r.variant.len())
        .max()
        .unwrap_or(7)
        .max(7);
    let mut s = format!(
        "{:<width$}  {:>24}  {:>8}  {:>10}\n",
        "variant", "mIoU [95% CI]", "weed IoU", "params"
    );
    for r in rows {
        let ci = match (r.ci_lo, r.ci_hi) {
            (Some(lo), Some(hi)) => format!("{:.4} [{lo:.4}, {hi:.4}]", r.miou),
            _ => format!("{:.4}", r.miou),
        };
        let _ = writeln!(
            s,
            "{:<width$}  {ci:>24}  {:>8.4}  {:>10}",
            r.variant, r.weed_iou, r.parameters
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{parameter_count, Visa};
    use visa_tensor::ParamStore;

    fn params(cfg: &ModelConfig) -> usize {
        let mut store = ParamStore::<f32>::new();
        Visa::new(&mut store, cfg, 1).unwrap();
        parameter_count(&store)
    }

    #[test]
    fn spec_parses_all_toggles() {
        let s = AblationSpec::from_toml(
            r#"
            [[variant]]
            name = "full"
            [[variant]]
            name = "no_vimb"
            drop_vimb = true
            [[variant]]
            name = "h4"
            heads = 4
            ssm_layers = 0
            drop_rel_bias = true
            drop_slots = true
            drop_broadcast = true
            single_scale_decoder = true
            "#,
        )
        .unwrap();
        assert_eq!(s.variants.len(), 3);
        let m = s.variants[2].apply(&ModelConfig::default());
        assert_eq!((m.vimb.heads, m.vimb.ssm_layers), (4, 0));
        assert!(
            !m.vimb.use_rel_bias
                && !m.vimb.use_slots
                && !m.vimb.use_broadcast
                && m.single_scale_decoder
        );
        assert!(AblationSpec::from_toml("[[variant]]\nname = \"a\"\ndrop_vimbs = true").is_err());
        assert!(
            AblationSpec::from_toml("[[variant]]\nname = \"a\"\n[[variant]]\nname = \"a\"")
                .is_err()
        );
        assert!(AblationSpec::from_toml("").is_err());
    }

    #[test]
    fn parameter_counts_follow_toggles() {
        let base = ModelConfig::micro();
        let full = params(&base);
        assert!(
            params(
                &Variant {
                    drop_vimb: true,
                    ..Variant::named("x")
                }
                .apply(&base)
            ) < full
        );
        let mut wide = ModelConfig::micro();
        wide.vimb.d = 24;
        let h12 = params(
            &Variant {
                heads: Some(12),
                ..Variant::named("x")
            }
            .apply(&wide),
        );
        let h4 = params(
            &Variant {
                heads: Some(4),
                ..Variant::named("x")
            }
            .apply(&wide),
        );
        assert!(h12 >= h4);
        assert!(
            params(
                &Variant {
                    ssm_layers: Some(0),
                    ..Variant::named("x")
                }
                .apply(&base)
            ) < full
        );
    }

    #[test]
    fn invalid_variant_is_reported() {
        let spec = AblationSpec {
            variants: vec![Variant {
                heads: Some(3),
                ..Variant::named("h3")
            }],
        };
        let err = spec.validate(&RunConfig::micro()).unwrap_err().to_string();
        assert!(err.contains("h3"), "{err}");
    }
}
