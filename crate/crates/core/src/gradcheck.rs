//! Finite-difference check of the full training objective at micro scale.

use visa_tensor::{
    check_gradients, GradCheckOptions, GradCheckReport, Graph, ParamStore, TensorError,
};

use crate::data::patch::{Field, Year};
use crate::data::synth::{generate_field, ShiftParams};
use crate::error::{CoreError, Result};
use crate::indices::fit_standardization;
use crate::loss::{total_loss, LossWeights, Targets};
use crate::model::{make_batch, Mode, ModelConfig, Visa};

pub const MICRO_EXTENT: usize = 16;
pub const MICRO_BATCH: usize = 2;

/// Checks every trainable parameter of the micro model (64-bit) against
/// central differences of the total loss on two synthetic 16 x 16 patches.
pub fn micro_gradcheck(seed: u64, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let cfg = ModelConfig::micro();
    let samples = generate_field(
        seed,
        Field::E2,
        Year(0),
        &ShiftParams::default(),
        1,
        MICRO_EXTENT,
        0,
    )?;
    let batch: Vec<_> = samples.iter().take(MICRO_BATCH).collect();
    let patches: Vec<_> = batch.iter().map(|s| &s.patch).collect();
    let stats = fit_standardization(&patches, "gradcheck")?;
    let b = make_batch::<f64>(&batch, &stats, "gradcheck")?;
    let targets = Targets::<f64>::new(&b.labels, b.len(), b.height, b.width)?;
    let weights = LossWeights {
        class_weights: [1.0, 1.5, 2.0],
        ..LossWeights::default()
    };
    let mut store = ParamStore::<f64>::new();
    let model = Visa::new(&mut store, &cfg, seed)?;
    let wrap = |e: CoreError| TensorError::Invalid {
        op: "total loss",
        reason: e.to_string(),
    };
    let report = check_gradients(
        &mut store,
        |g: &mut Graph<'_, f64>| {
            let r = g.input(b.raw.clone());
            let i = g.input(b.idx.clone());
            let out = model.forward(g, r, i, Mode::Train).map_err(wrap)?;
            let (loss, _) =
                total_loss(g, out.posteriors, out.aux_logits, &targets, &weights).map_err(wrap)?;
            Ok(loss)
        },
        opts,
    )
    .map_err(|e| CoreError::Invalid(format!("gradient check: {e}")))?;
    Ok(report)
}

/// Step and error floor at which central-difference round-off on the
/// micro loss (about 3e-10 absolute) stays well below the tolerance.
pub fn micro_options(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        step: 1e-5,
        samples_per_param: 8,
        floor: 1e-5,
        seed,
    }
}
