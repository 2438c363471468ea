//! Block-level evaluation of a split's test partition.

use std::collections::BTreeMap;

use crate::data::dataset::Dataset;
use crate::data::patch::{Field, LabelMask, MultispectralPatch, Year, BANDS};
use crate::data::split::{audit, BlockInfo, Partition, SplitManifest};
use crate::data::synth::assemble_block;
use crate::error::{CoreError, Result};
use crate::metrics::{
    block_bootstrap, metrics, stratified_bootstrap, BlockResult, ConfusionMatrix, MetricsRow,
};
use crate::run::TrainedModel;
use crate::window::{sliding_window, SlidingOutput};

/// Anything that labels a whole block image.
pub trait BlockPredictor {
    fn predict(&mut self, block: &BlockInfo, image: &MultispectralPatch) -> Result<Vec<u8>>;
}

impl TrainedModel {
    pub fn window(&self) -> (usize, usize) {
        let w = self.run.eval.window.unwrap_or(self.patch_size);
        (w, self.run.eval.stride.unwrap_or((w / 2).max(1)))
    }

    /// Sliding-window inference over an image of any extent.
    pub fn infer(&self, image: &MultispectralPatch) -> Result<SlidingOutput> {
        let (win, stride) = self.window();
        sliding_window(
            &image.data,
            BANDS,
            image.height,
            image.width,
            win,
            stride,
            self.model.cfg.tau,
            |crops| {
                let patches = crops
                    .iter()
                    .map(|c| MultispectralPatch::new(win, win, c.clone()))
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<&MultispectralPatch> = patches.iter().collect();
                self.logits(&refs, 8)
            },
        )
    }
}

impl BlockPredictor for TrainedModel {
    fn predict(&mut self, _block: &BlockInfo, image: &MultispectralPatch) -> Result<Vec<u8>> {
        Ok(self.infer(image)?.labels)
    }
}

impl<F> BlockPredictor for F
where
    F: FnMut(&BlockInfo, &MultispectralPatch) -> Result<Vec<u8>>,
{
    fn predict(&mut self, block: &BlockInfo, image: &MultispectralPatch) -> Result<Vec<u8>> {
        self(block, image)
    }
}

#[derive(Clone, Debug)]
pub struct ProtocolEval {
    /// One row per (year, field) stratum, then the pooled row.
    pub rows: Vec<MetricsRow>,
    pub blocks: Vec<(BlockInfo, BlockResult)>,
}

impl ProtocolEval {
    pub fn pooled(&self) -> &MetricsRow {
        self.rows.last().expect("at least the pooled row")
    }
}

/// Whole test blocks of a manifest, reassembled from their patches.
pub fn load_test_blocks(
    ds: &Dataset,
    manifest: &SplitManifest,
) -> Result<Vec<(BlockInfo, MultispectralPatch, LabelMask)>> {
    let blocks = manifest.blocks(Partition::Test);
    let ids: Vec<u32> = blocks.iter().map(|b| b.block_id).collect();
    let samples = ds.load_blocks(&ids)?;
    let mut out = Vec::with_capacity(blocks.len());
    for (b, quad) in blocks.iter().zip(samples.chunks(4)) {
        let refs: Vec<_> = quad.iter().collect();
        let (image, mask) = assemble_block(&refs)?;
        out.push((*b, image, mask));
    }
    Ok(out)
}

/// Evaluates `predictor` on every test block and reports per-stratum and
/// pooled metrics with block-bootstrap intervals. Stratum rows resample
/// within their stratum; the pooled row resamples all test blocks.
pub fn evaluate_protocol(
    predictor: &mut dyn BlockPredictor,
    ds: &Dataset,
    manifest: &SplitManifest,
    replicates: usize,
    seed: u64,
) -> Result<ProtocolEval> {
    audit(manifest)?;
    let mut blocks = Vec::new();
    for (info, image, mask) in load_test_blocks(ds, manifest)? {
        let pred = predictor.predict(&info, &image)?;
        if pred.len() != mask.codes.len() {
            return Err(CoreError::Invalid(format!(
                "prediction for block {} has {} pixels, expected {}",
                info.block_id,
                pred.len(),
                mask.codes.len()
            )));
        }
        let mut cm = ConfusionMatrix::default();
        cm.add_labels(&mask.codes, &pred)?;
        blocks.push((
            info,
            BlockResult {
                block_id: info.block_id,
                cm,
            },
        ));
    }
    summarize(&manifest.protocol.to_string(), &blocks, replicates, seed)
        .map(|rows| ProtocolEval { rows, blocks })
}

/// Metric rows for per-block results grouped by (year, field).
pub fn summarize(
    protocol: &str,
    blocks: &[(BlockInfo, BlockResult)],
    replicates: usize,
    seed: u64,
) -> Result<Vec<MetricsRow>> {
    let mut strata: BTreeMap<(Year, Field), Vec<BlockResult>> = BTreeMap::new();
    for (b, r) in blocks {
        strata.entry((b.year, b.field)).or_default().push(*r);
    }
    let mut rows = Vec::with_capacity(strata.len() + 1);
    for ((year, field), rs) in &strata {
        let mut cm = ConfusionMatrix::default();
        rs.iter().for_each(|r| cm.merge(&r.cm));
        rows.push(MetricsRow {
            protocol: protocol.to_string(),
            year: year.to_string(),
            field: field.to_string(),
            metrics: metrics(&cm)?,
            ci: stratified_bootstrap(&[rs], replicates, seed)?,
        });
    }
    let mut cm = ConfusionMatrix::default();
    blocks.iter().for_each(|(_, r)| cm.merge(&r.cm));
    let all: Vec<BlockResult> = blocks.iter().map(|(_, r)| *r).collect();
    rows.push(MetricsRow {
        protocol: protocol.to_string(),
        year: "all".into(),
        field: "all".into(),
        metrics: metrics(&cm)?,
        ci: block_bootstrap(&all, replicates, seed)?,
    });
    Ok(rows)
}
