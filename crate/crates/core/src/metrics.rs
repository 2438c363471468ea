//! Confusion matrices, segmentation metrics and block-bootstrap intervals.

use std::fmt::Write as _;

use log::warn;
use num_traits::{FromPrimitive, Num};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::patch::{IGNORE, NUM_CLASSES};
use crate::error::{CoreError, Result};

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["other", "crop", "weed"];
pub const DEFAULT_REPLICATES: usize = 10_000;

/// Rows are reference classes, columns predicted classes. Ignore pixels are
/// never counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        Self { counts }
    }

    /// Accumulates reference/prediction pairs, skipping ignore references.
    pub fn add_labels(&mut self, reference: &[u8], predicted: &[u8]) -> Result<()> {
        if reference.len() != predicted.len() {
            return Err(CoreError::Invalid(format!(
                "reference has {} pixels, prediction {}",
                reference.len(),
                predicted.len()
            )));
        }
        for (&r, &p) in reference.iter().zip(predicted) {
            if r == IGNORE {
                continue;
            }
            if r as usize >= NUM_CLASSES || p as usize >= NUM_CLASSES {
                return Err(CoreError::Invalid(format!(
                    "label pair ({r}, {p}) outside the class range"
                )));
            }
            self.counts[r as usize][p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, o: &ConfusionMatrix) {
        for (row, orow) in self.counts.iter_mut().zip(&o.counts) {
            for (a, b) in row.iter_mut().zip(orow) {
                *a += b;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|c| self.counts[c][c]).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsOf<N> {
    pub iou: [N; NUM_CLASSES],
    /// Classes with no reference pixels. Their IoU is 0: either the union is
    /// empty or every pixel predicted as the class is a false positive.
    pub absent: [bool; NUM_CLASSES],
    pub miou: N,
    pub micro_p: N,
    pub micro_r: N,
    pub micro_f1: N,
    pub oa: N,
    pub kappa: N,
}

pub type Metrics = MetricsOf<f64>;

/// Metric set in any exact or floating number type.
pub fn metrics_in<N>(cm: &ConfusionMatrix) -> Result<MetricsOf<N>>
where
    N: Num + Clone + FromPrimitive,
{
    let total = cm.total();
    if total == 0 {
        return Err(CoreError::Invalid("empty confusion matrix".into()));
    }
    let n = |v: u64| N::from_u64(v).expect("count fits the number type");
    let k = NUM_CLASSES;
    let row: Vec<u64> = (0..k).map(|c| cm.counts[c].iter().sum()).collect();
    let col: Vec<u64> = (0..k)
        .map(|c| (0..k).map(|r| cm.counts[r][c]).sum())
        .collect();
    let absent: [bool; NUM_CLASSES] = std::array::from_fn(|c| row[c] == 0);
    let iou: [N; NUM_CLASSES] = std::array::from_fn(|c| {
        let tp = cm.counts[c][c];
        let union = row[c] + col[c] - tp;
        if union == 0 {
            N::zero()
        } else {
            n(tp) / n(union)
        }
    });
    let miou = iou.iter().cloned().fold(N::zero(), |a, b| a + b) / n(k as u64);
    let tp: u64 = cm.trace();
    let fp: u64 = (0..k).map(|c| col[c] - cm.counts[c][c]).sum();
    let fn_: u64 = (0..k).map(|c| row[c] - cm.counts[c][c]).sum();
    let micro_p = n(tp) / n(tp + fp);
    let micro_r = n(tp) / n(tp + fn_);
    let micro_f1 = if tp == 0 {
        N::zero()
    } else {
        let two = n(2);
        two.clone() * micro_p.clone() * micro_r.clone() / (micro_p.clone() + micro_r.clone())
    };
    let oa = n(tp) / n(total);
    let tot2 = n(total) * n(total);
    let pe = (0..k)
        .map(|c| n(row[c]) * n(col[c]))
        .fold(N::zero(), |a, b| a + b)
        / tot2;
    let kappa = if pe == N::one() {
        // All mass on a single diagonal cell.
        N::one()
    } else {
        (oa.clone() - pe.clone()) / (N::one() - pe)
    };
    Ok(MetricsOf {
        iou,
        absent,
        miou,
        micro_p,
        micro_r,
        micro_f1,
        oa,
        kappa,
    })
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    metrics_in::<f64>(cm)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockResult {
    pub block_id: u32,
    pub cm: ConfusionMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapCi {
    pub point: f64,
    /// `None` when fewer than two blocks were available.
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub replicates: usize,
}

/// Nearest-rank percentile of sorted values: the value of rank
/// `ceil(p / 100 * n)`, at least 1.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil().max(1.0) as usize;
    sorted[rank.min(n) - 1]
}

/// Replicate mIoU values of a stratified block bootstrap: each replicate
/// resamples the blocks of every stratum with replacement and sums all
/// drawn matrices.
pub fn bootstrap_replicates(
    strata: &[&[BlockResult]],
    replicates: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(replicates);
    for _ in 0..replicates {
        let mut cm = ConfusionMatrix::default();
        for s in strata {
            for _ in 0..s.len() {
                cm.merge(&s[rng.random_range(0..s.len())].cm);
            }
        }
        out.push(metrics(&cm)?.miou);
    }
    Ok(out)
}

/// Point mIoU from the pooled matrices plus a 95% percentile interval.
/// With fewer than two blocks in every stratum the interval is undefined
/// and only the point is returned, with a warning.
pub fn stratified_bootstrap(
    strata: &[&[BlockResult]],
    replicates: usize,
    seed: u64,
) -> Result<BootstrapCi> {
    let mut pooled = ConfusionMatrix::default();
    for b in strata.iter().flat_map(|s| s.iter()) {
        pooled.merge(&b.cm);
    }
    let point = metrics(&pooled)?.miou;
    if strata.iter().all(|s| s.len() < 2) || replicates == 0 {
        warn!(
            "fewer than two blocks per stratum; reporting the point estimate without an interval"
        );
        return Ok(BootstrapCi {
            point,
            lo: None,
            hi: None,
            replicates: 0,
        });
    }
    let mut values = bootstrap_replicates(strata, replicates, seed)?;
    values.sort_by(f64::total_cmp);
    Ok(BootstrapCi {
        point,
        lo: Some(nearest_rank(&values, 2.5)),
        hi: Some(nearest_rank(&values, 97.5)),
        replicates,
    })
}

pub fn block_bootstrap(
    results: &[BlockResult],
    replicates: usize,
    seed: u64,
) -> Result<BootstrapCi> {
    stratified_bootstrap(&[results], replicates, seed)
}

/// One row of the evaluation table.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub protocol: String,
    pub year: String,
    pub field: String,
    pub metrics: Metrics,
    pub ci: BootstrapCi,
}

pub const CSV_HEADER: &str =
    "protocol,year,field,miou,ci_lo,ci_hi,iou_other,iou_crop,iou_weed,micro_p,micro_r,micro_f1,oa,kappa";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.protocol,
            r.year,
            r.field,
            m.miou,
            opt(r.ci.lo),
            opt(r.ci.hi),
            m.iou[0],
            m.iou[1],
            m.iou[2],
            m.micro_p,
            m.micro_r,
            m.micro_f1,
            m.oa,
            m.kappa
        );
    }
    s
}
