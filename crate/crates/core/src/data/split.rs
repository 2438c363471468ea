//! Block-level train/val/test protocols and the leakage audit.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::patch::{Field, Year};
use crate::error::{io_err, CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Protocol {
    WithinPlot,
    CrossPlot,
    CrossYear,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [
        Protocol::WithinPlot,
        Protocol::CrossPlot,
        Protocol::CrossYear,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Protocol::WithinPlot => "within_plot",
            Protocol::CrossPlot => "cross_plot",
            Protocol::CrossYear => "cross_year",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                CoreError::Invalid(format!(
                    "unknown protocol `{s}` (within_plot, cross_plot, cross_year)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub fn name(&self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }
}

impl FromStr for Partition {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Partition::Train),
            "val" => Ok(Partition::Val),
            "test" => Ok(Partition::Test),
            _ => Err(CoreError::Invalid(format!("unknown partition `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockInfo {
    pub block_id: u32,
    pub field: Field,
    pub year: Year,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub block: BlockInfo,
    pub partition: Partition,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitManifest {
    pub protocol: Protocol,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl SplitManifest {
    pub fn blocks(&self, part: Partition) -> Vec<BlockInfo> {
        self.entries
            .iter()
            .filter(|e| e.partition == part)
            .map(|e| e.block)
            .collect()
    }

    /// Tag used to bind standardization statistics to this manifest's
    /// training split.
    pub fn train_tag(&self) -> String {
        format!("{}/train", self.protocol)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# protocol {}\n# seed {}\n", self.protocol, self.seed);
        for e in &self.entries {
            s.push_str(&format!(
                "{} {} {} {}\n",
                e.block.block_id,
                e.block.field,
                e.block.year,
                e.partition.name()
            ));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |reason: String| CoreError::Format {
            what: "manifest".into(),
            reason,
        };
        let mut protocol = None;
        let mut seed = None;
        let mut entries = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(rest) = line.strip_prefix('#') {
                let mut it = rest.split_whitespace();
                match (it.next(), it.next()) {
                    (Some("protocol"), Some(p)) => protocol = Some(p.parse()?),
                    (Some("seed"), Some(s)) => {
                        seed = Some(s.parse().map_err(|_| bad(format!("bad seed `{s}`")))?)
                    }
                    _ => {}
                }
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(bad(format!("malformed line `{line}`")));
            }
            entries.push(ManifestEntry {
                block: BlockInfo {
                    block_id: parts[0]
                        .parse()
                        .map_err(|_| bad(format!("bad block id `{}`", parts[0])))?,
                    field: parts[1].parse()?,
                    year: parts[2].parse()?,
                },
                partition: parts[3].parse()?,
            });
        }
        Ok(Self {
            protocol: protocol.ok_or_else(|| bad("missing `# protocol` header".into()))?,
            seed: seed.ok_or_else(|| bad("missing `# seed` header".into()))?,
            entries,
        })
    }

    /// SHA-256 of the manifest text, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }
}

fn split_counts(n: usize, ratios: &SplitRatios) -> (usize, usize) {
    let total = ratios.train + ratios.val + ratios.test;
    let test = ((ratios.test / total * n as f64).round() as usize)
        .max(1)
        .min(n.saturating_sub(1));
    let val = ((ratios.val / total * n as f64).round() as usize).min(n - test - 1);
    (test, val)
}

/// Shuffles within each stratum, then deals strata round-robin so every
/// partition draws from as many field-years as possible.
fn interleave(blocks: &[BlockInfo], rng: &mut ChaCha8Rng) -> Vec<BlockInfo> {
    let mut strata: BTreeMap<(Field, Year), Vec<BlockInfo>> = BTreeMap::new();
    for b in blocks {
        strata.entry((b.field, b.year)).or_default().push(*b);
    }
    let mut lists: Vec<Vec<BlockInfo>> = strata.into_values().collect();
    for l in &mut lists {
        l.sort();
        l.shuffle(rng);
    }
    let mut out = Vec::with_capacity(blocks.len());
    for i in 0..lists.iter().map(Vec::len).max().unwrap_or(0) {
        for l in &lists {
            if let Some(b) = l.get(i) {
                out.push(*b);
            }
        }
    }
    out
}

pub fn build_split(
    protocol: Protocol,
    inventory: &[BlockInfo],
    seed: u64,
    ratios: SplitRatios,
) -> Result<SplitManifest> {
    if ratios.train <= 0.0 || ratios.val < 0.0 || ratios.test <= 0.0 {
        return Err(CoreError::Config(
            "split ratios must be positive (val may be 0)".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    let mut assign = |blocks: &[BlockInfo], part: Partition| {
        entries.extend(blocks.iter().map(|&block| ManifestEntry {
            block,
            partition: part,
        }));
    };
    let unsat =
        |why: &str| CoreError::Invalid(format!("protocol {protocol} is unsatisfiable: {why}"));
    match protocol {
        Protocol::WithinPlot => {
            if inventory.len() < 3 {
                return Err(unsat("needs at least three blocks"));
            }
            let order = interleave(inventory, &mut rng);
            let (n_test, n_val) = split_counts(order.len(), &ratios);
            assign(&order[..n_test], Partition::Test);
            assign(&order[n_test..n_test + n_val], Partition::Val);
            assign(&order[n_test + n_val..], Partition::Train);
        }
        Protocol::CrossPlot | Protocol::CrossYear => {
            let is_test = |b: &BlockInfo| match protocol {
                Protocol::CrossPlot => b.field == Field::E8,
                _ => b.year == Year(3),
            };
            let test: Vec<BlockInfo> = inventory.iter().copied().filter(is_test).collect();
            let rest: Vec<BlockInfo> = inventory.iter().copied().filter(|b| !is_test(b)).collect();
            if test.is_empty() || rest.len() < 2 {
                return Err(unsat(
                    "inventory lacks a held-out domain or enough source blocks",
                ));
            }
            let order = interleave(&rest, &mut rng);
            let frac = ratios.val / (ratios.train + ratios.val);
            let n_val = ((frac * order.len() as f64).round() as usize).min(order.len() - 1);
            assign(&order[..n_val], Partition::Val);
            assign(&order[n_val..], Partition::Train);
            let mut test = test;
            test.sort();
            assign(&test, Partition::Test);
        }
    }
    let manifest = SplitManifest {
        protocol,
        seed,
        entries,
    };
    audit(&manifest)?;
    Ok(manifest)
}

/// Verifies that no block appears twice and that the protocol's domain
/// separation holds.
pub fn audit(m: &SplitManifest) -> Result<()> {
    let mut seen: HashMap<u32, Partition> = HashMap::new();
    for e in &m.entries {
        if let Some(prev) = seen.insert(e.block.block_id, e.partition) {
            return Err(CoreError::Leakage(format!(
                "block {} appears in both {} and {}",
                e.block.block_id,
                prev.name(),
                e.partition.name()
            )));
        }
    }
    let test = m.blocks(Partition::Test);
    if test.is_empty() {
        return Err(CoreError::Leakage("manifest has no test blocks".into()));
    }
    let source: Vec<BlockInfo> = m
        .entries
        .iter()
        .filter(|e| e.partition != Partition::Test)
        .map(|e| e.block)
        .collect();
    match m.protocol {
        Protocol::WithinPlot => {}
        Protocol::CrossPlot => {
            if let Some(b) = source
                .iter()
                .find(|b| test.iter().any(|t| t.field == b.field))
            {
                return Err(CoreError::Leakage(format!(
                    "cross_plot: training block {} shares field {} with the test set",
                    b.block_id, b.field
                )));
            }
        }
        Protocol::CrossYear => {
            if let Some(b) = source
                .iter()
                .find(|b| test.iter().any(|t| t.year == b.year))
            {
                return Err(CoreError::Leakage(format!(
                    "cross_year: training block {} shares year {} with the test set",
                    b.block_id, b.year
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn inventory(per: u32) -> Vec<BlockInfo> {
        let mut v = Vec::new();
        let mut id = 0;
        for field in Field::ALL {
            for year in Year::ALL {
                for _ in 0..per {
                    v.push(BlockInfo {
                        block_id: id,
                        field,
                        year,
                    });
                    id += 1;
                }
            }
        }
        v
    }

    #[test]
    fn within_plot_ratios_and_disjointness() {
        let m = build_split(
            Protocol::WithinPlot,
            &inventory(5),
            3,
            SplitRatios::default(),
        )
        .unwrap();
        assert_eq!(m.blocks(Partition::Test).len(), 8);
        assert_eq!(m.blocks(Partition::Val).len(), 4);
        assert_eq!(m.blocks(Partition::Train).len(), 28);
        let test = m.blocks(Partition::Test);
        let strata: std::collections::HashSet<_> = test.iter().map(|b| (b.field, b.year)).collect();
        assert_eq!(strata.len(), 8);
    }

    #[test]
    fn cross_protocols_hold_out_domains() {
        let inv = inventory(3);
        let m = build_split(Protocol::CrossPlot, &inv, 1, SplitRatios::default()).unwrap();
        assert!(m
            .blocks(Partition::Test)
            .iter()
            .all(|b| b.field == Field::E8));
        assert!(m
            .blocks(Partition::Train)
            .iter()
            .all(|b| b.field == Field::E2));
        let m = build_split(Protocol::CrossYear, &inv, 1, SplitRatios::default()).unwrap();
        assert!(m.blocks(Partition::Test).iter().all(|b| b.year == Year(3)));
        assert_eq!(m.blocks(Partition::Test).len(), 6);
        assert!(m.blocks(Partition::Train).iter().all(|b| b.year != Year(3)));
    }

    #[test]
    fn audit_detects_injected_duplicate() {
        for p in Protocol::ALL {
            let mut m = build_split(p, &inventory(2), 9, SplitRatios::default()).unwrap();
            let train = m.blocks(Partition::Train)[0];
            m.entries.push(ManifestEntry {
                block: train,
                partition: Partition::Test,
            });
            assert!(matches!(audit(&m), Err(CoreError::Leakage(_))), "{p}");
        }
    }

    #[test]
    fn unsatisfiable_inventory_errors() {
        let only_e2: Vec<BlockInfo> = inventory(2)
            .into_iter()
            .filter(|b| b.field == Field::E2)
            .collect();
        assert!(build_split(Protocol::CrossPlot, &only_e2, 0, SplitRatios::default()).is_err());
    }

    #[test]
    fn manifest_text_round_trip_and_hash() {
        let m = build_split(
            Protocol::CrossYear,
            &inventory(2),
            2026,
            SplitRatios::default(),
        )
        .unwrap();
        let back = SplitManifest::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.content_hash(), m.content_hash());
        assert_eq!(m.content_hash().len(), 64);
    }
}
