//! On-disk dataset layout.
//!
//! ```text
//! <root>/dataset.toml          generator settings
//! <root>/inventory.txt         "block_id field year" per block
//! <root>/patches/BBBBB_Q.bawp  reflectance, Q = quadrant 0..4
//! <root>/masks/BBBBB_Q.bawm    labels
//! <root>/splits/<protocol>.txt split manifests
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::patch::{read_mask, read_patch, write_mask, write_patch, Field, Year};
use crate::data::split::{build_split, BlockInfo, Protocol, SplitManifest, SplitRatios};
use crate::data::synth::{generate_field, Sample, ShiftParams};
use crate::error::{io_err, CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub seed: u64,
    pub patch_size: usize,
    pub blocks_per_field_year: usize,
}

/// Generates every field-year with its preset shift. Block ids run
/// consecutively over (field, year, index).
pub fn generate_dataset(info: &DatasetInfo) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    let mut next = 0u32;
    for field in Field::ALL {
        for year in Year::ALL {
            let shift = ShiftParams::preset(field, year);
            out.extend(generate_field(
                info.seed,
                field,
                year,
                &shift,
                info.blocks_per_field_year,
                info.patch_size,
                next,
            )?);
            next += info.blocks_per_field_year as u32;
        }
    }
    Ok(out)
}

/// Distinct blocks of a sample list, in first-seen order.
pub fn inventory(samples: &[Sample]) -> Vec<BlockInfo> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for s in samples {
        let b = BlockInfo {
            block_id: s.patch.block_id,
            field: s.patch.field,
            year: s.patch.year,
        };
        if seen.insert(b.block_id, ()).is_none() {
            out.push(b);
        }
    }
    out
}

fn sample_paths(root: &Path, block: u32, q: usize) -> (PathBuf, PathBuf) {
    (
        root.join("patches").join(format!("{block:05}_{q}.bawp")),
        root.join("masks").join(format!("{block:05}_{q}.bawm")),
    )
}

pub fn manifest_path(root: &Path, protocol: Protocol) -> PathBuf {
    root.join("splits").join(format!("{protocol}.txt"))
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub info: DatasetInfo,
    pub blocks: Vec<BlockInfo>,
}

impl Dataset {
    /// Writes samples, inventory and one manifest per requested protocol.
    /// Samples of a block must be stored in quadrant order.
    pub fn write(
        root: &Path,
        info: &DatasetInfo,
        samples: &[Sample],
        protocols: &[Protocol],
        ratios: SplitRatios,
    ) -> Result<Self> {
        for sub in ["patches", "masks", "splits"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(io_err(&d))?;
        }
        let text = toml::to_string(info).map_err(|e| CoreError::Config(e.to_string()))?;
        let p = root.join("dataset.toml");
        fs::write(&p, text).map_err(io_err(&p))?;

        let blocks = inventory(samples);
        let mut quadrant: BTreeMap<u32, usize> = BTreeMap::new();
        for s in samples {
            let q = quadrant.entry(s.patch.block_id).or_insert(0);
            let (pp, mp) = sample_paths(root, s.patch.block_id, *q);
            write_patch(&pp, &s.patch)?;
            write_mask(&mp, &s.mask)?;
            *q += 1;
        }
        let mut inv = String::from("# block_id field year\n");
        for b in &blocks {
            inv.push_str(&format!("{} {} {}\n", b.block_id, b.field, b.year));
        }
        let p = root.join("inventory.txt");
        fs::write(&p, inv).map_err(io_err(&p))?;

        for &protocol in protocols {
            let m = build_split(protocol, &blocks, info.seed, ratios)?;
            m.save(&manifest_path(root, protocol))?;
        }
        Ok(Self {
            root: root.to_path_buf(),
            info: info.clone(),
            blocks,
        })
    }

    pub fn open(root: &Path) -> Result<Self> {
        let p = root.join("dataset.toml");
        let text = fs::read_to_string(&p).map_err(io_err(&p))?;
        let info: DatasetInfo = toml::from_str(&text).map_err(|e| CoreError::Format {
            what: p.display().to_string(),
            reason: e.to_string(),
        })?;
        let p = root.join("inventory.txt");
        let text = fs::read_to_string(&p).map_err(io_err(&p))?;
        let mut blocks = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |r: String| CoreError::Format {
                what: format!("{}:{}", p.display(), n + 1),
                reason: r,
            };
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(bad(format!("expected `id field year`, got `{line}`")));
            }
            blocks.push(BlockInfo {
                block_id: parts[0]
                    .parse()
                    .map_err(|e| bad(format!("block id: {e}")))?,
                field: parts[1]
                    .parse()
                    .map_err(|e: CoreError| bad(e.to_string()))?,
                year: parts[2]
                    .parse()
                    .map_err(|e: CoreError| bad(e.to_string()))?,
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            info,
            blocks,
        })
    }

    pub fn manifest(&self, protocol: Protocol) -> Result<SplitManifest> {
        SplitManifest::load(&manifest_path(&self.root, protocol))
    }

    /// Loads the four patches of each listed block, in the given order, with
    /// block metadata taken from the inventory. Every missing block is named
    /// in the error.
    pub fn load_blocks(&self, ids: &[u32]) -> Result<Vec<Sample>> {
        let known: BTreeMap<u32, BlockInfo> =
            self.blocks.iter().map(|b| (b.block_id, *b)).collect();
        let missing: Vec<String> = ids
            .iter()
            .filter(|&&id| !known.contains_key(&id) || !sample_paths(&self.root, id, 0).0.exists())
            .map(|id| id.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(CoreError::Invalid(format!(
                "missing blocks: {}",
                missing.join(", ")
            )));
        }
        let mut out = Vec::with_capacity(4 * ids.len());
        for &id in ids {
            for q in 0..4 {
                let (pp, mp) = sample_paths(&self.root, id, q);
                let mut patch = read_patch(&pp)?;
                let b = known[&id];
                patch.block_id = id;
                patch.field = b.field;
                patch.year = b.year;
                let mask = read_mask(&mp)?;
                if (patch.height, patch.width) != (mask.height, mask.width) {
                    return Err(CoreError::Format {
                        what: mp.display().to_string(),
                        reason: "mask extent differs from its patch".into(),
                    });
                }
                out.push(Sample { patch, mask });
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::split::{audit, Partition};

    #[test]
    fn write_open_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let info = DatasetInfo {
            seed: 5,
            patch_size: 8,
            blocks_per_field_year: 2,
        };
        let samples = generate_dataset(&info).unwrap();
        assert_eq!(samples.len(), 2 * 4 * 2 * 4);
        let ds = Dataset::write(
            dir.path(),
            &info,
            &samples,
            &Protocol::ALL,
            SplitRatios::default(),
        )
        .unwrap();
        let back = Dataset::open(dir.path()).unwrap();
        assert_eq!(back.info, info);
        assert_eq!(back.blocks, ds.blocks);
        for p in Protocol::ALL {
            let m = back.manifest(p).unwrap();
            audit(&m).unwrap();
            let ids: Vec<u32> = m
                .blocks(Partition::Test)
                .iter()
                .map(|b| b.block_id)
                .collect();
            let loaded = back.load_blocks(&ids).unwrap();
            for s in &loaded {
                let orig = samples.iter().position(|o| o == s);
                assert!(orig.is_some());
            }
        }
        let err = back.load_blocks(&[3, 900, 901]).unwrap_err().to_string();
        assert!(err.contains("900, 901"), "{err}");
    }
}
