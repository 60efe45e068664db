//! LTDS v1 dataset files.
//!
//! A JSON manifest at `path` describes the splits; the raw data lives in
//! `path.bin`: every split's images as little-endian `f32` (`[n, H, W, C]`,
//! splits in manifest order), followed by every split's labels as
//! little-endian `u32`, again in manifest order. `checksum` is the CRC32 of
//! the whole blob.

use std::path::{Path, PathBuf};

use ltlab_core::data::{LabeledDataset, Split, SplitSet};
use ltlab_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, Result};
use crate::fsio;

pub const LTDS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub name: String,
    pub num_samples: usize,
    /// `[H, W, C]`
    pub image_shape: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub num_classes: usize,
    pub splits: Vec<SplitEntry>,
    /// Per-split class counts, parallel to `splits`.
    pub counts: Vec<Vec<usize>>,
    pub checksum: u32,
}

pub fn blob_path(path: &Path) -> PathBuf {
    fsio::with_suffix(path, ".bin")
}

/// Write the given splits; fails if any pixel is not exactly representable as `f32`.
pub fn write_dataset(splits: &[&LabeledDataset], path: &Path) -> Result<Manifest> {
    let Some(first) = splits.first() else {
        return Err(format_err(path, "no splits to write"));
    };
    let num_classes = first.num_classes;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(splits.len());
    for ds in splits {
        if ds.num_classes != num_classes {
            return Err(format_err(path, "splits disagree on the class count"));
        }
        for &v in ds.images.data() {
            let f = v as f32;
            if f64::from(f) != v {
                return Err(format_err(
                    path,
                    format!("{} split: pixel {v} is not exactly representable as f32", ds.split.as_str()),
                ));
            }
            blob.extend_from_slice(&f.to_le_bytes());
        }
        entries.push(SplitEntry {
            name: ds.split.as_str().to_owned(),
            num_samples: ds.len(),
            image_shape: ds.image_shape(),
        });
    }
    for ds in splits {
        for &y in &ds.labels {
            let y = u32::try_from(y).map_err(|_| format_err(path, "label exceeds u32"))?;
            blob.extend_from_slice(&y.to_le_bytes());
        }
    }
    let manifest = Manifest {
        version: LTDS_VERSION,
        num_classes,
        splits: entries,
        counts: splits.iter().map(|d| d.class_counts()).collect(),
        checksum: crc32fast::hash(&blob),
    };
    fsio::atomic_write(&blob_path(path), &blob)?;
    fsio::write_json(path, &manifest)?;
    Ok(manifest)
}

pub fn write_split_set(set: &SplitSet, path: &Path) -> Result<Manifest> {
    write_dataset(&[&set.train, &set.val, &set.test], path)
}

/// Read and validate every split of an LTDS file.
pub fn read_dataset(path: &Path) -> Result<Vec<LabeledDataset>> {
    let manifest: Manifest = fsio::read_json(path)?;
    let blob_file = blob_path(path);
    let blob = fsio::read_bytes(&blob_file)?;
    decode(&manifest, &blob, path)
}

fn decode(m: &Manifest, blob: &[u8], path: &Path) -> Result<Vec<LabeledDataset>> {
    if m.version != LTDS_VERSION {
        return Err(format_err(path, format!("unsupported LTDS version {}", m.version)));
    }
    if m.counts.len() != m.splits.len() {
        return Err(format_err(path, "counts do not match the split list"));
    }
    let mut pixels = 0usize;
    let mut samples = 0usize;
    for s in &m.splits {
        let per = s.image_shape.iter().product::<usize>();
        pixels = pixels
            .checked_add(s.num_samples.checked_mul(per).ok_or_else(|| format_err(path, "split too large"))?)
            .ok_or_else(|| format_err(path, "split too large"))?;
        samples += s.num_samples;
    }
    let expect = (pixels + samples) * 4;
    if blob.len() != expect {
        return Err(format_err(
            path,
            format!("blob holds {} bytes, manifest describes {expect}", blob.len()),
        ));
    }
    if crc32fast::hash(blob) != m.checksum {
        return Err(format_err(path, "checksum mismatch"));
    }
    let (image_bytes, label_bytes) = blob.split_at(pixels * 4);
    let mut images = image_bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
    let mut labels = label_bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize);
    let mut out = Vec::with_capacity(m.splits.len());
    for (s, counts) in m.splits.iter().zip(&m.counts) {
        let split = Split::parse(&s.name).ok_or_else(|| format_err(path, format!("unknown split {:?}", s.name)))?;
        let [h, w, c] = s.image_shape;
        let data: Vec<f64> = images.by_ref().take(s.num_samples * h * w * c).collect();
        let ys: Vec<usize> = labels.by_ref().take(s.num_samples).collect();
        let tensor = Tensor::new(vec![s.num_samples, h, w, c], data).map_err(|e| format_err(path, e.to_string()))?;
        let ds = LabeledDataset::new(tensor, ys, m.num_classes, split).map_err(|e| format_err(path, e.to_string()))?;
        if &ds.class_counts() != counts {
            return Err(format_err(path, format!("{} split: class counts disagree with labels", s.name)));
        }
        out.push(ds);
    }
    Ok(out)
}

/// Read a file holding train, val and test splits.
pub fn read_split_set(path: &Path) -> Result<SplitSet> {
    let mut splits = read_dataset(path)?;
    let mut take = |want: Split| {
        splits
            .iter()
            .position(|d| d.split == want)
            .map(|i| splits.swap_remove(i))
            .ok_or_else(|| format_err(path, format!("missing {} split", want.as_str())))
    };
    Ok(SplitSet {
        train: take(Split::Train)?,
        val: take(Split::Val)?,
        test: take(Split::Test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ltlab_core::data::{synth_longtail, LongTailProfile, SynthParams};
    use ltlab_core::Rng;

    fn small() -> SplitSet {
        let profile = LongTailProfile {
            num_classes: 3,
            n_max: 20,
            imbalance_factor: 4.0,
        };
        let params = SynthParams {
            image_size: 4,
            ..SynthParams::default()
        };
        synth_longtail(&profile, &params, &Rng::new(0)).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ltds");
        let set = small();
        let m = write_split_set(&set, &p).unwrap();
        assert_eq!(m.counts[0], vec![20, 10, 5]);
        let back = read_split_set(&p).unwrap();
        assert_eq!(back, set);
        for (a, b) in back.train.images.data().iter().zip(set.train.images.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ltds");
        write_split_set(&small(), &p).unwrap();
        let bin = blob_path(&p);
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 3]).unwrap();
        let err = read_dataset(&p).unwrap_err().to_string();
        assert!(err.contains("blob holds"), "{err}");
    }

    #[test]
    fn manifest_shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ltds");
        let mut m = write_split_set(&small(), &p).unwrap();
        m.splits[0].num_samples += 1;
        fsio::write_json(&p, &m).unwrap();
        assert!(read_dataset(&p).unwrap_err().to_string().contains("manifest describes"));
    }

    #[test]
    fn corrupted_blob_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ltds");
        write_split_set(&small(), &p).unwrap();
        let bin = blob_path(&p);
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes[10] ^= 1;
        std::fs::write(&bin, &bytes).unwrap();
        assert!(read_dataset(&p).unwrap_err().to_string().contains("checksum"));
    }

    #[test]
    fn lossy_pixels_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let mut set = small();
        set.train.images.data_mut()[0] = 0.1;
        assert!(write_split_set(&set, &dir.path().join("d.ltds")).is_err());
    }
}
