//! Dataset generation and manifest handling.
//!
//! A dataset is a directory of 16-bit PGM depth scans plus one JSON manifest
//! per split. Labels appear only on probe-split records.

mod scene;

pub use scene::{
    generate_scene, render_depth, CameraPose, Primitive, ShapeClass, SyntheticSceneConfig,
};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{read_pgm16, unproject, write_pgm16, CameraIntrinsics, PointCloud};

/// Which role a manifest's samples play.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Pretrain,
    ProbeTrain,
    ProbeTest,
}

impl SplitTag {
    pub fn is_probe(self) -> bool {
        matches!(self, SplitTag::ProbeTrain | SplitTag::ProbeTest)
    }

    pub fn file_name(self) -> &'static str {
        match self {
            SplitTag::Pretrain => "manifest_pretrain.json",
            SplitTag::ProbeTrain => "manifest_probe_train.json",
            SplitTag::ProbeTest => "manifest_probe_test.json",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub sample_id: u64,
    /// Path of the PGM file relative to the manifest's directory.
    pub depth_file: String,
    pub intrinsics: CameraIntrinsics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub split: SplitTag,
    /// Number of label classes for probe splits (0 for pretrain).
    pub n_classes: usize,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for record in &self.records {
            if !seen.insert(record.sample_id) {
                return Err(Error::Format(format!(
                    "duplicate sample id {}",
                    record.sample_id
                )));
            }
            match (self.split.is_probe(), record.label) {
                (false, Some(_)) => {
                    return Err(Error::Format(format!(
                        "pretrain sample {} carries a label",
                        record.sample_id
                    )))
                }
                (true, None) => {
                    return Err(Error::Format(format!(
                        "probe sample {} is unlabeled",
                        record.sample_id
                    )))
                }
                (true, Some(label)) if label >= self.n_classes => {
                    return Err(Error::Format(format!(
                        "sample {} label {} >= n_classes {}",
                        record.sample_id, label, self.n_classes
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        self.validate()?;
        fs::create_dir_all(dir)?;
        let path = dir.join(self.split.file_name());
        let json = serde_json::to_string_pretty(self).map_err(Error::from)?;
        fs::write(&path, json)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("manifest not found: {}", path.display()),
            )));
        }
        let json = fs::read_to_string(path)?;
        let manifest: DatasetManifest = serde_json::from_str(&json)
            .map_err(|e| Error::Format(format!("bad manifest {}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(manifest)
    }
}

/// Generates `n_scenes` scans into `out_dir/depth/` and writes the split
/// manifest. Scene RNG is keyed by `(seed, id_offset + index)`, so disjoint
/// splits drawn from one seed never share a scene.
pub fn build_dataset(
    config: &SyntheticSceneConfig,
    n_scenes: usize,
    seed: u64,
    id_offset: u64,
    split: SplitTag,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    config.validate()?;
    let depth_dir = out_dir.join("depth");
    fs::create_dir_all(&depth_dir)?;
    let mut records = Vec::with_capacity(n_scenes);
    for i in 0..n_scenes {
        let sample_id = id_offset + i as u64;
        let (map, label) = generate_scene(config, seed, sample_id)?;
        let file_name = format!("depth/scan_{sample_id:06}.pgm");
        write_pgm16(&out_dir.join(&file_name), &map)?;
        records.push(ManifestRecord {
            sample_id,
            depth_file: file_name,
            intrinsics: map.intrinsics,
            label: split.is_probe().then_some(label),
        });
    }
    let manifest = DatasetManifest {
        split,
        n_classes: if split.is_probe() {
            config.shape_classes.len()
        } else {
            0
        },
        records,
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

/// Loads the selected records and unprojects them to point clouds.
pub fn load_batch(
    manifest: &DatasetManifest,
    data_root: &Path,
    indices: &[usize],
) -> Result<Vec<PointCloud>> {
    indices
        .iter()
        .map(|&i| {
            let record = manifest.records.get(i).ok_or_else(|| {
                Error::Precondition(format!("index {i} out of {} records", manifest.len()))
            })?;
            load_record(record, data_root)
        })
        .collect()
}

/// Loads a single record's scan and unprojects it.
pub fn load_record(record: &ManifestRecord, data_root: &Path) -> Result<PointCloud> {
    let path = data_root.join(&record.depth_file);
    let map = read_pgm16(&path, record.intrinsics).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(
            io.kind(),
            format!("sample {}: {io}", record.sample_id),
        )),
        Error::Format(msg) => Error::Format(format!("sample {}: {msg}", record.sample_id)),
        other => other,
    })?;
    unproject(&map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn empty_dataset_builds_empty_manifest() {
        let dir = tempdir().unwrap();
        let manifest = build_dataset(
            &SyntheticSceneConfig::default(),
            0,
            1,
            0,
            SplitTag::Pretrain,
            dir.path(),
        )
        .unwrap();
        assert!(manifest.is_empty());
    }

    #[test]
    fn dataset_ids_are_unique_and_files_exist() {
        let dir = tempdir().unwrap();
        let manifest = build_dataset(
            &SyntheticSceneConfig::default(),
            10,
            2,
            100,
            SplitTag::ProbeTrain,
            dir.path(),
        )
        .unwrap();
        assert_eq!(manifest.len(), 10);
        let mut ids: Vec<u64> = manifest.records.iter().map(|r| r.sample_id).collect();
        ids.dedup();
        assert_eq!(ids.len(), 10);
        for record in &manifest.records {
            assert!(dir.path().join(&record.depth_file).exists());
            assert!(record.label.is_some());
        }
    }

    #[test]
    fn regeneration_with_same_seed_is_byte_identical() {
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        let config = SyntheticSceneConfig::default();
        let a = build_dataset(&config, 5, 3, 0, SplitTag::Pretrain, dir_a.path()).unwrap();
        let b = build_dataset(&config, 5, 3, 0, SplitTag::Pretrain, dir_b.path()).unwrap();
        assert_eq!(a, b);
        for record in &a.records {
            let bytes_a = std::fs::read(dir_a.path().join(&record.depth_file)).unwrap();
            let bytes_b = std::fs::read(dir_b.path().join(&record.depth_file)).unwrap();
            assert_eq!(bytes_a, bytes_b);
        }
    }

    #[test]
    fn load_batch_roundtrip_excludes_invalid_pixels() {
        let dir = tempdir().unwrap();
        let config = SyntheticSceneConfig::default();
        let manifest =
            build_dataset(&config, 3, 4, 0, SplitTag::Pretrain, dir.path()).unwrap();
        let clouds = load_batch(&manifest, dir.path(), &[0, 1, 2]).unwrap();
        for (record, cloud) in manifest.records.iter().zip(&clouds) {
            let map = read_pgm16(&dir.path().join(&record.depth_file), record.intrinsics)
                .unwrap();
            assert_eq!(cloud.len(), map.valid_pixels());
        }
    }

    #[test]
    fn corrupt_magic_is_a_format_error_with_sample_id() {
        let dir = tempdir().unwrap();
        let config = SyntheticSceneConfig::default();
        let manifest =
            build_dataset(&config, 1, 5, 0, SplitTag::Pretrain, dir.path()).unwrap();
        let path = dir.path().join(&manifest.records[0].depth_file);
        std::fs::write(&path, b"JUNK").unwrap();
        let err = load_batch(&manifest, dir.path(), &[0]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("sample 0"), "{msg}");
    }

    #[test]
    fn manifest_rejects_labeled_pretrain_records() {
        let manifest = DatasetManifest {
            split: SplitTag::Pretrain,
            n_classes: 0,
            records: vec![ManifestRecord {
                sample_id: 0,
                depth_file: "depth/x.pgm".into(),
                intrinsics: SyntheticSceneConfig::default().intrinsics(),
                label: Some(1),
            }],
        };
        assert!(manifest.validate().is_err());
    }

    #[test]
    fn manifest_missing_file_error_mentions_path() {
        let err = DatasetManifest::load(Path::new("/nonexistent/manifest.json")).unwrap_err();
        assert!(err.to_string().contains("manifest not found"));
    }
}
