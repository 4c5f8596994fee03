use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_png16, DataError, Phase, Sample, IMAGE_SIZE};
use crate::geometry::LandmarkSet;

pub const MANIFEST_SCHEMA_VERSION: &str = "1";

/// One JSON line of a manifest. `image` is relative to the manifest's
/// directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub schema_version: String,
    pub image: String,
    pub patient_id: String,
    pub phase: Phase,
    #[serde(default)]
    pub source_id: String,
    /// `[x, y]` pairs in canonical landmark order.
    pub landmarks: [[f64; 2]; 6],
}

impl ManifestRecord {
    pub fn new(image: String, sample: &Sample) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION.to_string(),
            image,
            patient_id: sample.patient_id.clone(),
            phase: sample.phase,
            source_id: sample.source_id.clone(),
            landmarks: sample.landmarks.to_pairs(),
        }
    }

    pub fn landmark_set(&self) -> LandmarkSet {
        LandmarkSet::from_pairs(self.landmarks)
    }

    /// Stable identifier used for ranking and reports.
    pub fn id(&self) -> &str {
        if self.source_id.is_empty() { &self.image } else { &self.source_id }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Directory relative image paths are resolved against.
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn new(root: PathBuf, records: Vec<ManifestRecord>) -> Self {
        Self { root, records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_path(&self, index: usize) -> PathBuf {
        self.root.join(&self.records[index].image)
    }

    pub fn load_sample(&self, index: usize) -> Result<Sample, DataError> {
        let r = &self.records[index];
        let image = load_png16(&self.image_path(index))?;
        let sample = Sample {
            image,
            landmarks: r.landmark_set(),
            patient_id: r.patient_id.clone(),
            phase: r.phase,
            source_id: r.source_id.clone(),
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn load_all(&self) -> Result<Vec<Sample>, DataError> {
        (0..self.len()).map(|i| self.load_sample(i)).collect()
    }

    /// Unique patient ids in sorted order.
    pub fn patients(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<&str> = self.records.iter().map(|r| r.patient_id.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// Checks that every image exists and every landmark lies inside the raster.
    pub fn verify(&self) -> Result<(), DataError> {
        for (i, r) in self.records.iter().enumerate() {
            let path = self.image_path(i);
            if !path.is_file() {
                return Err(DataError::Image { path: path.display().to_string(), message: "referenced image does not exist".into() });
            }
            for (index, p) in r.landmark_set().points.iter().enumerate() {
                if !(p.is_finite() && p.border_distance(IMAGE_SIZE, IMAGE_SIZE) >= 0.0) {
                    return Err(DataError::Margin { index, x: p.x, y: p.y });
                }
            }
        }
        Ok(())
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest, DataError> {
    let file = std::fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    let err = |line: usize, message: String| DataError::Manifest { path: path.display().to_string(), line, message };
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ManifestRecord = serde_json::from_str(&line).map_err(|e| err(i + 1, e.to_string()))?;
        if r.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(err(i + 1, format!("unsupported schema version {:?}, expected {MANIFEST_SCHEMA_VERSION:?}", r.schema_version)));
        }
        if !r.landmark_set().is_finite() {
            return Err(err(i + 1, "non-finite landmark coordinate".into()));
        }
        records.push(r);
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Manifest::new(root, records))
}

/// Writes `manifest` as JSON lines. Image paths are rewritten to stay valid
/// when the file lives outside the manifest's root.
pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<(), DataError> {
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let same_root = normalize(&dir) == normalize(&manifest.root);
    let file = std::fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in &manifest.records {
        let mut r = r.clone();
        if !same_root && Path::new(&r.image).is_relative() {
            let abs = normalize(&manifest.root).join(&r.image);
            r.image = abs.strip_prefix(normalize(&dir)).map(Path::to_path_buf).unwrap_or(abs).display().to_string();
        }
        let line = serde_json::to_string(&r).expect("manifest records serialize");
        writeln!(w, "{line}").map_err(|e| DataError::io(path, e))?;
    }
    w.flush().map_err(|e| DataError::io(path, e))
}

fn normalize(p: &Path) -> PathBuf {
    let p = if p.as_os_str().is_empty() { Path::new(".") } else { p };
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}
