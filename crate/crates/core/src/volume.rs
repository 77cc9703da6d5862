//! Volumes, label maps, training samples and dataset manifests.
//!
//! Every grid uses the same flat layout: `index = x + nx * (y + ny * z)`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container::{self, Dtype, Header, Kind};
use crate::error::{ensure, Error, Result};

/// Grid extent `(nx, ny, nz)`.
pub type Shape = [usize; 3];

pub fn voxel_count(shape: Shape) -> usize {
    shape.iter().product()
}

#[inline]
pub fn flat_index(shape: Shape, x: usize, y: usize, z: usize) -> usize {
    x + shape[0] * (y + shape[1] * z)
}

#[inline]
pub fn coords(shape: Shape, index: usize) -> [usize; 3] {
    let x = index % shape[0];
    let rest = index / shape[0];
    [x, rest % shape[1], rest / shape[1]]
}

fn check_shape(shape: Shape) -> Result<()> {
    ensure!(
        shape.iter().all(|&n| n > 0),
        Validation,
        "shape {shape:?} has a zero dimension"
    );
    Ok(())
}

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    ensure!(
        spacing.iter().all(|&s| s.is_finite() && s > 0.0),
        Validation,
        "spacing {spacing:?} must be finite and strictly positive"
    );
    Ok(())
}

/// Scalar intensity grid with physical voxel spacing in millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: Shape,
    spacing: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: Shape, spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        check_shape(shape)?;
        check_spacing(spacing)?;
        ensure!(
            data.len() == voxel_count(shape),
            Validation,
            "data holds {} values, shape {shape:?} needs {}",
            data.len(),
            voxel_count(shape)
        );
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite intensity {} at voxel {i}",
                data[i]
            )));
        }
        Ok(Volume { shape, spacing, data })
    }

    pub fn filled(shape: Shape, spacing: [f64; 3], value: f32) -> Result<Self> {
        Self::new(shape, spacing, vec![value; voxel_count(shape)])
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[flat_index(self.shape, x, y, z)]
    }
}

/// Per-voxel hard labels in `0..classes`; class 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    shape: Shape,
    classes: usize,
    labels: Vec<u8>,
}

impl SegmentationMask {
    pub fn new(shape: Shape, classes: usize, labels: Vec<u8>) -> Result<Self> {
        check_shape(shape)?;
        ensure!(
            (2..=256).contains(&classes),
            Validation,
            "class count {classes} outside 2..=256"
        );
        ensure!(
            labels.len() == voxel_count(shape),
            Validation,
            "mask holds {} labels, shape {shape:?} needs {}",
            labels.len(),
            voxel_count(shape)
        );
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Validation(format!(
                "label {bad} is not below class count {classes}"
            )));
        }
        Ok(SegmentationMask { shape, classes, labels })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[flat_index(self.shape, x, y, z)]
    }

    /// One-hot expansion, class-major: `out[c * n + v]`.
    pub fn one_hot(&self) -> Vec<f64> {
        let n = self.labels.len();
        let mut out = vec![0.0; n * self.classes];
        for (v, &l) in self.labels.iter().enumerate() {
            out[l as usize * n + v] = 1.0;
        }
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn is_foreground(&self, index: usize) -> bool {
        self.labels[index] != 0
    }
}

/// Image, labels and 1-based domain index of one training subject.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSample {
    pub image: Volume,
    pub mask: SegmentationMask,
    pub domain: usize,
    pub id: String,
}

impl DomainSample {
    pub fn new(image: Volume, mask: SegmentationMask, domain: usize, id: impl Into<String>) -> Result<Self> {
        ensure!(
            image.shape() == mask.shape(),
            Validation,
            "image shape {:?} differs from mask shape {:?}",
            image.shape(),
            mask.shape()
        );
        ensure!(domain >= 1, Validation, "domain indices start at 1");
        Ok(DomainSample { image, mask, domain, id: id.into() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub labels: PathBuf,
    pub domain: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub description: String,
    pub seed: u64,
}

/// JSON index of a dataset on disk. Paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub samples: Vec<ManifestEntry>,
    pub domains: usize,
    pub classes: usize,
    pub provenance: Provenance,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.domains >= 1, Validation, "manifest needs at least one domain");
        ensure!(self.classes >= 2, Validation, "manifest needs at least two classes");
        for s in &self.samples {
            ensure!(
                (1..=self.domains).contains(&s.domain),
                Validation,
                "sample {} has domain {} outside 1..={}",
                s.id,
                s.domain,
                self.domains
            );
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Validation(format!("manifest {}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Loads every sample, resolving paths against `root`.
    pub fn load_samples(&self, root: &Path) -> Result<Vec<DomainSample>> {
        self.samples
            .iter()
            .map(|entry| {
                let image = load_volume(&root.join(&entry.image))?;
                let mask = load_mask(&root.join(&entry.labels))?;
                ensure!(
                    mask.classes() == self.classes,
                    Validation,
                    "sample {} has {} classes, manifest declares {}",
                    entry.id,
                    mask.classes(),
                    self.classes
                );
                DomainSample::new(image, mask, entry.domain, entry.id.clone())
            })
            .collect()
    }
}

pub fn encode_volume(volume: &Volume) -> Result<Vec<u8>> {
    let mut header = Header::new(Kind::Intensity, Dtype::F32le);
    header.shape = Some(volume.shape);
    header.spacing = Some(volume.spacing);
    container::encode(&header, &container::f32_to_bytes(&volume.data))
}

pub fn save_volume(volume: &Volume, path: &Path) -> Result<()> {
    // Re-validate so a hand-built or mutated volume never reaches disk.
    let checked = Volume::new(volume.shape, volume.spacing, volume.data.clone())?;
    std::fs::write(path, encode_volume(&checked)?)?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let (header, payload) = container::read(path)?;
    ensure!(
        header.kind == Kind::Intensity && header.dtype == Dtype::F32le,
        Format,
        "{} is not an f32 intensity volume",
        path.display()
    );
    let shape = header.shape.ok_or_else(|| Error::Format("missing shape".into()))?;
    let spacing = header.spacing.ok_or_else(|| Error::Format("missing spacing".into()))?;
    Volume::new(shape, spacing, container::bytes_to_f32(&payload))
}

pub fn save_mask(mask: &SegmentationMask, spacing: [f64; 3], path: &Path) -> Result<()> {
    check_spacing(spacing)?;
    let mut header = Header::new(Kind::Labels, Dtype::U8);
    header.shape = Some(mask.shape);
    header.spacing = Some(spacing);
    header.classes = Some(mask.classes);
    container::write(path, &header, &mask.labels)
}

pub fn load_mask(path: &Path) -> Result<SegmentationMask> {
    let (header, payload) = container::read(path)?;
    ensure!(
        header.kind == Kind::Labels && header.dtype == Dtype::U8,
        Format,
        "{} is not a u8 label map",
        path.display()
    );
    let shape = header.shape.ok_or_else(|| Error::Format("missing shape".into()))?;
    let classes = header.classes.ok_or_else(|| Error::Format("missing class count".into()))?;
    SegmentationMask::new(shape, classes, payload)
}

/// Loads an image and, when present, its label map saved next to it.
pub fn load_pair(image: &Path, labels: &Path) -> Result<(Volume, SegmentationMask)> {
    let volume = load_volume(image)?;
    let mask = load_mask(labels)?;
    ensure!(
        volume.shape() == mask.shape(),
        Validation,
        "image and labels disagree on shape"
    );
    Ok((volume, mask))
}
