//! Preprocessing and patch machinery: skull stripping, isotropic resampling,
//! Gaussian standardization, foreground-centered patch extraction, stratified
//! splitting and overlap-averaged reconstruction.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::{SoftSegmentation, Tensor};
use crate::volume::{
    self, flat_index, voxel_count, DomainSample, SegmentationMask, Shape, Volume,
};

/// Cubic training patch cut from a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub side: usize,
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
    pub domain: usize,
    pub center_class: u8,
    pub origin: [usize; 3],
    pub source_id: String,
}

impl Patch {
    pub fn dims(&self) -> Shape {
        [self.side; 3]
    }

    pub fn image_tensor(&self) -> Tensor {
        Tensor::from_f32(self.dims(), &self.image).expect("patch image matches its side")
    }

    pub fn foreground_intensities(&self) -> impl Iterator<Item = f64> + '_ {
        self.image
            .iter()
            .zip(&self.mask)
            .filter(|(_, &l)| l != 0)
            .map(|(&v, _)| v as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Validation,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Validation, Partition::Test];

    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Validation => "validation",
            Partition::Test => "test",
        }
    }
}

impl std::str::FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Partition::Train),
            "validation" | "val" => Ok(Partition::Validation),
            "test" => Ok(Partition::Test),
            other => Err(Error::Validation(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    /// One entry per input patch, in input order.
    pub partitions: Vec<Partition>,
    /// Achieved (train, validation, test) fractions per center class.
    pub achieved: BTreeMap<u8, [f64; 3]>,
}

impl SplitAssignment {
    pub fn indices(&self, partition: Partition) -> Vec<usize> {
        self.partitions
            .iter()
            .enumerate()
            .filter(|(_, &p)| p == partition)
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn skull_strip(image: &Volume, mask: &SegmentationMask) -> Result<Volume> {
    ensure!(
        image.shape() == mask.shape(),
        Validation,
        "image shape {:?} differs from mask shape {:?}",
        image.shape(),
        mask.shape()
    );
    let data = image
        .data()
        .iter()
        .zip(mask.labels())
        .map(|(&v, &l)| if l == 0 { 0.0 } else { v })
        .collect();
    Volume::new(image.shape(), image.spacing(), data)
}

fn resampled_shape(shape: Shape, spacing: [f64; 3], target: f64) -> Shape {
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = (shape[a] as f64 * spacing[a] / target).round() as usize;
    }
    out
}

/// Linear interpolation weights along one axis, clamped to the grid.
fn axis_weights(n: usize, coord: f64) -> (usize, usize, f64) {
    let max = (n - 1) as f64;
    let c = coord.clamp(0.0, max);
    let lo = c.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    (lo, hi, c - lo as f64)
}

/// Resamples to isotropic `target_spacing`: trilinear for intensities,
/// nearest neighbor for labels. Output voxel `i` samples source coordinate
/// `i * target / spacing` on each axis.
pub fn resample_isotropic(
    image: &Volume,
    mask: &SegmentationMask,
    target_spacing: f64,
) -> Result<(Volume, SegmentationMask)> {
    ensure!(
        target_spacing.is_finite() && target_spacing > 0.0,
        Validation,
        "target spacing {target_spacing} must be positive"
    );
    ensure!(
        image.shape() == mask.shape(),
        Validation,
        "image and mask shapes differ"
    );
    let src = image.shape();
    let spacing = image.spacing();
    let out = resampled_shape(src, spacing, target_spacing);
    ensure!(
        out.iter().all(|&n| n > 0),
        Validation,
        "resampling {src:?} at {spacing:?} to {target_spacing} mm gives empty shape {out:?}"
    );
    let scale = [
        target_spacing / spacing[0],
        target_spacing / spacing[1],
        target_spacing / spacing[2],
    ];
    let n = voxel_count(out);
    let mut data = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for z in 0..out[2] {
        let (z0, z1, tz) = axis_weights(src[2], z as f64 * scale[2]);
        let zn = ((z as f64 * scale[2]).round() as usize).min(src[2] - 1);
        for y in 0..out[1] {
            let (y0, y1, ty) = axis_weights(src[1], y as f64 * scale[1]);
            let yn = ((y as f64 * scale[1]).round() as usize).min(src[1] - 1);
            for x in 0..out[0] {
                let (x0, x1, tx) = axis_weights(src[0], x as f64 * scale[0]);
                let xn = ((x as f64 * scale[0]).round() as usize).min(src[0] - 1);
                let v = |xi, yi, zi| image.get(xi, yi, zi) as f64;
                let c00 = v(x0, y0, z0) * (1.0 - tx) + v(x1, y0, z0) * tx;
                let c10 = v(x0, y1, z0) * (1.0 - tx) + v(x1, y1, z0) * tx;
                let c01 = v(x0, y0, z1) * (1.0 - tx) + v(x1, y0, z1) * tx;
                let c11 = v(x0, y1, z1) * (1.0 - tx) + v(x1, y1, z1) * tx;
                let c0 = c00 * (1.0 - ty) + c10 * ty;
                let c1 = c01 * (1.0 - ty) + c11 * ty;
                data.push((c0 * (1.0 - tz) + c1 * tz) as f32);
                labels.push(mask.get(xn, yn, zn));
            }
        }
    }
    let iso = [target_spacing; 3];
    Ok((
        Volume::new(out, iso, data)?,
        SegmentationMask::new(out, mask.classes(), labels)?,
    ))
}

/// Zero-mean, unit-std (population convention) over foreground voxels;
/// background is set to 0.
pub fn gaussian_standardize(image: &Volume, mask: &SegmentationMask) -> Result<Volume> {
    ensure!(image.shape() == mask.shape(), Validation, "image and mask shapes differ");
    let fg: Vec<f64> = image
        .data()
        .iter()
        .zip(mask.labels())
        .filter(|(_, &l)| l != 0)
        .map(|(&v, _)| v as f64)
        .collect();
    ensure!(fg.len() >= 2, Degenerate, "need at least two foreground voxels, found {}", fg.len());
    let n = fg.len() as f64;
    let mean = fg.iter().sum::<f64>() / n;
    let var = fg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    ensure!(var > 0.0, Degenerate, "foreground intensities have zero variance");
    let std = var.sqrt();
    let data = image
        .data()
        .iter()
        .zip(mask.labels())
        .map(|(&v, &l)| if l == 0 { 0.0 } else { ((v as f64 - mean) / std) as f32 })
        .collect();
    Volume::new(image.shape(), image.spacing(), data)
}

/// Per-axis lattice `0, stride, 2*stride, ...` with `origin + side <= n`.
fn lattice(n: usize, side: usize, stride: usize) -> Vec<usize> {
    (0..=(n - side)).step_by(stride).collect()
}

/// Foreground-centered patches on the stride lattice, ordered by origin
/// (x fastest). The center of a cube is `origin + side / 2` on each axis.
pub fn extract_patches(sample: &DomainSample, side: usize, stride: usize) -> Result<Vec<Patch>> {
    ensure!(side >= 1 && stride >= 1, Validation, "patch side and stride must be positive");
    let shape = sample.image.shape();
    ensure!(
        shape.iter().all(|&n| n >= side),
        Validation,
        "sample {} of shape {shape:?} is smaller than patch side {side}",
        sample.id
    );
    let (xs, ys, zs) = (
        lattice(shape[0], side, stride),
        lattice(shape[1], side, stride),
        lattice(shape[2], side, stride),
    );
    let half = side / 2;
    let mut patches = Vec::new();
    for &oz in &zs {
        for &oy in &ys {
            for &ox in &xs {
                let center = sample.mask.get(ox + half, oy + half, oz + half);
                if center == 0 {
                    continue;
                }
                let origin = [ox, oy, oz];
                let (image, mask) = crop(&sample.image, &sample.mask, origin, side);
                patches.push(Patch {
                    side,
                    image,
                    mask,
                    domain: sample.domain,
                    center_class: center,
                    origin,
                    source_id: sample.id.clone(),
                });
            }
        }
    }
    Ok(patches)
}

fn crop(image: &Volume, mask: &SegmentationMask, origin: [usize; 3], side: usize) -> (Vec<f32>, Vec<u8>) {
    let shape = image.shape();
    let mut img = Vec::with_capacity(side * side * side);
    let mut lab = Vec::with_capacity(side * side * side);
    for z in 0..side {
        for y in 0..side {
            let start = flat_index(shape, origin[0], origin[1] + y, origin[2] + z);
            img.extend_from_slice(&image.data()[start..start + side]);
            lab.extend_from_slice(&mask.labels()[start..start + side]);
        }
    }
    (img, lab)
}

/// Splits `counts` into partition sizes by largest remainder, so every size
/// is within one of `fraction * n`.
fn partition_sizes(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let targets = fractions.map(|f| f * n as f64);
    let mut sizes = targets.map(|t| t.floor() as usize);
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| {
        let (ra, rb) = (targets[a] - targets[a].floor(), targets[b] - targets[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

/// Stratified shuffle split by center class.
pub fn stratified_split(patches: &[Patch], fractions: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    let classes: Vec<u8> = patches.iter().map(|p| p.center_class).collect();
    stratified_split_labels(&classes, fractions, seed)
}

/// Stratified split over raw stratum labels.
pub fn stratified_split_labels(strata: &[u8], fractions: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    ensure!(
        fractions.iter().all(|f| *f >= 0.0) && (fractions.iter().sum::<f64>() - 1.0).abs() < 1e-9,
        Validation,
        "split fractions {fractions:?} must be nonnegative and sum to 1"
    );
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &c) in strata.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    for (&class, members) in &by_class {
        ensure!(
            members.len() >= 3,
            Validation,
            "class {class} has only {} patches; stratified splitting needs at least 3",
            members.len()
        );
    }
    let mut partitions = vec![Partition::Train; strata.len()];
    let mut achieved = BTreeMap::new();
    for (&class, members) in &by_class {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class as u64);
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        let sizes = partition_sizes(shuffled.len(), fractions);
        let mut cursor = 0;
        for (part, &size) in Partition::ALL.iter().zip(&sizes) {
            for &i in &shuffled[cursor..cursor + size] {
                partitions[i] = *part;
            }
            cursor += size;
        }
        let n = shuffled.len() as f64;
        achieved.insert(class, sizes.map(|s| s as f64 / n));
    }
    Ok(SplitAssignment { partitions, achieved })
}

/// Origins that tile `shape` completely: the stride lattice plus a final
/// origin flush with the far edge on each axis.
pub fn covering_origins(shape: Shape, side: usize, stride: usize) -> Result<Vec<[usize; 3]>> {
    ensure!(
        shape.iter().all(|&n| n >= side),
        Validation,
        "shape {shape:?} is smaller than patch side {side}"
    );
    let axis = |n: usize| {
        let mut v = lattice(n, side, stride);
        if *v.last().unwrap() != n - side {
            v.push(n - side);
        }
        v
    };
    let (xs, ys, zs) = (axis(shape[0]), axis(shape[1]), axis(shape[2]));
    let mut out = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                out.push([x, y, z]);
            }
        }
    }
    Ok(out)
}

/// Accumulates channel-wise sums and coverage counts of cubic predictions.
fn accumulate(predictions: &[([usize; 3], Tensor)], shape: Shape, channels: usize) -> Result<(Vec<f64>, Vec<u32>)> {
    let n = voxel_count(shape);
    let mut sum = vec![0.0; n * channels];
    let mut count = vec![0u32; n];
    for (origin, pred) in predictions {
        ensure!(pred.channels() == channels, Shape, "prediction has {} channels, expected {channels}", pred.channels());
        let d = pred.dims();
        ensure!(
            (0..3).all(|a| origin[a] + d[a] <= shape[a]),
            Validation,
            "prediction at {origin:?} of size {d:?} exceeds {shape:?}"
        );
        let pn = pred.voxels();
        for z in 0..d[2] {
            for y in 0..d[1] {
                for x in 0..d[0] {
                    let src = x + d[0] * (y + d[1] * z);
                    let dst = flat_index(shape, origin[0] + x, origin[1] + y, origin[2] + z);
                    count[dst] += 1;
                    for c in 0..channels {
                        sum[c * n + dst] += pred.data()[c * pn + src];
                    }
                }
            }
        }
    }
    Ok((sum, count))
}

/// Mean of overlapping patch distributions per voxel, renormalized to sum 1.
/// Uncovered voxels are background with probability 1.
pub fn reconstruct_from_patches(
    predictions: &[([usize; 3], Tensor)],
    shape: Shape,
    classes: usize,
) -> Result<SoftSegmentation> {
    let (mut sum, count) = accumulate(predictions, shape, classes)?;
    let n = voxel_count(shape);
    for v in 0..n {
        if count[v] == 0 {
            for c in 0..classes {
                sum[c * n + v] = if c == 0 { 1.0 } else { 0.0 };
            }
            continue;
        }
        let total: f64 = (0..classes).map(|c| sum[c * n + v]).sum();
        for c in 0..classes {
            sum[c * n + v] /= total;
        }
    }
    Ok(SoftSegmentation(Tensor::from_vec(classes, shape, sum)?))
}

/// Mean of overlapping single-channel patch outputs. Uncovered voxels keep
/// the value from `fallback`.
pub fn average_intensities(
    predictions: &[([usize; 3], Tensor)],
    shape: Shape,
    fallback: &[f32],
) -> Result<Vec<f32>> {
    let (sum, count) = accumulate(predictions, shape, 1)?;
    Ok(sum
        .iter()
        .zip(&count)
        .zip(fallback)
        .map(|((&s, &c), &f)| if c == 0 { f } else { (s / c as f64) as f32 })
        .collect())
}

/// Settings shared by the preprocessing stage and the training harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub target_spacing: f64,
    pub split: [f64; 3],
    pub seed: u64,
    /// Gaussian standardization after resampling.
    #[serde(default)]
    pub standardize: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            patch_size: 16,
            stride: 8,
            target_spacing: 1.0,
            split: [0.6, 0.2, 0.2],
            seed: 0,
            standardize: false,
        }
    }
}

/// Skull strip, resample, and standardize when configured.
pub fn preprocess_sample(sample: &DomainSample, config: &PipelineConfig) -> Result<DomainSample> {
    let stripped = skull_strip(&sample.image, &sample.mask)?;
    let (image, mask) = resample_isotropic(&stripped, &sample.mask, config.target_spacing)?;
    let image = if config.standardize { gaussian_standardize(&image, &mask)? } else { image };
    DomainSample::new(image, mask, sample.domain, sample.id.clone())
}

/// Preprocessed patches of a dataset together with their split.
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub patches: Vec<Patch>,
    pub split: SplitAssignment,
}

impl PatchSet {
    pub fn build(samples: &[DomainSample], config: &PipelineConfig) -> Result<Self> {
        let mut patches = Vec::new();
        for s in samples {
            let pre = preprocess_sample(s, config)?;
            patches.extend(extract_patches(&pre, config.patch_size, config.stride)?);
        }
        let split = stratified_split(&patches, config.split, config.seed)?;
        Ok(PatchSet { patches, split })
    }

    /// Patches of `partition` whose domain is in `domains` (all when empty).
    pub fn select(&self, partition: Partition, domains: &[usize]) -> Vec<Patch> {
        self.patches
            .iter()
            .zip(&self.split.partitions)
            .filter(|(p, &part)| part == partition && (domains.is_empty() || domains.contains(&p.domain)))
            .map(|(p, _)| p.clone())
            .collect()
    }

    /// Writes one image and one label cube per patch plus `index.json`.
    pub fn save(&self, dir: &Path, classes: usize) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.patches.len());
        for (i, (p, part)) in self.patches.iter().zip(&self.split.partitions).enumerate() {
            let image = format!("p{i:06}.mvol");
            let labels = format!("p{i:06}_labels.mvol");
            let vol = Volume::new(p.dims(), [1.0; 3], p.image.clone())?;
            volume::save_volume(&vol, &dir.join(&image))?;
            let mask = SegmentationMask::new(p.dims(), classes, p.mask.clone())?;
            volume::save_mask(&mask, [1.0; 3], &dir.join(&labels))?;
            entries.push(PatchIndexEntry {
                image,
                labels,
                domain: p.domain,
                center_class: p.center_class,
                origin: p.origin,
                source_id: p.source_id.clone(),
                partition: *part,
            });
        }
        let index = PatchIndex { patch_size: self.patches.first().map_or(0, |p| p.side), classes, entries, achieved: self.split.achieved.clone() };
        std::fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: PatchIndex = serde_json::from_str(&std::fs::read_to_string(dir.join("index.json"))?)?;
        let mut patches = Vec::with_capacity(index.entries.len());
        let mut partitions = Vec::with_capacity(index.entries.len());
        for e in &index.entries {
            let (img, mask) = volume::load_pair(&dir.join(&e.image), &dir.join(&e.labels))?;
            ensure!(img.shape() == [index.patch_size; 3], Format, "patch {} is not a cube of side {}", e.image, index.patch_size);
            patches.push(Patch {
                side: index.patch_size,
                image: img.into_data(),
                mask: mask.labels().to_vec(),
                domain: e.domain,
                center_class: e.center_class,
                origin: e.origin,
                source_id: e.source_id.clone(),
            });
            partitions.push(e.partition);
        }
        Ok(PatchSet { patches, split: SplitAssignment { partitions, achieved: index.achieved } })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchIndexEntry {
    pub image: String,
    pub labels: String,
    pub domain: usize,
    pub center_class: u8,
    pub origin: [usize; 3],
    pub source_id: String,
    pub partition: Partition,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchIndex {
    pub patch_size: usize,
    pub classes: usize,
    pub entries: Vec<PatchIndexEntry>,
    pub achieved: BTreeMap<u8, [f64; 3]>,
}
