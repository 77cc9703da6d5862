//! Synthetic multi-domain brain-like phantoms.
//!
//! Each phantom is a set of nested ellipsoids (WM inside GM inside CSF inside
//! background). Intensities are drawn per voxel from the class distribution of
//! the domain and multiplied by a smooth positive bias field.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::volume::{
    self, DatasetManifest, DomainSample, ManifestEntry, Provenance, SegmentationMask, Shape, Volume,
};

pub const BACKGROUND: usize = 0;
pub const CSF: usize = 1;
pub const GM: usize = 2;
pub const WM: usize = 3;

pub const CLASS_NAMES: [&str; 4] = ["background", "CSF", "GM", "WM"];

const MAX_ATTEMPTS: usize = 10;
const BIAS_MODES: usize = 3;

/// Acquisition characteristics of one synthetic domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub class_means: Vec<f64>,
    pub class_stds: Vec<f64>,
    pub bias_field_amplitude: f64,
    pub spacing: [f64; 3],
    /// 0 keeps the configured GM/WM means, 1 collapses both onto their midpoint.
    pub contrast_overlap: f64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let c = self.class_means.len();
        ensure!(c >= 2, Validation, "a domain needs at least two class means");
        ensure!(
            self.class_stds.len() == c,
            Validation,
            "{} class stds for {c} class means",
            self.class_stds.len()
        );
        ensure!(
            self.class_means.iter().all(|m| m.is_finite()),
            Validation,
            "class means must be finite"
        );
        ensure!(
            self.class_stds.iter().all(|s| s.is_finite() && *s > 0.0),
            Validation,
            "class stds must be positive"
        );
        ensure!(
            (0.0..1.0).contains(&self.bias_field_amplitude),
            Validation,
            "bias field amplitude {} outside [0, 1)",
            self.bias_field_amplitude
        );
        ensure!(
            (0.0..=1.0).contains(&self.contrast_overlap),
            Validation,
            "contrast overlap {} outside [0, 1]",
            self.contrast_overlap
        );
        ensure!(
            self.spacing.iter().all(|s| s.is_finite() && *s > 0.0),
            Validation,
            "spacing must be positive"
        );
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.class_means.len()
    }

    /// Class means after applying `contrast_overlap` to the GM/WM pair.
    pub fn effective_means(&self) -> Vec<f64> {
        let mut means = self.class_means.clone();
        if means.len() > WM {
            let (gm, wm) = (means[GM], means[WM]);
            let shift = self.contrast_overlap * (wm - gm) / 2.0;
            means[GM] = gm + shift;
            means[WM] = wm - shift;
        }
        means
    }
}

/// Semi-axis ranges, as fractions of the half field of view, for each shell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryConfig {
    pub csf_radius: [f64; 2],
    pub gm_radius: [f64; 2],
    pub wm_radius: [f64; 2],
    /// Maximum center offset, as a fraction of the half field of view.
    pub center_jitter: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            csf_radius: [0.80, 0.92],
            gm_radius: [0.60, 0.72],
            wm_radius: [0.30, 0.45],
            center_jitter: 0.05,
        }
    }
}

impl GeometryConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [
            ("csf", self.csf_radius),
            ("gm", self.gm_radius),
            ("wm", self.wm_radius),
        ] {
            ensure!(
                lo > 0.0 && lo <= hi,
                Validation,
                "{name} radius range [{lo}, {hi}] is empty or non-positive"
            );
        }
        ensure!(
            self.wm_radius[1] < self.gm_radius[0] && self.gm_radius[1] < self.csf_radius[0],
            Validation,
            "shell radius ranges must be strictly nested (wm < gm < csf)"
        );
        ensure!(
            (0.0..1.0).contains(&self.center_jitter),
            Validation,
            "center jitter must lie in [0, 1)"
        );
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    /// Field of view in millimeters; equal to the grid shape at 1 mm spacing.
    pub shape: Shape,
    pub domains: Vec<DomainSpec>,
    pub volumes_per_domain: usize,
    pub seed: u64,
    #[serde(default)]
    pub geometry: GeometryConfig,
}

impl Default for PhantomConfig {
    /// Two domains: an infant-like one with low GM/WM contrast at 1 mm
    /// isotropic spacing and an adult-like one with inverted, higher
    /// contrast on a 0.958 x 0.958 x 3.0 mm grid. Intensities are in
    /// arbitrary units around zero.
    fn default() -> Self {
        PhantomConfig {
            shape: [32, 32, 32],
            domains: vec![
                DomainSpec {
                    class_means: vec![0.0, -1.0, 0.0, 0.5],
                    class_stds: vec![0.02, 0.05, 0.05, 0.05],
                    bias_field_amplitude: 0.10,
                    spacing: [1.0, 1.0, 1.0],
                    contrast_overlap: 0.5,
                },
                DomainSpec {
                    class_means: vec![0.0, 1.0, 0.0, -0.5],
                    class_stds: vec![0.02, 0.06, 0.06, 0.06],
                    bias_field_amplitude: 0.10,
                    spacing: [0.958, 0.958, 3.0],
                    contrast_overlap: 0.1,
                },
            ],
            volumes_per_domain: 5,
            seed: 7,
            geometry: GeometryConfig::default(),
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.domains.is_empty(), Validation, "at least one domain is required");
        ensure!(self.volumes_per_domain >= 1, Validation, "volumes_per_domain must be >= 1");
        ensure!(
            self.shape.iter().all(|&n| n >= 4),
            Validation,
            "field of view {:?} is too small",
            self.shape
        );
        let classes = self.domains[0].classes();
        for d in &self.domains {
            d.validate()?;
            ensure!(
                d.classes() == classes,
                Validation,
                "all domains must declare the same class count"
            );
        }
        self.geometry.validate()
    }

    pub fn classes(&self) -> usize {
        self.domains.first().map_or(0, DomainSpec::classes)
    }

    /// Grid shape of domain `domain` (1-based) given its spacing.
    pub fn grid_shape(&self, domain: usize) -> Shape {
        let spacing = self.domains[domain - 1].spacing;
        let mut shape = [0; 3];
        for a in 0..3 {
            shape[a] = ((self.shape[a] as f64 / spacing[a]).round() as usize).max(1);
        }
        shape
    }

    pub fn sample_count(&self) -> usize {
        self.domains.len() * self.volumes_per_domain
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, u: [f64; 3]) -> bool {
        let mut acc = 0.0;
        for a in 0..3 {
            let d = (u[a] - self.center[a]) / self.radii[a];
            acc += d * d;
        }
        acc <= 1.0
    }
}

fn uniform_in<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Label map for one draw of the nested-ellipsoid geometry. Coordinates are
/// normalized to `[-1, 1]` across the field of view at voxel centers.
fn draw_labels<R: Rng + ?Sized>(
    grid: Shape,
    geometry: &GeometryConfig,
    rng: &mut R,
) -> Vec<u8> {
    let mut center = [0.0; 3];
    for c in &mut center {
        *c = rng.random_range(-1.0..=1.0) * geometry.center_jitter;
    }
    let mut shells = Vec::with_capacity(3);
    for (range, label) in [
        (geometry.wm_radius, WM),
        (geometry.gm_radius, GM),
        (geometry.csf_radius, CSF),
    ] {
        let mut radii = [0.0; 3];
        for r in &mut radii {
            *r = uniform_in(rng, range);
        }
        shells.push((Ellipsoid { center, radii }, label as u8));
    }
    let mut labels = vec![BACKGROUND as u8; volume::voxel_count(grid)];
    for (i, label) in labels.iter_mut().enumerate() {
        let idx = volume::coords(grid, i);
        let mut u = [0.0; 3];
        for a in 0..3 {
            u[a] = 2.0 * (idx[a] as f64 + 0.5) / grid[a] as f64 - 1.0;
        }
        if let Some((_, l)) = shells.iter().find(|(e, _)| e.contains(u)) {
            *label = *l;
        }
    }
    labels
}

/// Smooth positive multiplicative field: exp of a sum of separable cosine modes.
pub fn bias_field<R: Rng + ?Sized>(grid: Shape, amplitude: f64, rng: &mut R) -> Vec<f64> {
    let mut phases = [[0.0; 3]; BIAS_MODES];
    for mode in &mut phases {
        for p in mode.iter_mut() {
            *p = rng.random_range(0.0..2.0 * PI);
        }
    }
    let n = volume::voxel_count(grid);
    if amplitude == 0.0 {
        return vec![1.0; n];
    }
    (0..n)
        .map(|i| {
            let idx = volume::coords(grid, i);
            let mut sum = 0.0;
            for mode in &phases {
                let mut prod = 1.0;
                for a in 0..3 {
                    let u = (idx[a] as f64 + 0.5) / grid[a] as f64;
                    prod *= (PI * u + mode[a]).cos();
                }
                sum += prod;
            }
            (amplitude * sum / BIAS_MODES as f64).exp()
        })
        .collect()
}

/// Generates one phantom for `spec` on `grid`.
pub fn generate_phantom<R: Rng + ?Sized>(
    spec: &DomainSpec,
    grid: Shape,
    geometry: &GeometryConfig,
    domain: usize,
    id: &str,
    rng: &mut R,
) -> Result<DomainSample> {
    spec.validate()?;
    let classes = spec.classes();
    let mut labels = None;
    for _ in 0..MAX_ATTEMPTS {
        let candidate = draw_labels(grid, geometry, rng);
        let mut present = vec![false; classes];
        for &l in &candidate {
            if (l as usize) < classes {
                present[l as usize] = true;
            }
        }
        if present.iter().all(|&p| p) {
            labels = Some(candidate);
            break;
        }
    }
    let labels = labels.ok_or_else(|| {
        Error::Validation(format!(
            "grid {grid:?} produced an empty tissue class after {MAX_ATTEMPTS} attempts"
        ))
    })?;
    ensure!(
        labels.iter().all(|&l| (l as usize) < classes),
        Validation,
        "geometry uses {} classes but the domain declares {classes}",
        WM + 1
    );

    let field = bias_field(grid, spec.bias_field_amplitude, rng);
    let means = spec.effective_means();
    let data: Vec<f32> = labels
        .iter()
        .zip(&field)
        .map(|(&l, &b)| {
            let c = l as usize;
            let noise: f64 = rng.sample(StandardNormal);
            ((means[c] + spec.class_stds[c] * noise) * b) as f32
        })
        .collect();

    let image = Volume::new(grid, spec.spacing, data)?;
    let mask = SegmentationMask::new(grid, classes, labels)?;
    DomainSample::new(image, mask, domain, id)
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn sample_id(domain: usize, index: usize) -> String {
    format!("d{domain}_s{index:03}")
}

/// Generates all samples in memory. Sample `g` draws from its own RNG stream,
/// so the result does not depend on evaluation order.
pub fn generate_samples(config: &PhantomConfig) -> Result<Vec<DomainSample>> {
    config.validate()?;
    let jobs: Vec<(usize, usize)> = (1..=config.domains.len())
        .flat_map(|d| (0..config.volumes_per_domain).map(move |j| (d, j)))
        .collect();
    jobs.par_iter()
        .enumerate()
        .map(|(g, &(d, j))| {
            let mut rng = sample_rng(config.seed, g);
            generate_phantom(
                &config.domains[d - 1],
                config.grid_shape(d),
                &config.geometry,
                d,
                &sample_id(d, j),
                &mut rng,
            )
        })
        .collect()
}

/// Writes every sample plus `manifest.json` into `out_dir`. Files written by a
/// failed call are removed.
pub fn generate_domain_dataset(config: &PhantomConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let samples = generate_samples(config)?;
    std::fs::create_dir_all(out_dir)?;
    let mut written: Vec<PathBuf> = Vec::new();
    let result = write_dataset(config, &samples, out_dir, &mut written);
    if result.is_err() {
        for path in &written {
            let _ = std::fs::remove_file(path);
        }
    }
    result
}

fn write_dataset(
    config: &PhantomConfig,
    samples: &[DomainSample],
    out_dir: &Path,
    written: &mut Vec<PathBuf>,
) -> Result<DatasetManifest> {
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let image = PathBuf::from(format!("{}.mvol", s.id));
        let labels = PathBuf::from(format!("{}_labels.mvol", s.id));
        written.push(out_dir.join(&image));
        volume::save_volume(&s.image, &out_dir.join(&image))?;
        written.push(out_dir.join(&labels));
        volume::save_mask(&s.mask, s.image.spacing(), &out_dir.join(&labels))?;
        entries.push(ManifestEntry { id: s.id.clone(), image, labels, domain: s.domain });
    }
    let manifest = DatasetManifest {
        samples: entries,
        domains: config.domains.len(),
        classes: config.classes(),
        provenance: Provenance {
            description: format!(
                "synthetic nested-ellipsoid phantoms, field of view {:?} mm, {} per domain",
                config.shape, config.volumes_per_domain
            ),
            seed: config.seed,
        },
    };
    let path = out_dir.join("manifest.json");
    written.push(path.clone());
    manifest.save(&path)?;
    Ok(manifest)
}

/// Overlap coefficient of two normalized histograms: sum of bin-wise minima.
pub fn overlap_coefficient(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.min(*y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_with(stds: f64, bias: f64) -> DomainSpec {
        DomainSpec {
            class_means: vec![0.0, 1.0, 2.0, 3.0],
            class_stds: vec![stds; 4],
            bias_field_amplitude: bias,
            spacing: [1.0; 3],
            contrast_overlap: 0.0,
        }
    }

    #[test]
    fn vanishing_noise_gives_class_means() {
        let spec = spec_with(1e-300, 0.0);
        let mut rng = sample_rng(1, 0);
        let s = generate_phantom(&spec, [20, 20, 20], &GeometryConfig::default(), 1, "x", &mut rng).unwrap();
        for (&v, &l) in s.image.data().iter().zip(s.mask.labels()) {
            assert_eq!(v, spec.class_means[l as usize] as f32);
        }
    }

    #[test]
    fn full_overlap_equalizes_gm_and_wm() {
        let mut spec = spec_with(0.1, 0.0);
        spec.contrast_overlap = 1.0;
        let m = spec.effective_means();
        assert_eq!(m[GM], m[WM]);
        assert_eq!(m[GM], 2.5);
    }

    #[test]
    fn every_class_present() {
        let config = PhantomConfig::default();
        for s in generate_samples(&config).unwrap() {
            assert!(s.mask.class_counts().iter().all(|&c| c > 0), "{}", s.id);
        }
    }

    #[test]
    fn tiny_grid_fails_after_retries() {
        let spec = spec_with(0.1, 0.0);
        let mut rng = sample_rng(3, 0);
        let err = generate_phantom(&spec, [2, 2, 2], &GeometryConfig::default(), 1, "tiny", &mut rng);
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn anisotropic_domain_grid() {
        let config = PhantomConfig::default();
        assert_eq!(config.grid_shape(1), [32, 32, 32]);
        assert_eq!(config.grid_shape(2), [33, 33, 11]);
    }

    #[test]
    fn generation_is_order_independent() {
        let config = PhantomConfig { volumes_per_domain: 2, ..PhantomConfig::default() };
        let all = generate_samples(&config).unwrap();
        let mut rng = sample_rng(config.seed, 3);
        let lone = generate_phantom(&config.domains[1], config.grid_shape(2), &config.geometry, 2, "d2_s001", &mut rng).unwrap();
        assert_eq!(all[3], lone);
    }

    #[test]
    fn bias_field_is_positive_and_bounded() {
        let mut rng = sample_rng(9, 0);
        let f = bias_field([8, 8, 8], 0.5, &mut rng);
        assert!(f.iter().all(|&b| b > (-0.5f64).exp() - 1e-12 && b < 0.5f64.exp() + 1e-12));
    }

    #[test]
    fn rejects_unnested_geometry() {
        let g = GeometryConfig { wm_radius: [0.5, 0.7], ..GeometryConfig::default() };
        assert!(g.validate().is_err());
    }
}
