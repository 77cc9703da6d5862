use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::volume::{SegmentationMask, Volume};

/// Additive smoothing applied to every bin before taking KL divergences.
pub const JSD_SMOOTHING: f64 = 1e-12;

/// Hard Dice `2|P ∩ T| / (|P| + |T|)` for one class; 1.0 when both sets are
/// empty.
pub fn dice_score(prediction: &[u8], truth: &[u8], class: u8) -> Result<f64> {
    ensure!(
        prediction.len() == truth.len(),
        Validation,
        "prediction has {} voxels, truth has {}",
        prediction.len(),
        truth.len()
    );
    let mut acc = DiceAccumulator::new(class as usize + 1);
    acc.add(prediction, truth);
    Ok(acc.score(class as usize).0)
}

pub fn dice_score_masks(prediction: &SegmentationMask, truth: &SegmentationMask, class: u8) -> Result<f64> {
    ensure!(prediction.shape() == truth.shape(), Validation, "mask shapes differ");
    dice_score(prediction.labels(), truth.labels(), class)
}

/// Running per-class intersection and set sizes over many label maps.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DiceAccumulator {
    intersection: Vec<u64>,
    predicted: Vec<u64>,
    truth: Vec<u64>,
}

impl DiceAccumulator {
    pub fn new(classes: usize) -> Self {
        DiceAccumulator { intersection: vec![0; classes], predicted: vec![0; classes], truth: vec![0; classes] }
    }

    pub fn add(&mut self, prediction: &[u8], truth: &[u8]) {
        let c = self.truth.len();
        for (&p, &t) in prediction.iter().zip(truth) {
            let (p, t) = (p as usize, t as usize);
            if p < c {
                self.predicted[p] += 1;
            }
            if t < c {
                self.truth[t] += 1;
            }
            if p == t && p < c {
                self.intersection[p] += 1;
            }
        }
    }

    /// Score and whether the empty-set convention was used.
    pub fn score(&self, class: usize) -> (f64, bool) {
        let denom = self.predicted[class] + self.truth[class];
        if denom == 0 {
            (1.0, true)
        } else {
            (2.0 * self.intersection[class] as f64 / denom as f64, false)
        }
    }

    /// Scores of the foreground classes `1..C`.
    pub fn foreground_scores(&self) -> (Vec<f64>, bool) {
        let mut any_empty = false;
        let scores = (1..self.truth.len())
            .map(|c| {
                let (s, empty) = self.score(c);
                any_empty |= empty;
                s
            })
            .collect();
        (scores, any_empty)
    }
}

/// Fixed-range histogram with `bins` equal-width bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    edges: Vec<f64>,
    counts: Vec<f64>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        ensure!(bins >= 2, Validation, "histograms need at least 2 bins");
        ensure!(lo.is_finite() && hi.is_finite() && lo < hi, Validation, "histogram range [{lo}, {hi}] is empty");
        let width = (hi - lo) / bins as f64;
        let mut edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
        edges[bins] = hi;
        Ok(Histogram { edges, counts: vec![0.0; bins] })
    }

    pub fn from_values(values: impl IntoIterator<Item = f64>, lo: f64, hi: f64, bins: usize) -> Result<Self> {
        let mut h = Self::new(lo, hi, bins)?;
        for v in values {
            h.add(v);
        }
        Ok(h)
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    /// Values outside the range are clamped into the end bins.
    pub fn add(&mut self, v: f64) {
        let bins = self.counts.len();
        let (lo, hi) = (self.edges[0], self.edges[bins]);
        let t = ((v - lo) / (hi - lo) * bins as f64).floor();
        let i = if t.is_nan() { 0 } else { (t.max(0.0) as usize).min(bins - 1) };
        self.counts[i] += 1.0;
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0.0
    }

    /// Counts divided by their total; all zeros for an empty histogram.
    pub fn mass(&self) -> Vec<f64> {
        let t = self.total();
        if t == 0.0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts.iter().map(|c| c / t).collect()
    }

    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn same_binning(&self, other: &Histogram) -> bool {
        self.edges == other.edges
    }
}

/// Jensen-Shannon divergence of N distributions: the mean KL divergence of
/// each from their average, natural log.
pub fn jsd(histograms: &[Histogram]) -> Result<f64> {
    ensure!(histograms.len() >= 2, Validation, "JSD needs at least two histograms");
    for h in &histograms[1..] {
        ensure!(h.same_binning(&histograms[0]), Validation, "histograms use different binning");
    }
    let masses: Vec<Vec<f64>> = histograms.iter().map(Histogram::mass).collect();
    jsd_of_masses(&masses)
}

/// JSD over already-normalized mass vectors with identical length.
pub fn jsd_of_masses(masses: &[Vec<f64>]) -> Result<f64> {
    ensure!(masses.len() >= 2, Validation, "JSD needs at least two histograms");
    let bins = masses[0].len();
    ensure!(masses.iter().all(|m| m.len() == bins), Validation, "histograms use different binning");
    let n = masses.len() as f64;
    let mut mean = vec![0.0; bins];
    for m in masses {
        for (a, b) in mean.iter_mut().zip(m) {
            *a += b / n;
        }
    }
    let mut total = 0.0;
    for m in masses {
        let mut kl = 0.0;
        for (p, q) in m.iter().zip(&mean) {
            let (p, q) = (p + JSD_SMOOTHING, q + JSD_SMOOTHING);
            kl += p * (p / q).ln();
        }
        total += kl;
    }
    Ok(total / n)
}

/// One foreground histogram per patch over the global min/max of all values.
pub fn patch_histograms(per_patch: &[Vec<f64>], bins: usize) -> Result<Vec<Histogram>> {
    let (lo, hi) = padded_range(per_patch.iter().flatten().copied());
    per_patch
        .iter()
        .map(|values| Histogram::from_values(values.iter().copied(), lo, hi, bins))
        .collect()
}

/// JSD of per-patch foreground histograms, using only patches with at least
/// one foreground voxel.
pub fn patch_jsd(per_patch: &[Vec<f64>], bins: usize) -> Result<f64> {
    let nonempty: Vec<Vec<f64>> = per_patch.iter().filter(|v| !v.is_empty()).cloned().collect();
    jsd(&patch_histograms(&nonempty, bins)?)
}

/// Min and max of `values`, widened when they coincide.
pub fn padded_range(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassHistogram {
    pub class: u8,
    pub histogram: Histogram,
    /// No voxel of this class was present.
    pub empty: bool,
}

/// Normalizable histograms of the foreground classes over `[lo, hi]`, or over
/// the foreground intensity range when no range is given.
pub fn class_histograms(
    volume: &Volume,
    mask: &SegmentationMask,
    bins: usize,
    range: Option<(f64, f64)>,
) -> Result<Vec<ClassHistogram>> {
    ensure!(volume.shape() == mask.shape(), Validation, "volume and mask shapes differ");
    let (lo, hi) = range.unwrap_or_else(|| {
        padded_range(
            volume
                .data()
                .iter()
                .zip(mask.labels())
                .filter(|(_, &l)| l != 0)
                .map(|(&v, _)| v as f64),
        )
    });
    let mut out = Vec::with_capacity(mask.classes() - 1);
    for class in 1..mask.classes() as u8 {
        let values = volume
            .data()
            .iter()
            .zip(mask.labels())
            .filter(|(_, &l)| l == class)
            .map(|(&v, _)| v as f64);
        let histogram = Histogram::from_values(values, lo, hi, bins)?;
        let empty = histogram.is_empty();
        out.push(ClassHistogram { class, histogram, empty });
    }
    Ok(out)
}
