//! Weighted soft Dice loss, discriminator log losses and the two alternating
//! objectives built from them.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::{Discriminator, Generator, Segmenter};
use crate::pipeline::Patch;
use crate::tensor::{DomainProbabilities, SoftSegmentation, Tensor};

/// Lower bound applied to probabilities inside every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassWeights {
    Named(WeightScheme),
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    InverseFrequency,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub epsilon: f64,
    pub class_weights: ClassWeights,
    /// When false the background class gets weight 0 in the Dice sum.
    #[serde(default = "yes")]
    pub include_background: bool,
}

fn yes() -> bool {
    true
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            epsilon: 1e-8,
            class_weights: ClassWeights::Named(WeightScheme::InverseFrequency),
            include_background: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lambda >= 0.0 && self.lambda.is_finite(), Validation, "lambda must be >= 0");
        ensure!(self.epsilon > 0.0 && self.epsilon.is_finite(), Validation, "epsilon must be > 0");
        if let ClassWeights::Explicit(w) = &self.class_weights {
            ensure!(w.iter().all(|&v| v >= 0.0 && v.is_finite()), Validation, "class weights must be >= 0");
            ensure!(w.iter().any(|&v| v > 0.0), Validation, "at least one class weight must be positive");
        }
        Ok(())
    }

    /// Per-class weights given voxel counts of the training set. Inverse
    /// frequency weights are normalized to sum 1; absent classes get 0.
    pub fn resolve(&self, class_counts: &[usize]) -> Result<ResolvedLoss> {
        self.validate()?;
        let c = class_counts.len();
        let mut weights = match &self.class_weights {
            ClassWeights::Explicit(w) => {
                ensure!(w.len() == c, Validation, "{} class weights for {c} classes", w.len());
                w.clone()
            }
            ClassWeights::Named(WeightScheme::Uniform) => vec![1.0; c],
            ClassWeights::Named(WeightScheme::InverseFrequency) => class_counts
                .iter()
                .map(|&n| if n == 0 { 0.0 } else { 1.0 / n as f64 })
                .collect(),
        };
        if !self.include_background {
            weights[0] = 0.0;
        }
        let total: f64 = weights.iter().sum();
        ensure!(total > 0.0, Validation, "class weights sum to zero");
        if matches!(self.class_weights, ClassWeights::Named(WeightScheme::InverseFrequency)) {
            weights.iter_mut().for_each(|w| *w /= total);
        }
        Ok(ResolvedLoss { lambda: self.lambda, epsilon: self.epsilon, weights })
    }
}

/// Loss settings with concrete class weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedLoss {
    pub lambda: f64,
    pub epsilon: f64,
    pub weights: Vec<f64>,
}

/// Weighted soft Dice on class-major buffers (`s[c * n + v]`), returning the
/// loss and its gradient with respect to `s`.
pub fn dice_terms(s: &[f64], y: &[f64], classes: usize, weights: &[f64], epsilon: f64) -> (f64, Vec<f64>) {
    let n = s.len() / classes;
    let mut inter = 0.0;
    let mut union = 0.0;
    for c in 0..classes {
        let w = weights[c];
        if w == 0.0 {
            continue;
        }
        let (sc, yc) = (&s[c * n..(c + 1) * n], &y[c * n..(c + 1) * n]);
        let (mut i, mut u) = (0.0, 0.0);
        for (a, b) in sc.iter().zip(yc) {
            i += a * b;
            u += a + b;
        }
        inter += w * i;
        union += w * u;
    }
    let num = epsilon + 2.0 * inter;
    let den = epsilon + union;
    let loss = 1.0 - num / den;
    let mut grad = vec![0.0; s.len()];
    for c in 0..classes {
        let w = weights[c];
        if w == 0.0 {
            continue;
        }
        for v in 0..n {
            let i = c * n + v;
            grad[i] = -(2.0 * w * y[i] * den - num * w) / (den * den);
        }
    }
    (loss, grad)
}

fn check_dice_inputs(s: &SoftSegmentation, labels: &[u8], weights: &[f64]) -> Result<()> {
    ensure!(
        labels.len() == s.tensor().voxels(),
        Validation,
        "{} labels for {} voxels",
        labels.len(),
        s.tensor().voxels()
    );
    ensure!(weights.len() == s.classes(), Validation, "{} weights for {} classes", weights.len(), s.classes());
    ensure!(
        labels.iter().all(|&l| (l as usize) < s.classes()),
        Validation,
        "label outside 0..{}",
        s.classes()
    );
    Ok(())
}

pub fn one_hot(labels: &[u8], classes: usize) -> Vec<f64> {
    let n = labels.len();
    let mut y = vec![0.0; n * classes];
    for (v, &l) in labels.iter().enumerate() {
        y[l as usize * n + v] = 1.0;
    }
    y
}

pub fn dice_loss(s: &SoftSegmentation, labels: &[u8], weights: &[f64], epsilon: f64) -> Result<f64> {
    Ok(dice_loss_with_grad(s, labels, weights, epsilon)?.0)
}

pub fn dice_loss_with_grad(s: &SoftSegmentation, labels: &[u8], weights: &[f64], epsilon: f64) -> Result<(f64, Tensor)> {
    check_dice_inputs(s, labels, weights)?;
    let y = one_hot(labels, s.classes());
    let (loss, grad) = dice_terms(s.tensor().data(), &y, s.classes(), weights, epsilon);
    Ok((loss, Tensor::from_vec(s.classes(), s.dims(), grad)?))
}

fn neg_log(p: f64) -> f64 {
    -p.max(PROB_FLOOR).ln()
}

// The floor guards the value only; through the softmax this stays the
// bounded `p - onehot`, so a saturated discriminator can still recover.
fn neg_log_grad(p: f64) -> f64 {
    -1.0 / p.max(f64::MIN_POSITIVE)
}

fn check_distribution(p: &DomainProbabilities) -> Result<()> {
    let v = p.as_slice();
    ensure!(v.len() >= 2, Validation, "a domain distribution needs at least two entries");
    ensure!(
        v.iter().all(|&x| x >= 0.0 && x.is_finite()) && (v.iter().sum::<f64>() - 1.0).abs() < 1e-6,
        Validation,
        "not a probability distribution: {v:?}"
    );
    Ok(())
}

/// `-ln p(z)` for a raw image of domain `z` (1-based).
pub fn dis_loss_real(p: &DomainProbabilities, z: usize) -> Result<f64> {
    check_distribution(p)?;
    ensure!(
        (1..=p.domains()).contains(&z),
        Validation,
        "domain {z} outside 1..={}",
        p.domains()
    );
    Ok(neg_log(p.real(z)))
}

pub fn dis_loss_real_grad(p: &DomainProbabilities, z: usize) -> Vec<f64> {
    let mut g = vec![0.0; p.as_slice().len()];
    g[z - 1] = neg_log_grad(p.real(z));
    g
}

/// `-ln p(K + 1)` for a generated image.
pub fn dis_loss_fake(p: &DomainProbabilities) -> Result<f64> {
    check_distribution(p)?;
    Ok(neg_log(p.fake()))
}

/// The same quantity written as `-ln(1 - sum of real-domain probabilities)`.
pub fn dis_loss_fake_complement(p: &DomainProbabilities) -> Result<f64> {
    check_distribution(p)?;
    let real: f64 = p.as_slice()[..p.domains()].iter().sum();
    Ok(neg_log(1.0 - real))
}

pub fn dis_loss_fake_grad(p: &DomainProbabilities) -> Vec<f64> {
    let mut g = vec![0.0; p.as_slice().len()];
    let k = g.len() - 1;
    g[k] = neg_log_grad(p.fake());
    g
}

/// Sum over the batch of `dice(S(G(x)), y) - lambda * fake_loss(D(G(x)))`.
/// Without a generator S reads `x` directly; without a discriminator the
/// adversarial term is absent.
pub fn objective_gs(
    batch: &[Patch],
    g: Option<&Generator>,
    s: &Segmenter,
    d: Option<&Discriminator>,
    loss: &ResolvedLoss,
) -> Result<f64> {
    let mut total = 0.0;
    for patch in batch {
        let x = patch.image_tensor();
        let xhat = match g {
            Some(g) => g.forward(&x)?,
            None => x,
        };
        total += dice_loss(&s.forward(&xhat)?, &patch.mask, &loss.weights, loss.epsilon)?;
        if let Some(d) = d {
            if loss.lambda != 0.0 {
                total -= loss.lambda * dis_loss_fake(&d.forward(&xhat)?)?;
            }
        }
    }
    finite(total, "objective_gs")
}

/// Sum over the batch of `real_loss(D(x), z) + fake_loss(D(G(x)))`.
pub fn objective_d(batch: &[Patch], g: &Generator, d: &Discriminator) -> Result<f64> {
    let mut total = 0.0;
    for patch in batch {
        let x = patch.image_tensor();
        total += dis_loss_real(&d.forward(&x)?, patch.domain)?;
        total += dis_loss_fake(&d.forward(&g.forward(&x)?)?)?;
    }
    finite(total, "objective_d")
}

pub(crate) fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence(format!("{what} evaluated to {v}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn soft(classes: usize, dims: [usize; 3], data: Vec<f64>) -> SoftSegmentation {
        SoftSegmentation(Tensor::from_vec(classes, dims, data).unwrap())
    }

    #[test]
    fn perfect_overlap_is_zero() {
        let labels = [0u8, 1, 2, 3, 1, 1, 0, 2];
        let s = soft(4, [2, 2, 2], one_hot(&labels, 4));
        for eps in [1e-8, 1.0, 10.0] {
            assert_eq!(dice_loss(&s, &labels, &[0.1, 0.2, 0.3, 0.4], eps).unwrap(), 0.0);
        }
    }

    #[test]
    fn disjoint_single_voxel_tends_to_one() {
        let s = soft(2, [1, 1, 1], vec![1.0, 0.0]);
        let l = dice_loss(&s, &[1], &[1.0, 1.0], 1e-12).unwrap();
        assert!((l - 1.0).abs() < 1e-11);
    }

    #[test]
    fn single_voxel_arithmetic() {
        // numerator 2 * 0.7 = 1.4, denominator 0.7 + 0.3 + 1 = 2.0.
        let (num, den) = (2.0 * 0.7, 0.7 + 0.3 + 1.0);
        let s = soft(2, [1, 1, 1], vec![0.7, 0.3]);
        let l = dice_loss_with_grad(&s, &[0], &[1.0, 1.0], 0.0).unwrap().0;
        assert_eq!((num, den), (1.4, 2.0));
        assert!((l - (1.0 - num / den)).abs() < 1e-15);
        assert!((l - 0.3).abs() < 1e-9);
    }

    #[test]
    fn dice_shape_mismatch() {
        let s = soft(2, [1, 1, 2], vec![0.5; 4]);
        assert!(matches!(dice_loss(&s, &[0], &[1.0, 1.0], 1e-8), Err(Error::Validation(_))));
    }

    #[test]
    fn real_loss_values() {
        assert_eq!(dis_loss_real(&DomainProbabilities(vec![1.0, 0.0, 0.0]), 1).unwrap(), 0.0);
        let l = dis_loss_real(&DomainProbabilities(vec![0.5, 0.25, 0.25]), 1).unwrap();
        assert!((l - 0.5f64.ln().abs()).abs() < 1e-12);
        assert!((l - 0.6931).abs() < 1e-4);
        let u = DomainProbabilities(vec![1.0 / 3.0; 3]);
        let l = dis_loss_real(&u, 2).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
        assert!((l - 1.0986).abs() < 1e-4);
        assert!(matches!(dis_loss_real(&u, 3), Err(Error::Validation(_))));
        assert!(matches!(dis_loss_real(&u, 0), Err(Error::Validation(_))));
    }

    #[test]
    fn fake_loss_values() {
        assert_eq!(dis_loss_fake(&DomainProbabilities(vec![0.0, 0.0, 1.0])).unwrap(), 0.0);
        let l = dis_loss_fake(&DomainProbabilities(vec![0.25, 0.25, 0.5])).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn floor_keeps_losses_finite() {
        let l = dis_loss_fake(&DomainProbabilities(vec![0.5, 0.5, 0.0])).unwrap();
        assert!((l - (-(PROB_FLOOR.ln()))).abs() < 1e-9);
    }

    #[test]
    fn inverse_frequency_weights_sum_to_one() {
        let r = LossConfig::default().resolve(&[600, 200, 100, 100]).unwrap();
        assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((r.weights[1] / r.weights[2] - 0.5).abs() < 1e-12);
        let nb = LossConfig { include_background: false, ..LossConfig::default() }.resolve(&[600, 200, 100, 100]).unwrap();
        assert_eq!(nb.weights[0], 0.0);
    }

    #[test]
    fn config_rejects_all_zero_weights() {
        let c = LossConfig { class_weights: ClassWeights::Explicit(vec![0.0, 0.0]), ..LossConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn class_weights_json_forms() {
        let a: ClassWeights = serde_json::from_str("\"inverse_frequency\"").unwrap();
        assert_eq!(a, ClassWeights::Named(WeightScheme::InverseFrequency));
        let b: ClassWeights = serde_json::from_str("[0.1, 0.9]").unwrap();
        assert_eq!(b, ClassWeights::Explicit(vec![0.1, 0.9]));
    }

    proptest! {
        #[test]
        fn dice_in_unit_interval(raw in proptest::collection::vec(0.01f64..1.0, 3 * 6), labels in proptest::collection::vec(0u8..3, 6)) {
            let mut s = raw.clone();
            for v in 0..6 {
                let t: f64 = (0..3).map(|c| s[c * 6 + v]).sum();
                for c in 0..3 { s[c * 6 + v] /= t; }
            }
            let l = dice_loss(&soft(3, [6, 1, 1], s), &labels, &[0.2, 0.3, 0.5], 1e-8).unwrap();
            prop_assert!((0.0..1.0).contains(&l));
        }

        #[test]
        fn dice_permutation_equivariant(raw in proptest::collection::vec(0.01f64..1.0, 2 * 5), labels in proptest::collection::vec(0u8..2, 5), rot in 0usize..5) {
            let mut s = raw.clone();
            for v in 0..5 {
                let t = s[v] + s[5 + v];
                s[v] /= t;
                s[5 + v] /= t;
            }
            let perm: Vec<usize> = (0..5).map(|v| (v + rot) % 5).collect();
            let mut ps = vec![0.0; 10];
            let mut pl = vec![0u8; 5];
            for (dst, &src) in perm.iter().enumerate() {
                ps[dst] = s[src];
                ps[5 + dst] = s[5 + src];
                pl[dst] = labels[src];
            }
            let a = dice_loss(&soft(2, [5, 1, 1], s), &labels, &[1.0, 2.0], 1e-8).unwrap();
            let b = dice_loss(&soft(2, [5, 1, 1], ps), &pl, &[1.0, 2.0], 1e-8).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn fake_loss_forms_agree(raw in proptest::collection::vec(0.001f64..1.0, 3)) {
            let t: f64 = raw.iter().sum();
            let p = DomainProbabilities(raw.iter().map(|v| v / t).collect());
            let a = dis_loss_fake(&p).unwrap();
            let b = dis_loss_fake_complement(&p).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
