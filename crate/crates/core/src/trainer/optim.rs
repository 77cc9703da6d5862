use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::{Grads, ParamKind, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn new(learning_rate: f64) -> Self {
        OptimizerConfig { learning_rate, momentum: 0.9, weight_decay: 0.1 }
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            Validation,
            "{what} learning rate must be > 0"
        );
        ensure!((0.0..1.0).contains(&self.momentum), Validation, "{what} momentum must lie in [0, 1)");
        ensure!(
            self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
            Validation,
            "{what} weight decay must be >= 0"
        );
        Ok(())
    }
}

/// SGD with heavy-ball momentum and decoupled weight decay on convolution and
/// linear kernels:
///
/// ```text
/// v <- momentum * v + g
/// p <- p - lr * v - lr * weight_decay * p
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    #[serde(skip)]
    pub(crate) velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: &OptimizerConfig, params: &ParamSet) -> Self {
        Sgd {
            learning_rate: config.learning_rate,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            velocity: params.iter().map(|p| vec![0.0; p.values.len()]).collect(),
        }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// Applies one update. Nothing is modified when a gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) -> Result<()> {
        ensure!(grads.0.len() == params.len(), Shape, "gradient and parameter lists differ in length");
        if !grads.all_finite() {
            return Err(Error::Divergence("non-finite gradient".into()));
        }
        let (lr, mu) = (self.learning_rate, self.momentum);
        for ((p, g), v) in params.iter_mut().zip(&grads.0).zip(&mut self.velocity) {
            let decay = if p.kind == ParamKind::Kernel { self.weight_decay } else { 0.0 };
            for ((w, &gi), vi) in p.values.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = mu * *vi + gi;
                *w -= lr * *vi + lr * decay * *w;
            }
        }
        Ok(())
    }

    pub fn scale_learning_rate(&mut self, factor: f64) {
        self.learning_rate *= factor;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    /// Epochs without improvement before the learning rate drops.
    pub patience: usize,
    /// Learning rates are divided by this.
    pub factor: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig { patience: 3, factor: 10.0 }
    }
}

/// Reduce-on-plateau: after `patience` consecutive epochs whose monitored
/// loss is not strictly below the best seen so far, signal a reduction and
/// start counting again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub patience: usize,
    pub factor: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
    pub reductions: usize,
}

impl PlateauScheduler {
    pub fn new(config: &SchedulerConfig) -> Self {
        PlateauScheduler { patience: config.patience, factor: config.factor, best: None, bad_epochs: 0, reductions: 0 }
    }

    /// Records one epoch; returns true when learning rates must be divided
    /// by `factor`.
    pub fn observe(&mut self, loss: f64) -> bool {
        match self.best {
            Some(b) if loss >= b || loss.is_nan() => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.patience {
                    self.bad_epochs = 0;
                    self.reductions += 1;
                    return true;
                }
                false
            }
            _ => {
                self.best = Some(loss);
                self.bad_epochs = 0;
                false
            }
        }
    }

    pub fn multiplier(&self) -> f64 {
        self.factor.powi(-(self.reductions as i32))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Generator, GeneratorConfig};

    fn reductions(trace: &[f64]) -> Vec<usize> {
        let mut s = PlateauScheduler::new(&SchedulerConfig::default());
        trace
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| s.observe(l).then_some(i + 1))
            .collect()
    }

    #[test]
    fn flat_trace_reduces_once_after_epoch_four() {
        assert_eq!(reductions(&[1.0, 1.0, 1.0, 1.0]), vec![4]);
    }

    #[test]
    fn improving_trace_never_reduces() {
        assert!(reductions(&[5.0, 4.0, 3.0, 2.0, 1.0, 0.5]).is_empty());
    }

    #[test]
    fn long_plateau_reduces_every_patience_epochs() {
        assert_eq!(reductions(&[1.0; 10]), vec![4, 7, 10]);
        assert_eq!(reductions(&[1.0, 2.0, 2.0, 0.5, 0.6, 0.7, 0.8]), vec![7]);
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let mut g = Generator::new(&GeneratorConfig::default(), 1).unwrap();
        let before = g.params().fingerprint();
        let grads = Grads(g.params().iter().map(|p| vec![1.0; p.values.len()]).collect());
        let mut opt = Sgd::new(&OptimizerConfig { learning_rate: 0.0, momentum: 0.9, weight_decay: 0.1 }, g.params());
        opt.step(g.params_mut(), &grads).unwrap();
        assert_eq!(g.params().fingerprint(), before);
    }

    #[test]
    fn weight_decay_skips_biases() {
        let mut g = Generator::new(&GeneratorConfig::default(), 1).unwrap();
        for p in g.params_mut().iter_mut() {
            p.values.iter_mut().for_each(|v| *v = 1.0);
        }
        let grads = g.params().zero_grads();
        let mut opt = Sgd::new(&OptimizerConfig { learning_rate: 0.5, momentum: 0.9, weight_decay: 0.1 }, g.params());
        opt.step(g.params_mut(), &grads).unwrap();
        for p in g.params().iter() {
            let expect = if p.kind == ParamKind::Kernel { 0.95 } else { 1.0 };
            assert!(p.values.iter().all(|&v| v == expect), "{}", p.name);
        }
    }

    #[test]
    fn momentum_accumulates() {
        let mut g = Generator::new(&GeneratorConfig::default(), 1).unwrap();
        let start = g.params().get(0).values[0];
        let mut grads = g.params().zero_grads();
        grads.0[0][0] = 1.0;
        let mut opt = Sgd::new(&OptimizerConfig { learning_rate: 0.1, momentum: 0.5, weight_decay: 0.0 }, g.params());
        opt.step(g.params_mut(), &grads).unwrap();
        opt.step(g.params_mut(), &grads).unwrap();
        // Steps of 0.1 and 0.15.
        assert!((g.params().get(0).values[0] - (start - 0.25)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_rejected_untouched() {
        let mut g = Generator::new(&GeneratorConfig::default(), 1).unwrap();
        let before = g.params().fingerprint();
        let mut grads = g.params().zero_grads();
        grads.0[1][0] = f64::NAN;
        let mut opt = Sgd::new(&OptimizerConfig::new(0.1), g.params());
        assert!(matches!(opt.step(g.params_mut(), &grads), Err(Error::Divergence(_))));
        assert_eq!(g.params().fingerprint(), before);
    }
}
