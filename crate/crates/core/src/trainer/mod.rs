//! MSE pretraining of the generator, then alternating (G, S) and D updates
//! with SGD, plateau scheduling and checkpoints.

mod checkpoint;
mod optim;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::eval::{patch_jsd, DiceAccumulator};
use crate::losses::{self, ResolvedLoss};
use crate::nn::{Discriminator, Generator, Grads, NetworksConfig, Segmenter};
use crate::pipeline::Patch;
use crate::tensor::Tensor;

pub use checkpoint::{ModelCheckpoint, CHECKPOINT_VERSION};
pub use optim::{OptimizerConfig, PlateauScheduler, SchedulerConfig, Sgd};

/// Which networks take part in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// G, S and D with the fooling term.
    Adversarial,
    /// G and S trained on Dice alone.
    NoDiscriminator,
    /// S alone on the (possibly standardized) inputs.
    SegmenterOnly,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Adversarial, Mode::NoDiscriminator, Mode::SegmenterOnly];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Adversarial => "adversarial",
            Mode::NoDiscriminator => "no_discriminator",
            Mode::SegmenterOnly => "segmenter_only",
        }
    }

    pub fn has_generator(self) -> bool {
        self != Mode::SegmenterOnly
    }

    pub fn has_discriminator(self) -> bool {
        self == Mode::Adversarial
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown mode {s:?}; expected adversarial, no_discriminator or segmenter_only")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    /// Epochs in total, pretraining included.
    pub total_epochs: usize,
    pub batch_size: usize,
    pub generator: OptimizerConfig,
    pub segmenter: OptimizerConfig,
    pub discriminator: OptimizerConfig,
    /// Generator learning rate while pretraining; the joint one when absent.
    #[serde(default)]
    pub pretrain_learning_rate: Option<f64>,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    pub seed: u64,
    #[serde(default = "default_bins")]
    pub jsd_bins: usize,
}

fn default_bins() -> usize {
    100
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pretrain_epochs: 3,
            total_epochs: 50,
            batch_size: 8,
            generator: OptimizerConfig::new(1e-5),
            segmenter: OptimizerConfig::new(1e-4),
            discriminator: OptimizerConfig::new(1e-4),
            pretrain_learning_rate: None,
            scheduler: SchedulerConfig::default(),
            seed: 0,
            jsd_bins: default_bins(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, Validation, "batch_size must be >= 1");
        self.generator.validate("generator")?;
        self.segmenter.validate("segmenter")?;
        self.discriminator.validate("discriminator")?;
        if let Some(lr) = self.pretrain_learning_rate {
            ensure!(lr > 0.0 && lr.is_finite(), Validation, "pretrain learning rate must be > 0");
        }
        ensure!(self.scheduler.patience >= 1, Validation, "scheduler patience must be >= 1");
        ensure!(self.scheduler.factor > 1.0, Validation, "scheduler factor must be > 1");
        ensure!(self.jsd_bins >= 2, Validation, "jsd_bins must be >= 2");
        Ok(())
    }

    fn pretrain_optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: self.pretrain_learning_rate.unwrap_or(self.generator.learning_rate),
            ..self.generator
        }
    }
}

/// Batches of indices into `patches`, shuffled within each domain and
/// interleaved in proportion so every batch mixes domains.
pub fn stratified_batches<R: rand::Rng + ?Sized>(patches: &[Patch], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut by_domain: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in patches.iter().enumerate() {
        by_domain.entry(p.domain).or_default().push(i);
    }
    let mut keyed = Vec::with_capacity(patches.len());
    for (&domain, idx) in by_domain.iter_mut() {
        idx.shuffle(rng);
        let n = idx.len() as f64;
        keyed.extend(idx.iter().enumerate().map(|(j, &i)| ((j as f64 + 0.5) / n, domain, i)));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let order: Vec<usize> = keyed.into_iter().map(|(_, _, i)| i).collect();
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

fn gather<'a>(patches: &'a [Patch], idx: &[usize]) -> Vec<&'a Patch> {
    idx.iter().map(|&i| &patches[i]).collect()
}

/// Value and gradients of the (G, S) objective summed over a batch.
#[derive(Debug, Clone)]
pub struct GsGradients {
    pub value: f64,
    pub dice: f64,
    pub fake: f64,
    pub generator: Option<Grads>,
    pub segmenter: Grads,
}

struct GsSample {
    dice: f64,
    fake: f64,
    g: Option<Grads>,
    s: Grads,
}

fn gs_sample(
    patch: &Patch,
    g: Option<&Generator>,
    s: &Segmenter,
    d: Option<&Discriminator>,
    loss: &ResolvedLoss,
) -> Result<GsSample> {
    let x = patch.image_tensor();
    let (xhat, g_cache) = match g {
        Some(g) => {
            let (y, c) = g.forward_cached(&x)?;
            (y, Some(c))
        }
        None => (x, None),
    };
    let (probs, s_cache) = s.forward_cached(&xhat)?;
    let (dice, grad_probs) = losses::dice_loss_with_grad(&probs, &patch.mask, &loss.weights, loss.epsilon)?;
    let mut s_grads = s.params().zero_grads();
    let mut grad_xhat = s.backward(&s_cache, &grad_probs, &mut s_grads, g.is_some());
    let mut fake = 0.0;
    if let (Some(d), Some(gx)) = (d, grad_xhat.as_mut()) {
        if loss.lambda != 0.0 {
            let (p, d_cache) = d.forward_cached(&xhat)?;
            fake = losses::dis_loss_fake(&p)?;
            let grad_p: Vec<f64> = losses::dis_loss_fake_grad(&p).iter().map(|v| -loss.lambda * v).collect();
            let mut scratch = d.params().zero_grads();
            let gd = d.backward(&d_cache, &grad_p, &mut scratch, true).expect("input gradient requested");
            gx.add_assign(&gd);
        }
    }
    let g_grads = match (g, g_cache, grad_xhat) {
        (Some(g), Some(cache), Some(gx)) => {
            let mut grads = g.params().zero_grads();
            g.backward(&cache, gx, &mut grads, false);
            Some(grads)
        }
        _ => None,
    };
    Ok(GsSample { dice, fake, g: g_grads, s: s_grads })
}

/// Gradients of `sum dice(S(G(x)), y) - lambda * sum fake_loss(D(G(x)))`
/// with respect to G and S; D only provides the input gradient.
pub fn gs_gradients(
    batch: &[&Patch],
    g: Option<&Generator>,
    s: &Segmenter,
    d: Option<&Discriminator>,
    loss: &ResolvedLoss,
) -> Result<GsGradients> {
    ensure!(!batch.is_empty(), Validation, "empty batch");
    let samples: Vec<GsSample> = batch.par_iter().map(|p| gs_sample(p, g, s, d, loss)).collect::<Result<_>>()?;
    let mut out = GsGradients {
        value: 0.0,
        dice: 0.0,
        fake: 0.0,
        generator: g.map(|g| g.params().zero_grads()),
        segmenter: s.params().zero_grads(),
    };
    for smp in &samples {
        out.dice += smp.dice;
        out.fake += smp.fake;
        out.segmenter.add_assign(&smp.s);
        if let (Some(acc), Some(gg)) = (out.generator.as_mut(), smp.g.as_ref()) {
            acc.add_assign(gg);
        }
    }
    out.value = losses::finite(out.dice - loss.lambda * out.fake, "objective_gs")?;
    Ok(out)
}

/// Value and D gradient of `sum real_loss(D(x), z) + fake_loss(D(G(x)))`.
pub fn d_gradients(batch: &[&Patch], g: &Generator, d: &Discriminator) -> Result<(f64, Grads)> {
    ensure!(!batch.is_empty(), Validation, "empty batch");
    let samples: Vec<(f64, Grads)> = batch
        .par_iter()
        .map(|patch| {
            let x = patch.image_tensor();
            let mut grads = d.params().zero_grads();
            let (p, cache) = d.forward_cached(&x)?;
            let mut value = losses::dis_loss_real(&p, patch.domain)?;
            d.backward(&cache, &losses::dis_loss_real_grad(&p, patch.domain), &mut grads, false);
            let xhat = g.forward(&x)?;
            let (p, cache) = d.forward_cached(&xhat)?;
            value += losses::dis_loss_fake(&p)?;
            d.backward(&cache, &losses::dis_loss_fake_grad(&p), &mut grads, false);
            Ok((value, grads))
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut grads = d.params().zero_grads();
    for (v, gr) in &samples {
        total += v;
        grads.add_assign(gr);
    }
    Ok((losses::finite(total, "objective_d")?, grads))
}

/// Per-voxel mean squared error between `G(x)` and `x`.
pub fn reconstruction_mse(g: &Generator, patch: &Patch) -> Result<f64> {
    let x = patch.image_tensor();
    let y = g.forward(&x)?;
    Ok(mse(y.data(), x.data()))
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64
}

/// Batch-mean reconstruction MSE and its gradient.
pub fn mse_gradients(batch: &[&Patch], g: &Generator) -> Result<(f64, Grads)> {
    ensure!(!batch.is_empty(), Validation, "empty batch");
    let n = batch.len() as f64;
    let samples: Vec<(f64, Grads)> = batch
        .par_iter()
        .map(|patch| {
            let x = patch.image_tensor();
            let (y, cache) = g.forward_cached(&x)?;
            let m = y.len() as f64;
            let grad: Vec<f64> = y.data().iter().zip(x.data()).map(|(p, q)| 2.0 * (p - q) / (m * n)).collect();
            let mut grads = g.params().zero_grads();
            g.backward(&cache, Tensor::from_vec(1, y.dims(), grad)?, &mut grads, false);
            Ok((mse(y.data(), x.data()), grads))
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut grads = g.params().zero_grads();
    for (v, gr) in &samples {
        total += v;
        grads.add_assign(gr);
    }
    Ok((losses::finite(total / n, "reconstruction MSE")?, grads))
}

/// One update of G (when present) and S against the (G, S) objective. D is
/// only read.
pub fn train_step_gs(
    batch: &[&Patch],
    g: Option<(&mut Generator, &mut Sgd)>,
    s: &mut Segmenter,
    opt_s: &mut Sgd,
    d: Option<&Discriminator>,
    loss: &ResolvedLoss,
) -> Result<f64> {
    let grads = gs_gradients(batch, g.as_ref().map(|(g, _)| &**g), s, d, loss)?;
    if let Some(gg) = &grads.generator {
        ensure!(gg.all_finite(), Divergence, "non-finite generator gradient");
    }
    ensure!(grads.segmenter.all_finite(), Divergence, "non-finite segmenter gradient");
    if let (Some((g, opt_g)), Some(gg)) = (g, &grads.generator) {
        opt_g.step(g.params_mut(), gg)?;
    }
    opt_s.step(s.params_mut(), &grads.segmenter)?;
    Ok(grads.value)
}

/// One update of D against its objective. G is only read.
pub fn train_step_d(batch: &[&Patch], g: &Generator, d: &mut Discriminator, opt: &mut Sgd) -> Result<f64> {
    let (value, grads) = d_gradients(batch, g, d)?;
    opt.step(d.params_mut(), &grads)?;
    Ok(value)
}

/// One MSE pretraining update of G.
pub fn pretrain_step(batch: &[&Patch], g: &mut Generator, opt: &mut Sgd) -> Result<f64> {
    let (value, grads) = mse_gradients(batch, g)?;
    opt.step(g.params_mut(), &grads)?;
    Ok(value)
}

/// Trains `g` to reproduce its input for `config.pretrain_epochs` epochs and
/// returns the mean batch MSE of each epoch.
pub fn pretrain_generator(g: &mut Generator, train: &[Patch], config: &TrainConfig) -> Result<Vec<f64>> {
    config.validate()?;
    ensure!(!train.is_empty(), Validation, "no training patches");
    let mut rng = trainer_rng(config.seed);
    let mut opt = Sgd::new(&config.pretrain_optimizer(), g.params());
    let mut trace = Vec::with_capacity(config.pretrain_epochs);
    let mut step = 0u64;
    for _ in 0..config.pretrain_epochs {
        let batches = stratified_batches(train, config.batch_size, &mut rng);
        let mut sum = 0.0;
        for idx in &batches {
            step += 1;
            sum += pretrain_step(&gather(train, idx), g, &mut opt).map_err(|e| at_step(e, step))?;
        }
        trace.push(sum / batches.len() as f64);
    }
    Ok(trace)
}

fn trainer_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4);
    rng
}

fn at_step(e: Error, step: u64) -> Error {
    match e {
        Error::Divergence(m) => Error::Divergence(format!("step {step}: {m}")),
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Joint,
}

/// Validation metrics after one epoch; objectives are means per patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    pub mse: Option<f64>,
    pub input_variance: f64,
    pub objective_gs: f64,
    pub objective_d: Option<f64>,
    /// Hard Dice of classes 1..C over all validation voxels.
    pub dice: Vec<f64>,
    pub dice_empty: bool,
    pub jsd_inputs: Option<f64>,
    pub jsd_outputs: Option<f64>,
}

impl ValidationMetrics {
    pub fn mean_dice(&self) -> f64 {
        self.dice.iter().sum::<f64>() / self.dice.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub generator: Option<f64>,
    pub segmenter: f64,
    pub discriminator: Option<f64>,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean per patch of the MSE (pretraining) or the (G, S) objective.
    pub train_loss: f64,
    pub train_loss_d: Option<f64>,
    pub batch_losses: Vec<f64>,
    pub batch_losses_d: Vec<f64>,
    pub validation: ValidationMetrics,
    pub learning_rates: LearningRates,
    pub lr_reduced: bool,
}

/// Full training state; cloning it is a cheap snapshot.
#[derive(Debug, Clone)]
pub struct Trainer {
    mode: Mode,
    config: TrainConfig,
    networks: NetworksConfig,
    loss: ResolvedLoss,
    pub(crate) generator: Option<Generator>,
    pub(crate) segmenter: Segmenter,
    pub(crate) discriminator: Option<Discriminator>,
    pub(crate) opt_pretrain: Option<Sgd>,
    pub(crate) opt_g: Option<Sgd>,
    pub(crate) opt_s: Sgd,
    pub(crate) opt_d: Option<Sgd>,
    pub(crate) sched_gs: PlateauScheduler,
    pub(crate) sched_d: PlateauScheduler,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) epoch: usize,
    pub(crate) step: u64,
    pub(crate) log: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(mode: Mode, config: TrainConfig, networks: NetworksConfig, loss: ResolvedLoss) -> Result<Self> {
        config.validate()?;
        ensure!(
            loss.weights.len() == networks.segmenter.classes,
            Validation,
            "{} class weights for a {}-class segmenter",
            loss.weights.len(),
            networks.segmenter.classes
        );
        for (name, o) in [("generator", &config.generator), ("segmenter", &config.segmenter), ("discriminator", &config.discriminator)] {
            if o.weight_decay >= 0.1 {
                log::warn!("{name} weight decay {} is aggressive for networks this small", o.weight_decay);
            }
        }
        let generator = match mode.has_generator() {
            true => Some(Generator::new(&networks.generator, config.seed)?),
            false => None,
        };
        let discriminator = match mode.has_discriminator() {
            true => Some(Discriminator::new(&networks.discriminator, config.seed)?),
            false => None,
        };
        let segmenter = Segmenter::new(&networks.segmenter, config.seed)?;
        let opt_pretrain = generator.as_ref().map(|g| Sgd::new(&config.pretrain_optimizer(), g.params()));
        let opt_g = generator.as_ref().map(|g| Sgd::new(&config.generator, g.params()));
        let opt_d = discriminator.as_ref().map(|d| Sgd::new(&config.discriminator, d.params()));
        let opt_s = Sgd::new(&config.segmenter, segmenter.params());
        Ok(Trainer {
            mode,
            sched_gs: PlateauScheduler::new(&config.scheduler),
            sched_d: PlateauScheduler::new(&config.scheduler),
            rng: trainer_rng(config.seed),
            config,
            networks,
            loss,
            generator,
            segmenter,
            discriminator,
            opt_pretrain,
            opt_g,
            opt_s,
            opt_d,
            epoch: 0,
            step: 0,
            log: Vec::new(),
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn networks(&self) -> &NetworksConfig {
        &self.networks
    }

    pub fn loss(&self) -> &ResolvedLoss {
        &self.loss
    }

    pub fn generator(&self) -> Option<&Generator> {
        self.generator.as_ref()
    }

    pub fn segmenter(&self) -> &Segmenter {
        &self.segmenter
    }

    pub fn discriminator(&self) -> Option<&Discriminator> {
        self.discriminator.as_ref()
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn log(&self) -> &[EpochRecord] {
        &self.log
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.total_epochs
    }

    /// Extends the epoch budget, e.g. after resuming.
    pub fn set_total_epochs(&mut self, total: usize) {
        self.config.total_epochs = total;
    }

    fn in_pretraining(&self, epoch: usize) -> bool {
        self.mode.has_generator() && epoch <= self.config.pretrain_epochs
    }

    /// Runs one epoch over `train` and evaluates on `val`.
    pub fn run_epoch(&mut self, train: &[Patch], val: &[Patch]) -> Result<EpochRecord> {
        ensure!(!train.is_empty(), Validation, "no training patches");
        ensure!(!val.is_empty(), Validation, "no validation patches");
        let epoch = self.epoch + 1;
        let pretrain = self.in_pretraining(epoch);
        let batches = stratified_batches(train, self.config.batch_size, &mut self.rng);
        let mut batch_losses = Vec::with_capacity(batches.len());
        let mut batch_losses_d = Vec::new();
        for idx in &batches {
            self.step += 1;
            let batch = gather(train, idx);
            let step = self.step;
            if pretrain {
                let g = self.generator.as_mut().expect("pretraining needs G");
                let opt = self.opt_pretrain.as_mut().expect("pretraining optimizer");
                batch_losses.push(pretrain_step(&batch, g, opt).map_err(|e| at_step(e, step))?);
                continue;
            }
            let g = self.generator.as_mut().zip(self.opt_g.as_mut());
            let v = train_step_gs(&batch, g, &mut self.segmenter, &mut self.opt_s, self.discriminator.as_ref(), &self.loss)
                .map_err(|e| at_step(e, step))?;
            batch_losses.push(v);
            if let (Some(d), Some(opt_d)) = (self.discriminator.as_mut(), self.opt_d.as_mut()) {
                let g = self.generator.as_ref().expect("adversarial mode has G");
                batch_losses_d.push(train_step_d(&batch, g, d, opt_d).map_err(|e| at_step(e, step))?);
            }
        }
        let n = train.len() as f64;
        let train_loss = if pretrain {
            batch_losses.iter().sum::<f64>() / batches.len() as f64
        } else {
            batch_losses.iter().sum::<f64>() / n
        };
        let train_loss_d = (!batch_losses_d.is_empty()).then(|| batch_losses_d.iter().sum::<f64>() / n);
        let validation = self.validate(val)?;
        let mut lr_reduced = false;
        if !pretrain {
            let factor = 1.0 / self.config.scheduler.factor;
            if self.sched_gs.observe(validation.objective_gs) {
                lr_reduced = true;
                self.opt_s.scale_learning_rate(factor);
                if let Some(o) = self.opt_g.as_mut() {
                    o.scale_learning_rate(factor);
                }
            }
            if let (Some(vd), Some(o)) = (validation.objective_d, self.opt_d.as_mut()) {
                if self.sched_d.observe(vd) {
                    lr_reduced = true;
                    o.scale_learning_rate(factor);
                }
            }
        }
        self.epoch = epoch;
        let record = EpochRecord {
            epoch,
            phase: if pretrain { Phase::Pretrain } else { Phase::Joint },
            train_loss,
            train_loss_d,
            batch_losses,
            batch_losses_d,
            validation,
            learning_rates: self.learning_rates(),
            lr_reduced,
        };
        log::info!(
            "epoch {epoch} {:?}: train {:.5}, val gs {:.5}, val dice {:.4}",
            record.phase,
            record.train_loss,
            record.validation.objective_gs,
            record.validation.mean_dice()
        );
        self.log.push(record.clone());
        Ok(record)
    }

    pub fn learning_rates(&self) -> LearningRates {
        LearningRates {
            generator: self.opt_g.as_ref().map(|o| o.learning_rate),
            segmenter: self.opt_s.learning_rate,
            discriminator: self.opt_d.as_ref().map(|o| o.learning_rate),
        }
    }

    /// Trains until `total_epochs`. On divergence the state is rolled back to
    /// the end of the last finished epoch and the error is returned.
    pub fn fit(&mut self, train: &[Patch], val: &[Patch]) -> Result<()> {
        while !self.is_finished() {
            let snapshot = self.clone();
            if let Err(e) = self.run_epoch(train, val) {
                *self = snapshot;
                return Err(e);
            }
        }
        Ok(())
    }

    /// Evaluates objectives, hard Dice and intensity JSD on `val`.
    pub fn validate(&self, val: &[Patch]) -> Result<ValidationMetrics> {
        let g = self.generator.as_ref();
        let d = self.discriminator.as_ref();
        let s = &self.segmenter;
        let loss = &self.loss;
        struct Row {
            mse: f64,
            dice_loss: f64,
            fake: f64,
            obj_d: f64,
            pred: Vec<u8>,
            fg_in: Vec<f64>,
            fg_out: Vec<f64>,
        }
        let rows: Vec<Row> = val
            .par_iter()
            .map(|patch| {
                let x = patch.image_tensor();
                let xhat = match g {
                    Some(g) => g.forward(&x)?,
                    None => x.clone(),
                };
                let probs = s.forward(&xhat)?;
                let dice_loss = losses::dice_loss(&probs, &patch.mask, &loss.weights, loss.epsilon)?;
                let (mut fake, mut obj_d) = (0.0, 0.0);
                if let Some(d) = d {
                    fake = losses::dis_loss_fake(&d.forward(&xhat)?)?;
                    obj_d = losses::dis_loss_real(&d.forward(&x)?, patch.domain)? + fake;
                }
                let fg = |t: &Tensor| -> Vec<f64> {
                    t.data().iter().zip(&patch.mask).filter(|(_, &l)| l != 0).map(|(&v, _)| v).collect()
                };
                Ok(Row {
                    mse: mse(xhat.data(), x.data()),
                    dice_loss,
                    fake,
                    obj_d,
                    pred: probs.argmax(),
                    fg_in: fg(&x),
                    fg_out: fg(&xhat),
                })
            })
            .collect::<Result<_>>()?;
        let n = rows.len() as f64;
        let mut acc = DiceAccumulator::new(s.classes());
        let (mut mse_sum, mut gs_sum, mut d_sum) = (0.0, 0.0, 0.0);
        for (row, patch) in rows.iter().zip(val) {
            acc.add(&row.pred, &patch.mask);
            mse_sum += row.mse;
            gs_sum += row.dice_loss - if d.is_some() { loss.lambda * row.fake } else { 0.0 };
            d_sum += row.obj_d;
        }
        let (dice, dice_empty) = acc.foreground_scores();
        let jsd_of = |pick: fn(&Row) -> &Vec<f64>| -> Option<f64> {
            let sets: Vec<Vec<f64>> = rows.iter().map(|r| pick(r).clone()).collect();
            patch_jsd(&sets, self.config.jsd_bins).ok()
        };
        let all: Vec<f64> = val.iter().flat_map(|p| p.image.iter().map(|&v| v as f64)).collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let input_variance = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / all.len() as f64;
        Ok(ValidationMetrics {
            mse: g.map(|_| mse_sum / n),
            input_variance,
            objective_gs: losses::finite(gs_sum / n, "validation objective_gs")?,
            objective_d: match d {
                Some(_) => Some(losses::finite(d_sum / n, "validation objective_d")?),
                None => None,
            },
            dice,
            dice_empty,
            jsd_inputs: jsd_of(|r| &r.fg_in),
            jsd_outputs: g.and_then(|_| jsd_of(|r| &r.fg_out)),
        })
    }

    pub fn checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint::from_trainer(self)
    }

    pub fn from_checkpoint(checkpoint: &ModelCheckpoint) -> Result<Self> {
        checkpoint.restore()
    }
}

/// Metrics log as newline-delimited JSON.
pub fn metrics_ndjson(log: &[EpochRecord]) -> Result<String> {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{DiscriminatorConfig, GeneratorConfig, SegmenterConfig};
    use crate::nn::unet::UNetConfig;
    use crate::nn::ops::Activation;
    use rand::Rng;

    fn tiny_networks() -> NetworksConfig {
        let unet = UNetConfig { channels: vec![2, 4], activation: Activation::Relu, instance_norm: false };
        NetworksConfig {
            generator: GeneratorConfig { unet: unet.clone(), identity_skip: false },
            segmenter: SegmenterConfig { unet, classes: 4 },
            discriminator: DiscriminatorConfig { channels: vec![2, 4], input_size: 8, ..Default::default() },
        }
    }

    fn patches(n: usize, seed: u64) -> Vec<Patch> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let domain = 1 + i % 2;
                let mask: Vec<u8> = (0..512).map(|_| rng.random_range(0..4u8)).collect();
                let scale = domain as f32;
                let image = mask.iter().map(|&l| scale * (l as f32 * 0.3 + rng.random_range(0.0..0.1f32))).collect();
                Patch { side: 8, image, mask, domain, center_class: 1, origin: [0; 3], source_id: format!("p{i}") }
            })
            .collect()
    }

    fn loss() -> ResolvedLoss {
        ResolvedLoss { lambda: 1.0, epsilon: 1e-8, weights: vec![0.25; 4] }
    }

    fn config(lr: f64) -> TrainConfig {
        let o = OptimizerConfig { learning_rate: lr, momentum: 0.9, weight_decay: 0.0 };
        TrainConfig {
            pretrain_epochs: 1,
            total_epochs: 3,
            batch_size: 4,
            generator: o,
            segmenter: o,
            discriminator: o,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn batches_cover_every_patch_once_and_mix_domains() {
        let p = patches(16, 1);
        let mut rng = trainer_rng(3);
        let b = stratified_batches(&p, 4, &mut rng);
        let mut all: Vec<usize> = b.iter().flatten().copied().collect();
        all.sort();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
        for batch in &b {
            assert!(batch.iter().any(|&i| p[i].domain == 1) && batch.iter().any(|&i| p[i].domain == 2));
        }
    }

    #[test]
    fn mode_contract() {
        let t = Trainer::new(Mode::SegmenterOnly, config(0.01), tiny_networks(), loss()).unwrap();
        assert!(t.generator().is_none() && t.discriminator().is_none());
        let t = Trainer::new(Mode::NoDiscriminator, config(0.01), tiny_networks(), loss()).unwrap();
        assert!(t.generator().is_some() && t.discriminator().is_none());
        assert_eq!("adversarial".parse::<Mode>().unwrap(), Mode::Adversarial);
        assert!("gan".parse::<Mode>().is_err());
    }

    #[test]
    fn gs_step_leaves_discriminator_untouched() {
        let p = patches(4, 2);
        let batch: Vec<&Patch> = p.iter().collect();
        let mut t = Trainer::new(Mode::Adversarial, config(0.05), tiny_networks(), loss()).unwrap();
        let d_before = t.discriminator.as_ref().unwrap().params().fingerprint();
        let g_before = t.generator.as_ref().unwrap().params().fingerprint();
        let g = t.generator.as_mut().zip(t.opt_g.as_mut());
        train_step_gs(&batch, g, &mut t.segmenter, &mut t.opt_s, t.discriminator.as_ref(), &t.loss).unwrap();
        assert_eq!(t.discriminator.as_ref().unwrap().params().fingerprint(), d_before);
        assert_ne!(t.generator.as_ref().unwrap().params().fingerprint(), g_before);
    }

    #[test]
    fn d_step_leaves_generator_and_segmenter_untouched() {
        let p = patches(4, 2);
        let batch: Vec<&Patch> = p.iter().collect();
        let mut t = Trainer::new(Mode::Adversarial, config(0.05), tiny_networks(), loss()).unwrap();
        let g_before = t.generator.as_ref().unwrap().params().fingerprint();
        let s_before = t.segmenter.params().fingerprint();
        let d_before = t.discriminator.as_ref().unwrap().params().fingerprint();
        train_step_d(&batch, t.generator.as_ref().unwrap(), t.discriminator.as_mut().unwrap(), t.opt_d.as_mut().unwrap()).unwrap();
        assert_eq!(t.generator.as_ref().unwrap().params().fingerprint(), g_before);
        assert_eq!(t.segmenter.params().fingerprint(), s_before);
        assert_ne!(t.discriminator.as_ref().unwrap().params().fingerprint(), d_before);
    }

    #[test]
    fn zero_learning_rate_changes_nothing_but_returns_value() {
        let p = patches(4, 2);
        let batch: Vec<&Patch> = p.iter().collect();
        let mut t = Trainer::new(Mode::Adversarial, config(1.0), tiny_networks(), loss()).unwrap();
        for o in [t.opt_g.as_mut().unwrap(), &mut t.opt_s, t.opt_d.as_mut().unwrap()] {
            o.learning_rate = 0.0;
        }
        let prints = |t: &Trainer| {
            [t.generator.as_ref().unwrap().params().fingerprint(), t.segmenter.params().fingerprint(), t.discriminator.as_ref().unwrap().params().fingerprint()]
        };
        let before = prints(&t);
        let g = t.generator.as_mut().zip(t.opt_g.as_mut());
        let v = train_step_gs(&batch, g, &mut t.segmenter, &mut t.opt_s, t.discriminator.as_ref(), &t.loss).unwrap();
        let vd = train_step_d(&batch, t.generator.as_ref().unwrap(), t.discriminator.as_mut().unwrap(), t.opt_d.as_mut().unwrap()).unwrap();
        assert!(v.is_finite() && vd.is_finite());
        assert_eq!(prints(&t), before);
    }

    #[test]
    fn objective_values_match_the_loss_module() {
        let p = patches(4, 9);
        let batch: Vec<&Patch> = p.iter().collect();
        let t = Trainer::new(Mode::Adversarial, config(0.01), tiny_networks(), loss()).unwrap();
        let (g, s, d) = (t.generator().unwrap(), t.segmenter(), t.discriminator().unwrap());
        let grads = gs_gradients(&batch, Some(g), s, Some(d), t.loss()).unwrap();
        let direct = losses::objective_gs(&p, Some(g), s, Some(d), t.loss()).unwrap();
        assert!((grads.value - direct).abs() < 1e-9);
        let (vd, _) = d_gradients(&batch, g, d).unwrap();
        assert!((vd - losses::objective_d(&p, g, d).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn pretraining_zero_epochs_is_a_no_op() {
        let p = patches(4, 2);
        let mut g = Generator::new(&tiny_networks().generator, 1).unwrap();
        let before = g.params().fingerprint();
        let trace = pretrain_generator(&mut g, &p, &TrainConfig { pretrain_epochs: 0, ..config(0.1) }).unwrap();
        assert!(trace.is_empty());
        assert_eq!(g.params().fingerprint(), before);
    }

    #[test]
    fn epochs_follow_the_schedule() {
        let p = patches(8, 4);
        let v = patches(4, 5);
        let mut t = Trainer::new(Mode::Adversarial, config(0.01), tiny_networks(), loss()).unwrap();
        t.fit(&p, &v).unwrap();
        let log = t.log();
        assert_eq!(log.len(), 3);
        assert_eq!(log[0].phase, Phase::Pretrain);
        assert!(log[0].batch_losses_d.is_empty());
        for r in &log[1..] {
            assert_eq!(r.phase, Phase::Joint);
            assert_eq!(r.batch_losses.len(), 2);
            assert_eq!(r.batch_losses_d.len(), 2);
            assert_eq!(r.validation.dice.len(), 3);
        }
        assert_eq!(metrics_ndjson(log).unwrap().lines().count(), 3);
    }

    #[test]
    fn segmenter_only_never_pretrains() {
        let p = patches(8, 4);
        let mut t = Trainer::new(Mode::SegmenterOnly, config(0.01), tiny_networks(), loss()).unwrap();
        let r = t.run_epoch(&p, &p).unwrap();
        assert_eq!(r.phase, Phase::Joint);
        assert!(r.validation.mse.is_none() && r.validation.jsd_outputs.is_none());
    }
}
