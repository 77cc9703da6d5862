use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EpochRecord, Mode, PlateauScheduler, Sgd, TrainConfig, Trainer};
use crate::container::{self, Dtype, Header, Kind, TensorEntry};
use crate::error::{ensure, Error, Result};
use crate::losses::ResolvedLoss;
use crate::nn::{Discriminator, Generator, NetworksConfig, ParamSet, Segmenter};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub checkpoint_version: u32,
    pub mode: Mode,
    pub epoch: usize,
    pub step: u64,
    pub config: TrainConfig,
    pub networks: NetworksConfig,
    pub loss: ResolvedLoss,
    pub config_hash: String,
    optimizers: BTreeMap<String, Sgd>,
    schedulers: BTreeMap<String, PlateauScheduler>,
    rng: RngState,
    pub log: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Everything needed to resume training bit for bit, or to reuse the trained
/// networks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, StoredTensor>,
}

pub(crate) fn config_hash(mode: Mode, config: &TrainConfig, networks: &NetworksConfig, loss: &ResolvedLoss) -> String {
    let doc = serde_json::json!({ "mode": mode, "train": config, "networks": networks, "loss": loss });
    hex(&Sha256::digest(doc.to_string().as_bytes()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<Vec<u8>> {
    ensure!(s.len() % 2 == 0, Corruption, "odd-length hex string");
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|e| Error::Corruption(format!("bad hex: {e}"))))
        .collect()
}

fn put_params(out: &mut BTreeMap<String, StoredTensor>, prefix: &str, params: &ParamSet) {
    for p in params.iter() {
        out.insert(format!("{prefix}/{}", p.name), StoredTensor { shape: p.shape.clone(), values: p.values.clone() });
    }
}

/// Optimizer settings without the momentum buffers, which go to tensors.
fn settings(opt: &Sgd) -> Sgd {
    Sgd { velocity: Vec::new(), ..opt.clone() }
}

fn put_momentum(out: &mut BTreeMap<String, StoredTensor>, name: &str, opt: &Sgd, params: &ParamSet) {
    for (p, v) in params.iter().zip(opt.velocity()) {
        out.insert(format!("momentum.{name}/{}", p.name), StoredTensor { shape: p.shape.clone(), values: v.clone() });
    }
}

impl ModelCheckpoint {
    pub(crate) fn from_trainer(t: &Trainer) -> Self {
        let mut tensors = BTreeMap::new();
        let mut optimizers = BTreeMap::new();
        if let Some(g) = &t.generator {
            put_params(&mut tensors, "generator", g.params());
            for (name, opt) in [("pretrain", &t.opt_pretrain), ("generator", &t.opt_g)] {
                if let Some(o) = opt {
                    put_momentum(&mut tensors, name, o, g.params());
                    optimizers.insert(name.to_string(), settings(o));
                }
            }
        }
        put_params(&mut tensors, "segmenter", t.segmenter.params());
        put_momentum(&mut tensors, "segmenter", &t.opt_s, t.segmenter.params());
        optimizers.insert("segmenter".into(), settings(&t.opt_s));
        if let (Some(d), Some(o)) = (&t.discriminator, &t.opt_d) {
            put_params(&mut tensors, "discriminator", d.params());
            put_momentum(&mut tensors, "discriminator", o, d.params());
            optimizers.insert("discriminator".into(), settings(o));
        }
        let schedulers = BTreeMap::from([("gs".to_string(), t.sched_gs.clone()), ("d".to_string(), t.sched_d.clone())]);
        let rng = RngState {
            seed: hex(&t.rng.get_seed()),
            stream: t.rng.get_stream(),
            word_pos: t.rng.get_word_pos().to_string(),
        };
        ModelCheckpoint {
            meta: CheckpointMeta {
                checkpoint_version: CHECKPOINT_VERSION,
                mode: t.mode,
                epoch: t.epoch,
                step: t.step,
                config_hash: config_hash(t.mode, &t.config, &t.networks, &t.loss),
                config: t.config.clone(),
                networks: t.networks.clone(),
                loss: t.loss.clone(),
                optimizers,
                schedulers,
                rng,
                log: t.log.clone(),
            },
            tensors,
        }
    }

    pub fn mode(&self) -> Mode {
        self.meta.mode
    }

    pub fn epoch(&self) -> usize {
        self.meta.epoch
    }

    pub fn has_generator(&self) -> bool {
        self.tensors.keys().any(|k| k.starts_with("generator/"))
    }

    pub fn has_discriminator(&self) -> bool {
        self.tensors.keys().any(|k| k.starts_with("discriminator/"))
    }

    fn fill(&self, prefix: &str, params: &mut ParamSet) -> Result<()> {
        for p in params.iter_mut() {
            let key = format!("{prefix}/{}", p.name);
            let t = self
                .tensors
                .get(&key)
                .ok_or_else(|| Error::Corruption(format!("checkpoint lacks tensor {key}")))?;
            ensure!(t.shape == p.shape, Corruption, "tensor {key} has shape {:?}, expected {:?}", t.shape, p.shape);
            p.values.copy_from_slice(&t.values);
        }
        Ok(())
    }

    fn momentum(&self, name: &str, config: Sgd, params: &ParamSet) -> Result<Sgd> {
        let mut opt = config;
        opt.velocity = params
            .iter()
            .map(|p| {
                let key = format!("momentum.{name}/{}", p.name);
                let t = self
                    .tensors
                    .get(&key)
                    .ok_or_else(|| Error::Corruption(format!("checkpoint lacks tensor {key}")))?;
                ensure!(t.values.len() == p.values.len(), Corruption, "tensor {key} has the wrong length");
                Ok(t.values.clone())
            })
            .collect::<Result<_>>()?;
        Ok(opt)
    }

    fn optimizer(&self, name: &str) -> Result<Sgd> {
        self.meta
            .optimizers
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Corruption(format!("checkpoint lacks optimizer {name}")))
    }

    /// The trained generator; a validation error for segmenter-only runs.
    pub fn generator(&self) -> Result<Generator> {
        ensure!(self.has_generator(), Validation, "checkpoint from a {} run holds no generator", self.meta.mode);
        let mut g = Generator::new(&self.meta.networks.generator, 0)?;
        self.fill("generator", g.params_mut())?;
        Ok(g)
    }

    pub fn segmenter(&self) -> Result<Segmenter> {
        let mut s = Segmenter::new(&self.meta.networks.segmenter, 0)?;
        self.fill("segmenter", s.params_mut())?;
        Ok(s)
    }

    pub fn discriminator(&self) -> Result<Discriminator> {
        ensure!(self.has_discriminator(), Validation, "checkpoint from a {} run holds no discriminator", self.meta.mode);
        let mut d = Discriminator::new(&self.meta.networks.discriminator, 0)?;
        self.fill("discriminator", d.params_mut())?;
        Ok(d)
    }

    pub(crate) fn restore(&self) -> Result<Trainer> {
        let m = &self.meta;
        ensure!(
            m.checkpoint_version == CHECKPOINT_VERSION,
            Format,
            "unsupported checkpoint version {}",
            m.checkpoint_version
        );
        ensure!(
            config_hash(m.mode, &m.config, &m.networks, &m.loss) == m.config_hash,
            Corruption,
            "checkpoint configuration does not match its hash"
        );
        let mut t = Trainer::new(m.mode, m.config.clone(), m.networks.clone(), m.loss.clone())?;
        if let Some(g) = t.generator.as_mut() {
            self.fill("generator", g.params_mut())?;
            let g = t.generator.as_ref().expect("just filled");
            t.opt_pretrain = Some(self.momentum("pretrain", self.optimizer("pretrain")?, g.params())?);
            t.opt_g = Some(self.momentum("generator", self.optimizer("generator")?, g.params())?);
        }
        self.fill("segmenter", t.segmenter.params_mut())?;
        t.opt_s = self.momentum("segmenter", self.optimizer("segmenter")?, t.segmenter.params())?;
        if let Some(d) = t.discriminator.as_mut() {
            self.fill("discriminator", d.params_mut())?;
            let d = t.discriminator.as_ref().expect("just filled");
            t.opt_d = Some(self.momentum("discriminator", self.optimizer("discriminator")?, d.params())?);
        }
        let sched = |k: &str| {
            m.schedulers
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Corruption(format!("checkpoint lacks scheduler {k}")))
        };
        t.sched_gs = sched("gs")?;
        t.sched_d = sched("d")?;
        let seed: [u8; 32] = unhex(&m.rng.seed)?
            .try_into()
            .map_err(|_| Error::Corruption("RNG seed must be 32 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(m.rng.stream);
        rng.set_word_pos(
            m.rng
                .word_pos
                .parse()
                .map_err(|e| Error::Corruption(format!("bad RNG position: {e}")))?,
        );
        t.rng = rng;
        t.epoch = m.epoch;
        t.step = m.step;
        t.log = m.log.clone();
        Ok(t)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut header = Header::new(Kind::Checkpoint, Dtype::F64le);
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry { name: name.clone(), shape: t.shape.clone(), offset, len: t.values.len() });
            offset += t.values.len();
            payload.extend(container::f64_to_bytes(&t.values));
        }
        header.tensors = Some(entries);
        header.meta = Some(serde_json::to_value(&self.meta)?);
        container::encode(&header, &payload)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = container::decode(bytes)?;
        ensure!(header.kind == Kind::Checkpoint, Format, "container is not a checkpoint");
        ensure!(header.dtype == Dtype::F64le, Format, "checkpoint tensors must be f64le");
        let values = container::bytes_to_f64(payload);
        let mut tensors = BTreeMap::new();
        for e in header.tensors.unwrap_or_default() {
            ensure!(e.offset + e.len <= values.len(), Corruption, "tensor {} runs past the payload", e.name);
            ensure!(e.shape.iter().product::<usize>() == e.len, Corruption, "tensor {} shape disagrees with its length", e.name);
            tensors.insert(e.name, StoredTensor { shape: e.shape, values: values[e.offset..e.offset + e.len].to_vec() });
        }
        let meta = header.meta.ok_or_else(|| Error::Format("checkpoint lacks metadata".into()))?;
        Ok(ModelCheckpoint { meta: serde_json::from_value(meta).map_err(|e| Error::Format(format!("bad checkpoint metadata: {e}")))?, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops::Activation;
    use crate::nn::unet::UNetConfig;
    use crate::nn::{DiscriminatorConfig, GeneratorConfig, SegmenterConfig};
    use crate::pipeline::Patch;
    use crate::trainer::OptimizerConfig;
    use rand::Rng;

    fn setup(mode: Mode) -> (Trainer, Vec<Patch>) {
        let unet = UNetConfig { channels: vec![2, 4], activation: Activation::Relu, instance_norm: false };
        let networks = NetworksConfig {
            generator: GeneratorConfig { unet: unet.clone(), identity_skip: false },
            segmenter: SegmenterConfig { unet, classes: 4 },
            discriminator: DiscriminatorConfig { channels: vec![2, 4], input_size: 8, ..Default::default() },
        };
        let o = OptimizerConfig { learning_rate: 0.02, momentum: 0.9, weight_decay: 0.01 };
        let config = TrainConfig {
            pretrain_epochs: 1,
            total_epochs: 4,
            batch_size: 2,
            generator: o,
            segmenter: o,
            discriminator: o,
            seed: 11,
            ..Default::default()
        };
        let loss = ResolvedLoss { lambda: 1.0, epsilon: 1e-8, weights: vec![0.25; 4] };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let patches = (0..8)
            .map(|i| {
                let mask: Vec<u8> = (0..512).map(|_| rng.random_range(0..4u8)).collect();
                let image = mask.iter().map(|&l| l as f32 * 0.25 + rng.random_range(0.0..0.2f32)).collect();
                Patch { side: 8, image, mask, domain: 1 + i % 2, center_class: 1, origin: [0; 3], source_id: String::new() }
            })
            .collect();
        (Trainer::new(mode, config, networks, loss).unwrap(), patches)
    }

    #[test]
    fn round_trip_resumes_identically() {
        for mode in Mode::ALL {
            let (mut a, p) = setup(mode);
            a.run_epoch(&p, &p).unwrap();
            a.run_epoch(&p, &p).unwrap();
            let bytes = a.checkpoint().encode().unwrap();
            let restored = ModelCheckpoint::decode(&bytes).unwrap();
            assert_eq!(restored, a.checkpoint());
            let mut b = Trainer::from_checkpoint(&restored).unwrap();
            let ra = a.run_epoch(&p, &p).unwrap();
            let rb = b.run_epoch(&p, &p).unwrap();
            assert_eq!(ra, rb, "{mode}");
        }
    }

    #[test]
    fn segmenter_only_has_no_generator() {
        let (t, _) = setup(Mode::SegmenterOnly);
        let ck = t.checkpoint();
        assert!(!ck.has_generator() && !ck.has_discriminator());
        assert!(ck.generator().unwrap_err().is_validation());
    }

    #[test]
    fn tampered_config_is_detected() {
        let (t, _) = setup(Mode::Adversarial);
        let mut ck = t.checkpoint();
        ck.meta.config.batch_size = 3;
        assert!(matches!(Trainer::from_checkpoint(&ck), Err(Error::Corruption(_))));
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let (t, _) = setup(Mode::Adversarial);
        let bytes = t.checkpoint().encode().unwrap();
        assert!(matches!(ModelCheckpoint::decode(&bytes[..bytes.len() - 8]), Err(Error::Corruption(_))));
    }
}
