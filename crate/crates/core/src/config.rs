//! The single JSON document that drives every CLI stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::losses::LossConfig;
use crate::nn::unet::UNetConfig;
use crate::nn::{GeneratorConfig, NetworksConfig, SegmenterConfig};
use crate::phantom::{self, PhantomConfig};
use crate::pipeline::PipelineConfig;
use crate::trainer::{OptimizerConfig, TrainConfig};
use crate::volume::{DatasetManifest, DomainSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Bins of the per-class histogram files.
    pub histogram_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { histogram_bins: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub phantom: PhantomConfig,
    /// Existing dataset to use instead of generating phantoms; relative
    /// paths resolve against the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub pipeline: PipelineConfig,
    pub networks: NetworksConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    /// Sized to run the whole seven-row matrix on one CPU core in minutes.
    fn default() -> Self {
        let seed = 7;
        let opt = |learning_rate| OptimizerConfig { learning_rate, momentum: 0.9, weight_decay: 1e-4 };
        ExperimentConfig {
            seed,
            phantom: PhantomConfig { seed, ..PhantomConfig::default() },
            manifest: None,
            pipeline: PipelineConfig { seed, ..PipelineConfig::default() },
            networks: NetworksConfig {
                generator: GeneratorConfig { identity_skip: true, ..GeneratorConfig::default() },
                segmenter: SegmenterConfig {
                    unet: UNetConfig { channels: vec![16, 32], ..UNetConfig::default() },
                    ..SegmenterConfig::default()
                },
                ..NetworksConfig::default()
            },
            loss: LossConfig::default(),
            train: TrainConfig {
                pretrain_epochs: 3,
                total_epochs: 20,
                batch_size: 8,
                generator: opt(5e-5),
                segmenter: opt(2e-3),
                discriminator: opt(5e-4),
                pretrain_learning_rate: Some(5e-3),
                seed,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads and validates a config file. A missing file is a validation
    /// error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Validation(format!("config file {} not found", path.display())),
            _ => Error::Io(e),
        })?;
        let mut config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Validation(format!("invalid config {}: {e}", path.display())))?;
        if let (Some(m), Some(dir)) = (config.manifest.as_mut(), path.parent()) {
            if m.is_relative() {
                *m = dir.join(&*m);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Replaces the global seed and every seed derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.phantom.seed = seed;
        self.pipeline.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        let n = &self.networks;
        n.generator.unet.validate()?;
        n.segmenter.unet.validate()?;
        let classes = self.phantom.classes();
        ensure!(
            n.segmenter.classes == classes,
            Validation,
            "segmenter predicts {} classes but the phantoms have {classes}",
            n.segmenter.classes
        );
        ensure!(
            n.discriminator.domains == self.phantom.domains.len(),
            Validation,
            "discriminator has {} real classes but there are {} domains",
            n.discriminator.domains,
            self.phantom.domains.len()
        );
        let p = self.pipeline.patch_size;
        ensure!(p >= 2 && self.pipeline.stride >= 1, Validation, "patch size and stride must be positive");
        ensure!(
            n.discriminator.input_size == p,
            Validation,
            "discriminator input size {} differs from patch size {p}",
            n.discriminator.input_size
        );
        for (name, div) in [("generator", n.generator.unet.divisor()), ("segmenter", n.segmenter.unet.divisor())] {
            ensure!(p % div == 0, Validation, "patch size {p} is not divisible by the {name} depth factor {div}");
        }
        let split_sum: f64 = self.pipeline.split.iter().sum();
        ensure!(
            self.pipeline.split.iter().all(|&f| f >= 0.0) && (split_sum - 1.0).abs() < 1e-9,
            Validation,
            "split fractions must be nonnegative and sum to 1"
        );
        ensure!(self.eval.histogram_bins >= 2, Validation, "histogram_bins must be >= 2");
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Samples from the manifest when one is set, phantoms otherwise.
    pub fn load_samples(&self) -> Result<Vec<DomainSample>> {
        match &self.manifest {
            Some(path) => {
                let manifest = DatasetManifest::load(path)?;
                ensure!(
                    manifest.domains == self.phantom.domains.len(),
                    Validation,
                    "manifest has {} domains, config expects {}",
                    manifest.domains,
                    self.phantom.domains.len()
                );
                manifest.load_samples(path.parent().unwrap_or(Path::new(".")))
            }
            None => phantom::generate_samples(&self.phantom),
        }
    }
}
