//! The generator, segmenter and discriminator networks.
//!
//! All three carry their parameters as a [`ParamSet`] and expose a cached
//! forward pass plus a backward pass that accumulates into [`Grads`].

pub mod ops;
pub mod params;
pub mod unet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::{DomainProbabilities, SoftSegmentation, Tensor};
use ops::{Activation, ConvGeometry};
pub use params::{Grads, Param, ParamKind, ParamSet};
use unet::{BlockCache, ConvBlock, UNet, UNetCache, UNetConfig};

fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    #[serde(flatten)]
    pub unet: UNetConfig,
    /// Adds the input to the output (residual generator).
    #[serde(default)]
    pub identity_skip: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { unet: UNetConfig::default(), identity_skip: false }
    }
}

/// Intensity-to-intensity U-Net with a single linear output channel.
#[derive(Debug, Clone)]
pub struct Generator {
    net: UNet,
    identity_skip: bool,
}

pub type GeneratorCache = UNetCache;

impl Generator {
    pub fn new(config: &GeneratorConfig, seed: u64) -> Result<Self> {
        let mut rng = init_rng(seed, 1);
        Ok(Generator { net: UNet::new(&config.unet, 1, 1, &mut rng)?, identity_skip: config.identity_skip })
    }

    pub fn params(&self) -> &ParamSet {
        &self.net.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.net.params
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.net.forward(x)?;
        if self.identity_skip {
            y.add_assign(x);
        }
        Ok(y)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, GeneratorCache)> {
        let (mut y, cache) = self.net.forward_cached(x)?;
        if self.identity_skip {
            y.add_assign(x);
        }
        Ok((y, cache))
    }

    pub fn backward(&self, cache: &GeneratorCache, grad_out: Tensor, grads: &mut Grads, need_input_grad: bool) -> Option<Tensor> {
        let skip = (self.identity_skip && need_input_grad).then(|| grad_out.clone());
        let mut g = self.net.backward(cache, grad_out, grads, need_input_grad);
        if let (Some(g), Some(s)) = (g.as_mut(), skip) {
            g.add_assign(&s);
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmenterConfig {
    #[serde(flatten)]
    pub unet: UNetConfig,
    pub classes: usize,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig { unet: UNetConfig::default(), classes: 4 }
    }
}

/// U-Net with `classes` output channels and a per-voxel softmax.
#[derive(Debug, Clone)]
pub struct Segmenter {
    net: UNet,
}

#[derive(Debug, Clone)]
pub struct SegmenterCache {
    net: UNetCache,
    probs: Tensor,
}

impl Segmenter {
    pub fn new(config: &SegmenterConfig, seed: u64) -> Result<Self> {
        ensure!(config.classes >= 2, Validation, "segmenter needs at least two classes");
        let mut rng = init_rng(seed, 2);
        Ok(Segmenter { net: UNet::new(&config.unet, 1, config.classes, &mut rng)? })
    }

    pub fn classes(&self) -> usize {
        self.net.out_channels()
    }

    pub fn params(&self) -> &ParamSet {
        &self.net.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.net.params
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.net.forward(x)
    }

    pub fn forward(&self, x: &Tensor) -> Result<SoftSegmentation> {
        Ok(SoftSegmentation(ops::channel_softmax(&self.net.forward(x)?)))
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(SoftSegmentation, SegmenterCache)> {
        let (logits, net) = self.net.forward_cached(x)?;
        let probs = ops::channel_softmax(&logits);
        Ok((SoftSegmentation(probs.clone()), SegmenterCache { net, probs }))
    }

    /// Backward from the gradient with respect to the class probabilities.
    pub fn backward(&self, cache: &SegmenterCache, grad_probs: &Tensor, grads: &mut Grads, need_input_grad: bool) -> Option<Tensor> {
        let grad_logits = ops::channel_softmax_backward(&cache.probs, grad_probs);
        self.net.backward(&cache.net, grad_logits, grads, need_input_grad)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub channels: Vec<usize>,
    pub slope: f64,
    /// Side of the cubic patches the discriminator accepts.
    pub input_size: usize,
    /// Number of real domains K; the network predicts K + 1 classes.
    pub domains: usize,
    #[serde(default)]
    pub instance_norm: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { channels: vec![8, 16, 32], slope: 0.2, input_size: 16, domains: 2, instance_norm: false }
    }
}

/// Strided convolutions, global average pooling and an affine map to K + 1
/// logits.
#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    blocks: Vec<ConvBlock>,
    fc_weight: usize,
    fc_bias: usize,
    params: ParamSet,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorCache {
    blocks: Vec<BlockCache>,
    pooled: Vec<f64>,
    last_dims: [usize; 3],
    probs: Vec<f64>,
}

impl Discriminator {
    pub fn new(config: &DiscriminatorConfig, seed: u64) -> Result<Self> {
        ensure!(config.domains >= 1, Validation, "discriminator needs at least one real domain");
        ensure!(!config.channels.is_empty(), Validation, "discriminator needs at least one convolution");
        ensure!(config.input_size >= 1, Validation, "discriminator input size must be positive");
        let mut rng = init_rng(seed, 3);
        let mut params = ParamSet::default();
        let act = Activation::LeakyRelu { slope: config.slope };
        let mut blocks = Vec::new();
        let mut in_ch = 1;
        for (i, &c) in config.channels.iter().enumerate() {
            blocks.push(ConvBlock::new(&mut params, &format!("conv{i}"), ConvGeometry::strided(in_ch, c, 3, 2), config.instance_norm, act, &mut rng));
            in_ch = c;
        }
        let out = config.domains + 1;
        let fc_weight = params.add("fc.weight".into(), vec![out, in_ch], ParamKind::Kernel, in_ch, &mut rng);
        let fc_bias = params.add("fc.bias".into(), vec![out], ParamKind::Bias, 0, &mut rng);
        Ok(Discriminator { config: config.clone(), blocks, fc_weight, fc_bias, params })
    }

    pub fn domains(&self) -> usize {
        self.config.domains
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = self.config.input_size;
        ensure!(
            x.channels() == 1 && x.dims() == [s; 3],
            Shape,
            "discriminator expects a 1-channel {s}^3 patch, got {} x {:?}",
            x.channels(),
            x.dims()
        );
        Ok(())
    }

    pub fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.apply(&self.params, &h);
        }
        let pooled = ops::global_avg_pool(&h);
        Ok(ops::linear_forward(&pooled, self.params.values(self.fc_weight), self.params.values(self.fc_bias)))
    }

    pub fn forward(&self, x: &Tensor) -> Result<DomainProbabilities> {
        Ok(DomainProbabilities(ops::softmax(&self.logits(x)?)))
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(DomainProbabilities, DiscriminatorCache)> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (out, c) = b.forward(&self.params, h);
            blocks.push(c);
            h = out;
        }
        let pooled = ops::global_avg_pool(&h);
        let logits = ops::linear_forward(&pooled, self.params.values(self.fc_weight), self.params.values(self.fc_bias));
        let probs = ops::softmax(&logits);
        Ok((
            DomainProbabilities(probs.clone()),
            DiscriminatorCache { blocks, pooled, last_dims: h.dims(), probs },
        ))
    }

    /// Backward from the gradient with respect to the K + 1 probabilities.
    pub fn backward(&self, cache: &DiscriminatorCache, grad_probs: &[f64], grads: &mut Grads, need_input_grad: bool) -> Option<Tensor> {
        let grad_logits = ops::softmax_backward(&cache.probs, grad_probs);
        let (gw, gb) = unet::two_mut(&mut grads.0, self.fc_weight, self.fc_bias);
        let grad_pooled = ops::linear_backward(&cache.pooled, &grad_logits, self.params.values(self.fc_weight), gw, gb);
        let mut g = ops::global_avg_pool_backward(&grad_pooled, cache.last_dims);
        for (i, b) in self.blocks.iter().enumerate().rev() {
            let need = i > 0 || need_input_grad;
            match b.backward(&self.params, &cache.blocks[i], g, grads, need) {
                Some(next) => g = next,
                None => return None,
            }
        }
        Some(g)
    }
}

/// Architecture of all three networks as stored in experiment files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct NetworksConfig {
    pub generator: GeneratorConfig,
    pub segmenter: SegmenterConfig,
    pub discriminator: DiscriminatorConfig,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_tensor(channels: usize, dims: [usize; 3], seed: u64) -> Tensor {
        let mut rng = init_rng(seed, 99);
        let n = channels * dims.iter().product::<usize>();
        Tensor::from_vec(channels, dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn generator_preserves_shape() {
        let g = Generator::new(&GeneratorConfig::default(), 1).unwrap();
        let x = random_tensor(1, [16; 3], 2);
        let y = g.forward(&x).unwrap();
        assert_eq!((y.channels(), y.dims()), (1, [16; 3]));
        assert!(y.all_finite());
    }

    #[test]
    fn generator_rejects_indivisible_side() {
        let cfg = GeneratorConfig { unet: UNetConfig { channels: vec![4, 8, 16], ..UNetConfig::default() }, identity_skip: false };
        let g = Generator::new(&cfg, 1).unwrap();
        assert!(matches!(g.forward(&random_tensor(1, [6; 3], 3)), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn zero_head_gives_constant_bias() {
        let mut g = Generator::new(&GeneratorConfig::default(), 4).unwrap();
        g.params_mut().by_name_mut("head.weight").unwrap().values.fill(0.0);
        g.params_mut().by_name_mut("head.bias").unwrap().values[0] = 0.375;
        let y = g.forward(&random_tensor(1, [8; 3], 5)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.375));
    }

    #[test]
    fn segmenter_outputs_distributions() {
        let s = Segmenter::new(&SegmenterConfig::default(), 6).unwrap();
        let p = s.forward(&random_tensor(1, [8; 3], 7)).unwrap();
        assert_eq!(p.classes(), 4);
        assert!(p.max_sum_error() < 1e-12);
    }

    #[test]
    fn segmenter_zero_logits_are_uniform() {
        let mut s = Segmenter::new(&SegmenterConfig::default(), 8).unwrap();
        s.params_mut().by_name_mut("head.weight").unwrap().values.fill(0.0);
        let p = s.forward(&random_tensor(1, [8; 3], 9)).unwrap();
        assert!(p.tensor().data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn discriminator_outputs_k_plus_one() {
        let d = Discriminator::new(&DiscriminatorConfig::default(), 10).unwrap();
        for seed in 0..5 {
            let p = d.forward(&random_tensor(1, [16; 3], seed)).unwrap();
            assert_eq!(p.as_slice().len(), 3);
            assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(matches!(d.forward(&random_tensor(1, [8; 3], 1)), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn init_is_deterministic_and_kaiming() {
        let a = Generator::new(&GeneratorConfig::default(), 11).unwrap();
        let b = Generator::new(&GeneratorConfig::default(), 11).unwrap();
        assert_eq!(a.params(), b.params());
        for p in a.params().iter() {
            if p.kind == ParamKind::Bias {
                assert!(p.values.iter().all(|&v| v == 0.0), "{}", p.name);
            }
        }
    }

    #[test]
    fn kaiming_variance_for_fan_in_216() {
        // dec1 of the default U-Net maps 24 channels; a custom 8-channel level
        // gives fan-in 8 * 27 = 216.
        let cfg = UNetConfig { channels: vec![8, 8], ..UNetConfig::default() };
        let mut rng = init_rng(12, 0);
        let mut weights = Vec::new();
        while weights.len() < 20_000 {
            let net = UNet::new(&cfg, 1, 1, &mut rng).unwrap();
            let p = net.params.by_name("enc1.weight").unwrap();
            assert_eq!(p.shape, vec![8, 8, 3, 3, 3]);
            weights.extend_from_slice(&p.values);
        }
        let n = weights.len() as f64;
        let mean = weights.iter().sum::<f64>() / n;
        let var = weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n;
        let target = 2.0 / 216.0;
        assert!((var - target).abs() < 0.2 * target, "{var} vs {target}");
    }

    #[test]
    fn instance_norm_flag_adds_affine_terms() {
        let cfg = GeneratorConfig { unet: UNetConfig { instance_norm: true, ..UNetConfig::default() }, identity_skip: false };
        let g = Generator::new(&cfg, 13).unwrap();
        assert!(g.params().by_name("enc0.norm.scale").is_some());
        assert!(g.forward(&random_tensor(1, [8; 3], 14)).unwrap().all_finite());
    }
}
