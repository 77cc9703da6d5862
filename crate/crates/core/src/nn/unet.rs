use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{self, Activation, ConvGeometry, NormCache};
use super::params::{Grads, ParamKind, ParamSet};
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Convolution followed by optional instance normalization and an activation.
#[derive(Debug, Clone)]
pub(crate) struct ConvBlock {
    geom: ConvGeometry,
    weight: usize,
    bias: usize,
    norm: Option<(usize, usize)>,
    act: Activation,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockCache {
    input: Tensor,
    norm: Option<NormCache>,
    output: Tensor,
}

impl ConvBlock {
    pub(crate) fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        geom: ConvGeometry,
        instance_norm: bool,
        act: Activation,
        rng: &mut R,
    ) -> Self {
        let weight = params.add(format!("{name}.weight"), geom.weight_shape(), ParamKind::Kernel, geom.fan_in(), rng);
        let bias = params.add(format!("{name}.bias"), vec![geom.out_ch], ParamKind::Bias, 0, rng);
        let norm = instance_norm.then(|| {
            (
                params.add(format!("{name}.norm.scale"), vec![geom.out_ch], ParamKind::NormScale, 0, rng),
                params.add(format!("{name}.norm.shift"), vec![geom.out_ch], ParamKind::NormShift, 0, rng),
            )
        });
        ConvBlock { geom, weight, bias, norm, act }
    }

    pub(crate) fn apply(&self, p: &ParamSet, input: &Tensor) -> Tensor {
        let mut y = ops::conv3d_forward(input, p.values(self.weight), p.values(self.bias), &self.geom);
        if let Some((s, h)) = self.norm {
            y = ops::instance_norm_forward(&y, p.values(s), p.values(h)).0;
        }
        self.act.apply(&mut y);
        y
    }

    pub(crate) fn forward(&self, p: &ParamSet, input: Tensor) -> (Tensor, BlockCache) {
        let mut y = ops::conv3d_forward(&input, p.values(self.weight), p.values(self.bias), &self.geom);
        let mut norm = None;
        if let Some((s, h)) = self.norm {
            let (out, cache) = ops::instance_norm_forward(&y, p.values(s), p.values(h));
            y = out;
            norm = Some(cache);
        }
        self.act.apply(&mut y);
        (y.clone(), BlockCache { input, norm, output: y })
    }

    pub(crate) fn backward(
        &self,
        p: &ParamSet,
        cache: &BlockCache,
        mut grad: Tensor,
        grads: &mut Grads,
        need_input_grad: bool,
    ) -> Option<Tensor> {
        self.act.backward(&cache.output, &mut grad);
        if let (Some((s, h)), Some(nc)) = (self.norm, &cache.norm) {
            let (gs, gh) = two_mut(&mut grads.0, s, h);
            grad = ops::instance_norm_backward(nc, &grad, p.values(s), gs, gh);
        }
        let (gw, gb) = two_mut(&mut grads.0, self.weight, self.bias);
        ops::conv3d_backward(&cache.input, &grad, p.values(self.weight), &self.geom, gw, gb, need_input_grad)
    }
}

pub(crate) fn two_mut(v: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert!(a < b, "parameter indices are allocated in order");
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Channels per resolution level; `channels.len() - 1` downsamplings.
    pub channels: Vec<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub instance_norm: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig { channels: vec![8, 16], activation: Activation::Relu, instance_norm: false }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.channels.is_empty(), Validation, "a U-Net needs at least one level");
        ensure!(self.channels.iter().all(|&c| c > 0), Validation, "channel counts must be positive");
        Ok(())
    }

    /// Input sides must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << (self.channels.len() - 1)
    }
}

/// 3-D U-Net: one 3x3x3 convolution per level, stride-2 convolutions between
/// levels, nearest upsampling with skip concatenation on the way back, and a
/// final 1x1x1 convolution with linear output.
#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    in_ch: usize,
    out_ch: usize,
    enc: Vec<ConvBlock>,
    down: Vec<ConvBlock>,
    dec: Vec<ConvBlock>,
    head: ConvBlock,
    pub(crate) params: ParamSet,
}

#[derive(Debug, Clone)]
pub struct UNetCache {
    enc: Vec<BlockCache>,
    down: Vec<BlockCache>,
    dec: Vec<BlockCache>,
    head: BlockCache,
}

impl UNet {
    pub fn new<R: Rng + ?Sized>(config: &UNetConfig, in_ch: usize, out_ch: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let ch = &config.channels;
        let levels = ch.len();
        let mut params = ParamSet::default();
        let act = config.activation;
        let norm = config.instance_norm;
        let mut enc = Vec::with_capacity(levels);
        let mut down = Vec::with_capacity(levels - 1);
        enc.push(ConvBlock::new(&mut params, "enc0", ConvGeometry::same(in_ch, ch[0], 3), norm, act, rng));
        for i in 1..levels {
            down.push(ConvBlock::new(&mut params, &format!("down{i}"), ConvGeometry::strided(ch[i - 1], ch[i], 3, 2), norm, act, rng));
            enc.push(ConvBlock::new(&mut params, &format!("enc{i}"), ConvGeometry::same(ch[i], ch[i], 3), norm, act, rng));
        }
        let mut dec = Vec::with_capacity(levels - 1);
        for i in 1..levels {
            dec.push(ConvBlock::new(&mut params, &format!("dec{i}"), ConvGeometry::same(ch[i] + ch[i - 1], ch[i - 1], 3), norm, act, rng));
        }
        let head = ConvBlock::new(&mut params, "head", ConvGeometry::same(ch[0], out_ch, 1), false, Activation::Identity, rng);
        Ok(UNet { config: config.clone(), in_ch, out_ch, enc, down, dec, head, params })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        ensure!(
            x.channels() == self.in_ch,
            Shape,
            "U-Net expects {} input channels, got {}",
            self.in_ch,
            x.channels()
        );
        let div = self.config.divisor();
        ensure!(
            x.dims().iter().all(|&n| n > 0 && n % div == 0),
            Shape,
            "input sides {:?} must be divisible by {div}",
            x.dims()
        );
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let p = &self.params;
        let mut skips = Vec::with_capacity(self.enc.len());
        let mut h = self.enc[0].apply(p, x);
        for i in 1..self.enc.len() {
            skips.push(h);
            let down = self.down[i - 1].apply(p, skips.last().unwrap());
            h = self.enc[i].apply(p, &down);
        }
        for i in (1..self.enc.len()).rev() {
            let cat = ops::concat_channels(&ops::upsample2(&h), &skips[i - 1]);
            h = self.dec[i - 1].apply(p, &cat);
        }
        Ok(self.head.apply(p, &h))
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, UNetCache)> {
        self.check_input(x)?;
        let p = &self.params;
        let levels = self.enc.len();
        let mut enc = Vec::with_capacity(levels);
        let mut down = Vec::with_capacity(levels - 1);
        let (mut h, c) = self.enc[0].forward(p, x.clone());
        enc.push(c);
        for i in 1..levels {
            let (d, c) = self.down[i - 1].forward(p, h);
            down.push(c);
            let (e, c) = self.enc[i].forward(p, d);
            enc.push(c);
            h = e;
        }
        let mut dec: Vec<Option<BlockCache>> = vec![None; levels - 1];
        for i in (1..levels).rev() {
            let cat = ops::concat_channels(&ops::upsample2(&h), &enc[i - 1].output);
            let (d, c) = self.dec[i - 1].forward(p, cat);
            dec[i - 1] = Some(c);
            h = d;
        }
        let (out, head) = self.head.forward(p, h);
        let dec = dec.into_iter().map(|c| c.expect("every decoder level ran")).collect();
        Ok((out, UNetCache { enc, down, dec, head }))
    }

    /// Accumulates parameter gradients into `grads`; returns the input
    /// gradient when requested.
    pub fn backward(&self, cache: &UNetCache, grad_out: Tensor, grads: &mut Grads, need_input_grad: bool) -> Option<Tensor> {
        let p = &self.params;
        let ch = &self.config.channels;
        let levels = self.enc.len();
        let mut g = self.head.backward(p, &cache.head, grad_out, grads, true).expect("head input grad");
        let mut skip_grads: Vec<Option<Tensor>> = vec![None; levels];
        for i in 1..levels {
            let gcat = self.dec[i - 1].backward(p, &cache.dec[i - 1], g, grads, true).expect("decoder input grad");
            let (gup, gskip) = ops::split_channels(&gcat, ch[i]);
            skip_grads[i - 1] = Some(gskip);
            g = ops::upsample2_backward(&gup);
        }
        for i in (0..levels).rev() {
            let need = i > 0 || need_input_grad;
            let g_in = self.enc[i].backward(p, &cache.enc[i], g, grads, need);
            if i == 0 {
                return g_in;
            }
            let mut g_prev = self.down[i - 1]
                .backward(p, &cache.down[i - 1], g_in.expect("encoder input grad"), grads, true)
                .expect("down input grad");
            if let Some(s) = skip_grads[i - 1].take() {
                g_prev.add_assign(&s);
            }
            g = g_prev;
        }
        unreachable!("the loop returns at level 0")
    }
}
