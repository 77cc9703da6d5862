//! Forward and backward kernels for the layers used by the three networks.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::volume::{voxel_count, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn same(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        ConvGeometry { in_ch, out_ch, kernel, stride: 1, pad: kernel / 2 }
    }

    pub fn strided(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        ConvGeometry { in_ch, out_ch, kernel, stride, pad: kernel / 2 }
    }

    pub fn fan_in(&self) -> usize {
        self.in_ch * self.kernel.pow(3)
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_ch, self.in_ch, self.kernel, self.kernel, self.kernel]
    }

    pub fn output_dims(&self, input: Shape) -> Shape {
        input.map(|n| (n + 2 * self.pad - self.kernel) / self.stride + 1)
    }
}

/// Rows of the unfolded input: row `(ic, kz, ky, kx)` holds, for every output
/// voxel, the input value under that kernel tap (0 in the padding).
fn im2col(input: &Tensor, g: &ConvGeometry, out_dims: Shape) -> Vec<f64> {
    let k = g.kernel;
    let n_out = voxel_count(out_dims);
    let in_dims = input.dims();
    let mut cols = vec![0.0; g.in_ch * k * k * k * n_out];
    let mut row = 0;
    for ic in 0..g.in_ch {
        let src = input.channel(ic);
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut cols[row * n_out..(row + 1) * n_out];
                    for_each_tap_row(in_dims, out_dims, g, [kx, ky, kz], |out_off, in_off, len| {
                        if g.stride == 1 {
                            dst[out_off..out_off + len].copy_from_slice(&src[in_off..in_off + len]);
                        } else {
                            for t in 0..len {
                                dst[out_off + t] = src[in_off + t * g.stride];
                            }
                        }
                    });
                    row += 1;
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f64], g: &ConvGeometry, in_dims: Shape, out_dims: Shape) -> Tensor {
    let k = g.kernel;
    let n_out = voxel_count(out_dims);
    let mut out = Tensor::zeros(g.in_ch, in_dims);
    let mut row = 0;
    for ic in 0..g.in_ch {
        let dst = out.channel_mut(ic);
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let src = &cols[row * n_out..(row + 1) * n_out];
                    for_each_tap_row(in_dims, out_dims, g, [kx, ky, kz], |out_off, in_off, len| {
                        if g.stride == 1 {
                            for (d, s) in dst[in_off..in_off + len].iter_mut().zip(&src[out_off..out_off + len]) {
                                *d += s;
                            }
                        } else {
                            for t in 0..len {
                                dst[in_off + t * g.stride] += src[out_off + t];
                            }
                        }
                    });
                    row += 1;
                }
            }
        }
    }
    out
}

/// Calls `f(out_offset, in_offset, len)` for every output row (fixed y, z)
/// that a kernel tap touches, restricted to the x range landing inside the
/// input. Input x advances by `stride` per output x.
#[inline]
fn for_each_tap_row<F: FnMut(usize, usize, usize)>(
    in_dims: Shape,
    out_dims: Shape,
    g: &ConvGeometry,
    tap: [usize; 3],
    mut f: F,
) {
    let s = g.stride as isize;
    let p = g.pad as isize;
    // Valid output range along one axis: 0 <= o*s + tap - p < n.
    let range = |n: usize, o_n: usize, t: usize| -> (usize, usize) {
        let (t, n) = (t as isize, n as isize);
        let lo = if p > t { (p - t + s - 1) / s } else { 0 };
        let last = n - 1 + p - t;
        let hi = if last < 0 { 0 } else { (last / s + 1).min(o_n as isize) };
        (lo as usize, hi.max(lo) as usize)
    };
    let (x0, x1) = range(in_dims[0], out_dims[0], tap[0]);
    if x0 >= x1 {
        return;
    }
    let (y0, y1) = range(in_dims[1], out_dims[1], tap[1]);
    let (z0, z1) = range(in_dims[2], out_dims[2], tap[2]);
    for oz in z0..z1 {
        let iz = (oz as isize * s + tap[2] as isize - p) as usize;
        for oy in y0..y1 {
            let iy = (oy as isize * s + tap[1] as isize - p) as usize;
            let ix = (x0 as isize * s + tap[0] as isize - p) as usize;
            let out_off = x0 + out_dims[0] * (oy + out_dims[1] * oz);
            let in_off = ix + in_dims[0] * (iy + in_dims[1] * iz);
            f(out_off, in_off, x1 - x0);
        }
    }
}

/// Stride-1 convolution on a zero-padded copy of the input. Output voxel
/// `(x, y, z)` lives at flat index `x + px * (y + py * z)` of the padded grid,
/// so each kernel tap reads the padded input at one constant offset and every
/// (out channel, in channel, tap) triple is a single contiguous axpy or dot.
struct Padded {
    in_dims: Shape,
    out_dims: Shape,
    dims: Shape,
    pad: usize,
    /// Length of the output span in padded coordinates.
    span: usize,
    offsets: Vec<usize>,
}

impl Padded {
    fn new(in_dims: Shape, g: &ConvGeometry) -> Self {
        let dims = in_dims.map(|n| n + 2 * g.pad);
        let out_dims = g.output_dims(in_dims);
        let k = g.kernel;
        let mut offsets = Vec::with_capacity(k * k * k);
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    offsets.push(kx + dims[0] * (ky + dims[1] * kz));
                }
            }
        }
        let span = (out_dims[0] - 1) + dims[0] * ((out_dims[1] - 1) + dims[1] * (out_dims[2] - 1)) + 1;
        Padded { in_dims, out_dims, dims, pad: g.pad, span, offsets }
    }

    fn padded_len(&self) -> usize {
        voxel_count(self.dims)
    }

    /// Copies `src` into the interior of a zeroed padded buffer.
    fn pad_channel(&self, src: &[f64], dst: &mut [f64]) {
        let [nx, ny, nz] = self.in_dims;
        let p = self.pad;
        for z in 0..nz {
            for y in 0..ny {
                let from = nx * (y + ny * z);
                let to = p + self.dims[0] * ((y + p) + self.dims[1] * (z + p));
                dst[to..to + nx].copy_from_slice(&src[from..from + nx]);
            }
        }
    }

    /// Rows of `span` in output order: `(span_offset, out_offset, len)`.
    fn out_rows(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let [ox, oy, oz] = self.out_dims;
        (0..oz).flat_map(move |z| (0..oy).map(move |y| (self.dims[0] * (y + self.dims[1] * z), ox * (y + oy * z))))
    }

    fn forward(&self, input: &Tensor, weight: &[f64], bias: &[f64], g: &ConvGeometry) -> Tensor {
        let taps = self.offsets.len();
        let plen = self.padded_len();
        let mut padded = vec![0.0; g.in_ch * plen];
        for ic in 0..g.in_ch {
            self.pad_channel(input.channel(ic), &mut padded[ic * plen..(ic + 1) * plen]);
        }
        let mut out = Tensor::zeros(g.out_ch, self.out_dims);
        let mut acc = vec![0.0; self.span];
        let ox = self.out_dims[0];
        for oc in 0..g.out_ch {
            acc.fill(bias[oc]);
            for ic in 0..g.in_ch {
                let src = &padded[ic * plen..(ic + 1) * plen];
                let w = &weight[(oc * g.in_ch + ic) * taps..(oc * g.in_ch + ic + 1) * taps];
                for (&wt, &off) in w.iter().zip(&self.offsets) {
                    axpy(&mut acc, &src[off..off + self.span], wt);
                }
            }
            let dst = out.channel_mut(oc);
            for (from, to) in self.out_rows() {
                dst[to..to + ox].copy_from_slice(&acc[from..from + ox]);
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        input: &Tensor,
        grad_out: &Tensor,
        weight: &[f64],
        g: &ConvGeometry,
        grad_w: &mut [f64],
        grad_b: &mut [f64],
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let taps = self.offsets.len();
        let plen = self.padded_len();
        let ox = self.out_dims[0];
        let mut padded = vec![0.0; g.in_ch * plen];
        for ic in 0..g.in_ch {
            self.pad_channel(input.channel(ic), &mut padded[ic * plen..(ic + 1) * plen]);
        }
        // Output gradient spread over the span with zeros in the gaps.
        let mut go = vec![0.0; g.out_ch * self.span];
        for oc in 0..g.out_ch {
            let src = grad_out.channel(oc);
            grad_b[oc] += src.iter().sum::<f64>();
            let dst = &mut go[oc * self.span..(oc + 1) * self.span];
            for (to, from) in self.out_rows() {
                dst[to..to + ox].copy_from_slice(&src[from..from + ox]);
            }
        }
        for oc in 0..g.out_ch {
            let gor = &go[oc * self.span..(oc + 1) * self.span];
            for ic in 0..g.in_ch {
                let src = &padded[ic * plen..(ic + 1) * plen];
                let gw = &mut grad_w[(oc * g.in_ch + ic) * taps..(oc * g.in_ch + ic + 1) * taps];
                for (gwt, &off) in gw.iter_mut().zip(&self.offsets) {
                    *gwt += dot(gor, &src[off..off + self.span]);
                }
            }
        }
        if !need_input_grad {
            return None;
        }
        let mut gpad = vec![0.0; plen];
        let mut grad_in = Tensor::zeros(g.in_ch, self.in_dims);
        let [nx, ny, nz] = self.in_dims;
        let p = self.pad;
        for ic in 0..g.in_ch {
            gpad.fill(0.0);
            for oc in 0..g.out_ch {
                let gor = &go[oc * self.span..(oc + 1) * self.span];
                let w = &weight[(oc * g.in_ch + ic) * taps..(oc * g.in_ch + ic + 1) * taps];
                for (&wt, &off) in w.iter().zip(&self.offsets) {
                    axpy(&mut gpad[off..off + self.span], gor, wt);
                }
            }
            let dst = grad_in.channel_mut(ic);
            for z in 0..nz {
                for y in 0..ny {
                    let to = nx * (y + ny * z);
                    let from = p + self.dims[0] * ((y + p) + self.dims[1] * (z + p));
                    dst[to..to + nx].copy_from_slice(&gpad[from..from + nx]);
                }
            }
        }
        Some(grad_in)
    }
}

#[inline]
fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with eight independent partial sums, combined in a fixed
/// order.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c`, with explicit row and
/// column strides for `a` and `b`; `c` is row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_strides: (isize, isize), b: &[f64], b_strides: (isize, isize), beta: f64, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe in-bounds layouts of the checked slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv3d_forward(input: &Tensor, weight: &[f64], bias: &[f64], g: &ConvGeometry) -> Tensor {
    debug_assert_eq!(input.channels(), g.in_ch);
    if g.stride == 1 {
        return Padded::new(input.dims(), g).forward(input, weight, bias, g);
    }
    let out_dims = g.output_dims(input.dims());
    let n = voxel_count(out_dims);
    let kdim = g.fan_in();
    let cols = im2col(input, g, out_dims);
    let mut out = Tensor::zeros(g.out_ch, out_dims);
    let data = out.data_mut();
    for oc in 0..g.out_ch {
        data[oc * n..(oc + 1) * n].fill(bias[oc]);
    }
    assert_eq!(weight.len(), g.out_ch * kdim);
    gemm(g.out_ch, kdim, n, weight, (kdim as isize, 1), &cols, (n as isize, 1), 1.0, data);
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `need_input_grad` is set.
pub fn conv3d_backward(
    input: &Tensor,
    grad_out: &Tensor,
    weight: &[f64],
    g: &ConvGeometry,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    need_input_grad: bool,
) -> Option<Tensor> {
    if g.stride == 1 {
        return Padded::new(input.dims(), g).backward(input, grad_out, weight, g, grad_w, grad_b, need_input_grad);
    }
    let out_dims = grad_out.dims();
    let n = voxel_count(out_dims);
    let kdim = g.fan_in();
    let cols = im2col(input, g, out_dims);
    let go = grad_out.data();
    assert_eq!(grad_w.len(), g.out_ch * kdim);
    assert_eq!(go.len(), g.out_ch * n);
    for oc in 0..g.out_ch {
        grad_b[oc] += go[oc * n..(oc + 1) * n].iter().sum::<f64>();
    }
    // grad_w += grad_out * cols^T
    gemm(g.out_ch, n, kdim, go, (n as isize, 1), &cols, (1, n as isize), 1.0, grad_w);
    if !need_input_grad {
        return None;
    }
    // cols_grad = weight^T * grad_out
    let mut gcols = vec![0.0; kdim * n];
    gemm(kdim, g.out_ch, n, weight, (1, kdim as isize), go, (n as isize, 1), 0.0, &mut gcols);
    Some(col2im(&gcols, g, input.dims(), out_dims))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
    Identity,
}

impl Activation {
    pub fn apply(self, t: &mut Tensor) {
        match self {
            Activation::Relu => t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::LeakyRelu { slope } => t.data_mut().iter_mut().for_each(|v| {
                if *v < 0.0 {
                    *v *= slope
                }
            }),
            Activation::Identity => {}
        }
    }

    /// Multiplies `grad` by the derivative, reading the sign from the
    /// activation's output (valid since every variant preserves sign).
    pub fn backward(self, output: &Tensor, grad: &mut Tensor) {
        match self {
            Activation::Relu => {
                for (g, &y) in grad.data_mut().iter_mut().zip(output.data()) {
                    if y <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            Activation::LeakyRelu { slope } => {
                for (g, &y) in grad.data_mut().iter_mut().zip(output.data()) {
                    if y < 0.0 {
                        *g *= slope;
                    }
                }
            }
            Activation::Identity => {}
        }
    }
}

pub const NORM_EPS: f64 = 1e-5;

/// Cached statistics of an instance normalization.
#[derive(Debug, Clone)]
pub struct NormCache {
    normalized: Tensor,
    inv_std: Vec<f64>,
}

pub fn instance_norm_forward(input: &Tensor, scale: &[f64], shift: &[f64]) -> (Tensor, NormCache) {
    let n = input.voxels() as f64;
    let mut normalized = input.clone();
    let mut out = input.clone();
    let mut inv_std = Vec::with_capacity(input.channels());
    for c in 0..input.channels() {
        let x = input.channel(c);
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        inv_std.push(is);
        for (h, &v) in normalized.channel_mut(c).iter_mut().zip(x) {
            *h = (v - mean) * is;
        }
        for (o, &h) in out.channel_mut(c).iter_mut().zip(normalized.channel(c)) {
            *o = scale[c] * h + shift[c];
        }
    }
    (out, NormCache { normalized, inv_std })
}

pub fn instance_norm_backward(
    cache: &NormCache,
    grad_out: &Tensor,
    scale: &[f64],
    grad_scale: &mut [f64],
    grad_shift: &mut [f64],
) -> Tensor {
    let n = grad_out.voxels() as f64;
    let mut grad_in = Tensor::zeros(grad_out.channels(), grad_out.dims());
    for c in 0..grad_out.channels() {
        let dy = grad_out.channel(c);
        let h = cache.normalized.channel(c);
        let sum_dy: f64 = dy.iter().sum();
        let sum_dy_h: f64 = dy.iter().zip(h).map(|(a, b)| a * b).sum();
        grad_shift[c] += sum_dy;
        grad_scale[c] += sum_dy_h;
        let k = scale[c] * cache.inv_std[c];
        for ((gx, &d), &hv) in grad_in.channel_mut(c).iter_mut().zip(dy).zip(h) {
            *gx = k * (d - sum_dy / n - hv * sum_dy_h / n);
        }
    }
    grad_in
}

pub fn upsample2(input: &Tensor) -> Tensor {
    let d = input.dims();
    let od = d.map(|n| n * 2);
    let mut out = Tensor::zeros(input.channels(), od);
    for c in 0..input.channels() {
        let src = input.channel(c);
        let dst = out.channel_mut(c);
        for z in 0..od[2] {
            for y in 0..od[1] {
                let srow = d[0] * (y / 2 + d[1] * (z / 2));
                let drow = od[0] * (y + od[1] * z);
                for x in 0..od[0] {
                    dst[drow + x] = src[srow + x / 2];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &Tensor) -> Tensor {
    let od = grad_out.dims();
    let d = od.map(|n| n / 2);
    let mut out = Tensor::zeros(grad_out.channels(), d);
    for c in 0..grad_out.channels() {
        let src = grad_out.channel(c);
        let dst = out.channel_mut(c);
        for z in 0..od[2] {
            for y in 0..od[1] {
                let drow = d[0] * (y / 2 + d[1] * (z / 2));
                let srow = od[0] * (y + od[1] * z);
                for x in 0..od[0] {
                    dst[drow + x / 2] += src[srow + x];
                }
            }
        }
    }
    out
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.dims(), b.dims());
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(a.channels() + b.channels(), a.dims(), data).expect("matching dims")
}

pub fn split_channels(t: &Tensor, first: usize) -> (Tensor, Tensor) {
    let n = t.voxels();
    let (a, b) = t.data().split_at(first * n);
    (
        Tensor::from_vec(first, t.dims(), a.to_vec()).expect("split"),
        Tensor::from_vec(t.channels() - first, t.dims(), b.to_vec()).expect("split"),
    )
}

/// Numerically stable softmax of one logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Gradient of a loss with respect to logits, given softmax output `p` and
/// the gradient with respect to `p`.
pub fn softmax_backward(p: &[f64], grad_p: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(grad_p).map(|(a, b)| a * b).sum();
    p.iter().zip(grad_p).map(|(pi, gi)| pi * (gi - dot)).collect()
}

/// Softmax over the channel axis at every voxel.
pub fn channel_softmax(logits: &Tensor) -> Tensor {
    let n = logits.voxels();
    let c = logits.channels();
    let mut out = logits.clone();
    let src = logits.data();
    let dst = out.data_mut();
    let mut buf = vec![0.0; c];
    for v in 0..n {
        for k in 0..c {
            buf[k] = src[k * n + v];
        }
        let p = softmax(&buf);
        for k in 0..c {
            dst[k * n + v] = p[k];
        }
    }
    out
}

pub fn channel_softmax_backward(probs: &Tensor, grad_p: &Tensor) -> Tensor {
    let n = probs.voxels();
    let c = probs.channels();
    let mut out = Tensor::zeros(c, probs.dims());
    let (p, g) = (probs.data(), grad_p.data());
    let dst = out.data_mut();
    for v in 0..n {
        let mut dot = 0.0;
        for k in 0..c {
            dot += p[k * n + v] * g[k * n + v];
        }
        for k in 0..c {
            dst[k * n + v] = p[k * n + v] * (g[k * n + v] - dot);
        }
    }
    out
}

pub fn global_avg_pool(t: &Tensor) -> Vec<f64> {
    let n = t.voxels() as f64;
    (0..t.channels()).map(|c| t.channel(c).iter().sum::<f64>() / n).collect()
}

pub fn global_avg_pool_backward(grad: &[f64], dims: Shape) -> Tensor {
    let n = voxel_count(dims);
    let mut out = Tensor::zeros(grad.len(), dims);
    for (c, &g) in grad.iter().enumerate() {
        out.channel_mut(c).fill(g / n as f64);
    }
    out
}

/// `weight` is row-major `[out][in]`.
pub fn linear_forward(input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let n_in = input.len();
    bias.iter()
        .enumerate()
        .map(|(o, b)| b + weight[o * n_in..(o + 1) * n_in].iter().zip(input).map(|(w, x)| w * x).sum::<f64>())
        .collect()
}

pub fn linear_backward(
    input: &[f64],
    grad_out: &[f64],
    weight: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) -> Vec<f64> {
    let n_in = input.len();
    let mut grad_in = vec![0.0; n_in];
    for (o, &g) in grad_out.iter().enumerate() {
        grad_b[o] += g;
        for i in 0..n_in {
            grad_w[o * n_in + i] += g * input[i];
            grad_in[i] += g * weight[o * n_in + i];
        }
    }
    grad_in
}
