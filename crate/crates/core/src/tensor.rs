use crate::error::{ensure, Result};
use crate::volume::{voxel_count, Shape};

/// Multi-channel 3-D grid of `f64`, channel-major with x fastest:
/// `index = x + nx * (y + ny * (z + nz * c))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    channels: usize,
    dims: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, dims: Shape) -> Self {
        Tensor { channels, dims, data: vec![0.0; channels * voxel_count(dims)] }
    }

    pub fn from_vec(channels: usize, dims: Shape, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == channels * voxel_count(dims),
            Shape,
            "{} values cannot fill {channels} x {dims:?}",
            data.len()
        );
        Ok(Tensor { channels, dims, data })
    }

    pub fn from_f32(dims: Shape, values: &[f32]) -> Result<Self> {
        Self::from_vec(1, dims, values.iter().map(|&v| v as f64).collect())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> Shape {
        self.dims
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-voxel class distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftSegmentation(pub Tensor);

impl SoftSegmentation {
    pub fn classes(&self) -> usize {
        self.0.channels()
    }

    pub fn dims(&self) -> Shape {
        self.0.dims()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn prob(&self, voxel: usize, class: usize) -> f64 {
        self.0.data()[class * self.0.voxels() + voxel]
    }

    /// Largest deviation of any voxel's class sum from 1.
    pub fn max_sum_error(&self) -> f64 {
        let n = self.0.voxels();
        (0..n)
            .map(|v| {
                let s: f64 = (0..self.classes()).map(|c| self.prob(v, c)).sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Hard labels; ties go to the lowest class index.
    pub fn argmax(&self) -> Vec<u8> {
        let n = self.0.voxels();
        (0..n)
            .map(|v| {
                let mut best = 0;
                for c in 1..self.classes() {
                    if self.prob(v, c) > self.prob(v, best) {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }
}

/// Distribution over `K + 1` discriminator classes; index `k < K` is real
/// domain `k + 1`, index `K` is the generated class.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainProbabilities(pub Vec<f64>);

impl DomainProbabilities {
    pub fn domains(&self) -> usize {
        self.0.len() - 1
    }

    pub fn real(&self, domain: usize) -> f64 {
        self.0[domain - 1]
    }

    pub fn fake(&self) -> f64 {
        self.0[self.0.len() - 1]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}
