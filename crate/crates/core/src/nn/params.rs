use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// What a parameter tensor is used for. Weight decay applies to kernels only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Kernel,
    Bias,
    NormScale,
    NormShift,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub values: Vec<f64>,
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    /// Adds a tensor initialized for its kind (Kaiming normal for kernels
    /// with the given fan-in, zeros for biases and shifts, ones for scales)
    /// and returns its index.
    pub(crate) fn add<R: Rng + ?Sized>(
        &mut self,
        name: String,
        shape: Vec<usize>,
        kind: ParamKind,
        fan_in: usize,
        rng: &mut R,
    ) -> usize {
        let len = shape.iter().product();
        let values = match kind {
            ParamKind::Kernel => {
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                (0..len).map(|_| normal.sample(rng)).collect()
            }
            ParamKind::Bias | ParamKind::NormShift => vec![0.0; len],
            ParamKind::NormScale => vec![1.0; len],
        };
        self.params.push(Param { name, shape, kind, values });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Param {
        &mut self.params[index]
    }

    pub fn values(&self, index: usize) -> &[f64] {
        &self.params[index].values
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.values.iter().all(|v| v.is_finite()))
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(self.params.iter().map(|p| vec![0.0; p.values.len()]).collect())
    }

    /// SHA-256 over names and exact value bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for v in &p.values {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Flat view of scalar `i` across all tensors, for finite-difference checks.
    pub fn scalar_mut(&mut self, mut i: usize) -> &mut f64 {
        for p in &mut self.params {
            if i < p.values.len() {
                return &mut p.values[i];
            }
            i -= p.values.len();
        }
        panic!("scalar index out of range");
    }
}

/// Gradient buffers aligned with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.0 {
            for v in g {
                *v *= factor;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn scalar(&self, mut i: usize) -> f64 {
        for g in &self.0 {
            if i < g.len() {
                return g[i];
            }
            i -= g.len();
        }
        panic!("scalar index out of range");
    }
}
