//! Dense tensors and the complex companion used by the spectral path.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, TensorError};
use crate::scalar::Real;

/// Dense row-major N-dimensional array. Feature maps use N×C×H×W.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) || numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                op: "tensor",
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Normal(0, std²) entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::of(rng.random_range(lo..hi)))
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(TensorError::DataLength {
                op: "accumulate_grad",
                shape: self.shape.clone(),
                len: delta.len(),
            });
        }
        let g = self
            .grad
            .get_or_insert_with(|| vec![T::zero(); delta.len()]);
        for (a, &b) in g.iter_mut().zip(delta) {
            *a = *a + b;
        }
        Ok(())
    }

    /// Same shape, new element type. Gradient buffers are dropped.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Debug check that every entry is finite.
    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(TensorError::NonFinite { op, index }),
            None => Ok(()),
        }
    }

    /// Interprets the tensor as N×C×H×W.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        dims4(&self.shape, op)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn dims4(shape: &[usize], op: &'static str) -> Result<[usize; 4]> {
    match *shape {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(TensorError::Rank {
            op,
            expected: 4,
            shape: shape.to_vec(),
        }),
    }
}

/// Split-storage complex tensor produced by the 2-D FFT.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTensor<T> {
    shape: Vec<usize>,
    real: Vec<T>,
    imag: Vec<T>,
}

impl<T: Real> ComplexTensor<T> {
    pub fn new(shape: &[usize], real: Vec<T>, imag: Vec<T>) -> Result<Self> {
        let n = numel(shape);
        if real.len() != n || imag.len() != n {
            return Err(TensorError::DataLength {
                op: "complex_tensor",
                shape: shape.to_vec(),
                len: real.len().max(imag.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            real,
            imag,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn real(&self) -> &[T] {
        &self.real
    }

    pub fn imag(&self) -> &[T] {
        &self.imag
    }

    pub fn parts_mut(&mut self) -> (&mut [T], &mut [T]) {
        (&mut self.real, &mut self.imag)
    }

    pub fn magnitude(&self) -> Vec<T> {
        self.real
            .iter()
            .zip(&self.imag)
            .map(|(&r, &i)| (r * r + i * i).sqrt())
            .collect()
    }
}
