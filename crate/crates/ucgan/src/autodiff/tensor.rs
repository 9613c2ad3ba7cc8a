use super::{AutodiffError, Scalar};
use rand::Rng;
use rand_distr::StandardNormal;

/// Number of elements implied by a shape. An empty shape is a scalar (1).
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense n-dimensional array living outside any tape. Parameters, datasets
/// and checkpoints are all `Tensor`s; during a training step their values are
/// snapshotted onto a [`super::Tape`] as leaves.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, AutodiffError> {
        if numel(&shape) != data.len() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Like [`Tensor::new`] but panics on mismatch; for internal call sites
    /// where the shape is correct by construction.
    pub fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        Self::new(shape, data).expect("shape/data agreement")
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self {
            shape,
            data: vec![T::ZERO; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, v: T) -> Self {
        let n = numel(&shape);
        Self {
            shape,
            data: vec![v; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Gaussian init with the given standard deviation. Draws in f64 so the
    /// stream is identical between f32 and f64 builds under one seed.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let n = numel(&shape);
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::from_f64(z * std)
            })
            .collect();
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Stores a gradient; shape must match the tensor.
    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<(), AutodiffError> {
        if grad.len() != self.data.len() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "gradient length {} does not match tensor numel {}",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<(), AutodiffError> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(AutodiffError::NonFinite(what.to_string()))
        }
    }

    pub fn map_precision<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}
