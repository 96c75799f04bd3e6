//! Dense row-major tensors over `f32`/`f64`, named parameters, a reverse-mode
//! tape, finite-difference gradient certification, and the `SFCT` container.
//!
//! Training runs in `f32`; every verification oracle runs the same code in
//! `f64`. The dtype is carried in the type parameter, so a model is checked in
//! the exact code path it trains in.

mod gradcheck;
mod kernels;
pub mod sfct;
mod tape;

pub use gradcheck::{grad_check, GradCheckOpts, GradCheckReport, ParamCheck};
pub use tape::{Tape, Var};

use crate::error::{Result, SfcError};
use rand::{Rng, RngExt};

/// Element type of every tensor in the crate. Implemented for `f32` and `f64` only.
pub trait Scalar:
    num_traits::Float
    + num_traits::FloatConst
    + num_traits::FromPrimitive
    + num_traits::NumAssign
    + std::iter::Sum<Self>
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + rustfft::FftNum
{
    const DTYPE: Dtype;
    /// Narrowing conversion for constants written as `f64` literals.
    fn f(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn f(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn f(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(SfcError::Format { what: "dtype", detail: format!("unknown tag {other}") }),
        }
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major dense tensor. `data.len() == product(shape)` always holds; the
/// gradient, when present, has the same length.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { data: vec![T::zero(); numel(shape)], shape: shape.to_vec(), requires_grad: false, grad: None }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor { data: vec![v; numel(shape)], shape: shape.to_vec(), requires_grad: false, grad: None }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { data: vec![v], shape: vec![], requires_grad: false, grad: None }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(SfcError::shape(
                "tensor",
                format!("shape {:?} wants {} elements, got {}", shape, numel(shape), data.len()),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None })
    }

    /// Uniform init on [lo, hi) from the given stream.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let data = (0..numel(shape)).map(|_| T::f(rng.random_range(lo..hi))).collect();
        Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None }
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Flat index of a multi-index. Debug-asserted in range.
    pub fn flat(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &dim)) in idx.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < dim, "index {ix} out of range for axis {i} (dim {dim})");
            off = off * dim + ix;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> T {
        self.data[self.flat(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: T) {
        let off = self.flat(idx);
        self.data[off] = v;
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn accumulate_grad(&mut self, g: &[T]) {
        debug_assert_eq!(g.len(), self.data.len());
        let slot = self.grad.get_or_insert_with(|| vec![T::zero(); self.data.len()]);
        for (a, b) in slot.iter_mut().zip(g) {
            *a += *b;
        }
    }

    /// Dtype-converting copy.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::f(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

/// Named trainable tensor. The name is unique within a model and doubles as
/// the key for optimizer state and checkpoint entries.
#[derive(Clone, Debug)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, mut value: Tensor<T>) -> Self {
        value.requires_grad = true;
        Parameter { name: name.into(), value }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}
