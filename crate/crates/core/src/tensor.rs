//! Dense grid containers shared by every numeric module.
//!
//! A [`Tensor`] is a `C x H x W` activation grid in row-major `(c, h, w)`
//! order. [`Mask`] and [`LabelImage`] are the matching `H x W` validity and
//! class-id grids. [`ParamTensor`] pairs learnable values with gradient
//! storage of identical shape.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::real::{real, Real};

/// Lower bound applied to every standard deviation in the pipeline.
///
/// Constant channels and degenerate style retrievals would otherwise divide
/// by zero; the floor keeps all normalizations finite.
pub const EPS_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ShapeError {
    #[error("{context}: expected shape {expected}, got {got}")]
    Mismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error("{context}: mask has no valid pixels")]
    EmptyMask { context: &'static str },
}

/// Dense `C x H x W` grid of activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![F::zero(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), channels * height * width, "tensor data length");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    /// Fill from a generator called in `(c, h, w)` row-major order.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> F,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for h in 0..height {
                for w in 0..width {
                    data.push(f(c, h, w));
                }
            }
        }
        Self::from_vec(channels, height, width, data)
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }
    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, c: usize, h: usize, w: usize) -> F {
        self.data[(c * self.height + h) * self.width + w]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, h: usize, w: usize) -> &mut F {
        &mut self.data[(c * self.height + h) * self.width + w]
    }

    /// One channel as a contiguous `H*W` slice.
    #[inline]
    pub fn channel(&self, c: usize) -> &[F] {
        let px = self.pixels();
        &self.data[c * px..(c + 1) * px]
    }

    #[inline]
    pub fn channel_mut(&mut self, c: usize) -> &mut [F] {
        let px = self.pixels();
        &mut self.data[c * px..(c + 1) * px]
    }

    /// One image row of one channel as a contiguous `W` slice.
    #[inline]
    pub fn row(&self, c: usize, h: usize) -> &[F] {
        let start = (c * self.height + h) * self.width;
        &self.data[start..start + self.width]
    }

    #[inline]
    pub fn row_mut(&mut self, c: usize, h: usize) -> &mut [F] {
        let start = (c * self.height + h) * self.width;
        &mut self.data[start..start + self.width]
    }

    #[inline]
    pub fn data(&self) -> &[F] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: F) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert every element to another precision.
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| G::from_f64(v.as_f64())).collect(),
        }
    }
}

/// `H x W` boolean validity grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new_false(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn new_true(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), height * width, "mask data length");
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }
    #[inline]
    pub fn get(&self, h: usize, w: usize) -> bool {
        self.data[h * self.width + w]
    }
    #[inline]
    pub fn set(&mut self, h: usize, w: usize, v: bool) {
        self.data[h * self.width + w] = v;
    }
    #[inline]
    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }
    #[inline]
    pub fn as_slice_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }
    pub fn count_valid(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

/// `H x W` grid of class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelImage {
    height: usize,
    width: usize,
    data: Vec<u16>,
}

impl LabelImage {
    pub fn filled(height: usize, width: usize, label: u16) -> Self {
        Self {
            height,
            width,
            data: vec![label; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u16>) -> Self {
        assert_eq!(data.len(), height * width, "label data length");
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }
    #[inline]
    pub fn get(&self, h: usize, w: usize) -> u16 {
        self.data[h * self.width + w]
    }
    #[inline]
    pub fn set(&mut self, h: usize, w: usize, v: u16) {
        self.data[h * self.width + w] = v;
    }
    #[inline]
    pub fn as_slice(&self) -> &[u16] {
        &self.data
    }
    #[inline]
    pub fn as_slice_mut(&mut self) -> &mut [u16] {
        &mut self.data
    }
}

/// Role of a learnable tensor; drives weight-decay policy and checkpoint
/// bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    Memory,
}

impl ParamRole {
    pub fn tag(self) -> u8 {
        match self {
            ParamRole::Weight => 0,
            ParamRole::Bias => 1,
            ParamRole::Memory => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ParamRole::Weight),
            1 => Some(ParamRole::Bias),
            2 => Some(ParamRole::Memory),
            _ => None,
        }
    }
}

/// Learnable values paired with gradient storage of identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<F> {
    shape: Vec<usize>,
    role: ParamRole,
    value: Vec<F>,
    grad: Vec<F>,
}

impl<F: Real> ParamTensor<F> {
    pub fn zeros(shape: &[usize], role: ParamRole) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            role,
            value: vec![F::zero(); len],
            grad: vec![F::zero(); len],
        }
    }

    pub fn from_values(shape: &[usize], role: ParamRole, value: Vec<F>) -> Self {
        let len: usize = shape.iter().product();
        assert_eq!(value.len(), len, "param value length");
        Self {
            shape: shape.to_vec(),
            role,
            grad: vec![F::zero(); len],
            value,
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
    #[inline]
    pub fn role(&self) -> ParamRole {
        self.role
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.value.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
    #[inline]
    pub fn value(&self) -> &[F] {
        &self.value
    }
    #[inline]
    pub fn value_mut(&mut self) -> &mut [F] {
        &mut self.value
    }
    #[inline]
    pub fn grad(&self) -> &[F] {
        &self.grad
    }
    #[inline]
    pub fn grad_mut(&mut self) -> &mut [F] {
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grad {
            *g = F::zero();
        }
    }

    pub fn cast<G: Real>(&self) -> ParamTensor<G> {
        ParamTensor {
            shape: self.shape.clone(),
            role: self.role,
            value: self.value.iter().map(|v| G::from_f64(v.as_f64())).collect(),
            grad: vec![G::zero(); self.grad.len()],
        }
    }
}

/// Per-channel mean and standard deviation; `std` is floored at
/// [`EPS_FLOOR`].
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats<F> {
    pub mean: Vec<F>,
    pub std: Vec<F>,
}

impl<F: Real> ChannelStats<F> {
    /// Identity statistics: mean 0, std 1 for every channel.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![F::zero(); channels],
            std: vec![F::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn floor_std(&mut self) {
        let floor = real::<F>(EPS_FLOOR);
        for s in &mut self.std {
            if *s < floor {
                *s = floor;
            }
        }
    }
}

pub(crate) fn shape3_string(c: usize, h: usize, w: usize) -> String {
    alloc::format!("{}x{}x{}", c, h, w)
}
