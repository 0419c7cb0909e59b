//! Dense `f32` tensors and a tape-based reverse-mode autodiff engine.
//!
//! [`Tensor`] is a plain value: a shape and a row-major buffer. Differentiable
//! computation happens on a [`Tape`], which hands out [`Var`] handles. Every op
//! on a `Var` records how to propagate gradients back to its inputs, and
//! [`Tape::backward`] walks the record in reverse.
//!
//! Images and feature maps are `[C, H, W]`. Binary ops broadcast their right
//! operand when each of its dimensions is either equal to the left operand's or
//! `1`, or when it holds a single element.

mod adam;
mod conv;
mod elementwise;
mod reduce;
mod spatial;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use conv::conv2d_forward;
pub use spatial::{box_filter_forward, resize_bilinear_forward};
pub(crate) use spatial::{BOX_FLOPS, RESIZE_FLOPS};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// Lower bound applied to divisors, log arguments and pow bases.
pub const EPS_SAFE: f32 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "tensor",
                format!("dimensions must be positive, got {shape:?}"),
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {shape:?} holds {numel} elements but buffer has {}",
                    data.len()
                ),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel]).expect("full: dimensions must be positive")
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, (0..numel).map(&mut f).collect())
            .expect("from_fn: dimensions must be positive")
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(
                "chw",
                format!("expected [C, H, W], got {:?}", self.shape),
            )),
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        let (_, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Channel plane `c` of a `[C, H, W]` tensor as `[1, H, W]`.
    pub fn channel(&self, c: usize) -> Result<Self> {
        let (channels, h, w) = self.chw()?;
        if c >= channels {
            return Err(Error::shape(
                "channel",
                format!("channel {c} out of range for {channels} channels"),
            ));
        }
        let plane = h * w;
        Self::new(&[1, h, w], self.data[c * plane..(c + 1) * plane].to_vec())
    }

    /// Stacks `[1, H, W]` (or `[C_i, H, W]`) tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let (_, h, w) = first.chw()?;
        let mut channels = 0;
        let mut data = Vec::new();
        for p in parts {
            let (c, ph, pw) = p.chw()?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("spatial size {ph}x{pw} differs from {h}x{w}"),
                ));
            }
            channels += c;
            data.extend_from_slice(&p.data);
        }
        Self::new(&[channels, h, w], data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.numel() as f64
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}
