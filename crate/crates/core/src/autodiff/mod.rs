//! Minimal reverse-mode automatic differentiation over 4-D image tensors.

mod conv;
mod gradcheck;
mod tape;

pub use gradcheck::{finite_difference_gradient, max_relative_error};
pub use tape::{Gradients, Tape, TapeMark, Var};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Negative-side slope of every LeakyReLU in the generators.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Weights and optional bias of one stride-1 convolution with same-padding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    /// (out-channels, in-channels, k, k)
    pub weight: Tensor<T>,
    /// (out-channels, 1, 1, 1)
    pub bias: Option<Tensor<T>>,
    pub padding: usize,
}

impl<T: Scalar> ConvParams<T> {
    /// Zero weights and bias.
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize, bias: bool) -> Self {
        Self {
            weight: Tensor::zeros(Shape::new(out_ch, in_ch, kernel, kernel)),
            bias: bias.then(|| Tensor::zeros(Shape::new(out_ch, 1, 1, 1))),
            padding: kernel / 2,
        }
    }

    /// He-normal weights multiplied by `gain`, zero bias.
    pub fn kaiming<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, kernel: usize, gain: f64, rng: &mut R) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let mut p = Self::zeros(in_ch, out_ch, kernel, true);
        for w in p.weight.data_mut() {
            *w = T::from_f64(gain * normal.sample(rng));
        }
        p
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c()
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n()
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h()
    }

    pub fn num_params(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, |b| b.numel())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut())
    }

    pub fn validate(&self) -> Result<()> {
        let [_, _, kh, kw] = self.weight.shape().0;
        if kh != kw || kh % 2 == 0 || self.padding != kh / 2 {
            return Err(Error::config(format!(
                "convolution {kh}x{kw} with padding {} does not preserve spatial size",
                self.padding
            )));
        }
        Ok(())
    }
}

/// A convolution whose parameters already live on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundConv {
    pub weight: Var,
    pub bias: Option<Var>,
    pub padding: usize,
}

impl BoundConv {
    /// Take the next one or two handles (weight, then bias if `has_bias`) from `vars`.
    pub fn take(vars: &mut impl Iterator<Item = Var>, has_bias: bool, padding: usize) -> Result<Self> {
        let missing = || Error::config("fewer parameter handles than convolutions");
        let weight = vars.next().ok_or_else(missing)?;
        let bias = if has_bias {
            Some(vars.next().ok_or_else(missing)?)
        } else {
            None
        };
        Ok(Self { weight, bias, padding })
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.conv2d(x, self.weight, self.bias, self.padding)
    }
}

/// Convolution followed by the fixed-slope LeakyReLU.
pub fn conv_lrelu<T: Scalar>(tape: &mut Tape<T>, conv: &BoundConv, x: Var) -> Result<Var> {
    let y = conv.apply(tape, x)?;
    tape.leaky_relu(y, T::from_f64(LEAKY_SLOPE))
}
