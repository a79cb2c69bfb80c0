//! The convolutional vector field of the ODE core.

use crate::autodiff::{conv_lrelu, BoundConv, ConvParams, Tape, Var};
use crate::error::{Error, Result};
use crate::solver::{NfeCounter, VectorField};
use crate::tensor::{Scalar, Shape, Tensor};

/// Stack of 3x3 convolutions with LeakyReLU between them (none after the last).
///
/// When time-dependent, a channel filled with `t` is prepended to the state
/// before the first convolution.
#[derive(Debug, Clone)]
pub struct OdeFunction<T: Scalar> {
    convs: Vec<ConvParams<T>>,
    time_dependent: bool,
    nfe: NfeCounter,
}

impl<T: Scalar> OdeFunction<T> {
    pub fn new(convs: Vec<ConvParams<T>>, time_dependent: bool) -> Result<Self> {
        let last = convs
            .last()
            .ok_or_else(|| Error::config("ODE function needs at least one convolution"))?;
        let state = last.out_channels();
        for (i, c) in convs.iter().enumerate() {
            c.validate()?;
            let expected_in = if i == 0 {
                state + usize::from(time_dependent)
            } else {
                state
            };
            if c.in_channels() != expected_in || c.out_channels() != state {
                return Err(Error::config(format!(
                    "ODE conv {i} maps {} -> {} channels, expected {expected_in} -> {state}",
                    c.in_channels(),
                    c.out_channels()
                )));
            }
        }
        Ok(Self {
            convs,
            time_dependent,
            nfe: NfeCounter::new(),
        })
    }

    pub fn state_channels(&self) -> usize {
        self.convs[self.convs.len() - 1].out_channels()
    }

    pub fn time_dependent(&self) -> bool {
        self.time_dependent
    }

    pub fn layers(&self) -> usize {
        self.convs.len()
    }

    pub fn convs(&self) -> &[ConvParams<T>] {
        &self.convs
    }

    pub fn convs_mut(&mut self) -> &mut [ConvParams<T>] {
        &mut self.convs
    }
}

impl<T: Scalar> VectorField<T> for OdeFunction<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        self.convs.iter().flat_map(|c| c.tensors()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.convs.iter_mut().flat_map(|c| c.tensors_mut()).collect()
    }

    fn forward(&self, tape: &mut Tape<T>, theta: &[Var], u: Var, t: f64) -> Result<Var> {
        let mut x = u;
        if self.time_dependent {
            let s = tape.shape(u)?;
            let time = tape.constant(Tensor::full(Shape::new(s.n(), 1, s.h(), s.w()), T::from_f64(t)));
            x = tape.concat_channels(time, u)?;
        }
        let mut vars = theta.iter().copied();
        let last = self.convs.len() - 1;
        for (i, c) in self.convs.iter().enumerate() {
            let conv = BoundConv::take(&mut vars, c.bias.is_some(), c.padding)?;
            x = if i < last {
                conv_lrelu(tape, &conv, x)?
            } else {
                conv.apply(tape, x)?
            };
        }
        Ok(x)
    }

    fn nfe(&self) -> &NfeCounter {
        &self.nfe
    }
}
