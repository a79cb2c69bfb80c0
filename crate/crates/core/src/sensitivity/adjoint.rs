//! Continuous adjoint: the augmented system solved in reversed time.
//!
//! With `τ = t_final − t` the packed state `(x, a, g)` obeys
//!
//! ```text
//! dx/dτ = −f(x, t)
//! da/dτ =  aᵀ ∂f/∂x
//! dg/dτ =  aᵀ ∂f/∂θ
//! ```
//!
//! from `(u(T), ∂L/∂u(T), 0)` at `τ = 0`, which is the usual backward-time
//! system written so the forward-only integrator can solve it.

use std::cell::Cell;
use std::marker::PhantomData;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::solver::{integrate_rhs, OdeRhs, SolverConfig, VectorField};
use crate::tensor::{Scalar, Shape, Tensor};

use super::{GradientReport, Method};

/// Buffers alive inside one adaptive step: seven stages plus the current
/// state, the candidate and the error estimate.
const STEP_BUFFERS: usize = 10;

/// Vector-Jacobian products of one field evaluation.
#[derive(Debug, Clone)]
pub struct Vjp<T> {
    /// `f(u, t)`.
    pub value: Tensor<T>,
    /// `aᵀ ∂f/∂u`.
    pub input: Tensor<T>,
    /// `aᵀ ∂f/∂θ`, one tensor per parameter.
    pub params: Vec<Tensor<T>>,
    pub tape_peak: usize,
}

/// Both vector-Jacobian products from one taped evaluation of `field`.
pub fn vjp<T: Scalar, F: VectorField<T> + ?Sized>(field: &F, u: &Tensor<T>, t: f64, a: &Tensor<T>) -> Result<Vjp<T>> {
    if a.shape() != u.shape() {
        return Err(Error::config(format!(
            "co-state {} does not match state {}",
            a.shape(),
            u.shape()
        )));
    }
    let mut tape = Tape::new();
    let theta = field.bind_params(&mut tape, true);
    let x = tape.param(u.clone());
    let y = field.evaluate(&mut tape, &theta, x, t)?;
    let value = tape.value(y)?.clone();
    value.check_finite("vector field output")?;
    let grads = tape.backward_from(y, a.clone())?;
    let input = grads.wrt(&tape, x)?;
    input.check_finite("state vector-Jacobian product")?;
    let params = theta.iter().map(|&v| grads.wrt(&tape, v)).collect::<Result<Vec<_>>>()?;
    for p in &params {
        p.check_finite("parameter vector-Jacobian product")?;
    }
    Ok(Vjp {
        value,
        input,
        params,
        tape_peak: tape.peak_saved_values(),
    })
}

/// The augmented adjoint right-hand side on a packed `(1, 1, 1, 2n + m)` state.
pub struct AdjointSystem<'a, T: Scalar, F: ?Sized> {
    field: &'a F,
    state_shape: Shape,
    param_shapes: Vec<Shape>,
    t_final: f64,
    tape_peak: Cell<usize>,
    _scalar: PhantomData<T>,
}

impl<'a, T: Scalar, F: VectorField<T> + ?Sized> AdjointSystem<'a, T, F> {
    pub fn new(field: &'a F, state_shape: Shape, t_final: f64) -> Self {
        let param_shapes = field.params().iter().map(|p| p.shape()).collect();
        Self {
            field,
            state_shape,
            param_shapes,
            t_final,
            tape_peak: Cell::new(0),
            _scalar: PhantomData,
        }
    }

    fn state_len(&self) -> usize {
        self.state_shape.numel()
    }

    pub fn packed_len(&self) -> usize {
        2 * self.state_len() + self.param_shapes.iter().map(|s| s.numel()).sum::<usize>()
    }

    /// `(x, a, 0)` as one flat tensor.
    pub fn pack(&self, x: &Tensor<T>, a: &Tensor<T>) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.packed_len());
        data.extend_from_slice(x.data());
        data.extend_from_slice(a.data());
        data.resize(self.packed_len(), T::ZERO);
        Tensor::from_vec(Shape::new(1, 1, 1, data.len()), data).expect("non-empty packed state")
    }

    /// Split a packed state back into `(x, a, g)`.
    pub fn unpack(&self, packed: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Vec<Tensor<T>>)> {
        let n = self.state_len();
        let d = packed.data();
        let x = Tensor::from_vec(self.state_shape, d[..n].to_vec())?;
        let a = Tensor::from_vec(self.state_shape, d[n..2 * n].to_vec())?;
        let mut offset = 2 * n;
        let mut g = Vec::with_capacity(self.param_shapes.len());
        for &s in &self.param_shapes {
            g.push(Tensor::from_vec(s, d[offset..offset + s.numel()].to_vec())?);
            offset += s.numel();
        }
        Ok((x, a, g))
    }

    pub fn tape_peak(&self) -> usize {
        self.tape_peak.get()
    }
}

impl<T: Scalar, F: VectorField<T> + ?Sized> OdeRhs<T> for AdjointSystem<'_, T, F> {
    fn rhs(&self, packed: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
        let (x, a, _) = self.unpack(packed)?;
        let out = vjp(self.field, &x, self.t_final - tau, &a)?;
        self.tape_peak.set(self.tape_peak.get().max(out.tape_peak));
        let mut data = Vec::with_capacity(self.packed_len());
        data.extend(out.value.data().iter().map(|&v| -v));
        data.extend_from_slice(out.input.data());
        for p in &out.params {
            data.extend_from_slice(p.data());
        }
        Tensor::from_vec(packed.shape(), data)
    }
}

/// Solve the adjoint system from `u(T)` back to `t0` under an evaluation budget.
///
/// Running out of budget yields a report with `diverged` set and no gradients.
pub fn adjoint_backward<T: Scalar, F: VectorField<T> + ?Sized>(
    field: &F,
    u_final: &Tensor<T>,
    loss_grad: &Tensor<T>,
    config: &SolverConfig,
    budget: usize,
) -> Result<GradientReport<T>> {
    let system = AdjointSystem::new(field, u_final.shape(), config.t_final);
    let packed = system.pack(u_final, loss_grad);
    let reversed = SolverConfig {
        t0: 0.0,
        t_final: config.span(),
        max_nfe: budget,
        ..config.clone()
    };
    let solve = integrate_rhs(&system, &packed, &reversed, false)?;
    let peak = STEP_BUFFERS * system.packed_len() + system.tape_peak();
    let (gradients, input_gradient) = if solve.budget_exhausted {
        log::warn!(
            "adjoint backward solve exhausted {budget} evaluations at t = {}",
            config.t_final - solve.t_reached
        );
        (None, None)
    } else {
        let (_, a, g) = system.unpack(&solve.final_state)?;
        (Some(g), Some(a))
    };
    Ok(GradientReport {
        method: Method::Adjoint,
        diverged: gradients.is_none(),
        gradients,
        input_gradient,
        forward_nfe: 0,
        backward_nfe: solve.nfe,
        accepted_steps: 0,
        wall_ms: 0.0,
        peak_saved_values: peak,
    })
}
