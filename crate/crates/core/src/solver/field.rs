//! Right-hand sides: taped vector fields and plain evaluation closures.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Monotone count of right-hand side evaluations.
#[derive(Debug, Default)]
pub struct NfeCounter(AtomicU64);

impl NfeCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tick(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

impl Clone for NfeCounter {
    fn clone(&self) -> Self {
        Self(AtomicU64::new(self.get()))
    }
}

/// Parameterized ODE right-hand side `f(u, t, θ)` expressed with tape primitives.
///
/// `forward` receives the parameters as tape handles in the order returned by
/// [`VectorField::params`].
pub trait VectorField<T: Scalar>: Send + Sync {
    fn params(&self) -> Vec<&Tensor<T>>;

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn forward(&self, tape: &mut Tape<T>, theta: &[Var], u: Var, t: f64) -> Result<Var>;

    fn nfe(&self) -> &NfeCounter;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Push θ onto `tape`, as trainable leaves or as constants.
    fn bind_params(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    /// One counted evaluation on `tape`.
    fn evaluate(&self, tape: &mut Tape<T>, theta: &[Var], u: Var, t: f64) -> Result<Var> {
        self.nfe().tick();
        let out = self.forward(tape, theta, u, t)?;
        let (si, so) = (tape.shape(u)?, tape.shape(out)?);
        if si != so {
            return Err(Error::config(format!("vector field maps state {si} to {so}")));
        }
        Ok(out)
    }

    /// One counted evaluation on a throwaway tape.
    fn eval_detached(&self, u: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let theta = self.bind_params(&mut tape, false);
        let x = tape.constant(u.clone());
        let y = self.evaluate(&mut tape, &theta, x, t)?;
        Ok(tape.value(y)?.clone())
    }
}

/// A vector field built from a closure over tape primitives.
pub struct FnField<T, F> {
    params: Vec<Tensor<T>>,
    f: F,
    nfe: NfeCounter,
}

impl<T: Scalar, F> FnField<T, F>
where
    F: Fn(&mut Tape<T>, &[Var], Var, f64) -> Result<Var> + Send + Sync,
{
    pub fn new(params: Vec<Tensor<T>>, f: F) -> Self {
        Self {
            params,
            f,
            nfe: NfeCounter::new(),
        }
    }
}

impl<T: Scalar, F: Clone> Clone for FnField<T, F> {
    fn clone(&self) -> Self {
        Self {
            params: self.params.clone(),
            f: self.f.clone(),
            nfe: self.nfe.clone(),
        }
    }
}

impl<T: Scalar, F> VectorField<T> for FnField<T, F>
where
    F: Fn(&mut Tape<T>, &[Var], Var, f64) -> Result<Var> + Send + Sync,
{
    fn params(&self) -> Vec<&Tensor<T>> {
        self.params.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.params.iter_mut().collect()
    }

    fn forward(&self, tape: &mut Tape<T>, theta: &[Var], u: Var, t: f64) -> Result<Var> {
        (self.f)(tape, theta, u, t)
    }

    fn nfe(&self) -> &NfeCounter {
        &self.nfe
    }
}

/// Plain (untaped) right-hand side used by the eager integrator.
pub trait OdeRhs<T: Scalar> {
    fn rhs(&self, u: &Tensor<T>, t: f64) -> Result<Tensor<T>>;
}

/// Adapts a [`VectorField`] to [`OdeRhs`] through detached evaluation.
pub struct FieldRhs<'a, F: ?Sized>(pub &'a F);

impl<T: Scalar, F: VectorField<T> + ?Sized> OdeRhs<T> for FieldRhs<'_, F> {
    fn rhs(&self, u: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
        self.0.eval_detached(u, t)
    }
}

/// Closure-backed [`OdeRhs`].
pub struct FnRhs<F>(pub F);

impl<T: Scalar, F: Fn(&Tensor<T>, f64) -> Result<Tensor<T>>> OdeRhs<T> for FnRhs<F> {
    fn rhs(&self, u: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
        (self.0)(u, t)
    }
}

/// `f(u) = W u` as a bias-free 1x1 convolution over channels, θ = W.
pub fn linear_field<T: Scalar>(
    weight: Tensor<T>,
) -> FnField<T, impl Fn(&mut Tape<T>, &[Var], Var, f64) -> Result<Var> + Send + Sync + Clone> {
    FnField::new(vec![weight], |tape: &mut Tape<T>, theta: &[Var], u: Var, _t: f64| {
        tape.conv2d(u, theta[0], None, 0)
    })
}

/// Parameter-free field that is identically zero.
pub fn null_field<T: Scalar>(
) -> FnField<T, impl Fn(&mut Tape<T>, &[Var], Var, f64) -> Result<Var> + Send + Sync + Clone> {
    FnField::new(Vec::new(), |tape: &mut Tape<T>, _theta: &[Var], u: Var, _t: f64| {
        tape.scale(u, T::ZERO)
    })
}
