//! Gradients of losses that contain an ODE solve.
//!
//! Three backends share one interface: a forward pass ([`forward`]) that
//! records whatever its backward pass needs, and [`ForwardPass::backward`]
//! which turns `∂loss/∂u(T)` into parameter gradients and `∂loss/∂u(t0)`.
//!
//! * [`Method::Adjoint`] keeps only `u(T)` and solves the augmented adjoint
//!   system backwards in time.
//! * [`Method::Discrete`] records every accepted stage on one tape and
//!   backpropagates through it.
//! * [`Method::Checkpointed`] stores the state at each accepted-step boundary
//!   and rematerializes one step at a time on a fresh tape.

mod adjoint;
mod watchdog;

pub use adjoint::{adjoint_backward, vjp, AdjointSystem, Vjp};
pub use watchdog::{DivergenceRecord, DivergenceWatchdog, FlagReason, WatchdogSummary, DEFAULT_MEDIAN_MULTIPLE};

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::solver::{dopri5_solution, integrate, integrate_with, SolveResult, SolverConfig, Taped, VectorField};
use crate::tensor::{Scalar, Tensor};

/// Default evaluation budget for the adjoint backward solve.
pub const DEFAULT_BACKWARD_BUDGET: usize = 100_000;

/// Gradient backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Adjoint,
    Discrete,
    Checkpointed,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Adjoint, Method::Discrete, Method::Checkpointed];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Adjoint => "adjoint",
            Method::Discrete => "discrete",
            Method::Checkpointed => "checkpointed",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adjoint" => Ok(Method::Adjoint),
            "discrete" => Ok(Method::Discrete),
            "checkpointed" => Ok(Method::Checkpointed),
            other => Err(Error::config(format!(
                "unknown gradient backend {other:?} (expected adjoint, discrete or checkpointed)"
            ))),
        }
    }
}

/// Options that only matter for the backward pass.
#[derive(Debug, Clone)]
pub struct BackwardOptions {
    /// Evaluation budget of the adjoint backward solve.
    pub budget: usize,
    /// Resource limit on values held by a discrete-backend tape.
    pub tape_value_limit: Option<usize>,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        Self {
            budget: DEFAULT_BACKWARD_BUDGET,
            tape_value_limit: None,
        }
    }
}

/// Parameter gradients from one backend, with cost accounting.
#[derive(Debug, Clone)]
pub struct GradientReport<T> {
    pub method: Method,
    /// One tensor per field parameter; `None` iff the backward pass diverged.
    pub gradients: Option<Vec<Tensor<T>>>,
    /// `∂loss/∂u(t0)`; `None` iff the backward pass diverged.
    pub input_gradient: Option<Tensor<T>>,
    pub forward_nfe: usize,
    pub backward_nfe: usize,
    pub accepted_steps: usize,
    pub diverged: bool,
    pub wall_ms: f64,
    /// Largest number of values held at once by tapes, checkpoints and
    /// augmented states during the backward pass.
    pub peak_saved_values: usize,
}

/// One line of the `grad_reports.jsonl` metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientRecord {
    pub method: Method,
    pub forward_nfe: usize,
    pub backward_nfe: usize,
    pub diverged: bool,
    pub wall_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
}

impl<T: Scalar> GradientReport<T> {
    pub fn record(&self) -> GradientRecord {
        GradientRecord {
            method: self.method,
            forward_nfe: self.forward_nfe,
            backward_nfe: self.backward_nfe,
            diverged: self.diverged,
            wall_ms: self.wall_ms,
            batch: None,
            epoch: None,
        }
    }

    /// Serialized JSON object, without a trailing newline.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&self.record()).expect("record serializes")
    }

    /// Gradients converted to 64-bit, for comparisons.
    pub fn gradients_f64(&self) -> Option<Vec<Tensor<f64>>> {
        self.gradients.as_ref().map(|g| g.iter().map(|t| t.cast()).collect())
    }
}

enum Record<T: Scalar> {
    Adjoint,
    Discrete {
        tape: Tape<T>,
        theta: Vec<Var>,
        u0: Var,
        u_final: Var,
    },
    Checkpointed {
        checkpoints: Vec<Tensor<T>>,
    },
}

/// State kept between the forward solve and the backward pass.
pub struct ForwardPass<T: Scalar> {
    method: Method,
    solve: SolveResult<Tensor<T>>,
    config: SolverConfig,
    record: Record<T>,
    started: Instant,
}

/// Forward solve, recording what `method` needs for its backward pass.
pub fn forward<T: Scalar, F: VectorField<T> + ?Sized>(
    method: Method,
    field: &F,
    u0: &Tensor<T>,
    config: &SolverConfig,
    opts: &BackwardOptions,
) -> Result<ForwardPass<T>> {
    let started = Instant::now();
    u0.check_finite("initial state")?;
    let (solve, record) = match method {
        Method::Adjoint => (integrate(field, u0, config, false)?, Record::Adjoint),
        Method::Checkpointed => {
            let mut solve = integrate(field, u0, config, true)?;
            let checkpoints = solve.checkpoints.take().expect("checkpoints requested");
            (solve, Record::Checkpointed { checkpoints })
        }
        Method::Discrete => {
            let mut tape = Tape::new();
            let theta = field.bind_params(&mut tape, true);
            let x0 = tape.param(u0.clone());
            let mut arith = Taped::new(&mut tape, field, theta.clone()).with_value_limit(opts.tape_value_limit);
            let taped = integrate_with(&mut arith, x0, config, false)?;
            let solve = SolveResult {
                final_state: tape.value(taped.final_state)?.clone(),
                steps: taped.steps,
                rejected: taped.rejected,
                nfe: taped.nfe,
                checkpoints: None,
                budget_exhausted: taped.budget_exhausted,
                t_reached: taped.t_reached,
            };
            let record = Record::Discrete {
                tape,
                theta,
                u0: x0,
                u_final: taped.final_state,
            };
            (solve, record)
        }
    };
    if solve.budget_exhausted {
        return Err(Error::numeric(format!(
            "forward solve exhausted its budget of {} evaluations at t = {}",
            config.max_nfe, solve.t_reached
        )));
    }
    Ok(ForwardPass {
        method,
        solve,
        config: config.clone(),
        record,
        started,
    })
}

impl<T: Scalar> ForwardPass<T> {
    pub fn method(&self) -> Method {
        self.method
    }

    /// `u(T)`.
    pub fn output(&self) -> &Tensor<T> {
        &self.solve.final_state
    }

    pub fn solve(&self) -> &SolveResult<Tensor<T>> {
        &self.solve
    }

    /// Values currently held for the backward pass.
    pub fn saved_values(&self) -> usize {
        match &self.record {
            Record::Adjoint => self.solve.final_state.numel(),
            Record::Discrete { tape, .. } => tape.saved_values(),
            Record::Checkpointed { checkpoints } => checkpoints.iter().map(|c| c.numel()).sum(),
        }
    }

    /// Turn `∂loss/∂u(T)` into parameter gradients.
    pub fn backward<F: VectorField<T> + ?Sized>(
        self,
        field: &F,
        loss_grad: &Tensor<T>,
        opts: &BackwardOptions,
    ) -> Result<GradientReport<T>> {
        if loss_grad.shape() != self.solve.final_state.shape() {
            return Err(Error::config(format!(
                "loss gradient {} does not match state {}",
                loss_grad.shape(),
                self.solve.final_state.shape()
            )));
        }
        let forward_nfe = self.solve.nfe;
        let accepted_steps = self.solve.accepted();
        let mut report = match self.record {
            Record::Adjoint => adjoint_backward(field, &self.solve.final_state, loss_grad, &self.config, opts.budget)?,
            Record::Discrete {
                tape,
                theta,
                u0,
                u_final,
            } => {
                let grads = tape.backward_from(u_final, loss_grad.clone())?;
                let gradients = theta.iter().map(|&v| grads.wrt(&tape, v)).collect::<Result<Vec<_>>>()?;
                GradientReport {
                    method: Method::Discrete,
                    gradients: Some(gradients),
                    input_gradient: Some(grads.wrt(&tape, u0)?),
                    forward_nfe: 0,
                    backward_nfe: 0,
                    accepted_steps: 0,
                    diverged: false,
                    wall_ms: 0.0,
                    peak_saved_values: tape.peak_saved_values(),
                }
            }
            Record::Checkpointed { checkpoints } => {
                checkpointed_backward(field, &checkpoints, &self.solve.steps, loss_grad)?
            }
        };
        report.forward_nfe = forward_nfe;
        report.accepted_steps = accepted_steps;
        report.wall_ms = self.started.elapsed().as_secs_f64() * 1e3;
        Ok(report)
    }
}

/// Walk accepted steps in reverse, rematerializing each one from its checkpoint.
fn checkpointed_backward<T: Scalar, F: VectorField<T> + ?Sized>(
    field: &F,
    checkpoints: &[Tensor<T>],
    steps: &[(f64, f64)],
    loss_grad: &Tensor<T>,
) -> Result<GradientReport<T>> {
    debug_assert_eq!(checkpoints.len(), steps.len() + 1);
    let stored: usize = checkpoints.iter().map(|c| c.numel()).sum();
    let mut totals: Vec<Tensor<T>> = field.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut adj = loss_grad.clone();
    let mut backward_nfe = 0usize;
    let mut peak = stored;
    for (k, &(t, h)) in steps.iter().enumerate().rev() {
        let mut tape = Tape::new();
        let theta = field.bind_params(&mut tape, true);
        let uk = tape.param(checkpoints[k].clone());
        let before = field.nfe().get();
        let next = {
            let mut arith = Taped::new(&mut tape, field, theta.clone());
            dopri5_solution(&mut arith, &uk, t, h, None)?
        };
        backward_nfe += (field.nfe().get() - before) as usize;
        peak = peak.max(stored + tape.peak_saved_values());
        let grads = tape.backward_from(next, adj)?;
        for (total, &v) in totals.iter_mut().zip(&theta) {
            if let Some(g) = grads.get(v) {
                total.add_assign(g);
            }
        }
        adj = grads.wrt(&tape, uk)?;
    }
    Ok(GradientReport {
        method: Method::Checkpointed,
        gradients: Some(totals),
        input_gradient: Some(adj),
        forward_nfe: 0,
        backward_nfe,
        accepted_steps: steps.len(),
        diverged: false,
        wall_ms: 0.0,
        peak_saved_values: peak,
    })
}

/// Loss on the final state, built on a tape: `(tape, u(T)) -> scalar`.
pub trait FinalLoss<T: Scalar>: FnOnce(&mut Tape<T>, Var) -> Result<Var> {}
impl<T: Scalar, L: FnOnce(&mut Tape<T>, Var) -> Result<Var>> FinalLoss<T> for L {}

/// Value and `∂loss/∂u(T)` of a final-state loss.
pub fn loss_and_grad<T: Scalar>(u_final: &Tensor<T>, loss: impl FinalLoss<T>) -> Result<(T, Tensor<T>)> {
    let mut tape = Tape::new();
    let x = tape.param(u_final.clone());
    let l = loss(&mut tape, x)?;
    let value = tape.value(l)?.item();
    let grads = tape.backward(l)?;
    Ok((value, grads.wrt(&tape, x)?))
}

/// Gradient of `loss(u(T))` with respect to θ by any backend.
pub fn gradient<T: Scalar, F: VectorField<T> + ?Sized>(
    method: Method,
    field: &F,
    u0: &Tensor<T>,
    loss: impl FinalLoss<T>,
    config: &SolverConfig,
    opts: &BackwardOptions,
) -> Result<GradientReport<T>> {
    let pass = forward(method, field, u0, config, opts)?;
    let (_, loss_grad) = loss_and_grad(pass.output(), loss)?;
    pass.backward(field, &loss_grad, opts)
}

/// Continuous adjoint: solve the augmented system backwards from `u(T)`.
pub fn adjoint_gradient<T: Scalar, F: VectorField<T> + ?Sized>(
    field: &F,
    u0: &Tensor<T>,
    loss: impl FinalLoss<T>,
    config: &SolverConfig,
    backward_budget: usize,
) -> Result<GradientReport<T>> {
    let opts = BackwardOptions {
        budget: backward_budget,
        ..BackwardOptions::default()
    };
    gradient(Method::Adjoint, field, u0, loss, config, &opts)
}

/// Reverse accumulation through every recorded stage of the solve.
pub fn discrete_gradient<T: Scalar, F: VectorField<T> + ?Sized>(
    field: &F,
    u0: &Tensor<T>,
    loss: impl FinalLoss<T>,
    config: &SolverConfig,
) -> Result<GradientReport<T>> {
    gradient(Method::Discrete, field, u0, loss, config, &BackwardOptions::default())
}

/// Discrete gradient with per-step rematerialization from stored states.
pub fn checkpointed_gradient<T: Scalar, F: VectorField<T> + ?Sized>(
    field: &F,
    u0: &Tensor<T>,
    loss: impl FinalLoss<T>,
    config: &SolverConfig,
) -> Result<GradientReport<T>> {
    gradient(
        Method::Checkpointed,
        field,
        u0,
        loss,
        config,
        &BackwardOptions::default(),
    )
}
