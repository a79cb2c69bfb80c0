//! Adaptive Dormand–Prince 5(4) integration over tensor states.
//!
//! The stepping logic is written once against [`StageArith`], so the same
//! code drives plain evaluation ([`Eager`]) and fully recorded evaluation on a
//! tape ([`Taped`]). Both perform identical arithmetic in identical order.

mod field;
pub mod tableau;

pub use field::{linear_field, null_field, FieldRhs, FnField, FnRhs, NfeCounter, OdeRhs, VectorField};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, TapeMark, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Step controller and integration bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub rtol: f64,
    pub atol: f64,
    pub t0: f64,
    pub t_final: f64,
    /// First trial step; the whole interval when unset.
    pub initial_step: Option<f64>,
    pub safety: f64,
    pub min_factor: f64,
    pub max_factor: f64,
    /// Evaluation budget for one integration.
    pub max_nfe: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rtol: 1e-7,
            atol: 1e-9,
            t0: 0.0,
            t_final: 1.0,
            initial_step: None,
            safety: 0.9,
            min_factor: 0.2,
            max_factor: 10.0,
            max_nfe: 100_000,
        }
    }
}

impl SolverConfig {
    pub fn with_tolerances(rtol: f64, atol: f64) -> Self {
        Self {
            rtol,
            atol,
            ..Self::default()
        }
    }

    pub fn span(&self) -> f64 {
        self.t_final - self.t0
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return fail(format!(
                "tolerances must be positive (rtol {}, atol {})",
                self.rtol, self.atol
            ));
        }
        if !(self.t_final > self.t0) {
            return fail(format!("t_final {} must exceed t0 {}", self.t_final, self.t0));
        }
        if self.max_nfe < 1 {
            return fail("max_nfe must be at least 1".into());
        }
        if !(self.safety > 0.0 && self.safety <= 1.0) {
            return fail(format!("safety factor {} outside (0, 1]", self.safety));
        }
        if !(self.min_factor > 0.0 && self.min_factor <= 1.0 && self.max_factor >= 1.0) {
            return fail(format!(
                "step factor clamps [{}, {}] must bracket 1",
                self.min_factor, self.max_factor
            ));
        }
        if let Some(h) = self.initial_step {
            if !(h > 0.0) {
                return fail(format!("initial step {h} must be positive"));
            }
        }
        Ok(())
    }
}

/// Outcome of one adaptive integration.
#[derive(Debug, Clone)]
pub struct SolveResult<S> {
    pub final_state: S,
    /// Start time and size of every accepted step.
    pub steps: Vec<(f64, f64)>,
    pub rejected: usize,
    /// Right-hand side evaluations spent, including rejected attempts.
    pub nfe: usize,
    /// States at accepted-step boundaries, starting with the initial state.
    pub checkpoints: Option<Vec<S>>,
    pub budget_exhausted: bool,
    /// Time of `final_state`; short of `t_final` only when the budget ran out.
    pub t_reached: f64,
}

impl<S> SolveResult<S> {
    pub fn accepted(&self) -> usize {
        self.steps.len()
    }

    pub fn stats(&self) -> SolveStats {
        SolveStats {
            nfe: self.nfe,
            steps: self.steps.clone(),
            rejected: self.rejected,
            budget_exhausted: self.budget_exhausted,
        }
    }
}

/// The step ledger of a solve without its states.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveStats {
    pub nfe: usize,
    pub steps: Vec<(f64, f64)>,
    pub rejected: usize,
    pub budget_exhausted: bool,
}

impl SolveStats {
    pub fn accepted(&self) -> usize {
        self.steps.len()
    }
}

/// Where the stage arithmetic of a step is carried out.
pub trait StageArith<T: Scalar> {
    type State: Clone;

    /// One right-hand side evaluation.
    fn eval(&mut self, u: &Self::State, t: f64) -> Result<Self::State>;

    /// `Σ cᵢ · stateᵢ`.
    fn combine(&mut self, terms: &[(T, &Self::State)]) -> Result<Self::State>;

    fn value<'a>(&'a self, s: &'a Self::State) -> Result<&'a Tensor<T>>;

    /// Opaque marker that [`StageArith::rollback`] can discard back to.
    fn mark(&self) -> Option<TapeMark> {
        None
    }

    fn rollback(&mut self, _mark: Option<TapeMark>) {}
}

/// Plain tensor arithmetic.
pub struct Eager<'a, T: Scalar> {
    rhs: &'a dyn OdeRhs<T>,
}

impl<'a, T: Scalar> Eager<'a, T> {
    pub fn new(rhs: &'a dyn OdeRhs<T>) -> Self {
        Self { rhs }
    }
}

impl<T: Scalar> StageArith<T> for Eager<'_, T> {
    type State = Tensor<T>;

    fn eval(&mut self, u: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
        self.rhs.rhs(u, t)
    }

    fn combine(&mut self, terms: &[(T, &Tensor<T>)]) -> Result<Tensor<T>> {
        Tensor::lin_comb(terms)
    }

    fn value<'a>(&'a self, s: &'a Tensor<T>) -> Result<&'a Tensor<T>> {
        Ok(s)
    }
}

/// Arithmetic recorded on a tape so the whole solve can be differentiated.
pub struct Taped<'a, T: Scalar, F: ?Sized> {
    pub tape: &'a mut Tape<T>,
    field: &'a F,
    theta: Vec<Var>,
    value_limit: Option<usize>,
}

impl<'a, T: Scalar, F: VectorField<T> + ?Sized> Taped<'a, T, F> {
    pub fn new(tape: &'a mut Tape<T>, field: &'a F, theta: Vec<Var>) -> Self {
        Self {
            tape,
            field,
            theta,
            value_limit: None,
        }
    }

    /// Fail with a resource error once the tape holds more than `limit` values.
    pub fn with_value_limit(mut self, limit: Option<usize>) -> Self {
        self.value_limit = limit;
        self
    }

    fn check_limit(&self) -> Result<()> {
        match self.value_limit {
            Some(limit) if self.tape.saved_values() > limit => Err(Error::Resource(format!(
                "tape holds {} values, limit {limit}",
                self.tape.saved_values()
            ))),
            _ => Ok(()),
        }
    }
}

impl<T: Scalar, F: VectorField<T> + ?Sized> StageArith<T> for Taped<'_, T, F> {
    type State = Var;

    fn eval(&mut self, u: &Var, t: f64) -> Result<Var> {
        let out = self.field.evaluate(self.tape, &self.theta, *u, t)?;
        self.check_limit()?;
        Ok(out)
    }

    fn combine(&mut self, terms: &[(T, &Var)]) -> Result<Var> {
        let terms: Vec<(T, Var)> = terms.iter().map(|&(c, v)| (c, *v)).collect();
        let out = self.tape.lin_comb(&terms)?;
        self.check_limit()?;
        Ok(out)
    }

    fn value<'a>(&'a self, s: &'a Var) -> Result<&'a Tensor<T>> {
        self.tape.value(*s)
    }

    fn mark(&self) -> Option<TapeMark> {
        Some(self.tape.mark())
    }

    fn rollback(&mut self, mark: Option<TapeMark>) {
        if let Some(m) = mark {
            self.tape.truncate(m);
        }
    }
}

/// Result of a single Dormand–Prince step.
#[derive(Debug, Clone)]
pub struct StepOutput<T, S> {
    /// Fifth-order solution at `t + h`.
    pub u5: S,
    /// `u5 − u4`, the embedded local error estimate.
    pub error: Tensor<T>,
    /// `f(u5, t + h)`, reusable as the next step's first stage.
    pub k7: S,
}

/// One Dormand–Prince 5(4) step. Evaluates 7 stages, or 6 when `k1` is supplied.
pub fn dopri5_step<T: Scalar, A: StageArith<T>>(
    arith: &mut A,
    u: &A::State,
    t: f64,
    h: f64,
    k1: Option<A::State>,
) -> Result<StepOutput<T, A::State>> {
    let (u5, mut ks) = solution_stages(arith, u, t, h, k1)?;
    let k7 = arith.eval(&u5, t + h)?;
    check_stage(arith, &k7, 7, t, h)?;
    ks.push(k7);

    let e = tableau::error_weights();
    let mut terms = Vec::with_capacity(7);
    for (i, k) in ks.iter().enumerate() {
        if e[i] != 0.0 {
            terms.push((T::from_f64(h * e[i]), arith.value(k)?));
        }
    }
    let error = Tensor::lin_comb(&terms)?;
    let k7 = ks.pop().expect("seven stages");
    Ok(StepOutput { u5, error, k7 })
}

/// The fifth-order solution of one step without the trailing error stage.
///
/// Evaluates 6 stages, or 5 when `k1` is supplied; the value is identical to
/// `dopri5_step(..).u5`.
pub fn dopri5_solution<T: Scalar, A: StageArith<T>>(
    arith: &mut A,
    u: &A::State,
    t: f64,
    h: f64,
    k1: Option<A::State>,
) -> Result<A::State> {
    Ok(solution_stages(arith, u, t, h, k1)?.0)
}

fn check_stage<T: Scalar, A: StageArith<T>>(arith: &A, s: &A::State, stage: usize, t: f64, h: f64) -> Result<()> {
    if arith.value(s)?.all_finite() {
        Ok(())
    } else {
        Err(Error::numeric(format!("non-finite stage {stage} at t = {t}, h = {h}")))
    }
}

fn solution_stages<T: Scalar, A: StageArith<T>>(
    arith: &mut A,
    u: &A::State,
    t: f64,
    h: f64,
    k1: Option<A::State>,
) -> Result<(A::State, Vec<A::State>)> {
    if !(h > 0.0) {
        return Err(Error::config(format!("step size {h} must be positive")));
    }
    let k1 = match k1 {
        Some(k) => k,
        None => {
            let k = arith.eval(u, t)?;
            check_stage(arith, &k, 1, t, h)?;
            k
        }
    };
    let mut ks: Vec<A::State> = Vec::with_capacity(7);
    ks.push(k1);
    for i in 1..6 {
        let ui = stage_state(arith, u, h, tableau::A[i], &ks)?;
        let k = arith.eval(&ui, t + tableau::C[i] * h)?;
        check_stage(arith, &k, i + 1, t, h)?;
        ks.push(k);
    }
    let u5 = stage_state(arith, u, h, &tableau::B5[..6], &ks)?;
    Ok((u5, ks))
}

/// `u + h Σ aⱼ kⱼ`, skipping zero coefficients.
fn stage_state<T: Scalar, A: StageArith<T>>(
    arith: &mut A,
    u: &A::State,
    h: f64,
    coeffs: &[f64],
    ks: &[A::State],
) -> Result<A::State> {
    let mut terms: Vec<(T, &A::State)> = Vec::with_capacity(coeffs.len() + 1);
    terms.push((T::ONE, u));
    for (a, k) in coeffs.iter().zip(ks) {
        if *a != 0.0 {
            terms.push((T::from_f64(h * a), k));
        }
    }
    arith.combine(&terms)
}

/// Scaled RMS norm of a local error estimate; a step is accepted iff it is ≤ 1.
pub fn error_norm<T: Scalar>(error: &Tensor<T>, u_old: &Tensor<T>, u_new: &Tensor<T>, config: &SolverConfig) -> f64 {
    assert_eq!(error.shape(), u_old.shape(), "error / state shape mismatch");
    assert_eq!(error.shape(), u_new.shape(), "error / state shape mismatch");
    let mut acc = 0.0f64;
    for ((&e, &a), &b) in error.data().iter().zip(u_old.data()).zip(u_new.data()) {
        let scale = config.atol + config.rtol * a.to_f64().abs().max(b.to_f64().abs());
        let r = e.to_f64() / scale;
        acc += r * r;
    }
    (acc / error.numel() as f64).sqrt()
}

/// Proposed next step size from the current one and its error norm.
pub fn next_step_size(h: f64, norm: f64, config: &SolverConfig) -> f64 {
    if norm == 0.0 {
        return h * config.max_factor;
    }
    let factor = config.safety * norm.powf(-0.2);
    h * factor.clamp(config.min_factor, config.max_factor)
}

/// Integrate a vector field from `config.t0` to `config.t_final`.
pub fn integrate<T: Scalar, F: VectorField<T> + ?Sized>(
    field: &F,
    u0: &Tensor<T>,
    config: &SolverConfig,
    capture_checkpoints: bool,
) -> Result<SolveResult<Tensor<T>>> {
    let rhs = FieldRhs(field);
    integrate_rhs(&rhs, u0, config, capture_checkpoints)
}

/// Integrate a plain right-hand side.
pub fn integrate_rhs<T: Scalar>(
    rhs: &dyn OdeRhs<T>,
    u0: &Tensor<T>,
    config: &SolverConfig,
    capture_checkpoints: bool,
) -> Result<SolveResult<Tensor<T>>> {
    u0.check_finite("initial state")?;
    let mut arith = Eager::new(rhs);
    integrate_with(&mut arith, u0.clone(), config, capture_checkpoints)
}

/// Adaptive loop with first-same-as-last stage reuse.
///
/// Rejected attempts are rolled back on taped arithmetic, so they never
/// enter the recorded graph.
pub fn integrate_with<T: Scalar, A: StageArith<T>>(
    arith: &mut A,
    u0: A::State,
    config: &SolverConfig,
    capture_checkpoints: bool,
) -> Result<SolveResult<A::State>> {
    config.validate()?;
    let span = config.span();
    let mut h = config.initial_step.unwrap_or(span);
    let min_step = span * 1e-13;

    let mut t = config.t0;
    let mut u = u0;
    let mut checkpoints = capture_checkpoints.then(|| vec![u.clone()]);
    let mut steps = Vec::new();
    let mut rejected = 0usize;
    let mut budget_exhausted = false;

    let mut k1 = arith.eval(&u, t)?;
    let mut nfe = 1usize;
    if !arith.value(&k1)?.all_finite() {
        return Err(Error::numeric(format!("non-finite derivative at t = {t}")));
    }

    while t < config.t_final {
        if nfe + 6 > config.max_nfe {
            budget_exhausted = true;
            break;
        }
        let remaining = config.t_final - t;
        let last = h >= remaining * (1.0 - 1e-12);
        if last {
            h = remaining;
        }
        if h < min_step {
            return Err(Error::numeric(format!("step size underflow: h = {h:e} at t = {t}")));
        }

        let mark = arith.mark();
        let step = dopri5_step(arith, &u, t, h, Some(k1.clone()))?;
        nfe += 6;
        let norm = error_norm(&step.error, arith.value(&u)?, arith.value(&step.u5)?, config);

        if norm <= 1.0 {
            steps.push((t, h));
            t = if last { config.t_final } else { t + h };
            u = step.u5;
            k1 = step.k7;
            if let Some(cps) = checkpoints.as_mut() {
                cps.push(u.clone());
            }
        } else {
            arith.rollback(mark);
            rejected += 1;
        }
        h = if norm.is_finite() {
            next_step_size(h, norm, config)
        } else {
            h * config.min_factor
        };
    }

    Ok(SolveResult {
        final_state: u,
        steps,
        rejected,
        nfe,
        checkpoints,
        budget_exhausted,
        t_reached: t,
    })
}

/// Replay a fixed sequence of accepted steps (no error control, no rejections).
///
/// Costs `1 + 6·steps` evaluations; with the schedule of an adaptive solve it
/// reproduces that solve's states exactly.
pub fn replay_steps<T: Scalar, A: StageArith<T>>(
    arith: &mut A,
    u0: A::State,
    steps: &[(f64, f64)],
) -> Result<A::State> {
    let mut u = u0;
    let Some(&(t_first, _)) = steps.first() else {
        return Ok(u);
    };
    let mut k1 = arith.eval(&u, t_first)?;
    for &(t, h) in steps {
        let out = dopri5_step(arith, &u, t, h, Some(k1))?;
        u = out.u5;
        k1 = out.k7;
    }
    Ok(u)
}
