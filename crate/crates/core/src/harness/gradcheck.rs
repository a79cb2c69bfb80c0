//! Finite-difference verification of every gradient backend.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{finite_difference_gradient, max_relative_error, ConvParams, Tape, Var};
use crate::error::Result;
use crate::model::OdeFunction;
use crate::sensitivity::{self, BackwardOptions, Method};
use crate::solver::{integrate, replay_steps, Eager, FieldRhs, SolverConfig, VectorField};
use crate::tensor::{Precision, Scalar, Shape, Tensor};

/// Central differences of `loss(u(T))` along a frozen step schedule.
///
/// Replaying the accepted steps of the unperturbed solve keeps the
/// perturbed losses on the same discretization, so the estimate is not
/// polluted by step-count changes.
pub fn frozen_schedule_gradient<F>(
    field: &F,
    u0: &Tensor<f64>,
    steps: &[(f64, f64)],
    loss: impl Fn(&Tensor<f64>) -> f64,
    fd_step: f64,
) -> Result<Vec<Tensor<f64>>>
where
    F: VectorField<f64> + Clone,
{
    let params: Vec<Tensor<f64>> = field.params().into_iter().cloned().collect();
    let mut work = field.clone();
    finite_difference_gradient(
        |theta| {
            for (slot, v) in work.params_mut().into_iter().zip(theta) {
                slot.clone_from(v);
            }
            let rhs = FieldRhs(&work);
            let mut arith = Eager::new(&rhs);
            Ok(loss(&replay_steps(&mut arith, u0.clone(), steps)?))
        },
        &params,
        fd_step,
    )
}

/// Settings of the grad-check suite.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckConfig {
    pub precision: Precision,
    pub filters: usize,
    pub augment: usize,
    pub size: usize,
    pub tolerance: f64,
    pub fd_step: f64,
    /// Pass threshold on the max relative error.
    pub threshold: f64,
    pub seed: u64,
}

impl GradCheckConfig {
    pub fn new(precision: Precision) -> Self {
        let (tolerance, threshold) = match precision {
            Precision::F64 => (1e-12, 1e-4),
            Precision::F32 => (1e-6, 1e-2),
        };
        Self {
            precision,
            filters: 4,
            augment: 2,
            size: 4,
            tolerance,
            fd_step: 1e-6,
            threshold,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckCell {
    pub method: Method,
    pub time_dependent: bool,
    pub augment: usize,
    pub max_rel_error: f64,
    pub forward_nfe: usize,
    pub backward_nfe: usize,
    pub passed: bool,
}

/// Two-conv LeakyReLU field with small random weights and biases.
pub fn random_ode_function(
    state: usize,
    time_dependent: bool,
    gain: f64,
    rng: &mut impl Rng,
) -> Result<OdeFunction<f64>> {
    let mut convs = vec![
        ConvParams::kaiming(state + usize::from(time_dependent), state, 3, gain, rng),
        ConvParams::kaiming(state, state, 3, gain, rng),
    ];
    for c in &mut convs {
        if let Some(b) = c.bias.as_mut() {
            for v in b.data_mut() {
                *v = rng.random_range(-0.05..0.05);
            }
        }
    }
    OdeFunction::new(convs, time_dependent)
}

fn cast_field<T: Scalar>(f: &OdeFunction<f64>) -> Result<OdeFunction<T>> {
    let convs = f
        .convs()
        .iter()
        .map(|c| ConvParams {
            weight: c.weight.cast(),
            bias: c.bias.as_ref().map(|b| b.cast()),
            padding: c.padding,
        })
        .collect();
    OdeFunction::new(convs, f.time_dependent())
}

fn check_cell<T: Scalar>(
    cfg: &GradCheckConfig,
    method: Method,
    field: &OdeFunction<f64>,
    u0: &Tensor<f64>,
    target: &Tensor<f64>,
    reference: &[Tensor<f64>],
    solver: &SolverConfig,
) -> Result<GradCheckCell> {
    let field_t = cast_field::<T>(field)?;
    let target_t: Tensor<T> = target.cast();
    let loss = move |tape: &mut Tape<T>, x: Var| {
        let t = tape.constant(target_t.clone());
        tape.mse_loss(x, t)
    };
    let report = sensitivity::gradient(method, &field_t, &u0.cast(), loss, solver, &BackwardOptions::default())?;
    let err = match report.gradients_f64() {
        Some(g) => max_relative_error(&g, reference),
        None => f64::INFINITY,
    };
    Ok(GradCheckCell {
        method,
        time_dependent: field.time_dependent(),
        augment: 0,
        max_rel_error: err,
        forward_nfe: report.forward_nfe,
        backward_nfe: report.backward_nfe,
        passed: err < cfg.threshold,
    })
}

/// Every backend × {autonomous, time-dependent} × {no augmentation, augmented}.
pub fn grad_check_suite(cfg: &GradCheckConfig) -> Result<Vec<GradCheckCell>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let solver = SolverConfig::with_tolerances(cfg.tolerance, cfg.tolerance);
    let mut cells = Vec::new();
    for time_dependent in [false, true] {
        for augment in [0, cfg.augment] {
            let state = cfg.filters + augment;
            let field = random_ode_function(state, time_dependent, 0.5, &mut rng)?;
            let shape = Shape::new(1, state, cfg.size, cfg.size);
            // Augmented channels start at zero, as they do inside the generator.
            let u0 = Tensor::from_fn(shape, |[_, c, _, _]| {
                if c < cfg.filters {
                    rng.random_range(-0.5..0.5)
                } else {
                    0.0
                }
            });
            let target = Tensor::from_fn(shape, |_| rng.random_range(-0.5..0.5));
            let steps = integrate(&field, &u0, &solver, false)?.steps;
            let n = target.numel() as f64;
            let fd = frozen_schedule_gradient(
                &field,
                &u0,
                &steps,
                |u| {
                    u.data()
                        .iter()
                        .zip(target.data())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        / n
                },
                cfg.fd_step,
            )?;
            for method in Method::ALL {
                let mut cell = match cfg.precision {
                    Precision::F64 => check_cell::<f64>(cfg, method, &field, &u0, &target, &fd, &solver)?,
                    Precision::F32 => check_cell::<f32>(cfg, method, &field, &u0, &target, &fd, &solver)?,
                };
                cell.augment = augment;
                cells.push(cell);
            }
        }
    }
    Ok(cells)
}
