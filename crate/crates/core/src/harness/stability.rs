//! Backward-solve behaviour of the three backends on contracting linear fields.

use std::path::Path;

use serde::Serialize;

use super::{fmt_sig, frozen_schedule_gradient};
use crate::autodiff::{max_relative_error, Tape, Var};
use crate::error::{Error, Result};
use crate::sensitivity::{self, BackwardOptions, Method};
use crate::solver::{integrate, linear_field, SolverConfig};
use crate::tensor::{Shape, Tensor};

pub const STABILITY_FILE: &str = "stability.csv";

/// `x' = −λx` on `[0, 1]` from `x(0) = 1`, loss `x(1)`, gradient with respect to `−λ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scenario {
    pub lambda: f64,
    pub tolerance: f64,
    pub budget: usize,
}

impl Scenario {
    /// Every λ at every tolerance.
    pub fn grid(lambdas: &[f64], tolerances: &[f64], budget: usize) -> Vec<Self> {
        tolerances
            .iter()
            .flat_map(|&tolerance| {
                lambdas.iter().map(move |&lambda| Self {
                    lambda,
                    tolerance,
                    budget,
                })
            })
            .collect()
    }

    pub fn default_grid() -> Vec<Self> {
        Self::grid(
            &[0.0, 1.0, 10.0, 30.0, 50.0, 100.0, 300.0, 1000.0],
            &[1e-3, 1e-6],
            10_000,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityRow {
    pub lambda: f64,
    pub tolerance: f64,
    pub method: Method,
    pub forward_nfe: usize,
    pub backward_nfe: usize,
    pub diverged: bool,
    /// Relative error against frozen-schedule finite differences.
    pub grad_error: Option<f64>,
    pub gradient: Option<f64>,
    pub reference: f64,
    /// Numeric failure during the solve, counted as divergence.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityTable {
    pub rows: Vec<StabilityRow>,
}

impl StabilityTable {
    /// Smallest λ at which the adjoint diverged, per tolerance.
    pub fn adjoint_boundary(&self) -> Vec<(f64, Option<f64>)> {
        let mut tols: Vec<f64> = self.rows.iter().map(|r| r.tolerance).collect();
        tols.sort_by(|a, b| b.total_cmp(a));
        tols.dedup();
        tols.into_iter()
            .map(|tol| {
                let first = self
                    .rows
                    .iter()
                    .filter(|r| r.tolerance == tol && r.method == Method::Adjoint && r.diverged)
                    .map(|r| r.lambda)
                    .min_by(f64::total_cmp);
                (tol, first)
            })
            .collect()
    }

    pub fn summary(&self) -> String {
        self.adjoint_boundary()
            .into_iter()
            .map(|(tol, lam)| match lam {
                Some(l) => format!("tolerance {tol:e}: adjoint first diverges at lambda {l}"),
                None => format!("tolerance {tol:e}: adjoint never diverged"),
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::State(format!("{}: {e}", path.display())))?;
        let err = |e: csv::Error| Error::State(format!("{}: {e}", path.display()));
        w.write_record([
            "lambda",
            "tolerance",
            "method",
            "forward_nfe",
            "backward_nfe",
            "diverged",
            "grad_error",
        ])
        .map_err(err)?;
        for r in &self.rows {
            w.write_record([
                fmt_sig(r.lambda),
                fmt_sig(r.tolerance),
                r.method.to_string(),
                r.forward_nfe.to_string(),
                r.backward_nfe.to_string(),
                r.diverged.to_string(),
                r.grad_error.map(fmt_sig).unwrap_or_default(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn sum_loss(tape: &mut Tape<f64>, x: Var) -> Result<Var> {
    tape.sum(x)
}

/// Run every backend on one scenario.
pub fn run_scenario(s: &Scenario) -> Result<Vec<StabilityRow>> {
    let field = linear_field(Tensor::full(Shape::new(1, 1, 1, 1), -s.lambda));
    let u0 = Tensor::ones(Shape::new(1, 1, 1, 1));
    let cfg = SolverConfig::with_tolerances(s.tolerance, s.tolerance);
    let forward = integrate(&field, &u0, &cfg, false)?;
    let fd = frozen_schedule_gradient(&field, &u0, &forward.steps, |u| u.sum(), 1e-6)?;
    let reference = fd[0].item();
    let opts = BackwardOptions {
        budget: s.budget,
        ..BackwardOptions::default()
    };
    let mut rows = Vec::new();
    for method in Method::ALL {
        let row = match sensitivity::gradient(method, &field, &u0, sum_loss, &cfg, &opts) {
            Ok(report) => {
                let grads = report.gradients_f64();
                StabilityRow {
                    lambda: s.lambda,
                    tolerance: s.tolerance,
                    method,
                    forward_nfe: report.forward_nfe,
                    backward_nfe: report.backward_nfe,
                    diverged: report.diverged,
                    grad_error: grads.as_ref().map(|g| max_relative_error(g, &fd)),
                    gradient: grads.map(|g| g[0].item()),
                    reference,
                    failure: None,
                }
            }
            Err(e @ Error::Numeric(_)) => StabilityRow {
                lambda: s.lambda,
                tolerance: s.tolerance,
                method,
                forward_nfe: forward.nfe,
                backward_nfe: 0,
                diverged: true,
                grad_error: None,
                gradient: None,
                reference,
                failure: Some(e.to_string()),
            },
            Err(e) => return Err(e),
        };
        rows.push(row);
    }
    Ok(rows)
}

pub fn stability_bench(scenarios: &[Scenario]) -> Result<StabilityTable> {
    let mut rows = Vec::new();
    for s in scenarios {
        rows.extend(run_scenario(s)?);
    }
    Ok(StabilityTable { rows })
}
