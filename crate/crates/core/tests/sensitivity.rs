use odesr::autodiff::{finite_difference_gradient, max_relative_error, Tape, Var};
use odesr::harness::{frozen_schedule_gradient, random_ode_function};
use odesr::sensitivity::*;
use odesr::solver::{integrate, replay_steps, Eager, FieldRhs, FnField, SolverConfig, VectorField};
use odesr::{Result, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: Shape, scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// conv → conv without an activation: smooth in the state, bilinear in the weights.
fn smooth_field(
    ch: usize,
    rng: &mut ChaCha8Rng,
) -> FnField<f64, impl Fn(&mut Tape<f64>, &[Var], Var, f64) -> Result<Var> + Clone> {
    let params = vec![
        random(Shape::new(ch, ch, 3, 3), 0.3, rng),
        random(Shape::new(ch, 1, 1, 1), 0.1, rng),
        random(Shape::new(ch, ch, 3, 3), 0.3, rng),
    ];
    FnField::new(params, |tape: &mut Tape<f64>, th: &[Var], x: Var, _t: f64| {
        let h = tape.conv2d(x, th[0], Some(th[1]), 1)?;
        tape.conv2d(h, th[2], None, 1)
    })
}

fn sq_loss(tape: &mut Tape<f64>, x: Var) -> Result<Var> {
    let y = tape.mul(x, x)?;
    tape.sum(y)
}

fn sq(u: &Tensor<f64>) -> f64 {
    u.data().iter().map(|v| v * v).sum()
}

#[test]
fn every_backend_matches_frozen_differences_on_smooth_field() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let field = smooth_field(3, &mut rng);
    let u0 = random(Shape::new(2, 3, 5, 5), 1.0, &mut rng);
    let cfg = SolverConfig::with_tolerances(1e-10, 1e-10);
    let fwd = integrate(&field, &u0, &cfg, false).unwrap();
    let fd = frozen_schedule_gradient(&field, &u0, &fwd.steps, sq, 1e-6).unwrap();

    let mut grads = Vec::new();
    for m in Method::ALL {
        let r = gradient(m, &field, &u0, sq_loss, &cfg, &BackwardOptions::default()).unwrap();
        assert!(!r.diverged);
        assert_eq!(r.forward_nfe, fwd.nfe);
        let g = r.gradients.unwrap();
        let err = max_relative_error(&g, &fd);
        assert!(err < 1e-6, "{m}: {err:e}");
        grads.push(g);
    }
    assert!(max_relative_error(&grads[1], &grads[2]) < 1e-10);
}

#[test]
fn input_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let field = smooth_field(2, &mut rng);
    let u0 = random(Shape::new(1, 2, 4, 4), 1.0, &mut rng);
    let cfg = SolverConfig::with_tolerances(1e-10, 1e-10);
    let steps = integrate(&field, &u0, &cfg, false).unwrap().steps;
    let rhs = FieldRhs(&field);
    let fd = finite_difference_gradient(
        |x| {
            let mut arith = Eager::new(&rhs);
            Ok(sq(&replay_steps(&mut arith, x[0].clone(), &steps)?))
        },
        std::slice::from_ref(&u0),
        1e-6,
    )
    .unwrap();
    for m in Method::ALL {
        let r = gradient(m, &field, &u0, sq_loss, &cfg, &BackwardOptions::default()).unwrap();
        let err = max_relative_error(&[r.input_gradient.unwrap()], &fd);
        assert!(err < 1e-6, "{m}: {err:e}");
    }
}

#[test]
fn discrete_backends_match_differences_on_leaky_field() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let field = random_ode_function(3, true, 0.5, &mut rng).unwrap();
    let u0 = random(Shape::new(1, 3, 6, 6), 0.5, &mut rng);
    let cfg = SolverConfig::with_tolerances(1e-9, 1e-9);
    let fwd = integrate(&field, &u0, &cfg, false).unwrap();
    let fd = frozen_schedule_gradient(&field, &u0, &fwd.steps, sq, 1e-6).unwrap();
    let d = discrete_gradient(&field, &u0, sq_loss, &cfg).unwrap();
    let c = checkpointed_gradient(&field, &u0, sq_loss, &cfg).unwrap();
    let (dg, cg) = (d.gradients.unwrap(), c.gradients.unwrap());
    assert!(max_relative_error(&dg, &fd) < 1e-4);
    assert!(max_relative_error(&cg, &dg) < 1e-10);
    assert_eq!(c.backward_nfe, 6 * c.accepted_steps);
}

#[test]
fn checkpointing_holds_fewer_values_than_one_tape() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let field = random_ode_function(4, false, 1.0, &mut rng).unwrap();
    let u0 = random(Shape::new(1, 4, 8, 8), 1.0, &mut rng);
    let cfg = SolverConfig::with_tolerances(1e-8, 1e-8);
    let d = discrete_gradient(&field, &u0, sq_loss, &cfg).unwrap();
    let c = checkpointed_gradient(&field, &u0, sq_loss, &cfg).unwrap();
    assert!(d.accepted_steps >= 4, "{}", d.accepted_steps);
    assert!(
        c.peak_saved_values < d.peak_saved_values,
        "{} vs {}",
        c.peak_saved_values,
        d.peak_saved_values
    );
}

#[test]
fn exhausted_adjoint_budget_reports_divergence() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let field = smooth_field(2, &mut rng);
    let u0 = random(Shape::new(1, 2, 4, 4), 1.0, &mut rng);
    let cfg = SolverConfig::with_tolerances(1e-8, 1e-8);
    let r = adjoint_gradient(&field, &u0, sq_loss, &cfg, 10).unwrap();
    assert!(r.diverged);
    assert!(r.gradients.is_none() && r.input_gradient.is_none());
    assert!(r.backward_nfe <= 10);
    assert!(r.record().diverged);
}

#[test]
fn gradient_count_matches_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let field = random_ode_function(2, true, 0.5, &mut rng).unwrap();
    let u0 = random(Shape::new(1, 2, 3, 3), 1.0, &mut rng);
    let cfg = SolverConfig::with_tolerances(1e-6, 1e-6);
    for m in Method::ALL {
        let r = gradient(m, &field, &u0, sq_loss, &cfg, &BackwardOptions::default()).unwrap();
        let g = r.gradients.unwrap();
        let p = field.params();
        assert_eq!(g.len(), p.len());
        for (a, b) in g.iter().zip(p) {
            assert_eq!(a.shape(), b.shape());
        }
    }
}
