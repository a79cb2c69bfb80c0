use odesr::autodiff::{finite_difference_gradient, max_relative_error, Tape, Var, LEAKY_SLOPE};
use odesr::{Error, Result, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct 7-loop convolution with zero padding.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, pad: usize) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let (oh, ow) = (xs.h() + 2 * pad + 1 - ws.h(), xs.w() + 2 * pad + 1 - ws.w());
    Tensor::from_fn(Shape::new(xs.n(), ws.n(), oh, ow), |[n, o, y, xx]| {
        let mut acc = b.map_or(0.0, |b| b.at([o, 0, 0, 0]));
        for c in 0..xs.c() {
            for ky in 0..ws.h() {
                for kx in 0..ws.w() {
                    let (iy, ix) = ((y + ky) as isize - pad as isize, (xx + kx) as isize - pad as isize);
                    if iy >= 0 && ix >= 0 && (iy as usize) < xs.h() && (ix as usize) < xs.w() {
                        acc += w.at([o, c, ky, kx]) * x.at([n, c, iy as usize, ix as usize]);
                    }
                }
            }
        }
        acc
    })
}

/// Gradients from the tape against central differences of the same graph.
fn check<F>(inputs: Vec<Tensor<f64>>, graph: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = graph(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(&tape, v).unwrap()).collect();
    let fd = finite_difference_gradient(
        |p| {
            let mut t = Tape::new();
            let vs: Vec<Var> = p.iter().map(|x| t.param(x.clone())).collect();
            let l = graph(&mut t, &vs)?;
            Ok(t.value(l)?.item())
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    max_relative_error(&analytic, &fd)
}

#[test]
fn conv_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (shape, out, k, pad, bias) in [
        (Shape::new(2, 3, 7, 5), 4, 3, 1, true),
        (Shape::new(1, 5, 6, 6), 2, 3, 0, false),
        (Shape::new(3, 2, 4, 9), 3, 1, 0, true),
        (Shape::new(1, 4, 5, 5), 4, 5, 2, true),
    ] {
        let x = random(shape, &mut rng);
        let w = random(Shape::new(out, shape.c(), k, k), &mut rng);
        let b = bias.then(|| random(Shape::new(out, 1, 1, 1), &mut rng));
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let bv = b.clone().map(|b| tape.constant(b));
        let y = tape.conv2d(xv, wv, bv, pad).unwrap();
        let expected = conv_oracle(&x, &w, b.as_ref(), pad);
        let got = tape.value(y).unwrap();
        assert_eq!(got.shape(), expected.shape());
        assert!(got.max_abs_diff(&expected) < 1e-12, "{shape}");
    }
}

#[test]
fn conv_gradients_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(Shape::new(2, 8, 16, 16), &mut rng);
    let w = random(Shape::new(4, 8, 3, 3), &mut rng);
    let b = random(Shape::new(4, 1, 1, 1), &mut rng);
    let err = check(vec![x, w, b], |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 1)?;
        let y2 = t.mul(y, y)?;
        t.sum(y2)
    });
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn composite_graph_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(Shape::new(2, 3, 6, 6), &mut rng);
    let w = random(Shape::new(3, 3, 3, 3), &mut rng);
    let target = random(Shape::new(2, 3, 6, 6), &mut rng);
    let err = check(vec![x, w], move |t, v| {
        let y = t.conv2d(v[0], v[1], None, 1)?;
        let a = t.leaky_relu(y, LEAKY_SLOPE)?;
        let tv = t.constant(target.clone());
        t.l1_loss(a, tv)
    });
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn structural_ops_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(Shape::new(2, 2, 4, 4), &mut rng);
    let b = random(Shape::new(2, 3, 4, 4), &mut rng);
    let err = check(vec![a, b], |t, v| {
        let c = t.concat_channels(v[0], v[1])?;
        let (l, r) = t.split_channels(c, 1)?;
        let n = t.narrow_channels(r, 1, 3)?;
        let u = t.upsample_nearest(n, 2)?;
        let lu = t.upsample_nearest(l, 2)?;
        let lu3 = t.concat_channels(lu, lu)?;
        let lu3 = t.concat_channels(lu3, lu)?;
        let m = t.mul(u, lu3)?;
        let s = t.lin_comb(&[(0.5, m), (-2.0, u)])?;
        t.mse_loss(s, lu3)
    });
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn leaky_relu_slope_on_negative_side() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![-3.0, -1.0, 2.0]).unwrap());
    let y = tape.leaky_relu(x, LEAKY_SLOPE).unwrap();
    assert_eq!(tape.value(y).unwrap().data(), &[-0.6000000000000001, -0.2, 2.0]);
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap().wrt(&tape, x).unwrap();
    assert_eq!(g.data(), &[0.2, 0.2, 1.0]);
}

#[test]
fn l1_gradient_is_sign_over_count() {
    let mut tape = Tape::new();
    let p = tape.param(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, -1.0, 0.5, 3.0]).unwrap());
    let t = tape.constant(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0, 0.0, 1.0, 3.0]).unwrap());
    let l = tape.l1_loss(p, t).unwrap();
    assert_eq!(tape.value(l).unwrap().item(), (1.0 + 1.0 + 0.5) / 4.0);
    let g = tape.backward(l).unwrap().wrt(&tape, p).unwrap();
    assert_eq!(g.data(), &[0.25, -0.25, -0.25, 0.0]);
}

#[test]
fn non_finite_values_raise_numeric_errors() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![f64::NAN, 1.0]).unwrap());
    let w = tape.constant(Tensor::ones(Shape::new(1, 1, 1, 1)));
    assert!(matches!(tape.conv2d(x, w, None, 0), Err(Error::Numeric(_))));
}

#[test]
fn f32_tape_tracks_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(Shape::new(1, 4, 8, 8), &mut rng);
    let w = random(Shape::new(4, 4, 3, 3), &mut rng);
    let run = |x: Tensor<f64>, w: Tensor<f64>| -> (f64, Vec<f64>) {
        let mut t = Tape::<f32>::new();
        let (xv, wv) = (t.constant(x.cast()), t.param(w.cast()));
        let y = t.conv2d(xv, wv, None, 1).unwrap();
        let l = t.sum(y).unwrap();
        let g = t.backward(l).unwrap().wrt(&t, wv).unwrap();
        (t.value(l).unwrap().item() as f64, g.cast::<f64>().data().to_vec())
    };
    let (l32, g32) = run(x.clone(), w.clone());
    let mut t = Tape::<f64>::new();
    let (xv, wv) = (t.constant(x), t.param(w));
    let y = t.conv2d(xv, wv, None, 1).unwrap();
    let l = t.sum(y).unwrap();
    let g64 = t.backward(l).unwrap().wrt(&t, wv).unwrap();
    assert!((l32 - t.value(l).unwrap().item()).abs() < 1e-3);
    for (a, b) in g32.iter().zip(g64.data()) {
        assert!((a - b).abs() < 1e-4);
    }
}
