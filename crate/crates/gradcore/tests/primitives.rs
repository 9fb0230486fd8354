use gradcore::{finite_diff_check, GradError, NodeId, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Runs the finite-difference check on 100 random points and returns the
/// worst relative error.
fn check_many(build: impl Fn(&mut Tape) -> Vec<Vec<usize>>, scale: f64) -> f64 {
    let mut tape = Tape::new();
    let shapes = build(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let point: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s, scale)).collect();
        worst = worst.max(finite_diff_check(&mut tape, &point, STEP).unwrap());
    }
    worst
}

/// Random projection to a scalar so that every output entry matters.
fn project(tape: &mut Tape, y: NodeId) -> NodeId {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let weights = Tensor::new(shape, (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect()).unwrap();
    let w = tape.literal(weights);
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

#[test]
fn affine_gradients() {
    let worst = check_many(
        |t| {
            let x = t.input(&[4, 3]);
            let w = t.input(&[5, 3]);
            let b = t.input(&[5]);
            let y = t.affine(x, w, Some(b)).unwrap();
            project(t, y);
            vec![vec![4, 3], vec![5, 3], vec![5]]
        },
        1.0,
    );
    assert!(worst < TOL, "{worst}");
}

#[test]
fn sin_gradients() {
    let worst = check_many(
        |t| {
            let x = t.input(&[3, 4]);
            let y = t.sin(x, 30.0);
            project(t, y);
            vec![vec![3, 4]]
        },
        0.2,
    );
    assert!(worst < TOL, "{worst}");
}

#[test]
fn relu_gradients() {
    // Keep inputs away from the kink.
    let mut tape = Tape::new();
    let x = tape.input(&[2, 5]);
    let y = tape.relu(x);
    project(&mut tape, y);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let mut p = random(&mut rng, &[2, 5], 1.0);
        for v in p.data_mut() {
            if v.abs() < 1e-3 {
                *v = 0.5;
            }
        }
        assert!(finite_diff_check(&mut tape, &[p], STEP).unwrap() < TOL);
    }
}

#[test]
fn gelu_gradients() {
    let worst = check_many(
        |t| {
            let x = t.input(&[3, 3]);
            let y = t.gelu(x);
            project(t, y);
            vec![vec![3, 3]]
        },
        3.0,
    );
    assert!(worst < TOL, "{worst}");
}

#[test]
fn elementwise_binary_gradients() {
    let worst = check_many(
        |t| {
            let a = t.input(&[2, 3]);
            let b = t.input(&[2, 3]);
            let s = t.add(a, b).unwrap();
            let d = t.sub(a, b).unwrap();
            let m = t.mul(s, d).unwrap();
            let z = t.scale_shift(m, -1.5, 0.25);
            project(t, z);
            vec![vec![2, 3], vec![2, 3]]
        },
        1.0,
    );
    assert!(worst < TOL, "{worst}");
}

#[test]
fn shape_op_gradients() {
    let worst = check_many(
        |t| {
            let a = t.input(&[3, 2]);
            let b = t.input(&[3, 4]);
            let c = t.concat_cols(a, b).unwrap();
            let s = t.slice_cols(c, 1, 3).unwrap();
            let r = t.repeat_rows(s, &[2, 0, 3]).unwrap();
            let tl = t.tile_rows(r, 2).unwrap();
            let flat = t.reshape(tl, &[30]).unwrap();
            let sq = t.mul(flat, flat).unwrap();
            project(t, sq);
            vec![vec![3, 2], vec![3, 4]]
        },
        1.0,
    );
    assert!(worst < TOL, "{worst}");
}

#[test]
fn reduction_gradients() {
    let worst = check_many(
        |t| {
            let x = t.input(&[4, 5]);
            let l = t.logsumexp(x).unwrap();
            let m = t.log_mean_exp_offset(x, 1.0).unwrap();
            let both = t.add(l, m).unwrap();
            let p = t.mul(both, both).unwrap();
            let s = t.mean(p).unwrap();
            let flat = t.reshape(x, &[20]).unwrap();
            let v = t.logsumexp(flat).unwrap();
            let total = t.add(s, v).unwrap();
            t.sum(total);
            vec![vec![4, 5]]
        },
        3.0,
    );
    assert!(worst < TOL, "{worst}");
}

#[test]
fn loss_gradients() {
    let worst = check_many(
        |t| {
            let a = t.input(&[6]);
            let b = t.input(&[6]);
            let se = t.squared_error(a, b).unwrap();
            let lp = t.gaussian_logpdf(a, b, 0.3).unwrap();
            t.add(se, lp).unwrap();
            vec![vec![6], vec![6]]
        },
        1.0,
    );
    assert!(worst < TOL, "{worst}");
}

#[test]
fn random_three_layer_network() {
    let worst = check_many(
        |t| {
            let x = t.input(&[5, 2]);
            let w1 = t.input(&[8, 2]);
            let b1 = t.input(&[8]);
            let w2 = t.input(&[8, 8]);
            let w3 = t.input(&[1, 8]);
            let h = t.affine(x, w1, Some(b1)).unwrap();
            let h = t.sin(h, 3.0);
            let h = t.affine(h, w2, None).unwrap();
            let h = t.gelu(h);
            let y = t.affine(h, w3, None).unwrap();
            let y = t.reshape(y, &[5]).unwrap();
            t.logsumexp(y).unwrap();
            vec![vec![5, 2], vec![8, 2], vec![8], vec![8, 8], vec![1, 8]]
        },
        1.0,
    );
    assert!(worst < TOL, "{worst}");
}

#[test]
fn logsumexp_of_large_values_is_finite() {
    let mut tape = Tape::new();
    let x = tape.input(&[3]);
    tape.logsumexp(x).unwrap();
    let out = tape.forward([Tensor::vector(vec![1000.0, 1000.0, 999.0])]).unwrap();
    let expect = 1000.0 + (2.0 + (-1.0f64).exp()).ln();
    assert!((out.item() - expect).abs() < 1e-12);
}

#[test]
fn log_mean_exp_offset_is_exact_at_zero() {
    for (w, m) in [(1.0, 4usize), (1.0, 16), (0.5, 7)] {
        let mut tape = Tape::new();
        let x = tape.input(&[m]);
        tape.log_mean_exp_offset(x, w).unwrap();
        let out = tape.forward([Tensor::zeros(&[m])]).unwrap().item();
        assert_eq!(out, (1.0 + w).ln());
    }
}

#[test]
fn shifted_mean_is_exact_for_constants() {
    let mut tape = Tape::new();
    let x = tape.input(&[7]);
    tape.mean(x).unwrap();
    let c = 0.1 + 0.2;
    let out = tape.forward([Tensor::full(&[7], c)]).unwrap().item();
    assert_eq!(out, c);
}

#[test]
fn data_inputs_get_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.input(&[2]);
    let d = tape.data(&[2]);
    let p = tape.mul(x, d).unwrap();
    tape.sum(p);
    tape.forward([Tensor::vector(vec![1.0, 2.0]), Tensor::vector(vec![3.0, 4.0])]).unwrap();
    let g = tape.backward(1.0).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[3.0, 4.0]);
    assert!(g.wrt(d).is_none());
}

#[test]
fn gradient_is_deterministic() {
    let build = || {
        let mut t = Tape::new();
        let x = t.input(&[8, 4]);
        let w = t.input(&[16, 4]);
        let h = t.affine(x, w, None).unwrap();
        let h = t.gelu(h);
        let l = t.logsumexp(h).unwrap();
        t.sum(l);
        t
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = [random(&mut rng, &[8, 4], 1.0), random(&mut rng, &[16, 4], 1.0)];
    let run = |mut t: Tape| {
        t.forward(inputs.iter().cloned()).unwrap();
        t.backward(1.0).unwrap().into_slots()
    };
    let a = run(build());
    let b = run(build());
    for (ga, gb) in a.iter().zip(&b) {
        let (ga, gb) = (ga.as_ref().unwrap(), gb.as_ref().unwrap());
        assert!(ga.data().iter().zip(gb.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn shape_errors_name_the_node() {
    let mut tape = Tape::new();
    let a = tape.input(&[2, 3]);
    let b = tape.input(&[3, 2]);
    match tape.add(a, b) {
        Err(GradError::ShapeMismatch { node, .. }) => assert_eq!(node, 2),
        other => panic!("unexpected {other:?}"),
    }
    let w = tape.input(&[4, 2]);
    assert!(matches!(tape.affine(a, w, None), Err(GradError::ShapeMismatch { node: 3, .. })));
}

#[test]
fn bound_input_shape_is_checked() {
    let mut tape = Tape::new();
    let x = tape.input(&[2]);
    tape.sum(x);
    let err = tape.forward([Tensor::vector(vec![1.0, 2.0, 3.0])]).unwrap_err();
    assert!(matches!(err, GradError::ShapeMismatch { node: 0, .. }));
    let err = tape.forward(Vec::<Tensor>::new()).unwrap_err();
    assert!(matches!(err, GradError::InputCount { expected: 1, got: 0 }));
}

#[test]
fn non_finite_values_are_reported() {
    let mut tape = Tape::new();
    let x = tape.input(&[2]);
    let y = tape.scale_shift(x, 1e200, 0.0);
    let z = tape.mul(y, y).unwrap();
    tape.sum(z);
    let err = tape.forward([Tensor::vector(vec![1e10, 1.0])]).unwrap_err();
    assert_eq!(err, GradError::NonFinite { node: 2 });
}

#[test]
fn backward_requires_scalar_and_forward() {
    let mut tape = Tape::new();
    let x = tape.input(&[3]);
    tape.sin(x, 1.0);
    assert!(matches!(tape.backward(1.0), Err(GradError::NotEvaluated)));
    tape.forward([Tensor::vector(vec![0.0, 1.0, 2.0])]).unwrap();
    assert!(matches!(tape.backward(1.0), Err(GradError::NonScalarOutput { node: 1, .. })));
}

#[test]
fn siren_layer_example() {
    // One modulated sine layer on a single point has a closed-form gradient.
    let mut tape = Tape::new();
    let x = tape.data(&[1, 1]);
    let w = tape.input(&[1, 1]);
    let b = tape.input(&[1]);
    let pre = tape.affine(x, w, Some(b)).unwrap();
    let y = tape.sin(pre, 30.0);
    tape.sum(y);
    let (xv, wv, bv) = (0.3, 0.05, -0.01);
    tape.forward([Tensor::matrix(1, 1, vec![xv]), Tensor::matrix(1, 1, vec![wv]), Tensor::vector(vec![bv])])
        .unwrap();
    let g = tape.backward(1.0).unwrap();
    let d = 30.0 * (30.0 * (wv * xv + bv)).cos();
    assert!((g.wrt(w).unwrap().item() - d * xv).abs() < 1e-12);
    assert!((g.wrt(b).unwrap().item() - d).abs() < 1e-12);
}

proptest! {
    #[test]
    fn logsumexp_translation_equivariant(
        xs in prop::collection::vec(-50.0f64..50.0, 1..20),
        c in -100.0f64..100.0,
    ) {
        let mut tape = Tape::new();
        let x = tape.input(&[xs.len()]);
        tape.logsumexp(x).unwrap();
        let base = tape.forward([Tensor::vector(xs.clone())]).unwrap().item();
        let shifted = tape.forward([Tensor::vector(xs.iter().map(|v| v + c).collect())]).unwrap().item();
        prop_assert!((shifted - base - c).abs() <= 1e-9 * (1.0 + base.abs() + c.abs()));
    }

    #[test]
    fn logsumexp_bounded_by_max(xs in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let mut tape = Tape::new();
        let x = tape.input(&[xs.len()]);
        tape.logsumexp(x).unwrap();
        let v = tape.forward([Tensor::vector(xs.clone())]).unwrap().item();
        let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(v >= m - 1e-12);
        prop_assert!(v <= m + (xs.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn affine_gradient_is_linear_in_seed(seed in 0u64..1000, scale in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let x = tape.input(&[3, 2]);
        let w = tape.input(&[2, 2]);
        let y = tape.affine(x, w, None).unwrap();
        let y = tape.sin(y, 1.0);
        tape.sum(y);
        tape.forward([random(&mut rng, &[3, 2], 1.0), random(&mut rng, &[2, 2], 1.0)]).unwrap();
        let g1 = tape.backward(1.0).unwrap();
        let gs = tape.backward(scale).unwrap();
        for (a, b) in g1.wrt(w).unwrap().data().iter().zip(gs.wrt(w).unwrap().data()) {
            prop_assert!((a * scale - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}

proptest! {
    #[test]
    fn log_mean_exp_offset_never_below_log_offset(
        xs in prop::collection::vec(-60.0f64..5.0, 1..20),
        c in 0.01f64..4.0,
    ) {
        let mut tape = Tape::new();
        let x = tape.input(&[xs.len()]);
        tape.log_mean_exp_offset(x, c).unwrap();
        let v = tape.forward([Tensor::vector(xs.clone())]).unwrap().item();
        prop_assert!(v >= c.ln());
    }
}

#[test]
fn smoothness_probe_detects_relu_kinks() {
    let mut tape = Tape::new();
    let x = tape.input(&[1, 1]);
    let y = tape.relu(x);
    tape.sum(y);
    assert!(gradcore::is_smooth_at(&mut tape, &[Tensor::matrix(1, 1, vec![0.5])], 1e-5).unwrap());
    assert!(!gradcore::is_smooth_at(&mut tape, &[Tensor::matrix(1, 1, vec![3e-6])], 1e-5).unwrap());
}
