use msn_core::gradsuite::{run_gradient_suite, BLOCK_TOLERANCE, OP_TOLERANCE};
use msn_core::nn::{LayerNorm, ParamStore};
use msn_core::tensor::{grad_check, relative_error, ElementwiseOp, Tape, Tensor, Var};
use msn_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn t32(shape: &[usize], data: &[f32]) -> Tensor<f32> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn randn64(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.sample(StandardNormal)).collect(),
    )
    .unwrap()
}

#[test]
fn add_is_elementwise() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(t32(&[2], &[1.0, 2.0]));
    let b = tape.constant(t32(&[2], &[3.0, 4.0]));
    let c = tape.elementwise(ElementwiseOp::Add, a, Some(b)).unwrap();
    assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
}

#[test]
fn mul_by_zero_tensor_has_zero_gradient() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(t32(&[3], &[1.5, -2.0, 7.0]), true);
    let z = tape.constant(Tensor::zeros([3]));
    let y = tape.mul(x, z).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0; 3]);
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0; 3]);
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([2]));
    let err = tape.add(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2]"), "{msg}");
}

#[test]
fn numeric_fault_is_reported_in_checked_mode() {
    let mut tape = Tape::<f32>::new();
    tape.set_check_finite(true);
    let x = tape.constant(t32(&[1], &[1000.0]));
    assert!(matches!(tape.exp(x), Err(Error::NumericFault { .. })));
}

#[test]
fn gelu_f32_gradient_matches_f64_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let xs: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();

    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::from_f64([8], &xs).unwrap(), true);
    let y = tape.gelu(x).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    let analytic = tape.grad(x).unwrap().to_vec();

    let eps = 1e-3;
    let f = |v: f64| {
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(Tensor::scalar(v));
        let y = tp.gelu(x).unwrap();
        tp.item(y)
    };
    for (i, &x0) in xs.iter().enumerate() {
        let numeric = (f(x0 + eps) - f(x0 - eps)) / (2.0 * eps);
        assert!(relative_error(analytic[i] as f64, numeric) < 1e-3);
    }
}

#[test]
fn matmul_identity_and_small_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a: Vec<f32> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut eye = vec![0.0f32; 16];
    for i in 0..4 {
        eye[i * 4 + i] = 1.0;
    }
    let mut tape = Tape::<f32>::new();
    let av = tape.constant(t32(&[3, 4], &a));
    let iv = tape.constant(t32(&[4, 4], &eye));
    let p = tape.matmul(av, iv).unwrap();
    assert_eq!(tape.value(p).data(), a.as_slice());

    let x = tape.constant(t32(&[1, 2], &[1.0, 2.0]));
    let y = tape.constant(t32(&[2, 1], &[3.0, 4.0]));
    let z = tape.matmul(x, y).unwrap();
    assert_eq!(tape.value(z).shape(), &[1, 1]);
    assert_eq!(tape.value(z).data(), &[11.0]);

    let bad = tape.constant(Tensor::zeros([3, 1]));
    assert!(matches!(
        tape.matmul(x, bad),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = randn64(&mut rng, &[3, 4]);
    let b = randn64(&mut rng, &[4, 2]);

    let mut tape = Tape::<f32>::new();
    let av = tape.leaf(a.cast(), true);
    let bv = tape.constant(b.cast());
    let c = tape.matmul(av, bv).unwrap();
    let s = tape.sum(c).unwrap();
    tape.backward(s).unwrap();
    let analytic = tape.grad(av).unwrap().to_vec();

    let eps = 1e-3;
    let f = |a: &Tensor<f64>| {
        a.data()
            .chunks(4)
            .map(|row| {
                (0..2)
                    .map(|j| (0..4).map(|k| row[k] * b.data()[k * 2 + j]).sum::<f64>())
                    .sum::<f64>()
            })
            .sum::<f64>()
    };
    for i in 0..12 {
        let mut p = a.clone();
        p.data_mut()[i] += eps;
        let mut m = a.clone();
        m.data_mut()[i] -= eps;
        let numeric = (f(&p) - f(&m)) / (2.0 * eps);
        assert!(relative_error(analytic[i] as f64, numeric) < 1e-3);
    }
}

#[test]
fn backward_of_square() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(3.0), true);
    let c = tape.constant(Tensor::scalar(2.0));
    let y = tape.square(x).unwrap();
    let y = tape.mul(y, c).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[12.0]);
    assert!(tape.grad(c).is_none());
}

#[test]
fn backward_accumulates_until_zero_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(randn64(&mut rng, &[5]), true);
    let y = tape.gelu(x).unwrap();
    let y = tape.sum(y).unwrap();
    tape.backward(y).unwrap();
    let once = tape.grad(x).unwrap().to_vec();
    tape.backward(y).unwrap();
    let twice = tape.grad(x).unwrap().to_vec();
    for (a, b) in once.iter().zip(&twice) {
        assert_eq!(2.0 * a, *b);
    }
    tape.zero_grad();
    assert!(tape.grad(x).is_none());
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::zeros([2]), true);
    assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(_))));
}

#[test]
fn grad_check_reference_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = randn64(&mut rng, &[3, 4]);
    let x = randn64(&mut rng, &[4, 1]);
    let err = grad_check(
        |tp, v| {
            let y = tp.matmul(v[0], v[1])?;
            tp.sum(y)
        },
        &[w, x],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "linear map error {err}");

    let x = randn64(&mut rng, &[2, 5]);
    let probe = randn64(&mut rng, &[2, 5]);
    let err = grad_check(
        |tp, v| {
            let mut ps = ParamStore::<f64>::new();
            let ln = LayerNorm::new(&mut ps, "ln", 5)?;
            let y = ln.forward(tp, &ps, v[0])?;
            let p = tp.constant(probe.clone());
            let y = tp.mul(y, p)?;
            tp.sum(y)
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "layer norm error {err}");

    // x ± eps exactly representable, so the numeric slope is exactly 1.
    let x = Tensor::new([2], vec![1.0, 0.5]).unwrap();
    let err = grad_check(|tp, v| tp.sum(v[0]), &[x], (2.0f64).powi(-20)).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn full_gradient_suite_passes() {
    let results = run_gradient_suite(1234).unwrap();
    for r in &results {
        let tol = if r.name.starts_with("transformer_block") {
            BLOCK_TOLERANCE
        } else {
            OP_TOLERANCE
        };
        assert_eq!(r.tolerance, tol);
        assert!(r.passed(), "{} max rel err {:e}", r.name, r.max_rel_error);
    }
    assert!(results.len() >= 30);
}

#[test]
fn forward_values_do_not_depend_on_gradient_tracking() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = randn64(&mut rng, &[2, 3, 4]).cast::<f32>();
    let b = randn64(&mut rng, &[4, 4]).cast::<f32>();
    let run = |track: bool| {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(a.clone(), track);
        let w = tape.leaf(b.clone(), track);
        let y = tape.matmul(x, w).unwrap();
        let y = tape.gelu(y).unwrap();
        let y = tape.softmax(y, false).unwrap();
        tape.value(y).clone()
    };
    let (on, off) = (run(true), run(false));
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&on), bits(&off));
}

#[test]
fn gradients_are_deterministic() {
    let grads = || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(randn64(&mut rng, &[4, 6]).cast(), true);
        let w = tape.leaf(randn64(&mut rng, &[6, 6]).cast(), true);
        let h = tape.matmul(x, w).unwrap();
        let h = tape.logsumexp(h).unwrap();
        let s = tape.sum(h).unwrap();
        tape.backward(s).unwrap();
        let collect = |v: Var| {
            tape.grad(v)
                .unwrap()
                .iter()
                .map(|g| g.to_bits())
                .collect::<Vec<_>>()
        };
        (collect(x), collect(w))
    };
    assert_eq!(grads(), grads());
}
