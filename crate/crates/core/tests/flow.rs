use msn_core::flow::{
    cfm_loss, euler_integrate, euler_sample, path_point, sample_path, sample_path_at, Dit,
    DitConfig, OtCfmConfig,
};
use msn_core::nn::{AdamW, AdamWConfig, Linear, ParamStore};
use msn_core::tensor::{grad_check, Tape, Tensor};
use msn_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn cfg(sigma_min: f64) -> OtCfmConfig {
    OtCfmConfig {
        sigma_min,
        ..Default::default()
    }
}

#[test]
fn zero_noise_path_is_a_ray() {
    let v = t64(&[3], &[1.5, -2.0, 0.25]);
    let zero = Tensor::zeros([3]);
    for t in [0.0, 0.3, 0.75, 1.0] {
        let (xt, ut) = path_point(&zero, &v, t, 0.0).unwrap();
        for i in 0..3 {
            assert!((xt.data()[i] - t * v.data()[i]).abs() < 1e-7);
        }
        assert_eq!(ut, v);
    }
}

#[test]
fn closed_form_examples() {
    let (xt, ut) = path_point(&t64(&[2], &[0.0, 0.0]), &t64(&[2], &[2.0, 4.0]), 0.5, 0.0).unwrap();
    assert_eq!(xt.data(), &[1.0, 2.0]);
    assert_eq!(ut.data(), &[2.0, 4.0]);

    let (xt, ut) = path_point(&t64(&[1], &[1.0]), &t64(&[1], &[0.0]), 1.0, 0.1).unwrap();
    assert!((xt.data()[0] - 0.1).abs() < 1e-12);
    assert!((ut.data()[0] + 0.9).abs() < 1e-12);
}

#[test]
fn path_endpoints_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x1 = Tensor::<f64>::new(
        [4, 3],
        (0..12).map(|_| rng.sample(StandardNormal)).collect(),
    )
    .unwrap();
    let c = cfg(1e-4);
    let s0 = sample_path_at(&x1, 0.0, &mut rng, &c).unwrap();
    assert_eq!(s0.x_t, s0.x0);
    let s1 = sample_path_at(&x1, 1.0, &mut rng, &c).unwrap();
    for i in 0..12 {
        assert_eq!(s1.x_t.data()[i], 1e-4 * s1.x0.data()[i] + x1.data()[i]);
    }
}

#[test]
fn sampled_paths_follow_the_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x1 = t64(&[2, 2], &[0.5, -1.0, 2.0, 0.0]);
    let c = cfg(1e-4);
    for _ in 0..20 {
        let s = sample_path(&x1, &mut rng, &c).unwrap();
        assert!((0.0..=1.0).contains(&s.t));
        let (xt, ut) = path_point(&s.x0, &x1, s.t, 1e-4).unwrap();
        assert_eq!((s.x_t, s.u_t), (xt, ut));
    }
    let bad = t64(&[1], &[f64::NAN]);
    assert!(sample_path(&bad, &mut rng, &c).is_err());
}

#[test]
fn path_mean_converges_to_scaled_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x1 = t64(&[2], &[1.0, -3.0]);
    let t = 0.4;
    let n = 20_000;
    let c = cfg(1e-4);
    let mut sum = [0.0; 2];
    for _ in 0..n {
        let s = sample_path_at(&x1, t, &mut rng, &c).unwrap();
        for i in 0..2 {
            sum[i] += s.x_t.data()[i];
        }
    }
    // Var(x_t) = (1 − (1 − σ)t)², so the standard error is that over √n.
    let se = (1.0 - (1.0 - 1e-4) * t) / (n as f64).sqrt();
    for i in 0..2 {
        let mean = sum[i] / n as f64;
        assert!((mean - t * x1.data()[i]).abs() < 3.0 * se, "{mean}");
    }
}

#[test]
fn cfm_loss_examples_and_gradient() {
    let mut tape = Tape::<f64>::new();
    let u = tape.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let v = tape.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let l = cfm_loss(&mut tape, v, u).unwrap();
    assert_eq!(tape.item(l), 0.0);

    let z = tape.constant(Tensor::zeros([4]));
    let ones = tape.leaf(Tensor::full([4], 1.0), true);
    let l = cfm_loss(&mut tape, ones, z).unwrap();
    assert_eq!(tape.item(l), 1.0);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(ones).unwrap(), &[0.5; 4]);

    let bad = tape.constant(Tensor::zeros([3]));
    assert!(matches!(
        cfm_loss(&mut tape, ones, bad),
        Err(Error::ShapeMismatch { .. })
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut rand = |n: usize| {
        t64(
            &[n],
            &(0..n)
                .map(|_| rng.sample(StandardNormal))
                .collect::<Vec<_>>(),
        )
    };
    let (pred, target) = (rand(6), rand(6));
    let err = grad_check(
        |tp, x| {
            let u = tp.constant(target.clone());
            cfm_loss(tp, x[0], u)
        },
        &[pred.clone()],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6);
}

fn identity_field(x: &Tensor<f64>, _t: f64) -> Result<Tensor<f64>> {
    Ok(x.clone())
}

#[test]
fn euler_on_exponential_growth() {
    let x = euler_integrate(&identity_field, t64(&[1], &[1.0]), 100).unwrap();
    let e = std::f64::consts::E;
    assert!((x.data()[0] - e).abs() / e < 0.02);

    let err = |n| {
        (euler_integrate(&identity_field, t64(&[1], &[1.0]), n)
            .unwrap()
            .data()[0]
            - e)
            .abs()
    };
    let ratio = err(100) / err(200);
    assert!((1.6..=2.4).contains(&ratio), "ratio {ratio}");
}

#[test]
fn euler_with_zero_field_returns_start() {
    let zero = |x: &Tensor<f64>, _t: f64| Ok(Tensor::zeros(x.shape().to_vec()));
    let x0 = t64(&[3], &[0.1, -0.2, 0.3]);
    assert_eq!(euler_integrate(&zero, x0.clone(), 7).unwrap(), x0);

    let c = OtCfmConfig {
        n_sample_steps: 5,
        ..Default::default()
    };
    let a = euler_sample(&zero, &[4], &c, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let b = euler_sample(&zero, &[4], &c, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    assert_eq!(a, b);
    assert!(euler_integrate(&zero, x0, 0).is_err());
}

#[test]
fn euler_reports_failing_step() {
    let blowup = |x: &Tensor<f64>, t: f64| {
        let v = if t >= 0.5 { f64::NAN } else { 0.0 };
        Ok(Tensor::full(x.shape().to_vec(), v))
    };
    let err = euler_integrate(&blowup, t64(&[2], &[0.0, 0.0]), 4).unwrap_err();
    match err {
        Error::NumericFault { context } => assert!(context.contains("step 2"), "{context}"),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn cfm_recovers_a_shifted_gaussian() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ps = ParamStore::<f32>::new();
    let fc1 = Linear::new(&mut ps, "fc1", 3, 128, true, &mut rng).unwrap();
    let fc2 = Linear::new(&mut ps, "fc2", 128, 2, true, &mut rng).unwrap();
    let forward = |tape: &mut Tape<f32>, ps: &ParamStore<f32>, xt: &[f32]| {
        let x = tape.constant(Tensor::new([xt.len() / 3, 3], xt.to_vec()).unwrap());
        let h = fc1.forward(tape, ps, x).unwrap();
        let h = tape.gelu(h).unwrap();
        fc2.forward(tape, ps, h).unwrap()
    };
    let c = cfg(1e-4);
    let mut opt = AdamW::new(AdamWConfig {
        lr: 3e-3,
        ..Default::default()
    });
    let batch = 256;
    for _ in 0..1500 {
        let mut inp = Vec::with_capacity(batch * 3);
        let mut tgt = Vec::with_capacity(batch * 2);
        for _ in 0..batch {
            let x1 = Tensor::<f32>::new(
                [2],
                vec![
                    2.0 + rng.sample::<f32, _>(StandardNormal),
                    2.0 + rng.sample::<f32, _>(StandardNormal),
                ],
            )
            .unwrap();
            let s = sample_path(&x1, &mut rng, &c).unwrap();
            inp.extend_from_slice(s.x_t.data());
            inp.push(s.t as f32);
            tgt.extend_from_slice(s.u_t.data());
        }
        let mut tape = Tape::new();
        let pred = forward(&mut tape, &ps, &inp);
        let u = tape.constant(Tensor::new([batch, 2], tgt).unwrap());
        let loss = cfm_loss(&mut tape, pred, u).unwrap();
        tape.backward(loss).unwrap();
        ps.zero_grad();
        ps.accumulate_grads(&tape);
        opt.step(&mut ps).unwrap();
    }

    let n = 2000;
    let field = |x: &Tensor<f32>, t: f64| {
        let mut inp = Vec::with_capacity(n * 3);
        for row in x.data().chunks(2) {
            inp.extend_from_slice(row);
            inp.push(t as f32);
        }
        let mut tape = Tape::new();
        let out = forward(&mut tape, &ps, &inp);
        Ok(tape.value(out).clone())
    };
    let samples = euler_sample(&field, &[n, 2], &OtCfmConfig::default(), &mut rng).unwrap();
    for dim in 0..2 {
        let col: Vec<f64> = samples
            .data()
            .iter()
            .skip(dim)
            .step_by(2)
            .map(|&v| v as f64)
            .collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 2.0).abs() < 0.3, "mean {mean}");
        assert!((var - 1.0).abs() < 0.5, "var {var}");
    }
}

fn tiny_dit(seed: u64) -> (ParamStore<f32>, Dit) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    let cfg = DitConfig {
        latent_dim: 4,
        hidden_dim: 16,
        n_blocks: 1,
        head_dim: 8,
        time_dim: 8,
        max_len: 16,
    };
    let dit = Dit::new(&mut ps, "dit", cfg, &mut rng).unwrap();
    (ps, dit)
}

fn randn32(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.sample(StandardNormal)).collect(),
    )
    .unwrap()
}

#[test]
fn dit_output_shape_and_conditioning() {
    let (ps, dit) = tiny_dit(8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = randn32(&mut rng, &[2, 5, 4]);
    let c1 = randn32(&mut rng, &[2, 5, 4]);
    let c2 = randn32(&mut rng, &[2, 5, 4]);
    let a = dit.predict(&ps, &x, &[0.3, 0.7], &c1).unwrap();
    let b = dit.predict(&ps, &x, &[0.3, 0.7], &c2).unwrap();
    assert_eq!(a.shape(), &[2, 5, 4]);
    let delta = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| (p - q).abs())
        .fold(0.0f32, f32::max);
    assert!(delta > 0.0);

    let t_changed = dit.predict(&ps, &x, &[0.9, 0.7], &c1).unwrap();
    assert_ne!(a.data()[..20], t_changed.data()[..20]);
    assert_eq!(a.data()[20..], t_changed.data()[20..]);

    let short = randn32(&mut rng, &[2, 4, 4]);
    assert!(matches!(
        dit.predict(&ps, &x, &[0.3, 0.7], &short),
        Err(Error::ShapeMismatch { .. })
    ));
    assert!(dit.predict(&ps, &x, &[0.3], &c1).is_err());
}
