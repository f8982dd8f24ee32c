use msn_core::nn::{
    attention, lora_forward, sinusoidal_embedding, timestep_embed, AdamW, AdamWConfig, LayerNorm,
    Linear, ParamStore, TimestepEmbedder, Transformer, TransformerConfig,
};
use msn_core::tensor::{Tape, Tensor};
use msn_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.sample(StandardNormal)).collect(),
    )
    .unwrap()
}

#[test]
fn single_key_attention_returns_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::<f32>::new();
    let q = tape.constant(randn(&mut rng, &[2, 1, 8]));
    let k = tape.constant(randn(&mut rng, &[2, 1, 8]));
    let v = tape.constant(randn(&mut rng, &[2, 1, 8]));
    let out = attention(&mut tape, q, k, v, 2, false).unwrap();
    assert_eq!(tape.value(out), tape.value(v));
}

#[test]
fn identical_keys_average_the_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let key: Vec<f32> = randn(&mut rng, &[4]).into_data();
    let keys: Vec<f32> = (0..3).flat_map(|_| key.clone()).collect();
    let vals = randn(&mut rng, &[1, 3, 4]);
    let mut tape = Tape::<f32>::new();
    let q = tape.constant(randn(&mut rng, &[1, 3, 4]));
    let k = tape.constant(Tensor::new([1, 3, 4], keys).unwrap());
    let v = tape.constant(vals.clone());
    let out = attention(&mut tape, q, k, v, 1, false).unwrap();
    for t in 0..3 {
        for c in 0..4 {
            let mean = (0..3).map(|s| vals.data()[s * 4 + c]).sum::<f32>() / 3.0;
            assert!((tape.value(out).data()[t * 4 + c] - mean).abs() < 1e-6);
        }
    }
}

#[test]
fn attention_rejects_mismatched_shapes() {
    let mut tape = Tape::<f32>::new();
    let q = tape.constant(Tensor::zeros([1, 2, 4]));
    let k = tape.constant(Tensor::zeros([1, 3, 4]));
    assert!(matches!(
        attention(&mut tape, q, k, k, 1, false),
        Err(Error::ShapeMismatch { .. })
    ));
}

fn causal_transformer(seed: u64) -> (ParamStore<f32>, Transformer) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    let cfg = TransformerConfig {
        n_blocks: 2,
        hidden_dim: 8,
        head_dim: 4,
        causal: true,
        timestep_embed_dim: None,
    };
    let tf = Transformer::new(&mut ps, "enc", cfg, &mut rng).unwrap();
    (ps, tf)
}

#[test]
fn causal_attention_ignores_future_perturbations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = randn(&mut rng, &[2, 4, 8]);
    let q = randn(&mut rng, &[8, 8]);
    for t in 0..4 {
        let mut y = x.clone();
        for b in 0..2 {
            for c in 0..8 {
                y.data_mut()[(b * 4 + t) * 8 + c] += 0.5;
            }
        }
        let run = |inp: &Tensor<f32>| {
            let mut tape = Tape::<f32>::new();
            let xv = tape.constant(inp.clone());
            let w = tape.constant(q.clone());
            let qv = tape.matmul(xv, w).unwrap();
            let out = attention(&mut tape, qv, xv, xv, 2, true).unwrap();
            tape.value(out).clone()
        };
        let (a, b) = (run(&x), run(&y));
        for bi in 0..2 {
            for s in 0..t {
                let r = (bi * 4 + s) * 8..(bi * 4 + s + 1) * 8;
                assert_eq!(a.data()[r.clone()], b.data()[r]);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn causal_stack_prefix_invariance(seed in 0u64..1000, t in 1usize..6) {
        let (ps, tf) = causal_transformer(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let x = randn(&mut rng, &[1, 6, 8]);
        let mut y = x.clone();
        for v in &mut y.data_mut()[t * 8..] {
            *v = rng.sample(StandardNormal);
        }
        let run = |inp: &Tensor<f32>| {
            let mut tape = Tape::<f32>::new();
            let v = tape.constant(inp.clone());
            let out = tf.forward(&mut tape, &ps, v).unwrap();
            tape.value(out).clone()
        };
        let (a, b) = (run(&x), run(&y));
        prop_assert_eq!(&a.data()[..t * 8], &b.data()[..t * 8]);
    }
}

#[test]
fn layer_norm_standardises_each_position() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ps = ParamStore::<f64>::new();
    let ln = LayerNorm::new(&mut ps, "ln", 16).unwrap();
    let x: Vec<f64> = (0..5 * 16)
        .map(|_| 3.0 + 2.0 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(Tensor::new([5, 16], x).unwrap());
    let y = ln.forward(&mut tape, &ps, xv).unwrap();
    for row in tape.value(y).data().chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-4);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn sinusoid_at_zero_is_sin0_cos1() {
    let e = sinusoidal_embedding(0.0, 16).unwrap();
    assert!(e[..8].iter().all(|&v| v == 0.0));
    assert!(e[8..].iter().all(|&v| v == 1.0));
}

#[test]
fn sinusoid_distinguishes_timesteps() {
    let a = sinusoidal_embedding(0.25, 32).unwrap();
    let b = sinusoidal_embedding(0.26, 32).unwrap();
    let max = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(max > 0.0);
}

#[test]
fn timestep_embedding_has_requested_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ps = ParamStore::<f32>::new();
    let emb = TimestepEmbedder::new(&mut ps, "t", 256, &mut rng).unwrap();
    let e = timestep_embed(&emb, &ps, 0.5).unwrap();
    assert_eq!(e.shape(), &[256]);
    assert_eq!(e, timestep_embed(&emb, &ps, 0.5).unwrap());
    assert!(matches!(
        sinusoidal_embedding(0.5, 7),
        Err(Error::InvalidArgument(_))
    ));
    assert!(TimestepEmbedder::new(&mut ps, "odd", 9, &mut rng).is_err());
}

#[test]
fn paper_preset_has_twelve_heads() {
    let cfg = TransformerConfig::paper_preset(true);
    assert_eq!(
        (cfg.n_blocks, cfg.hidden_dim, cfg.head_dim, cfg.n_heads()),
        (12, 768, 64, 12)
    );
    cfg.validate().unwrap();
    let bad = TransformerConfig {
        hidden_dim: 100,
        ..cfg
    };
    assert!(bad.validate().is_err());
}

fn scalar_store(p: f64) -> (ParamStore<f64>, msn_core::nn::ParamId) {
    let mut ps = ParamStore::new();
    let id = ps.add("p", Tensor::new([1], vec![p]).unwrap()).unwrap();
    (ps, id)
}

fn set_grad(ps: &mut ParamStore<f64>, id: msn_core::nn::ParamId, g: f64) {
    let mut tape = Tape::<f64>::new();
    let v = tape.param(ps, id);
    let c = tape.constant(Tensor::new([1], vec![g]).unwrap());
    let y = tape.mul(v, c).unwrap();
    let y = tape.sum(y).unwrap();
    tape.backward(y).unwrap();
    ps.zero_grad();
    ps.accumulate_grads(&tape);
}

#[test]
fn adamw_zero_gradient_leaves_params() {
    let (mut ps, id) = scalar_store(0.7);
    set_grad(&mut ps, id, 0.0);
    let mut opt = AdamW::new(AdamWConfig {
        lr: 0.1,
        ..Default::default()
    });
    opt.step(&mut ps).unwrap();
    assert_eq!(ps.value(id).data(), &[0.7]);
}

#[test]
fn adamw_first_step_moves_by_lr() {
    let (mut ps, id) = scalar_store(1.0);
    set_grad(&mut ps, id, 1.0);
    let mut opt = AdamW::new(AdamWConfig {
        lr: 0.1,
        ..Default::default()
    });
    opt.step(&mut ps).unwrap();
    // m̂ = v̂ = 1, so the step is lr / (1 + eps).
    assert!((ps.value(id).data()[0] - 0.9).abs() < 1e-7);
}

#[test]
fn adamw_decoupled_decay() {
    let (mut ps, id) = scalar_store(2.0);
    set_grad(&mut ps, id, 0.0);
    let mut opt = AdamW::new(AdamWConfig {
        lr: 0.1,
        weight_decay: 0.1,
        ..Default::default()
    });
    opt.step(&mut ps).unwrap();
    assert!((ps.value(id).data()[0] - 2.0 * 0.99).abs() < 1e-12);
}

#[test]
fn adamw_requires_gradients_for_trainable_params() {
    let (mut ps, _) = scalar_store(1.0);
    let mut opt = AdamW::new(AdamWConfig::default());
    assert!(matches!(opt.step(&mut ps), Err(Error::MissingGradient(name)) if name == "p"));
}

#[test]
fn lora_zero_b_equals_base() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ps = ParamStore::<f32>::new();
    let mut lin = Linear::new(&mut ps, "l", 6, 5, false, &mut rng).unwrap();
    let x = randn(&mut rng, &[6]);
    let base = {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = lora_forward(&mut tape, &ps, &lin, xv).unwrap();
        tape.value(y).clone()
    };
    lin.attach_lora(&mut ps, 2, 4.0, &mut rng).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let y = lora_forward(&mut tape, &ps, &lin, xv).unwrap();
    assert_eq!(tape.value(y), &base);
}

#[test]
fn lora_hand_computed_update() {
    let mut ps = ParamStore::<f64>::new();
    let w = ps
        .add(
            "l.weight",
            Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        )
        .unwrap();
    let mut lin = Linear {
        weight: w,
        bias: None,
        d_in: 2,
        d_out: 2,
        lora: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    lin.attach_lora(&mut ps, 1, 1.0, &mut rng).unwrap();
    let adapter = lin.lora.clone().unwrap();
    *ps.value_mut(adapter.a) = Tensor::new([1, 2], vec![1.0, 0.0]).unwrap();
    *ps.value_mut(adapter.b) = Tensor::new([2, 1], vec![1.0, 0.0]).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new([2], vec![3.0, 5.0]).unwrap());
    let y = lora_forward(&mut tape, &ps, &lin, x).unwrap();
    assert_eq!(tape.value(y).data(), &[6.0, 5.0]);

    let bad = tape.constant(Tensor::zeros([3]));
    assert!(lora_forward(&mut tape, &ps, &lin, bad).is_err());
}

#[test]
fn lora_training_never_touches_frozen_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut ps = ParamStore::<f32>::new();
    let mut lin = Linear::new(&mut ps, "l", 4, 3, true, &mut rng).unwrap();
    lin.attach_lora(&mut ps, 2, 4.0, &mut rng).unwrap();
    let before = ps.value(lin.weight).clone();
    let bias_before = ps.value(lin.bias.unwrap()).clone();
    let mut opt = AdamW::new(AdamWConfig {
        lr: 1e-2,
        weight_decay: 0.1,
        ..Default::default()
    });
    let x = randn(&mut rng, &[5, 4]);
    for _ in 0..5 {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = lin.forward(&mut tape, &ps, xv).unwrap();
        let y = tape.square(y).unwrap();
        let loss = tape.mean(y).unwrap();
        tape.backward(loss).unwrap();
        ps.zero_grad();
        ps.accumulate_grads(&tape);
        opt.step(&mut ps).unwrap();
    }
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(ps.value(lin.weight)), bits(&before));
    assert_eq!(bits(ps.value(lin.bias.unwrap())), bits(&bias_before));
    assert!(ps
        .value(lin.lora.as_ref().unwrap().b)
        .data()
        .iter()
        .any(|&v| v != 0.0));
}
