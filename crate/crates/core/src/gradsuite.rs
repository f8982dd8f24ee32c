//! Finite-difference gradient suite covering every differentiable tape
//! operation plus the composite layers built from them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::nn::{attention, Block, Linear, ParamStore, TimestepEmbedder, TransformerConfig};
use crate::tensor::{grad_check, Tape, Tensor, Var};

/// Per-op finite-difference step in f64.
pub const SUITE_EPS: f64 = 1e-5;
/// Threshold for primitive ops.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Threshold for a full transformer block.
pub const BLOCK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduce an arbitrary output to a scalar with fixed random weights so no
/// gradient is identically zero by symmetry.
fn probe(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = if shape.is_empty() {
        Tensor::scalar(rng.sample::<f64, _>(StandardNormal))
    } else {
        randn(&mut rng, &shape)
    };
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

fn check(
    name: &'static str,
    tolerance: f64,
    inputs: Vec<Tensor<f64>>,
    f: OpFn,
) -> Result<GradCheckResult> {
    let wrapped = |tape: &mut Tape<f64>, xs: &[Var]| -> Result<Var> {
        let out = f(tape, xs)?;
        probe(tape, out, 0x5eed)
    };
    Ok(GradCheckResult {
        name,
        max_rel_error: grad_check(wrapped, &inputs, SUITE_EPS)?,
        tolerance,
    })
}

/// Run the whole suite with a fixed seed.
pub fn run_gradient_suite(seed: u64) -> Result<Vec<GradCheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    let t = OP_TOLERANCE;

    out.push(check(
        "add",
        t,
        vec![randn(r, &[3, 4]), randn(r, &[3, 4])],
        Box::new(|tp, x| tp.add(x[0], x[1])),
    )?);
    out.push(check(
        "add_broadcast",
        t,
        vec![randn(r, &[2, 3, 4]), randn(r, &[4])],
        Box::new(|tp, x| tp.add(x[0], x[1])),
    )?);
    out.push(check(
        "sub",
        t,
        vec![randn(r, &[3, 4]), randn(r, &[4])],
        Box::new(|tp, x| tp.sub(x[0], x[1])),
    )?);
    out.push(check(
        "mul",
        t,
        vec![randn(r, &[3, 4]), randn(r, &[3, 4])],
        Box::new(|tp, x| tp.mul(x[0], x[1])),
    )?);
    out.push(check(
        "mul_broadcast",
        t,
        vec![randn(r, &[2, 3, 4]), randn(r, &[3, 4])],
        Box::new(|tp, x| tp.mul(x[0], x[1])),
    )?);
    out.push(check(
        "scale",
        t,
        vec![randn(r, &[5])],
        Box::new(|tp, x| tp.scale(x[0], -1.7)),
    )?);
    out.push(check(
        "add_scalar",
        t,
        vec![randn(r, &[5])],
        Box::new(|tp, x| tp.add_scalar(x[0], 0.3)),
    )?);
    out.push(check(
        "gelu",
        t,
        vec![randn(r, &[8])],
        Box::new(|tp, x| tp.gelu(x[0])),
    )?);
    out.push(check(
        "exp",
        t,
        vec![randn(r, &[6])],
        Box::new(|tp, x| tp.exp(x[0])),
    )?);
    out.push(check(
        "log",
        t,
        vec![positive(r, &[6])],
        Box::new(|tp, x| tp.log(x[0])),
    )?);
    out.push(check(
        "square",
        t,
        vec![randn(r, &[6])],
        Box::new(|tp, x| tp.square(x[0])),
    )?);
    out.push(check(
        "matmul",
        t,
        vec![randn(r, &[3, 4]), randn(r, &[4, 2])],
        Box::new(|tp, x| tp.matmul(x[0], x[1])),
    )?);
    out.push(check(
        "matmul_shared",
        t,
        vec![randn(r, &[2, 3, 4]), randn(r, &[4, 2])],
        Box::new(|tp, x| tp.matmul(x[0], x[1])),
    )?);
    out.push(check(
        "matmul_batched",
        t,
        vec![randn(r, &[2, 3, 4]), randn(r, &[2, 4, 5])],
        Box::new(|tp, x| tp.matmul(x[0], x[1])),
    )?);
    out.push(check(
        "matmul_t",
        t,
        vec![randn(r, &[2, 3, 4]), randn(r, &[5, 4])],
        Box::new(|tp, x| tp.matmul_t(x[0], x[1])),
    )?);
    out.push(check(
        "matmul_t_batched",
        t,
        vec![randn(r, &[2, 3, 4]), randn(r, &[2, 5, 4])],
        Box::new(|tp, x| tp.matmul_t(x[0], x[1])),
    )?);
    out.push(check(
        "transpose",
        t,
        vec![randn(r, &[2, 3, 4])],
        Box::new(|tp, x| tp.transpose(x[0])),
    )?);
    out.push(check(
        "swap_axes12",
        t,
        vec![randn(r, &[2, 3, 4, 2])],
        Box::new(|tp, x| tp.swap_axes12(x[0])),
    )?);
    out.push(check(
        "reshape",
        t,
        vec![randn(r, &[2, 6])],
        Box::new(|tp, x| tp.reshape(x[0], &[3, 4])),
    )?);
    out.push(check(
        "softmax",
        t,
        vec![randn(r, &[3, 5])],
        Box::new(|tp, x| tp.softmax(x[0], false)),
    )?);
    out.push(check(
        "softmax_causal",
        t,
        vec![randn(r, &[2, 4, 4])],
        Box::new(|tp, x| tp.softmax(x[0], true)),
    )?);
    out.push(check(
        "logsumexp",
        t,
        vec![randn(r, &[3, 5])],
        Box::new(|tp, x| tp.logsumexp(x[0])),
    )?);
    out.push(check(
        "layer_norm",
        t,
        vec![randn(r, &[3, 6]), randn(r, &[6]), randn(r, &[6])],
        Box::new(|tp, x| tp.layer_norm(x[0], x[1], x[2], 1e-5)),
    )?);
    out.push(check(
        "sum",
        t,
        vec![randn(r, &[3, 4])],
        Box::new(|tp, x| tp.sum(x[0])),
    )?);
    out.push(check(
        "mean",
        t,
        vec![randn(r, &[3, 4])],
        Box::new(|tp, x| tp.mean(x[0])),
    )?);
    out.push(check(
        "gather_rows",
        t,
        vec![randn(r, &[5, 3])],
        Box::new(|tp, x| tp.gather_rows(x[0], &[4, 0, 4, 2])),
    )?);
    out.push(check(
        "pick",
        t,
        vec![randn(r, &[3, 5])],
        Box::new(|tp, x| tp.pick(x[0], &[1, 4, 0])),
    )?);
    out.push(check(
        "concat_last",
        t,
        vec![randn(r, &[2, 3]), randn(r, &[2, 2])],
        Box::new(|tp, x| tp.concat_last(x[0], x[1])),
    )?);
    out.push(check(
        "concat_rows",
        t,
        vec![randn(r, &[2, 3]), randn(r, &[4, 3])],
        Box::new(|tp, x| tp.concat_rows(x[0], x[1])),
    )?);

    out.push(check(
        "attention_causal",
        t,
        vec![
            randn(r, &[2, 4, 8]),
            randn(r, &[2, 4, 8]),
            randn(r, &[2, 4, 8]),
        ],
        Box::new(|tp, x| attention(tp, x[0], x[1], x[2], 2, true)),
    )?);
    out.push(check(
        "cross_entropy_zloss",
        t,
        vec![randn(r, &[4, 6])],
        Box::new(|tp, x| {
            let lse = tp.logsumexp(x[0])?;
            let picked = tp.pick(x[0], &[1, 5, 0, 2])?;
            let nll = tp.sub(lse, picked)?;
            let z = tp.square(lse)?;
            let z = tp.scale(z, 1e-4)?;
            let total = tp.add(nll, z)?;
            tp.mean(total)
        }),
    )?);

    out.push(block_check(r, "transformer_block_causal", true)?);
    out.push(block_check(r, "transformer_block", false)?);
    out.push(lora_check(r)?);
    out.push(timestep_check(r)?);
    Ok(out)
}

/// Check a small model with its parameters treated as grad-check inputs.
fn with_params<F>(
    name: &'static str,
    tolerance: f64,
    ps: ParamStore<f64>,
    extra: Vec<Tensor<f64>>,
    f: F,
) -> Result<GradCheckResult>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var> + 'static,
{
    let ids: Vec<_> = ps.ids().collect();
    let mut inputs: Vec<Tensor<f64>> = ids.iter().map(|&id| ps.value(id).clone()).collect();
    let n_params = inputs.len();
    inputs.extend(extra);
    let body: OpFn = Box::new(move |tape, xs| {
        // Parameters enter as ordinary grad-check inputs; route the model's
        // parameter lookups to them.
        for (&id, &v) in ids.iter().zip(&xs[..n_params]) {
            tape.bind_param(id, v);
        }
        f(tape, &ps, &xs[n_params..])
    });
    check(name, tolerance, inputs, body)
}

fn block_check(r: &mut ChaCha8Rng, name: &'static str, causal: bool) -> Result<GradCheckResult> {
    let cfg = TransformerConfig {
        n_blocks: 1,
        hidden_dim: 8,
        head_dim: 4,
        causal,
        timestep_embed_dim: None,
    };
    let mut ps = ParamStore::<f64>::new();
    let block = Block::new(&mut ps, "block", &cfg, r)?;
    perturb_affine(&mut ps, r);
    let x = randn(r, &[2, 3, 8]);
    with_params(name, BLOCK_TOLERANCE, ps, vec![x], move |tape, ps, xs| {
        block.forward(tape, ps, xs[0], causal)
    })
}

fn lora_check(r: &mut ChaCha8Rng) -> Result<GradCheckResult> {
    let mut ps = ParamStore::<f64>::new();
    let mut lin = Linear::new(&mut ps, "proj", 5, 4, true, r)?;
    lin.attach_lora(&mut ps, 2, 4.0, r)?;
    // Non-zero B so both factors carry gradient.
    let b = lin.lora.as_ref().unwrap().b;
    *ps.value_mut(b) = randn(r, &[4, 2]);
    let x = randn(r, &[3, 5]);
    with_params(
        "lora_linear",
        OP_TOLERANCE,
        ps,
        vec![x],
        move |tape, ps, xs| lin.forward(tape, ps, xs[0]),
    )
}

fn timestep_check(r: &mut ChaCha8Rng) -> Result<GradCheckResult> {
    let mut ps = ParamStore::<f64>::new();
    let emb = TimestepEmbedder::new(&mut ps, "temb", 8, r)?;
    with_params(
        "timestep_mlp",
        OP_TOLERANCE,
        ps,
        vec![],
        move |tape, ps, _| emb.forward(tape, ps, &[0.0, 0.37, 1.0]),
    )
}

fn perturb_affine(ps: &mut ParamStore<f64>, r: &mut ChaCha8Rng) {
    let ids: Vec<_> = ps.ids().collect();
    for id in ids {
        let name = ps.get(id).name().to_string();
        if name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with(".bias") {
            let shape = ps.value(id).shape().to_vec();
            let noise = randn(r, &shape);
            for (v, n) in ps.value_mut(id).data_mut().iter_mut().zip(noise.data()) {
                *v += 0.3 * n;
            }
        }
    }
}
