//! Optimal-transport conditional flow matching: probability paths, the
//! regression loss, and a fixed-step Euler sampler.

mod dit;

pub use dit::{Dit, DitConfig};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const DEFAULT_SIGMA_MIN: f64 = 1e-4;
pub const DEFAULT_SAMPLE_STEPS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    FlowMatching,
    Mse,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::FlowMatching => "fm",
            Objective::Mse => "mse",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fm" | "flow_matching" | "flow-matching" => Ok(Objective::FlowMatching),
            "mse" => Ok(Objective::Mse),
            other => Err(Error::invalid(format!(
                "unknown objective `{other}` (expected fm or mse)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OtCfmConfig {
    pub sigma_min: f64,
    pub n_sample_steps: usize,
    pub objective: Objective,
}

impl Default for OtCfmConfig {
    fn default() -> Self {
        Self {
            sigma_min: DEFAULT_SIGMA_MIN,
            n_sample_steps: DEFAULT_SAMPLE_STEPS,
            objective: Objective::FlowMatching,
        }
    }
}

impl OtCfmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sigma_min) {
            return Err(Error::invalid(format!(
                "sigma_min {} outside [0, 1)",
                self.sigma_min
            )));
        }
        if self.n_sample_steps == 0 {
            return Err(Error::invalid("n_sample_steps must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample<R: Real = f32> {
    pub t: f64,
    pub x0: Tensor<R>,
    pub x1: Tensor<R>,
    pub x_t: Tensor<R>,
    pub u_t: Tensor<R>,
}

/// Point on the straight path and its target velocity:
/// `x_t = (1 − (1 − σ)t)·x0 + t·x1`, `u_t = x1 − (1 − σ)·x0`.
pub fn path_point<R: Real>(
    x0: &Tensor<R>,
    x1: &Tensor<R>,
    t: f64,
    sigma_min: f64,
) -> Result<(Tensor<R>, Tensor<R>)> {
    if x0.shape() != x1.shape() {
        return Err(Error::shape("path_point", x0.shape(), x1.shape()));
    }
    // Written as (1 − t) + σt so both endpoints come out exact.
    let a = R::from_f64_lossy((1.0 - t) + sigma_min * t);
    let b = R::from_f64_lossy(1.0 - sigma_min);
    let t = R::from_f64_lossy(t);
    let mut xt = Vec::with_capacity(x0.numel());
    let mut ut = Vec::with_capacity(x0.numel());
    for (&n, &d) in x0.data().iter().zip(x1.data()) {
        xt.push(a * n + t * d);
        ut.push(d - b * n);
    }
    Ok((
        Tensor::new(x0.shape().to_vec(), xt)?,
        Tensor::new(x0.shape().to_vec(), ut)?,
    ))
}

pub fn standard_normal<R: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<R> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| R::from_f64_lossy(rng.sample(StandardNormal)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// Draw `t ~ U[0, 1]` and `x0 ~ N(0, I)`, then build the path sample.
pub fn sample_path<R: Real>(
    x1: &Tensor<R>,
    rng: &mut impl Rng,
    cfg: &OtCfmConfig,
) -> Result<FlowSample<R>> {
    let t: f64 = rng.random_range(0.0..=1.0);
    sample_path_at(x1, t, rng, cfg)
}

/// As [`sample_path`] with a fixed `t`.
pub fn sample_path_at<R: Real>(
    x1: &Tensor<R>,
    t: f64,
    rng: &mut impl Rng,
    cfg: &OtCfmConfig,
) -> Result<FlowSample<R>> {
    if !x1.is_finite() {
        return Err(Error::NumericFault {
            context: "sample_path target".into(),
        });
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("t = {t} outside [0, 1]")));
    }
    let x0 = standard_normal(x1.shape(), rng);
    let (x_t, u_t) = path_point(&x0, x1, t, cfg.sigma_min)?;
    Ok(FlowSample {
        t,
        x0,
        x1: x1.clone(),
        x_t,
        u_t,
    })
}

/// Mean over all elements of `(u − v)²`.
pub fn cfm_loss<R: Real>(tape: &mut Tape<R>, predicted: Var, target: Var) -> Result<Var> {
    if tape.shape(predicted) != tape.shape(target) {
        return Err(Error::shape(
            "cfm_loss",
            tape.shape(predicted),
            tape.shape(target),
        ));
    }
    let d = tape.sub(target, predicted)?;
    let d = tape.square(d)?;
    tape.mean(d)
}

/// A time-dependent velocity field `v(x, t)`.
pub trait VectorField<R: Real> {
    fn velocity(&self, x: &Tensor<R>, t: f64) -> Result<Tensor<R>>;
}

impl<R: Real, F> VectorField<R> for F
where
    F: Fn(&Tensor<R>, f64) -> Result<Tensor<R>>,
{
    fn velocity(&self, x: &Tensor<R>, t: f64) -> Result<Tensor<R>> {
        self(x, t)
    }
}

/// Integrate `dx/dt = v(x, t)` from `t = 0` to `1` with `n_steps` forward
/// Euler steps starting at `x0`.
pub fn euler_integrate<R: Real>(
    field: &impl VectorField<R>,
    x0: Tensor<R>,
    n_steps: usize,
) -> Result<Tensor<R>> {
    if n_steps == 0 {
        return Err(Error::invalid("n_steps must be at least 1"));
    }
    let h = R::from_f64_lossy(1.0 / n_steps as f64);
    let mut x = x0;
    for i in 0..n_steps {
        let v = field.velocity(&x, i as f64 / n_steps as f64)?;
        if v.shape() != x.shape() {
            return Err(Error::shape("euler step", v.shape(), x.shape()));
        }
        for (xi, &vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi += h * vi;
        }
        if !x.is_finite() {
            return Err(Error::NumericFault {
                context: format!("euler integration step {i}"),
            });
        }
    }
    Ok(x)
}

/// Sample by integrating from fresh Gaussian noise of the given shape.
pub fn euler_sample<R: Real>(
    field: &impl VectorField<R>,
    shape: &[usize],
    cfg: &OtCfmConfig,
    rng: &mut impl Rng,
) -> Result<Tensor<R>> {
    cfg.validate()?;
    let x0 = standard_normal(shape, rng);
    euler_integrate(field, x0, cfg.n_sample_steps)
}
