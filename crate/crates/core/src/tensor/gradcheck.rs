use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare tape gradients of a scalar function against central finite
/// differences and return the worst relative error over all input elements.
///
/// `f` is re-run on a fresh tape for every perturbation, so it must be a
/// pure function of its inputs.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.item(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::NonScalarRoot(tape.shape(out).to_vec()));
    }
    tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match tape.grad(*v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; inputs[i].numel()],
        };
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + eps;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = x0 - eps;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = x0;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[j], numeric));
        }
    }
    Ok(worst)
}
