// Numeric kernels shared by the tape's forward and backward passes.

use super::Real;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu<R: Real>(x: R) -> R {
    let c = R::from_f64_lossy(GELU_C);
    let k = R::from_f64_lossy(GELU_K);
    let half = R::from_f64_lossy(0.5);
    half * x * (R::one() + (c * (x + k * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<R: Real>(x: R) -> R {
    let c = R::from_f64_lossy(GELU_C);
    let k = R::from_f64_lossy(GELU_K);
    let half = R::from_f64_lossy(0.5);
    let three = R::from_f64_lossy(3.0);
    let th = (c * (x + k * x * x * x)).tanh();
    half * (R::one() + th) + half * x * (R::one() - th * th) * c * (R::one() + three * k * x * x)
}

/// Softmax over the last dimension of `[.., rows, cols]`. With `causal`,
/// entry `(i, j)` with `j > i` is masked to zero.
pub(crate) fn softmax_rows<R: Real>(x: &[R], rows: usize, cols: usize, causal: bool) -> Vec<R> {
    let mut out = vec![R::zero(); x.len()];
    for (r, (src, dst)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let limit = if causal {
            (r % rows + 1).min(cols)
        } else {
            cols
        };
        let max = src[..limit].iter().copied().fold(R::neg_infinity(), R::max);
        let mut total = R::zero();
        for (d, &s) in dst[..limit].iter_mut().zip(&src[..limit]) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in &mut dst[..limit] {
            *d /= total;
        }
    }
    out
}

pub(crate) fn logsumexp_rows<R: Real>(x: &[R], cols: usize) -> Vec<R> {
    x.chunks(cols)
        .map(|row| {
            let max = row.iter().copied().fold(R::neg_infinity(), R::max);
            let total: R = row.iter().map(|&v| (v - max).exp()).sum();
            max + total.ln()
        })
        .collect()
}

/// Swap the two middle axes of a `[a, b, c, d]` buffer.
pub(crate) fn swap_axes12<R: Real>(x: &[R], dims: [usize; 4]) -> Vec<R> {
    let [a, b, c, d] = dims;
    let mut out = vec![R::zero(); x.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * d;
                let dst = ((i * c + k) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}

/// Transpose the last two axes of a `[batch, r, c]` buffer.
pub(crate) fn transpose_last2<R: Real>(x: &[R], batch: usize, r: usize, c: usize) -> Vec<R> {
    let mut out = vec![R::zero(); x.len()];
    for b in 0..batch {
        let base = b * r * c;
        for i in 0..r {
            for j in 0..c {
                out[base + j * r + i] = x[base + i * c + j];
            }
        }
    }
    out
}

/// Sum `g` (length a multiple of `len`) into `dst` chunk by chunk.
pub(crate) fn reduce_broadcast<R: Real>(dst: &mut [R], g: &[R]) {
    let len = dst.len();
    for chunk in g.chunks(len) {
        for (d, &v) in dst.iter_mut().zip(chunk) {
            *d += v;
        }
    }
}
