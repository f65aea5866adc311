//! Small neural-net building blocks on top of the tape: multi-head
//! scaled dot-product attention, sinusoidal encodings, linear layers.

use ndarray::{Array1, Array2};

use crate::error::CoreError;
use crate::tape::{Real, Tape, Var};

/// Per-head `softmax(q·kᵀ/√d_h)·v` with the head outputs concatenated.
///
/// `q` is `[n_q, d]`, `k` and `v` are `[n_kv, d]`; `d` must be divisible
/// by `heads`.
pub fn scaled_dot_attention<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<Var, CoreError> {
    let d = tape.value2(q).ncols();
    if heads == 0 || d % heads != 0 {
        return Err(CoreError::Config(format!(
            "feature dim {d} not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (s, e) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, s, e);
        let kh = tape.slice_cols(k, s, e);
        let vh = tape.slice_cols(v, s, e);
        let logits = tape.matmul_tb(qh, kh)?;
        let scaled = tape.scale(logits, scale);
        let attn = tape.softmax(scaled);
        outs.push(tape.matmul(attn, vh)?);
    }
    tape.concat_cols(&outs)
}

/// `x·W + b` where `w` is `[in, out]` and `b` is `[1, out]`.
pub fn linear<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var, CoreError> {
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

/// Classic fixed sinusoidal positional encoding table `[n, d]`.
pub fn positional_encoding<T: Real>(n: usize, d: usize) -> Array2<T> {
    let mut pe = Array2::zeros((n, d));
    for pos in 0..n {
        for i in 0..d {
            let exponent = 2.0 * (i / 2) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            pe[[pos, i]] = T::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

/// Sinusoidal features of a continuous position `x` (used for timestep
/// embeddings).
pub fn sinusoid_features<T: Real>(x: f64, dim: usize) -> Array1<T> {
    let mut out = Array1::zeros(dim);
    for i in 0..dim {
        let exponent = 2.0 * (i / 2) as f64 / dim as f64;
        let angle = x / 10000f64.powf(exponent);
        out[i] = T::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() });
    }
    out
}
