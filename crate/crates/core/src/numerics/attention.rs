use super::{Scalar, ShapeError, Tape, Var};

/// `softmax(Q·Kᵀ/√D + bias)·V` for `Q, K, V: [N, D]` and an optional additive
/// `[N, N]` bias (entries may be `-inf`).
pub fn scaled_dot_attention<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, bias: Option<Var>) -> Result<Var, ShapeError> {
    let (qs, ks, vs) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if qs.len() != 2 || qs != ks || ks != vs {
        return Err(ShapeError::Mismatch { op: "scaled_dot_attention", detail: format!("Q {qs:?}, K {ks:?}, V {vs:?}") });
    }
    let d = qs[1];
    let scores = tape.matmul_nt(q, k)?;
    let mut scores = tape.scale(scores, T::one() / T::of(d as f64).sqrt());
    if let Some(b) = bias {
        scores = tape.add(scores, b)?;
    }
    let attn = tape.softmax(scores, 1)?;
    tape.matmul(attn, v)
}

/// Splits `Q, K, V: [N, D]` into `heads` column blocks, attends within each
/// block and concatenates the results back to `[N, D]`.
pub fn multi_head_attention<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, heads: usize, bias: Option<Var>) -> Result<Var, ShapeError> {
    let d = tape.shape(q).get(1).copied().unwrap_or(0);
    if heads == 0 || d % heads != 0 {
        return Err(ShapeError::Mismatch { op: "multi_head_attention", detail: format!("width {d} not divisible into {heads} heads") });
    }
    if heads == 1 {
        return scaled_dot_attention(tape, q, k, v, bias);
    }
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        outs.push(scaled_dot_attention(tape, qh, kh, vh, bias)?);
    }
    tape.concat_cols(&outs)
}
