//! Training objectives, built on the tape so gradients come from the same
//! backward pass that training uses.
//!
//! Every loss reduces with a mean over the batch. L2 regularization is
//! available as a diagnostic scalar but enters training through the
//! optimizer's weight-decay channel, never through the reported loss.

use crate::error::TensorError;
use crate::nn::Mlp;
use crate::scalar::{to_f64, Scalar};
use crate::tape::{ParamId, ParamStore, Tape, ValueId};
use crate::tensor::Tensor;

/// Norm guard: row norms are computed as sqrt(sum_sq + NORM_GUARD^2), which
/// bounds every cosine denominator away from zero by 1e-8.
pub const NORM_GUARD: f64 = 1e-8;

/// Mean cross-entropy between logits [N x C] and integer labels.
pub fn cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    logits: ValueId,
    labels: &[u32],
) -> Result<ValueId, TensorError> {
    tape.cross_entropy(logits, labels)
}

/// Sum of squared entries over the given parameters, recorded on the tape.
pub fn l2_reg<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &[ParamId],
) -> Result<ValueId, TensorError> {
    let mut acc: Option<ValueId> = None;
    for &p in params {
        let v = tape.param(store, p);
        let sq = tape.mul(v, v)?;
        let s = tape.sum_all(sq);
        acc = Some(match acc {
            None => s,
            Some(prev) => tape.add(prev, s)?,
        });
    }
    Ok(match acc {
        Some(id) => id,
        None => tape.constant(Tensor::scalar(T::zero())),
    })
}

/// Mean squared error over all elements between a prediction and a constant
/// target of the same shape.
pub fn mean_squared_error<T: Scalar>(
    tape: &mut Tape<T>,
    pred: ValueId,
    target: &Tensor<T>,
) -> Result<ValueId, TensorError> {
    if tape.value(pred).shape() != target.shape() {
        return Err(TensorError::DimMismatch {
            op: "mean_squared_error",
            lhs: tape.value(pred).shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let t = tape.constant(target.clone());
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean_all(sq))
}

/// Reconstruction objective of a passive client: decode the received
/// representations and score them against the client's own view.
pub fn reconstruction_loss<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    reps: ValueId,
    decoder: &Mlp,
    view_rows: &Tensor<T>,
) -> Result<ValueId, TensorError> {
    let out = decoder.forward(tape, store, reps)?;
    mean_squared_error(tape, out, view_rows)
}

/// Cosine similarity of two equal-length vectors, with the denominator
/// guarded by 1e-8.
pub fn cosine_similarity<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T, TensorError> {
    if a.rank() != 1 || b.rank() != 1 {
        return Err(TensorError::Rank {
            op: "cosine_similarity",
            expected: 1,
            shape: if a.rank() != 1 {
                a.shape().to_vec()
            } else {
                b.shape().to_vec()
            },
        });
    }
    if a.shape() != b.shape() {
        return Err(TensorError::DimMismatch {
            op: "cosine_similarity",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data().iter()) {
        dot += to_f64(x) * to_f64(y);
        na += to_f64(x) * to_f64(x);
        nb += to_f64(y) * to_f64(y);
    }
    Ok(crate::scalar::cast(
        dot / (na.sqrt() * nb.sqrt() + NORM_GUARD),
    ))
}

/// L2-normalizes each row: x / sqrt(row_sum(x^2) + NORM_GUARD^2).
pub fn normalize_rows<T: Scalar>(
    tape: &mut Tape<T>,
    x: ValueId,
) -> Result<ValueId, TensorError> {
    let sq = tape.mul(x, x)?;
    let ss = tape.row_sum(sq)?;
    let guarded = tape.add_scalar(ss, NORM_GUARD * NORM_GUARD);
    let norm = tape.sqrt(guarded);
    tape.div_col(x, norm)
}

/// Contrastive alignment between an anchor batch h_a and a positive batch
/// h_p (rows correspond). For anchor i the positive is h_p[i]; negatives
/// are every other anchor row and every cross row:
///
///   loss_i = -log( exp(s(a_i, p_i)/tau)
///            / (sum_{j != i} exp(s(a_i, a_j)/tau) + sum_j exp(s(a_i, p_j)/tau)) )
///
/// with s = guarded cosine similarity. Mean over anchors. The positive term
/// is subtracted before exponentiation, so a single-row batch yields an
/// exact zero.
pub fn contrastive_loss<T: Scalar>(
    tape: &mut Tape<T>,
    h_a: ValueId,
    h_p: ValueId,
    tau: f64,
) -> Result<ValueId, TensorError> {
    let (n, d) = tape.value(h_a).dims2("contrastive_loss")?;
    let (np, dp) = tape.value(h_p).dims2("contrastive_loss")?;
    if n == 0 {
        return Err(TensorError::EmptyBatch {
            op: "contrastive_loss",
        });
    }
    if n != np || d != dp {
        return Err(TensorError::DimMismatch {
            op: "contrastive_loss",
            lhs: vec![n, d],
            rhs: vec![np, dp],
        });
    }
    if !(tau > 0.0) {
        return Err(TensorError::contract(
            "contrastive_loss",
            format!("temperature must be positive, got {tau}"),
        ));
    }

    let na = normalize_rows(tape, h_a)?;
    let np_ = normalize_rows(tape, h_p)?;
    let nat = tape.transpose(na)?;
    let npt = tape.transpose(np_)?;
    let sim_aa = tape.matmul(na, nat)?;
    let sim_ap = tape.matmul(na, npt)?;
    let a_sc = tape.scale(sim_aa, 1.0 / tau);
    let b_sc = tape.scale(sim_ap, 1.0 / tau);

    // Shift by the positive logit so the ratio's numerator is exactly one.
    let pos = tape.diag(b_sc)?;
    let a_sh = tape.sub_col(a_sc, pos)?;
    let b_sh = tape.sub_col(b_sc, pos)?;

    let ea_raw = tape.exp(a_sh);
    let mut mask = Tensor::new(vec![n, n], vec![T::one(); n * n]);
    for i in 0..n {
        mask.data_mut()[i * n + i] = T::zero();
    }
    let mask_id = tape.constant(mask);
    let ea = tape.mul(ea_raw, mask_id)?;
    let eb = tape.exp(b_sh);

    let denom_a = tape.row_sum(ea)?;
    let denom_b = tape.row_sum(eb)?;
    let denom = tape.add(denom_a, denom_b)?;
    let per_anchor = tape.ln(denom);
    Ok(tape.mean_all(per_anchor))
}

/// Server objective for feature-concatenation training: concatenate the
/// per-client representations in ascending client order, apply the head,
/// and score with cross-entropy.
pub fn tvfl_server_loss<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    reps: &[ValueId],
    labels: &[u32],
    head: &Mlp,
) -> Result<ValueId, TensorError> {
    if reps.is_empty() {
        return Err(TensorError::EmptyBatch {
            op: "tvfl_server_loss",
        });
    }
    let (n0, _) = tape.value(reps[0]).dims2("tvfl_server_loss")?;
    for &r in reps {
        let (ri, _) = tape.value(r).dims2("tvfl_server_loss")?;
        if ri != n0 {
            return Err(TensorError::RowMismatch {
                op: "tvfl_server_loss",
                lhs: n0,
                rhs: ri,
            });
        }
    }
    let joint = tape.concat_cols(reps)?;
    let logits = head.forward(tape, store, joint)?;
    cross_entropy(tape, logits, labels)
}
