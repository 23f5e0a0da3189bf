//! Training objective: per-stream cross-entropy, fusion cross-entropy and
//! their weighted sum with the margin loss.

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::quality::{log_softmax_nll_rows, one_hot};
use crate::real::Real;

/// Default weight of the margin loss.
pub const DEFAULT_LAMBDA: f64 = 0.1;

/// Per-stream, per-sample terms `-sum_c Y_c log p_c(X_i)` as `[S * B]`,
/// stream-major, for stream probabilities each `[B, 2]`. Logs are clamped;
/// see [`Tape::clamp_count`].
pub fn l_vit_rows<T: Real>(tape: &mut Tape<T>, stream_probs: &[Var], labels: &[usize]) -> Result<Var> {
    if stream_probs.is_empty() {
        return Err(Error::Empty("stream probabilities"));
    }
    let y = tape.constant(one_hot(labels, 2)?)?;
    let mut rows = Vec::with_capacity(stream_probs.len());
    for &p in stream_probs {
        if tape.shape(p) != [labels.len(), 2] {
            return Err(Error::shape("l_vit", tape.shape(p), &[labels.len(), 2]));
        }
        let lp = tape.log(p)?;
        let picked = tape.mul(lp, y)?;
        rows.push(tape.sum(picked, Some(1))?);
    }
    let all = tape.concat(&rows, 0)?;
    tape.scale(all, -T::ONE)
}

/// `-sum_i sum_c Y_c log p_c(X_i)` summed over streams and batch.
pub fn l_vit<T: Real>(tape: &mut Tape<T>, stream_probs: &[Var], labels: &[usize]) -> Result<Var> {
    let rows = l_vit_rows(tape, stream_probs, labels)?;
    tape.sum(rows, None)
}

/// Per-sample softmax cross-entropy `[B]` of the fusion head's logits.
pub fn l_fusion_rows<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    if tape.shape(logits) != [labels.len(), 2] {
        return Err(Error::shape("l_fusion", tape.shape(logits), &[labels.len(), 2]));
    }
    log_softmax_nll_rows(tape, logits, labels)
}

/// Softmax cross-entropy of the fusion head's logits `[B, 2]`, summed.
pub fn l_fusion<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let rows = l_fusion_rows(tape, logits, labels)?;
    tape.sum(rows, None)
}

/// Component values of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_vit: f64,
    pub l_lmc: f64,
    pub l_fusion: f64,
    pub total: f64,
    pub lambda: f64,
}

/// `lambda * l_lmc + l_vit + l_fusion`.
pub fn total_loss(l_vit: f64, l_lmc: f64, l_fusion: f64, lambda: f64) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid("lambda", alloc::format!("{lambda} must be nonnegative")));
    }
    Ok(LossBreakdown { l_vit, l_lmc, l_fusion, total: lambda * l_lmc + l_vit + l_fusion, lambda })
}

/// Tape version of [`total_loss`]. Absent components contribute nothing.
pub fn total_on_tape<T: Real>(
    tape: &mut Tape<T>,
    l_vit: Var,
    l_lmc: Option<Var>,
    l_fusion: Option<Var>,
    lambda: f64,
) -> Result<Var> {
    let mut total = l_vit;
    if let Some(l) = l_lmc {
        let w = tape.scale(l, T::from_f64(lambda))?;
        total = tape.add(total, w)?;
    }
    if let Some(l) = l_fusion {
        total = tape.add(total, l)?;
    }
    Ok(total)
}
