//! Training objectives recorded on the tape. All return `1 x 1` means.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

fn column_len(tape: &Tape, v: Var, what: &str) -> Result<usize> {
    match tape.shape(v) {
        (n, 1) => Ok(n),
        s => Err(Error::Shape(format!("{what}: expected a column, got {s:?}"))),
    }
}

/// Binary cross-entropy on raw logits. For `y ∈ {0, 1}`,
/// `softplus(z) - y z = softplus((1 - 2y) z)`, which avoids cancellation.
pub fn bce_loss(tape: &Tape, logits: Var, labels: &[f64]) -> Result<Var> {
    let n = column_len(tape, logits, "bce_loss")?;
    if labels.len() != n {
        return Err(Error::Shape(format!("bce_loss: {n} logits, {} labels", labels.len())));
    }
    if let Some(y) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::Data(format!("label {y} is not binary")));
    }
    let sign = tape.constant(Tensor::column(labels.iter().map(|y| 1.0 - 2.0 * y).collect()));
    Ok(tape.mean(tape.softplus(tape.mul(sign, logits)?)))
}

pub fn l1_loss(tape: &Tape, pred: Var, target: &[f64]) -> Result<Var> {
    let n = column_len(tape, pred, "l1_loss")?;
    if target.len() != n {
        return Err(Error::Shape(format!("l1_loss: {n} predictions, {} targets", target.len())));
    }
    let t = tape.constant(Tensor::column(target.to_vec()));
    Ok(tape.mean(tape.abs(tape.sub(pred, t)?)))
}

/// `mean(-log σ(pos - neg))`, computed as `softplus(neg - pos)`.
pub fn bpr_loss(tape: &Tape, pos: Var, neg: Var) -> Result<Var> {
    let (p, n) = (column_len(tape, pos, "bpr_loss")?, column_len(tape, neg, "bpr_loss")?);
    if p != n {
        return Err(Error::Shape(format!("bpr_loss: {p} positives, {n} negatives")));
    }
    Ok(tape.mean(tape.softplus(tape.sub(neg, pos)?)))
}
