//! Fusion and neighborhood aggregation primitives.
//!
//! Embeddings are stored as rows, so a weight `W` acts as `h W`.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Weights of one aggregator instance, already bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct AggrVars {
    /// Query and key projections; absent for the mean aggregator.
    pub query_key: Option<(Var, Var)>,
    pub value: Var,
    pub proj: Var,
}

/// `W1 h_mid + W2 h_src`, row by row.
pub fn fuse(tape: &Tape, h_mid: Var, h_src: Var, w1: Var, w2: Var) -> Result<Var> {
    let (m, s) = (tape.shape(h_mid).0, tape.shape(h_src).0);
    if m != s {
        return Err(Error::Shape(format!("fuse: {m} mid rows paired with {s} src rows")));
    }
    let a = tape.matmul(h_mid, w1)?;
    let b = tape.matmul(h_src, w2)?;
    tape.add(a, b)
}

fn check_block(tape: &Tape, h_dst: Var, h_nbr: Var, segments: &[usize]) -> Result<(usize, usize)> {
    let (n, d) = tape.shape(h_dst);
    let (m, d2) = tape.shape(h_nbr);
    if d != d2 || m != segments.len() {
        return Err(Error::Shape(format!(
            "aggregate: dst {n}x{d}, neighbors {m}x{d2}, {} segment ids",
            segments.len()
        )));
    }
    Ok((n, d))
}

/// Multi-head dot-product attention over each destination's neighbors.
/// Returns the messages and, for non-empty blocks, the `m x heads`
/// attention coefficients.
pub fn attn_aggr_weights(
    tape: &Tape,
    h_dst: Var,
    h_nbr: Var,
    segments: &[usize],
    w: &AggrVars,
    heads: usize,
) -> Result<(Var, Option<Var>)> {
    let (n, d) = check_block(tape, h_dst, h_nbr, segments)?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!("width {d} does not split into {heads} heads")));
    }
    let (wq, wk) = w
        .query_key
        .ok_or_else(|| Error::Model("attention needs query and key weights".into()))?;
    let proj = tape.matmul(h_dst, w.proj)?;
    if segments.is_empty() {
        return Ok((proj, None));
    }
    let dk = d / heads;
    let q = tape.matmul(tape.gather_rows(h_dst, segments)?, wq)?;
    let k = tape.matmul(h_nbr, wk)?;
    let v = tape.matmul(h_nbr, w.value)?;
    let inv_sqrt = 1.0 / (dk as f64).sqrt();
    let mut scores = Vec::with_capacity(heads);
    for h in 0..heads {
        let (a, b) = (h * dk, (h + 1) * dk);
        let qk = tape.mul(tape.slice_cols(q, a, b)?, tape.slice_cols(k, a, b)?)?;
        scores.push(tape.scale(tape.row_sum(qk), inv_sqrt));
    }
    let scores = if heads == 1 { scores[0] } else { tape.concat_cols(&scores)? };
    let alpha = tape.segment_softmax(scores, segments)?;
    let mut weighted = Vec::with_capacity(heads);
    for h in 0..heads {
        let vh = tape.slice_cols(v, h * dk, (h + 1) * dk)?;
        weighted.push(tape.mul_col(vh, tape.slice_cols(alpha, h, h + 1)?)?);
    }
    let weighted = if heads == 1 { weighted[0] } else { tape.concat_cols(&weighted)? };
    let agg = tape.segment_sum(weighted, segments, n)?;
    Ok((tape.add(proj, agg)?, Some(alpha)))
}

pub fn attn_aggr(tape: &Tape, h_dst: Var, h_nbr: Var, segments: &[usize], w: &AggrVars, heads: usize) -> Result<Var> {
    attn_aggr_weights(tape, h_dst, h_nbr, segments, w, heads).map(|(out, _)| out)
}

/// `h_dst Wproj + (mean of neighbors) WV`; empty neighborhoods give the
/// projection alone.
pub fn sage_aggr(tape: &Tape, h_dst: Var, h_nbr: Var, segments: &[usize], w: &AggrVars) -> Result<Var> {
    let (n, _) = check_block(tape, h_dst, h_nbr, segments)?;
    let proj = tape.matmul(h_dst, w.proj)?;
    if segments.is_empty() {
        return Ok(proj);
    }
    let mean = tape.segment_mean(h_nbr, segments, n)?;
    let agg = tape.matmul(mean, w.value)?;
    tape.add(proj, agg)
}
