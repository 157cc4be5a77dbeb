//! Layer building blocks composed from tape primitives.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Tape, Var};

/// `x·W + b`
pub fn linear<S: Scalar>(tape: &mut Tape<S>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Multi-head scaled dot-product attention over `[n×d]` inputs. No mask:
/// every token attends to every token.
pub fn attention<S: Scalar>(
    tape: &mut Tape<S>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<Var> {
    let (n, d) = match tape.shape(q) {
        [n, d] => (*n, *d),
        s => return Err(Error::shape("attention", s, &[])),
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::Contract(format!(
            "embed dim {d} not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let qh = split_heads(tape, q, n, heads, dh)?;
    let kh = split_heads(tape, k, n, heads, dh)?;
    let vh = split_heads(tape, v, n, heads, dh)?;
    let kt = tape.transpose(kh)?;
    let scores = tape.bmm(qh, kt)?;
    let scores = tape.scale(scores, S::one() / S::from_usize_lossy(dh).sqrt())?;
    let attn = tape.softmax(scores)?;
    let ctx = tape.bmm(attn, vh)?;
    merge_heads(tape, ctx, n, heads, dh)
}

/// `[n × h·dh] → [h × n × dh]`
pub fn split_heads<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    n: usize,
    h: usize,
    dh: usize,
) -> Result<Var> {
    let d = h * dh;
    let mut idx = Vec::with_capacity(n * d);
    for head in 0..h {
        for t in 0..n {
            for j in 0..dh {
                idx.push(t * d + head * dh + j);
            }
        }
    }
    tape.gather(x, idx, &[h, n, dh])
}

/// `[h × n × dh] → [n × h·dh]`
pub fn merge_heads<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    n: usize,
    h: usize,
    dh: usize,
) -> Result<Var> {
    let mut idx = Vec::with_capacity(n * h * dh);
    for t in 0..n {
        for head in 0..h {
            for j in 0..dh {
                idx.push(head * n * dh + t * dh + j);
            }
        }
    }
    tape.gather(x, idx, &[n, h * dh])
}

/// Mean softmax cross-entropy of `[b×c]` logits against class indices.
pub fn cross_entropy<S: Scalar>(tape: &mut Tape<S>, logits: Var, targets: &[usize]) -> Result<Var> {
    let (b, c) = match tape.shape(logits) {
        [b, c] => (*b, *c),
        s => return Err(Error::shape("cross_entropy", s, &[targets.len()])),
    };
    if targets.len() != b || targets.iter().any(|&t| t >= c) {
        return Err(Error::Contract(format!(
            "cross_entropy targets {targets:?} invalid for {b}×{c} logits"
        )));
    }
    let logp = tape.log_softmax(logits)?;
    let idx = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| i * c + t)
        .collect();
    let picked = tape.gather(logp, idx, &[b])?;
    let m = tape.mean(picked)?;
    tape.neg(m)
}
