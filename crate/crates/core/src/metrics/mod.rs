//! Evaluation metrics, report records and the forgetting audit.

mod audit;
mod report;

pub use audit::{forgetting_audit, AuditReport, ProbeDeviation, ProbeSnapshot};
pub use report::{read_reports, write_reports, EvalReport};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::heads::SurvivalRecord;

/// Harrell's C. Pairs `(i, j)` with `i` an event and `t_i < t_j` are
/// comparable; tied times are excluded; tied risks count one half.
pub fn concordance_index(risks: &[f64], records: &[SurvivalRecord]) -> Result<f64> {
    if risks.len() != records.len() {
        return Err(Error::shape(
            "concordance_index",
            &[risks.len()],
            &[records.len()],
        ));
    }
    if risks.len() < 2 {
        return Err(Error::DegenerateCohort(format!(
            "{} records, need at least 2",
            risks.len()
        )));
    }
    let (mut concordant, mut ties, mut comparable) = (0u64, 0u64, 0u64);
    for (i, ri) in records.iter().enumerate() {
        if !ri.event {
            continue;
        }
        for (j, rj) in records.iter().enumerate() {
            if ri.time < rj.time {
                comparable += 1;
                if risks[i] > risks[j] {
                    concordant += 1;
                } else if risks[i] == risks[j] {
                    ties += 1;
                }
            }
        }
    }
    if comparable == 0 {
        return Err(Error::DegenerateCohort("no comparable pairs".into()));
    }
    Ok((concordant as f64 + 0.5 * ties as f64) / comparable as f64)
}

/// `2|P∩T| / (|P|+|T|)` on binary volumes; two empty volumes score 1.
pub fn dice_score(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape("dice_score", pred.shape(), truth.shape()));
    }
    let (mut inter, mut p, mut t) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(truth.data()) {
        let (a, b) = (a >= 0.5, b >= 0.5);
        inter += (a && b) as usize;
        p += a as usize;
        t += b as usize;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + t) as f64)
}

/// Threshold voxel logits at probability 0.5.
pub fn binarize_logits(logits: &Tensor) -> Tensor {
    logits.map(|v| if v >= 0.0 { 1.0 } else { 0.0 })
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::shape("accuracy", &[pred.len()], &[truth.len()]));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}
