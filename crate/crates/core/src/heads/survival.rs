//! Discrete-time survival heads.
//!
//! Both heads reduce to a distribution `π` over the `K` event bins:
//! DeepHit takes `π = softmax(logits)`; MTLR scores the `K` monotone
//! sequences `y⁽ʲ⁾` (`y_k = 1` iff `k ≥ j`) and takes `π = softmax(Y·score)`.
//! The likelihood terms are then shared: an observed event in bin `b` costs
//! `−log π_b`, a record censored in bin `c` costs `−log Σ_{j>c} π_j`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_in_place, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Floor applied when a censored record leaves no tail mass.
pub const TAIL_EPS: f64 = 1e-12;
pub const MAX_MTLR_BINS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscretizationGrid {
    /// `K + 1` edges: `0 = e_0 < e_1 < … < e_{K−1} < e_K = +∞`.
    edges: Vec<f64>,
}

impl DiscretizationGrid {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 3 {
            return Err(Error::Config(
                "a survival grid needs at least 2 bins".into(),
            ));
        }
        if edges[0] != 0.0 || *edges.last().unwrap() != f64::INFINITY {
            return Err(Error::Config(
                "grid edges must start at 0 and end at +inf".into(),
            ));
        }
        if edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config(format!(
                "grid edges must increase strictly: {edges:?}"
            )));
        }
        Ok(Self { edges })
    }

    /// Interior edges at the `i/K` quantiles of `times`.
    pub fn from_quantiles(times: &[f64], k: usize) -> Result<Self> {
        if k < 2 || times.len() < k {
            return Err(Error::Config(format!(
                "cannot cut {} times into {k} bins",
                times.len()
            )));
        }
        let mut sorted = times.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mut edges = vec![0.0];
        for i in 1..k {
            let pos = i as f64 * (n - 1) as f64 / k as f64;
            let lo = pos.floor() as usize;
            let frac = pos - lo as f64;
            let hi = (lo + 1).min(n - 1);
            edges.push(sorted[lo] * (1.0 - frac) + sorted[hi] * frac);
        }
        edges.push(f64::INFINITY);
        Self::new(edges)
    }

    pub fn num_bins(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn bin(&self, time: f64) -> usize {
        let k = self.num_bins();
        self.edges[1..k].iter().take_while(|&&e| time >= e).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub time: f64,
    /// `true` when the event was observed, `false` when censored.
    pub event: bool,
    pub bin: usize,
}

impl SurvivalRecord {
    pub fn new(time: f64, event: bool, grid: &DiscretizationGrid) -> Result<Self> {
        if !(time > 0.0 && time.is_finite()) {
            return Err(Error::Contract(format!(
                "survival time must be positive, got {time}"
            )));
        }
        Ok(Self {
            time,
            event,
            bin: grid.bin(time),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurvivalModel {
    DeepHit,
    Mtlr,
}

impl SurvivalModel {
    /// Width of the head output for `k` bins.
    pub fn out_dim(self, k: usize) -> usize {
        match self {
            SurvivalModel::DeepHit => k,
            SurvivalModel::Mtlr => k - 1,
        }
    }

    pub fn num_bins(self, out_dim: usize) -> usize {
        match self {
            SurvivalModel::DeepHit => out_dim,
            SurvivalModel::Mtlr => out_dim + 1,
        }
    }
}

/// Hyperparameters of the DeepHit ranking term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeepHitParams {
    pub sigma: f64,
    pub lambda_rank: f64,
}

impl Default for DeepHitParams {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            lambda_rank: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SurvivalLoss {
    pub loss: Var,
    /// Censored records in the last bin whose empty tail was floored.
    pub guarded: usize,
}

/// `[B × (K−1)]` scores to `[B × K]` monotone-sequence scores, `Y·score`.
pub fn mtlr_sequence_scores(tape: &mut Tape, scores: Var) -> Result<Var> {
    let km1 = match tape.shape(scores) {
        [_, k] => *k,
        s => return Err(Error::shape("mtlr", s, &[])),
    };
    let k = km1 + 1;
    if !(2..=MAX_MTLR_BINS).contains(&k) {
        return Err(Error::Config(format!(
            "MTLR supports 2..={MAX_MTLR_BINS} bins, got {k}"
        )));
    }
    let y = Tensor::from_fn(&[km1, k], |i| if i / k >= i % k { 1.0 } else { 0.0 });
    let y = tape.constant(&y)?;
    tape.matmul(scores, y)
}

/// Mean negative log-likelihood of records under `log π` rows.
fn nll(tape: &mut Tape, logp: Var, records: &[SurvivalRecord]) -> Result<(Var, usize)> {
    let (b, k) = match tape.shape(logp) {
        [b, k] => (*b, *k),
        s => return Err(Error::shape("survival nll", s, &[records.len()])),
    };
    if b != records.len() || b == 0 {
        return Err(Error::shape("survival nll", &[b, k], &[records.len()]));
    }
    if let Some(r) = records.iter().find(|r| r.bin >= k) {
        return Err(Error::Contract(format!(
            "record bin {} outside {k} bins",
            r.bin
        )));
    }
    let mut terms = Vec::with_capacity(b);
    let mut guarded = 0;
    for (i, r) in records.iter().enumerate() {
        let t = if r.event {
            tape.gather(logp, vec![i * k + r.bin], &[1])?
        } else if r.bin + 1 < k {
            let tail = tape.gather(
                logp,
                (r.bin + 1..k).map(|j| i * k + j).collect(),
                &[k - r.bin - 1],
            )?;
            tape.logsumexp(tail)?
        } else {
            guarded += 1;
            tape.constant(&Tensor::scalar(TAIL_EPS.ln()))?
        };
        terms.push(t);
    }
    let all = tape.concat(&terms)?;
    let m = tape.mean(all)?;
    Ok((tape.neg(m)?, guarded))
}

/// DeepHit: NLL plus `λ · mean exp(−(F_i(t_i) − F_j(t_i)) / σ)` over pairs
/// with `i` an event and `t_i < t_j`.
pub fn deephit_loss(
    tape: &mut Tape,
    logits: Var,
    records: &[SurvivalRecord],
    params: DeepHitParams,
) -> Result<SurvivalLoss> {
    let k = match tape.shape(logits) {
        [_, k] if *k >= 2 => *k,
        s => return Err(Error::shape("deephit_loss", s, &[2])),
    };
    if !(params.sigma > 0.0) {
        return Err(Error::Config("DeepHit sigma must be positive".into()));
    }
    let logp = tape.log_softmax(logits)?;
    let (nll, guarded) = nll(tape, logp, records)?;

    let mut lhs = Vec::new();
    let mut rhs = Vec::new();
    for (i, ri) in records.iter().enumerate() {
        if !ri.event {
            continue;
        }
        for (j, rj) in records.iter().enumerate() {
            if ri.time < rj.time {
                lhs.push(i * k + ri.bin);
                rhs.push(j * k + ri.bin);
            }
        }
    }
    if lhs.is_empty() || params.lambda_rank == 0.0 {
        return Ok(SurvivalLoss { loss: nll, guarded });
    }
    let p = tape.softmax(logits)?;
    let cdf = tape.cumsum(p)?;
    let n = lhs.len();
    let fi = tape.gather(cdf, lhs, &[n])?;
    let fj = tape.gather(cdf, rhs, &[n])?;
    let diff = tape.sub(fi, fj)?;
    let arg = tape.scale(diff, -1.0 / params.sigma)?;
    let eta = tape.exp(arg)?;
    let rank = tape.mean(eta)?;
    let rank = tape.scale(rank, params.lambda_rank)?;
    Ok(SurvivalLoss {
        loss: tape.add(nll, rank)?,
        guarded,
    })
}

/// MTLR negative log-likelihood by exact enumeration of the `K` monotone
/// sequences.
pub fn mtlr_loss(tape: &mut Tape, scores: Var, records: &[SurvivalRecord]) -> Result<SurvivalLoss> {
    let seq = mtlr_sequence_scores(tape, scores)?;
    let logp = tape.log_softmax(seq)?;
    let (loss, guarded) = nll(tape, logp, records)?;
    Ok(SurvivalLoss { loss, guarded })
}

pub fn survival_loss(
    tape: &mut Tape,
    model: SurvivalModel,
    out: Var,
    records: &[SurvivalRecord],
    params: DeepHitParams,
) -> Result<SurvivalLoss> {
    match model {
        SurvivalModel::DeepHit => deephit_loss(tape, out, records, params),
        SurvivalModel::Mtlr => mtlr_loss(tape, out, records),
    }
}

/// Event-bin distribution `π` for one head output row.
pub fn event_distribution(model: SurvivalModel, out: &[f64]) -> Vec<f64> {
    let mut z = match model {
        SurvivalModel::DeepHit => out.to_vec(),
        SurvivalModel::Mtlr => {
            let k = out.len() + 1;
            (0..k).map(|j| out[j..].iter().sum()).collect()
        }
    };
    softmax_in_place(&mut z);
    z
}

/// `S(k) = Σ_{j>k} π_j`, non-increasing, ending at 0.
pub fn survival_curve(model: SurvivalModel, out: &[f64]) -> Vec<f64> {
    let pi = event_distribution(model, out);
    let k = pi.len();
    let mut s = vec![0.0; k];
    let mut tail: f64 = 0.0;
    for j in (0..k).rev() {
        s[j] = tail.clamp(0.0, 1.0);
        tail += pi[j];
    }
    s
}

/// Negative expected survival mass, `−Σ_k S(k)`; larger means riskier.
pub fn risk_score(model: SurvivalModel, out: &[f64]) -> f64 {
    -survival_curve(model, out).iter().sum::<f64>()
}
