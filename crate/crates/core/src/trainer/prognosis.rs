use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterComposition;
use crate::autodiff::{Tape, Tensor};
use crate::data::{preprocess_ct, resample_volume, PreprocessSpec, SyntheticCase};
use crate::error::{Error, Result};
use crate::foundation::FrozenFoundation;
use crate::heads::{
    risk_score, survival_loss, DeepHitParams, DiscretizationGrid, SurvivalModel, SurvivalRecord,
};
use crate::metrics::concordance_index;
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig};
use crate::params::Binder;
use crate::tasks::{image_features, prognosis_forward, report_tokenizer, PrognosisInputs, HEAD};

use super::{EpochRecord, Selection, StepOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrognosisTrainConfig {
    pub optim: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub inputs: PrognosisInputs,
    pub model: SurvivalModel,
    pub deephit: DeepHitParams,
}

impl Default for PrognosisTrainConfig {
    fn default() -> Self {
        Self {
            optim: AdamWConfig::new(3e-4, 1e-5),
            epochs: 50,
            batch_size: 16,
            clip_norm: 1.0,
            inputs: PrognosisInputs::ImageText,
            model: SurvivalModel::DeepHit,
            deephit: DeepHitParams::default(),
        }
    }
}

/// Frozen image features, report ids, labels and folds of a cohort.
#[derive(Clone, Debug, PartialEq)]
pub struct PrognosisData {
    /// `[N × s]` frozen pooled CT features.
    pub images: Tensor,
    pub texts: Vec<Vec<usize>>,
    pub times: Vec<f64>,
    pub events: Vec<bool>,
    pub folds: Vec<usize>,
}

impl PrognosisData {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn rows(&self, idx: &[usize]) -> Result<Tensor> {
        let s = self.images.shape()[1];
        let mut data = Vec::with_capacity(idx.len() * s);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * s..(i + 1) * s]);
        }
        Tensor::new(&[idx.len(), s], data)
    }

    /// Pairs every feature row with the outcome of another case.
    pub fn with_shuffled_labels<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        let mut perm: Vec<usize> = (0..self.len()).collect();
        perm.shuffle(rng);
        Self {
            times: perm.iter().map(|&i| self.times[i]).collect(),
            events: perm.iter().map(|&i| self.events[i]).collect(),
            ..self.clone()
        }
    }
}

pub fn prognosis_cohort(
    model: &FrozenFoundation,
    cases: &[SyntheticCase],
    folds: Vec<usize>,
) -> Result<PrognosisData> {
    if folds.len() != cases.len() {
        return Err(Error::shape(
            "prognosis_cohort",
            &[folds.len()],
            &[cases.len()],
        ));
    }
    let tok = report_tokenizer(model)?;
    let spec = PreprocessSpec {
        target_resolution: model.config().vision.volume_shape,
        ..Default::default()
    };
    let vols = cases
        .iter()
        .map(|c| {
            Ok(preprocess_ct(
                &resample_volume(&c.ct, spec.target_resolution)?,
                &spec,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = vols.iter().collect();
    Ok(PrognosisData {
        images: image_features(model, &refs)?,
        texts: cases.iter().map(|c| tok.encode_padded(&c.report)).collect(),
        times: cases.iter().map(|c| c.time).collect(),
        events: cases.iter().map(|c| c.event).collect(),
        folds,
    })
}

/// Head outputs for the given cases, one row each.
fn predict(
    model: &FrozenFoundation,
    comp: &AdapterComposition,
    data: &PrognosisData,
    idx: &[usize],
    inputs: PrognosisInputs,
) -> Result<Tensor> {
    let images = inputs.image().then(|| data.rows(idx)).transpose()?;
    let texts: Vec<Vec<usize>> = idx.iter().map(|&i| data.texts[i].clone()).collect();
    let mut tape = Tape::new();
    let y = prognosis_forward(
        &mut tape,
        &mut Binder::frozen(),
        &mut Binder::frozen(),
        model,
        comp,
        images.as_ref(),
        inputs.text().then_some(&texts[..]),
    )?;
    Ok(tape.value(y).clone())
}

/// Validation C-index of a composition on the given cases.
pub fn prognosis_c_index(
    model: &FrozenFoundation,
    comp: &AdapterComposition,
    data: &PrognosisData,
    idx: &[usize],
    cfg: &PrognosisTrainConfig,
) -> Result<f64> {
    let out = predict(model, comp, data, idx, cfg.inputs)?;
    let k = out.shape()[1];
    let risks: Vec<f64> = out
        .data()
        .chunks(k)
        .map(|row| risk_score(cfg.model, row))
        .collect();
    let records: Vec<SurvivalRecord> = idx
        .iter()
        .map(|&i| SurvivalRecord {
            time: data.times[i],
            event: data.events[i],
            bin: 0,
        })
        .collect();
    concordance_index(&risks, &records)
}

/// Trains on every fold except `val_fold` and selects the epoch with the
/// highest validation C-index.
pub fn train_prognosis<R: Rng + ?Sized>(
    model: &FrozenFoundation,
    mut comp: AdapterComposition,
    data: &PrognosisData,
    val_fold: usize,
    cfg: &PrognosisTrainConfig,
    rng: &mut R,
) -> Result<StepOutcome> {
    comp.validate(model)?;
    let (train, val): (Vec<usize>, Vec<usize>) =
        (0..data.len()).partition(|&i| data.folds[i] != val_fold);
    if train.is_empty() || val.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Config(format!(
            "fold {val_fold} leaves {} training and {} validation cases",
            train.len(),
            val.len()
        )));
    }
    let out_dim = comp.mlp(HEAD)?.out_dim();
    let bins = cfg.model.num_bins(out_dim);
    let train_times: Vec<f64> = train.iter().map(|&i| data.times[i]).collect();
    let grid = DiscretizationGrid::from_quantiles(&train_times, bins)?;
    let records = (0..data.len())
        .map(|i| SurvivalRecord::new(data.times[i], data.events[i], &grid))
        .collect::<Result<Vec<_>>>()?;

    let mut opt = AdamW::new(cfg.optim, &comp);
    let mut sel = Selection::new();
    let mut order = train.clone();
    let mut steps = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        let (mut total, mut batches) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let images = cfg.inputs.image().then(|| data.rows(chunk)).transpose()?;
            let texts: Vec<Vec<usize>> = chunk.iter().map(|&i| data.texts[i].clone()).collect();
            let recs: Vec<SurvivalRecord> = chunk.iter().map(|&i| records[i]).collect();
            let mut tape = Tape::new();
            let mut base = Binder::frozen();
            let mut adapters = Binder::trainable();
            let out = prognosis_forward(
                &mut tape,
                &mut base,
                &mut adapters,
                model,
                &comp,
                images.as_ref(),
                cfg.inputs.text().then_some(&texts[..]),
            )?;
            let loss = survival_loss(&mut tape, cfg.model, out, &recs, cfg.deephit)?.loss;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    reason: format!("survival loss {value}"),
                });
            }
            tape.backward(loss)?;
            let mut grads = adapters.grads(&tape);
            clip_grad_norm(&mut grads, cfg.clip_norm);
            opt.step(&mut comp, &grads)?;
            total += value;
            batches += 1;
            steps += 1;
        }
        let val_metric = prognosis_c_index(model, &comp, data, &val, cfg)?;
        log::debug!(
            "prognosis epoch {epoch}: loss {:.4}, c-index {val_metric:.4}",
            total / batches as f64
        );
        sel.record(
            EpochRecord {
                epoch,
                steps,
                train_loss: total / batches as f64,
                val_metric,
            },
            &comp,
        )?;
    }
    sel.finish()
}
