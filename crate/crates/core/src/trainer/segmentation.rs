use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterComposition, Modality};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::foundation::FrozenFoundation;
use crate::heads::{dice_ce_loss, DiceCeWeights};
use crate::metrics::{binarize_logits, dice_score};
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig};
use crate::params::Binder;
use crate::tasks::{route_output, segmentation_forward, CaseInput};

use super::{EpochRecord, Selection, StepOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationTrainConfig {
    pub optim: AdamWConfig,
    /// Optimizer-step budget at batch size 1.
    pub steps: usize,
    pub clip_norm: f64,
    pub dice_weight: f64,
    pub ce_weight: f64,
}

impl Default for SegmentationTrainConfig {
    fn default() -> Self {
        Self {
            optim: AdamWConfig::new(1e-3, 1e-5),
            steps: 2000,
            clip_norm: 1.0,
            dice_weight: 1.0,
            ce_weight: 1.0,
        }
    }
}

/// Mean binarized Dice of a composition over cases.
pub fn mean_dice(
    model: &FrozenFoundation,
    comp: &AdapterComposition,
    cases: &[CaseInput],
) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::Contract("no validation cases".into()));
    }
    let mut total = 0.0;
    for c in cases {
        let logits = route_output(model, comp, c, &[])?;
        total += dice_score(&binarize_logits(&logits), &c.mask)?;
    }
    Ok(total / cases.len() as f64)
}

/// Batch-size-1 training with one validation per pass over the training
/// cases (the last pass may be partial).
pub fn train_segmentation<R: Rng + ?Sized>(
    model: &FrozenFoundation,
    mut comp: AdapterComposition,
    train: &[CaseInput],
    val: &[CaseInput],
    cfg: &SegmentationTrainConfig,
    rng: &mut R,
) -> Result<StepOutcome> {
    if train.is_empty() {
        return Err(Error::Contract("no training cases".into()));
    }
    comp.validate(model)?;
    let weights = DiceCeWeights {
        dice: cfg.dice_weight,
        ce: cfg.ce_weight,
    };
    let use_pet = comp.key.modalities.contains(Modality::Pet);
    let mut opt = AdamW::new(cfg.optim, &comp);
    let mut sel = Selection::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let (mut steps, mut epoch) = (0, 0);
    while steps < cfg.steps {
        epoch += 1;
        order.shuffle(rng);
        let mut total = 0.0;
        let mut n = 0;
        for &i in order.iter().take(cfg.steps - steps) {
            let case = &train[i];
            let mut tape = Tape::new();
            let mut base = Binder::frozen();
            let mut adapters = Binder::trainable();
            let pet = use_pet.then_some(&case.pet);
            let logits = segmentation_forward(
                &mut tape,
                &mut base,
                &mut adapters,
                model,
                &comp,
                &case.ct,
                pet,
            )?;
            let loss = dice_ce_loss(&mut tape, logits, &case.mask, weights)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    reason: format!("segmentation loss {value} at step {}", steps + 1),
                });
            }
            tape.backward(loss)?;
            let mut grads = adapters.grads(&tape);
            clip_grad_norm(&mut grads, cfg.clip_norm);
            opt.step(&mut comp, &grads)?;
            total += value;
            n += 1;
            steps += 1;
        }
        let val_metric = mean_dice(model, &comp, val)?;
        log::info!(
            "{} epoch {epoch} ({steps} steps): loss {:.4}, dice {val_metric:.4}",
            comp.key,
            total / n as f64
        );
        sel.record(
            EpochRecord {
                epoch,
                steps,
                train_loss: total / n as f64,
                val_metric,
            },
            &comp,
        )?;
    }
    sel.finish()
}
