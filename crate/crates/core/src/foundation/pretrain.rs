//! Contrastive pre-training of the base model on the chest corpus.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{generate_cohort, preprocess_ct, GenParams, PreprocessSpec};
use crate::error::{Error, Result};
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig};
use crate::params::Binder;
use crate::tasks::{class_prompt_ids, classify, report_tokenizer, stack_rows};

use super::model::{EncoderHooks, FrozenFoundation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub corpus_size: usize,
    pub val_fraction: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub target_accuracy: f64,
    pub seed: u64,
    /// Pairs every image with the caption and label of a random other case.
    pub shuffle_labels: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            corpus_size: 200,
            val_fraction: 0.2,
            max_epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            target_accuracy: 0.9,
            seed: 0,
            shuffle_labels: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSample {
    /// Preprocessed CT at the base resolution.
    pub image: Tensor,
    pub text: Vec<usize>,
    /// 1 when a lesion is present.
    pub label: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub train_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
}

/// Chest generation parameters sized to the base resolution.
pub fn chest_params(shape: [usize; 3]) -> GenParams {
    let mut p = GenParams::chest();
    p.shape = shape;
    let half = *shape.iter().min().unwrap_or(&0) as f64 / 2.0;
    p.radius_max = p.radius_max.min(half - 1.0);
    p.radius_min = p.radius_min.min(p.radius_max / 2.0);
    p
}

/// Train and validation samples of the chest corpus.
pub fn chest_corpus(
    model: &FrozenFoundation,
    cfg: &PretrainConfig,
) -> Result<(Vec<PretrainSample>, Vec<PretrainSample>)> {
    let shape = model.config().vision.volume_shape;
    let cases = generate_cohort(cfg.seed, cfg.corpus_size, &chest_params(shape))?;
    let tok = report_tokenizer(model)?;
    let spec = PreprocessSpec {
        target_resolution: shape,
        ..Default::default()
    };
    let mut pairs: Vec<(Vec<usize>, usize)> = cases
        .iter()
        .map(|c| (tok.encode_padded(&c.report), c.class_label as usize))
        .collect();
    if cfg.shuffle_labels {
        pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed));
    }
    let mut samples: Vec<PretrainSample> = cases
        .iter()
        .zip(pairs)
        .map(|(c, (text, label))| PretrainSample {
            image: preprocess_ct(&c.ct, &spec),
            text,
            label,
        })
        .collect();
    let n_val = ((cfg.corpus_size as f64 * cfg.val_fraction).round() as usize)
        .clamp(1, cfg.corpus_size.saturating_sub(1));
    let val = samples.split_off(cfg.corpus_size - n_val);
    Ok((samples, val))
}

/// Soft targets over in-batch captions: identical captions share the
/// target mass of a row uniformly.
fn soft_targets(texts: &[&[usize]]) -> Tensor {
    let b = texts.len();
    let mut t = Tensor::zeros(&[b, b]);
    for i in 0..b {
        let same: Vec<usize> = (0..b).filter(|&j| texts[j] == texts[i]).collect();
        for &j in &same {
            t.data_mut()[i * b + j] = 1.0 / same.len() as f64;
        }
    }
    t
}

/// `−Σ targets ⊙ log_softmax(logits) / rows`, rows over the last axis.
fn soft_cross_entropy(tape: &mut Tape, logits: Var, targets: Var) -> Result<Var> {
    let rows = tape.shape(logits)[0] as f64;
    let lp = tape.log_softmax(logits)?;
    let prod = tape.mul(lp, targets)?;
    let s = tape.sum(prod)?;
    tape.scale(s, -1.0 / rows)
}

/// Symmetric image/text contrastive loss of one batch on a tape whose
/// base binder is trainable.
pub fn contrastive_loss(
    tape: &mut Tape,
    base: &mut Binder,
    model: &FrozenFoundation,
    batch: &[&PretrainSample],
) -> Result<Var> {
    let hooks = EncoderHooks::default();
    let mut img = Vec::with_capacity(batch.len());
    let mut txt = Vec::with_capacity(batch.len());
    for s in batch {
        img.push(model.encode_image_on(tape, base, &s.image, &hooks)?.pooled);
        txt.push(model.encode_text_on(tape, base, &s.text, &hooks)?.pooled);
    }
    let i = stack_rows(tape, &img)?;
    let t = stack_rows(tape, &txt)?;
    let tt = tape.transpose(t)?;
    let sim = tape.matmul(i, tt)?;
    let logits = tape.scale(sim, 1.0 / model.config().temperature)?;
    let texts: Vec<&[usize]> = batch.iter().map(|s| s.text.as_slice()).collect();
    let target = tape.constant(&soft_targets(&texts))?;
    let a = soft_cross_entropy(tape, logits, target)?;
    let lt = tape.transpose(logits)?;
    let b = soft_cross_entropy(tape, lt, target)?;
    let sum = tape.add(a, b)?;
    tape.scale(sum, 0.5)
}

/// Zero-shot accuracy against the class prompts.
pub fn validation_accuracy(model: &FrozenFoundation, val: &[PretrainSample]) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Contract("empty validation set".into()));
    }
    let prompts = class_prompt_ids(&report_tokenizer(model)?);
    let mut hits = 0;
    for s in val {
        hits += (classify(model, &s.image, &prompts)?.label == s.label) as usize;
    }
    Ok(hits as f64 / val.len() as f64)
}

/// Trains until the validation accuracy reaches the target, then freezes.
pub fn pretrain_base(
    mut model: FrozenFoundation,
    train: &[PretrainSample],
    val: &[PretrainSample],
    cfg: &PretrainConfig,
) -> Result<(FrozenFoundation, PretrainReport)> {
    if model.is_frozen() {
        return Err(Error::Ownership("cannot pre-train a frozen model".into()));
    }
    if train.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Config(
            "pre-training needs samples and a positive batch size".into(),
        ));
    }
    let mut opt = AdamW::new(AdamWConfig::new(cfg.lr, cfg.weight_decay), model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = PretrainReport::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut accuracy = f64::NAN;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PretrainSample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let mut base = Binder::trainable();
            let loss = contrastive_loss(&mut tape, &mut base, &model, &batch)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    reason: format!("contrastive loss {value}"),
                });
            }
            tape.backward(loss)?;
            let mut grads = base.grads(&tape);
            clip_grad_norm(&mut grads, cfg.clip_norm);
            opt.step(model.params_mut()?, &grads)?;
            total += value;
            batches += 1;
        }
        report.train_loss.push(total / batches as f64);
        accuracy = validation_accuracy(&model, val)?;
        report.val_accuracy.push(accuracy);
        log::info!(
            "pretrain epoch {epoch}: loss {:.4}, val accuracy {accuracy:.3}",
            total / batches as f64
        );
        if accuracy >= cfg.target_accuracy {
            model.freeze();
            return Ok((model, report));
        }
    }
    Err(Error::TrainingFailure {
        reason: format!(
            "validation accuracy below {} after {} epochs",
            cfg.target_accuracy, cfg.max_epochs
        ),
        accuracy,
    })
}
