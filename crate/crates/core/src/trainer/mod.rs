//! Sequential adaptation: per-step training of one composition with
//! validation-based selection, checkpoints, and the full task sequence.

pub mod checkpoint;
pub mod config;
pub mod prognosis;
pub mod run;
pub mod segmentation;
pub mod sequence;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterComposition;
use crate::error::{Error, Result};

pub use checkpoint::{load_adapters, load_base, save_adapters, save_base, ProbeSet};
pub use config::{parse_config, RunConfig};
pub use prognosis::{
    prognosis_c_index, prognosis_cohort, train_prognosis, PrognosisData, PrognosisTrainConfig,
};
pub use run::{audit_run, evaluate_run, load_run, LoadedRun};
pub use segmentation::{mean_dice, train_segmentation, SegmentationTrainConfig};
pub use sequence::{run_cohorts, run_sequence, Capability, Cohort, SequenceOutcome};

/// One validation point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub steps: usize,
    pub train_loss: f64,
    pub val_metric: f64,
}

/// Result of training one composition.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    /// Arrays as of the best validation epoch.
    pub composition: AdapterComposition,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
}

/// Keeps the composition of the first epoch attaining the highest metric.
pub(crate) struct Selection {
    best: Option<(usize, f64, AdapterComposition)>,
    history: Vec<EpochRecord>,
}

impl Selection {
    pub(crate) fn new() -> Self {
        Self {
            best: None,
            history: Vec::new(),
        }
    }

    pub(crate) fn record(&mut self, rec: EpochRecord, comp: &AdapterComposition) -> Result<()> {
        if !rec.val_metric.is_finite() || !rec.train_loss.is_finite() {
            return Err(Error::Divergence {
                epoch: rec.epoch,
                reason: format!(
                    "train loss {}, validation metric {}",
                    rec.train_loss, rec.val_metric
                ),
            });
        }
        if self.best.as_ref().is_none_or(|b| rec.val_metric > b.1) {
            self.best = Some((rec.epoch, rec.val_metric, comp.clone()));
        }
        self.history.push(rec);
        Ok(())
    }

    pub(crate) fn finish(self) -> Result<StepOutcome> {
        let (best_epoch, best_metric, composition) = self
            .best
            .ok_or_else(|| Error::Config("training budget allows no validation epoch".into()))?;
        Ok(StepOutcome {
            composition,
            history: self.history,
            best_epoch,
            best_metric,
        })
    }
}
