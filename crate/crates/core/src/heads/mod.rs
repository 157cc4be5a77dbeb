//! Task losses: discrete-time survival and voxel segmentation.

pub mod segmentation;
pub mod survival;

pub use segmentation::{dice_ce_loss, DiceCeWeights, DICE_SMOOTH};
pub use survival::{
    deephit_loss, event_distribution, mtlr_loss, mtlr_sequence_scores, risk_score, survival_curve,
    survival_loss, DeepHitParams, DiscretizationGrid, SurvivalLoss, SurvivalModel, SurvivalRecord,
    MAX_MTLR_BINS, TAIL_EPS,
};
