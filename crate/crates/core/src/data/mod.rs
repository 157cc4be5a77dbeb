//! Deterministic synthetic cohorts and the preprocessing pipeline.

pub mod dataset;
pub mod generate;
pub mod preprocess;

pub use dataset::{
    case_from_container, case_to_container, read_dataset, spec_text, write_dataset, CaseDescriptor,
};
pub use generate::{
    case_rng, diameter_mm, generate_case, generate_cohort, size_word, split_folds, uptake_word,
    GenParams, Lesion, Region, SyntheticCase, NEGATIVE_PROMPT, POSITIVE_PROMPT,
};
pub use preprocess::{
    preprocess_ct, preprocess_pet, resample_mask, resample_volume, PreprocessSpec, HU_CLIP, PET_EPS,
};
