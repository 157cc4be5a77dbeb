//! The frozen dual-encoder base model.

mod classify;
pub mod config;
pub mod model;
pub mod patch;
pub mod pretrain;
pub mod tokenizer;

pub use classify::{classify_similarity, Classification};
pub use config::{num_patches, FoundationConfig, TextEncoderConfig, VisionEncoderConfig};
pub use model::{
    embed_volume, EmbedHook, Encoded, EncodedValue, EncoderHooks, FrozenFoundation, LoraHook,
};
pub use patch::{patch_index_map, patchify, unpatch_index_map, unpatchify};
pub use pretrain::{
    chest_corpus, chest_params, contrastive_loss, pretrain_base, validation_accuracy,
    PretrainConfig, PretrainReport, PretrainSample,
};
pub use tokenizer::{trim_padding, Tokenizer, OOV_ID, PAD_ID, REPORT_VOCABULARY};
