//! Adaptation modules and the routing registry.
//!
//! Within-model adaptation is LoRA on frozen projections; post-model
//! adaptation is MLP, fusion and decoder modules; resolution adaptation swaps
//! in trainable patch and positional embeddings. Each routing key owns one
//! composition of these modules.

pub mod decoder;
pub mod fusion;
pub mod lora;
pub mod mlp;
pub mod reembed;
pub mod registry;
pub mod routing;

pub use decoder::{decode_segmentation, DecoderAdapter};
pub use fusion::{fusion_forward, FusionAdapter, ProjectionInit};
pub use lora::{
    check_rank, lora_forward, make_lora_modules, qv_targets, LoraModule, LORA_INIT_STD,
};
pub use mlp::MlpAdapter;
pub use reembed::ResolutionReembed;
pub use registry::{
    adapters_from_container, adapters_to_container, AdapterComposition, AdapterModule,
    AdapterRegistry, ModuleSpec,
};
pub use routing::{Modality, ModalitySet, RoutingKey, Task};
