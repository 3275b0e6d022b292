//! Two-expert transformer with shared joint attention.
//!
//! Text and encoder-style visual tokens run through the understanding expert;
//! reference latents and the noisy target run through the generation expert.
//! Every layer attends over the whole sequence, except that context tokens do
//! not look at the target, so their states are independent of the flow time.

mod checkpoint;
mod config;
mod forward;
mod generate;
mod stream;
mod weights;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, CheckpointHeader,
    ManifestEntry, MAGIC, VERSION,
};
pub use config::{MaskScope, ModelConfig};
pub use forward::{
    embed_scene_gen, embed_scene_und, embed_target, embed_text, forward, forward_with,
    sample_streams, time_features, ForwardOptions, ForwardOutput, LayerActivations, MaskMode,
    RowInfo, SequenceLayout,
};
pub(crate) use forward::sample_graph;
pub use generate::{gaussian_latents, sample_generate, sample_generate_full, Generation, MaskPolicy};
pub use stream::{Expert, Modality, StreamMeta, TokenStream};
pub use weights::{all_groups, ExpertBlock, GroupSet, Layout, Param, ParamGroup, ParamNodes, Weights};
