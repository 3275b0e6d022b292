//! Grid-world subjects with exact ground truth.
//!
//! Scenes are small grids holding shape/color subjects. A fixed orthonormal
//! codebook stands in for an image autoencoder, so `decode(render(s)) == s`
//! and presence judgements on decoded outputs are exact.

mod dataset;
mod sample;
mod scene;
pub mod vocab;

pub use dataset::{read_suite, write_suite, SampleRecord, SCHEMA_VERSION};
pub use sample::{
    gen_sample, instruction_tokens, parse_instruction, resolve_instruction, Clause, Sample,
    SubjectRef, SuiteSpec, TaskKind,
};
pub use scene::{
    codebook_dim, codevector, decode, judge_presence, nearest_classes, render, scene_from_classes,
    Cell, Scene, Subject, SubjectQuery,
};

pub const DEFAULT_GRID: (usize, usize) = (6, 6);
