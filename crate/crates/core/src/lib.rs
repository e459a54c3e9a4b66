//! Memory-augmented relation network for few-shot classification.
//!
//! Embeddings of an episode are written into a per-episode memory, enhanced
//! by attention-weighted aggregation over a k-nearest-neighbor relation
//! graph, and classified against class centroids under a learned distance.

mod binio;
pub mod classifier;
pub mod encoder;
pub mod engine;
pub mod episodes;
pub mod error;
pub mod memory;
pub mod network;
pub mod numerics;
pub mod relation;

pub use classifier::CentroidSet;
pub use encoder::{EncoderConfig, EncoderKind};
pub use engine::{AblationRow, EvalReport, RunConfig, Sweep, TrainOutcome, Variant};
pub use episodes::{Dataset, Episode, EpisodeSpec, Item, Split, SynthSpec};
pub use error::{Error, Result};
pub use memory::{
    EpisodicMemory, MemoryMode, PropagationConfig, Provenance, RelationGraph, Strategy,
};
pub use network::{Forward, Mode};
pub use numerics::{AdamState, ParamStore, Tape, Tensor, Var};
pub use relation::{MetricKind, RelationConfig, RelationOutput};
