//! Iterative magnitude pruning meets network dissection, at desk scale.
//!
//! This crate implements a self-contained experimental pipeline that measures
//! how the *interpretability* of a small convolutional network — the number of
//! units whose activations line up with human-labeled visual concepts — evolves
//! as the network is iteratively pruned and retrained:
//!
//! 1. [`concept_data`] generates and loads densely-labeled concept datasets: a
//!    directory of images plus per-category label maps assigning a concept to
//!    every pixel (colors, object shapes, textures).
//! 2. [`model`] defines a small residual CNN with a deterministic, pure-Rust
//!    forward/backward implementation and named-tensor parameter storage.
//! 3. [`trainer`] trains the model with SGD + momentum under a step learning
//!    rate schedule, writing bit-exact per-epoch checkpoints.
//! 4. [`pruner`] removes the smallest-magnitude weights round by round, rewinds
//!    survivors to an early checkpoint, and replays training under the mask.
//! 5. [`dissector`] profiles per-unit activation thresholds, segments each
//!    unit's top activations, and scores units against concept label maps with
//!    a dataset-aggregated intersection-over-union.
//! 6. [`metrics`] summarizes dissection reports, compares pruned networks with
//!    their dense parent, and renders the result curves as CSV + SVG.
//! 7. [`orchestrator`] ties the stages together behind a TOML experiment
//!    config with content-addressed stage caching and resumable runs.
//!
//! Everything is deterministic: the same config and seed produce byte-identical
//! artifacts, down to checkpoint files and rendered plots. All randomness flows
//! through explicitly-seeded ChaCha8 generators, floating point reductions use
//! fixed orders, and no output ever embeds a timestamp or hash-map iteration
//! order.

pub mod concept_data;
pub mod dissector;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod pruner;
pub mod tensor;
pub mod trainer;
pub mod util;

pub use concept_data::{ConceptDataset, ConceptIndex, LabeledImage};
pub use dissector::{DissectionConfig, DissectionReport, UnitDissection};
pub use metrics::{ConsistencyReport, InterpretabilitySummary};
pub use model::{Model, ModelSpec};
pub use orchestrator::{load_config, run_experiment, ExperimentConfig, OrchestratorError, RunOptions, RunOutcome};
pub use pruner::{PruneConfig, PruneScope, PruningMask};
pub use tensor::{NamedTensor, NamedTensorSet, TensorKind};
pub use trainer::{CheckpointSeries, Snapshot, TrainingSchedule};
