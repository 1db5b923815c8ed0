//! Episode-level protocol: dataset loading, domain-generalization
//! episode sampling, joint meta-training, evaluation metrics, and the
//! prototypical-network reference baseline.
//!
//! The protocol keeps a hard wall between source and target
//! deployments: training episodes simulate domain shift by rotating a
//! pseudo-target among the source deployments, and the held-out target
//! contributes queries only at evaluation time — never to parameter
//! updates or normalizer fitting.

mod dataset;
mod metrics;
mod sampler;
mod train;

pub use dataset::{Dataset, EmbeddingCache, LoadOptions, LoadedSample};
pub use metrics::{report_from, ConfusionMatrix, MetricsReport};
pub use sampler::{eligible_classes, sample_episode, EpisodeSpec, SampledEpisode};
pub use train::{evaluate, evaluate_with_workers, meta_train, Protocol, TrainRecord};
