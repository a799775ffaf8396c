//! Continual-learning engine for toy multi-site segmentation streams.
//!
//! A small fully-connected segmentation network is trained on a sequence of
//! synthetic "sites" (each site applies its own intensity shift to generated
//! ellipse images). Between rounds a replay buffer keeps a few exemplar
//! subjects per previous site, and the training objective can align the
//! gradients of the incoming site with those of the buffer so that learning
//! the new site neither erases the old ones (memorizability) nor drifts away
//! from unseen protocols (generalizability).
//!
//! Module map:
//! - [`model`]: the network, exact gradients, checkpoints
//! - [`sitegen`]: synthetic site generator, splits, dataset files
//! - [`objectives`]: minibatch quads, joint-minimization and alignment values
//! - [`dualmeta`]: first-order meta approximation of the aligned objective,
//!   the direct second-order route it is checked against, and the per-round
//!   training loop
//! - [`replay`]: exemplar scoring and buffer maintenance
//! - [`metrics`]: Dice / surface-distance scoring and the accuracy matrix
//! - [`harness`]: run orchestration, access tracing, reports

pub mod dualmeta;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod replay;
pub mod sitegen;

pub use error::{EngineError, Result};
pub use harness::{Method, RunConfig, RunManifest};
pub use metrics::AccuracyMatrix;
pub use model::{FeatureVector, Network, ParamVector, Subject};
pub use replay::ReplayBuffer;
pub use sitegen::{SiteDataset, SiteSpec};
