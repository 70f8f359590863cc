//! Identity-preserving multi-domain face stylisation.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod generator;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
pub use image::ImageTensor;
pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use dataset::{Corpus, Split};
pub use losses::{LossBreakdown, LossWeights};
pub use metrics::{EvalReport, EvalRow};
pub use model::StyleModel;
