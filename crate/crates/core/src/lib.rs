//! Hybrid channel/temporal attention foundation model for EEG.
//!
//! Sessions are z-normalized and cut into one-second patches; each patch is
//! embedded by a convolutional temporal branch and a log-periodogram spectral
//! branch. A channel encoder compresses every time step to one vector, a
//! temporal encoder mixes time steps behind a task token, and a decoder
//! recovers per-channel patches. Pretraining combines next-step forecasting,
//! temporal and channel masked reconstruction, and task-category
//! classification; finetuning adds per-task classification heads.
//!
//! All arithmetic is `f64`. Gradients come from the reverse-mode tape in
//! [`autograd`].

pub mod attention;
pub mod autograd;
pub mod convfeat;
pub mod eegdata;
pub mod error;
pub mod losses;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod spectral;
pub mod train;

pub use attention::{AdditiveMask, AttentionConfig, Mat};
pub use error::{Error, Result};
pub use masking::{MaskPlan, TaskKind};
pub use metrics::{ConfusionMatrix, MetricReport};
pub use model::{Checkpoint, Model, ModelConfig, TaskSpec, Variant};
pub use train::{FinetuneConfig, PretrainConfig, RunDir};
