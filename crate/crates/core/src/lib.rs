//! Spoofing-robust automatic speaker verification (SR-ASV) at desk scale.
//!
//! The crate covers the whole tandem system:
//!
//! - [`feat`]: WAV input and the two time-frequency front-ends (constant-Q
//!   transform and log linear-filterbank), unified to fixed-shape matrices.
//! - [`net`]: the multi-task residual network with Max-Feature-Map
//!   activations, including the hand-written gradient pass.
//! - [`loss`]: angular-margin softmax for both task heads and the joint
//!   regularized objective.
//! - [`train`]: Adam, the mini-batch training loop, checkpoint selection.
//! - [`backend`]: embedding extraction, two-covariance PLDA, adaptive s-norm.
//! - [`metrics`]: EER, DET curves, and the tandem detection cost function.
//! - [`fusion`]: linear logistic-regression score fusion.
//! - [`proto`]: protocol/score-file I/O and the synthetic corpus generator.
//! - [`pipeline`]: end-to-end orchestration shared by the CLI and tests.
//!
//! Everything is CPU-only, deterministic under fixed seeds, and exchanges
//! data through small binary container files (see [`blob`]).

pub mod backend;
pub mod blob;
pub mod feat;
pub mod fusion;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod proto;
pub mod train;

pub use backend::{Cohort, Embedding, PldaModel};
pub use feat::{CqtParams, FeatureKind, LlfbParams, UnifiedFeature, Waveform};
pub use loss::LossConfig;
pub use metrics::{AsvKey, AsvOperatingPoint, ScoreSet, SdKey, TdcfParams};
pub use net::{MtlNetwork, NetConfig};
pub use proto::{AsvTrialEntry, CmProtocolEntry, SynthCorpusSpec};
pub use train::TrainConfig;
