//! Cross-modal contrastive training with continuously weighted targets.
//!
//! A trainable encoder for one modality is aligned with a frozen teacher in
//! the other. The weighted loss treats every pair in the batch as a partial
//! positive, scored by the teacher's own similarity between the two samples,
//! instead of treating only the paired sample as positive.

pub mod data;
pub mod encoders;
pub mod error;
pub mod losses;
pub mod numerics;
pub mod optim;
pub mod weights;
pub mod zeroshot;

pub use data::{generate, PairedDataset, SyntheticSpec};
pub use encoders::{EncoderConfig, EncoderStack, LockMode};
pub use error::{CwclError, Result};
pub use losses::{LossOutput, Temperature};
pub use numerics::{Matrix, Rng};
pub use optim::{train, LossKind, TrainConfig};
pub use weights::{SimilarityWeights, WeightKind};
