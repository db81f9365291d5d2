//! Few-shot joint intent detection and slot filling.
//!
//! Intents and slot tags are scored by similarity to prototypes built from
//! an episode's support set, then decoded jointly by a CRF whose
//! transition weights are shared across label sets through abstract
//! categories (`O-O`, `B-sB`, `Z-O`, ...), so they transfer to domains
//! never seen in training.

pub mod cli;
pub mod crf;
pub mod data;
pub mod encoder;
pub mod math;
pub mod metrics;
pub mod model;
pub mod prototypes;
pub mod similarity;
pub mod synthetic;
pub mod trainer;

#[cfg(test)]
mod testutil;

pub use crf::{CategoryMap, EmissionMatrix, JointDecode, TransitionTable};
pub use data::{Episode, LabelVocabulary, Sample, SlotTag};
pub use encoder::{EncodedSentence, Encoder, StaticFileEncoder, ToyEncoder};
pub use metrics::{EvalReport, Scores};
pub use model::{load_model, save_model, Ablation, ModelState, OptimizerKind, TrainConfig};
pub use similarity::SimilarityKind;
pub use trainer::{episode_loss, train};
