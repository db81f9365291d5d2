//! Model state, training configuration, checkpoints, and inference.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crf::{viterbi_joint, CategoryMap, EmissionMatrix, TransitionTable};
use crate::data::{build_vocabulary, cooccurrence_matrix, Episode, LabelVocabulary, SlotTag};
use crate::encoder::{
    load_static_embeddings, EncodedSentence, Encoder, EncoderError, StaticFileEncoder, ToyEncoder,
};
use crate::metrics::{Annotation, EvalReport, MetricsError};
use crate::prototypes::{prototypes_from_encoded, PrototypeError, PrototypeSet};
use crate::similarity::{sim, SimilarityError, SimilarityKind};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("checkpoint {path} was written by schema version {found}; this build reads version {supported}")]
    VersionMismatch {
        path: String,
        found: u64,
        supported: u32,
    },
    #[error("corrupt checkpoint {path}: {message}")]
    CorruptFile { path: String, message: String },
    #[error("model uses precomputed embeddings; pass an embedding sidecar")]
    MissingEmbeddings,
    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Prototype(#[from] PrototypeError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("config is not a JSON object: {0}")]
    Syntax(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: {message}")]
    BadValue { key: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Slot-slot and intent-slot transitions both learned.
    Full,
    /// Intent-slot weights frozen at 0; the intent decouples from the chain.
    NoIntentSlot,
    /// All transitions frozen at 0; every position is decided on its own.
    NoCrf,
}

impl Ablation {
    /// Which of the 18 flat transition weights may be updated.
    pub fn trainable_transitions(self) -> [bool; crate::crf::N_TRANSITIONS] {
        let mut mask = [true; crate::crf::N_TRANSITIONS];
        match self {
            Ablation::Full => {}
            Ablation::NoIntentSlot => mask[crate::crf::N_SS..].fill(false),
            Ablation::NoCrf => mask.fill(false),
        }
        mask
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub similarity: SimilarityKind,
    pub lr_encoder: f64,
    pub lr_crf: f64,
    pub epochs: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub optimizer: OptimizerKind,
    /// Toy encoder width.
    pub dim: usize,
    /// Toy encoder context radius.
    pub window: usize,
    /// Train on frozen embeddings from this sidecar instead of the toy encoder.
    pub embeddings: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            similarity: SimilarityKind::Vpb,
            lr_encoder: 1e-3,
            lr_crf: 5e-3,
            epochs: 10,
            seed: 0,
            ablation: Ablation::Full,
            optimizer: OptimizerKind::Adam,
            dim: 32,
            window: 1,
            embeddings: None,
        }
    }
}

fn field<T: DeserializeOwned>(key: &str, value: serde_json::Value) -> Result<T, ConfigError> {
    serde_json::from_value(value).map_err(|e| ConfigError::BadValue {
        key: key.to_string(),
        message: e.to_string(),
    })
}

impl TrainConfig {
    /// Parses a JSON object whose keys are field names; missing keys keep
    /// their defaults.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let map: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let mut cfg = TrainConfig::default();
        for (key, value) in map {
            match key.as_str() {
                "similarity" => cfg.similarity = field(&key, value)?,
                "lr_encoder" => cfg.lr_encoder = field(&key, value)?,
                "lr_crf" => cfg.lr_crf = field(&key, value)?,
                "epochs" => cfg.epochs = field(&key, value)?,
                "seed" => cfg.seed = field(&key, value)?,
                "ablation" => cfg.ablation = field(&key, value)?,
                "optimizer" => cfg.optimizer = field(&key, value)?,
                "dim" => cfg.dim = field(&key, value)?,
                "window" => cfg.window = field(&key, value)?,
                "embeddings" => cfg.embeddings = field(&key, value)?,
                _ => return Err(ConfigError::UnknownKey(key)),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, message: &str| {
            Err(ConfigError::BadValue {
                key: key.into(),
                message: message.into(),
            })
        };
        if !(self.lr_encoder > 0.0 && self.lr_encoder.is_finite()) {
            return bad("lr_encoder", "must be a positive number");
        }
        if !(self.lr_crf > 0.0 && self.lr_crf.is_finite()) {
            return bad("lr_crf", "must be a positive number");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.dim == 0 {
            return bad("dim", "must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderState {
    Toy(ToyEncoder),
    /// Embeddings come from a sidecar supplied at run time.
    Static {
        dim: usize,
    },
}

/// First and second moment estimates over the flat parameter vector
/// (encoder parameters followed by the 18 transition weights).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ModelState {
    pub encoder: EncoderState,
    pub transitions: TransitionTable,
    pub config: TrainConfig,
    pub epoch: usize,
    pub optimizer: OptimizerState,
    sidecar: Option<StaticFileEncoder>,
}

impl PartialEq for ModelState {
    fn eq(&self, other: &Self) -> bool {
        self.encoder == other.encoder
            && self.transitions == other.transitions
            && self.config == other.config
            && self.epoch == other.epoch
            && self.optimizer == other.optimizer
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    schema_version: u32,
    encoder: EncoderState,
    transitions: TransitionTable,
    config: TrainConfig,
    epoch: usize,
    optimizer: OptimizerState,
}

impl ModelState {
    /// A fresh model: toy encoder over every token of `train`, or the
    /// configured embedding sidecar, and all-zero transitions.
    pub fn new(config: TrainConfig, train: &[Episode]) -> Result<Self, ModelError> {
        config.validate()?;
        let (encoder, sidecar) = match &config.embeddings {
            Some(path) => (
                EncoderState::Static { dim: config.dim },
                Some(load_static_embeddings(path, config.dim)?),
            ),
            None => {
                let tokens = train
                    .iter()
                    .flat_map(|e| e.support.iter().chain(&e.query))
                    .flat_map(|s| s.tokens.iter().map(String::as_str));
                let enc = ToyEncoder::new(tokens, config.dim, config.window, config.seed);
                (EncoderState::Toy(enc), None)
            }
        };
        Ok(ModelState {
            encoder,
            transitions: TransitionTable::zeros(),
            config,
            epoch: 0,
            optimizer: OptimizerState::default(),
            sidecar,
        })
    }

    pub fn with_embeddings(mut self, sidecar: StaticFileEncoder) -> Self {
        self.sidecar = Some(sidecar);
        self
    }

    pub fn encoder(&self) -> Result<&dyn Encoder, ModelError> {
        match &self.encoder {
            EncoderState::Toy(e) => Ok(e),
            EncoderState::Static { .. } => self
                .sidecar
                .as_ref()
                .map(|s| s as &dyn Encoder)
                .ok_or(ModelError::MissingEmbeddings),
        }
    }

    pub fn encoder_params(&self) -> &[f64] {
        match &self.encoder {
            EncoderState::Toy(e) => e.params(),
            EncoderState::Static { .. } => &[],
        }
    }

    pub fn encoder_params_mut(&mut self) -> &mut [f64] {
        match &mut self.encoder {
            EncoderState::Toy(e) => e.params_mut(),
            EncoderState::Static { .. } => &mut [],
        }
    }

    pub fn to_json(&self) -> String {
        let ck = Checkpoint {
            schema_version: SCHEMA_VERSION,
            encoder: self.encoder.clone(),
            transitions: self.transitions,
            config: self.config.clone(),
            epoch: self.epoch,
            optimizer: self.optimizer.clone(),
        };
        serde_json::to_string(&ck).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str, source: &str) -> Result<Self, ModelError> {
        let corrupt = |message: String| ModelError::CorruptFile {
            path: source.to_string(),
            message,
        };
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| corrupt(e.to_string()))?;
        let version = value
            .get("schema_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| corrupt("missing schema_version".into()))?;
        if version != u64::from(SCHEMA_VERSION) {
            return Err(ModelError::VersionMismatch {
                path: source.to_string(),
                found: version,
                supported: SCHEMA_VERSION,
            });
        }
        let ck: Checkpoint = serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))?;
        Ok(ModelState {
            encoder: ck.encoder,
            transitions: ck.transitions,
            config: ck.config,
            epoch: ck.epoch,
            optimizer: ck.optimizer,
            sidecar: None,
        })
    }

    /// Decodes every query of `episode` against prototypes from its own support.
    pub fn predict_episode(&self, episode: &Episode) -> Result<Vec<Prediction>, ModelError> {
        let enc = self.encoder()?;
        let ctx = EpisodeContext::new(episode, enc)?;
        episode
            .query
            .iter()
            .map(|q| {
                let encoded = enc.encode(q)?;
                let em = ctx.emissions(self.config.similarity, &encoded)?;
                let d = viterbi_joint(&em, &self.transitions, &ctx.categories);
                Ok(Prediction {
                    id: q.id.clone(),
                    intent: ctx.vocab.intents[d.intent].clone(),
                    slots: d
                        .tags
                        .iter()
                        .map(|&t| ctx.vocab.slot_tags[t].clone())
                        .collect(),
                    score: d.score,
                })
            })
            .collect()
    }

    pub fn evaluate(&self, episodes: &[Episode]) -> Result<EvalReport, ModelError> {
        let mut rows = Vec::new();
        for ep in episodes {
            for (q, p) in ep.query.iter().zip(self.predict_episode(ep)?) {
                let gold = Annotation {
                    intent: q.intent.clone(),
                    slots: q.slots.clone(),
                };
                let pred = Annotation {
                    intent: p.intent,
                    slots: p.slots,
                };
                rows.push((ep.domain.as_str(), gold, pred));
            }
        }
        Ok(EvalReport::from_predictions(
            rows.iter().map(|(d, g, p)| (*d, g, p)),
        )?)
    }
}

pub fn save_model(model: &ModelState, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    fs::write(path, model.to_json()).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelState, ModelError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ModelState::from_json(&text, &path.display().to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub intent: String,
    pub slots: Vec<SlotTag>,
    pub score: f64,
}

/// Everything derived from one episode's support set.
pub struct EpisodeContext {
    pub vocab: LabelVocabulary,
    pub categories: CategoryMap,
    pub support_encoded: Vec<EncodedSentence>,
    pub prototypes: PrototypeSet,
}

impl EpisodeContext {
    pub fn new(episode: &Episode, enc: &dyn Encoder) -> Result<Self, ModelError> {
        let vocab = build_vocabulary(&episode.support);
        let cooc = cooccurrence_matrix(&episode.support, &vocab);
        let categories = CategoryMap::new(&vocab.slot_tags, &cooc);
        let support_encoded = episode
            .support
            .iter()
            .map(|s| enc.encode(s))
            .collect::<Result<Vec<_>, _>>()?;
        let prototypes =
            prototypes_from_encoded(&episode.support, &support_encoded, &vocab, enc.dim())?;
        Ok(EpisodeContext {
            vocab,
            categories,
            support_encoded,
            prototypes,
        })
    }

    pub fn emissions(
        &self,
        kind: SimilarityKind,
        query: &EncodedSentence,
    ) -> Result<EmissionMatrix, SimilarityError> {
        emissions(kind, &self.prototypes, query)
    }
}

/// Intent scores from the sentence vector, slot scores from each token vector.
pub fn emissions(
    kind: SimilarityKind,
    protos: &PrototypeSet,
    query: &EncodedSentence,
) -> Result<EmissionMatrix, SimilarityError> {
    let intent_scores = protos
        .intent_protos
        .iter()
        .map(|c| sim(kind, &query.sentence_vec, c))
        .collect::<Result<Vec<_>, _>>()?;
    let mut slot_scores = Vec::with_capacity(query.len() * protos.slot_protos.len());
    for x in &query.token_vecs {
        for c in &protos.slot_protos {
            slot_scores.push(sim(kind, x, c)?);
        }
    }
    Ok(EmissionMatrix::new(
        intent_scores,
        protos.slot_protos.len(),
        slot_scores,
    ))
}
