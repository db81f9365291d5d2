//! Contextual embedding providers.
//!
//! An [`Encoder`] maps a sample to one sentence vector and one vector per
//! token. Two providers ship here: [`ToyEncoder`], a small trainable window
//! encoder with exact gradients, and [`StaticFileEncoder`], which serves
//! precomputed embeddings from a JSON-lines sidecar and has no parameters.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Sample;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("embedding record {id:?}: expected dimension {expected}, found {found}")]
    DimMismatch {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("no embeddings for sample id {0:?}")]
    MissingId(String),
    #[error("sample {id:?} has {expected} tokens but its embedding record has {found}")]
    TokenCountMismatch {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("duplicate embedding record for id {0:?}")]
    DuplicateId(String),
    #[error("embedding sidecar line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Encoder output for one sample; also used for gradients of the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedSentence {
    pub sentence_vec: Vec<f64>,
    pub token_vecs: Vec<Vec<f64>>,
}

impl EncodedSentence {
    pub fn zeros(dim: usize, len: usize) -> Self {
        EncodedSentence {
            sentence_vec: vec![0.0; dim],
            token_vecs: vec![vec![0.0; dim]; len],
        }
    }

    pub fn len(&self) -> usize {
        self.token_vecs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_vecs.is_empty()
    }
}

pub trait Encoder {
    fn dim(&self) -> usize;

    fn encode(&self, sample: &Sample) -> Result<EncodedSentence, EncoderError>;

    /// Trainable parameters as one flat slice (empty when frozen).
    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    /// Adds `d loss / d params` to `param_grad`, given `upstream = d loss / d encode(sample)`.
    fn backward(
        &self,
        sample: &Sample,
        upstream: &EncodedSentence,
        param_grad: &mut [f64],
    ) -> Result<(), EncoderError>;
}

pub const UNK: &str = "<unk>";

/// Window encoder: each token vector is `tanh(P · [e_{i-w}; ...; e_{i+w}])`
/// with zero padding past the sentence ends, and the sentence vector is the
/// mean of the token vectors.
///
/// Parameters are stored flat: the `[V × d]` embedding table followed by the
/// projection `P` as `d` rows of `d(2w+1)` inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ToyEncoderRepr", into = "ToyEncoderRepr")]
pub struct ToyEncoder {
    dim: usize,
    window: usize,
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ToyEncoderRepr {
    dim: usize,
    window: usize,
    vocab: Vec<String>,
    params: Vec<f64>,
}

impl TryFrom<ToyEncoderRepr> for ToyEncoder {
    type Error = String;

    fn try_from(r: ToyEncoderRepr) -> Result<Self, Self::Error> {
        if r.dim == 0 || r.vocab.first().map(String::as_str) != Some(UNK) {
            return Err("toy encoder needs dim > 0 and <unk> at vocabulary index 0".into());
        }
        let expected = r.vocab.len() * r.dim + r.dim * r.dim * (2 * r.window + 1);
        if r.params.len() != expected {
            return Err(format!(
                "toy encoder expects {expected} parameters, found {}",
                r.params.len()
            ));
        }
        let index = r
            .vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(ToyEncoder {
            dim: r.dim,
            window: r.window,
            vocab: r.vocab,
            index,
            params: r.params,
        })
    }
}

impl From<ToyEncoder> for ToyEncoderRepr {
    fn from(e: ToyEncoder) -> Self {
        ToyEncoderRepr {
            dim: e.dim,
            window: e.window,
            vocab: e.vocab,
            params: e.params,
        }
    }
}

impl ToyEncoder {
    /// Builds an encoder over the distinct `tokens` (sorted), with parameters
    /// drawn uniformly from `[-0.1, 0.1]`.
    pub fn new<'a>(
        tokens: impl IntoIterator<Item = &'a str>,
        dim: usize,
        window: usize,
        seed: u64,
    ) -> Self {
        assert!(dim > 0, "dimension must be positive");
        let mut words: Vec<String> = tokens
            .into_iter()
            .filter(|t| *t != UNK)
            .map(str::to_string)
            .collect();
        words.sort();
        words.dedup();
        let mut vocab = vec![UNK.to_string()];
        vocab.extend(words);
        let n_params = vocab.len() * dim + dim * dim * (2 * window + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = (0..n_params).map(|_| rng.gen_range(-0.1..=0.1)).collect();
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        ToyEncoder {
            dim,
            window,
            vocab,
            index,
            params,
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn token_id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    fn ctx_width(&self) -> usize {
        self.dim * (2 * self.window + 1)
    }

    fn embedding(&self, id: usize) -> &[f64] {
        &self.params[id * self.dim..(id + 1) * self.dim]
    }

    fn projection_offset(&self) -> usize {
        self.vocab.len() * self.dim
    }

    /// Vocabulary ids of the window around each position (`None` = padding).
    fn windows(&self, ids: &[usize]) -> Vec<Vec<Option<usize>>> {
        let w = self.window as isize;
        (0..ids.len() as isize)
            .map(|i| {
                (i - w..=i + w)
                    .map(|j| (j >= 0 && (j as usize) < ids.len()).then(|| ids[j as usize]))
                    .collect()
            })
            .collect()
    }

    fn context(&self, window: &[Option<usize>]) -> Vec<f64> {
        let mut v = vec![0.0; self.ctx_width()];
        for (slot, id) in window.iter().enumerate() {
            if let Some(id) = id {
                v[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(self.embedding(*id));
            }
        }
        v
    }

    fn project(&self, ctx: &[f64]) -> Vec<f64> {
        let width = self.ctx_width();
        let proj = &self.params[self.projection_offset()..];
        proj.chunks(width)
            .map(|row| row.iter().zip(ctx).map(|(p, x)| p * x).sum::<f64>().tanh())
            .collect()
    }

    fn ids(&self, sample: &Sample) -> Vec<usize> {
        sample.tokens.iter().map(|t| self.token_id(t)).collect()
    }
}

impl Encoder for ToyEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, sample: &Sample) -> Result<EncodedSentence, EncoderError> {
        let windows = self.windows(&self.ids(sample));
        let token_vecs: Vec<Vec<f64>> = windows
            .iter()
            .map(|w| self.project(&self.context(w)))
            .collect();
        let mut sentence_vec = vec![0.0; self.dim];
        for h in &token_vecs {
            for (s, v) in sentence_vec.iter_mut().zip(h) {
                *s += v;
            }
        }
        let n = token_vecs.len().max(1) as f64;
        sentence_vec.iter_mut().for_each(|s| *s /= n);
        Ok(EncodedSentence {
            sentence_vec,
            token_vecs,
        })
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn backward(
        &self,
        sample: &Sample,
        upstream: &EncodedSentence,
        param_grad: &mut [f64],
    ) -> Result<(), EncoderError> {
        assert_eq!(param_grad.len(), self.params.len());
        let d = self.dim;
        let width = self.ctx_width();
        let p_off = self.projection_offset();
        let windows = self.windows(&self.ids(sample));
        let inv_n = 1.0 / windows.len().max(1) as f64;
        let mut d_ctx = vec![0.0; width];
        for (i, window) in windows.iter().enumerate() {
            let ctx = self.context(window);
            let h = self.project(&ctx);
            d_ctx.iter_mut().for_each(|v| *v = 0.0);
            for (o, &ho) in h.iter().enumerate() {
                let g_h = upstream.token_vecs[i][o] + upstream.sentence_vec[o] * inv_n;
                let g_pre = g_h * (1.0 - ho * ho);
                if g_pre == 0.0 {
                    continue;
                }
                let row = p_off + o * width;
                for j in 0..width {
                    param_grad[row + j] += g_pre * ctx[j];
                    d_ctx[j] += g_pre * self.params[row + j];
                }
            }
            for (slot, id) in window.iter().enumerate() {
                if let Some(id) = id {
                    for k in 0..d {
                        param_grad[id * d + k] += d_ctx[slot * d + k];
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct SidecarRecord {
    id: String,
    sentence: Vec<f64>,
    tokens: Vec<Vec<f64>>,
}

/// Frozen embeddings looked up by sample id.
#[derive(Debug, Clone, Default)]
pub struct StaticFileEncoder {
    dim: usize,
    records: HashMap<String, EncodedSentence>,
}

impl StaticFileEncoder {
    pub fn from_reader(reader: impl BufRead, dim: usize) -> Result<Self, EncoderError> {
        let mut records = HashMap::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| EncoderError::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SidecarRecord =
                serde_json::from_str(&line).map_err(|e| EncoderError::Parse {
                    line: n + 1,
                    message: e.to_string(),
                })?;
            let bad = std::iter::once(&rec.sentence)
                .chain(&rec.tokens)
                .find(|v| v.len() != dim);
            if let Some(v) = bad {
                return Err(EncoderError::DimMismatch {
                    id: rec.id,
                    expected: dim,
                    found: v.len(),
                });
            }
            let enc = EncodedSentence {
                sentence_vec: rec.sentence,
                token_vecs: rec.tokens,
            };
            if records.insert(rec.id.clone(), enc).is_some() {
                return Err(EncoderError::DuplicateId(rec.id));
            }
        }
        Ok(StaticFileEncoder { dim, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

pub fn load_static_embeddings(
    path: impl AsRef<Path>,
    dim: usize,
) -> Result<StaticFileEncoder, EncoderError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| EncoderError::Io {
        path: path.display().to_string(),
        source,
    })?;
    StaticFileEncoder::from_reader(BufReader::new(file), dim)
}

impl Encoder for StaticFileEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, sample: &Sample) -> Result<EncodedSentence, EncoderError> {
        let rec = self
            .records
            .get(&sample.id)
            .ok_or_else(|| EncoderError::MissingId(sample.id.clone()))?;
        if rec.len() != sample.len() {
            return Err(EncoderError::TokenCountMismatch {
                id: sample.id.clone(),
                expected: sample.len(),
                found: rec.len(),
            });
        }
        Ok(rec.clone())
    }

    fn params(&self) -> &[f64] {
        &[]
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut []
    }

    fn backward(&self, _: &Sample, _: &EncodedSentence, _: &mut [f64]) -> Result<(), EncoderError> {
        Ok(())
    }
}
