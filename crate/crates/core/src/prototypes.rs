//! Support set reader: one centroid per intent and per slot tag.

use thiserror::Error;

use crate::data::{LabelVocabulary, Sample};
use crate::encoder::{EncodedSentence, Encoder, EncoderError};

#[derive(Debug, Error)]
pub enum PrototypeError {
    #[error("label {0} has no supporting example")]
    EmptyLabel(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Prototypes in vocabulary order: `intent_protos[z]` belongs to
/// `vocab.intents[z]` and `slot_protos[y]` to `vocab.slot_tags[y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub intent_protos: Vec<Vec<f64>>,
    pub slot_protos: Vec<Vec<f64>>,
    pub intent_counts: Vec<usize>,
    pub slot_counts: Vec<usize>,
}

pub fn compute_prototypes(
    support: &[Sample],
    vocab: &LabelVocabulary,
    enc: &dyn Encoder,
) -> Result<PrototypeSet, PrototypeError> {
    let encoded = support
        .iter()
        .map(|s| enc.encode(s))
        .collect::<Result<Vec<_>, _>>()?;
    prototypes_from_encoded(support, &encoded, vocab, enc.dim())
}

/// Same as [`compute_prototypes`] on already encoded support samples.
/// Support labels missing from `vocab` are ignored.
pub fn prototypes_from_encoded(
    support: &[Sample],
    encoded: &[EncodedSentence],
    vocab: &LabelVocabulary,
    dim: usize,
) -> Result<PrototypeSet, PrototypeError> {
    let mut set = PrototypeSet {
        intent_protos: vec![vec![0.0; dim]; vocab.n_intents()],
        slot_protos: vec![vec![0.0; dim]; vocab.n_tags()],
        intent_counts: vec![0; vocab.n_intents()],
        slot_counts: vec![0; vocab.n_tags()],
    };
    for (s, e) in support.iter().zip(encoded) {
        if let Some(z) = vocab.intent_index(&s.intent) {
            accumulate(&mut set.intent_protos[z], &e.sentence_vec);
            set.intent_counts[z] += 1;
        }
        for (tag, v) in s.slots.iter().zip(&e.token_vecs) {
            if let Some(y) = vocab.tag_index(tag) {
                accumulate(&mut set.slot_protos[y], v);
                set.slot_counts[y] += 1;
            }
        }
    }
    for (z, &n) in set.intent_counts.iter().enumerate() {
        if n == 0 {
            return Err(PrototypeError::EmptyLabel(format!(
                "intent {}",
                vocab.intents[z]
            )));
        }
        scale(&mut set.intent_protos[z], 1.0 / n as f64);
    }
    for (y, &n) in set.slot_counts.iter().enumerate() {
        if n == 0 {
            return Err(PrototypeError::EmptyLabel(format!(
                "tag {}",
                vocab.slot_tags[y]
            )));
        }
        scale(&mut set.slot_protos[y], 1.0 / n as f64);
    }
    Ok(set)
}

fn accumulate(acc: &mut [f64], v: &[f64]) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += x;
    }
}

fn scale(v: &mut [f64], k: f64) {
    v.iter_mut().for_each(|x| *x *= k);
}
