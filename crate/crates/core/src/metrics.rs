//! Intent accuracy, CoNLL-style chunk F1 and joint (sentence) accuracy.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{SlotTag, TagKind};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} gold vs {1} predicted")]
    LengthMismatch(usize, usize),
    #[error("reports cover different domains")]
    DomainMismatch,
    #[error("no reports to aggregate")]
    Empty,
}

/// A labeled slot span `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Chunk {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

/// Chunks as the conlleval script sees them: an `I-x` that does not follow
/// `B-x`/`I-x` opens a new chunk.
pub fn extract_chunks(tags: &[SlotTag]) -> Vec<Chunk> {
    let mut chunks = Vec::new();
    let mut open: Option<(&str, usize)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let continues =
            tag.kind() == TagKind::Inside && open.is_some_and(|(name, _)| Some(name) == tag.name());
        if continues {
            continue;
        }
        if let Some((name, start)) = open.take() {
            chunks.push(Chunk {
                name: name.to_string(),
                start,
                end: i,
            });
        }
        if let Some(name) = tag.name() {
            open = Some((name, i));
        }
    }
    if let Some((name, start)) = open {
        chunks.push(Chunk {
            name: name.to_string(),
            start,
            end: tags.len(),
        });
    }
    chunks
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChunkCounts {
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

impl ChunkCounts {
    pub fn add(&mut self, gold: &[SlotTag], pred: &[SlotTag]) {
        let g = extract_chunks(gold);
        let p = extract_chunks(pred);
        self.gold += g.len();
        self.predicted += p.len();
        self.correct += p.iter().filter(|c| g.contains(c)).count();
    }

    pub fn precision(&self) -> f64 {
        ratio(self.correct, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.correct, self.gold)
    }

    /// `2PR / (P + R)`, 0 when both are 0.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn check_aligned<T>(gold: &[T], pred: &[T]) -> Result<(), MetricsError> {
    if gold.len() == pred.len() {
        Ok(())
    } else {
        Err(MetricsError::LengthMismatch(gold.len(), pred.len()))
    }
}

/// Corpus-level (micro) chunk F1.
pub fn slot_f1(gold: &[Vec<SlotTag>], pred: &[Vec<SlotTag>]) -> Result<f64, MetricsError> {
    check_aligned(gold, pred)?;
    let mut counts = ChunkCounts::default();
    for (g, p) in gold.iter().zip(pred) {
        check_aligned(g, p)?;
        counts.add(g, p);
    }
    Ok(counts.f1())
}

/// Intent and slot labels of one sentence, gold or predicted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub intent: String,
    pub slots: Vec<SlotTag>,
}

pub fn intent_accuracy(gold: &[Annotation], pred: &[Annotation]) -> Result<f64, MetricsError> {
    check_aligned(gold, pred)?;
    let hits = gold
        .iter()
        .zip(pred)
        .filter(|(g, p)| g.intent == p.intent)
        .count();
    Ok(ratio(hits, gold.len()))
}

pub fn joint_accuracy(gold: &[Annotation], pred: &[Annotation]) -> Result<f64, MetricsError> {
    check_aligned(gold, pred)?;
    let mut hits = 0;
    for (g, p) in gold.iter().zip(pred) {
        check_aligned(&g.slots, &p.slots)?;
        if g == p {
            hits += 1;
        }
    }
    Ok(ratio(hits, gold.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub intent_acc: f64,
    pub slot_f1: f64,
    pub joint_acc: f64,
}

impl Scores {
    pub fn mean(&self) -> f64 {
        (self.intent_acc + self.slot_f1 + self.joint_acc) / 3.0
    }

    fn average<'a>(items: impl IntoIterator<Item = &'a Scores>) -> Scores {
        let mut n = 0.0;
        let mut acc = Scores {
            intent_acc: 0.0,
            slot_f1: 0.0,
            joint_acc: 0.0,
        };
        for s in items {
            n += 1.0;
            acc.intent_acc += s.intent_acc;
            acc.slot_f1 += s.slot_f1;
            acc.joint_acc += s.joint_acc;
        }
        if n > 0.0 {
            acc.intent_acc /= n;
            acc.slot_f1 /= n;
            acc.joint_acc /= n;
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainScores {
    #[serde(flatten)]
    pub scores: Scores,
    pub n_sentences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_domain: BTreeMap<String, DomainScores>,
    /// Unweighted mean over domains.
    pub macro_avg: Scores,
    pub n_sentences: usize,
}

impl EvalReport {
    /// Scores every domain over all of its sentences, then macro-averages.
    pub fn from_predictions<'a>(
        items: impl IntoIterator<Item = (&'a str, &'a Annotation, &'a Annotation)>,
    ) -> Result<Self, MetricsError> {
        #[derive(Default)]
        struct Acc {
            n: usize,
            intent: usize,
            joint: usize,
            chunks: ChunkCounts,
        }
        let mut acc: BTreeMap<&str, Acc> = BTreeMap::new();
        for (domain, gold, pred) in items {
            check_aligned(&gold.slots, &pred.slots)?;
            let a = acc.entry(domain).or_default();
            a.n += 1;
            a.intent += usize::from(gold.intent == pred.intent);
            a.joint += usize::from(gold == pred);
            a.chunks.add(&gold.slots, &pred.slots);
        }
        let per_domain: BTreeMap<String, DomainScores> = acc
            .into_iter()
            .map(|(d, a)| {
                let scores = Scores {
                    intent_acc: ratio(a.intent, a.n),
                    slot_f1: a.chunks.f1(),
                    joint_acc: ratio(a.joint, a.n),
                };
                (
                    d.to_string(),
                    DomainScores {
                        scores,
                        n_sentences: a.n,
                    },
                )
            })
            .collect();
        Ok(Self::with_domains(per_domain))
    }

    fn with_domains(per_domain: BTreeMap<String, DomainScores>) -> Self {
        let macro_avg = Scores::average(per_domain.values().map(|d| &d.scores));
        let n_sentences = per_domain.values().map(|d| d.n_sentences).sum();
        EvalReport {
            per_domain,
            macro_avg,
            n_sentences,
        }
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .per_domain
            .keys()
            .map(|k| k.chars().count())
            .max()
            .unwrap_or(0)
            .max(6);
        writeln!(
            f,
            "{:<width$}  {:>10}  {:>10}  {:>10}  {:>9}",
            "domain", "intent_acc", "slot_f1", "joint_acc", "sentences"
        )?;
        let row = |f: &mut fmt::Formatter<'_>, name: &str, s: &Scores, n: usize| {
            writeln!(
                f,
                "{name:<width$}  {:>10.4}  {:>10.4}  {:>10.4}  {n:>9}",
                s.intent_acc, s.slot_f1, s.joint_acc
            )
        };
        for (d, s) in &self.per_domain {
            row(f, d, &s.scores, s.n_sentences)?;
        }
        row(f, "macro", &self.macro_avg, self.n_sentences)
    }
}

/// Averages runs with different seeds: per metric per domain, then macro.
pub fn aggregate_seeds(reports: &[EvalReport]) -> Result<EvalReport, MetricsError> {
    let first = reports.first().ok_or(MetricsError::Empty)?;
    if reports
        .iter()
        .any(|r| !r.per_domain.keys().eq(first.per_domain.keys()))
    {
        return Err(MetricsError::DomainMismatch);
    }
    let per_domain = first
        .per_domain
        .iter()
        .map(|(d, s)| {
            let scores = Scores::average(reports.iter().map(|r| &r.per_domain[d].scores));
            (
                d.clone(),
                DomainScores {
                    scores,
                    n_sentences: s.n_sentences,
                },
            )
        })
        .collect();
    Ok(EvalReport::with_domains(per_domain))
}
