//! Abstract triangular CRF over one intent variable and a chain of slot tags.
//!
//! Transition weights are not kept per label pair. Every slot-slot pair maps
//! to one of 13 domain-agnostic categories (`O-O`, `B-sI`, `I-dB`, ...) and
//! every intent-slot pair to one of 5 (`Z-O`, `Z-cB`, `Z-nI`, ...), the latter
//! depending on whether the intent and the slot co-occur in the support set.
//! Each category owns a single learnable scalar, so a table trained on source
//! domains applies unchanged to a target domain with unseen labels.
//!
//! The joint score of intent `z` and tags `y` for a sentence of length `n` is
//!
//! ```text
//! ψ(z, y) = I[z] + Σ_i ( is[cat(z, y_i)] + ss[cat(y_{i-1}, y_i)] + S[i][y_i] )
//! ```
//!
//! with `y_{-1}` taken to be `O` and no end transition. For a fixed intent the
//! model is a linear chain, so the partition function is a log-sum-exp over
//! intents of per-intent forward passes.

use std::fmt;

use serde::de::{self, MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{Cooccurrence, SlotTag, TagKind};
use crate::math::logsumexp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SlotSlotCategory {
    OO,
    OB,
    OI,
    BO,
    BsB,
    BdB,
    BsI,
    BdI,
    IO,
    IsB,
    IdB,
    IsI,
    IdI,
}

impl SlotSlotCategory {
    pub const ALL: [SlotSlotCategory; 13] = [
        Self::OO,
        Self::OB,
        Self::OI,
        Self::BO,
        Self::BsB,
        Self::BdB,
        Self::BsI,
        Self::BdI,
        Self::IO,
        Self::IsB,
        Self::IdB,
        Self::IsI,
        Self::IdI,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        const NAMES: [&str; 13] = [
            "O-O", "O-B", "O-I", "B-O", "B-sB", "B-dB", "B-sI", "B-dI", "I-O", "I-sB", "I-dB",
            "I-sI", "I-dI",
        ];
        NAMES[self.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IntentSlotCategory {
    ZO,
    ZcB,
    ZcI,
    ZnB,
    ZnI,
}

impl IntentSlotCategory {
    pub const ALL: [IntentSlotCategory; 5] = [Self::ZO, Self::ZcB, Self::ZcI, Self::ZnB, Self::ZnI];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ["Z-O", "Z-cB", "Z-cI", "Z-nB", "Z-nI"][self.index()]
    }
}

/// Category of the transition `prev -> tag`. `None` is the position before
/// the first token, which behaves as `O`.
pub fn ss_category(prev: Option<&SlotTag>, tag: &SlotTag) -> SlotSlotCategory {
    use SlotSlotCategory::*;
    let (pk, pn) = match prev {
        Some(p) => (p.kind(), p.name()),
        None => (TagKind::Outside, None),
    };
    let same = pn.is_some() && pn == tag.name();
    match (pk, tag.kind()) {
        (TagKind::Outside, TagKind::Outside) => OO,
        (TagKind::Outside, TagKind::Begin) => OB,
        (TagKind::Outside, TagKind::Inside) => OI,
        (TagKind::Begin, TagKind::Outside) => BO,
        (TagKind::Begin, TagKind::Begin) => {
            if same {
                BsB
            } else {
                BdB
            }
        }
        (TagKind::Begin, TagKind::Inside) => {
            if same {
                BsI
            } else {
                BdI
            }
        }
        (TagKind::Inside, TagKind::Outside) => IO,
        (TagKind::Inside, TagKind::Begin) => {
            if same {
                IsB
            } else {
                IdB
            }
        }
        (TagKind::Inside, TagKind::Inside) => {
            if same {
                IsI
            } else {
                IdI
            }
        }
    }
}

/// Category of the intent-slot pair. `O` is always `Z-O`, whatever the
/// co-occurrence flag says.
pub fn is_category(tag: &SlotTag, cooccurs: bool) -> IntentSlotCategory {
    use IntentSlotCategory::*;
    match (tag.kind(), cooccurs) {
        (TagKind::Outside, _) => ZO,
        (TagKind::Begin, true) => ZcB,
        (TagKind::Inside, true) => ZcI,
        (TagKind::Begin, false) => ZnB,
        (TagKind::Inside, false) => ZnI,
    }
}

pub const N_SS: usize = 13;
pub const N_IS: usize = 5;
pub const N_TRANSITIONS: usize = N_SS + N_IS;

/// The 18 shared transition scalars.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TransitionTable {
    pub ss: [f64; N_SS],
    pub is: [f64; N_IS],
}

impl TransitionTable {
    pub fn zeros() -> Self {
        Self::default()
    }

    pub fn ss(&self, c: SlotSlotCategory) -> f64 {
        self.ss[c.index()]
    }

    pub fn is(&self, c: IntentSlotCategory) -> f64 {
        self.is[c.index()]
    }

    /// Flat layout: the 13 slot-slot weights followed by the 5 intent-slot weights.
    pub fn to_flat(&self) -> [f64; N_TRANSITIONS] {
        let mut out = [0.0; N_TRANSITIONS];
        out[..N_SS].copy_from_slice(&self.ss);
        out[N_SS..].copy_from_slice(&self.is);
        out
    }

    pub fn from_flat(flat: &[f64; N_TRANSITIONS]) -> Self {
        let mut t = Self::zeros();
        t.ss.copy_from_slice(&flat[..N_SS]);
        t.is.copy_from_slice(&flat[N_SS..]);
        t
    }

    pub fn named(&self) -> Vec<(&'static str, f64)> {
        SlotSlotCategory::ALL
            .iter()
            .map(|c| (c.name(), self.ss(*c)))
            .chain(
                IntentSlotCategory::ALL
                    .iter()
                    .map(|c| (c.name(), self.is(*c))),
            )
            .collect()
    }
}

impl fmt::Display for TransitionTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>12}", "category", "weight")?;
        for (name, w) in self.named() {
            writeln!(f, "{name:<8} {w:>12.6}")?;
        }
        Ok(())
    }
}

impl Serialize for TransitionTable {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(N_TRANSITIONS))?;
        for (name, w) in self.named() {
            map.serialize_entry(name, &w)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for TransitionTable {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct TableVisitor;

        impl<'de> Visitor<'de> for TableVisitor {
            type Value = TransitionTable;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map from the 18 transition category names to weights")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let names: Vec<&str> = TransitionTable::zeros()
                    .named()
                    .into_iter()
                    .map(|(n, _)| n)
                    .collect();
                let mut flat = [f64::NAN; N_TRANSITIONS];
                while let Some((key, value)) = map.next_entry::<String, f64>()? {
                    let i = names
                        .iter()
                        .position(|n| *n == key)
                        .ok_or_else(|| de::Error::unknown_field(&key, &[]))?;
                    flat[i] = value;
                }
                if let Some(i) = flat.iter().position(|v| v.is_nan()) {
                    return Err(de::Error::missing_field(names[i]));
                }
                Ok(TransitionTable::from_flat(&flat))
            }
        }

        deserializer.deserialize_map(TableVisitor)
    }
}

/// Category lookup tables for one label vocabulary and co-occurrence matrix.
/// Tag index 0 must be `O`; it doubles as the begin-of-sentence state.
#[derive(Debug, Clone)]
pub struct CategoryMap {
    n_intents: usize,
    n_tags: usize,
    ss: Vec<SlotSlotCategory>,
    is: Vec<IntentSlotCategory>,
}

impl CategoryMap {
    pub fn new(tags: &[SlotTag], cooc: &Cooccurrence) -> Self {
        assert!(
            tags.first().is_some_and(SlotTag::is_outside),
            "tag index 0 must be O"
        );
        assert_eq!(cooc.n_tags(), tags.len());
        let n_tags = tags.len();
        let n_intents = cooc.n_intents();
        let ss = tags
            .iter()
            .flat_map(|prev| tags.iter().map(move |t| ss_category(Some(prev), t)))
            .collect();
        let is = (0..n_intents)
            .flat_map(|z| {
                tags.iter()
                    .enumerate()
                    .map(move |(y, t)| is_category(t, cooc.get(z, y)))
            })
            .collect();
        CategoryMap {
            n_intents,
            n_tags,
            ss,
            is,
        }
    }

    pub fn n_intents(&self) -> usize {
        self.n_intents
    }

    pub fn n_tags(&self) -> usize {
        self.n_tags
    }

    pub fn ss(&self, prev: usize, tag: usize) -> SlotSlotCategory {
        self.ss[prev * self.n_tags + tag]
    }

    pub fn is(&self, intent: usize, tag: usize) -> IntentSlotCategory {
        self.is[intent * self.n_tags + tag]
    }
}

/// Emission scores of one sentence: one per intent and one per (position, tag).
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionMatrix {
    pub intent_scores: Vec<f64>,
    n_tags: usize,
    slot_scores: Vec<f64>,
}

impl EmissionMatrix {
    pub fn new(intent_scores: Vec<f64>, n_tags: usize, slot_scores: Vec<f64>) -> Self {
        assert!(n_tags > 0 && slot_scores.len().is_multiple_of(n_tags));
        EmissionMatrix {
            intent_scores,
            n_tags,
            slot_scores,
        }
    }

    pub fn zeros(n_intents: usize, n_tags: usize, len: usize) -> Self {
        Self::new(vec![0.0; n_intents], n_tags, vec![0.0; len * n_tags])
    }

    pub fn len(&self) -> usize {
        self.slot_scores.len() / self.n_tags
    }

    pub fn is_empty(&self) -> bool {
        self.slot_scores.is_empty()
    }

    pub fn n_intents(&self) -> usize {
        self.intent_scores.len()
    }

    pub fn n_tags(&self) -> usize {
        self.n_tags
    }

    pub fn slot(&self, pos: usize, tag: usize) -> f64 {
        self.slot_scores[pos * self.n_tags + tag]
    }

    pub fn slot_mut(&mut self, pos: usize, tag: usize) -> &mut f64 {
        &mut self.slot_scores[pos * self.n_tags + tag]
    }

    pub fn slot_row(&self, pos: usize) -> &[f64] {
        &self.slot_scores[pos * self.n_tags..(pos + 1) * self.n_tags]
    }

    pub fn slot_scores(&self) -> &[f64] {
        &self.slot_scores
    }

    pub fn slot_scores_mut(&mut self) -> &mut [f64] {
        &mut self.slot_scores
    }

    pub fn is_finite(&self) -> bool {
        self.intent_scores
            .iter()
            .chain(&self.slot_scores)
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointDecode {
    pub intent: usize,
    pub tags: Vec<usize>,
    pub score: f64,
}

fn check_shapes(em: &EmissionMatrix, map: &CategoryMap) {
    assert_eq!(em.n_intents(), map.n_intents(), "intent count mismatch");
    assert_eq!(em.n_tags(), map.n_tags(), "tag count mismatch");
    assert!(em.n_intents() > 0, "at least one intent required");
}

pub fn joint_score(
    em: &EmissionMatrix,
    tt: &TransitionTable,
    map: &CategoryMap,
    intent: usize,
    tags: &[usize],
) -> f64 {
    assert_eq!(tags.len(), em.len());
    let mut score = em.intent_scores[intent];
    let mut prev = 0;
    for (i, &y) in tags.iter().enumerate() {
        score += tt.is(map.is(intent, y)) + tt.ss(map.ss(prev, y)) + em.slot(i, y);
        prev = y;
    }
    score
}

/// Per-position scores seen by the chain once the intent is fixed.
fn unary_for_intent(
    em: &EmissionMatrix,
    tt: &TransitionTable,
    map: &CategoryMap,
    intent: usize,
) -> Vec<f64> {
    let n = em.n_tags();
    let bias: Vec<f64> = (0..n).map(|y| tt.is(map.is(intent, y))).collect();
    em.slot_scores()
        .chunks(n)
        .flat_map(|row| row.iter().zip(&bias).map(|(s, b)| s + b))
        .collect()
}

fn transition_matrix(tt: &TransitionTable, map: &CategoryMap) -> Vec<f64> {
    let n = map.n_tags();
    (0..n * n).map(|k| tt.ss(map.ss(k / n, k % n))).collect()
}

struct ChainPass {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    log_z: f64,
}

fn forward(unary: &[f64], trans: &[f64], n: usize) -> (Vec<f64>, f64) {
    let len = unary.len() / n;
    if len == 0 {
        return (Vec::new(), 0.0);
    }
    let mut alpha = vec![0.0; len * n];
    let mut buf = vec![0.0; n];
    for b in 0..n {
        alpha[b] = trans[b] + unary[b];
    }
    for i in 1..len {
        for b in 0..n {
            for a in 0..n {
                buf[a] = alpha[(i - 1) * n + a] + trans[a * n + b];
            }
            alpha[i * n + b] = logsumexp(&buf) + unary[i * n + b];
        }
    }
    let log_z = logsumexp(&alpha[(len - 1) * n..]);
    (alpha, log_z)
}

fn forward_backward(unary: &[f64], trans: &[f64], n: usize) -> ChainPass {
    let len = unary.len() / n;
    let (alpha, log_z) = forward(unary, trans, n);
    let mut beta = vec![0.0; len * n];
    let mut buf = vec![0.0; n];
    for i in (0..len.saturating_sub(1)).rev() {
        for a in 0..n {
            for b in 0..n {
                buf[b] = trans[a * n + b] + unary[(i + 1) * n + b] + beta[(i + 1) * n + b];
            }
            beta[i * n + a] = logsumexp(&buf);
        }
    }
    ChainPass { alpha, beta, log_z }
}

/// `log Σ_{z, y} exp ψ(z, y)`.
pub fn log_partition(em: &EmissionMatrix, tt: &TransitionTable, map: &CategoryMap) -> f64 {
    check_shapes(em, map);
    let trans = transition_matrix(tt, map);
    let per_intent: Vec<f64> = (0..map.n_intents())
        .map(|z| {
            let unary = unary_for_intent(em, tt, map, z);
            em.intent_scores[z] + forward(&unary, &trans, map.n_tags()).1
        })
        .collect();
    logsumexp(&per_intent)
}

pub fn posterior_log_prob(
    em: &EmissionMatrix,
    tt: &TransitionTable,
    map: &CategoryMap,
    intent: usize,
    tags: &[usize],
) -> f64 {
    joint_score(em, tt, map, intent, tags) - log_partition(em, tt, map)
}

/// Exact argmax of ψ over all (intent, tag sequence) pairs.
///
/// Ties go to the lowest intent index; within the chain, to the lowest final
/// tag and then the lowest predecessor at each backtrace step.
pub fn viterbi_joint(em: &EmissionMatrix, tt: &TransitionTable, map: &CategoryMap) -> JointDecode {
    check_shapes(em, map);
    let n = map.n_tags();
    let len = em.len();
    let trans = transition_matrix(tt, map);
    let mut best: Option<JointDecode> = None;
    let mut delta = vec![0.0; len * n];
    let mut back = vec![0usize; len * n];
    for z in 0..map.n_intents() {
        let unary = unary_for_intent(em, tt, map, z);
        let mut tags = vec![0; len];
        let mut chain = 0.0;
        if len > 0 {
            for b in 0..n {
                delta[b] = trans[b] + unary[b];
            }
            for i in 1..len {
                for b in 0..n {
                    let mut arg = 0;
                    let mut max = f64::NEG_INFINITY;
                    for a in 0..n {
                        let v = delta[(i - 1) * n + a] + trans[a * n + b];
                        if v > max {
                            max = v;
                            arg = a;
                        }
                    }
                    delta[i * n + b] = max + unary[i * n + b];
                    back[i * n + b] = arg;
                }
            }
            let last = &delta[(len - 1) * n..len * n];
            let mut arg = 0;
            for (b, v) in last.iter().enumerate() {
                if *v > last[arg] {
                    arg = b;
                }
            }
            chain = last[arg];
            tags[len - 1] = arg;
            for i in (1..len).rev() {
                tags[i - 1] = back[i * n + tags[i]];
            }
        }
        let score = em.intent_scores[z] + chain;
        if best.as_ref().is_none_or(|b| score > b.score) {
            best = Some(JointDecode {
                intent: z,
                tags,
                score,
            });
        }
    }
    best.expect("at least one intent")
}

/// Posterior expectations used by the gradient of `-log p(gold)`.
#[derive(Debug, Clone)]
pub struct Expectations {
    pub log_partition: f64,
    /// Expected number of uses of each slot-slot category (sums to the sentence length).
    pub ss_counts: [f64; N_SS],
    /// Expected number of uses of each intent-slot category (sums to the sentence length).
    pub is_counts: [f64; N_IS],
    pub intent_marginals: Vec<f64>,
    /// `[len × n_tags]`, row-major.
    pub slot_marginals: Vec<f64>,
}

pub fn expected_category_counts(
    em: &EmissionMatrix,
    tt: &TransitionTable,
    map: &CategoryMap,
) -> Expectations {
    check_shapes(em, map);
    let n = map.n_tags();
    let len = em.len();
    let trans = transition_matrix(tt, map);

    let passes: Vec<(Vec<f64>, ChainPass)> = (0..map.n_intents())
        .map(|z| {
            let unary = unary_for_intent(em, tt, map, z);
            let pass = forward_backward(&unary, &trans, n);
            (unary, pass)
        })
        .collect();
    let intent_logits: Vec<f64> = passes
        .iter()
        .enumerate()
        .map(|(z, (_, p))| em.intent_scores[z] + p.log_z)
        .collect();
    let log_z = logsumexp(&intent_logits);

    let mut out = Expectations {
        log_partition: log_z,
        ss_counts: [0.0; N_SS],
        is_counts: [0.0; N_IS],
        intent_marginals: intent_logits.iter().map(|l| (l - log_z).exp()).collect(),
        slot_marginals: vec![0.0; len * n],
    };

    for (z, (unary, pass)) in passes.iter().enumerate() {
        let pz = out.intent_marginals[z];
        for i in 0..len {
            for b in 0..n {
                let node = pass.alpha[i * n + b] + pass.beta[i * n + b] - pass.log_z;
                let m = pz * node.exp();
                out.slot_marginals[i * n + b] += m;
                out.is_counts[map.is(z, b).index()] += m;
                if i == 0 {
                    out.ss_counts[map.ss(0, b).index()] += m;
                    continue;
                }
                let tail = unary[i * n + b] + pass.beta[i * n + b] - pass.log_z;
                for a in 0..n {
                    let edge = pass.alpha[(i - 1) * n + a] + trans[a * n + b] + tail;
                    out.ss_counts[map.ss(a, b).index()] += pz * edge.exp();
                }
            }
        }
    }
    out
}

/// How often each category is used by one fixed configuration.
pub fn category_counts(
    map: &CategoryMap,
    intent: usize,
    tags: &[usize],
) -> ([f64; N_SS], [f64; N_IS]) {
    let mut ss = [0.0; N_SS];
    let mut is = [0.0; N_IS];
    let mut prev = 0;
    for &y in tags {
        ss[map.ss(prev, y).index()] += 1.0;
        is[map.is(intent, y).index()] += 1.0;
        prev = y;
    }
    (ss, is)
}

/// `-log p(gold)` and its gradient with respect to emissions and transitions.
#[derive(Debug, Clone)]
pub struct NllGradient {
    pub nll: f64,
    pub intent_scores: Vec<f64>,
    /// `[len × n_tags]`, row-major.
    pub slot_scores: Vec<f64>,
    pub transitions: TransitionTable,
}

pub fn nll_gradient(
    em: &EmissionMatrix,
    tt: &TransitionTable,
    map: &CategoryMap,
    intent: usize,
    tags: &[usize],
) -> NllGradient {
    let exp = expected_category_counts(em, tt, map);
    let nll = exp.log_partition - joint_score(em, tt, map, intent, tags);
    let (gold_ss, gold_is) = category_counts(map, intent, tags);

    let mut intent_scores = exp.intent_marginals;
    intent_scores[intent] -= 1.0;
    let mut slot_scores = exp.slot_marginals;
    let n = map.n_tags();
    for (i, &y) in tags.iter().enumerate() {
        slot_scores[i * n + y] -= 1.0;
    }
    let transitions = TransitionTable {
        ss: std::array::from_fn(|k| exp.ss_counts[k] - gold_ss[k]),
        is: std::array::from_fn(|k| exp.is_counts[k] - gold_is[k]),
    };
    NllGradient {
        nll,
        intent_scores,
        slot_scores,
        transitions,
    }
}
