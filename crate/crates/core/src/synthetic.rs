//! Generated few-shot corpus with known structure.
//!
//! Every domain draws its slots and intents from word classes shared by all
//! domains, under domain-specific label names. Inside a domain the classes
//! are distinct, so labels are separable once the encoder groups words by
//! class. The structure gives each CRF component something to do:
//!
//! - spans of two slots are sometimes adjacent, so `B`/`I` decisions at the
//!   boundary depend on the neighbouring label;
//! - each intent always carries the same pair of slots, and some sentences
//!   use a trigger word shared by every intent, so the intent is then only
//!   recoverable from which slots appear.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Episode, Sample, SlotTag};

const VALUE_CLASSES: [&str; 8] = [
    "amber", "basil", "cedar", "delta", "ember", "flint", "grove", "haven",
];
const TRIGGER_CLASSES: [&str; 6] = ["ask", "book", "call", "find", "get", "show"];
/// Source-domain class blocks. Prototype training only separates classes
/// that meet in an episode, so together the blocks contain every pair of
/// value classes and every pair of trigger classes.
const VALUE_BLOCKS: [[usize; 4]; 6] = [
    [0, 1, 2, 3],
    [4, 5, 6, 7],
    [0, 1, 4, 5],
    [2, 3, 6, 7],
    [0, 1, 6, 7],
    [2, 3, 4, 5],
];
const TRIGGER_BLOCKS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 1, 3],
    [0, 4, 5],
    [1, 4, 5],
    [2, 3, 4],
    [2, 3, 5],
];
const GENERIC_TRIGGERS: [&str; 3] = ["please", "want", "need"];
const FILLERS: [&str; 10] = [
    "the", "a", "to", "for", "with", "on", "at", "my", "in", "from",
];
const SLOT_NAMES: [&str; 16] = [
    "album", "artist", "city", "date", "dish", "genre", "hotel", "item", "movie", "party", "place",
    "price", "seat", "song", "team", "time",
];
const INTENT_NAMES: [&str; 12] = [
    "add", "cancel", "check", "create", "delete", "inform", "order", "query", "remind", "reserve",
    "share", "update",
];
const WORDS_PER_VALUE_CLASS: usize = 6;
const WORDS_PER_TRIGGER_CLASS: usize = 3;
/// Slot pairs carried by the three intents; together they cover all four slots.
const INTENT_SLOTS: [[usize; 2]; 3] = [[0, 1], [2, 3], [1, 2]];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_source: usize,
    pub n_target: usize,
    pub shots: Vec<usize>,
    /// Training episodes per source domain and shot count.
    pub train_episodes: usize,
    /// Test episodes per target domain and shot count.
    pub test_episodes: usize,
    pub queries: usize,
    /// Probability that a sentence uses a trigger shared by all intents.
    pub generic_trigger_rate: f64,
    /// Probability that the two slot spans touch.
    pub adjacent_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_source: 6,
            n_target: 2,
            shots: vec![1, 5],
            train_episodes: 10,
            test_episodes: 10,
            queries: 8,
            generic_trigger_rate: 0.3,
            adjacent_rate: 0.3,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    /// Source-domain episodes, all shot counts mixed.
    pub train: Vec<Episode>,
    /// Target-domain episodes per shot count, in `config.shots` order.
    pub test: Vec<(usize, Vec<Episode>)>,
}

#[derive(Debug, Clone)]
struct Domain {
    name: String,
    slot_names: [String; 4],
    slot_classes: [usize; 4],
    intent_names: [String; 3],
    trigger_classes: [usize; 3],
}

fn value_word(class: usize, k: usize) -> String {
    format!("{}{}", VALUE_CLASSES[class], k)
}

fn trigger_word(class: usize, k: usize) -> String {
    format!("{}{}", TRIGGER_CLASSES[class], k)
}

fn pick<const N: usize>(rng: &mut ChaCha8Rng, pool: usize) -> [usize; N] {
    let mut all: Vec<usize> = (0..pool).collect();
    all.shuffle(rng);
    all[..N].try_into().unwrap()
}

fn domain(
    name: String,
    slot_classes: [usize; 4],
    trigger_classes: [usize; 3],
    rng: &mut ChaCha8Rng,
) -> Domain {
    let slots: [usize; 4] = pick(rng, SLOT_NAMES.len());
    let intents: [usize; 3] = pick(rng, INTENT_NAMES.len());
    Domain {
        name,
        slot_names: slots.map(|i| SLOT_NAMES[i].to_string()),
        slot_classes,
        intent_names: intents.map(|i| INTENT_NAMES[i].to_string()),
        trigger_classes,
    }
}

fn push_fillers(rng: &mut ChaCha8Rng, n: usize, tokens: &mut Vec<String>, tags: &mut Vec<SlotTag>) {
    for _ in 0..n {
        tokens.push(FILLERS.choose(rng).unwrap().to_string());
        tags.push(SlotTag::outside());
    }
}

fn sentence(
    d: &Domain,
    intent: usize,
    min_span: usize,
    id: String,
    rng: &mut ChaCha8Rng,
    cfg: &SyntheticConfig,
) -> Sample {
    let mut tokens = Vec::new();
    let mut slots = Vec::new();
    let lead = rng.gen_range(0..=1);
    push_fillers(rng, lead, &mut tokens, &mut slots);
    if rng.gen_bool(cfg.generic_trigger_rate) {
        tokens.push(GENERIC_TRIGGERS.choose(rng).unwrap().to_string());
    } else {
        let k = rng.gen_range(0..WORDS_PER_TRIGGER_CLASS);
        tokens.push(trigger_word(d.trigger_classes[intent], k));
    }
    slots.push(SlotTag::outside());

    let mut pair = INTENT_SLOTS[intent];
    if rng.gen_bool(0.5) {
        pair.swap(0, 1);
    }
    let gap = rng.gen_range(1..=2);
    push_fillers(rng, gap, &mut tokens, &mut slots);
    for (n, &s) in pair.iter().enumerate() {
        if n == 1 && !rng.gen_bool(cfg.adjacent_rate) {
            let gap = rng.gen_range(1..=2);
            push_fillers(rng, gap, &mut tokens, &mut slots);
        }
        let len = rng.gen_range(min_span..=3);
        for i in 0..len {
            let k = rng.gen_range(0..WORDS_PER_VALUE_CLASS);
            tokens.push(value_word(d.slot_classes[s], k));
            let name = &d.slot_names[s];
            slots.push(if i == 0 {
                SlotTag::begin(name)
            } else {
                SlotTag::inside(name)
            });
        }
    }
    let tail = rng.gen_range(0..=1);
    push_fillers(rng, tail, &mut tokens, &mut slots);
    Sample {
        id,
        tokens,
        slots,
        intent: d.intent_names[intent].clone(),
    }
}

fn episode(
    d: &Domain,
    shots: usize,
    tag: &str,
    rng: &mut ChaCha8Rng,
    cfg: &SyntheticConfig,
) -> Episode {
    // Support spans have length ≥ 2 so every I- tag has a prototype.
    let mut support = Vec::new();
    for z in 0..3 {
        for k in 0..shots {
            support.push(sentence(d, z, 2, format!("{tag}-s{z}-{k}"), rng, cfg));
        }
    }
    let query = (0..cfg.queries)
        .map(|k| {
            let z = rng.gen_range(0..3);
            sentence(d, z, 1, format!("{tag}-q{k}"), rng, cfg)
        })
        .collect();
    Episode {
        domain: d.name.clone(),
        support,
        query,
    }
}

/// Builds the corpus. Source domains jointly use every word class, so the
/// toy encoder sees each target-domain word during training.
pub fn generate(cfg: &SyntheticConfig) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut value_perm: Vec<usize> = (0..VALUE_CLASSES.len()).collect();
    value_perm.shuffle(&mut rng);
    let mut trigger_perm: Vec<usize> = (0..TRIGGER_CLASSES.len()).collect();
    trigger_perm.shuffle(&mut rng);

    let sources: Vec<Domain> = (0..cfg.n_source)
        .map(|d| {
            let v = VALUE_BLOCKS[d % VALUE_BLOCKS.len()].map(|c| value_perm[c]);
            let t = TRIGGER_BLOCKS[d % TRIGGER_BLOCKS.len()].map(|c| trigger_perm[c]);
            domain(format!("source{d}"), v, t, &mut rng)
        })
        .collect();
    let targets: Vec<Domain> = (0..cfg.n_target)
        .map(|d| {
            let v = pick(&mut rng, VALUE_CLASSES.len());
            let t = pick(&mut rng, TRIGGER_CLASSES.len());
            domain(format!("target{d}"), v, t, &mut rng)
        })
        .collect();

    let mut train = Vec::new();
    for d in &sources {
        for &shots in &cfg.shots {
            for e in 0..cfg.train_episodes {
                let tag = format!("{}-{shots}shot-{e}", d.name);
                train.push(episode(d, shots, &tag, &mut rng, cfg));
            }
        }
    }
    let test = cfg
        .shots
        .iter()
        .map(|&shots| {
            let eps = targets
                .iter()
                .flat_map(|d| (0..cfg.test_episodes).map(move |e| (d, e)))
                .map(|(d, e)| {
                    let tag = format!("{}-{shots}shot-{e}", d.name);
                    episode(d, shots, &tag, &mut rng, cfg)
                })
                .collect();
            (shots, eps)
        })
        .collect();
    SyntheticCorpus { train, test }
}
