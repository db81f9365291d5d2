//! Domain types for few-shot episodes: IOB slot tags, labeled samples,
//! episodes, and the per-episode label vocabulary.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("malformed slot tag {0:?}: expected O, B-<name> or I-<name>")]
    MalformedTag(String),
    #[error("parse error in {path} at line {line}, column {column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid sample {id:?} (episode {episode}): {reason}")]
    Validation {
        episode: usize,
        id: String,
        reason: String,
    },
    #[error("episode {0} has an empty support set")]
    EmptySupport(usize),
    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// B/I/O part of a slot tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TagKind {
    Outside,
    Begin,
    Inside,
}

/// An IOB slot tag. `name` is `None` exactly when `kind` is `Outside`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SlotTag {
    kind: TagKind,
    name: Option<String>,
}

impl SlotTag {
    pub fn outside() -> Self {
        SlotTag {
            kind: TagKind::Outside,
            name: None,
        }
    }

    pub fn begin(name: impl Into<String>) -> Self {
        SlotTag {
            kind: TagKind::Begin,
            name: Some(name.into()),
        }
    }

    pub fn inside(name: impl Into<String>) -> Self {
        SlotTag {
            kind: TagKind::Inside,
            name: Some(name.into()),
        }
    }

    pub fn kind(&self) -> TagKind {
        self.kind
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn is_outside(&self) -> bool {
        self.kind == TagKind::Outside
    }
}

// Same order as the serialized strings: "B-..." < "I-..." < "O", names byte-wise.
impl Ord for SlotTag {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        let rank = |k: TagKind| match k {
            TagKind::Begin => 0,
            TagKind::Inside => 1,
            TagKind::Outside => 2,
        };
        (rank(self.kind), &self.name).cmp(&(rank(other.kind), &other.name))
    }
}

impl PartialOrd for SlotTag {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for SlotTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.kind, &self.name) {
            (TagKind::Outside, _) => f.write_str("O"),
            (TagKind::Begin, Some(n)) => write!(f, "B-{n}"),
            (TagKind::Inside, Some(n)) => write!(f, "I-{n}"),
            _ => unreachable!("named tag without a name"),
        }
    }
}

impl FromStr for SlotTag {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_slot_tag(s)
    }
}

impl Serialize for SlotTag {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SlotTag {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        parse_slot_tag(&s).map_err(serde::de::Error::custom)
    }
}

pub fn parse_slot_tag(s: &str) -> Result<SlotTag, DataError> {
    if s == "O" {
        return Ok(SlotTag::outside());
    }
    let malformed = || DataError::MalformedTag(s.to_string());
    let (prefix, name) = s.split_once('-').ok_or_else(malformed)?;
    if name.is_empty() {
        return Err(malformed());
    }
    match prefix {
        "B" => Ok(SlotTag::begin(name)),
        "I" => Ok(SlotTag::inside(name)),
        _ => Err(malformed()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub tokens: Vec<String>,
    pub slots: Vec<SlotTag>,
    pub intent: String,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub(crate) fn validate(&self) -> Result<(), String> {
        if self.tokens.is_empty() {
            return Err("sample has no tokens".into());
        }
        if self.slots.len() != self.tokens.len() {
            return Err(format!(
                "{} tokens but {} slot tags",
                self.tokens.len(),
                self.slots.len()
            ));
        }
        if let Some(i) = self.tokens.iter().position(|t| t.is_empty()) {
            return Err(format!("token {i} is empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub domain: String,
    pub support: Vec<Sample>,
    pub query: Vec<Sample>,
}

impl Episode {
    /// Labels used by query samples that the support set never shows.
    pub fn uncovered_query_labels(&self) -> Vec<String> {
        let intents: BTreeSet<&str> = self.support.iter().map(|s| s.intent.as_str()).collect();
        let tags: BTreeSet<&SlotTag> = self.support.iter().flat_map(|s| &s.slots).collect();
        let mut missing = BTreeSet::new();
        for q in &self.query {
            if !intents.contains(q.intent.as_str()) {
                missing.insert(format!("intent {}", q.intent));
            }
            for t in &q.slots {
                if !tags.contains(t) {
                    missing.insert(format!("tag {t}"));
                }
            }
        }
        missing.into_iter().collect()
    }
}

/// Parses a JSON array of episodes and validates every sample.
pub fn parse_episodes(text: &str, source: &str) -> Result<Vec<Episode>, DataError> {
    let episodes: Vec<Episode> = serde_json::from_str(text).map_err(|e| DataError::Parse {
        path: source.to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    for (n, ep) in episodes.iter().enumerate() {
        if ep.support.is_empty() {
            return Err(DataError::EmptySupport(n));
        }
        for s in ep.support.iter().chain(&ep.query) {
            s.validate().map_err(|reason| DataError::Validation {
                episode: n,
                id: s.id.clone(),
                reason,
            })?;
        }
        let missing = ep.uncovered_query_labels();
        if !missing.is_empty() {
            log::warn!(
                "{source}: episode {n} ({}) has query labels absent from support: {}",
                ep.domain,
                missing.join(", ")
            );
        }
    }
    Ok(episodes)
}

pub fn load_episodes(path: impl AsRef<Path>) -> Result<Vec<Episode>, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_episodes(&text, &path.display().to_string())
}

pub fn save_episodes(path: impl AsRef<Path>, episodes: &[Episode]) -> Result<(), DataError> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(episodes).expect("episodes serialize");
    fs::write(path, text).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Intents and slot tags of one support set, in deterministic order.
/// `slot_tags[0]` is always `O`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVocabulary {
    pub intents: Vec<String>,
    pub slot_tags: Vec<SlotTag>,
}

impl LabelVocabulary {
    pub fn intent_index(&self, intent: &str) -> Option<usize> {
        self.intents
            .binary_search_by(|i| i.as_str().cmp(intent))
            .ok()
    }

    pub fn tag_index(&self, tag: &SlotTag) -> Option<usize> {
        if tag.is_outside() {
            return Some(0);
        }
        self.slot_tags[1..].binary_search(tag).ok().map(|i| i + 1)
    }

    pub fn n_intents(&self) -> usize {
        self.intents.len()
    }

    pub fn n_tags(&self) -> usize {
        self.slot_tags.len()
    }
}

pub fn build_vocabulary(support: &[Sample]) -> LabelVocabulary {
    let intents: BTreeSet<&str> = support.iter().map(|s| s.intent.as_str()).collect();
    let tags: BTreeSet<&SlotTag> = support
        .iter()
        .flat_map(|s| &s.slots)
        .filter(|t| !t.is_outside())
        .collect();
    for t in &tags {
        if t.kind() == TagKind::Inside {
            let b = SlotTag::begin(t.name().unwrap_or_default());
            if !tags.contains(&b) {
                log::warn!("support set has {t} but no {b}");
            }
        }
    }
    let mut slot_tags = vec![SlotTag::outside()];
    slot_tags.extend(tags.into_iter().cloned());
    LabelVocabulary {
        intents: intents.into_iter().map(str::to_string).collect(),
        slot_tags,
    }
}

/// Which (intent, tag) pairs appear together in at least one support sample.
/// The `O` column is always true.
#[derive(Debug, Clone, PartialEq)]
pub struct Cooccurrence {
    n_tags: usize,
    cells: Vec<bool>,
}

impl Cooccurrence {
    pub fn new(n_intents: usize, n_tags: usize) -> Self {
        let mut cells = vec![false; n_intents * n_tags];
        for z in 0..n_intents {
            cells[z * n_tags] = true;
        }
        Cooccurrence { n_tags, cells }
    }

    /// Every pair co-occurs.
    pub fn full(n_intents: usize, n_tags: usize) -> Self {
        Cooccurrence {
            n_tags,
            cells: vec![true; n_intents * n_tags],
        }
    }

    pub fn get(&self, intent: usize, tag: usize) -> bool {
        self.cells[intent * self.n_tags + tag]
    }

    pub fn set(&mut self, intent: usize, tag: usize, value: bool) {
        self.cells[intent * self.n_tags + tag] = value;
    }

    pub fn n_intents(&self) -> usize {
        self.cells.len() / self.n_tags.max(1)
    }

    pub fn n_tags(&self) -> usize {
        self.n_tags
    }
}

pub fn cooccurrence_matrix(support: &[Sample], vocab: &LabelVocabulary) -> Cooccurrence {
    let mut m = Cooccurrence::new(vocab.n_intents(), vocab.n_tags());
    for s in support {
        let Some(z) = vocab.intent_index(&s.intent) else {
            continue;
        };
        for t in &s.slots {
            if let Some(y) = vocab.tag_index(t) {
                m.set(z, y, true);
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    use crate::testutil::sample;

    #[test]
    fn parses_tags() {
        assert_eq!(parse_slot_tag("O").unwrap(), SlotTag::outside());
        assert_eq!(parse_slot_tag("B-city").unwrap(), SlotTag::begin("city"));
        assert_eq!(
            parse_slot_tag("I-to-city").unwrap(),
            SlotTag::inside("to-city")
        );
        for bad in ["B-", "I-", "X-city", "o", "B", "", "Bcity", "-city"] {
            assert!(
                matches!(parse_slot_tag(bad), Err(DataError::MalformedTag(_))),
                "{bad:?} accepted"
            );
        }
    }

    #[test]
    fn tag_names_are_case_sensitive() {
        assert_ne!(
            parse_slot_tag("B-City").unwrap(),
            parse_slot_tag("B-city").unwrap()
        );
    }

    #[test]
    fn loads_structure() {
        let text = r#"[{"domain": "travel", "extra": 1,
            "support": [
              {"id": "s1", "tokens": ["fly", "to", "rome"], "slots": ["O", "O", "B-city"], "intent": "book"},
              {"id": "s2", "tokens": ["weather"], "slots": ["O"], "intent": "weather"}],
            "query": [
              {"id": "q1", "tokens": ["fly", "rome"], "slots": ["O", "B-city"], "intent": "book"},
              {"id": "q2", "tokens": ["weather"], "slots": ["O"], "intent": "weather"},
              {"id": "q3", "tokens": ["to", "rome"], "slots": ["O", "B-city"], "intent": "book"}]}]"#;
        let eps = parse_episodes(text, "mem").unwrap();
        assert_eq!(eps.len(), 1);
        assert_eq!(eps[0].support.len(), 2);
        assert_eq!(eps[0].query.len(), 3);
    }

    #[test]
    fn rejects_length_mismatch() {
        let text = r#"[{"domain": "d", "support": [
              {"id": "bad7", "tokens": ["a", "b", "c", "d"], "slots": ["O", "O", "O"], "intent": "x"}],
            "query": []}]"#;
        match parse_episodes(text, "mem") {
            Err(DataError::Validation { id, .. }) => assert_eq!(id, "bad7"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_empty_and_malformed_input() {
        assert!(matches!(
            parse_episodes("", "mem"),
            Err(DataError::Parse { .. })
        ));
        let bad_tag = r#"[{"domain": "d", "support": [
              {"id": "a", "tokens": ["x"], "slots": ["B-"], "intent": "x"}], "query": []}]"#;
        match parse_episodes(bad_tag, "mem") {
            Err(DataError::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("B-"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let empty_support = r#"[{"domain": "d", "support": [], "query": []}]"#;
        assert!(matches!(
            parse_episodes(empty_support, "mem"),
            Err(DataError::EmptySupport(0))
        ));
    }

    #[test]
    fn vocabulary_order() {
        let support = vec![
            sample("1", "a b c", "B-x O I-x", "b"),
            sample("2", "a", "O", "a"),
        ];
        let v = build_vocabulary(&support);
        assert_eq!(v.intents, vec!["a", "b"]);
        let tags: Vec<String> = v.slot_tags.iter().map(|t| t.to_string()).collect();
        assert_eq!(tags, vec!["O", "B-x", "I-x"]);
        assert_eq!(v.tag_index(&SlotTag::inside("x")), Some(2));
        assert_eq!(v.tag_index(&SlotTag::inside("y")), None);

        let only_o = build_vocabulary(&[sample("1", "a b", "O O", "z")]);
        assert_eq!(only_o.slot_tags, vec![SlotTag::outside()]);
    }

    #[test]
    fn cooccurrence_cells() {
        let support = vec![
            sample("1", "to paris", "O B-city", "book"),
            sample("2", "rain today", "O B-date", "weather"),
        ];
        let v = build_vocabulary(&support);
        let m = cooccurrence_matrix(&support, &v);
        let book = v.intent_index("book").unwrap();
        let weather = v.intent_index("weather").unwrap();
        let city = v.tag_index(&SlotTag::begin("city")).unwrap();
        assert!(m.get(book, city));
        assert!(!m.get(weather, city));
        assert!(m.get(weather, 0));
    }

    #[test]
    fn cooccurrence_matches_per_sample_union() {
        // 1-shot, 2 intents, 3 tags; oracle: union of per-sample products.
        let support = vec![
            sample("1", "a b", "B-x O", "p"),
            sample("2", "c d", "O I-x", "q"),
        ];
        let v = build_vocabulary(&support);
        assert_eq!((v.n_intents(), v.n_tags()), (2, 3));
        let m = cooccurrence_matrix(&support, &v);
        for (z, intent) in v.intents.iter().enumerate() {
            for (y, tag) in v.slot_tags.iter().enumerate() {
                let expected = tag.is_outside()
                    || support
                        .iter()
                        .any(|s| &s.intent == intent && s.slots.contains(tag));
                assert_eq!(m.get(z, y), expected, "({intent}, {tag})");
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_tag() -> impl Strategy<Value = SlotTag> {
            prop_oneof![
                Just(SlotTag::outside()),
                "[a-zA-Z_.-]{1,8}".prop_map(SlotTag::begin),
                "[a-zA-Z_.-]{1,8}".prop_map(SlotTag::inside),
            ]
        }

        proptest! {
            #[test]
            fn tag_round_trip(tag in arb_tag()) {
                let s = tag.to_string();
                prop_assert_eq!(parse_slot_tag(&s).unwrap(), tag);
                prop_assert_eq!(parse_slot_tag(&s).unwrap().to_string(), s);
            }

            #[test]
            fn ordering_matches_serialized_strings(a in arb_tag(), b in arb_tag()) {
                prop_assert_eq!(a.cmp(&b), a.to_string().cmp(&b.to_string()));
            }

            #[test]
            fn vocabulary_is_permutation_invariant(
                labels in prop::collection::vec(("[a-c]", prop::collection::vec(arb_tag(), 1..4)), 1..6),
                seed in any::<u64>(),
            ) {
                let support: Vec<Sample> = labels.iter().enumerate().map(|(i, (z, tags))| Sample {
                    id: i.to_string(),
                    tokens: vec!["w".into(); tags.len()],
                    slots: tags.clone(),
                    intent: z.clone(),
                }).collect();
                let mut shuffled = support.clone();
                let k = (seed as usize) % shuffled.len();
                shuffled.rotate_left(k);
                shuffled.reverse();
                prop_assert_eq!(build_vocabulary(&support), build_vocabulary(&shuffled));
            }
        }
    }
}
