//! Corpus data model, tokenisation, vocabulary and JSON-lines ingestion.

mod synthetic;
mod vocab;

use std::fs;
use std::io::Write;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub use synthetic::{generate_synthetic, SyntheticCorpus, SyntheticLexicon, SyntheticSpec};
pub use vocab::{Table, TokenId, Vocabulary, BOS, EOS, PAD, UNK};

/// Most recent history sentences used for cache construction.
pub const HISTORY_WINDOW: usize = 10;
pub const MIN_SOURCE_LEN: usize = 2;
pub const MAX_SOURCE_LEN: usize = 100;

/// Whitespace tokenisation with lowercasing.
pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_lowercase).collect()
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ")
}

/// The most recent `HISTORY_WINDOW` entries of `history`.
pub fn history_window<T>(history: &[T]) -> &[T] {
    &history[history.len().saturating_sub(HISTORY_WINDOW)..]
}

/// One line of a corpus file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub user_id: String,
    pub history: Vec<String>,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
}

/// A tokenised record, before id assignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawTriplet {
    pub user_id: String,
    pub history: Vec<Vec<String>>,
    pub source: Vec<String>,
    pub target: Vec<String>,
}

impl From<&CorpusRecord> for RawTriplet {
    fn from(r: &CorpusRecord) -> Self {
        RawTriplet {
            user_id: r.user_id.clone(),
            history: r.history.iter().map(|h| tokenize(h)).collect(),
            source: tokenize(&r.source),
            target: r.target.as_deref().map(tokenize).unwrap_or_default(),
        }
    }
}

/// `⟨user, history, source, target⟩` with history and source in source-side
/// ids and target in target-side ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TranslationTriplet {
    pub user_id: String,
    pub history: Vec<Vec<TokenId>>,
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl TranslationTriplet {
    pub fn encode(raw: &RawTriplet, vocab: &Vocabulary) -> Self {
        TranslationTriplet {
            user_id: raw.user_id.clone(),
            history: raw.history.iter().map(|h| vocab.source.encode(h)).collect(),
            source: vocab.source.encode(&raw.source),
            target: vocab.target.encode(&raw.target),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LoadedCorpus {
    pub triplets: Vec<TranslationTriplet>,
    pub vocab: Vocabulary,
    /// Lines dropped by the length filter.
    pub dropped: usize,
}

fn field<'a>(obj: &'a Value, name: &str, line: usize) -> Result<&'a Value> {
    obj.get(name).ok_or_else(|| Error::MissingField {
        line,
        field: name.to_string(),
    })
}

fn parse_record(text: &str, line: usize, require_target: bool) -> Result<CorpusRecord> {
    let value: Value = serde_json::from_str(text).map_err(|source| Error::Json { line, source })?;
    let json = |source| Error::Json { line, source };
    let user_id = serde_json::from_value(field(&value, "user_id", line)?.clone()).map_err(json)?;
    let history = serde_json::from_value(field(&value, "history", line)?.clone()).map_err(json)?;
    let source = serde_json::from_value(field(&value, "source", line)?.clone()).map_err(json)?;
    let target = match value.get("target") {
        Some(Value::Null) | None if !require_target => None,
        _ => Some(serde_json::from_value(field(&value, "target", line)?.clone()).map_err(json)?),
    };
    Ok(CorpusRecord {
        user_id,
        history,
        source,
        target,
    })
}

/// Reads JSON-lines records. Blank lines are skipped; line numbers are
/// 1-based.
pub fn read_records(path: &Path, require_target: bool) -> Result<Vec<CorpusRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_record(l, i + 1, require_target))
        .collect()
}

pub fn write_records(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("records serialise");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

fn keep(raw: &RawTriplet) -> bool {
    (MIN_SOURCE_LEN..=MAX_SOURCE_LEN).contains(&raw.source.len()) && !raw.target.is_empty()
}

/// Tokenises records and drops those violating the length invariants.
pub fn filter_records(records: &[CorpusRecord]) -> (Vec<RawTriplet>, usize) {
    let mut kept = Vec::with_capacity(records.len());
    let mut dropped = 0;
    for r in records {
        let raw = RawTriplet::from(r);
        if keep(&raw) {
            kept.push(raw);
        } else {
            dropped += 1;
        }
    }
    if dropped > 0 {
        warn!("dropped {dropped} triplet(s) violating length limits");
    }
    (kept, dropped)
}

/// Builds a vocabulary in order of first appearance.
pub fn build_vocabulary(raws: &[RawTriplet]) -> Vocabulary {
    let mut vocab = Vocabulary::default();
    for raw in raws {
        for w in raw.history.iter().flatten().chain(&raw.source) {
            vocab.source.insert(w);
        }
        for w in &raw.target {
            vocab.target.insert(w);
        }
    }
    vocab
}

/// Loads a corpus file and builds its vocabulary.
pub fn load_corpus(path: &Path) -> Result<LoadedCorpus> {
    let records = read_records(path, true)?;
    let (raws, dropped) = filter_records(&records);
    let vocab = build_vocabulary(&raws);
    let triplets = raws.iter().map(|r| TranslationTriplet::encode(r, &vocab)).collect();
    Ok(LoadedCorpus {
        triplets,
        vocab,
        dropped,
    })
}

/// Loads a corpus file against an existing vocabulary; unseen words map to
/// UNK.
pub fn load_corpus_with(path: &Path, vocab: &Vocabulary) -> Result<(Vec<TranslationTriplet>, usize)> {
    let records = read_records(path, true)?;
    let (raws, dropped) = filter_records(&records);
    Ok((
        raws.iter().map(|r| TranslationTriplet::encode(r, vocab)).collect(),
        dropped,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("The Cat sat"), vec!["the", "cat", "sat"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("a  b\tc"), vec!["a", "b", "c"]);
        assert_eq!(tokenize("x\u{2003}Y\n"), vec!["x", "y"]);
    }

    proptest! {
        #[test]
        fn tokenize_detokenize_is_idempotent(line in "\\PC{0,40}") {
            let once = tokenize(&line);
            let twice = tokenize(&detokenize(&once));
            prop_assert_eq!(once, twice);
        }
    }

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn load_three_valid_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "c.jsonl",
            concat!(
                r#"{"user_id":"a","history":["x y"],"source":"x z","target":"X Z"}"#,
                "\n",
                r#"{"source":"z y","target":"Z Y","history":[],"user_id":"b","extra":1}"#,
                "\n",
                r#"{"user_id":"a","history":["x z"],"source":"y y","target":"Y"}"#,
                "\n",
            ),
        );
        let c = load_corpus(&p).unwrap();
        assert_eq!(c.triplets.len(), 3);
        assert_eq!(c.dropped, 0);
        assert_eq!(c.vocab.source.len(), 4 + 3);
        assert_eq!(c.vocab.target.len(), 4 + 3);
    }

    #[test]
    fn single_word_source_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "c.jsonl",
            concat!(
                r#"{"user_id":"a","history":[],"source":"x z","target":"X Z"}"#,
                "\n",
                r#"{"user_id":"a","history":[],"source":"x","target":"X"}"#,
                "\n",
            ),
        );
        let c = load_corpus(&p).unwrap();
        assert_eq!(c.triplets.len(), 1);
        assert_eq!(c.dropped, 1);
    }

    #[test]
    fn empty_file_gives_reserved_vocabulary() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.jsonl", "");
        let c = load_corpus(&p).unwrap();
        assert!(c.triplets.is_empty());
        assert_eq!(c.vocab.source.len(), 4);
        assert_eq!(c.vocab.target.len(), 4);
    }

    #[test]
    fn malformed_line_and_missing_field_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "bad.jsonl",
            concat!(
                r#"{"user_id":"a","history":[],"source":"x z","target":"X"}"#,
                "\n",
                "{oops\n"
            ),
        );
        let err = load_corpus(&p).unwrap_err();
        assert!(matches!(err, Error::Json { line: 2, .. }), "{err}");

        let p = write(
            dir.path(),
            "missing.jsonl",
            r#"{"user_id":"a","history":[],"target":"X"}"#,
        );
        let err = load_corpus(&p).unwrap_err();
        assert!(
            matches!(&err, Error::MissingField { line: 1, field } if field == "source"),
            "{err}"
        );
    }

    #[test]
    fn vocabulary_ids_are_deterministic() {
        let records = vec![CorpusRecord {
            user_id: "u".into(),
            history: vec!["b a".into()],
            source: "c a".into(),
            target: Some("z".into()),
        }];
        let (raws, _) = filter_records(&records);
        let v1 = build_vocabulary(&raws);
        let v2 = build_vocabulary(&raws);
        assert_eq!(v1, v2);
        assert_eq!(v1.source.id("b"), 4);
        assert_eq!(v1.source.id("a"), 5);
        assert_eq!(v1.source.id("c"), 6);
    }
}
