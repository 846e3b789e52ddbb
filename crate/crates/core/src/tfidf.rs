//! TF-IDF keyword selection for the topic and context regimes, and cosine
//! similarity between users' keyword vectors.
//!
//! `TF(w,d) = count(w,d)/|d|`, `IDF(w,D) = ln((1+|D|)/(1+df(w,D))) + 1`.
//! In the topic regime each user's pooled history is one document and the
//! corpus is every user's pooled history. In the context regime the current
//! source is the document and the corpus is the user's history sentences,
//! one document each, plus the source itself.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{history_window, TokenId};
use crate::error::{Error, Result};

/// Identifies the IDF formula; stored in checkpoints.
pub const IDF_FORMULA: &str = "ln((1+N)/(1+df))+1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TfidfConfig {
    pub threshold: f64,
    pub topic_capacity: usize,
    pub context_capacity: usize,
}

impl Default for TfidfConfig {
    fn default() -> Self {
        Self {
            threshold: 0.05,
            topic_capacity: 25,
            context_capacity: 35,
        }
    }
}

impl TfidfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.topic_capacity == 0 || self.context_capacity == 0 {
            return Err(Error::Config("cache capacities must be at least 1".into()));
        }
        if self.threshold.is_nan() || self.threshold < 0.0 {
            return Err(Error::Config("TF-IDF threshold must be non-negative".into()));
        }
        Ok(())
    }
}

/// A selected keyword with its TF-IDF weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keyword {
    pub surface: String,
    pub weight: f64,
}

pub fn idf(num_docs: usize, df: usize) -> f64 {
    ((1.0 + num_docs as f64) / (1.0 + df as f64)).ln() + 1.0
}

/// TF-IDF of `w` in `doc` against `corpus`, which is expected to contain
/// `doc` itself.
pub fn tfidf_weight<S: AsRef<str>>(w: &str, doc: &[S], corpus: &[Vec<S>]) -> Result<f64> {
    if doc.is_empty() {
        return Err(Error::Domain("TF-IDF of an empty document".into()));
    }
    let count = doc.iter().filter(|t| t.as_ref() == w).count();
    if count == 0 {
        return Ok(0.0);
    }
    let df = corpus.iter().filter(|d| d.iter().any(|t| t.as_ref() == w)).count();
    Ok(count as f64 / doc.len() as f64 * idf(corpus.len(), df))
}

/// Document frequencies of a fixed corpus.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DocumentFrequencies {
    pub num_docs: usize,
    pub df: BTreeMap<String, usize>,
}

impl DocumentFrequencies {
    /// Counts documents; empty documents are not counted.
    pub fn from_docs<'a, S: AsRef<str> + 'a>(docs: impl IntoIterator<Item = &'a [S]>) -> Self {
        let mut stats = Self::default();
        for doc in docs {
            if doc.is_empty() {
                continue;
            }
            stats.num_docs += 1;
            let distinct: HashSet<&str> = doc.iter().map(AsRef::as_ref).collect();
            for w in distinct {
                *stats.df.entry(w.to_string()).or_default() += 1;
            }
        }
        stats
    }

    /// Weight of every distinct word of `doc`. `member` says whether `doc`
    /// is already one of the counted documents; otherwise it is counted as
    /// an additional one.
    pub fn weights<S: AsRef<str>>(&self, doc: &[S], member: bool) -> Vec<Keyword> {
        if doc.is_empty() {
            return Vec::new();
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for w in doc {
            *counts.entry(w.as_ref()).or_default() += 1;
        }
        let extra = usize::from(!member);
        let n = self.num_docs + extra;
        let len = doc.len() as f64;
        counts
            .into_iter()
            .map(|(w, c)| {
                let df = self.df.get(w).copied().unwrap_or(0) + extra;
                Keyword {
                    surface: w.to_string(),
                    weight: c as f64 / len * idf(n, df),
                }
            })
            .collect()
    }
}

fn rank(a: &Keyword, b: &Keyword) -> Ordering {
    b.weight.total_cmp(&a.weight).then_with(|| a.surface.cmp(&b.surface))
}

/// Keeps weights strictly above `threshold`, ranked by (weight desc,
/// surface asc), truncated to `capacity`.
pub fn select(mut weights: Vec<Keyword>, threshold: f64, capacity: usize) -> Vec<Keyword> {
    weights.retain(|k| k.weight > threshold);
    weights.sort_by(rank);
    weights.truncate(capacity);
    weights
}

fn pooled<S: AsRef<str>>(history: &[Vec<S>]) -> Vec<&str> {
    history_window(history).iter().flatten().map(AsRef::as_ref).collect()
}

/// Topic keywords of `user_id`, whose (windowed) history is pooled into one
/// document; `all_histories` supplies the other users' documents. The
/// user's own entry in `all_histories`, if any, is replaced by `history`.
pub fn topic_keywords<S: AsRef<str>>(
    user_id: &str,
    history: &[Vec<S>],
    all_histories: &BTreeMap<String, Vec<Vec<S>>>,
    cfg: &TfidfConfig,
) -> Vec<Keyword> {
    let doc = pooled(history);
    if doc.is_empty() {
        return Vec::new();
    }
    let others: Vec<Vec<&str>> = all_histories
        .iter()
        .filter(|(u, _)| u.as_str() != user_id)
        .map(|(_, h)| pooled(h))
        .collect();
    let stats = DocumentFrequencies::from_docs(others.iter().map(Vec::as_slice));
    select(stats.weights(&doc, false), cfg.threshold, cfg.topic_capacity)
}

/// Topic keywords against frozen corpus statistics.
pub fn topic_keywords_frozen<S: AsRef<str>>(
    history: &[Vec<S>],
    stats: &DocumentFrequencies,
    member: bool,
    cfg: &TfidfConfig,
) -> Vec<Keyword> {
    let doc = pooled(history);
    select(stats.weights(&doc, member), cfg.threshold, cfg.topic_capacity)
}

/// Context keywords of the current source against the user's history
/// sentences.
pub fn context_keywords<S: AsRef<str>>(source: &[S], history: &[Vec<S>], cfg: &TfidfConfig) -> Vec<Keyword> {
    if source.is_empty() {
        return Vec::new();
    }
    let stats = DocumentFrequencies::from_docs(history_window(history).iter().map(Vec::as_slice));
    select(stats.weights(source, false), cfg.threshold, cfg.context_capacity)
}

/// Sparse bag of topic keywords, token id → TF-IDF weight.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KeywordVector(pub BTreeMap<TokenId, f64>);

impl KeywordVector {
    pub fn norm(&self) -> f64 {
        self.0.values().map(|w| w * w).sum::<f64>().sqrt()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn shares_keyword(&self, other: &KeywordVector) -> bool {
        self.0.keys().any(|k| other.0.contains_key(k))
    }
}

impl FromIterator<(TokenId, f64)> for KeywordVector {
    fn from_iter<I: IntoIterator<Item = (TokenId, f64)>>(iter: I) -> Self {
        KeywordVector(iter.into_iter().collect())
    }
}

/// Cosine similarity, 0 when either vector is empty.
pub fn user_similarity(a: &KeywordVector, b: &KeywordVector) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let (small, large) = if a.0.len() <= b.0.len() { (a, b) } else { (b, a) };
    let dot: f64 = small.0.iter().filter_map(|(k, w)| large.0.get(k).map(|v| w * v)).sum();
    (dot / (na * nb)).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn weight_examples() {
        let a = words("cat sits cat runs");
        let corpus = vec![a.clone(), words("dog runs")];
        assert_eq!(tfidf_weight("dog", &a, &corpus).unwrap(), 0.0);
        // (2/4)·(ln(3/2)+1), computed by hand
        let w = tfidf_weight("cat", &a, &corpus).unwrap();
        assert!((w - 0.702_732_554_054_40).abs() < 1e-12, "{w}");
        // present in every document: IDF collapses to one
        let w = tfidf_weight("runs", &a, &corpus).unwrap();
        assert!((w - 0.25).abs() < 1e-12);
        assert!(tfidf_weight::<String>("x", &[], &corpus).is_err());
    }

    #[test]
    fn single_user_with_zero_threshold_keeps_every_word() {
        let cfg = TfidfConfig {
            threshold: 0.0,
            ..TfidfConfig::default()
        };
        let history = vec![words("a b c"), words("c d")];
        let all = BTreeMap::from([("u".to_string(), history.clone())]);
        let kws = topic_keywords("u", &history, &all, &cfg);
        let mut surfaces: Vec<_> = kws.iter().map(|k| k.surface.as_str()).collect();
        surfaces.sort();
        assert_eq!(surfaces, ["a", "b", "c", "d"]);
        // IDF is 1, so the weight is the term frequency
        assert!((kws[0].weight - 0.4).abs() < 1e-12);
        assert_eq!(kws[0].surface, "c");
    }

    #[test]
    fn disjoint_users_have_disjoint_keywords() {
        let cfg = TfidfConfig {
            threshold: 0.0,
            ..TfidfConfig::default()
        };
        let all = BTreeMap::from([
            ("a".to_string(), vec![words("x y z")]),
            ("b".to_string(), vec![words("p q")]),
        ]);
        let ka: HashSet<_> = topic_keywords("a", &all["a"], &all, &cfg)
            .into_iter()
            .map(|k| k.surface)
            .collect();
        let kb: HashSet<_> = topic_keywords("b", &all["b"], &all, &cfg)
            .into_iter()
            .map(|k| k.surface)
            .collect();
        assert!(ka.is_disjoint(&kb));
    }

    #[test]
    fn capacity_truncates_to_the_heaviest_words() {
        let cfg = TfidfConfig {
            threshold: 0.0,
            topic_capacity: 25,
            ..TfidfConfig::default()
        };
        // word i appears i+1 times, so weights strictly increase with i
        let doc: Vec<String> = (0..40)
            .flat_map(|i| std::iter::repeat_n(format!("w{i:02}"), i + 1))
            .collect();
        let history = vec![doc];
        let all = BTreeMap::from([("u".to_string(), history.clone())]);
        let kws = topic_keywords("u", &history, &all, &cfg);
        assert_eq!(kws.len(), 25);
        let expected: Vec<String> = (15..40).rev().map(|i| format!("w{i:02}")).collect();
        let got: Vec<String> = kws.into_iter().map(|k| k.surface).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn context_keywords_without_history_are_term_frequencies() {
        let cfg = TfidfConfig {
            threshold: 0.0,
            ..TfidfConfig::default()
        };
        let src = words("b a b");
        let kws = context_keywords(&src, &Vec::<Vec<String>>::new(), &cfg);
        assert_eq!(kws[0].surface, "b");
        assert!((kws[0].weight - 2.0 / 3.0).abs() < 1e-12);
        assert!((kws[1].weight - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn context_keyword_shared_with_every_history_sentence_ranks_last() {
        let cfg = TfidfConfig {
            threshold: 0.0,
            ..TfidfConfig::default()
        };
        let history = vec![words("solar wind"), words("solar cell"), words("solar x")];
        let kws = context_keywords(&words("solar panel price"), &history, &cfg);
        assert_eq!(kws.last().unwrap().surface, "solar");
    }

    #[test]
    fn new_word_outranks_words_seen_in_history() {
        let cfg = TfidfConfig {
            threshold: 0.0,
            ..TfidfConfig::default()
        };
        let history = vec![words("solar panel spec")];
        let kws = context_keywords(&words("solar panel price"), &history, &cfg);
        // price: (1/3)(ln(3/2)+1) = 0.46849; solar, panel: (1/3)(ln(3/3)+1) = 1/3
        assert_eq!(kws[0].surface, "price");
        assert!((kws[0].weight - 0.468_488_369_369_6).abs() < 1e-12);
        assert!((kws[1].weight - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(kws[1].surface, "panel");
        assert_eq!(kws[2].surface, "solar");
    }

    #[test]
    fn frozen_statistics_match_the_pure_computation() {
        let cfg = TfidfConfig {
            threshold: 0.0,
            ..TfidfConfig::default()
        };
        let all = BTreeMap::from([
            ("a".to_string(), vec![words("x y z x")]),
            ("b".to_string(), vec![words("x q")]),
            ("c".to_string(), vec![words("r q q")]),
        ]);
        let stats = DocumentFrequencies::from_docs(all.values().map(|h| h[0].as_slice()));
        assert_eq!(
            topic_keywords_frozen(&all["a"], &stats, true, &cfg),
            topic_keywords("a", &all["a"], &all, &cfg)
        );
        let newcomer = vec![words("q z z")];
        assert_eq!(
            topic_keywords_frozen(&newcomer, &stats, false, &cfg),
            topic_keywords("new", &newcomer, &all, &cfg)
        );
    }

    #[test]
    fn similarity_examples() {
        let a: KeywordVector = [(1, 1.0)].into_iter().collect();
        let b: KeywordVector = [(1, 1.0), (2, 1.0)].into_iter().collect();
        let c: KeywordVector = [(3, 0.5)].into_iter().collect();
        assert!((user_similarity(&b, &b) - 1.0).abs() < 1e-12);
        assert_eq!(user_similarity(&a, &c), 0.0);
        assert!((user_similarity(&a, &b) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(user_similarity(&a, &KeywordVector::default()), 0.0);
    }

    fn vector() -> impl Strategy<Value = KeywordVector> {
        proptest::collection::btree_map(0usize..12, 0.01f64..5.0, 0..8).prop_map(KeywordVector)
    }

    proptest! {
        #[test]
        fn similarity_is_symmetric_and_scale_invariant(a in vector(), b in vector(), s in 0.1f64..100.0) {
            let ab = user_similarity(&a, &b);
            prop_assert!((ab - user_similarity(&b, &a)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
            let scaled: KeywordVector = a.0.iter().map(|(k, w)| (*k, w * s)).collect();
            prop_assert!((user_similarity(&scaled, &b) - ab).abs() < 1e-9);
        }

        #[test]
        fn weights_are_zero_only_for_absent_words(
            doc in proptest::collection::vec("[a-e]", 1..8),
            other in proptest::collection::vec("[a-g]", 0..8),
            w in "[a-g]",
        ) {
            let corpus = vec![doc.clone(), other];
            let weight = tfidf_weight(&w, &doc, &corpus).unwrap();
            prop_assert!(weight >= 0.0);
            prop_assert_eq!(weight == 0.0, !doc.contains(&w));
        }

        #[test]
        fn selections_are_ranked_and_bounded(
            doc in proptest::collection::vec("[a-j]", 1..30),
            cap in 1usize..6,
        ) {
            let cfg = TfidfConfig { threshold: 0.0, topic_capacity: cap, context_capacity: cap };
            let kws = context_keywords(&doc, &[], &cfg);
            prop_assert!(kws.len() <= cap);
            for pair in kws.windows(2) {
                prop_assert_eq!(rank(&pair[0], &pair[1]), Ordering::Less);
            }
        }
    }
}
