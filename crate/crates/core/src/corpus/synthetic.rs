//! Synthetic personalised-translation corpus.
//!
//! Personalisation is encoded as lexical disambiguation: every user belongs
//! to one topic, each ambiguous source word has one translation per topic,
//! and the only way to pick the right one for a sentence without a topic
//! marker is to know which topic the user writes about. Topic markers show
//! up in a fraction of sentences, so a user's history reveals the topic
//! while most individual sources do not.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_records, CorpusRecord, HISTORY_WINDOW};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Training users.
    pub num_users: usize,
    pub dev_users: usize,
    pub test_users: usize,
    pub num_topics: usize,
    pub ambiguous_vocab_size: usize,
    pub shared_vocab_size: usize,
    pub sentences_per_user: usize,
    pub seed: u64,
    /// Marker words available to each topic.
    pub topic_words: usize,
    /// Marker words each user draws from (a subset of the topic's).
    pub favourite_words: usize,
    /// Probability that a sentence carries a topic marker.
    pub marker_rate: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_users: 60,
            dev_users: 10,
            test_users: 20,
            num_topics: 2,
            ambiguous_vocab_size: 20,
            shared_vocab_size: 40,
            sentences_per_user: 30,
            seed: 42,
            topic_words: 8,
            favourite_words: 3,
            marker_rate: 0.4,
        }
    }
}

impl SyntheticSpec {
    /// Spec with dev/test user counts derived from the training count.
    pub fn with_users(num_users: usize) -> Self {
        Self {
            num_users,
            dev_users: (num_users / 6).max(1),
            test_users: (num_users / 3).max(1),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_topics < 2 {
            return fail("at least two topics are required");
        }
        if self.num_users == 0 || self.test_users == 0 {
            return fail("train and test splits need at least one user");
        }
        if self.ambiguous_vocab_size == 0 || self.shared_vocab_size == 0 {
            return fail("ambiguous and shared vocabularies must be non-empty");
        }
        if self.sentences_per_user == 0 {
            return fail("sentences_per_user must be positive");
        }
        if self.topic_words == 0 || self.favourite_words == 0 || self.favourite_words > self.topic_words {
            return fail("need 0 < favourite_words <= topic_words");
        }
        if !(0.0..=1.0).contains(&self.marker_rate) {
            return fail("marker_rate must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Ground truth needed to score disambiguation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLexicon {
    /// Ambiguous source word → its translation under each topic.
    pub ambiguous: BTreeMap<String, Vec<String>>,
    pub user_topics: BTreeMap<String, usize>,
}

impl SyntheticLexicon {
    pub fn ambiguous_targets(&self) -> std::collections::HashSet<String> {
        self.ambiguous.values().flatten().cloned().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub train: Vec<CorpusRecord>,
    pub dev: Vec<CorpusRecord>,
    pub test: Vec<CorpusRecord>,
    pub lexicon: SyntheticLexicon,
}

impl SyntheticCorpus {
    /// Writes `train.jsonl`, `dev.jsonl`, `test.jsonl` and `lexicon.json`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_records(&dir.join("train.jsonl"), &self.train)?;
        write_records(&dir.join("dev.jsonl"), &self.dev)?;
        write_records(&dir.join("test.jsonl"), &self.test)?;
        let lex = dir.join("lexicon.json");
        let text = serde_json::to_string_pretty(&self.lexicon).expect("lexicon serialises");
        fs::write(&lex, text).map_err(|e| Error::io(&lex, e))
    }
}

fn ambiguous_translation(word: usize, topic: usize) -> String {
    format!("b{word}t{topic}")
}

struct UserPlan {
    id: String,
    topic: usize,
    favourites: Vec<usize>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut lexicon = SyntheticLexicon::default();
    for j in 0..spec.ambiguous_vocab_size {
        lexicon.ambiguous.insert(
            format!("a{j}"),
            (0..spec.num_topics).map(|t| ambiguous_translation(j, t)).collect(),
        );
    }

    let mut split = |prefix: &str, n: usize, rng: &mut ChaCha8Rng| -> Vec<UserPlan> {
        let mut topics: Vec<usize> = (0..n).map(|i| i % spec.num_topics).collect();
        topics.shuffle(rng);
        topics
            .into_iter()
            .enumerate()
            .map(|(i, topic)| {
                let mut words: Vec<usize> = (0..spec.topic_words).collect();
                words.shuffle(rng);
                words.truncate(spec.favourite_words);
                words.sort_unstable();
                let id = format!("{prefix}{i:03}");
                lexicon.user_topics.insert(id.clone(), topic);
                UserPlan {
                    id,
                    topic,
                    favourites: words,
                }
            })
            .collect()
    };
    let train_users = split("tr", spec.num_users, &mut rng);
    let dev_users = split("dv", spec.dev_users, &mut rng);
    let test_users = split("te", spec.test_users, &mut rng);

    let records = |users: &[UserPlan], rng: &mut ChaCha8Rng| -> Vec<CorpusRecord> {
        let mut out = Vec::new();
        for user in users {
            let mut sources: Vec<String> = Vec::new();
            for _ in 0..spec.sentences_per_user {
                let (src, tgt) = sentence(spec, user, rng);
                let start = sources.len().saturating_sub(HISTORY_WINDOW);
                out.push(CorpusRecord {
                    user_id: user.id.clone(),
                    history: sources[start..].to_vec(),
                    source: src.clone(),
                    target: Some(tgt),
                });
                sources.push(src);
            }
        }
        out
    };
    let train = records(&train_users, &mut rng);
    let dev = records(&dev_users, &mut rng);
    let test = records(&test_users, &mut rng);
    Ok(SyntheticCorpus {
        train,
        dev,
        test,
        lexicon,
    })
}

fn sentence(spec: &SyntheticSpec, user: &UserPlan, rng: &mut ChaCha8Rng) -> (String, String) {
    let len = rng.gen_range(4..=7);
    let n_ambiguous = if rng.gen_bool(0.5) { 2 } else { 1 };
    let mut pairs: Vec<(String, String)> = Vec::with_capacity(len);
    for _ in 0..n_ambiguous {
        let j = rng.gen_range(0..spec.ambiguous_vocab_size);
        pairs.push((format!("a{j}"), ambiguous_translation(j, user.topic)));
    }
    if rng.gen_bool(spec.marker_rate) {
        let m = user.favourites[rng.gen_range(0..user.favourites.len())];
        pairs.push((format!("k{}n{m}", user.topic), format!("q{}n{m}", user.topic)));
    }
    while pairs.len() < len {
        let i = rng.gen_range(0..spec.shared_vocab_size);
        pairs.push((format!("w{i}"), format!("v{i}")));
    }
    pairs.shuffle(rng);
    let (src, tgt): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    (src.join(" "), tgt.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;
    use std::collections::HashSet;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            num_users: 4,
            dev_users: 2,
            test_users: 2,
            num_topics: 2,
            seed: 7,
            sentences_per_user: 12,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn output_files_are_byte_identical_across_runs() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic(&small()).unwrap().write_to(a.path()).unwrap();
        generate_synthetic(&small()).unwrap().write_to(b.path()).unwrap();
        for f in ["train.jsonl", "dev.jsonl", "test.jsonl", "lexicon.json"] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn ambiguous_words_follow_the_user_topic() {
        let c = generate_synthetic(&small()).unwrap();
        for r in c.train.iter().chain(&c.dev).chain(&c.test) {
            let topic = c.lexicon.user_topics[&r.user_id];
            let src = tokenize(&r.source);
            let tgt = tokenize(r.target.as_deref().unwrap());
            assert_eq!(src.len(), tgt.len());
            for (s, t) in src.iter().zip(&tgt) {
                if let Some(options) = c.lexicon.ambiguous.get(s) {
                    assert_eq!(t, &options[topic]);
                }
            }
        }
    }

    #[test]
    fn translations_partition_by_topic() {
        // every use of a topic-t translation comes from a topic-t user
        let c = generate_synthetic(&small()).unwrap();
        let mut seen: BTreeMap<String, HashSet<usize>> = BTreeMap::new();
        for r in &c.train {
            let topic = c.lexicon.user_topics[&r.user_id];
            for t in tokenize(r.target.as_deref().unwrap()) {
                if t.starts_with('b') {
                    seen.entry(t).or_default().insert(topic);
                }
            }
        }
        for (word, topics) in seen {
            let expected: usize = word.rsplit('t').next().unwrap().parse().unwrap();
            assert_eq!(topics, HashSet::from([expected]), "{word}");
        }
    }

    #[test]
    fn test_users_are_unseen_in_training() {
        let c = generate_synthetic(&small()).unwrap();
        let train: HashSet<_> = c.train.iter().map(|r| &r.user_id).collect();
        assert!(c.test.iter().all(|r| !train.contains(&r.user_id)));
        assert!(c.dev.iter().all(|r| !train.contains(&r.user_id)));
    }

    #[test]
    fn histories_are_capped_and_precede_the_source() {
        let c = generate_synthetic(&small()).unwrap();
        let user: Vec<_> = c.train.iter().filter(|r| r.user_id == "tr000").collect();
        assert!(user[0].history.is_empty());
        assert_eq!(user[11].history.len(), HISTORY_WINDOW);
        assert_eq!(user[11].history.last().unwrap(), &user[10].source);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = SyntheticSpec {
            num_topics: 1,
            ..small()
        };
        assert!(matches!(generate_synthetic(&bad), Err(Error::Config(_))));
    }
}
