//! Per-user topic and context caches and the gated cache read.
//!
//! Profiles are values: the update operations return a new profile and
//! leave their input untouched.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{history_window, Table, TokenId, TranslationTriplet, HISTORY_WINDOW};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::tfidf::{
    context_keywords, topic_keywords_frozen, user_similarity, DocumentFrequencies, Keyword, KeywordVector, TfidfConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeywordEntry {
    pub token: TokenId,
    pub surface: String,
    pub weight: f64,
    /// Number of inputs the profile had seen when the entry was selected.
    pub timestamp: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum Origin {
    #[default]
    OwnHistory,
    Borrowed(String),
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::OwnHistory => f.write_str("own-history"),
            Origin::Borrowed(u) => write!(f, "borrowed:{u}"),
        }
    }
}

impl FromStr for Origin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.strip_prefix("borrowed:") {
            Some(u) => Ok(Origin::Borrowed(u.to_string())),
            None if s == "own-history" => Ok(Origin::OwnHistory),
            None => Err(Error::Config(format!("unknown cache origin `{s}`"))),
        }
    }
}

/// Long-term keywords, ranked by (weight desc, surface asc).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TopicCache {
    pub entries: Vec<KeywordEntry>,
    pub origin: Origin,
}

/// Short-term keywords, oldest first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContextCache {
    pub entries: VecDeque<KeywordEntry>,
}

impl ContextCache {
    /// Enqueues newest-last. A token already present moves to the newest
    /// position; the oldest entries are evicted beyond `capacity`.
    pub fn push(&mut self, entry: KeywordEntry, capacity: usize) {
        if let Some(pos) = self.entries.iter().position(|e| e.token == entry.token) {
            self.entries.remove(pos);
        }
        self.entries.push_back(entry);
        while self.entries.len() > capacity {
            self.entries.pop_front();
        }
    }

    pub fn tokens(&self) -> Vec<TokenId> {
        self.entries.iter().map(|e| e.token).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UserProfile {
    pub user_id: String,
    pub topic: TopicCache,
    pub context: ContextCache,
    pub keyword_vector: KeywordVector,
    /// Most recent inputs, source-side ids, at most `HISTORY_WINDOW`.
    pub history: Vec<Vec<TokenId>>,
    /// Inputs seen so far, including those evicted from `history`.
    pub seen: u64,
}

impl UserProfile {
    pub fn topic_tokens(&self) -> Vec<TokenId> {
        self.topic.entries.iter().map(|e| e.token).collect()
    }

    pub fn context_tokens(&self) -> Vec<TokenId> {
        self.context.tokens()
    }

    pub fn is_empty(&self) -> bool {
        self.topic.entries.is_empty() && self.context.entries.is_empty()
    }

    /// Copy of this profile with `other`'s topic cache in place of its own.
    pub fn with_topic_of(&self, other: &UserProfile) -> UserProfile {
        UserProfile {
            topic: other.topic.clone(),
            keyword_vector: other.keyword_vector.clone(),
            ..self.clone()
        }
    }
}

/// Training-time users: their profiles and the frozen document frequencies
/// of their pooled histories.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UserBank {
    pub stats: DocumentFrequencies,
    pub profiles: BTreeMap<String, UserProfile>,
}

/// Everything the cache operations read besides the profile itself.
#[derive(Clone, Copy, Debug)]
pub struct CacheEnv<'a> {
    pub vocab: &'a Table,
    pub bank: &'a UserBank,
    pub cfg: &'a TfidfConfig,
}

/// Surfaces usable as keywords; reserved and unknown ids are skipped.
fn surfaces<'v>(vocab: &'v Table, ids: &[TokenId]) -> Vec<&'v str> {
    ids.iter()
        .filter(|&&id| !Table::is_reserved(id))
        .map(|&id| vocab.surface(id))
        .collect()
}

fn entries(vocab: &Table, kws: Vec<Keyword>, timestamp: u64) -> Vec<KeywordEntry> {
    kws.into_iter()
        .map(|k| KeywordEntry {
            token: vocab.id(&k.surface),
            surface: k.surface,
            weight: k.weight,
            timestamp,
        })
        .collect()
}

fn vector_of(entries: &[KeywordEntry]) -> KeywordVector {
    entries.iter().map(|e| (e.token, e.weight)).collect()
}

impl<'a> CacheEnv<'a> {
    pub fn new(vocab: &'a Table, bank: &'a UserBank, cfg: &'a TfidfConfig) -> Self {
        Self { vocab, bank, cfg }
    }

    fn topic_entries(&self, user_id: &str, history: &[Vec<TokenId>], timestamp: u64) -> Vec<KeywordEntry> {
        let docs: Vec<Vec<&str>> = history.iter().map(|h| surfaces(self.vocab, h)).collect();
        let member = self.bank.profiles.contains_key(user_id);
        let kws = topic_keywords_frozen(&docs, &self.bank.stats, member, self.cfg);
        entries(self.vocab, kws, timestamp)
    }

    /// Keyword vector of an arbitrary sentence in the topic regime, used to
    /// find a lender for users without history.
    pub fn probe_vector(&self, sentence: &[TokenId]) -> KeywordVector {
        let doc = vec![surfaces(self.vocab, sentence)];
        let kws = topic_keywords_frozen(&doc, &self.bank.stats, false, self.cfg);
        vector_of(&entries(self.vocab, kws, 0))
    }

    /// Most similar bank user other than `exclude`; ties go to the smallest
    /// user id.
    pub fn most_similar(&self, v: &KeywordVector, exclude: &str) -> Option<&'a UserProfile> {
        let mut best: Option<(&UserProfile, f64)> = None;
        for (uid, p) in &self.bank.profiles {
            if uid == exclude {
                continue;
            }
            let s = user_similarity(v, &p.keyword_vector);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((p, s));
            }
        }
        best.map(|(p, _)| p)
    }

    /// Fresh profile. With history the topic cache comes from it; without
    /// history the topic cache is copied from the bank user most similar to
    /// `probe` (the current source, when known). The context cache starts
    /// empty.
    pub fn init_profile(&self, user_id: &str, history: &[Vec<TokenId>], probe: Option<&[TokenId]>) -> UserProfile {
        let history = history_window(history).to_vec();
        let seen = history.len() as u64;
        let mut profile = UserProfile {
            user_id: user_id.to_string(),
            history,
            seen,
            ..UserProfile::default()
        };
        if !profile.history.is_empty() {
            profile.topic.entries = self.topic_entries(user_id, &profile.history, seen);
            profile.keyword_vector = vector_of(&profile.topic.entries);
            return profile;
        }
        let probe_vec = probe.map(|p| self.probe_vector(p)).unwrap_or_default();
        if let Some(lender) = self.most_similar(&probe_vec, user_id) {
            profile.topic = TopicCache {
                entries: lender.topic.entries.clone(),
                origin: Origin::Borrowed(lender.user_id.clone()),
            };
            profile.keyword_vector = lender.keyword_vector.clone();
        }
        profile
    }

    /// Appends `sentence` to the history and recomputes the topic cache.
    pub fn update_topic(&self, profile: &UserProfile, sentence: &[TokenId]) -> UserProfile {
        let mut next = profile.clone();
        next.history.push(sentence.to_vec());
        if next.history.len() > HISTORY_WINDOW {
            next.history.remove(0);
        }
        next.seen += 1;
        next.topic = TopicCache {
            entries: self.topic_entries(&next.user_id, &next.history, next.seen),
            origin: Origin::OwnHistory,
        };
        next.keyword_vector = vector_of(&next.topic.entries);
        next
    }

    /// Enqueues the context keywords of `sentence`, computed against the
    /// profile's current history.
    pub fn update_context(&self, profile: &UserProfile, sentence: &[TokenId]) -> UserProfile {
        let mut next = profile.clone();
        let source = surfaces(self.vocab, sentence);
        let history: Vec<Vec<&str>> = next.history.iter().map(|h| surfaces(self.vocab, h)).collect();
        let kws = context_keywords(&source, &history, self.cfg);
        for e in entries(self.vocab, kws, next.seen) {
            next.context.push(e, self.cfg.context_capacity);
        }
        next
    }

    /// Update order used for every new input: context first, so the context
    /// keywords of a sentence are not computed against itself.
    pub fn observe(&self, profile: &UserProfile, sentence: &[TokenId]) -> UserProfile {
        let p = self.update_context(profile, sentence);
        self.update_topic(&p, sentence)
    }

    /// Profile of a user about to translate `probe` after `history`: topic
    /// cache from the history (or borrowed), context cache from replaying the
    /// history inputs in order.
    pub fn profile_from_history(
        &self,
        user_id: &str,
        history: &[Vec<TokenId>],
        probe: Option<&[TokenId]>,
    ) -> UserProfile {
        let window = history_window(history);
        let mut profile = self.init_profile(user_id, window, probe);
        let mut replay = UserProfile {
            user_id: user_id.to_string(),
            ..UserProfile::default()
        };
        for sentence in window {
            replay = self.update_context(&replay, sentence);
            replay.history.push(sentence.clone());
            replay.seen += 1;
        }
        profile.context = replay.context;
        profile
    }
}

/// Each user's pooled history: distinct history sentences in order of first
/// appearance, windowed to the most recent `HISTORY_WINDOW`.
pub fn pooled_histories(triplets: &[TranslationTriplet]) -> BTreeMap<String, Vec<Vec<TokenId>>> {
    let mut pooled: BTreeMap<String, Vec<Vec<TokenId>>> = BTreeMap::new();
    for t in triplets {
        let entry = pooled.entry(t.user_id.clone()).or_default();
        for h in &t.history {
            if !entry.contains(h) {
                entry.push(h.clone());
            }
        }
    }
    for h in pooled.values_mut() {
        let start = h.len().saturating_sub(HISTORY_WINDOW);
        h.drain(..start);
    }
    pooled
}

impl UserBank {
    /// Bank of the given users; profiles are built from their pooled
    /// histories. Users without any history are left out.
    pub fn build(pooled: &BTreeMap<String, Vec<Vec<TokenId>>>, vocab: &Table, cfg: &TfidfConfig) -> Self {
        let pooled: BTreeMap<&String, &Vec<Vec<TokenId>>> = pooled.iter().filter(|(_, h)| !h.is_empty()).collect();
        let docs: Vec<Vec<&str>> = pooled
            .values()
            .map(|h| h.iter().flat_map(|s| surfaces(vocab, s)).collect())
            .collect();
        let mut bank = UserBank {
            stats: DocumentFrequencies::from_docs(docs.iter().map(Vec::as_slice)),
            profiles: pooled.keys().map(|&u| (u.clone(), UserProfile::default())).collect(),
        };
        let profiles = {
            let env = CacheEnv::new(vocab, &bank, cfg);
            pooled
                .iter()
                .map(|(&u, &h)| (u.clone(), env.profile_from_history(u, h, None)))
                .collect()
        };
        bank.profiles = profiles;
        bank
    }
}

/// `W_t` and `W_r`: `d×d` for the elementwise gate, `1×d` for the scalar
/// gate.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams<T> {
    pub w_t: Tensor<T>,
    pub w_r: Tensor<T>,
}

fn pooled_mean<T: Scalar>(g: &mut Graph<T>, table: Var, ids: &[TokenId], d: usize) -> Result<Var> {
    if ids.is_empty() {
        return Ok(g.constant(Tensor::zeros(&[1, d])));
    }
    let rows = g.embedding(table, ids)?;
    let mean = g.mean(rows, 0)?;
    g.reshape(mean, &[1, d])
}

/// Behaviour vector `r = α⊙c̄_t + (1−α)⊙c̄_c` with
/// `α = σ(W_t c̄_t + W_r c̄_c)`, where `c̄` are mean-pooled cache
/// embeddings. `None` when both caches are empty (`r = 0`).
pub fn behavior_vector<T: Scalar>(
    g: &mut Graph<T>,
    table: Var,
    w_t: Var,
    w_r: Var,
    topic: &[TokenId],
    context: &[TokenId],
) -> Result<Option<Var>> {
    if topic.is_empty() && context.is_empty() {
        return Ok(None);
    }
    let table_shape = g.shape(table).to_vec();
    if table_shape.len() != 2 {
        return Err(Error::shape("cache read", &table_shape, g.shape(w_t)));
    }
    let d = table_shape[1];
    let ct = pooled_mean(g, table, topic, d)?;
    let cc = pooled_mean(g, table, context, d)?;
    let zt = g.matmul_t(ct, w_t)?;
    let zr = g.matmul_t(cc, w_r)?;
    if g.shape(zt) != g.shape(zr) {
        return Err(Error::shape("cache gate", g.shape(w_t), g.shape(w_r)));
    }
    let pre = g.add(zt, zr)?;
    let alpha = g.sigmoid(pre);
    let diff = g.sub(ct, cc)?;
    let gated = g.mul(diff, alpha)?;
    Ok(Some(g.add(cc, gated)?))
}

/// Evaluates the cache read outside of any training graph.
pub fn read<T: Scalar>(profile: &UserProfile, embeddings: &Tensor<T>, gate: &GateParams<T>) -> Result<Vec<T>> {
    let d = embeddings.cols();
    let mut g = Graph::new();
    let table = g.constant(embeddings.clone());
    let w_t = g.constant(gate.w_t.clone());
    let w_r = g.constant(gate.w_r.clone());
    match behavior_vector(
        &mut g,
        table,
        w_t,
        w_r,
        &profile.topic_tokens(),
        &profile.context_tokens(),
    )? {
        Some(r) => Ok(g.value(r).data().to_vec()),
        None => Ok(vec![T::zero(); d]),
    }
}

/// `x̂_i = x_i + r` for every row of `source` (`T×d`).
pub fn augment_source<T: Scalar>(source: &Tensor<T>, r: &[T]) -> Result<Tensor<T>> {
    if source.cols() != r.len() {
        return Err(Error::shape("augment_source", source.shape(), &[r.len()]));
    }
    let mut out = source.clone();
    for row in out.data_mut().chunks_mut(r.len()) {
        for (x, &v) in row.iter_mut().zip(r) {
            *x += v;
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredKeyword {
    token: String,
    weight: f64,
    #[serde(default)]
    timestamp: u64,
}

/// One line of a profile store.
#[derive(Debug, Serialize, Deserialize)]
struct StoredProfile {
    user_id: String,
    topic: Vec<StoredKeyword>,
    context: Vec<StoredKeyword>,
    origin: String,
    #[serde(default)]
    history: Vec<String>,
    #[serde(default)]
    seen: u64,
}

impl StoredProfile {
    fn from_profile(p: &UserProfile, vocab: &Table) -> Self {
        let kw = |e: &KeywordEntry| StoredKeyword {
            token: e.surface.clone(),
            weight: e.weight,
            timestamp: e.timestamp,
        };
        StoredProfile {
            user_id: p.user_id.clone(),
            topic: p.topic.entries.iter().map(kw).collect(),
            context: p.context.entries.iter().map(kw).collect(),
            origin: p.topic.origin.to_string(),
            history: p.history.iter().map(|h| vocab.decode(h).join(" ")).collect(),
            seen: p.seen,
        }
    }

    fn into_profile(self, vocab: &Table) -> Result<UserProfile> {
        let entry = |k: StoredKeyword| KeywordEntry {
            token: vocab.id(&k.token),
            surface: k.token,
            weight: k.weight,
            timestamp: k.timestamp,
        };
        let topic: Vec<KeywordEntry> = self.topic.into_iter().map(entry).collect();
        Ok(UserProfile {
            user_id: self.user_id,
            keyword_vector: vector_of(&topic),
            topic: TopicCache {
                entries: topic,
                origin: self.origin.parse()?,
            },
            context: ContextCache {
                entries: self.context.into_iter().map(entry).collect(),
            },
            history: self
                .history
                .iter()
                .map(|h| vocab.encode(&crate::corpus::tokenize(h)))
                .collect(),
            seen: self.seen,
        })
    }
}

pub fn profiles_to_jsonl<'p>(profiles: impl IntoIterator<Item = &'p UserProfile>, vocab: &Table) -> String {
    let mut out = String::new();
    for p in profiles {
        out.push_str(&serde_json::to_string(&StoredProfile::from_profile(p, vocab)).expect("profile serialises"));
        out.push('\n');
    }
    out
}

pub fn profiles_from_jsonl(text: &str, vocab: &Table) -> Result<Vec<UserProfile>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let stored: StoredProfile =
                serde_json::from_str(l).map_err(|source| Error::Json { line: i + 1, source })?;
            stored.into_profile(vocab)
        })
        .collect()
}

pub fn save_profiles(path: &Path, profiles: &[UserProfile], vocab: &Table) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(profiles_to_jsonl(profiles, vocab).as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn load_profiles(path: &Path, vocab: &Table) -> Result<Vec<UserProfile>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    profiles_from_jsonl(&text, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(words: &[&str]) -> Table {
        let mut t = Table::default();
        for w in words {
            t.insert(w);
        }
        t
    }

    fn ids(t: &Table, s: &str) -> Vec<TokenId> {
        t.encode(&s.split_whitespace().collect::<Vec<_>>())
    }

    fn entry(token: TokenId) -> KeywordEntry {
        KeywordEntry {
            token,
            surface: format!("t{token}"),
            weight: 1.0,
            timestamp: 0,
        }
    }

    fn zero_threshold() -> TfidfConfig {
        TfidfConfig {
            threshold: 0.0,
            ..TfidfConfig::default()
        }
    }

    #[test]
    fn fifo_capacity_and_refresh() {
        let mut c = ContextCache::default();
        for t in 0..35 {
            c.push(entry(t), 35);
        }
        c.push(entry(100), 35);
        c.push(entry(101), 35);
        assert_eq!(c.entries.len(), 35);
        assert_eq!(c.entries.front().unwrap().token, 2);

        c.push(entry(10), 35);
        assert_eq!(c.entries.len(), 35);
        assert_eq!(c.entries.back().unwrap().token, 10);
        assert_eq!(c.entries.iter().filter(|e| e.token == 10).count(), 1);
    }

    #[test]
    fn profile_with_history_uses_its_own_keywords() {
        let v = vocab(&["a", "b", "c", "d"]);
        let cfg = zero_threshold();
        let bank = UserBank::default();
        let env = CacheEnv::new(&v, &bank, &cfg);
        let h = vec![ids(&v, "a b a"), ids(&v, "c")];
        let p = env.init_profile("u", &h, None);
        assert_eq!(p.topic.origin, Origin::OwnHistory);
        assert!(p.context.entries.is_empty());
        assert_eq!(p.topic.entries[0].surface, "a");
        assert_eq!(p.topic.entries.len(), 3);
        assert_eq!(p.keyword_vector.0.len(), 3);
    }

    #[test]
    fn historyless_user_borrows_the_most_similar_topic_cache() {
        let v = vocab(&["x", "y", "z", "q"]);
        let cfg = zero_threshold();
        let pooled = BTreeMap::from([
            ("A".to_string(), vec![ids(&v, "x y x")]),
            ("B".to_string(), vec![ids(&v, "z q")]),
        ]);
        let bank = UserBank::build(&pooled, &v, &cfg);
        let env = CacheEnv::new(&v, &bank, &cfg);
        let probe = ids(&v, "q q z");
        let p = env.init_profile("new", &[], Some(&probe));
        assert_eq!(p.topic.origin, Origin::Borrowed("B".into()));
        assert_eq!(p.topic.entries, bank.profiles["B"].topic.entries);

        // no probe: every similarity is zero and the smallest id wins
        let p = env.init_profile("new", &[], None);
        assert_eq!(p.topic.origin, Origin::Borrowed("A".into()));
    }

    #[test]
    fn historyless_user_without_bank_reads_zero() {
        let v = vocab(&["x"]);
        let cfg = TfidfConfig::default();
        let bank = UserBank::default();
        let env = CacheEnv::new(&v, &bank, &cfg);
        let p = env.init_profile("new", &[], None);
        assert!(p.is_empty());
        let table = Tensor::<f64>::ones(&[5, 3]);
        let gate = GateParams {
            w_t: Tensor::ones(&[3, 3]),
            w_r: Tensor::ones(&[3, 3]),
        };
        assert_eq!(read(&p, &table, &gate).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn first_real_input_replaces_a_borrowed_cache() {
        let v = vocab(&["x", "y", "z", "q", "fresh"]);
        let cfg = zero_threshold();
        let pooled = BTreeMap::from([("A".to_string(), vec![ids(&v, "x y")])]);
        let bank = UserBank::build(&pooled, &v, &cfg);
        let env = CacheEnv::new(&v, &bank, &cfg);
        let p = env.init_profile("new", &[], None);
        assert!(matches!(p.topic.origin, Origin::Borrowed(_)));
        let s = ids(&v, "fresh q");
        let p2 = env.update_topic(&p, &s);
        assert_eq!(p2.topic.origin, Origin::OwnHistory);
        let got: Vec<_> = p2.topic.entries.iter().map(|e| e.surface.as_str()).collect();
        assert_eq!(got, ["fresh", "q"]);
        // input is untouched and repeated updates are deterministic
        assert!(matches!(p.topic.origin, Origin::Borrowed(_)));
        assert_eq!(env.update_topic(&p, &s), p2);
    }

    #[test]
    fn unique_word_enters_the_topic_cache_when_heavy_enough() {
        // capacity 2; the user's history has "y" (shared with A) twice
        // and "x" once. Adding "uniq" twice: weights on the 5-token
        // pooled doc against N=2 (A plus the newcomer):
        //   uniq: (2/5)(ln(3/2)+1) = 0.562186, y: (2/5)(ln(3/3)+1) = 0.4,
        //   x:    (1/5)(ln(3/2)+1) = 0.281093
        let v = vocab(&["x", "y", "uniq"]);
        let cfg = TfidfConfig {
            threshold: 0.0,
            topic_capacity: 2,
            context_capacity: 35,
        };
        let pooled = BTreeMap::from([("A".to_string(), vec![ids(&v, "y")])]);
        let bank = UserBank::build(&pooled, &v, &cfg);
        let env = CacheEnv::new(&v, &bank, &cfg);
        let p = env.init_profile("u", &[ids(&v, "y x y")], None);
        let p = env.update_topic(&p, &ids(&v, "uniq uniq"));
        let got: Vec<_> = p
            .topic
            .entries
            .iter()
            .map(|e| (e.surface.as_str(), (e.weight * 1e6).round() / 1e6))
            .collect();
        assert_eq!(got, [("uniq", 0.562186), ("y", 0.4)]);
    }

    #[test]
    fn context_update_enqueues_in_rank_order_and_skips_unknown_words() {
        let v = vocab(&["a", "b", "c"]);
        let cfg = zero_threshold();
        let bank = UserBank::default();
        let env = CacheEnv::new(&v, &bank, &cfg);
        let p = env.init_profile("u", &[], None);
        let p = env.update_context(&p, &ids(&v, "c a a b never-seen"));
        let got: Vec<_> = p.context.entries.iter().map(|e| e.surface.as_str()).collect();
        assert_eq!(got, ["a", "b", "c"]);
    }

    #[test]
    fn gate_examples() {
        let table = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let zero_gate = GateParams {
            w_t: Tensor::zeros(&[2, 2]),
            w_r: Tensor::zeros(&[2, 2]),
        };
        let mut p = UserProfile::default();
        p.topic.entries.push(entry(0));
        p.context.entries.push_back(entry(1));
        assert_eq!(read(&p, &table, &zero_gate).unwrap(), vec![0.5, 0.5]);

        p.context.entries.clear();
        assert_eq!(read(&p, &table, &zero_gate).unwrap(), vec![0.5, 0.0]);

        p.topic.entries.clear();
        assert_eq!(read(&p, &table, &zero_gate).unwrap(), vec![0.0, 0.0]);

        let bad_gate = GateParams {
            w_t: Tensor::zeros(&[3, 3]),
            w_r: Tensor::zeros(&[3, 3]),
        };
        p.topic.entries.push(entry(0));
        assert!(matches!(read(&p, &table, &bad_gate), Err(Error::Shape { .. })));
    }

    #[test]
    fn identical_caches_give_the_pooled_vector() {
        let table = Tensor::<f64>::from_f64(&[3, 2], &[0.3, -1.2, 2.0, 0.7, -0.4, 0.1]).unwrap();
        let gate = GateParams {
            w_t: Tensor::from_f64(&[2, 2], &[0.5, -1.0, 2.0, 0.3]).unwrap(),
            w_r: Tensor::from_f64(&[2, 2], &[-0.2, 0.8, 1.1, -0.6]).unwrap(),
        };
        let mut p = UserProfile::default();
        for t in [0, 2] {
            p.topic.entries.push(entry(t));
            p.context.entries.push_back(entry(t));
        }
        let r = read(&p, &table, &gate).unwrap();
        assert_eq!(r, vec![(0.3 - 0.4) / 2.0, (-1.2 + 0.1) / 2.0]);
    }

    #[test]
    fn augment_examples() {
        let x = Tensor::<f64>::from_f64(&[7, 2], &[0.25; 14]).unwrap();
        assert_eq!(augment_source(&x, &[0.0, 0.0]).unwrap(), x);
        let r = [0.1, -3.0];
        let there = augment_source(&x, &r).unwrap();
        assert_eq!(there.shape(), &[7, 2]);
        let back = augment_source(&there, &[-0.1, 3.0]).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn profile_store_round_trip() {
        let v = vocab(&["a", "b", "c"]);
        let cfg = zero_threshold();
        let bank = UserBank::default();
        let env = CacheEnv::new(&v, &bank, &cfg);
        let p = env.profile_from_history("u", &[ids(&v, "a b"), ids(&v, "b c")], None);
        let text = profiles_to_jsonl([&p], &v);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for f in ["user_id", "topic", "context", "origin"] {
            assert!(first.get(f).is_some(), "{f}");
        }
        let back = profiles_from_jsonl(&text, &v).unwrap();
        assert_eq!(back, vec![p]);
    }

    #[test]
    fn pooled_histories_dedupe_and_window() {
        let trip = |h: Vec<Vec<TokenId>>| TranslationTriplet {
            user_id: "u".into(),
            history: h,
            source: vec![4, 5],
            target: vec![4],
        };
        let sents: Vec<Vec<TokenId>> = (0..14).map(|i| vec![i + 4]).collect();
        let triplets: Vec<_> = (0..14usize)
            .map(|n| trip(sents[n.saturating_sub(10)..n].to_vec()))
            .collect();
        let pooled = pooled_histories(&triplets);
        assert_eq!(pooled["u"], sents[3..13].to_vec());
    }
}
