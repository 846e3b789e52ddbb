//! Corpus BLEU and the cache-swap diagnostics.

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{Origin, UserProfile};
use crate::corpus::{TranslationTriplet, UNK};
use crate::error::{Error, Result};
use crate::model::{CacheTokens, DecodeMode};
use crate::tfidf::{user_similarity, KeywordVector};
use crate::training::Engine;

const MAX_ORDER: usize = 4;
const SMOOTHING: f64 = 1e-9;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-4 in `[0, 100]` with a single reference per hypothesis.
/// Matching is case-insensitive; a zero n-gram precision is replaced by
/// `1e-9`.
pub fn bleu<S: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<S>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Domain(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::Domain("BLEU of an empty corpus".into()));
    }
    let lower = |s: &[S]| -> Vec<String> { s.iter().map(|t| t.as_ref().to_lowercase()).collect() };
    let mut matched = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let (h, r) = (lower(h), lower(r));
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            for (g, c) in &hc {
                matched[n - 1] += (*c).min(rc.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let log_precision: f64 = (0..MAX_ORDER)
        .map(|i| {
            let p = if total[i] == 0 || matched[i] == 0 {
                SMOOTHING
            } else {
                matched[i] as f64 / total[i] as f64
            };
            p.ln()
        })
        .sum::<f64>()
        / MAX_ORDER as f64;
    let brevity = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok((100.0 * brevity * log_precision.exp()).clamp(0.0, 100.0))
}

/// Position-aligned accuracy on reference tokens from `ambiguous`:
/// `(correct, total)`.
pub fn ambiguous_accuracy<S: AsRef<str>>(
    hypotheses: &[Vec<S>],
    references: &[Vec<S>],
    ambiguous: &HashSet<String>,
) -> (usize, usize) {
    let mut correct = 0;
    let mut total = 0;
    for (h, r) in hypotheses.iter().zip(references) {
        for (i, t) in r.iter().enumerate() {
            if ambiguous.contains(t.as_ref()) {
                total += 1;
                if h.get(i).map(AsRef::as_ref) == Some(t.as_ref()) {
                    correct += 1;
                }
            }
        }
    }
    (correct, total)
}

/// Bank user sharing no topic keyword with `v` (the smallest such id), or
/// failing that the least similar one. `exclude` is never returned.
pub fn dissimilar_user<'a>(
    profiles: &'a BTreeMap<String, UserProfile>,
    v: &KeywordVector,
    exclude: &[&str],
) -> Option<&'a UserProfile> {
    let candidates = || profiles.values().filter(|p| !exclude.contains(&p.user_id.as_str()));
    candidates().find(|p| !p.keyword_vector.shares_keyword(v)).or_else(|| {
        let mut best: Option<(&UserProfile, f64)> = None;
        for p in candidates() {
            let s = user_similarity(v, &p.keyword_vector);
            if best.is_none_or(|(_, b)| s < b) {
                best = Some((p, s));
            }
        }
        best.map(|(p, _)| p)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub user_id: String,
    pub origin: String,
    pub source: String,
    pub reference: String,
    pub own: String,
    pub similar_user: Option<String>,
    pub similar: String,
    pub dissimilar_user: Option<String>,
    pub dissimilar: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub s_bleu: f64,
    pub d_bleu: f64,
    pub s_sim: f64,
    pub d_sim: f64,
    /// Percentage of ambiguous reference tokens translated correctly, when a
    /// lexicon was supplied.
    pub ambiguous_accuracy: Option<f64>,
    /// Instances whose topic cache was borrowed from a training user.
    pub borrowed: usize,
    /// Instances with a non-empty history whose caches were both empty.
    pub empty_with_history: usize,
    pub sentences: Vec<SentenceRecord>,
}

/// Profiles of evaluation instances: each built from the instance's own
/// history, with the source as the similarity probe.
pub fn instance_profiles(engine: &Engine, triplets: &[TranslationTriplet]) -> Vec<UserProfile> {
    let env = engine.env();
    triplets
        .par_iter()
        .map(|t| env.profile_from_history(&t.user_id, &t.history, Some(&t.source)))
        .collect()
}

/// Decodes of `triplets` under the matching `profiles`.
pub fn translate_all(
    engine: &Engine,
    triplets: &[TranslationTriplet],
    profiles: &[UserProfile],
    mode: DecodeMode,
) -> Result<Vec<Vec<String>>> {
    triplets
        .par_iter()
        .zip(profiles)
        .map(|(t, p)| engine.translate_ids(&t.source, &CacheTokens::from(p), mode))
        .map(|r| r.map(|ids| engine.target_surfaces(&ids)))
        .collect()
}

/// Corpus BLEU of `triplets` decoded with their own caches.
pub fn corpus_bleu(engine: &Engine, triplets: &[TranslationTriplet], mode: DecodeMode) -> Result<f64> {
    let profiles = instance_profiles(engine, triplets);
    let hyps = translate_all(engine, triplets, &profiles, mode)?;
    bleu(&hyps, &references(engine, triplets))
}

fn references(engine: &Engine, triplets: &[TranslationTriplet]) -> Vec<Vec<String>> {
    triplets.iter().map(|t| engine.target_surfaces(&t.target)).collect()
}

/// Own, similar-swap and dissimilar-swap decodes with the two lenders.
type SwapRow = (Vec<String>, Vec<String>, Vec<String>, Option<String>, Option<String>);

/// Decodes every instance with its own caches and with the topic cache of
/// a similar and a dissimilar training user. Profiles are only read.
pub fn cache_swap_eval(
    engine: &Engine,
    triplets: &[TranslationTriplet],
    profiles: &[UserProfile],
    mode: DecodeMode,
    ambiguous: Option<&HashSet<String>>,
) -> Result<EvalReport> {
    if profiles.len() != triplets.len() {
        return Err(Error::Domain("one profile per instance is required".into()));
    }
    for (t, p) in triplets.iter().zip(profiles) {
        if t.user_id != p.user_id {
            return Err(Error::UnknownUser(t.user_id.clone()));
        }
    }
    let bank = &engine.bank.profiles;
    let env = engine.env();
    let rows: Vec<SwapRow> = triplets
        .par_iter()
        .zip(profiles)
        .map(|(t, p)| {
            let similar = env.most_similar(&p.keyword_vector, &t.user_id);
            let mut exclude = vec![t.user_id.as_str()];
            if let Some(s) = similar {
                exclude.push(&s.user_id);
            }
            let dissimilar = dissimilar_user(bank, &p.keyword_vector, &exclude);
            let run = |q: &UserProfile| {
                engine
                    .translate_ids(&t.source, &CacheTokens::from(q), mode)
                    .map(|ids| engine.target_surfaces(&ids))
            };
            let own = run(p)?;
            let s = match similar {
                Some(s) => run(&p.with_topic_of(s))?,
                None => own.clone(),
            };
            let d = match dissimilar {
                Some(d) => run(&p.with_topic_of(d))?,
                None => own.clone(),
            };
            Ok((
                own,
                s,
                d,
                similar.map(|u| u.user_id.clone()),
                dissimilar.map(|u| u.user_id.clone()),
            ))
        })
        .collect::<Result<_>>()?;

    let refs = references(engine, triplets);
    let own: Vec<Vec<String>> = rows.iter().map(|r| r.0.clone()).collect();
    let sim: Vec<Vec<String>> = rows.iter().map(|r| r.1.clone()).collect();
    let dis: Vec<Vec<String>> = rows.iter().map(|r| r.2.clone()).collect();
    let ambiguous_accuracy = ambiguous.map(|set| {
        let (c, n) = ambiguous_accuracy(&own, &refs, set);
        if n == 0 {
            0.0
        } else {
            100.0 * c as f64 / n as f64
        }
    });
    let borrowed = profiles
        .iter()
        .filter(|p| matches!(p.topic.origin, Origin::Borrowed(_)))
        .count();
    let empty_with_history = triplets
        .iter()
        .zip(profiles)
        .filter(|(t, p)| {
            let known = t.history.iter().flatten().any(|&id| id != UNK);
            known && p.is_empty()
        })
        .count();
    let source_text = |t: &TranslationTriplet| engine.vocab.source.decode(&t.source).join(" ");
    let sentences = triplets
        .iter()
        .zip(profiles)
        .zip(&rows)
        .zip(&refs)
        .map(|(((t, p), r), reference)| SentenceRecord {
            user_id: t.user_id.clone(),
            origin: p.topic.origin.to_string(),
            source: source_text(t),
            reference: reference.join(" "),
            own: r.0.join(" "),
            similar_user: r.3.clone(),
            similar: r.1.join(" "),
            dissimilar_user: r.4.clone(),
            dissimilar: r.2.join(" "),
        })
        .collect();
    Ok(EvalReport {
        bleu: bleu(&own, &refs)?,
        s_bleu: bleu(&sim, &refs)?,
        d_bleu: bleu(&dis, &refs)?,
        s_sim: bleu(&sim, &own)?,
        d_sim: bleu(&dis, &own)?,
        ambiguous_accuracy,
        borrowed,
        empty_with_history,
        sentences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn identity_is_100() {
        let x = vec![toks("a b c d e"), toks("f g h i")];
        assert!((bleu(&x, &x).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn empty_hypotheses_score_zero() {
        let h = vec![Vec::<String>::new(), Vec::new()];
        let r = vec![toks("a b"), toks("c")];
        assert_eq!(bleu(&h, &r).unwrap(), 0.0);
        assert!(bleu::<String>(&[], &[]).is_err());
    }

    #[test]
    fn hand_computed_the_the_the() {
        // p1 = 1/3 (clipped to one "the"), p2..p4 have no matches, so they
        // become 1e-9; hyp (3) is longer than ref (2) so BP = 1.
        let by_hand = 100.0 * ((1.0f64 / 3.0) * 1e-27).powf(0.25);
        let got = bleu(&[toks("the the the")], &[toks("the cat")]).unwrap();
        assert!((got - by_hand).abs() < 1e-6, "{got} vs {by_hand}");
    }

    #[test]
    fn brevity_penalty_applies() {
        let got = bleu(&[toks("a b c d")], &[toks("a b c d e f g h")]).unwrap();
        let by_hand = 100.0 * (1.0f64 - 2.0).exp();
        assert!((got - by_hand).abs() < 1e-9);
    }

    #[test]
    fn case_insensitive() {
        let a = bleu(&[toks("The Cat sat on it")], &[toks("the cat SAT on it")]).unwrap();
        assert!((a - 100.0).abs() < 1e-9);
    }

    #[test]
    fn ambiguous_accuracy_is_position_aligned() {
        let set: HashSet<String> = ["x".to_string(), "y".to_string()].into();
        let (c, n) = ambiguous_accuracy(&[toks("x a y"), toks("b")], &[toks("x a x"), toks("y")], &set);
        assert_eq!((c, n), (1, 3));
    }
}
