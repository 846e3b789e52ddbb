//! Similar/dissimilar user mining, the triplet-margin loss and the margin
//! diagnostic.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::UserBank;
use crate::corpus::TranslationTriplet;
use crate::error::{Error, Result};
use crate::eval::{dissimilar_user, instance_profiles};
use crate::model::{CacheTokens, Scores};
use crate::numerics::{Graph, Scalar, Var};
use crate::tfidf::user_similarity;

use super::Engine;

/// How two scorings of the same target are compared.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    /// Squared difference of the average log-probabilities.
    #[default]
    AverageLogProb,
    /// Squared norm of the per-position log-probability differences over
    /// the target length.
    PerPosition,
}

impl Distance {
    pub fn between(self, a: &Scores, b: &Scores) -> f64 {
        match self {
            Distance::AverageLogProb => (a.avg_log_prob - b.avg_log_prob).powi(2),
            Distance::PerPosition => {
                let n = a.log_probs.len().max(1) as f64;
                a.log_probs
                    .iter()
                    .zip(&b.log_probs)
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    / n
            }
        }
    }

    /// Graph version taking the outputs of [`crate::numerics::cross_entropy`].
    pub fn graph<T: Scalar>(self, g: &mut Graph<T>, a: (Var, Var), b: (Var, Var)) -> crate::Result<Var> {
        match self {
            Distance::AverageLogProb => {
                let d = g.sub(a.0, b.0)?;
                Ok(g.square(d))
            }
            Distance::PerPosition => {
                let d = g.sub(a.1, b.1)?;
                let sq = g.square(d);
                let n = g.shape(sq).iter().product::<usize>().max(1);
                let s = g.sum(sq);
                Ok(g.scale(s, T::of(1.0 / n as f64)))
            }
        }
    }
}

/// `max(d⁺ − d⁻ + η, 0)`.
pub fn contrastive_loss(d_pos: f64, d_neg: f64, eta: f64) -> f64 {
    (d_pos - d_neg + eta).max(0.0)
}

/// [`contrastive_loss`] on average log-probabilities.
pub fn contrastive_loss_from(a_own: f64, a_pos: f64, a_neg: f64, eta: f64) -> f64 {
    contrastive_loss((a_own - a_pos).powi(2), (a_own - a_neg).powi(2), eta)
}

/// A user's most similar other user and the pool its dissimilar user is
/// drawn from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MinedUsers {
    pub positive: String,
    pub negatives: Vec<String>,
    /// True when no user shares zero keywords and the least similar one
    /// stands in.
    pub fallback: bool,
}

impl MinedUsers {
    pub fn draw<R: Rng>(&self, rng: &mut R) -> &str {
        &self.negatives[rng.gen_range(0..self.negatives.len())]
    }
}

/// Positive and negative candidates for every bank user. Users with fewer
/// than two others get no entry.
pub fn mine_triplets(bank: &UserBank) -> BTreeMap<String, MinedUsers> {
    let mut mined = BTreeMap::new();
    if bank.profiles.len() < 3 {
        warn!(
            "{} training user(s) with history: contrastive loss disabled",
            bank.profiles.len()
        );
        return mined;
    }
    let mut fallbacks = 0;
    for (uid, p) in &bank.profiles {
        let mut positive: Option<(&str, f64)> = None;
        for (other, q) in &bank.profiles {
            if other == uid {
                continue;
            }
            let s = user_similarity(&p.keyword_vector, &q.keyword_vector);
            if positive.is_none_or(|(_, b)| s > b) {
                positive = Some((other, s));
            }
        }
        let positive = positive.expect("at least two other users").0;
        let others = || {
            bank.profiles
                .iter()
                .filter(move |(o, _)| *o != uid && o.as_str() != positive)
        };
        let mut negatives: Vec<String> = others()
            .filter(|(_, q)| !q.keyword_vector.shares_keyword(&p.keyword_vector))
            .map(|(o, _)| o.clone())
            .collect();
        let fallback = negatives.is_empty();
        if fallback {
            fallbacks += 1;
            let mut least: Option<(&str, f64)> = None;
            for (o, q) in others() {
                let s = user_similarity(&p.keyword_vector, &q.keyword_vector);
                if least.is_none_or(|(_, b)| s < b) {
                    least = Some((o, s));
                }
            }
            negatives.push(least.expect("at least one candidate").0.to_string());
        }
        mined.insert(
            uid.clone(),
            MinedUsers {
                positive: positive.to_string(),
                negatives,
                fallback,
            },
        );
    }
    if fallbacks > 0 {
        warn!("{fallbacks} user(s) share keywords with every other user; using the least similar as negative");
    }
    mined
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginSample {
    pub user_id: String,
    pub positive: String,
    pub negative: String,
    /// `d⁻ − d⁺` under the contrastively trained model.
    pub gap_cl: f64,
    /// `d⁻ − d⁺` under the likelihood-only model.
    pub gap_mle: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub samples: Vec<MarginSample>,
    /// Share of samples with `delta > 0`.
    pub fraction_positive: f64,
    pub mean_delta: f64,
}

/// Compares how far apart the two models place a similar and a dissimilar
/// user's scoring of the same reference. For each sampled instance,
/// `gap = d⁻ − d⁺` and `delta = gap_cl − gap_mle`.
pub fn margin_analysis(
    cl: &Engine,
    mle: &Engine,
    corpus: &[TranslationTriplet],
    n: usize,
    distance: Distance,
    seed: u64,
) -> Result<MarginReport> {
    if cl.vocab != mle.vocab {
        return Err(Error::VocabularyMismatch(
            "the two models were trained with different vocabularies".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, corpus.len(), n.min(corpus.len())).into_vec();
    picked.sort_unstable();
    let instances: Vec<TranslationTriplet> = picked.iter().map(|&i| corpus[i].clone()).collect();
    let profiles = instance_profiles(cl, &instances);
    let env = cl.env();
    let samples: Vec<MarginSample> = instances
        .par_iter()
        .zip(&profiles)
        .filter_map(|(t, p)| {
            let pos = env.most_similar(&p.keyword_vector, &t.user_id)?;
            let neg = dissimilar_user(&cl.bank.profiles, &p.keyword_vector, &[&t.user_id, &pos.user_id])?;
            let caches = [CacheTokens::from(p), CacheTokens::from(pos), CacheTokens::from(neg)];
            let gap = |e: &Engine| -> Result<f64> {
                let s: Vec<Scores> = caches
                    .iter()
                    .map(|c| e.model.forward(&t.source, &t.target, c.ids()))
                    .collect::<Result<_>>()?;
                Ok(distance.between(&s[0], &s[2]) - distance.between(&s[0], &s[1]))
            };
            Some((|| {
                let gap_cl = gap(cl)?;
                let gap_mle = gap(mle)?;
                Ok(MarginSample {
                    user_id: t.user_id.clone(),
                    positive: pos.user_id.clone(),
                    negative: neg.user_id.clone(),
                    gap_cl,
                    gap_mle,
                    delta: gap_cl - gap_mle,
                })
            })())
        })
        .collect::<Result<_>>()?;
    let k = samples.len().max(1) as f64;
    Ok(MarginReport {
        fraction_positive: samples.iter().filter(|s| s.delta > 0.0).count() as f64 / k,
        mean_delta: samples.iter().map(|s| s.delta).sum::<f64>() / k,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::UserProfile;
    use crate::tfidf::KeywordVector;

    #[test]
    fn loss_examples() {
        assert_eq!(contrastive_loss(0.5, 3.0, 2.0), 0.0);
        assert_eq!(contrastive_loss(1.0, 1.5, 2.0), 1.5);
        assert_eq!(contrastive_loss(0.7, 0.7, 2.0), 2.0);
        // hinge boundary: d⁺ + η = d⁻
        assert_eq!(contrastive_loss(1.0, 3.0, 2.0), 0.0);
        assert!(contrastive_loss(1.0, 2.999, 2.0) > 0.0);
        assert_eq!(contrastive_loss_from(-1.0, -1.0, -3.0, 2.0), 0.0);
    }

    fn bank(vectors: &[(&str, &[(usize, f64)])]) -> UserBank {
        UserBank {
            profiles: vectors
                .iter()
                .map(|(u, v)| {
                    let p = UserProfile {
                        user_id: u.to_string(),
                        keyword_vector: v.iter().copied().collect::<KeywordVector>(),
                        ..UserProfile::default()
                    };
                    (u.to_string(), p)
                })
                .collect(),
            ..UserBank::default()
        }
    }

    #[test]
    fn positive_is_argmax_and_negative_shares_nothing() {
        let b = bank(&[
            ("a", &[(4, 1.0), (5, 1.0)]),
            ("b", &[(4, 1.0), (5, 0.9)]),
            ("c", &[(6, 1.0)]),
            ("d", &[(5, 1.0), (7, 1.0)]),
        ]);
        let m = mine_triplets(&b);
        assert_eq!(m["a"].positive, "b");
        assert_eq!(m["a"].negatives, vec!["c".to_string()]);
        assert!(!m["a"].fallback);
    }

    #[test]
    fn fallback_to_least_similar() {
        let b = bank(&[
            ("a", &[(4, 1.0), (5, 1.0)]),
            ("b", &[(4, 1.0), (5, 1.0)]),
            ("c", &[(4, 1.0), (6, 5.0)]),
        ]);
        let m = mine_triplets(&b);
        assert_eq!(m["a"].positive, "b");
        assert_eq!(m["a"].negatives, vec!["c".to_string()]);
        assert!(m["a"].fallback);
        for (u, mu) in &m {
            assert_ne!(&mu.positive, u);
            assert!(mu.negatives.iter().all(|n| n != u && n != &mu.positive));
        }
    }

    #[test]
    fn too_few_users_disable_mining() {
        let b = bank(&[("a", &[(4, 1.0)]), ("b", &[(4, 1.0)])]);
        assert!(mine_triplets(&b).is_empty());
    }

    #[test]
    fn draw_is_seeded() {
        let m = MinedUsers {
            positive: "p".into(),
            negatives: (0..10).map(|i| i.to_string()).collect(),
            fallback: false,
        };
        let a: Vec<String> = {
            let mut r = ChaCha8Rng::seed_from_u64(3);
            (0..20).map(|_| m.draw(&mut r).to_string()).collect()
        };
        let b: Vec<String> = {
            let mut r = ChaCha8Rng::seed_from_u64(3);
            (0..20).map(|_| m.draw(&mut r).to_string()).collect()
        };
        assert_eq!(a, b);
    }
}
