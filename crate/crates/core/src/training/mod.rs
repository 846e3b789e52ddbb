//! Joint likelihood and contrastive training.

mod checkpoint;
mod contrastive;

use std::collections::BTreeMap;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::pooled_histories;
use crate::corpus::{TranslationTriplet, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{bleu, instance_profiles, translate_all};
use crate::model::{Bound, CacheIds, CacheTokens, DecodeMode, ModelConfig, ParamStore, Transformer};
use crate::numerics::{Graph, Scalar, Var};
use crate::tfidf::TfidfConfig;

pub use checkpoint::{Engine, FORMAT_VERSION, MAGIC};
pub use contrastive::{
    contrastive_loss, contrastive_loss_from, margin_analysis, mine_triplets, Distance, MarginReport, MarginSample,
    MinedUsers,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Instances per update.
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many updates even if epochs remain.
    pub max_steps: Option<usize>,
    /// Dev evaluations without improvement before stopping.
    pub patience: usize,
    /// Evaluate on dev every this many updates; 0 means once per epoch.
    pub eval_every: usize,
    /// Evaluate on at most this many dev instances.
    pub dev_limit: Option<usize>,
    pub eta: f64,
    /// Weight of the contrastive term; 0 trains on likelihood alone.
    pub cl_weight: f64,
    pub distance: Distance,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_decay: 1.0,
            beta1: 0.9,
            beta2: 0.998,
            adam_eps: 1e-9,
            batch_size: 16,
            epochs: 20,
            max_steps: None,
            patience: 5,
            eval_every: 0,
            dev_limit: None,
            eta: 2.0,
            cl_weight: 1.0,
            distance: Distance::AverageLogProb,
            grad_clip: Some(5.0),
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta.is_nan() || self.eta <= 0.0 {
            return Err(Error::Config("eta must be positive".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 || self.batch_size == 0 {
            return Err(Error::Config("learning rate and batch size must be positive".into()));
        }
        if self.cl_weight.is_nan() || self.cl_weight < 0.0 {
            return Err(Error::Config("contrastive weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_mle: f64,
    pub l_cl: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_bleu: Option<f64>,
}

pub fn metrics_to_jsonl(records: &[MetricsRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("metrics serialise") + "\n")
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Engine holding the parameters with the best dev BLEU.
    pub engine: Engine,
    pub metrics: Vec<MetricsRecord>,
    pub best_dev_bleu: Option<f64>,
    pub steps: usize,
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Vec<f32>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (((p, g), m), v) in params.tensors.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / (v.sqrt() + eps);
            }
        }
    }
}

/// Caches of an anchor instance and, when mined, of its similar and
/// dissimilar users.
pub struct InstanceCaches<'a> {
    pub own: CacheIds<'a>,
    pub contrast: Option<(CacheIds<'a>, CacheIds<'a>)>,
}

/// Values of one instance's objective.
pub struct InstanceLoss {
    pub total: Var,
    pub mle: Var,
    pub cl: Option<Var>,
}

/// `L_mle + w·L_cl` for one instance. The similar and dissimilar forwards
/// share the parameters and receive gradient like the anchor.
#[allow(clippy::too_many_arguments)]
pub fn instance_loss<T: Scalar>(
    model: &Transformer<T>,
    g: &mut Graph<T>,
    b: &Bound,
    t: &TranslationTriplet,
    caches: &InstanceCaches<'_>,
    cfg: &TrainConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<InstanceLoss> {
    let own = model.score(g, b, &t.source, &t.target, caches.own, rng.as_deref_mut())?;
    let Some((pos, neg)) = caches.contrast.filter(|_| cfg.cl_weight > 0.0) else {
        return Ok(InstanceLoss {
            total: own.loss,
            mle: own.loss,
            cl: None,
        });
    };
    let p = model.score(g, b, &t.source, &t.target, pos, rng.as_deref_mut())?;
    let n = model.score(g, b, &t.source, &t.target, neg, rng)?;
    let a = (own.avg_log_prob, own.log_probs);
    let d_pos = cfg.distance.graph(g, a, (p.avg_log_prob, p.log_probs))?;
    let d_neg = cfg.distance.graph(g, a, (n.avg_log_prob, n.log_probs))?;
    let diff = g.sub(d_pos, d_neg)?;
    let shifted = g.add_scalar(diff, T::of(cfg.eta));
    let cl = g.relu(shifted);
    let weighted = g.scale(cl, T::of(cfg.cl_weight));
    let total = g.add(own.loss, weighted)?;
    Ok(InstanceLoss {
        total,
        mle: own.loss,
        cl: Some(cl),
    })
}

fn instance_rng(seed: u64, step: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((step as u64) << 20) | index as u64);
    rng
}

struct InstanceResult {
    grads: Vec<Vec<f32>>,
    mle: f64,
    cl: f64,
}

/// Trains a fresh model on `train`, selecting the parameters with the best
/// dev BLEU. `on_record` sees every metrics record as it is produced.
pub fn train(
    model_cfg: &ModelConfig,
    tfidf: &TfidfConfig,
    vocab: &Vocabulary,
    train: &[TranslationTriplet],
    dev: &[TranslationTriplet],
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    tfidf.validate()?;
    if train.is_empty() {
        return Err(Error::Domain("empty training corpus".into()));
    }
    let model = Transformer::new(model_cfg.clone(), vocab.source.len(), vocab.target.len(), cfg.seed)?;
    let mut engine = Engine::new(model, vocab.clone(), tfidf.clone(), pooled_histories(train));

    let own: Vec<CacheTokens> = instance_profiles(&engine, train)
        .iter()
        .map(CacheTokens::from)
        .collect();
    let mined = if cfg.cl_weight > 0.0 && model_cfg.use_cache {
        mine_triplets(&engine.bank)
    } else {
        BTreeMap::new()
    };
    let bank_caches: BTreeMap<&str, CacheTokens> = engine
        .bank
        .profiles
        .iter()
        .map(|(u, p)| (u.as_str(), CacheTokens::from(p)))
        .collect();
    if cfg.cl_weight > 0.0 && mined.is_empty() {
        warn!("no contrastive triplets; training on likelihood alone");
    }
    let dev = &dev[..cfg.dev_limit.unwrap_or(dev.len()).min(dev.len())];
    let dev_profiles = instance_profiles(&engine, dev);
    let dev_refs: Vec<Vec<String>> = dev.iter().map(|t| engine.target_surfaces(&t.target)).collect();

    let mut adam = Adam::new(&engine.model.params, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(u64::MAX);
    let mut metrics = Vec::new();
    let mut best: Option<(f64, ParamStore<f32>)> = None;
    let mut bad_evals = 0;
    let mut step = 0;
    let mut lr = cfg.lr;

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (bi, batch) in batches.iter().enumerate() {
            let model = &engine.model;
            let results: Vec<InstanceResult> = batch
                .par_iter()
                .enumerate()
                .map(|(i, &idx)| {
                    let t = &train[idx];
                    let mut rng = instance_rng(cfg.seed, step, i);
                    let contrast = mined.get(&t.user_id).map(|m| {
                        let neg = m.draw(&mut rng);
                        (bank_caches[m.positive.as_str()].ids(), bank_caches[neg].ids())
                    });
                    let caches = InstanceCaches {
                        own: own[idx].ids(),
                        contrast,
                    };
                    let mut g = Graph::new();
                    let b = model.bind(&mut g);
                    let loss = instance_loss(model, &mut g, &b, t, &caches, cfg, Some(&mut rng))?;
                    let grads = g.backward(loss.total)?;
                    Ok(InstanceResult {
                        grads: b.0.iter().map(|&v| grads.wrt(v).into_data()).collect(),
                        mle: g.value(loss.mle).item().f64(),
                        cl: loss.cl.map_or(0.0, |c| g.value(c).item().f64()),
                    })
                })
                .collect::<Result<_>>()?;

            let n = results.len() as f32;
            let mut grads: Vec<Vec<f32>> = results[0].grads.iter().map(|g| vec![0.0; g.len()]).collect();
            for r in &results {
                for (acc, g) in grads.iter_mut().zip(&r.grads) {
                    for (a, x) in acc.iter_mut().zip(g) {
                        *a += x;
                    }
                }
            }
            let mut sq = 0.0f64;
            for g in grads.iter_mut().flatten() {
                *g /= n;
                sq += (*g as f64).powi(2);
            }
            let l_mle = results.iter().map(|r| r.mle).sum::<f64>() / n as f64;
            let l_cl = results.iter().map(|r| r.cl).sum::<f64>() / n as f64;
            if !l_mle.is_finite() || !l_cl.is_finite() || !sq.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("L_mle = {l_mle}, L_cl = {l_cl}, |grad|^2 = {sq}"),
                });
            }
            if let Some(clip) = cfg.grad_clip {
                let norm = sq.sqrt();
                if norm > clip {
                    let s = (clip / norm) as f32;
                    grads.iter_mut().flatten().for_each(|g| *g *= s);
                }
            }
            adam.step(&mut engine.model.params, &grads, lr);
            step += 1;

            let end_of_epoch = bi + 1 == batches.len();
            let due = if cfg.eval_every == 0 {
                end_of_epoch
            } else {
                step % cfg.eval_every == 0
            };
            let out_of_steps = cfg.max_steps.is_some_and(|m| step >= m);
            let dev_bleu = if !dev.is_empty() && (due || out_of_steps) {
                let hyps = translate_all(&engine, dev, &dev_profiles, DecodeMode::Greedy)?;
                Some(bleu(&hyps, &dev_refs)?)
            } else {
                None
            };
            let record = MetricsRecord {
                step,
                epoch,
                l_mle,
                l_cl,
                dev_bleu,
            };
            on_record(&record);
            metrics.push(record);
            if let Some(score) = dev_bleu {
                info!("step {step}: L_mle {l_mle:.4} L_cl {l_cl:.4} dev BLEU {score:.2}");
                if best.as_ref().is_none_or(|(b, _)| score > *b) {
                    best = Some((score, engine.model.params.clone()));
                    bad_evals = 0;
                } else {
                    bad_evals += 1;
                    if bad_evals >= cfg.patience {
                        info!("early stop after {bad_evals} evaluations without improvement");
                        break 'epochs;
                    }
                }
            }
            if out_of_steps {
                break 'epochs;
            }
        }
        lr *= cfg.lr_decay;
    }
    let best_dev_bleu = best.as_ref().map(|(b, _)| *b);
    if let Some((_, params)) = best {
        engine.model.params = params;
    }
    Ok(TrainOutcome {
        engine,
        metrics,
        best_dev_bleu,
        steps: step,
    })
}

/// Relative error between an analytic and a numerical derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-8 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

/// Compares backpropagated gradients of `loss` with central differences
/// of step `h`, on up to `per_param` evenly spaced entries of every
/// parameter array.
pub fn gradient_check<F>(model: &Transformer<f64>, loss: F, h: f64, per_param: usize) -> Result<Vec<GradCheck>>
where
    F: Fn(&Transformer<f64>, &mut Graph<f64>, &Bound) -> Result<Var>,
{
    let value = |m: &Transformer<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let l = loss(m, &mut g, &b)?;
        Ok(g.value(l).item())
    };
    let mut g = Graph::new();
    let b = model.bind(&mut g);
    let l = loss(model, &mut g, &b)?;
    let grads = g.backward(l)?;
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(model.params.len());
    for (pi, name) in model.params.names.iter().enumerate() {
        let analytic = grads.wrt(b.0[pi]);
        let len = analytic.len();
        let count = per_param.min(len);
        let mut worst = 0.0f64;
        for k in 0..count {
            let j = k * len / count;
            let orig = probe.params.tensors[pi].data()[j];
            probe.params.tensors[pi].data_mut()[j] = orig + h;
            let up = value(&probe)?;
            probe.params.tensors[pi].data_mut()[j] = orig - h;
            let down = value(&probe)?;
            probe.params.tensors[pi].data_mut()[j] = orig;
            worst = worst.max(relative_error(analytic.data()[j], (up - down) / (2.0 * h)));
        }
        out.push(GradCheck {
            name: name.clone(),
            checked: count,
            max_rel_error: worst,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_moves_against_the_gradient() {
        let mut p = ParamStore {
            names: vec!["x".into()],
            tensors: vec![crate::numerics::Tensor::new(&[2], vec![1.0f32, -1.0]).unwrap()],
        };
        let mut adam = Adam::new(&p, 0.9, 0.998, 1e-9);
        adam.step(&mut p, &[vec![0.5, -0.5]], 0.1);
        // first bias-corrected step has magnitude lr
        assert!((p.tensors[0].data()[0] - 0.9).abs() < 1e-5);
        assert!((p.tensors[0].data()[1] + 0.9).abs() < 1e-5);
    }

    #[test]
    fn full_objective_gradients_match_finite_differences() {
        let cfg = ModelConfig {
            d_model: 8,
            ffn_dim: 16,
            layers: 1,
            heads: 2,
            dropout: 0.0,
            max_positions: 16,
            ..ModelConfig::default()
        };
        let model = Transformer::<f64>::new(cfg, 10, 9, 7).unwrap();
        let t = TranslationTriplet {
            user_id: "u".into(),
            history: vec![],
            source: vec![4, 5, 6],
            target: vec![4, 8],
        };
        let train = TrainConfig::default();
        let (own, pos, neg) = (
            CacheTokens {
                topic: vec![4, 7],
                context: vec![5],
            },
            CacheTokens {
                topic: vec![7],
                context: vec![],
            },
            CacheTokens {
                topic: vec![9, 8],
                context: vec![6, 4],
            },
        );
        let caches = InstanceCaches {
            own: own.ids(),
            contrast: Some((pos.ids(), neg.ids())),
        };
        let checks = gradient_check(
            &model,
            |m, g, b| Ok(instance_loss(m, g, b, &t, &caches, &train, None)?.total),
            1e-3,
            6,
        )
        .unwrap();
        for c in &checks {
            assert!(c.max_rel_error < 1e-3, "{c:?}");
        }
        assert!(checks.iter().any(|c| c.name == "gate.w_t"));
    }

    #[test]
    fn relative_error_handles_zero() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1.0, 1.0005) < 1e-3);
        assert!(relative_error(1.0, 1.1) > 1e-3);
    }

    #[test]
    fn config_rejects_bad_eta() {
        let cfg = TrainConfig {
            eta: 0.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
