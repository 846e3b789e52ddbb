//! Pre-norm Transformer encoder-decoder whose source embeddings are shifted
//! by the user's behaviour vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{behavior_vector, UserProfile};
use crate::corpus::{TokenId, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::numerics::{cross_entropy, log_sum_exp, CrossEntropy, Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    /// `α ∈ (0,1)^d` from `d×d` gate matrices.
    #[default]
    Vector,
    /// One `α` shared by all dimensions, from `1×d` gate rows.
    Scalar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub ffn_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub max_positions: usize,
    pub gate: GateMode,
    /// When false the behaviour vector is forced to zero (no-cache baseline).
    pub use_cache: bool,
    /// Add the behaviour vector before the positional encoding instead of
    /// after it.
    pub augment_pre_positional: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            ffn_dim: 256,
            layers: 2,
            heads: 4,
            dropout: 0.1,
            max_positions: 128,
            gate: GateMode::Vector,
            use_cache: true,
            augment_pre_positional: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.ffn_dim == 0 || self.max_positions < 2 {
            return Err(Error::Config(
                "layers, ffn_dim and max_positions must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Named parameter arrays in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Attn {
    q: usize,
    k: usize,
    v: usize,
    o: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Ffn {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct EncoderLayer {
    ln_attn: Norm,
    attn: Attn,
    ln_ffn: Norm,
    ffn: Ffn,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct DecoderLayer {
    ln_self: Norm,
    self_attn: Attn,
    ln_cross: Norm,
    cross_attn: Attn,
    ln_ffn: Norm,
    ffn: Ffn,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    src_emb: usize,
    tgt_emb: usize,
    gate_t: usize,
    gate_r: usize,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
    out_w: usize,
    out_b: usize,
}

enum Init {
    Embedding,
    Xavier,
    Zeros,
    Ones,
}

struct Registry {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Registry {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape.to_vec());
        self.inits.push(init);
        self.names.len() - 1
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gamma: self.add(format!("{prefix}.gamma"), &[d], Init::Ones),
            beta: self.add(format!("{prefix}.beta"), &[d], Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> Attn {
        let mut w = |n: &str| self.add(format!("{prefix}.{n}"), &[d, d], Init::Xavier);
        Attn {
            q: w("q"),
            k: w("k"),
            v: w("v"),
            o: w("o"),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> Ffn {
        Ffn {
            w1: self.add(format!("{prefix}.w1"), &[d, f], Init::Xavier),
            b1: self.add(format!("{prefix}.b1"), &[f], Init::Zeros),
            w2: self.add(format!("{prefix}.w2"), &[f, d], Init::Xavier),
            b2: self.add(format!("{prefix}.b2"), &[d], Init::Zeros),
        }
    }
}

fn layout(cfg: &ModelConfig, src_vocab: usize, tgt_vocab: usize) -> (Layout, Registry) {
    let d = cfg.d_model;
    let mut r = Registry {
        names: Vec::new(),
        shapes: Vec::new(),
        inits: Vec::new(),
    };
    let gate_rows = match cfg.gate {
        GateMode::Vector => d,
        GateMode::Scalar => 1,
    };
    let src_emb = r.add("src_emb".into(), &[src_vocab, d], Init::Embedding);
    let tgt_emb = r.add("tgt_emb".into(), &[tgt_vocab, d], Init::Embedding);
    let gate_t = r.add("gate.w_t".into(), &[gate_rows, d], Init::Xavier);
    let gate_r = r.add("gate.w_r".into(), &[gate_rows, d], Init::Xavier);
    let encoder = (0..cfg.layers)
        .map(|l| EncoderLayer {
            ln_attn: r.norm(&format!("enc.{l}.ln_attn"), d),
            attn: r.attn(&format!("enc.{l}.attn"), d),
            ln_ffn: r.norm(&format!("enc.{l}.ln_ffn"), d),
            ffn: r.ffn(&format!("enc.{l}.ffn"), d, cfg.ffn_dim),
        })
        .collect();
    let enc_norm = r.norm("enc.ln", d);
    let decoder = (0..cfg.layers)
        .map(|l| DecoderLayer {
            ln_self: r.norm(&format!("dec.{l}.ln_self"), d),
            self_attn: r.attn(&format!("dec.{l}.self_attn"), d),
            ln_cross: r.norm(&format!("dec.{l}.ln_cross"), d),
            cross_attn: r.attn(&format!("dec.{l}.cross_attn"), d),
            ln_ffn: r.norm(&format!("dec.{l}.ln_ffn"), d),
            ffn: r.ffn(&format!("dec.{l}.ffn"), d, cfg.ffn_dim),
        })
        .collect();
    let dec_norm = r.norm("dec.ln", d);
    let out_w = r.add("out.w".into(), &[d, tgt_vocab], Init::Xavier);
    let out_b = r.add("out.b".into(), &[tgt_vocab], Init::Zeros);
    (
        Layout {
            src_emb,
            tgt_emb,
            gate_t,
            gate_r,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            out_w,
            out_b,
        },
        r,
    )
}

fn sinusoids<T: Scalar>(positions: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(positions * d);
    for pos in 0..positions {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data.push(T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(&[positions, d], data).expect("positional table")
}

/// Token ids of a profile's two caches.
#[derive(Clone, Copy, Debug, Default)]
pub struct CacheIds<'a> {
    pub topic: &'a [TokenId],
    pub context: &'a [TokenId],
}

/// Owned variant of [`CacheIds`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CacheTokens {
    pub topic: Vec<TokenId>,
    pub context: Vec<TokenId>,
}

impl CacheTokens {
    pub fn ids(&self) -> CacheIds<'_> {
        CacheIds {
            topic: &self.topic,
            context: &self.context,
        }
    }
}

impl From<&UserProfile> for CacheTokens {
    fn from(p: &UserProfile) -> Self {
        CacheTokens {
            topic: p.topic_tokens(),
            context: p.context_tokens(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

impl Default for DecodeMode {
    fn default() -> Self {
        DecodeMode::Beam(4)
    }
}

/// Evaluation-mode scores of one target sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    /// `log P(y_i | ·)` for every target position, EOS included.
    pub log_probs: Vec<f64>,
    pub avg_log_prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transformer<T> {
    pub config: ModelConfig,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub params: ParamStore<T>,
    layout: Layout,
    positions: Tensor<T>,
}

/// Parameters of one model bound as leaves of a graph.
#[derive(Clone, Debug)]
pub struct Bound(pub Vec<Var>);

type Dropout<'r> = Option<&'r mut ChaCha8Rng>;

impl<T: Scalar> Transformer<T> {
    /// Freshly initialised model.
    pub fn new(config: ModelConfig, src_vocab: usize, tgt_vocab: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, reg) = layout(&config, src_vocab, tgt_vocab);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = reg
            .shapes
            .iter()
            .zip(&reg.inits)
            .map(|(shape, init)| {
                let n: usize = shape.iter().product();
                let data: Vec<T> = match init {
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    // unit variance
                    Init::Embedding => (0..n).map(|_| T::of(rng.gen_range(-1.0..1.0) * 3f64.sqrt())).collect(),
                    Init::Xavier => {
                        let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                        (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect()
                    }
                };
                Tensor::new(shape, data).expect("parameter shape")
            })
            .collect();
        let positions = sinusoids(config.max_positions, config.d_model);
        Ok(Self {
            config,
            src_vocab,
            tgt_vocab,
            params: ParamStore {
                names: reg.names,
                tensors,
            },
            layout,
            positions,
        })
    }

    /// Model with the given parameter arrays; names and shapes must match
    /// the layout implied by `config`.
    pub fn from_params(config: ModelConfig, src_vocab: usize, tgt_vocab: usize, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let (layout, reg) = layout(&config, src_vocab, tgt_vocab);
        if reg.names != params.names {
            return Err(Error::Checkpoint(
                "parameter names do not match the model layout".into(),
            ));
        }
        for ((name, shape), t) in reg.names.iter().zip(&reg.shapes).zip(&params.tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: expected shape {shape:?}, found {:?}",
                    t.shape()
                )));
            }
        }
        let positions = sinusoids(config.max_positions, config.d_model);
        Ok(Self {
            config,
            src_vocab,
            tgt_vocab,
            params,
            layout,
            positions,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Transformer<U> {
        Transformer {
            config: self.config.clone(),
            src_vocab: self.src_vocab,
            tgt_vocab: self.tgt_vocab,
            params: self.params.cast(),
            layout: self.layout.clone(),
            positions: self.positions.cast(),
        }
    }

    pub fn source_embeddings(&self) -> &Tensor<T> {
        &self.params.tensors[self.layout.src_emb]
    }

    /// Index of each gate matrix in the parameter store.
    pub fn gate_indices(&self) -> (usize, usize) {
        (self.layout.gate_t, self.layout.gate_r)
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.params.tensors.iter().map(|t| g.param(t.clone())).collect())
    }

    fn dropout(&self, g: &mut Graph<T>, x: Var, rng: &mut Dropout<'_>) -> Result<Var> {
        let p = self.config.dropout;
        let Some(rng) = rng.as_deref_mut() else { return Ok(x) };
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let m = g.constant(Tensor::new(&shape, mask)?);
        g.mul(x, m)
    }

    fn norm(&self, g: &mut Graph<T>, b: &Bound, x: Var, n: Norm) -> Result<Var> {
        g.layer_norm(x, b.0[n.gamma], b.0[n.beta])
    }

    fn attention(&self, g: &mut Graph<T>, b: &Bound, query: Var, memory: Var, a: Attn, causal: bool) -> Result<Var> {
        let heads = self.config.heads;
        let dh = self.config.d_model / heads;
        let q = g.matmul(query, b.0[a.q])?;
        let k = g.matmul(memory, b.0[a.k])?;
        let v = g.matmul(memory, b.0[a.v])?;
        let (tq, tk) = (g.shape(q)[0], g.shape(k)[0]);
        let mask = if causal {
            let mut m = vec![T::zero(); tq * tk];
            for i in 0..tq {
                for j in i + 1..tk {
                    m[i * tk + j] = T::of(-1e9);
                }
            }
            Some(g.constant(Tensor::new(&[tq, tk], m)?))
        } else {
            None
        };
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice(q, 1, h * dh, dh)?;
            let kh = g.slice(k, 1, h * dh, dh)?;
            let vh = g.slice(v, 1, h * dh, dh)?;
            let s = g.matmul_t(qh, kh)?;
            let mut s = g.scale(s, scale);
            if let Some(m) = mask {
                s = g.add(s, m)?;
            }
            let p = g.softmax(s);
            outs.push(g.matmul(p, vh)?);
        }
        let cat = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
        g.matmul(cat, b.0[a.o])
    }

    fn feed_forward(&self, g: &mut Graph<T>, b: &Bound, x: Var, f: Ffn, rng: &mut Dropout<'_>) -> Result<Var> {
        let h = g.matmul(x, b.0[f.w1])?;
        let h = g.add(h, b.0[f.b1])?;
        let h = g.relu(h);
        let h = self.dropout(g, h, rng)?;
        let o = g.matmul(h, b.0[f.w2])?;
        g.add(o, b.0[f.b2])
    }

    fn positional(&self, g: &mut Graph<T>, len: usize) -> Result<Var> {
        if len > self.config.max_positions {
            return Err(Error::Length {
                len,
                max: self.config.max_positions,
            });
        }
        let d = self.config.d_model;
        let pe = Tensor::new(&[len, d], self.positions.data()[..len * d].to_vec())?;
        Ok(g.constant(pe))
    }

    /// Behaviour vector for `cache`, `None` when it is zero.
    pub fn behavior(&self, g: &mut Graph<T>, b: &Bound, cache: CacheIds<'_>) -> Result<Option<Var>> {
        if !self.config.use_cache {
            return Ok(None);
        }
        let l = &self.layout;
        behavior_vector(
            g,
            b.0[l.src_emb],
            b.0[l.gate_t],
            b.0[l.gate_r],
            cache.topic,
            cache.context,
        )
    }

    /// Encoder states for `source` shifted by the behaviour vector `r`.
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        source: &[TokenId],
        r: Option<Var>,
        mut rng: Dropout<'_>,
    ) -> Result<Var> {
        if source.is_empty() {
            return Err(Error::Domain("empty source sentence".into()));
        }
        let pe = self.positional(g, source.len())?;
        let emb = g.embedding(b.0[self.layout.src_emb], source)?;
        let mut x = match (r, self.config.augment_pre_positional) {
            (Some(r), true) => {
                let shifted = g.add(emb, r)?;
                g.add(shifted, pe)?
            }
            (Some(r), false) => {
                let placed = g.add(emb, pe)?;
                g.add(placed, r)?
            }
            (None, _) => g.add(emb, pe)?,
        };
        x = self.dropout(g, x, &mut rng)?;
        for layer in &self.layout.encoder {
            let h = self.norm(g, b, x, layer.ln_attn)?;
            let h = self.attention(g, b, h, h, layer.attn, false)?;
            let h = self.dropout(g, h, &mut rng)?;
            x = g.add(x, h)?;
            let h = self.norm(g, b, x, layer.ln_ffn)?;
            let h = self.feed_forward(g, b, h, layer.ffn, &mut rng)?;
            let h = self.dropout(g, h, &mut rng)?;
            x = g.add(x, h)?;
        }
        self.norm(g, b, x, self.layout.enc_norm)
    }

    /// Decoder output logits for every position of `prefix`, or only the
    /// last one when `last_only`.
    pub fn decode_logits(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        memory: Var,
        prefix: &[TokenId],
        last_only: bool,
        mut rng: Dropout<'_>,
    ) -> Result<Var> {
        let pe = self.positional(g, prefix.len())?;
        let emb = g.embedding(b.0[self.layout.tgt_emb], prefix)?;
        let mut x = g.add(emb, pe)?;
        x = self.dropout(g, x, &mut rng)?;
        for layer in &self.layout.decoder {
            let h = self.norm(g, b, x, layer.ln_self)?;
            let h = self.attention(g, b, h, h, layer.self_attn, true)?;
            let h = self.dropout(g, h, &mut rng)?;
            x = g.add(x, h)?;
            let h = self.norm(g, b, x, layer.ln_cross)?;
            let h = self.attention(g, b, h, memory, layer.cross_attn, false)?;
            let h = self.dropout(g, h, &mut rng)?;
            x = g.add(x, h)?;
            let h = self.norm(g, b, x, layer.ln_ffn)?;
            let h = self.feed_forward(g, b, h, layer.ffn, &mut rng)?;
            let h = self.dropout(g, h, &mut rng)?;
            x = g.add(x, h)?;
        }
        if last_only {
            x = g.slice(x, 0, prefix.len() - 1, 1)?;
        }
        let x = self.norm(g, b, x, self.layout.dec_norm)?;
        let logits = g.matmul(x, b.0[self.layout.out_w])?;
        g.add(logits, b.0[self.layout.out_b])
    }

    /// Teacher-forced cross entropy of `target` (EOS appended) given
    /// `source` and the user's caches.
    pub fn score(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        source: &[TokenId],
        target: &[TokenId],
        cache: CacheIds<'_>,
        mut rng: Dropout<'_>,
    ) -> Result<CrossEntropy> {
        if target.len() + 1 > self.config.max_positions {
            return Err(Error::Length {
                len: target.len() + 1,
                max: self.config.max_positions,
            });
        }
        let r = self.behavior(g, b, cache)?;
        let memory = self.encode(g, b, source, r, rng.as_deref_mut())?;
        let mut prefix = Vec::with_capacity(target.len() + 1);
        prefix.push(BOS);
        prefix.extend_from_slice(target);
        let mut gold = target.to_vec();
        gold.push(EOS);
        let logits = self.decode_logits(g, b, memory, &prefix, false, rng)?;
        let mask: Vec<bool> = gold.iter().map(|&t| t != PAD).collect();
        cross_entropy(g, logits, &gold, &mask)
    }

    /// Evaluation-mode per-position log-probabilities and their average.
    pub fn forward(&self, source: &[TokenId], target: &[TokenId], cache: CacheIds<'_>) -> Result<Scores> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let ce = self.score(&mut g, &b, source, target, cache, None)?;
        Ok(Scores {
            log_probs: g.value(ce.log_probs).data().iter().map(|x| x.f64()).collect(),
            avg_log_prob: g.value(ce.avg_log_prob).item().f64(),
        })
    }

    /// Translates `source`; the result excludes BOS and EOS.
    pub fn decode(
        &self,
        source: &[TokenId],
        cache: CacheIds<'_>,
        mode: DecodeMode,
        max_len: usize,
    ) -> Result<Vec<TokenId>> {
        let max_len = max_len.min(self.config.max_positions - 1);
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let r = self.behavior(&mut g, &b, cache)?;
        let memory = self.encode(&mut g, &b, source, r, None)?;
        let width = match mode {
            DecodeMode::Greedy => 1,
            DecodeMode::Beam(k) => k.max(1),
        };
        self.beam(&mut g, &b, memory, width, max_len)
    }

    fn next_log_probs(&self, g: &mut Graph<T>, b: &Bound, memory: Var, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let logits = self.decode_logits(g, b, memory, prefix, true, None)?;
        let row = g.value(logits).data();
        let z = log_sum_exp(row);
        Ok(row
            .iter()
            .enumerate()
            .map(|(id, &x)| {
                if id == PAD || id == BOS {
                    f64::NEG_INFINITY
                } else {
                    x.f64() - z
                }
            })
            .collect())
    }

    /// Beam search with length-normalised final scores. Width 1 is greedy
    /// decoding.
    fn beam(&self, g: &mut Graph<T>, b: &Bound, memory: Var, width: usize, max_len: usize) -> Result<Vec<TokenId>> {
        struct Hyp {
            tokens: Vec<TokenId>,
            score: f64,
        }
        let mut active = vec![Hyp {
            tokens: vec![BOS],
            score: 0.0,
        }];
        let mut finished: Vec<(Vec<TokenId>, f64)> = Vec::new();
        for _ in 0..max_len {
            let mut candidates: Vec<(usize, TokenId, f64)> = Vec::new();
            for (h, hyp) in active.iter().enumerate() {
                let lp = self.next_log_probs(g, b, memory, &hyp.tokens)?;
                let mut order: Vec<TokenId> = (0..lp.len()).collect();
                order.sort_by(|&x, &y| lp[y].total_cmp(&lp[x]).then(x.cmp(&y)));
                candidates.extend(order.into_iter().take(width).map(|t| (h, t, hyp.score + lp[t])));
            }
            candidates.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.cmp(&y.0)).then(x.1.cmp(&y.1)));
            let mut next = Vec::with_capacity(width);
            for (h, t, score) in candidates.into_iter().take(width) {
                let mut tokens = active[h].tokens.clone();
                if t == EOS {
                    // length counts the EOS step
                    finished.push((tokens[1..].to_vec(), score / tokens.len() as f64));
                } else {
                    tokens.push(t);
                    next.push(Hyp { tokens, score });
                }
            }
            active = next;
            if finished.len() >= width || active.is_empty() {
                break;
            }
        }
        if finished.is_empty() {
            finished.extend(
                active
                    .into_iter()
                    .map(|h| (h.tokens[1..].to_vec(), h.score / (h.tokens.len() - 1) as f64)),
            );
        }
        let best = finished
            .into_iter()
            .enumerate()
            .max_by(|(i, x), (j, y)| x.1.total_cmp(&y.1).then(j.cmp(i)))
            .map(|(_, f)| f.0)
            .unwrap_or_default();
        Ok(best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            ffn_dim: 16,
            layers: 1,
            heads: 2,
            dropout: 0.0,
            max_positions: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig { heads: 3, ..tiny() };
        assert!(Transformer::<f32>::new(bad, 10, 10, 0).is_err());
    }

    #[test]
    fn log_probs_are_normalised() {
        let m = Transformer::<f64>::new(tiny(), 12, 9, 3).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let mem = m.encode(&mut g, &b, &[4, 5, 6], None, None).unwrap();
        let logits = m.decode_logits(&mut g, &b, mem, &[BOS, 4, 5], false, None).unwrap();
        for row in g.value(logits).data().chunks(9) {
            let z = log_sum_exp(row);
            let total: f64 = row.iter().map(|x| (x - z).exp()).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
        let s = m.forward(&[4, 5, 6], &[4, 5], CacheIds::default()).unwrap();
        assert!(s.log_probs.iter().all(|&lp| lp <= 0.0));
        assert_eq!(s.log_probs.len(), 3);
    }

    #[test]
    fn empty_caches_match_the_no_cache_model_bitwise() {
        let m = Transformer::<f32>::new(tiny(), 12, 9, 3).unwrap();
        let mut vanilla = m.clone();
        vanilla.config.use_cache = false;
        let a = m.forward(&[4, 5, 6], &[4, 7], CacheIds::default()).unwrap();
        let b = vanilla
            .forward(
                &[4, 5, 6],
                &[4, 7],
                CacheIds {
                    topic: &[4],
                    context: &[5],
                },
            )
            .unwrap();
        assert_eq!(a, b);
        let c = m
            .forward(
                &[4, 5, 6],
                &[4, 7],
                CacheIds {
                    topic: &[4],
                    context: &[5],
                },
            )
            .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn causality() {
        let m = Transformer::<f64>::new(tiny(), 12, 9, 5).unwrap();
        let a = m.forward(&[4, 5], &[4, 5, 6, 7], CacheIds::default()).unwrap();
        let b = m.forward(&[4, 5], &[4, 5, 8, 7], CacheIds::default()).unwrap();
        // target[2] is fed at decoder position 3, so positions 0 and 1 are unaffected
        for i in 0..2 {
            assert!((a.log_probs[i] - b.log_probs[i]).abs() < 1e-12);
        }
        assert_ne!(a.log_probs[3], b.log_probs[3]);
    }

    #[test]
    fn beam_of_one_is_greedy_and_decoding_terminates() {
        let m = Transformer::<f32>::new(tiny(), 12, 9, 11).unwrap();
        let cache = CacheIds {
            topic: &[6],
            context: &[],
        };
        for src in [[4usize, 5, 6], [7, 7, 8], [11, 4, 9]] {
            let greedy = m.decode(&src, cache, DecodeMode::Greedy, 6).unwrap();
            let beam1 = m.decode(&src, cache, DecodeMode::Beam(1), 6).unwrap();
            assert_eq!(greedy, beam1);
            assert!(greedy.len() <= 6);
            let beam4 = m.decode(&src, cache, DecodeMode::Beam(4), 6).unwrap();
            assert!(beam4.len() <= 6);
        }
    }

    #[test]
    fn over_length_input_is_rejected() {
        let m = Transformer::<f32>::new(tiny(), 12, 9, 1).unwrap();
        let long = vec![4; 17];
        assert!(matches!(
            m.forward(&long, &[4], CacheIds::default()),
            Err(Error::Length { len: 17, max: 16 })
        ));
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let m = Transformer::<f32>::new(tiny(), 12, 9, 2).unwrap();
        let cache = CacheIds {
            topic: &[4, 5],
            context: &[6],
        };
        let a = m.forward(&[4, 5, 6], &[4, 5], cache).unwrap();
        let b = m.forward(&[4, 5, 6], &[4, 5], cache).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn from_params_checks_the_layout() {
        let m = Transformer::<f32>::new(tiny(), 12, 9, 2).unwrap();
        let ok = Transformer::from_params(tiny(), 12, 9, m.params.clone()).unwrap();
        assert_eq!(ok, m);
        assert!(Transformer::from_params(tiny(), 13, 9, m.params.clone()).is_err());
    }
}
