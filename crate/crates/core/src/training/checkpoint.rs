//! A trained model with everything needed to build caches at serving time,
//! and its binary checkpoint format.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` manifest length, the
//! JSON manifest, then every parameter array as little-endian `f32` in
//! manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cache::{CacheEnv, UserBank, UserProfile};
use crate::corpus::{TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{CacheTokens, DecodeMode, ModelConfig, ParamStore, Transformer};
use crate::numerics::Tensor;
use crate::tfidf::{DocumentFrequencies, TfidfConfig, IDF_FORMULA};

pub const MAGIC: &[u8; 8] = b"UDNMTCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Engine {
    pub model: Transformer<f32>,
    pub vocab: Vocabulary,
    pub tfidf: TfidfConfig,
    /// Pooled history of every training user, the source of `bank`.
    pub users: BTreeMap<String, Vec<Vec<TokenId>>>,
    pub bank: UserBank,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model: ModelConfig,
    tfidf: TfidfConfig,
    idf_formula: String,
    vocab: Vocabulary,
    document_frequencies: DocumentFrequencies,
    users: BTreeMap<String, Vec<Vec<TokenId>>>,
    params: Vec<ParamEntry>,
}

impl Engine {
    pub fn new(
        model: Transformer<f32>,
        vocab: Vocabulary,
        tfidf: TfidfConfig,
        users: BTreeMap<String, Vec<Vec<TokenId>>>,
    ) -> Self {
        let bank = UserBank::build(&users, &vocab.source, &tfidf);
        Self {
            model,
            vocab,
            tfidf,
            users,
            bank,
        }
    }

    pub fn env(&self) -> CacheEnv<'_> {
        CacheEnv::new(&self.vocab.source, &self.bank, &self.tfidf)
    }

    /// Profile for translating `source` after `history`.
    pub fn profile(&self, user_id: &str, history: &[Vec<TokenId>], source: &[TokenId]) -> UserProfile {
        self.env().profile_from_history(user_id, history, Some(source))
    }

    pub fn max_output_len(source_len: usize) -> usize {
        2 * source_len + 10
    }

    pub fn translate_ids(&self, source: &[TokenId], cache: &CacheTokens, mode: DecodeMode) -> Result<Vec<TokenId>> {
        self.model
            .decode(source, cache.ids(), mode, Self::max_output_len(source.len()))
    }

    pub fn target_surfaces(&self, ids: &[TokenId]) -> Vec<String> {
        self.vocab.target.decode(ids)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let params = self
            .model
            .params
            .names
            .iter()
            .zip(&self.model.params.tensors)
            .map(|(name, t)| {
                let e = ParamEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                    len: t.len(),
                };
                offset += t.len();
                e
            })
            .collect();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            model: self.model.config.clone(),
            tfidf: self.tfidf.clone(),
            idf_formula: IDF_FORMULA.to_string(),
            vocab: self.vocab.clone(),
            document_frequencies: self.bank.stats.clone(),
            users: self.users.clone(),
            params,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serialises");
        let mut out = Vec::with_capacity(20 + json.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.model.params.tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: String| Error::Checkpoint(m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(fail("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(fail(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(20..20 + len)
            .ok_or_else(|| fail("truncated manifest".into()))?;
        let m: Manifest = serde_json::from_slice(json).map_err(|e| fail(format!("manifest: {e}")))?;
        if m.format_version != version {
            return Err(fail("manifest version disagrees with the header".into()));
        }
        if m.idf_formula != IDF_FORMULA {
            return Err(fail(format!("unsupported IDF formula {}", m.idf_formula)));
        }
        let data = &bytes[20 + len..];
        if !data.len().is_multiple_of(4) {
            return Err(fail("data section is not a whole number of floats".into()));
        }
        let floats: Vec<f32> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mut expected = 0;
        let mut store = ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        };
        for e in &m.params {
            if e.offset != expected || e.len != e.shape.iter().product::<usize>() {
                return Err(fail(format!("parameter {} has an inconsistent extent", e.name)));
            }
            let slice = floats
                .get(e.offset..e.offset + e.len)
                .ok_or_else(|| fail(format!("parameter {} runs past the data section", e.name)))?;
            store.names.push(e.name.clone());
            store.tensors.push(Tensor::new(&e.shape, slice.to_vec())?);
            expected += e.len;
        }
        if expected != floats.len() {
            return Err(fail(format!(
                "manifest covers {expected} values but the data section holds {}",
                floats.len()
            )));
        }
        let model = Transformer::from_params(m.model, m.vocab.source.len(), m.vocab.target.len(), store)?;
        let engine = Engine::new(model, m.vocab, m.tfidf, m.users);
        if engine.bank.stats != m.document_frequencies {
            return Err(fail("document frequencies do not match the stored users".into()));
        }
        Ok(engine)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn engine() -> Engine {
        let mut vocab = Vocabulary::default();
        for w in ["a", "b", "c"] {
            vocab.source.insert(w);
            vocab.target.insert(&w.to_uppercase());
        }
        let cfg = ModelConfig {
            d_model: 8,
            ffn_dim: 8,
            layers: 1,
            heads: 2,
            max_positions: 16,
            ..ModelConfig::default()
        };
        let model = Transformer::new(cfg, vocab.source.len(), vocab.target.len(), 1).unwrap();
        let users = BTreeMap::from([
            ("u1".to_string(), vec![vec![4, 5], vec![4]]),
            ("u2".to_string(), vec![vec![6, 5]]),
        ]);
        Engine::new(model, vocab, TfidfConfig::default(), users)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let e = engine();
        let bytes = e.to_bytes();
        let back = Engine::from_bytes(&bytes).unwrap();
        assert_eq!(back, e);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let bytes = engine().to_bytes();
        let mut bad_version = bytes.clone();
        bad_version[8] = 9;
        assert!(matches!(Engine::from_bytes(&bad_version), Err(Error::Checkpoint(_))));
        assert!(Engine::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 4]);
        assert!(Engine::from_bytes(&extra).is_err());
        assert!(Engine::from_bytes(b"nonsense").is_err());
    }
}
