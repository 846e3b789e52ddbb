use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;

const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// One side of the vocabulary: a bijection between surfaces and ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Table {
    surfaces: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Default for Table {
    fn default() -> Self {
        Self::from(Vec::new())
    }
}

impl From<Vec<String>> for Table {
    fn from(surfaces: Vec<String>) -> Self {
        let mut table = Table {
            surfaces: RESERVED.iter().map(|s| s.to_string()).collect(),
            index: HashMap::new(),
        };
        for (id, s) in table.surfaces.iter().enumerate() {
            table.index.insert(s.clone(), id);
        }
        for s in surfaces.into_iter().skip_while(|s| RESERVED.contains(&s.as_str())) {
            table.insert(&s);
        }
        table
    }
}

impl From<Table> for Vec<String> {
    fn from(t: Table) -> Self {
        t.surfaces
    }
}

impl Table {
    /// Returns the id of `surface`, assigning the next free id if unseen.
    pub fn insert(&mut self, surface: &str) -> TokenId {
        if let Some(&id) = self.index.get(surface) {
            return id;
        }
        let id = self.surfaces.len();
        self.surfaces.push(surface.to_string());
        self.index.insert(surface.to_string(), id);
        id
    }

    pub fn id(&self, surface: &str) -> TokenId {
        self.index.get(surface).copied().unwrap_or(UNK)
    }

    pub fn surface(&self, id: TokenId) -> &str {
        self.surfaces.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Surfaces of `ids`, stopping at the first EOS and dropping PAD/BOS.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != PAD && id != BOS)
            .map(|&id| self.surface(id).to_string())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn is_reserved(id: TokenId) -> bool {
        id < RESERVED.len()
    }
}

/// Source and target tables. Ids 0..=3 are PAD, BOS, EOS, UNK in both.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub source: Table,
    pub target: Table,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_fixed_and_unknowns_map_to_unk() {
        let mut t = Table::default();
        assert_eq!(t.len(), 4);
        assert_eq!(t.insert("cat"), 4);
        assert_eq!(t.insert("cat"), 4);
        assert_eq!(t.id("dog"), UNK);
        assert_eq!(t.surface(EOS), "</s>");
        assert_eq!(t.decode(&[BOS, 4, EOS, 4]), vec!["cat".to_string()]);
    }

    #[test]
    fn serde_round_trip_preserves_ids() {
        let mut t = Table::default();
        for w in ["x", "y", "z"] {
            t.insert(w);
        }
        let json = serde_json::to_string(&t).unwrap();
        let back: Table = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.id("z"), 6);
    }
}
