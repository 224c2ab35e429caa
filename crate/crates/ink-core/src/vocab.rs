//! Token vocabulary with dense ids and frequency ranks.
//!
//! Ids are assigned in descending corpus-frequency order after the four
//! reserved specials, so a token's id doubles as its frequency rank: the
//! higher the id, the rarer the token. Evaluation buckets rely on this.
//!
//! On-disk format: one token per line, the id is the zero-based line number,
//! and the corpus frequency follows after a single tab.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

const SPECIALS: [&str; 4] = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN];

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    freqs: Vec<u64>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Build from raw token counts. Tokens below `min_count` are dropped and
    /// will map to `UNK` at encode time. Remaining tokens are ranked by
    /// descending count, ties broken lexicographically so builds are
    /// reproducible regardless of iteration order.
    pub fn from_counts<I>(counts: I, min_count: u64) -> Result<Self>
    where
        I: IntoIterator<Item = (String, u64)>,
    {
        let mut kept: Vec<(String, u64)> = Vec::new();
        for (token, count) in counts {
            if SPECIALS.contains(&token.as_str()) {
                return Err(Error::invalid_input(format!(
                    "token {token:?} is reserved"
                )));
            }
            if token.is_empty() || token.chars().any(char::is_whitespace) {
                return Err(Error::invalid_input(format!(
                    "token {token:?} is empty or contains whitespace"
                )));
            }
            if count >= min_count.max(1) {
                kept.push((token, count));
            }
        }
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut freqs: Vec<u64> = vec![0; SPECIALS.len()];
        for (token, count) in kept {
            tokens.push(token);
            freqs.push(count);
        }
        Self::from_parts(tokens, freqs)
    }

    fn from_parts(tokens: Vec<String>, freqs: Vec<u64>) -> Result<Self> {
        assert_eq!(tokens.len(), freqs.len());
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, token) in tokens.iter().enumerate() {
            if index.insert(token.clone(), id as u32).is_some() {
                return Err(Error::format(format!("duplicate token {token:?}")));
            }
        }
        for (want_id, special) in SPECIALS.iter().enumerate() {
            if index.get(*special) != Some(&(want_id as u32)) {
                return Err(Error::format(format!(
                    "special {special} missing or not at id {want_id}"
                )));
            }
        }
        Ok(Vocabulary {
            tokens,
            freqs,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // specials are always present
    }

    /// Id for a token, falling back to `UNK` for out-of-vocabulary tokens.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    /// Id for a token without the unk fallback.
    pub fn lookup(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn frequency(&self, id: u32) -> u64 {
        self.freqs[id as usize]
    }

    pub fn encode(&self, tokens: impl IntoIterator<Item = impl AsRef<str>>) -> Vec<u32> {
        tokens.into_iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter().map(|&id| self.token(id)).collect()
    }

    /// FNV-1a over every token and frequency. Stored in checkpoint headers so
    /// a model is never silently paired with the wrong vocabulary.
    pub fn hash64(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (token, freq) in self.tokens.iter().zip(&self.freqs) {
            eat(token.as_bytes());
            eat(&[0xff]);
            eat(&freq.to_le_bytes());
        }
        h
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (token, freq) in self.tokens.iter().zip(&self.freqs) {
            writeln!(out, "{token}\t{freq}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut tokens = Vec::new();
        let mut freqs = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let (token, freq) = line.split_once('\t').ok_or_else(|| {
                Error::format(format!(
                    "vocabulary line {}: expected token<TAB>frequency",
                    lineno + 1
                ))
            })?;
            let freq: u64 = freq.parse().map_err(|_| {
                Error::format(format!(
                    "vocabulary line {}: bad frequency {freq:?}",
                    lineno + 1
                ))
            })?;
            tokens.push(token.to_string());
            freqs.push(freq);
        }
        Self::from_parts(tokens, freqs)
    }
}
