//! Parallel corpus ingestion.
//!
//! Input files are UTF-8 text, one sentence pair per line, source and target
//! separated by a single tab. Tokenization is whitespace-level by default
//! with a character-level fallback for scripts without spaces. Encoded pairs
//! carry a trailing eos on both sides; bos is prepended to the decoder input
//! at forward time and never stored here.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Vocabulary, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tokenizer {
    Whitespace,
    Chars,
}

impl Tokenizer {
    pub fn split(self, text: &str) -> Vec<String> {
        match self {
            Tokenizer::Whitespace => text.split_whitespace().map(str::to_string).collect(),
            Tokenizer::Chars => text
                .chars()
                .filter(|c| !c.is_whitespace())
                .map(String::from)
                .collect(),
        }
    }
}

impl std::str::FromStr for Tokenizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whitespace" => Ok(Tokenizer::Whitespace),
            "chars" => Ok(Tokenizer::Chars),
            other => Err(Error::config(format!(
                "unknown tokenizer {other:?} (expected whitespace|chars)"
            ))),
        }
    }
}

/// One encoded sentence pair. Both sides end in eos and are never empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
}

impl SentencePair {
    /// Number of positions the pair contributes to a datastore: one per
    /// target token, eos included.
    pub fn target_len(&self) -> usize {
        self.target.len()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn total_target_tokens(&self) -> usize {
        self.pairs.iter().map(SentencePair::target_len).sum()
    }

    pub fn longest_sentence(&self) -> usize {
        self.pairs
            .iter()
            .map(|p| p.source.len().max(p.target.len()))
            .max()
            .unwrap_or(0)
    }
}

/// Raw tokenized pairs, before any vocabulary exists.
#[derive(Debug)]
pub struct RawCorpus {
    pub pairs: Vec<(Vec<String>, Vec<String>)>,
}

impl RawCorpus {
    /// Read and tokenize a corpus file. Malformed lines (not exactly one tab,
    /// an empty side, invalid UTF-8) are reported with their 1-based line
    /// number.
    pub fn read(path: &Path, tokenizer: Tokenizer) -> Result<Self> {
        let bytes = read_named(path)?;
        Self::parse(&bytes, tokenizer)
            .map_err(|e| prefix_error(e, &path.display().to_string()))
    }

    pub fn parse(bytes: &[u8], tokenizer: Tokenizer) -> Result<Self> {
        let mut pairs = Vec::new();
        for (idx, raw_line) in bytes.split(|&b| b == b'\n').enumerate() {
            let raw_line = strip_cr(raw_line);
            if raw_line.is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let line = std::str::from_utf8(raw_line)
                .map_err(|_| Error::invalid_input(format!("line {lineno}: not valid UTF-8")))?;
            let mut fields = line.split('\t');
            let (source, target) = match (fields.next(), fields.next(), fields.next()) {
                (Some(s), Some(t), None) => (s, t),
                _ => {
                    return Err(Error::invalid_input(format!(
                        "line {lineno}: expected exactly one tab separating source and target"
                    )))
                }
            };
            let source = tokenizer.split(source);
            let target = tokenizer.split(target);
            if source.is_empty() || target.is_empty() {
                return Err(Error::invalid_input(format!(
                    "line {lineno}: empty {} side",
                    if source.is_empty() { "source" } else { "target" }
                )));
            }
            pairs.push((source, target));
        }
        Ok(RawCorpus { pairs })
    }

    /// Token counts over both sides, for vocabulary construction.
    pub fn counts(&self) -> HashMap<String, u64> {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for (source, target) in &self.pairs {
            for token in source.iter().chain(target) {
                *counts.entry(token.clone()).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Encode against a vocabulary, appending eos to both sides.
    pub fn encode(&self, vocab: &Vocabulary) -> ParallelCorpus {
        let pairs = self
            .pairs
            .iter()
            .map(|(source, target)| {
                let mut s = vocab.encode(source);
                let mut t = vocab.encode(target);
                s.push(EOS);
                t.push(EOS);
                SentencePair {
                    source: s,
                    target: t,
                }
            })
            .collect();
        ParallelCorpus { pairs }
    }
}

/// Reads a file, labelling failures with the path; a missing corpus is the
/// caller's input problem, not an internal io fault.
fn read_named(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path)
        .map_err(|e| Error::invalid_input(format!("{}: {e}", path.display())))
}

fn strip_cr(line: &[u8]) -> &[u8] {
    match line.last() {
        Some(b'\r') => &line[..line.len() - 1],
        _ => line,
    }
}

fn prefix_error(e: Error, path: &str) -> Error {
    match e {
        Error::InvalidInput(msg) => Error::InvalidInput(format!("{path}: {msg}")),
        other => other,
    }
}

/// Build a vocabulary from one corpus and encode another (possibly the same)
/// against it. This is the usual two-step ingest.
pub fn build_vocabulary(raw: &RawCorpus, min_count: u64) -> Result<Vocabulary> {
    let mut counts: Vec<(String, u64)> = raw.counts().into_iter().collect();
    counts.sort(); // deterministic input order; from_counts re-sorts by rank
    Vocabulary::from_counts(counts, min_count)
}

/// Read a corpus file and encode it against an existing vocabulary.
pub fn load_corpus(path: &Path, vocab: &Vocabulary, tokenizer: Tokenizer) -> Result<ParallelCorpus> {
    Ok(RawCorpus::read(path, tokenizer)?.encode(vocab))
}

/// Read source-only lines (no tab) for translation input.
pub fn load_source_lines(path: &Path, vocab: &Vocabulary, tokenizer: Tokenizer) -> Result<Vec<Vec<u32>>> {
    let bytes = read_named(path)?;
    let mut out = Vec::new();
    for (idx, raw_line) in bytes.split(|&b| b == b'\n').enumerate() {
        let raw_line = strip_cr(raw_line);
        if raw_line.is_empty() {
            continue;
        }
        let line = std::str::from_utf8(raw_line).map_err(|_| {
            Error::invalid_input(format!("{}: line {}: not valid UTF-8", path.display(), idx + 1))
        })?;
        let mut ids = vocab.encode(tokenizer.split(line));
        if ids.is_empty() {
            return Err(Error::invalid_input(format!(
                "{}: line {}: empty sentence",
                path.display(),
                idx + 1
            )));
        }
        ids.push(EOS);
        out.push(ids);
    }
    Ok(out)
}
