//! Evaluation metrics: teacher-forced token accuracy, retrieval accuracy
//! bucketed by token frequency rank, and corpus BLEU.
//!
//! Vocabulary ids double as frequency ranks (the vocabulary is sorted by
//! count), so bucketing by rank is bucketing by id.

use std::collections::HashMap;
use std::hash::Hash;

use crate::corpus::ParallelCorpus;
use crate::datastore::Datastore;
use crate::error::{Error, Result};
use crate::model::Model;

/// Rank cut points splitting the vocabulary into frequency bands. Cuts
/// [c1, c2] make three buckets: [0, c1), [c1, c2), [c2, infinity).
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FrequencyBuckets {
    cuts: Vec<u32>,
}

impl FrequencyBuckets {
    pub fn new(cuts: Vec<u32>) -> Result<Self> {
        if cuts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid_input(
                "bucket cut points must be strictly increasing",
            ));
        }
        if cuts.first() == Some(&0) {
            return Err(Error::invalid_input("a cut at rank 0 leaves an empty first bucket"));
        }
        Ok(FrequencyBuckets { cuts })
    }

    /// Four equal-width rank bands over a vocabulary.
    pub fn quartiles(vocab_size: usize) -> Self {
        let v = vocab_size as u32;
        let mut cuts: Vec<u32> = vec![v / 4, v / 2, 3 * v / 4];
        cuts.retain(|&c| c > 0);
        cuts.dedup();
        FrequencyBuckets { cuts }
    }

    pub fn count(&self) -> usize {
        self.cuts.len() + 1
    }

    pub fn bucket_of(&self, rank: u32) -> usize {
        self.cuts.iter().position(|&c| rank < c).unwrap_or(self.cuts.len())
    }

    pub fn bounds(&self, bucket: usize) -> (u32, Option<u32>) {
        let lo = if bucket == 0 { 0 } else { self.cuts[bucket - 1] };
        let hi = self.cuts.get(bucket).copied();
        (lo, hi)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BucketAccuracy {
    pub lo: u32,
    pub hi: Option<u32>,
    pub positions: usize,
    /// Absent when no evaluated position fell in the band.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KnnAccuracyReport {
    pub k: usize,
    pub positions: usize,
    pub overall: f64,
    pub buckets: Vec<BucketAccuracy>,
}

/// Fraction of a neighbor set voting for the gold token.
pub fn neighbor_hit_rate(neighbor_tokens: &[u32], gold: u32) -> f64 {
    if neighbor_tokens.is_empty() {
        return 0.0;
    }
    let hits = neighbor_tokens.iter().filter(|&&t| t == gold).count();
    hits as f64 / neighbor_tokens.len() as f64
}

/// Teacher-forced accuracy: fraction of target positions where the model's
/// argmax equals the gold token. Ties resolve to the lowest id, matching
/// greedy decoding.
pub fn token_accuracy(model: &Model, corpus: &ParallelCorpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::invalid_input("cannot evaluate an empty corpus"));
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for pair in &corpus.pairs {
        let states = model.forward_teacher_forced(&pair.source, &pair.target)?;
        for (t, &gold) in pair.target.iter().enumerate() {
            let logits = model.logits(&states.row(t).to_owned())?;
            let mut best = 0usize;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            if best as u32 == gold {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

/// Mean hit rate of k-nearest-neighbor retrieval against the gold token,
/// overall and per frequency band of the gold token, as percentages in
/// [0, 100]. `exclude_self` drops each position's own datastore entry,
/// which is only meaningful when the corpus is the one the datastore was
/// built from.
pub fn mean_knn_accuracy(
    model: &Model,
    ds: &Datastore,
    corpus: &ParallelCorpus,
    k: usize,
    buckets: &FrequencyBuckets,
    exclude_self: bool,
) -> Result<KnnAccuracyReport> {
    if corpus.is_empty() {
        return Err(Error::invalid_input("cannot evaluate an empty corpus"));
    }
    let mut sums = vec![0.0f64; buckets.count()];
    let mut counts = vec![0usize; buckets.count()];
    for (sent, pair) in corpus.pairs.iter().enumerate() {
        let states = model.forward_teacher_forced(&pair.source, &pair.target)?;
        for (t, &gold) in pair.target.iter().enumerate() {
            let h: Vec<f64> = states.row(t).to_vec();
            let exclude = exclude_self.then_some((sent as u32, t as u32));
            let neighbors = ds.query(&h, k, exclude)?;
            let rate = neighbor_hit_rate(&neighbors.tokens(), gold);
            let b = buckets.bucket_of(gold);
            sums[b] += rate;
            counts[b] += 1;
        }
    }
    let positions: usize = counts.iter().sum();
    let overall = 100.0 * sums.iter().sum::<f64>() / positions as f64;
    let buckets_out = (0..buckets.count())
        .map(|b| {
            let (lo, hi) = buckets.bounds(b);
            BucketAccuracy {
                lo,
                hi,
                positions: counts[b],
                accuracy: (counts[b] > 0).then(|| 100.0 * sums[b] / counts[b] as f64),
            }
        })
        .collect();
    Ok(KnnAccuracyReport {
        k,
        positions,
        overall,
        buckets: buckets_out,
    })
}

/// Corpus BLEU with up-to-4-gram precision, brevity penalty, and add-one
/// smoothing on the higher orders. Unigram precision stays unsmoothed so a
/// candidate sharing nothing with its references scores exactly zero.
pub fn bleu<T: Eq + Hash + Clone>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::invalid_input("bleu needs at least one sentence"));
    }
    if candidates.len() != references.len() {
        return Err(Error::invalid_input(format!(
            "{} candidates against {} references",
            candidates.len(),
            references.len()
        )));
    }

    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, reference) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += reference.len();
        for n in 1..=4 {
            let cand_counts = ngram_counts(cand, n);
            let ref_counts = ngram_counts(reference, n);
            for (gram, &c) in &cand_counts {
                let r = ref_counts.get(gram).copied().unwrap_or(0);
                matched[n - 1] += c.min(r);
            }
            total[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }

    if total[0] == 0 || matched[0] == 0 {
        return Ok(0.0);
    }
    let mut log_precision_sum = 0.0;
    for n in 0..4 {
        let p = if n == 0 {
            matched[0] as f64 / total[0] as f64
        } else {
            (matched[n] + 1) as f64 / (total[n] + 1) as f64
        };
        log_precision_sum += p.ln();
    }
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(100.0 * bp * (log_precision_sum / 4.0).exp())
}

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}
