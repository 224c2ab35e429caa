//! Greedy and beam-search decoding.
//!
//! Decoding is written against the [`StepScorer`] trait, which hands back
//! log-probabilities over the vocabulary for a given decoder prefix. The
//! translation model implements it, a datastore-interpolated scorer wraps it,
//! and tests can drive the search with hand-built distributions.
//!
//! Beam search finalizes a hypothesis only when eos is ranked inside the
//! beam at that step, which makes `beam_size = 1` reproduce greedy decoding
//! token for token, regardless of length penalty. Deliberately kept as two
//! separate code paths so that equivalence stays a checkable property
//! rather than a tautology.

use ndarray::Array1;

use crate::datastore::Datastore;
use crate::error::{Error, Result};
use crate::model::{Graph, Model, TrainScope};
use crate::smoothing::{interpolate, knn_distribution, KernelSpec};
use crate::vocab::{BOS, EOS};

#[derive(Debug, Clone, Copy)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub length_penalty: f64,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 4,
            length_penalty: 0.6,
            max_len: 64,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        DecodeConfig {
            beam_size: 1,
            length_penalty: 0.0,
            max_len,
        }
    }
}

/// Scores the next token given the decoder prefix (which starts with bos).
pub trait StepScorer {
    /// Natural-log probabilities over the full vocabulary.
    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>>;
}

/// Greedy argmax decode; ties resolve to the lowest token id.
pub fn greedy_decode<S: StepScorer>(scorer: &mut S, max_len: usize) -> Result<Vec<u32>> {
    let mut prefix = vec![BOS];
    let mut output = Vec::new();
    for _ in 0..max_len {
        let lp = scorer.log_probs(&prefix)?;
        let best = argmax(&lp);
        if best == EOS {
            break;
        }
        output.push(best);
        prefix.push(best);
    }
    Ok(output)
}

fn argmax(values: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best as u32
}

struct Hypothesis {
    tokens: Vec<u32>, // starts with BOS
    score: f64,       // sum of token log-probs
}

struct Finished {
    tokens: Vec<u32>, // generated tokens, no BOS, no EOS
    normalized: f64,
}

/// Beam search with per-token log-prob accumulation and length-normalized
/// final scoring: `score / len^penalty` where `len` counts generated tokens.
pub fn beam_search<S: StepScorer>(scorer: &mut S, cfg: &DecodeConfig) -> Result<Vec<u32>> {
    if cfg.beam_size == 0 {
        return Err(Error::invalid_input("beam size must be at least 1"));
    }
    if cfg.beam_size == 1 {
        // Not a shortcut through greedy_decode: the general machinery below
        // must itself collapse to greedy, and tests compare the two paths.
    }
    let beam = cfg.beam_size;
    let mut live: Vec<Hypothesis> = vec![Hypothesis {
        tokens: vec![BOS],
        score: 0.0,
    }];
    let mut finished: Vec<Finished> = Vec::new();

    for _step in 0..cfg.max_len {
        // Expand each live hypothesis by its top candidates. 2 * beam
        // expansions guarantee the beam can refill even if every hypothesis
        // wants to emit eos.
        let mut candidates: Vec<(usize, u32, f64)> = Vec::new();
        for (hyp_idx, hyp) in live.iter().enumerate() {
            let lp = scorer.log_probs(&hyp.tokens)?;
            for (token, token_lp) in top_k(&lp, 2 * beam) {
                candidates.push((hyp_idx, token, hyp.score + token_lp));
            }
        }
        candidates.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .expect("scores are finite")
                .then(a.0.cmp(&b.0))
                .then(a.1.cmp(&b.1))
        });

        let mut next_live: Vec<Hypothesis> = Vec::new();
        for (rank, &(hyp_idx, token, score)) in candidates.iter().enumerate() {
            if token == EOS {
                // Only a beam-ranked eos may finalize; a worse eos must not
                // kill a hypothesis that still competes.
                if rank < beam {
                    let tokens = live[hyp_idx].tokens[1..].to_vec();
                    let len = (tokens.len() + 1) as f64; // eos counts
                    finished.push(Finished {
                        tokens,
                        normalized: normalize(score, len, cfg.length_penalty),
                    });
                }
            } else if next_live.len() < beam {
                let mut tokens = live[hyp_idx].tokens.clone();
                tokens.push(token);
                next_live.push(Hypothesis { tokens, score });
            }
            if finished.len() >= beam {
                break;
            }
        }
        if finished.len() >= beam || next_live.is_empty() {
            live = next_live;
            break;
        }
        live = next_live;
    }

    // Hypotheses still alive at the length cap finalize without eos.
    if finished.is_empty() {
        for hyp in &live {
            let tokens = hyp.tokens[1..].to_vec();
            let len = tokens.len().max(1) as f64;
            finished.push(Finished {
                tokens,
                normalized: normalize(hyp.score, len, cfg.length_penalty),
            });
        }
    }
    if finished.is_empty() {
        return Err(Error::state("no hypothesis produced"));
    }

    finished.sort_by(|a, b| {
        b.normalized
            .partial_cmp(&a.normalized)
            .expect("scores are finite")
            .then(a.tokens.len().cmp(&b.tokens.len()))
            .then(a.tokens.cmp(&b.tokens))
    });
    Ok(finished.swap_remove(0).tokens)
}

fn normalize(score: f64, len: f64, penalty: f64) -> f64 {
    score / len.powf(penalty)
}

fn top_k(values: &[f64], k: usize) -> Vec<(u32, f64)> {
    let mut idx: Vec<u32> = (0..values.len() as u32).collect();
    idx.sort_by(|&a, &b| {
        values[b as usize]
            .partial_cmp(&values[a as usize])
            .expect("log probs are finite")
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx.into_iter().map(|i| (i, values[i as usize])).collect()
}

/// Model-backed scorer: encodes the source once, then scores each prefix
/// with a fresh decoder pass.
pub struct ModelScorer<'m> {
    model: &'m Model,
    memory: ndarray::Array2<f64>,
}

impl<'m> ModelScorer<'m> {
    pub fn new(model: &'m Model, source: &[u32]) -> Result<Self> {
        let mut graph = Graph::new(model, TrainScope::None);
        let memory = graph.encode(source)?;
        Ok(ModelScorer {
            model,
            memory: graph.tape.value(memory).to_owned(),
        })
    }

    /// Representation of the last prefix position plus log-probs for the
    /// next token. The representation is what a datastore query keys on.
    pub fn step(&mut self, prefix: &[u32]) -> Result<(Array1<f64>, Vec<f64>)> {
        let mut graph = Graph::new(self.model, TrainScope::None);
        let memory = graph.tape.constant(self.memory.clone());
        let states = graph.decoder_states(memory, prefix)?;
        let lp = graph.log_probs(states);
        let last = graph.tape.value(states).nrows() - 1;
        let h = graph.tape.value(states).row(last).to_owned();
        let row = graph.tape.value(lp).row(last).to_vec();
        Ok((h, row))
    }
}

impl StepScorer for ModelScorer<'_> {
    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>> {
        Ok(self.step(prefix)?.1)
    }
}

/// Retrieval-smoothed scorer: blends the model's next-token distribution
/// with a kernel density estimate over the datastore neighbors of the
/// current decoder state, in probability space.
pub struct KnnScorer<'m, 'd> {
    inner: ModelScorer<'m>,
    ds: &'d Datastore,
    kernel: KernelSpec,
    lambda: f64,
    k: usize,
}

impl<'m, 'd> KnnScorer<'m, 'd> {
    pub fn new(
        model: &'m Model,
        source: &[u32],
        ds: &'d Datastore,
        kernel: KernelSpec,
        lambda: f64,
        k: usize,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::invalid_input(format!(
                "interpolation weight must lie in [0, 1], got {lambda}"
            )));
        }
        if k == 0 {
            return Err(Error::invalid_input("k must be at least 1"));
        }
        kernel.validate()?;
        if ds.dim() != model.config.d_model {
            return Err(Error::invalid_input(format!(
                "datastore keys have width {}, model states have width {}",
                ds.dim(),
                model.config.d_model
            )));
        }
        Ok(KnnScorer {
            inner: ModelScorer::new(model, source)?,
            ds,
            kernel,
            lambda,
            k,
        })
    }
}

impl StepScorer for KnnScorer<'_, '_> {
    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>> {
        let (h, lp) = self.inner.step(prefix)?;
        let h = h.as_slice().expect("decoder state rows are contiguous");
        let p_model: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
        let neighbors = self.ds.query(h, self.k, None)?;
        let keys = self.ds.neighbor_keys(&neighbors);
        let p_knn = knn_distribution(&self.kernel, h, &neighbors.tokens(), keys.view())?;
        let mixed = interpolate(&p_knn, &p_model, self.lambda)?;
        Ok(mixed
            .into_iter()
            .map(|p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
            .collect())
    }
}

impl Model {
    /// Decode a source sentence (which must end in eos). Returns generated
    /// target tokens without bos/eos.
    pub fn decode(&self, source: &[u32], cfg: &DecodeConfig) -> Result<Vec<u32>> {
        let mut scorer = ModelScorer::new(self, source)?;
        beam_search(&mut scorer, cfg)
    }

    /// Decode with datastore smoothing at weight `lambda`.
    pub fn decode_with_store(
        &self,
        source: &[u32],
        ds: &Datastore,
        kernel: KernelSpec,
        lambda: f64,
        k: usize,
        cfg: &DecodeConfig,
    ) -> Result<Vec<u32>> {
        let mut scorer = KnnScorer::new(self, source, ds, kernel, lambda, k)?;
        beam_search(&mut scorer, cfg)
    }
}
