//! The three training objectives and their combination.
//!
//! Per target position t of a sentence pair:
//!
//! * prediction loss: negative log-likelihood of the gold token under the
//!   model's output softmax. Standard cross entropy against a one-hot
//!   target.
//! * alignment loss: KL divergence from the retrieved token distribution to
//!   the model distribution, taken over the support of the neighbor set.
//!   The retrieved distribution is a constant (no gradient flows through the
//!   retrieval), and the model side is the full-vocabulary softmax evaluated
//!   at the support tokens, deliberately not renormalized. With the support
//!   mass summing to at most one, the divergence is provably nonnegative.
//! * representation loss: log of (total kernel mass over the neighbor set /
//!   kernel mass on gold-token neighbors), with the exponential-cosine
//!   kernel. Zero exactly when every neighbor carries the gold token.
//!   The gold mass is clamped from below so the loss stays finite when no
//!   neighbor is gold; the total-mass side keeps its gradient either way.
//!
//! A pair's objective is sum over positions of (l_a + alpha l_i + beta l_r),
//! optionally divided by the number of target positions. Batch aggregation
//! (mean over pairs) happens in the trainer via gradient scaling.

use std::sync::Arc;

use ndarray::Array2;

use crate::autodiff::NodeId;
use crate::datastore::{Datastore, NeighborSet};
use crate::error::{Error, Result};
use crate::model::Graph;
use crate::smoothing::{knn_distribution, KernelSpec};

/// Gold-mass floor in the representation loss.
pub const REP_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.2, beta: 0.2 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!(
                    "loss weight {name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Divide each pair's loss by its target length instead of summing.
    pub per_token_mean: bool,
    /// Floor for the gold kernel mass in the representation loss.
    pub rep_eps: f64,
    pub use_alignment: bool,
    pub use_representation: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            per_token_mean: false,
            rep_eps: REP_EPS,
            use_alignment: true,
            use_representation: true,
        }
    }
}

/// Everything retrieval contributes to one target position: the neighbor
/// tokens, their keys, and the smoothed distribution over distinct tokens.
/// The distribution is computed by the caller from the live representation
/// and enters the loss as a constant, which is what makes the alignment
/// term a stop-gradient construction.
#[derive(Debug, Clone)]
pub struct PositionRetrieval {
    pub tokens: Vec<u32>,
    /// One row per neighbor, aligned with `tokens`.
    pub keys: Arc<Array2<f64>>,
    /// Distribution over distinct retrieved tokens, sorted by token id.
    pub p_knn: Vec<(u32, f64)>,
}

impl PositionRetrieval {
    pub fn from_neighbors(
        kernel: &KernelSpec,
        query: &[f64],
        neighbors: &NeighborSet,
        ds: &Datastore,
    ) -> Result<Self> {
        if neighbors.is_empty() {
            return Err(Error::state("retrieval produced an empty neighbor set"));
        }
        let tokens = neighbors.tokens();
        let keys = ds.neighbor_keys(neighbors);
        let p_knn = knn_distribution(kernel, query, &tokens, keys.view())?;
        Ok(PositionRetrieval {
            tokens,
            keys: Arc::new(keys),
            p_knn,
        })
    }
}

/// One pair's assembled objective. Scalar fields carry the same
/// normalization as `root` (summed, or per-token when configured).
#[derive(Debug, Clone, Copy)]
pub struct PairLoss {
    pub root: NodeId,
    pub l_a: f64,
    pub l_i: f64,
    pub l_r: f64,
    pub total: f64,
    /// Positions where no retrieved neighbor carried the gold token, so the
    /// gold-mass floor kicked in.
    pub clamp_hits: usize,
    pub positions: usize,
}

/// Build the combined loss for one sentence pair on an existing graph.
/// `states` must be the teacher-forced decoder states for `target`.
/// `retrieval` is one entry per target position; pass `None` to train on
/// the prediction loss alone.
pub fn pair_loss(
    graph: &mut Graph,
    states: NodeId,
    target: &[u32],
    retrieval: Option<&[PositionRetrieval]>,
    cfg: &LossConfig,
) -> Result<PairLoss> {
    cfg.weights.validate()?;
    if target.is_empty() {
        return Err(Error::invalid_input("cannot score an empty target"));
    }
    if graph.tape.value(states).nrows() != target.len() {
        return Err(Error::invalid_input(format!(
            "{} decoder states for {} target positions",
            graph.tape.value(states).nrows(),
            target.len()
        )));
    }
    if let Some(r) = retrieval {
        if r.len() != target.len() {
            return Err(Error::invalid_input(format!(
                "{} retrieval sets for {} target positions",
                r.len(),
                target.len()
            )));
        }
    }

    let log_probs = graph.log_probs(states);
    let vocab_size = graph.tape.value(log_probs).ncols();

    // Prediction loss: one gather of -log p at the gold tokens.
    let ce_picks: Vec<(usize, usize, f64)> = target
        .iter()
        .enumerate()
        .map(|(t, &y)| (t, y as usize, -1.0))
        .collect();
    let l_a_node = graph.tape.weighted_picks(log_probs, ce_picks);
    let l_a = graph.tape.value(l_a_node)[[0, 0]];

    let mut root = l_a_node;
    let mut l_i = 0.0;
    let mut l_r = 0.0;
    let mut clamp_hits = 0;

    if let Some(retrieval) = retrieval {
        if cfg.use_alignment {
            // KL(p_knn || p_model) summed over positions. The p_knn factors
            // are constants; only the -sum w log p_model part carries grad.
            let mut picks = Vec::new();
            let mut entropy_part = 0.0;
            for (t, r) in retrieval.iter().enumerate() {
                for &(y, w) in &r.p_knn {
                    if (y as usize) >= vocab_size {
                        return Err(Error::invalid_input(format!(
                            "retrieved token {y} outside vocabulary of size {vocab_size}"
                        )));
                    }
                    if w > 0.0 {
                        entropy_part += w * w.ln();
                        picks.push((t, y as usize, -w));
                    }
                }
            }
            let cross = graph.tape.weighted_picks(log_probs, picks);
            let shift = graph.tape.constant(Array2::from_elem((1, 1), entropy_part));
            let l_i_node = graph.tape.add(cross, shift);
            l_i = graph.tape.value(l_i_node)[[0, 0]];
            let scaled = graph.tape.scale(l_i_node, cfg.weights.alpha);
            root = graph.tape.add(root, scaled);
        }

        if cfg.use_representation {
            let mut sum: Option<NodeId> = None;
            for (t, r) in retrieval.iter().enumerate() {
                let gold: Vec<bool> = r.tokens.iter().map(|&y| y == target[t]).collect();
                let h_t = graph.tape.rows(states, vec![t]);
                let (node, clamped) =
                    graph
                        .tape
                        .exp_cos_gold(h_t, Arc::clone(&r.keys), gold, cfg.rep_eps)?;
                if clamped {
                    clamp_hits += 1;
                }
                sum = Some(match sum {
                    Some(acc) => graph.tape.add(acc, node),
                    None => node,
                });
            }
            let l_r_node = sum.expect("target verified non-empty");
            l_r = graph.tape.value(l_r_node)[[0, 0]];
            let scaled = graph.tape.scale(l_r_node, cfg.weights.beta);
            root = graph.tape.add(root, scaled);
        }
    }

    let positions = target.len();
    if cfg.per_token_mean {
        root = graph.tape.scale(root, 1.0 / positions as f64);
        l_i /= positions as f64;
        l_r /= positions as f64;
    }
    let total = graph.tape.value(root)[[0, 0]];
    let l_a = if cfg.per_token_mean { l_a / positions as f64 } else { l_a };

    Ok(PairLoss {
        root,
        l_a,
        l_i,
        l_r,
        total,
        clamp_hits,
        positions,
    })
}
