//! Retrieval smoothing: turn a neighbor set into a probability distribution
//! and blend it with the model's own prediction.
//!
//! The retrieved distribution is kernel density estimation over the set:
//!
//! ```text
//! p(y) = sum_i 1(y_i = y) k(h, k_i) / sum_j k(h, k_j)
//! ```
//!
//! computed in log space so huge distances degrade gracefully instead of
//! producing 0/0. Two kernels are supported: the negative exponential of
//! Euclidean distance (the retrieval default, temperature 10) and the
//! exponential of cosine similarity (the kernel the representation loss is
//! built on).

use ndarray::ArrayView2;

use crate::autodiff::log_sum_exp;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum KernelSpec {
    /// k(h, k') = exp(-||h - k'|| / temperature). Plain Euclidean distance,
    /// not squared.
    NegExpDistance { temperature: f64 },
    /// k(h, k') = exp(cos(h, k')). Scale-invariant in both arguments.
    ExpCosine,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::NegExpDistance { temperature: 10.0 }
    }
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            KernelSpec::NegExpDistance { temperature } => {
                if !temperature.is_finite() || *temperature <= 0.0 {
                    return Err(Error::config(format!(
                        "kernel temperature must be positive and finite, got {temperature}"
                    )));
                }
            }
            KernelSpec::ExpCosine => {}
        }
        Ok(())
    }

    /// log k(h, key). The cosine kernel rejects zero-norm vectors: their
    /// direction is undefined, so the similarity is meaningless.
    pub fn log_eval(&self, h: &[f64], key: &[f64]) -> Result<f64> {
        if h.len() != key.len() {
            return Err(Error::invalid_input(format!(
                "kernel arguments have widths {} and {}",
                h.len(),
                key.len()
            )));
        }
        match self {
            KernelSpec::NegExpDistance { temperature } => {
                let mut d2 = 0.0;
                for (a, b) in h.iter().zip(key) {
                    let diff = a - b;
                    d2 += diff * diff;
                }
                Ok(-d2.max(0.0).sqrt() / temperature)
            }
            KernelSpec::ExpCosine => Ok(cosine(h, key)?),
        }
    }

    pub fn eval(&self, h: &[f64], key: &[f64]) -> Result<f64> {
        Ok(self.log_eval(h, key)?.exp())
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::numeric("cosine of a zero-norm vector is undefined"));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Probability of each distinct retrieved token under the kernel density
/// estimate. `keys` has one row per retrieved entry, aligned with `tokens`.
/// The result is sorted by token id and sums to 1.
pub fn knn_distribution(
    kernel: &KernelSpec,
    query: &[f64],
    tokens: &[u32],
    keys: ArrayView2<f64>,
) -> Result<Vec<(u32, f64)>> {
    kernel.validate()?;
    if tokens.is_empty() {
        return Err(Error::invalid_input("cannot smooth an empty neighbor set"));
    }
    if keys.nrows() != tokens.len() {
        return Err(Error::invalid_input(format!(
            "{} retrieved tokens but {} key rows",
            tokens.len(),
            keys.nrows()
        )));
    }

    let log_w: Vec<f64> = tokens
        .iter()
        .enumerate()
        .map(|(i, _)| {
            kernel.log_eval(
                query,
                keys.row(i).as_slice().expect("row-major neighbor keys"),
            )
        })
        .collect::<Result<_>>()?;
    let log_total = log_sum_exp(log_w.iter().copied());

    // Group log weights by token, normalize in log space, ex, then sort.
    let mut distinct: Vec<u32> = tokens.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let mut out = Vec::with_capacity(distinct.len());
    for y in distinct {
        let group: Vec<f64> = tokens
            .iter()
            .zip(&log_w)
            .filter(|(t, _)| **t == y)
            .map(|(_, w)| *w)
            .collect();
        out.push((y, (log_sum_exp(group) - log_total).exp()));
    }
    Ok(out)
}

/// Blend the sparse retrieved distribution into the model distribution:
/// p(y) = lambda p_knn(y) + (1 - lambda) p_model(y), over the full vocab.
pub fn interpolate(p_knn: &[(u32, f64)], p_model: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid_input(format!(
            "interpolation weight must lie in [0, 1], got {lambda}"
        )));
    }
    let mut out: Vec<f64> = p_model.iter().map(|p| (1.0 - lambda) * p).collect();
    for &(token, p) in p_knn {
        let slot = out.get_mut(token as usize).ok_or_else(|| {
            Error::invalid_input(format!(
                "retrieved token {token} is outside the vocabulary of size {}",
                p_model.len()
            ))
        })?;
        *slot += lambda * p;
    }
    Ok(out)
}
