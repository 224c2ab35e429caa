//! Reverse-mode automatic differentiation over 2-D `f64` tensors.
//!
//! A [`Tape`] records a topologically ordered graph of matrix operations.
//! Values are computed eagerly at node creation; [`Tape::backward`] walks the
//! tape in reverse and accumulates adjoints. Ops are tensor-granular (whole
//! matmuls, row softmaxes, layer norms), so tapes stay short: a full
//! encoder-decoder forward pass is a few hundred nodes.
//!
//! Gradients only flow where they are needed: a node requires gradients iff
//! one of its ancestors is a trainable leaf. With a frozen base model and
//! trainable adapters, the expensive weight-gradient matmuls of frozen layers
//! are skipped while activations still carry adjoints downward.
//!
//! Everything here is 64-bit. Loss and gradient paths never drop to `f32`.

use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

pub type NodeId = usize;

enum Payload {
    Owned(Array2<f64>),
    Shared(Arc<Array2<f64>>),
}

impl Payload {
    fn view(&self) -> ArrayView2<'_, f64> {
        match self {
            Payload::Owned(a) => a.view(),
            Payload::Shared(a) => a.view(),
        }
    }
}

enum Op {
    Leaf,
    /// Elementwise a + b (same shape).
    Add(NodeId, NodeId),
    /// Matrix plus a broadcast 1 x n row.
    AddRow(NodeId, NodeId),
    /// mul * x + add, elementwise; the additive part is constant so only
    /// `mul` matters for the backward pass.
    Affine { x: NodeId, mul: f64 },
    /// a (m x k) . b (k x n).
    MatMul(NodeId, NodeId),
    /// a (m x k) . b^T (n x k) -> m x n.
    MatMulTransB(NodeId, NodeId),
    Relu(NodeId),
    /// Row-wise layer normalization with trainable gain/shift (1 x d).
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        shift: NodeId,
        eps: f64,
    },
    /// Row-wise softmax. The causal mask is applied at forward time; the
    /// backward pass recovers it from the zeros it leaves behind.
    Softmax(NodeId),
    /// Row-wise log-softmax over the full row.
    LogSoftmax(NodeId),
    /// Gather rows of x by index (indices may repeat).
    Rows { x: NodeId, indices: Vec<usize> },
    /// Columns [start, start+len) of x.
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    /// Horizontal concatenation.
    ConcatCols(Vec<NodeId>),
    /// Scalar: sum of w * x[r, c] over picks.
    WeightedPicks {
        x: NodeId,
        picks: Vec<(usize, usize, f64)>,
    },
    /// Scalar kernel-sum loss over a fixed neighbor set, see `exp_cos_gold`.
    ExpCosGold {
        h: NodeId,
        keys: Arc<Array2<f64>>,
        gold: Vec<bool>,
        clamped: bool,
    },
}

struct Node {
    value: Payload,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Leaf nodes that accumulate into external parameter slots: (node, slot).
    param_leaves: Vec<(NodeId, usize)>,
}

/// Adjoints from one backward pass, indexed by node.
pub struct Gradients {
    by_node: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to a node, if any flowed there.
    pub fn of(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.by_node[id].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> ArrayView2<'_, f64> {
        self.nodes[id].value.view()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires: bool) -> NodeId {
        self.nodes.push(Node {
            value: Payload::Owned(value),
            op,
            requires_grad: requires,
        });
        self.nodes.len() - 1
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// A constant leaf; no gradient is tracked through it.
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf we want d(root)/d(leaf) for, without tying it to a parameter
    /// slot (used for inputs like a bare representation).
    pub fn input(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A parameter leaf sharing storage with the caller. Gradients are
    /// accumulated into `slot` by [`Tape::param_gradients`] when `trainable`.
    pub fn param(&mut self, value: Arc<Array2<f64>>, slot: usize, trainable: bool) -> NodeId {
        self.nodes.push(Node {
            value: Payload::Shared(value),
            op: Op::Leaf,
            requires_grad: trainable,
        });
        let id = self.nodes.len() - 1;
        if trainable {
            self.param_leaves.push((id, slot));
        }
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = &self.value(a) + &self.value(b);
        let req = self.requires(a) || self.requires(b);
        self.push(value, Op::Add(a, b), req)
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let value = &self.value(x) + &self.value(row);
        let req = self.requires(x) || self.requires(row);
        self.push(value, Op::AddRow(x, row), req)
    }

    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        let value = self.value(x).mapv(|v| mul * v + add);
        let req = self.requires(x);
        self.push(value, Op::Affine { x, mul }, req)
    }

    pub fn scale(&mut self, x: NodeId, mul: f64) -> NodeId {
        self.affine(x, mul, 0.0)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).dot(&self.value(b));
        let req = self.requires(a) || self.requires(b);
        self.push(value, Op::MatMul(a, b), req)
    }

    pub fn matmul_transb(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).dot(&self.value(b).t());
        let req = self.requires(a) || self.requires(b);
        self.push(value, Op::MatMulTransB(a, b), req)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).mapv(|v| v.max(0.0));
        let req = self.requires(x);
        self.push(value, Op::Relu(x), req)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, shift: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(shift);
        debug_assert_eq!(g.nrows(), 1);
        debug_assert_eq!(b.nrows(), 1);
        let mut out = Array2::zeros(xv.raw_dim());
        for (mut orow, xrow) in out.rows_mut().into_iter().zip(xv.rows()) {
            let d = xrow.len() as f64;
            let mean = xrow.sum() / d;
            let var = xrow.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / d;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, o) in orow.iter_mut().enumerate() {
                *o = (xrow[j] - mean) * inv * g[[0, j]] + b[[0, j]];
            }
        }
        let req = self.requires(x) || self.requires(gain) || self.requires(shift);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                shift,
                eps,
            },
            req,
        )
    }

    pub fn softmax_rows(&mut self, x: NodeId, causal: bool) -> NodeId {
        let xv = self.value(x);
        if causal {
            debug_assert_eq!(xv.nrows(), xv.ncols(), "causal mask needs a square score matrix");
        }
        let mut out = Array2::zeros(xv.raw_dim());
        for (i, (mut orow, xrow)) in out.rows_mut().into_iter().zip(xv.rows()).enumerate() {
            let limit = if causal { i + 1 } else { xrow.len() };
            let max = xrow
                .iter()
                .take(limit)
                .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut denom = 0.0;
            for j in 0..limit {
                let e = (xrow[j] - max).exp();
                orow[j] = e;
                denom += e;
            }
            for j in 0..limit {
                orow[j] /= denom;
            }
        }
        let req = self.requires(x);
        self.push(out, Op::Softmax(x), req)
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut out = Array2::zeros(xv.raw_dim());
        for (mut orow, xrow) in out.rows_mut().into_iter().zip(xv.rows()) {
            let max = xrow.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + xrow.fold(0.0, |acc, &v| acc + (v - max).exp()).ln();
            for (o, &v) in orow.iter_mut().zip(xrow) {
                *o = v - lse;
            }
        }
        let req = self.requires(x);
        self.push(out, Op::LogSoftmax(x), req)
    }

    pub fn rows(&mut self, x: NodeId, indices: Vec<usize>) -> NodeId {
        let xv = self.value(x);
        let mut out = Array2::zeros((indices.len(), xv.ncols()));
        for (mut orow, &i) in out.rows_mut().into_iter().zip(&indices) {
            orow.assign(&xv.row(i));
        }
        let req = self.requires(x);
        self.push(out, Op::Rows { x, indices }, req)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let value = self.value(x).slice(s![.., start..start + len]).to_owned();
        let req = self.requires(x);
        self.push(value, Op::SliceCols { x, start, len }, req)
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("compatible row counts");
        let req = parts.iter().any(|&p| self.requires(p));
        self.push(value, Op::ConcatCols(parts), req)
    }

    /// Scalar node: sum of `w * x[r, c]` over the picks. This is the single
    /// reduction used to assemble log-likelihood style losses from a
    /// log-softmax matrix.
    pub fn weighted_picks(&mut self, x: NodeId, picks: Vec<(usize, usize, f64)>) -> NodeId {
        let xv = self.value(x);
        let mut acc = 0.0;
        for &(r, c, w) in &picks {
            acc += w * xv[[r, c]];
        }
        let value = Array2::from_elem((1, 1), acc);
        let req = self.requires(x);
        self.push(value, Op::WeightedPicks { x, picks }, req)
    }

    /// Scalar node: `log S - log(max(S_g, eps))` where `S` sums the
    /// exponentiated-cosine kernel between `h` (1 x d) and every neighbor key
    /// and `S_g` sums it over neighbors flagged gold. Keys are constants;
    /// gradients flow to `h` only. Returns the node and whether the gold sum
    /// hit the clamp (no gold neighbor in the set).
    ///
    /// Sums are formed in log space with max subtraction, so the unclamped
    /// value is exact even for large cosines.
    pub fn exp_cos_gold(
        &mut self,
        h: NodeId,
        keys: Arc<Array2<f64>>,
        gold: Vec<bool>,
        eps: f64,
    ) -> Result<(NodeId, bool)> {
        let hv = self.value(h);
        assert_eq!(hv.nrows(), 1, "exp_cos_gold expects a single row");
        assert_eq!(gold.len(), keys.nrows());
        assert!(keys.nrows() > 0, "empty neighbor set");
        assert_eq!(keys.ncols(), hv.ncols());
        let cos = cosines(&hv, &keys)?;
        let log_s = log_sum_exp(cos.iter().copied());
        let log_sg = log_sum_exp(
            cos.iter()
                .zip(&gold)
                .filter(|(_, &g)| g)
                .map(|(&c, _)| c),
        );
        let ln_eps = eps.ln();
        let clamped = log_sg < ln_eps; // -inf when no gold neighbor
        let value = log_s - log_sg.max(ln_eps);
        let req = self.requires(h);
        let id = self.push(
            Array2::from_elem((1, 1), value),
            Op::ExpCosGold {
                h,
                keys,
                gold,
                clamped,
            },
            req,
        );
        Ok((id, clamped))
    }

    /// Reverse pass from a scalar root node.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut by_node: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        by_node[root] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..=root).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = by_node[id].take() else {
                continue;
            };
            self.backprop(id, &g, &mut by_node);
            by_node[id] = Some(g);
        }
        Gradients { by_node }
    }

    /// Add each trainable leaf's adjoint, scaled, into its parameter slot.
    pub fn accumulate_param_gradients(
        &self,
        grads: &Gradients,
        scale: f64,
        into: &mut [Array2<f64>],
    ) {
        for &(node, slot) in &self.param_leaves {
            if let Some(g) = grads.of(node) {
                into[slot].scaled_add(scale, g);
            }
        }
    }

    fn backprop(&self, id: NodeId, g: &Array2<f64>, by_node: &mut [Option<Array2<f64>>]) {
        let send = |target: NodeId, contribution: Array2<f64>, by_node: &mut [Option<Array2<f64>>]| {
            if !self.nodes[target].requires_grad {
                return;
            }
            match &mut by_node[target] {
                Some(acc) => *acc += &contribution,
                slot @ None => *slot = Some(contribution),
            }
        };

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone(), by_node);
                send(*b, g.clone(), by_node);
            }
            Op::AddRow(x, row) => {
                send(*x, g.clone(), by_node);
                let rowsum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                send(*row, rowsum, by_node);
            }
            Op::Affine { x, mul } => {
                send(*x, g.mapv(|v| v * mul), by_node);
            }
            Op::MatMul(a, b) => {
                if self.nodes[*a].requires_grad {
                    send(*a, g.dot(&self.value(*b).t()), by_node);
                }
                if self.nodes[*b].requires_grad {
                    send(*b, self.value(*a).t().dot(g), by_node);
                }
            }
            Op::MatMulTransB(a, b) => {
                if self.nodes[*a].requires_grad {
                    send(*a, g.dot(&self.value(*b)), by_node);
                }
                if self.nodes[*b].requires_grad {
                    send(*b, g.t().dot(&self.value(*a)), by_node);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut gx = g.clone();
                gx.zip_mut_with(&xv, |gv, &v| {
                    if v <= 0.0 {
                        *gv = 0.0;
                    }
                });
                send(*x, gx, by_node);
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                eps,
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let d = xv.ncols() as f64;
                let mut gx = Array2::zeros(xv.raw_dim());
                let mut ggain = Array2::zeros((1, xv.ncols()));
                let mut gshift = Array2::zeros((1, xv.ncols()));
                for (i, xrow) in xv.rows().into_iter().enumerate() {
                    let mean = xrow.sum() / d;
                    let var = xrow.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / d;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mut mean_gh = 0.0;
                    let mut mean_ghx = 0.0;
                    for j in 0..xv.ncols() {
                        let xhat = (xrow[j] - mean) * inv;
                        let gh = g[[i, j]] * gv[[0, j]];
                        ggain[[0, j]] += g[[i, j]] * xhat;
                        gshift[[0, j]] += g[[i, j]];
                        mean_gh += gh;
                        mean_ghx += gh * xhat;
                    }
                    mean_gh /= d;
                    mean_ghx /= d;
                    for j in 0..xv.ncols() {
                        let xhat = (xrow[j] - mean) * inv;
                        let gh = g[[i, j]] * gv[[0, j]];
                        gx[[i, j]] = inv * (gh - mean_gh - xhat * mean_ghx);
                    }
                }
                send(*x, gx, by_node);
                send(*gain, ggain, by_node);
                send(*shift, gshift, by_node);
            }
            Op::Softmax(x) => {
                // dx = y * (g - <g, y>) per row; masked cells have y = 0.
                let y = self.value(id);
                let mut gx = Array2::zeros(y.raw_dim());
                for i in 0..y.nrows() {
                    let dot: f64 = (0..y.ncols()).map(|j| g[[i, j]] * y[[i, j]]).sum();
                    for j in 0..y.ncols() {
                        gx[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                    }
                }
                send(*x, gx, by_node);
            }
            Op::LogSoftmax(x) => {
                // dx = g - softmax * sum(g) per row; softmax = exp(value).
                let y = self.value(id);
                let mut gx = g.clone();
                for i in 0..y.nrows() {
                    let gsum: f64 = (0..y.ncols()).map(|j| g[[i, j]]).sum();
                    for j in 0..y.ncols() {
                        gx[[i, j]] -= y[[i, j]].exp() * gsum;
                    }
                }
                send(*x, gx, by_node);
            }
            Op::Rows { x, indices } => {
                let xv = self.value(*x);
                let mut gx = Array2::zeros(xv.raw_dim());
                for (out_row, &src) in indices.iter().enumerate() {
                    for j in 0..xv.ncols() {
                        gx[[src, j]] += g[[out_row, j]];
                    }
                }
                send(*x, gx, by_node);
            }
            Op::SliceCols { x, start, len } => {
                let xv = self.value(*x);
                let mut gx = Array2::zeros(xv.raw_dim());
                gx.slice_mut(s![.., *start..start + len]).assign(g);
                send(*x, gx, by_node);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    let gp = g.slice(s![.., offset..offset + w]).to_owned();
                    offset += w;
                    send(p, gp, by_node);
                }
            }
            Op::WeightedPicks { x, picks } => {
                let xv = self.value(*x);
                let mut gx = Array2::zeros(xv.raw_dim());
                let gs = g[[0, 0]];
                for &(r, c, w) in picks {
                    gx[[r, c]] += w * gs;
                }
                send(*x, gx, by_node);
            }
            Op::ExpCosGold {
                h,
                keys,
                gold,
                clamped,
            } => {
                let hv = self.value(*h);
                let cos = cosines(&hv, keys).expect("validated in forward");
                let log_s = log_sum_exp(cos.iter().copied());
                let log_sg = log_sum_exp(
                    cos.iter()
                        .zip(gold)
                        .filter(|(_, &g)| g)
                        .map(|(&c, _)| c),
                );
                let h_norm = l2_norm(&hv);
                let hsq = h_norm * h_norm;
                let gs = g[[0, 0]];
                let mut gh = Array2::zeros(hv.raw_dim());
                for (i, key) in keys.rows().into_iter().enumerate() {
                    // d(logS)/dcos_i = p_i; d(logS_g)/dcos_i = q_i (gold only,
                    // zero while the clamp is active).
                    let p = (cos[i] - log_s).exp();
                    let q = if gold[i] && !clamped {
                        (cos[i] - log_sg).exp()
                    } else {
                        0.0
                    };
                    let coeff = gs * (p - q);
                    if coeff == 0.0 {
                        continue;
                    }
                    let k_norm = key.fold(0.0, |a, &v| a + v * v).sqrt();
                    for j in 0..hv.ncols() {
                        let dcos = key[j] / (h_norm * k_norm) - cos[i] * hv[[0, j]] / hsq;
                        gh[[0, j]] += coeff * dcos;
                    }
                }
                send(*h, gh, by_node);
            }
        }
    }
}

fn cosines(h: &ArrayView2<f64>, keys: &Array2<f64>) -> Result<Vec<f64>> {
    let h_norm = l2_norm(h);
    if h_norm == 0.0 {
        return Err(Error::numeric("cosine of a zero vector"));
    }
    keys.rows()
        .into_iter()
        .map(|key| {
            let k_norm = key.fold(0.0, |a, &v| a + v * v).sqrt();
            if k_norm == 0.0 {
                return Err(Error::numeric("cosine against a zero neighbor key"));
            }
            let dot: f64 = key.iter().zip(h.row(0)).map(|(&a, &b)| a * b).sum();
            Ok(dot / (h_norm * k_norm))
        })
        .collect()
}

fn l2_norm(x: &ArrayView2<f64>) -> f64 {
    x.fold(0.0, |a, &v| a + v * v).sqrt()
}

/// Log of a sum of exponentials, max-subtracted. Empty input gives -inf.
pub fn log_sum_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    let values: Vec<f64> = values.into_iter().collect();
    if values.is_empty() {
        return f64::NEG_INFINITY;
    }
    let max = values.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    max + values.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Central-difference gradient of `f` with respect to `x`, one entry at a
/// time. `f` must be a pure function of `x`.
pub fn finite_difference<F>(x: &Array2<f64>, step: f64, mut f: F) -> Array2<f64>
where
    F: FnMut(&Array2<f64>) -> f64,
{
    let mut grad = Array2::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in ndarray::indices(x.raw_dim()) {
        let orig = probe[idx];
        probe[idx] = orig + step;
        let up = f(&probe);
        probe[idx] = orig - step;
        let down = f(&probe);
        probe[idx] = orig;
        grad[idx] = (up - down) / (2.0 * step);
    }
    grad
}

/// Relative disagreement between two gradients, elementwise maximum.
/// The scale floor keeps near-zero entries from dominating the ratio.
pub fn max_relative_error(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        let scale = a.abs().max(n.abs()).max(1e-6);
        worst = worst.max((a - n).abs() / scale);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    const FD_STEP: f64 = 1e-5;
    const FD_TOL: f64 = 1e-6;

    fn random(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    /// FD-checks d(scalar)/d(input 0) for a graph builder over owned inputs.
    fn check_grad<F>(inputs: &[Array2<f64>], build: F)
    where
        F: Fn(&mut Tape, &[NodeId]) -> NodeId,
    {
        let eval = |xs: &[Array2<f64>]| {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = xs.iter().map(|x| tape.input(x.clone())).collect();
            let root = build(&mut tape, &ids);
            tape.value(root)[[0, 0]]
        };

        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|x| tape.input(x.clone())).collect();
        let root = build(&mut tape, &ids);
        let grads = tape.backward(root);

        for (which, id) in ids.iter().enumerate() {
            let analytic = grads
                .of(*id)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(inputs[which].raw_dim()));
            let numeric = finite_difference(&inputs[which], FD_STEP, |probe| {
                let mut xs: Vec<Array2<f64>> = inputs.to_vec();
                xs[which] = probe.clone();
                eval(&xs)
            });
            let err = max_relative_error(&analytic, &numeric);
            assert!(
                err < FD_TOL,
                "input {which}: max relative error {err:.3e} exceeds {FD_TOL:.1e}"
            );
        }
    }

    #[test]
    fn matmul_chain_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 5);
        let c = random(&mut rng, 3, 5);
        check_grad(&[a, b, c], |tape, ids| {
            let prod = tape.matmul(ids[0], ids[1]);
            let scored = tape.matmul_transb(prod, ids[2]); // 3 x 3
            let sm = tape.softmax_rows(scored, false);
            let picks = vec![(0, 1, 0.7), (2, 0, -1.3), (1, 2, 0.4)];
            tape.weighted_picks(sm, picks)
        });
    }

    #[test]
    fn layer_norm_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let x = random(&mut rng, 4, 6);
        let gain = random(&mut rng, 1, 6);
        let shift = random(&mut rng, 1, 6);
        check_grad(&[x, gain, shift], |tape, ids| {
            let ln = tape.layer_norm(ids[0], ids[1], ids[2], 1e-5);
            let picks = (0..4).map(|r| (r, r % 6, 1.0)).collect();
            tape.weighted_picks(ln, picks)
        });
    }

    #[test]
    fn causal_softmax_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x = random(&mut rng, 5, 5);
        check_grad(&[x], |tape, ids| {
            let sm = tape.softmax_rows(ids[0], true);
            let picks = vec![(0, 0, 1.0), (3, 2, -0.5), (4, 4, 2.0)];
            tape.weighted_picks(sm, picks)
        });
    }

    #[test]
    fn causal_softmax_masks_the_future() {
        let mut tape = Tape::new();
        let x = tape.input(array![[5.0, 100.0], [1.0, 1.0]]);
        let sm = tape.softmax_rows(x, true);
        let v = tape.value(sm);
        assert_eq!(v[[0, 0]], 1.0, "row 0 sees only column 0");
        assert_eq!(v[[0, 1]], 0.0);
        assert!((v[[1, 0]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn log_softmax_relu_gather_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let table = random(&mut rng, 6, 4);
        let w = random(&mut rng, 4, 7);
        check_grad(&[table, w], |tape, ids| {
            let gathered = tape.rows(ids[0], vec![2, 2, 5, 0]); // repeats on purpose
            let hidden = tape.relu(gathered);
            let logits = tape.matmul(hidden, ids[1]);
            let lsm = tape.log_softmax_rows(logits);
            tape.weighted_picks(lsm, vec![(0, 3, -1.0), (1, 6, -1.0), (3, 0, -1.0)])
        });
    }

    #[test]
    fn slice_concat_add_row_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x = random(&mut rng, 3, 8);
        let bias = random(&mut rng, 1, 8);
        check_grad(&[x, bias], |tape, ids| {
            let biased = tape.add_row(ids[0], ids[1]);
            let left = tape.slice_cols(biased, 0, 4);
            let right = tape.slice_cols(biased, 4, 4);
            let swapped = tape.concat_cols(vec![right, left]);
            let scaled = tape.affine(swapped, 0.5, 0.1);
            let both = tape.add(scaled, biased);
            tape.weighted_picks(both, vec![(0, 0, 1.0), (2, 7, 1.0), (1, 3, -2.0)])
        });
    }

    #[test]
    fn exp_cos_gold_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let h = random(&mut rng, 1, 8);
        let keys = Arc::new(random(&mut rng, 5, 8));
        let gold = vec![true, false, true, false, false];
        check_grad(&[h], |tape, ids| {
            let (node, clamped) = tape
                .exp_cos_gold(ids[0], keys.clone(), gold.clone(), 1e-12)
                .unwrap();
            assert!(!clamped);
            node
        });
    }

    #[test]
    fn exp_cos_gold_clamps_without_gold_and_still_flows_gradient() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let h = random(&mut rng, 1, 8);
        let keys = Arc::new(random(&mut rng, 4, 8));
        let gold = vec![false; 4];
        // Value side: clamped at -ln(eps) offset.
        {
            let mut tape = Tape::new();
            let id = tape.input(h.clone());
            let (node, clamped) = tape
                .exp_cos_gold(id, keys.clone(), gold.clone(), 1e-12)
                .unwrap();
            assert!(clamped);
            assert!(tape.value(node)[[0, 0]].is_finite());
        }
        // Gradient side: the log S term still pushes h around.
        check_grad(&[h], |tape, ids| {
            let (node, _) = tape
                .exp_cos_gold(ids[0], keys.clone(), gold.clone(), 1e-12)
                .unwrap();
            node
        });
    }

    #[test]
    fn zero_vectors_in_cosine_are_numeric_errors() {
        let mut tape = Tape::new();
        let h = tape.input(Array2::zeros((1, 4)));
        let keys = Arc::new(Array2::from_elem((2, 4), 1.0));
        let err = tape
            .exp_cos_gold(h, keys, vec![true, false], 1e-12)
            .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn frozen_leaves_get_no_gradient_but_do_not_block_flow() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let frozen = Arc::new(random(&mut rng, 4, 4));
        let trainable = Arc::new(random(&mut rng, 4, 4));
        let mut tape = Tape::new();
        let x = tape.input(random(&mut rng, 2, 4));
        let f = tape.param(frozen, 0, false);
        let t = tape.param(trainable, 1, true);
        let a = tape.matmul(x, f);
        let b = tape.matmul(a, t);
        let root = tape.weighted_picks(b, vec![(0, 0, 1.0), (1, 2, 1.0)]);
        let grads = tape.backward(root);
        assert!(grads.of(f).is_none(), "frozen leaf must not accumulate");
        assert!(grads.of(t).is_some());
        assert!(grads.of(x).is_some(), "flow continues past frozen leaves");

        let mut slots = vec![Array2::zeros((4, 4)), Array2::zeros((4, 4))];
        tape.accumulate_param_gradients(&grads, 2.0, &mut slots);
        assert_eq!(slots[0], Array2::<f64>::zeros((4, 4)));
        assert_ne!(slots[1], Array2::<f64>::zeros((4, 4)));
    }

    #[test]
    fn repeated_forward_is_bit_identical() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let x = random(&mut rng, 3, 3);
        let run = || {
            let mut tape = Tape::new();
            let a = tape.input(x.clone());
            let sm = tape.softmax_rows(a, false);
            let ln_gain = tape.constant(Array2::ones((1, 3)));
            let ln_shift = tape.constant(Array2::zeros((1, 3)));
            let ln = tape.layer_norm(sm, ln_gain, ln_shift, 1e-5);
            tape.value(ln).to_owned()
        };
        let first = run();
        let second = run();
        assert_eq!(first, second);
    }
}
