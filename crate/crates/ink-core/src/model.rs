//! Small pre-norm encoder-decoder translation model with optional adapters.
//!
//! One embedding table is shared three ways: encoder input, decoder input,
//! and the output projection (logits are `h . E^T`, so the score a token gets
//! is the inner product of the representation with that token's embedding).
//!
//! Adapters are two-layer bottleneck blocks inserted after every encoder and
//! decoder layer: `z + W2(W1 . norm(z) + b1) + b2`, no activation in between.
//! With `W2 = 0` and zero biases an adapter is exactly the identity, which is
//! how they are initialized: a freshly adapter-equipped model reproduces the
//! base model bit for bit.
//!
//! All math is 64-bit and runs on the autodiff tape; inference simply never
//! calls backward.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::vocab::BOS;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    /// Adapter bottleneck width.
    pub adapter_inner: usize,
    /// Hard cap on decode length.
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 4,
            d_ffn: 256,
            adapter_inner: 32,
            max_len: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0
            || self.n_enc_layers == 0
            || self.n_dec_layers == 0
            || self.n_heads == 0
            || self.d_ffn == 0
            || self.adapter_inner == 0
            || self.max_len < 2
        {
            return Err(Error::config("model dimensions must be positive (max_len >= 2)"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::config("d_model must be even for positional encoding"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Ordered, named parameter tensors. Bias and norm vectors are stored as
/// `1 x n` matrices so everything on the tape is two-dimensional.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Arc<Array2<f64>>>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn insert(&mut self, name: impl Into<String>, tensor: Array2<f64>) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(Arc::new(tensor));
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn slot(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn tensor(&self, slot: usize) -> &Arc<Array2<f64>> {
        &self.tensors[slot]
    }

    pub fn get(&self, name: &str) -> &Arc<Array2<f64>> {
        &self.tensors[self.slot(name)]
    }

    /// Mutable access for optimizer updates. Clones on write only if someone
    /// still holds the old version (e.g. a tape from a previous step).
    pub fn tensor_mut(&mut self, slot: usize) -> &mut Array2<f64> {
        Arc::make_mut(&mut self.tensors[slot])
    }

    pub fn zeros_like(&self) -> Vec<Array2<f64>> {
        self.tensors
            .iter()
            .map(|t| Array2::zeros(t.raw_dim()))
            .collect()
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

fn xavier_uniform(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-a..a))
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub params: ParamSet,
    pub has_adapters: bool,
}

/// Which parameters receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    None,
    All,
    AdaptersOnly,
}

pub fn is_adapter_param(name: &str) -> bool {
    name.contains(".adapter.")
}

impl Model {
    /// Fresh base model, no adapters. Initialization order is fixed, so a
    /// given (config, vocab_size, seed) triple always yields the same values.
    pub fn new_base(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Model> {
        config.validate()?;
        if vocab_size < 5 {
            return Err(Error::invalid_input("vocabulary too small for a model"));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut params = ParamSet::default();

        let scale = 1.0 / (d as f64).sqrt();
        params.insert(
            "embed",
            Array2::from_shape_fn((vocab_size, d), |_| rng.gen_range(-scale..scale)),
        );

        for (count, prefix) in [
            (config.n_enc_layers, "enc"),
            (config.n_dec_layers, "dec"),
        ] {
            for i in 0..count {
                let p = format!("{prefix}.{i}");
                insert_attention(&mut params, &mut rng, &format!("{p}.attn"), d);
                insert_norm(&mut params, &format!("{p}.ln1"), d);
                if prefix == "dec" {
                    insert_attention(&mut params, &mut rng, &format!("{p}.cross"), d);
                    insert_norm(&mut params, &format!("{p}.ln2"), d);
                    insert_norm(&mut params, &format!("{p}.ln3"), d);
                } else {
                    insert_norm(&mut params, &format!("{p}.ln2"), d);
                }
                params.insert(format!("{p}.ffn.w1"), xavier_uniform(&mut rng, d, config.d_ffn));
                params.insert(format!("{p}.ffn.b1"), Array2::zeros((1, config.d_ffn)));
                params.insert(format!("{p}.ffn.w2"), xavier_uniform(&mut rng, config.d_ffn, d));
                params.insert(format!("{p}.ffn.b2"), Array2::zeros((1, d)));
            }
            insert_norm(&mut params, &format!("{prefix}.final_ln"), d);
        }

        Ok(Model {
            config,
            vocab_size,
            params,
            has_adapters: false,
        })
    }

    /// Copy of this model with identity-initialized adapters after every
    /// layer: the down projection is random, the up projection and biases are
    /// zero, so outputs are unchanged until training moves them.
    pub fn with_identity_adapters(&self, seed: u64) -> Model {
        assert!(!self.has_adapters, "model already has adapters");
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let d = self.config.d_model;
        let inner = self.config.adapter_inner;
        let mut params = self.params.clone();
        for (count, prefix) in [
            (self.config.n_enc_layers, "enc"),
            (self.config.n_dec_layers, "dec"),
        ] {
            for i in 0..count {
                let p = format!("{prefix}.{i}.adapter");
                params.insert(format!("{p}.lng"), Array2::ones((1, d)));
                params.insert(format!("{p}.lnb"), Array2::zeros((1, d)));
                params.insert(format!("{p}.w1"), xavier_uniform(&mut rng, d, inner));
                params.insert(format!("{p}.b1"), Array2::zeros((1, inner)));
                params.insert(format!("{p}.w2"), Array2::zeros((inner, d)));
                params.insert(format!("{p}.b2"), Array2::zeros((1, d)));
            }
        }
        Model {
            config: self.config,
            vocab_size: self.vocab_size,
            params,
            has_adapters: true,
        }
    }

    /// The adapter tensors alone, in insertion order.
    pub fn adapter_params(&self) -> ParamSet {
        assert!(self.has_adapters);
        let mut out = ParamSet::default();
        for (slot, name) in self.params.names().enumerate().map(|(i, n)| (i, n.to_string())) {
            if is_adapter_param(&name) {
                out.insert(name, self.params.tensor(slot).as_ref().clone());
            }
        }
        out
    }

    /// Attach previously trained adapters to a base model. Shapes must match
    /// what `with_identity_adapters` would create.
    pub fn apply_adapters(base: &Model, adapters: &ParamSet) -> Result<Model> {
        if base.has_adapters {
            return Err(Error::state("base model already carries adapters"));
        }
        let mut model = base.with_identity_adapters(0);
        for name in adapters.names() {
            if !is_adapter_param(name) {
                return Err(Error::format(format!(
                    "adapter set contains non-adapter tensor {name}"
                )));
            }
            if !model.params.contains(name) {
                return Err(Error::format(format!(
                    "adapter tensor {name} does not fit this architecture"
                )));
            }
            let slot = model.params.slot(name);
            let expected = model.params.tensor(slot).raw_dim();
            let got = adapters.get(name).raw_dim();
            if expected != got {
                return Err(Error::format(format!(
                    "adapter tensor {name}: expected shape {expected:?}, found {got:?}"
                )));
            }
            *model.params.tensor_mut(slot) = adapters.get(name).as_ref().clone();
        }
        let expected_count = model.params.names().filter(|n| is_adapter_param(n)).count();
        if adapters.len() != expected_count {
            return Err(Error::format(format!(
                "adapter set has {} tensors, architecture needs {expected_count}",
                adapters.len()
            )));
        }
        Ok(model)
    }

    pub fn trainable_mask(&self, scope: TrainScope) -> Vec<bool> {
        (0..self.params.len())
            .map(|slot| match scope {
                TrainScope::None => false,
                TrainScope::All => true,
                TrainScope::AdaptersOnly => is_adapter_param(self.params.name(slot)),
            })
            .collect()
    }

    /// Sinusoidal positional encoding for `len` positions.
    fn positional(&self, len: usize) -> Array2<f64> {
        let d = self.config.d_model;
        Array2::from_shape_fn((len, d), |(pos, j)| {
            let pair = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
    }

    fn check_tokens(&self, ids: &[u32], side: &str) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::invalid_input(format!("empty {side} sequence")));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::invalid_input(format!(
                "{side} token id {bad} out of range for vocabulary of {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Teacher-forced decoder representations: one row per target position,
    /// eos included. Row t conditions on the full source and on target
    /// tokens strictly before t.
    pub fn forward_teacher_forced(&self, source: &[u32], target: &[u32]) -> Result<Array2<f64>> {
        let mut graph = Graph::new(self, TrainScope::None);
        let h = graph.teacher_forced_states(source, target)?;
        Ok(graph.tape.value(h).to_owned())
    }

    /// Full-vocabulary next-token distribution for one representation.
    /// Softmax of `h . E^T`, max-subtracted.
    pub fn output_distribution(&self, h: &Array1<f64>) -> Result<Vec<f64>> {
        let logits = self.logits(h)?;
        let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut probs: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let denom: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= denom;
        }
        Ok(probs)
    }

    /// Raw output scores `h . E^T`.
    pub fn logits(&self, h: &Array1<f64>) -> Result<Vec<f64>> {
        let d = self.config.d_model;
        if h.len() != d {
            return Err(Error::invalid_input(format!(
                "representation has width {}, model expects {d}",
                h.len()
            )));
        }
        let embed = self.params.get("embed");
        Ok(embed.dot(h).to_vec())
    }

    /// Standalone adapter block evaluation, outside any layer stack.
    pub fn adapter_forward(&self, which: &str, z: &Array2<f64>) -> Result<Array2<f64>> {
        if !self.has_adapters {
            return Err(Error::state("model has no adapters"));
        }
        let prefix = format!("{which}.adapter");
        if !self.params.contains(&format!("{prefix}.w1")) {
            return Err(Error::invalid_input(format!("no adapter at {which}")));
        }
        let mut graph = Graph::new(self, TrainScope::None);
        let z_node = graph.tape.input(z.clone());
        let out = graph.adapter(z_node, &prefix);
        Ok(graph.tape.value(out).to_owned())
    }
}

fn insert_attention(params: &mut ParamSet, rng: &mut ChaCha12Rng, prefix: &str, d: usize) {
    params.insert(format!("{prefix}.wq"), xavier_uniform(rng, d, d));
    params.insert(format!("{prefix}.wk"), xavier_uniform(rng, d, d));
    params.insert(format!("{prefix}.wv"), xavier_uniform(rng, d, d));
    params.insert(format!("{prefix}.wo"), xavier_uniform(rng, d, d));
}

fn insert_norm(params: &mut ParamSet, prefix: &str, d: usize) {
    params.insert(format!("{prefix}.g"), Array2::ones((1, d)));
    params.insert(format!("{prefix}.b"), Array2::zeros((1, d)));
}

/// A tape plus lazily created parameter nodes for one forward pass.
pub struct Graph<'m> {
    pub tape: Tape,
    model: &'m Model,
    trainable: Vec<bool>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'m> Graph<'m> {
    pub fn new(model: &'m Model, scope: TrainScope) -> Self {
        Graph {
            tape: Tape::new(),
            trainable: model.trainable_mask(scope),
            param_nodes: vec![None; model.params.len()],
            model,
        }
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    fn p(&mut self, name: &str) -> NodeId {
        let slot = self.model.params.slot(name);
        if let Some(id) = self.param_nodes[slot] {
            return id;
        }
        let id = self.tape.param(
            Arc::clone(self.model.params.tensor(slot)),
            slot,
            self.trainable[slot],
        );
        self.param_nodes[slot] = Some(id);
        id
    }

    fn embed_sequence(&mut self, ids: &[u32]) -> NodeId {
        let d = self.model.config.d_model;
        let embed = self.p("embed");
        let gathered = self.tape.rows(embed, ids.iter().map(|&t| t as usize).collect());
        let scaled = self.tape.scale(gathered, (d as f64).sqrt());
        let pe = self.tape.constant(self.model.positional(ids.len()));
        self.tape.add(scaled, pe)
    }

    fn attention(&mut self, q_in: NodeId, kv_in: NodeId, prefix: &str, causal: bool) -> NodeId {
        let cfg = &self.model.config;
        let (wq, wk, wv, wo) = (
            self.p(&format!("{prefix}.wq")),
            self.p(&format!("{prefix}.wk")),
            self.p(&format!("{prefix}.wv")),
            self.p(&format!("{prefix}.wo")),
        );
        let q = self.tape.matmul(q_in, wq);
        let k = self.tape.matmul(kv_in, wk);
        let v = self.tape.matmul(kv_in, wv);
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let qh = self.tape.slice_cols(q, head * dh, dh);
            let kh = self.tape.slice_cols(k, head * dh, dh);
            let vh = self.tape.slice_cols(v, head * dh, dh);
            let scores = self.tape.matmul_transb(qh, kh);
            let scaled = self.tape.scale(scores, scale);
            let probs = self.tape.softmax_rows(scaled, causal);
            heads.push(self.tape.matmul(probs, vh));
        }
        let merged = self.tape.concat_cols(heads);
        self.tape.matmul(merged, wo)
    }

    fn norm(&mut self, x: NodeId, prefix: &str) -> NodeId {
        let g = self.p(&format!("{prefix}.g"));
        let b = self.p(&format!("{prefix}.b"));
        self.tape.layer_norm(x, g, b, LN_EPS)
    }

    fn ffn(&mut self, x: NodeId, prefix: &str) -> NodeId {
        let w1 = self.p(&format!("{prefix}.w1"));
        let b1 = self.p(&format!("{prefix}.b1"));
        let w2 = self.p(&format!("{prefix}.w2"));
        let b2 = self.p(&format!("{prefix}.b2"));
        let h = self.tape.matmul(x, w1);
        let h = self.tape.add_row(h, b1);
        let h = self.tape.relu(h);
        let h = self.tape.matmul(h, w2);
        self.tape.add_row(h, b2)
    }

    /// `z + (norm(z) . W1 + b1) . W2 + b2`. Exact identity while W2 and the
    /// biases are zero.
    fn adapter(&mut self, z: NodeId, prefix: &str) -> NodeId {
        let lng = self.p(&format!("{prefix}.lng"));
        let lnb = self.p(&format!("{prefix}.lnb"));
        let w1 = self.p(&format!("{prefix}.w1"));
        let b1 = self.p(&format!("{prefix}.b1"));
        let w2 = self.p(&format!("{prefix}.w2"));
        let b2 = self.p(&format!("{prefix}.b2"));
        let normed = self.tape.layer_norm(z, lng, lnb, LN_EPS);
        let down = self.tape.matmul(normed, w1);
        let down = self.tape.add_row(down, b1);
        let up = self.tape.matmul(down, w2);
        let up = self.tape.add_row(up, b2);
        self.tape.add(up, z)
    }

    fn maybe_adapter(&mut self, x: NodeId, prefix: &str) -> NodeId {
        if self.model.has_adapters {
            self.adapter(x, &format!("{prefix}.adapter"))
        } else {
            x
        }
    }

    /// Encoder memory for a source sequence.
    pub fn encode(&mut self, source: &[u32]) -> Result<NodeId> {
        self.model.check_tokens(source, "source")?;
        let mut x = self.embed_sequence(source);
        for i in 0..self.model.config.n_enc_layers {
            let p = format!("enc.{i}");
            let normed = self.norm(x, &format!("{p}.ln1"));
            let attn = self.attention(normed, normed, &format!("{p}.attn"), false);
            x = self.tape.add(x, attn);
            let normed = self.norm(x, &format!("{p}.ln2"));
            let ff = self.ffn(normed, &format!("{p}.ffn"));
            x = self.tape.add(x, ff);
            x = self.maybe_adapter(x, &p);
        }
        Ok(self.norm(x, "enc.final_ln"))
    }

    /// Decoder states over `decoder_input` given encoder memory. Causal: row
    /// t sees memory and input rows <= t only.
    pub fn decoder_states(&mut self, memory: NodeId, decoder_input: &[u32]) -> Result<NodeId> {
        self.model.check_tokens(decoder_input, "decoder input")?;
        let mut x = self.embed_sequence(decoder_input);
        for i in 0..self.model.config.n_dec_layers {
            let p = format!("dec.{i}");
            let normed = self.norm(x, &format!("{p}.ln1"));
            let attn = self.attention(normed, normed, &format!("{p}.attn"), true);
            x = self.tape.add(x, attn);
            let normed = self.norm(x, &format!("{p}.ln2"));
            let cross = self.attention(normed, memory, &format!("{p}.cross"), false);
            x = self.tape.add(x, cross);
            let normed = self.norm(x, &format!("{p}.ln3"));
            let ff = self.ffn(normed, &format!("{p}.ffn"));
            x = self.tape.add(x, ff);
            x = self.maybe_adapter(x, &p);
        }
        Ok(self.norm(x, "dec.final_ln"))
    }

    /// Representations for every target position under teacher forcing.
    pub fn teacher_forced_states(&mut self, source: &[u32], target: &[u32]) -> Result<NodeId> {
        self.model.check_tokens(target, "target")?;
        let memory = self.encode(source)?;
        let mut input = Vec::with_capacity(target.len());
        input.push(BOS);
        input.extend_from_slice(&target[..target.len() - 1]);
        self.decoder_states(memory, &input)
    }

    /// Log-probabilities over the vocabulary for every row of `states`.
    pub fn log_probs(&mut self, states: NodeId) -> NodeId {
        let embed = self.p("embed");
        let logits = self.tape.matmul_transb(states, embed);
        self.tape.log_softmax_rows(logits)
    }

    /// Accumulate d(root)/d(param) into per-slot buffers, scaled.
    pub fn accumulate_gradients(&self, root: NodeId, scale: f64, into: &mut [Array2<f64>]) {
        let grads = self.tape.backward(root);
        self.tape.accumulate_param_gradients(&grads, scale, into);
    }
}
