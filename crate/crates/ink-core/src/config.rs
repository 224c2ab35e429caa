//! Run configuration: a flat `key = value` text format covering every
//! tunable in the pipeline. One parsed `RunConfig` drives corpus synthesis,
//! model construction, training, datastore indexing, decoding, and the
//! benchmark, and its snapshot round-trips so a run can be reproduced from
//! the snapshot alone.

use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::Tokenizer;
use crate::datastore::IndexMode;
use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::smoothing::KernelSpec;
use crate::toy::ToyTaskConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inference: InferenceSettings,
    pub datastore: DatastoreSettings,
    pub ingest: IngestSettings,
    pub toy: ToyTaskConfig,
    pub bench: BenchRunSettings,
    pub ablate: AblateSettings,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceSettings {
    pub beam_size: usize,
    pub length_penalty: f64,
    pub max_len: usize,
    /// Interpolation weight on the retrieval distribution; 0 disables it.
    pub lambda: f64,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatastoreSettings {
    pub mode: IndexMode,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IngestSettings {
    pub tokenizer: Tokenizer,
    pub min_count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRunSettings {
    pub batch_sizes: Vec<usize>,
    pub repetitions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblateSettings {
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceSettings {
                beam_size: 4,
                length_penalty: 0.6,
                max_len: 64,
                lambda: 0.5,
                k: 8,
            },
            datastore: DatastoreSettings { mode: IndexMode::Exact },
            ingest: IngestSettings { tokenizer: Tokenizer::Whitespace, min_count: 1 },
            toy: ToyTaskConfig::default(),
            bench: BenchRunSettings { batch_sizes: vec![8, 32, 128], repetitions: 3 },
            ablate: AblateSettings { seeds: vec![1, 2, 3] },
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, at: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{at}: bad value {value:?} for key {key}")))
}

fn parse_bool(key: &str, value: &str, at: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!(
            "{at}: key {key} wants true or false, got {value:?}"
        ))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str, at: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|part| parse_num(key, part.trim(), at))
        .collect()
}

fn join_list<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parses overrides on top of the defaults. Lines are `key = value`,
    /// blank lines and `# comments` are skipped, unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw_line) in text.lines().enumerate() {
            let at = format!("line {}", i + 1);
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "{at}: expected key = value, got {raw_line:?}"
                )));
            };
            cfg.set_at(key.trim(), value.trim(), &at)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Applies one override; used both by the parser and by CLI flags.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_at(key, value, "override")
    }

    fn set_at(&mut self, key: &str, value: &str, at: &str) -> Result<()> {
        let v = value;
        match key {
            "model.d_model" => self.model.d_model = parse_num(key, v, at)?,
            "model.n_enc_layers" => self.model.n_enc_layers = parse_num(key, v, at)?,
            "model.n_dec_layers" => self.model.n_dec_layers = parse_num(key, v, at)?,
            "model.n_heads" => self.model.n_heads = parse_num(key, v, at)?,
            "model.d_ffn" => self.model.d_ffn = parse_num(key, v, at)?,
            "model.adapter_inner" => self.model.adapter_inner = parse_num(key, v, at)?,
            "model.max_len" => self.model.max_len = parse_num(key, v, at)?,
            "train.seed" => self.train.seed = parse_num(key, v, at)?,
            "train.max_epochs" => self.train.max_epochs = parse_num(key, v, at)?,
            "train.batch_tokens" => self.train.batch_tokens = parse_num(key, v, at)?,
            "train.peak_lr" => self.train.peak_lr = parse_num(key, v, at)?,
            "train.warmup_steps" => self.train.warmup_steps = parse_num(key, v, at)?,
            "train.patience" => self.train.patience = parse_num(key, v, at)?,
            "train.k" => self.train.k = parse_num(key, v, at)?,
            "train.refresh" => self.train.refresh = parse_bool(key, v, at)?,
            "train.overlapped_refresh" => {
                self.train.overlapped_refresh = parse_bool(key, v, at)?
            }
            "loss.alpha" => self.train.weights.alpha = parse_num(key, v, at)?,
            "loss.beta" => self.train.weights.beta = parse_num(key, v, at)?,
            "loss.per_token_mean" => self.train.per_token_mean = parse_bool(key, v, at)?,
            "loss.use_alignment" => self.train.use_alignment = parse_bool(key, v, at)?,
            "loss.use_representation" => {
                self.train.use_representation = parse_bool(key, v, at)?
            }
            "kernel.kind" => {
                self.train.kernel = match v {
                    "neg_exp_distance" => {
                        let temperature = match self.train.kernel {
                            KernelSpec::NegExpDistance { temperature } => temperature,
                            KernelSpec::ExpCosine => 10.0,
                        };
                        KernelSpec::NegExpDistance { temperature }
                    }
                    "exp_cosine" => KernelSpec::ExpCosine,
                    _ => {
                        return Err(Error::config(format!("{at}: unknown kernel kind {v:?}")))
                    }
                }
            }
            "kernel.temperature" => {
                let t: f64 = parse_num(key, v, at)?;
                self.train.kernel = KernelSpec::NegExpDistance { temperature: t };
            }
            "inference.beam_size" => self.inference.beam_size = parse_num(key, v, at)?,
            "inference.length_penalty" => {
                self.inference.length_penalty = parse_num(key, v, at)?
            }
            "inference.max_len" => self.inference.max_len = parse_num(key, v, at)?,
            "inference.lambda" => self.inference.lambda = parse_num(key, v, at)?,
            "inference.k" => self.inference.k = parse_num(key, v, at)?,
            "datastore.mode" => {
                self.datastore.mode = match v {
                    "exact" => IndexMode::Exact,
                    "ivf" => match self.datastore.mode {
                        IndexMode::Ivf { .. } => self.datastore.mode,
                        IndexMode::Exact => IndexMode::Ivf { n_list: 16, n_probe: 4 },
                    },
                    _ => {
                        return Err(Error::config(format!(
                            "{at}: unknown datastore mode {v:?}"
                        )))
                    }
                }
            }
            "datastore.n_list" => {
                let n_list = parse_num(key, v, at)?;
                self.datastore.mode = match self.datastore.mode {
                    IndexMode::Ivf { n_probe, .. } => IndexMode::Ivf { n_list, n_probe },
                    IndexMode::Exact => IndexMode::Ivf { n_list, n_probe: 4 },
                };
            }
            "datastore.n_probe" => {
                let n_probe = parse_num(key, v, at)?;
                self.datastore.mode = match self.datastore.mode {
                    IndexMode::Ivf { n_list, .. } => IndexMode::Ivf { n_list, n_probe },
                    IndexMode::Exact => IndexMode::Ivf { n_list: 16, n_probe },
                };
            }
            "ingest.tokenizer" => {
                self.ingest.tokenizer = match v {
                    "whitespace" => Tokenizer::Whitespace,
                    "chars" => Tokenizer::Chars,
                    _ => return Err(Error::config(format!("{at}: unknown tokenizer {v:?}"))),
                }
            }
            "ingest.min_count" => self.ingest.min_count = parse_num(key, v, at)?,
            "toy.shared_concepts" => self.toy.shared_concepts = parse_num(key, v, at)?,
            "toy.ambiguous_concepts" => self.toy.ambiguous_concepts = parse_num(key, v, at)?,
            "toy.domain_only_concepts" => {
                self.toy.domain_only_concepts = parse_num(key, v, at)?
            }
            "toy.pretrain_pairs" => self.toy.pretrain_pairs = parse_num(key, v, at)?,
            "toy.train_pairs" => self.toy.train_pairs = parse_num(key, v, at)?,
            "toy.dev_pairs" => self.toy.dev_pairs = parse_num(key, v, at)?,
            "toy.test_pairs" => self.toy.test_pairs = parse_num(key, v, at)?,
            "toy.min_len" => self.toy.min_len = parse_num(key, v, at)?,
            "toy.max_len" => self.toy.max_len = parse_num(key, v, at)?,
            "toy.zipf_s" => self.toy.zipf_s = parse_num(key, v, at)?,
            "toy.seed" => self.toy.seed = parse_num(key, v, at)?,
            "bench.batch_sizes" => self.bench.batch_sizes = parse_list(key, v, at)?,
            "bench.repetitions" => self.bench.repetitions = parse_num(key, v, at)?,
            "ablate.seeds" => self.ablate.seeds = parse_list(key, v, at)?,
            _ => {
                return Err(Error::config(format!("{at}: unknown key {key:?}")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.inference.lambda) {
            return Err(Error::config("inference.lambda must lie in [0, 1]"));
        }
        if self.inference.beam_size == 0 || self.inference.k == 0 {
            return Err(Error::config("inference.beam_size and inference.k must be positive"));
        }
        if let IndexMode::Ivf { n_list, n_probe } = self.datastore.mode {
            if n_list == 0 || n_probe == 0 || n_probe > n_list {
                return Err(Error::config("need 0 < n_probe <= n_list for the ivf index"));
            }
        }
        if self.toy.min_len == 0 || self.toy.max_len < self.toy.min_len {
            return Err(Error::config("need 0 < toy.min_len <= toy.max_len"));
        }
        if !(self.toy.zipf_s.is_finite() && self.toy.zipf_s > 0.0) {
            return Err(Error::config("toy.zipf_s must be positive"));
        }
        if self.bench.batch_sizes.is_empty() || self.bench.batch_sizes.contains(&0) {
            return Err(Error::config("bench.batch_sizes must be positive integers"));
        }
        if self.bench.repetitions < 3 {
            return Err(Error::config("bench.repetitions must be at least 3"));
        }
        if self.ablate.seeds.is_empty() {
            return Err(Error::config("ablate.seeds must not be empty"));
        }
        Ok(())
    }

    /// Full dump of every effective setting, one `key = value` per line,
    /// in parse order. `parse(snapshot())` reproduces the config exactly.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let _ = writeln!(s, "model.d_model = {}", m.d_model);
        let _ = writeln!(s, "model.n_enc_layers = {}", m.n_enc_layers);
        let _ = writeln!(s, "model.n_dec_layers = {}", m.n_dec_layers);
        let _ = writeln!(s, "model.n_heads = {}", m.n_heads);
        let _ = writeln!(s, "model.d_ffn = {}", m.d_ffn);
        let _ = writeln!(s, "model.adapter_inner = {}", m.adapter_inner);
        let _ = writeln!(s, "model.max_len = {}", m.max_len);
        let t = &self.train;
        let _ = writeln!(s, "train.seed = {}", t.seed);
        let _ = writeln!(s, "train.max_epochs = {}", t.max_epochs);
        let _ = writeln!(s, "train.batch_tokens = {}", t.batch_tokens);
        let _ = writeln!(s, "train.peak_lr = {}", t.peak_lr);
        let _ = writeln!(s, "train.warmup_steps = {}", t.warmup_steps);
        let _ = writeln!(s, "train.patience = {}", t.patience);
        let _ = writeln!(s, "train.k = {}", t.k);
        let _ = writeln!(s, "train.refresh = {}", t.refresh);
        let _ = writeln!(s, "train.overlapped_refresh = {}", t.overlapped_refresh);
        let _ = writeln!(s, "loss.alpha = {}", t.weights.alpha);
        let _ = writeln!(s, "loss.beta = {}", t.weights.beta);
        let _ = writeln!(s, "loss.per_token_mean = {}", t.per_token_mean);
        let _ = writeln!(s, "loss.use_alignment = {}", t.use_alignment);
        let _ = writeln!(s, "loss.use_representation = {}", t.use_representation);
        match t.kernel {
            KernelSpec::NegExpDistance { temperature } => {
                let _ = writeln!(s, "kernel.kind = neg_exp_distance");
                let _ = writeln!(s, "kernel.temperature = {temperature}");
            }
            KernelSpec::ExpCosine => {
                let _ = writeln!(s, "kernel.kind = exp_cosine");
            }
        }
        let i = &self.inference;
        let _ = writeln!(s, "inference.beam_size = {}", i.beam_size);
        let _ = writeln!(s, "inference.length_penalty = {}", i.length_penalty);
        let _ = writeln!(s, "inference.max_len = {}", i.max_len);
        let _ = writeln!(s, "inference.lambda = {}", i.lambda);
        let _ = writeln!(s, "inference.k = {}", i.k);
        match self.datastore.mode {
            IndexMode::Exact => {
                let _ = writeln!(s, "datastore.mode = exact");
            }
            IndexMode::Ivf { n_list, n_probe } => {
                let _ = writeln!(s, "datastore.mode = ivf");
                let _ = writeln!(s, "datastore.n_list = {n_list}");
                let _ = writeln!(s, "datastore.n_probe = {n_probe}");
            }
        }
        let g = &self.ingest;
        let _ = writeln!(
            s,
            "ingest.tokenizer = {}",
            match g.tokenizer {
                Tokenizer::Whitespace => "whitespace",
                Tokenizer::Chars => "chars",
            }
        );
        let _ = writeln!(s, "ingest.min_count = {}", g.min_count);
        let y = &self.toy;
        let _ = writeln!(s, "toy.shared_concepts = {}", y.shared_concepts);
        let _ = writeln!(s, "toy.ambiguous_concepts = {}", y.ambiguous_concepts);
        let _ = writeln!(s, "toy.domain_only_concepts = {}", y.domain_only_concepts);
        let _ = writeln!(s, "toy.pretrain_pairs = {}", y.pretrain_pairs);
        let _ = writeln!(s, "toy.train_pairs = {}", y.train_pairs);
        let _ = writeln!(s, "toy.dev_pairs = {}", y.dev_pairs);
        let _ = writeln!(s, "toy.test_pairs = {}", y.test_pairs);
        let _ = writeln!(s, "toy.min_len = {}", y.min_len);
        let _ = writeln!(s, "toy.max_len = {}", y.max_len);
        let _ = writeln!(s, "toy.zipf_s = {}", y.zipf_s);
        let _ = writeln!(s, "toy.seed = {}", y.seed);
        let _ = writeln!(s, "bench.batch_sizes = {}", join_list(&self.bench.batch_sizes));
        let _ = writeln!(s, "bench.repetitions = {}", self.bench.repetitions);
        let _ = writeln!(s, "ablate.seeds = {}", join_list(&self.ablate.seeds));
        s
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.snapshot())?;
        Ok(())
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            beam_size: self.inference.beam_size,
            length_penalty: self.inference.length_penalty,
            max_len: self.inference.max_len,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        self.train.weights
    }
}
