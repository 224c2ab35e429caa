//! Nearest-neighbour knowledge transfer for a small encoder-decoder
//! translation model.
//!
//! The pipeline: pretrain a base model, record one (decoder state, next
//! target token) entry per training position in a datastore, then tune
//! lightweight adapter layers so the model's own representations absorb
//! what retrieval from that store would have told it. The store is rebuilt
//! from the tuning model after every epoch and can be dropped entirely at
//! the end; inference with adapters alone then runs without retrieval,
//! while `KnnScorer` keeps the interpolated system available as a baseline.
//!
//! Module map:
//! - [`model`]: transformer with per-layer bottleneck adapters, parameter
//!   registry, forward passes on an autodiff tape.
//! - [`autodiff`]: reverse-mode tape over 2-D arrays, finite-difference
//!   checking helpers.
//! - [`datastore`]: key-value store over decoder states, exact and
//!   inverted-file search, binary persistence, swap handle.
//! - [`smoothing`]: retrieval kernels, the retrieved-token distribution,
//!   and model/retrieval interpolation.
//! - [`losses`]: the three training terms (prediction, alignment to the
//!   retrieval distribution, representation pull toward gold-token keys).
//! - [`trainer`]: Adam with inverse-sqrt schedule, base pretraining,
//!   adapter tuning with synchronous or overlapped store refresh,
//!   the ablation suite.
//! - [`decode`]: greedy and beam search, with or without store smoothing.
//! - [`eval`] / [`bench`]: token accuracy, bucketed retrieval accuracy,
//!   BLEU, decode throughput.
//! - [`checkpoint`] / [`config`] / [`corpus`] / [`vocab`] / [`toy`]:
//!   persistence and plumbing.

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod datastore;
pub mod decode;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod smoothing;
pub mod toy;
pub mod trainer;
pub mod vocab;

pub use bench::{
    render_bench_table, speedup_at, throughput_bench, BenchResult, KnnBenchSettings,
    SYSTEM_ADAPTER_ONLY, SYSTEM_KNN,
};
pub use checkpoint::{load_adapters_onto, load_model, save_adapters, save_model};
pub use config::RunConfig;
pub use corpus::{
    build_vocabulary, load_corpus, load_source_lines, ParallelCorpus, RawCorpus, SentencePair,
    Tokenizer,
};
pub use datastore::{Datastore, DatastoreEntry, DatastoreHandle, IndexMode, Neighbor, NeighborSet};
pub use decode::{beam_search, greedy_decode, DecodeConfig, KnnScorer, ModelScorer, StepScorer};
pub use error::{Error, Result};
pub use eval::{
    bleu, mean_knn_accuracy, token_accuracy, BucketAccuracy, FrequencyBuckets, KnnAccuracyReport,
};
pub use losses::{pair_loss, LossConfig, LossWeights, PairLoss, PositionRetrieval};
pub use model::{Graph, Model, ModelConfig, ParamSet, TrainScope};
pub use smoothing::{interpolate, knn_distribution, KernelSpec};
pub use trainer::{
    ablation_suite, inverse_sqrt_lr, pretrain_base, render_ablation_table, train_ink, AblationArm,
    EpochReport, InkOutcome, PretrainOutcome, TrainConfig,
};
pub use vocab::{Vocabulary, BOS, EOS, PAD, UNK};
