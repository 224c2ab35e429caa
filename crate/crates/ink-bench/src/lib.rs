//! Deterministic fixtures for the criterion benchmarks.
//!
//! The benches measure two hot paths: nearest-neighbor queries against a
//! datastore and model forward/decode work. Both need inputs that are cheap
//! to build, seeded, and realistic in shape; the builders here produce them
//! without touching the training pipeline.

use ink_core::{Datastore, DatastoreEntry, Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Model sized like the toy-task experiments: big enough that the per-step
/// cost is dominated by real matrix work, small enough to build instantly.
pub fn bench_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 64,
        n_enc_layers: 2,
        n_dec_layers: 2,
        n_heads: 4,
        d_ffn: 128,
        adapter_inner: 32,
        max_len: 32,
    }
}

pub const BENCH_VOCAB: usize = 256;

pub fn bench_model(seed: u64) -> Model {
    Model::new_base(bench_model_config(), BENCH_VOCAB, seed).expect("fixture model")
}

/// Random token sentences drawn from the non-special id range, each ending
/// in eos as the decoder entry points expect.
pub fn synthetic_sources(n: usize, len: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut s: Vec<u32> =
                (0..len).map(|_| rng.gen_range(4..BENCH_VOCAB as u32)).collect();
            s.push(ink_core::EOS);
            s
        })
        .collect()
}

/// Datastore of `n` random keys on the unit cube, one entry per synthetic
/// (sentence, position) origin so self-exclusion stays exercisable.
pub fn synthetic_store(n: usize, dim: usize, seed: u64) -> Datastore {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let entries: Vec<DatastoreEntry> = (0..n)
        .map(|i| DatastoreEntry {
            key: (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
            value: (i % BENCH_VOCAB) as u32,
            origin: ((i / 16) as u32, (i % 16) as u32),
        })
        .collect();
    Datastore::from_entries(dim, &entries, 1).expect("fixture store")
}

/// Query points drawn from the same distribution as the keys.
pub fn synthetic_queries(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0f64..1.0)).collect())
        .collect()
}
