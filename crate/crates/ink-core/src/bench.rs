//! Decode-throughput measurement: adapter-only inference against
//! datastore-interpolated inference on the same model and inputs.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datastore::Datastore;
use crate::decode::{DecodeConfig, KnnScorer, ModelScorer};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::smoothing::KernelSpec;

pub const SYSTEM_ADAPTER_ONLY: &str = "adapter-only";
pub const SYSTEM_KNN: &str = "knn-interpolated";

/// One measured (system, batch size) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchResult {
    pub system: String,
    pub batch_size: usize,
    pub repetitions: usize,
    /// Tokens produced per repetition; the two systems may translate
    /// differently, so the budget is recorded to keep sents/s comparable.
    pub tokens_per_rep: usize,
    /// Worker threads the batch was split across.
    pub threads: usize,
    pub rep_seconds: Vec<f64>,
    pub sents_per_sec: f64,
}

impl BenchResult {
    fn from_reps(
        system: &str,
        batch_size: usize,
        tokens_per_rep: usize,
        threads: usize,
        rep_seconds: Vec<f64>,
    ) -> Self {
        let mean = rep_seconds.iter().sum::<f64>() / rep_seconds.len() as f64;
        BenchResult {
            system: system.to_string(),
            batch_size,
            repetitions: rep_seconds.len(),
            tokens_per_rep,
            threads,
            rep_seconds,
            sents_per_sec: batch_size as f64 / mean,
        }
    }
}

/// Settings for the retrieval-smoothed arm.
#[derive(Debug, Clone, Copy)]
pub struct KnnBenchSettings {
    pub kernel: KernelSpec,
    pub lambda: f64,
    pub k: usize,
}

impl Default for KnnBenchSettings {
    fn default() -> Self {
        KnnBenchSettings { kernel: KernelSpec::default(), lambda: 0.5, k: 8 }
    }
}

/// Decodes every sentence in `batch` across `threads` workers and returns
/// (total output tokens, wall-clock seconds). Sentences are independent, so
/// the outputs are identical at any thread count.
fn decode_batch(
    batch: &[&[u32]],
    cfg: &DecodeConfig,
    threads: usize,
    decode_one: impl Fn(&[u32]) -> Result<Vec<u32>> + Sync,
) -> Result<(usize, f64)> {
    let start = Instant::now();
    let tokens = if threads <= 1 {
        let mut n = 0usize;
        for src in batch {
            n += decode_one(src)?.len();
        }
        n
    } else {
        let chunk = batch.len().div_ceil(threads);
        let counts: Vec<Result<usize>> = std::thread::scope(|scope| {
            let decode_one = &decode_one;
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        let mut n = 0usize;
                        for src in part {
                            n += decode_one(src)?.len();
                        }
                        Ok(n)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("decode worker panicked")).collect()
        });
        let mut n = 0usize;
        for c in counts {
            n += c?;
        }
        n
    };
    let _ = cfg;
    Ok((tokens, start.elapsed().as_secs_f64()))
}

/// Times both systems over each batch size, `repetitions` passes each,
/// decoding the same sources with the same settings. Sentences per second
/// is the batch size over the mean wall-clock seconds; `threads` workers
/// share each batch and the count is recorded in the result.
pub fn throughput_bench(
    model: &Model,
    ds: &Datastore,
    sources: &[Vec<u32>],
    batch_sizes: &[usize],
    repetitions: usize,
    decode: &DecodeConfig,
    settings: &KnnBenchSettings,
    threads: usize,
) -> Result<Vec<BenchResult>> {
    if sources.is_empty() {
        return Err(Error::invalid_input("throughput bench needs a non-empty test set"));
    }
    if batch_sizes.is_empty() || batch_sizes.contains(&0) {
        return Err(Error::invalid_input("batch sizes must be positive"));
    }
    if repetitions < 3 {
        return Err(Error::invalid_input("need at least 3 repetitions"));
    }
    if threads == 0 {
        return Err(Error::invalid_input("need at least one thread"));
    }
    // Validate the retrieval settings up front so a bad lambda fails
    // before any timing work.
    KnnScorer::new(model, &sources[0], ds, settings.kernel, settings.lambda, settings.k)?;

    let plain = |src: &[u32]| {
        let mut scorer = ModelScorer::new(model, src)?;
        crate::decode::beam_search(&mut scorer, decode)
    };
    let knn = |src: &[u32]| {
        let mut scorer =
            KnnScorer::new(model, src, ds, settings.kernel, settings.lambda, settings.k)?;
        crate::decode::beam_search(&mut scorer, decode)
    };

    let mut results = Vec::new();
    for &bs in batch_sizes {
        // Cycle the test set to fill the batch so every size sees a full load.
        let batch: Vec<&[u32]> = (0..bs).map(|i| sources[i % sources.len()].as_slice()).collect();

        for (system, decode_one) in [
            (SYSTEM_ADAPTER_ONLY, &plain as &(dyn Fn(&[u32]) -> Result<Vec<u32>> + Sync)),
            (SYSTEM_KNN, &knn),
        ] {
            let mut secs = Vec::with_capacity(repetitions);
            let mut tokens = 0usize;
            for _ in 0..repetitions {
                let (n, s) = decode_batch(&batch, decode, threads, decode_one)?;
                tokens = n;
                secs.push(s);
            }
            results.push(BenchResult::from_reps(system, bs, tokens, threads, secs));
        }
    }
    Ok(results)
}

/// adapter-only speed divided by retrieval-smoothed speed at one batch size.
pub fn speedup_at(results: &[BenchResult], batch_size: usize) -> Option<f64> {
    let plain = results
        .iter()
        .find(|r| r.system == SYSTEM_ADAPTER_ONLY && r.batch_size == batch_size)?;
    let knn = results.iter().find(|r| r.system == SYSTEM_KNN && r.batch_size == batch_size)?;
    Some(plain.sents_per_sec / knn.sents_per_sec)
}

pub fn render_bench_table(results: &[BenchResult]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<18} {:>7} {:>12} {:>12} {:>6} {:>8}\n",
        "system", "batch", "sents/s", "tokens/rep", "reps", "threads"
    ));
    out.push_str(&format!("{}\n", "-".repeat(68)));
    for r in results {
        out.push_str(&format!(
            "{:<18} {:>7} {:>12.2} {:>12} {:>6} {:>8}\n",
            r.system, r.batch_size, r.sents_per_sec, r.tokens_per_rep, r.repetitions, r.threads
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, RawCorpus, Tokenizer};
    use crate::model::ModelConfig;

    fn tiny_setup() -> (Model, Datastore, Vec<Vec<u32>>) {
        let raw = RawCorpus::parse(
            b"a b\tc d\ne f\tg h i\nb a\td c\n".as_slice(),
            Tokenizer::Whitespace,
        )
        .unwrap();
        let vocab = build_vocabulary(&raw, 1).unwrap();
        let corpus = raw.encode(&vocab);
        let cfg = ModelConfig {
            d_model: 8,
            n_enc_layers: 1,
            n_dec_layers: 1,
            n_heads: 2,
            d_ffn: 16,
            adapter_inner: 4,
            max_len: 12,
        };
        let model = Model::new_base(cfg, vocab.len(), 11).unwrap();
        let ds = Datastore::build(&model, &corpus, 0).unwrap();
        let sources: Vec<Vec<u32>> = corpus.pairs.iter().map(|p| p.source.clone()).collect();
        (model, ds, sources)
    }

    #[test]
    fn bench_produces_one_result_per_system_and_batch() {
        let (model, ds, sources) = tiny_setup();
        let results = throughput_bench(
            &model,
            &ds,
            &sources,
            &[2, 4],
            3,
            &DecodeConfig::greedy(8),
            &KnnBenchSettings::default(),
            1,
        )
        .unwrap();
        assert_eq!(results.len(), 4);
        for r in &results {
            assert!(r.sents_per_sec > 0.0, "{} batch {}", r.system, r.batch_size);
            assert_eq!(r.repetitions, 3);
            assert_eq!(r.rep_seconds.len(), 3);
            assert!(r.tokens_per_rep > 0);
            assert_eq!(r.threads, 1);
        }
        let systems: Vec<&str> = results.iter().map(|r| r.system.as_str()).collect();
        assert_eq!(
            systems,
            [SYSTEM_ADAPTER_ONLY, SYSTEM_KNN, SYSTEM_ADAPTER_ONLY, SYSTEM_KNN]
        );
        assert!(speedup_at(&results, 2).unwrap() > 0.0);
        assert!(speedup_at(&results, 99).is_none());
    }

    #[test]
    fn bench_rejects_bad_inputs() {
        let (model, ds, sources) = tiny_setup();
        let cfg = DecodeConfig::greedy(8);
        let settings = KnnBenchSettings::default();
        let empty: Vec<Vec<u32>> = Vec::new();
        assert!(throughput_bench(&model, &ds, &empty, &[2], 3, &cfg, &settings, 1).is_err());
        assert!(throughput_bench(&model, &ds, &sources, &[], 3, &cfg, &settings, 1).is_err());
        assert!(throughput_bench(&model, &ds, &sources, &[0], 3, &cfg, &settings, 1).is_err());
        assert!(throughput_bench(&model, &ds, &sources, &[2], 2, &cfg, &settings, 1).is_err());
        assert!(throughput_bench(&model, &ds, &sources, &[2], 3, &cfg, &settings, 0).is_err());
        let bad = KnnBenchSettings { lambda: 2.0, ..settings };
        assert!(throughput_bench(&model, &ds, &sources, &[2], 3, &cfg, &bad, 1).is_err());
    }

    #[test]
    fn table_renders_every_row() {
        let (model, ds, sources) = tiny_setup();
        let results = throughput_bench(
            &model,
            &ds,
            &sources,
            &[2],
            3,
            &DecodeConfig::greedy(8),
            &KnnBenchSettings::default(),
            1,
        )
        .unwrap();
        let table = render_bench_table(&results);
        assert!(table.contains(SYSTEM_ADAPTER_ONLY));
        assert!(table.contains(SYSTEM_KNN));
        assert_eq!(table.lines().count(), 2 + results.len());
    }

    #[test]
    fn worker_count_does_not_change_the_token_budget() {
        let (model, ds, sources) = tiny_setup();
        let cfg = DecodeConfig::greedy(8);
        let settings = KnnBenchSettings::default();
        let serial =
            throughput_bench(&model, &ds, &sources, &[5], 3, &cfg, &settings, 1).unwrap();
        let parallel =
            throughput_bench(&model, &ds, &sources, &[5], 3, &cfg, &settings, 3).unwrap();
        for (a, b) in serial.iter().zip(&parallel) {
            assert_eq!(a.system, b.system);
            assert_eq!(a.tokens_per_rep, b.tokens_per_rep);
        }
        assert_eq!(parallel[0].threads, 3);
    }

    #[test]
    fn results_round_trip_as_json_lines() {
        let (model, ds, sources) = tiny_setup();
        let results = throughput_bench(
            &model,
            &ds,
            &sources,
            &[2],
            3,
            &DecodeConfig::greedy(8),
            &KnnBenchSettings::default(),
            1,
        )
        .unwrap();
        for r in &results {
            let line = serde_json::to_string(r).unwrap();
            let back: BenchResult = serde_json::from_str(&line).unwrap();
            assert_eq!(back.system, r.system);
            assert_eq!(back.batch_size, r.batch_size);
            assert_eq!(back.rep_seconds, r.rep_seconds);
        }
    }
}
