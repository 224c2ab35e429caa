//! Optimization: base-model pretraining and retrieval-guided adapter
//! training.
//!
//! Adapter training never touches base weights. It builds a datastore from
//! the adapter-equipped model before the first epoch (identity adapters, so
//! the keys equal the base model's states), queries it per target position
//! with the entry for that exact position excluded, and rebuilds the store
//! after every epoch so keys track the moving representations. The rebuild
//! can overlap the next epoch's gradient work, at the cost of keys lagging
//! one epoch behind.
//!
//! Batches are token-packed: pairs are shuffled each epoch, then packed
//! greedily until the target-token budget is full. Every batch applies one
//! Adam step with an inverse-square-root learning-rate schedule.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use ndarray::Array2;

use crate::corpus::ParallelCorpus;
use crate::datastore::{Datastore, DatastoreHandle};
use crate::error::{Error, Result};
use crate::eval::{mean_knn_accuracy, token_accuracy, FrequencyBuckets};
use crate::losses::{pair_loss, LossConfig, LossWeights, PositionRetrieval};
use crate::model::{Graph, Model, ParamSet, TrainScope};
use crate::smoothing::KernelSpec;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub max_epochs: usize,
    /// Target-token budget per optimizer step.
    pub batch_tokens: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    /// Epochs without dev-accuracy improvement before stopping.
    pub patience: usize,
    /// Neighbors retrieved per target position.
    pub k: usize,
    pub kernel: KernelSpec,
    pub weights: LossWeights,
    pub per_token_mean: bool,
    pub use_alignment: bool,
    pub use_representation: bool,
    /// Rebuild the datastore after each epoch.
    pub refresh: bool,
    /// Run the rebuild concurrently with the next epoch (keys lag by one).
    pub overlapped_refresh: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            max_epochs: 30,
            batch_tokens: 1024,
            peak_lr: 5e-4,
            warmup_steps: 4000,
            patience: 5,
            k: 8,
            kernel: KernelSpec::default(),
            weights: LossWeights::default(),
            per_token_mean: false,
            use_alignment: true,
            use_representation: true,
            refresh: true,
            overlapped_refresh: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be at least 1"));
        }
        if self.batch_tokens == 0 {
            return Err(Error::config("batch_tokens must be at least 1"));
        }
        if !self.peak_lr.is_finite() || self.peak_lr <= 0.0 {
            return Err(Error::config("peak_lr must be positive"));
        }
        if self.warmup_steps == 0 {
            return Err(Error::config("warmup_steps must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        if self.k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        self.kernel.validate()?;
        self.weights.validate()?;
        Ok(())
    }

    fn loss_config(&self) -> LossConfig {
        LossConfig {
            weights: self.weights,
            per_token_mean: self.per_token_mean,
            use_alignment: self.use_alignment,
            use_representation: self.use_representation,
            ..LossConfig::default()
        }
    }
}

/// Peak-scaled inverse-square-root schedule: linear warmup to the peak,
/// then decay proportional to 1/sqrt(step). `step` is one-based.
pub fn inverse_sqrt_lr(step: usize, peak_lr: f64, warmup_steps: usize) -> f64 {
    let s = step as f64;
    let w = warmup_steps as f64;
    peak_lr * (s / w).min((w / s).sqrt())
}

/// Adam with one moment pair per parameter tensor. Slots outside the
/// trainable mask are never touched.
pub struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        Adam {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &[Array2<f64>],
        mask: &[bool],
        lr: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for slot in 0..params.len() {
            if !mask[slot] {
                continue;
            }
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let g = &grads[slot];
            let theta = params.tensor_mut(slot);
            ndarray::Zip::from(theta)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|t, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *t -= lr * m_hat / (v_hat.sqrt() + self.eps);
                });
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Optimizer steps taken during this epoch.
    pub steps: usize,
    pub train_loss: Option<f64>,
    pub l_a: Option<f64>,
    pub l_i: Option<f64>,
    pub l_r: Option<f64>,
    /// Positions whose neighbor set held no gold token.
    pub clamp_hits: usize,
    pub dev_token_accuracy: f64,
    /// Retrieval hit rate on the dev set, percent.
    pub dev_knn_accuracy: Option<f64>,
    pub datastore_version: Option<u64>,
    pub learning_rate: Option<f64>,
    /// Wall-clock time. Excluded from serialization so persisted reports
    /// are byte-identical across re-runs of the same seed.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug)]
pub struct PretrainOutcome {
    /// The model at its best dev accuracy, not necessarily the last epoch.
    pub model: Model,
    pub reports: Vec<EpochReport>,
    /// Epoch number (1-based) whose snapshot was kept.
    pub best_epoch: usize,
}

#[derive(Debug)]
pub struct InkOutcome {
    /// Base plus the adapters from the best dev-accuracy epoch.
    pub model: Model,
    pub reports: Vec<EpochReport>,
    /// Epoch number whose adapters were kept; 0 means no epoch beat the
    /// identity-adapter baseline.
    pub best_epoch: usize,
    pub final_datastore_version: u64,
}

/// Shuffled, token-packed batches of corpus indices for one epoch.
fn make_batches(
    corpus: &ParallelCorpus,
    budget: usize,
    rng: &mut ChaCha12Rng,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    let mut batch: Vec<usize> = Vec::new();
    let mut tokens = 0usize;
    for idx in order {
        let len = corpus.pairs[idx].target.len();
        if !batch.is_empty() && tokens + len > budget {
            batches.push(std::mem::take(&mut batch));
            tokens = 0;
        }
        batch.push(idx);
        tokens += len;
    }
    if !batch.is_empty() {
        batches.push(batch);
    }
    batches
}

fn check_finite(loss: f64, epoch: usize, step: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Training {
            epoch,
            step,
            message: format!("loss became {loss}; training diverged"),
        });
    }
    Ok(())
}

/// Train every parameter of a base model on the prediction loss alone.
/// `on_epoch` runs after each epoch's report, enabling checkpointing;
/// an error from it aborts training.
pub fn pretrain_base(
    model: Model,
    train: &ParallelCorpus,
    dev: &ParallelCorpus,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&Model, &EpochReport) -> Result<()>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if model.has_adapters {
        return Err(Error::state("pretraining expects a base model without adapters"));
    }
    if train.is_empty() || dev.is_empty() {
        return Err(Error::invalid_input("pretraining needs non-empty train and dev sets"));
    }
    let mut model = model;
    let mask = model.trainable_mask(TrainScope::All);
    let mut adam = Adam::new(&model.params);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let loss_cfg = LossConfig {
        use_alignment: false,
        use_representation: false,
        ..cfg.loss_config()
    };

    let mut reports = Vec::new();
    let mut best = model.clone();
    let mut best_epoch = 0usize;
    let mut best_acc = f64::NEG_INFINITY;
    let mut stale = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let mut pairs_seen = 0usize;
        let mut steps = 0usize;
        let mut last_lr = 0.0;
        for batch in make_batches(train, cfg.batch_tokens, &mut rng) {
            let mut grads = model.params.zeros_like();
            let scale = 1.0 / batch.len() as f64;
            for &idx in &batch {
                let pair = &train.pairs[idx];
                let mut graph = Graph::new(&model, TrainScope::All);
                let states = graph.teacher_forced_states(&pair.source, &pair.target)?;
                let loss = pair_loss(&mut graph, states, &pair.target, None, &loss_cfg)?;
                check_finite(loss.total, epoch, adam.steps_taken() + 1)?;
                graph.accumulate_gradients(loss.root, scale, &mut grads);
                loss_sum += loss.total;
                pairs_seen += 1;
            }
            last_lr = inverse_sqrt_lr(adam.steps_taken() + 1, cfg.peak_lr, cfg.warmup_steps);
            adam.step(&mut model.params, &grads, &mask, last_lr);
            steps += 1;
        }

        let dev_acc = token_accuracy(&model, dev)?;
        let report = EpochReport {
            epoch,
            steps,
            train_loss: Some(loss_sum / pairs_seen as f64),
            l_a: Some(loss_sum / pairs_seen as f64),
            l_i: None,
            l_r: None,
            clamp_hits: 0,
            dev_token_accuracy: dev_acc,
            dev_knn_accuracy: None,
            datastore_version: None,
            learning_rate: Some(last_lr),
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&model, &report)?;
        reports.push(report);

        if dev_acc > best_acc {
            best_acc = dev_acc;
            best = model.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    Ok(PretrainOutcome {
        model: best,
        reports,
        best_epoch,
    })
}

/// Train adapters on the combined objective against a self-refreshing
/// datastore. Base parameters stay bit-identical throughout.
pub fn train_ink(
    base: &Model,
    train: &ParallelCorpus,
    dev: &ParallelCorpus,
    cfg: &TrainConfig,
) -> Result<InkOutcome> {
    cfg.validate()?;
    if base.has_adapters {
        return Err(Error::state("adapter training expects a bare base model"));
    }
    if train.is_empty() || dev.is_empty() {
        return Err(Error::invalid_input("adapter training needs non-empty train and dev sets"));
    }
    let mut model = base.with_identity_adapters(cfg.seed);
    let mask = model.trainable_mask(TrainScope::AdaptersOnly);
    let mut adam = Adam::new(&model.params);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let loss_cfg = cfg.loss_config();
    let buckets = FrequencyBuckets::quartiles(model.vocab_size);

    // Retrieval is pointless when neither retrieval-driven loss is active.
    let uses_retrieval = cfg.use_alignment || cfg.use_representation;
    let refreshing = cfg.refresh && uses_retrieval;

    // Version 1 comes from the identity-adapter model, whose states equal
    // the base model's.
    let handle = DatastoreHandle::new(Datastore::build(&model, train, 0)?);

    // Epoch 0: metrics of the untrained adapter model, which must match the
    // base exactly.
    let mut reports = vec![EpochReport {
        epoch: 0,
        steps: 0,
        train_loss: None,
        l_a: None,
        l_i: None,
        l_r: None,
        clamp_hits: 0,
        dev_token_accuracy: token_accuracy(&model, dev)?,
        dev_knn_accuracy: Some(
            mean_knn_accuracy(&model, &handle.current(), dev, cfg.k, &buckets, false)?.overall,
        ),
        datastore_version: Some(handle.current().version()),
        learning_rate: None,
        seconds: 0.0,
    }];

    let mut best_adapters: Option<Model> = None;
    let mut best_epoch = 0usize;
    let mut best_acc = reports[0].dev_token_accuracy;
    let mut stale = 0usize;
    let mut pending: Option<std::thread::JoinHandle<Result<Datastore>>> = None;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        if refreshing && cfg.overlapped_refresh {
            // Snapshot the parameters as of now; copy-on-write updates keep
            // the snapshot stable while this epoch trains.
            let snapshot = model.clone();
            let corpus = train.clone();
            let current = handle.current();
            pending = Some(std::thread::spawn(move || {
                current.refresh(&snapshot, &corpus)
            }));
        }

        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut clamp_hits = 0usize;
        let mut pairs_seen = 0usize;
        let mut steps = 0usize;
        let mut last_lr = 0.0;
        for batch in make_batches(train, cfg.batch_tokens, &mut rng) {
            let active = handle.current();
            let mut grads = model.params.zeros_like();
            let scale = 1.0 / batch.len() as f64;
            for &idx in &batch {
                let pair = &train.pairs[idx];
                let mut graph = Graph::new(&model, TrainScope::AdaptersOnly);
                let states = graph.teacher_forced_states(&pair.source, &pair.target)?;
                let retrieval = if uses_retrieval {
                    let values = graph.tape.value(states).to_owned();
                    let mut sets = Vec::with_capacity(pair.target.len());
                    for t in 0..pair.target.len() {
                        let h: Vec<f64> = values.row(t).to_vec();
                        let neighbors =
                            active.query(&h, cfg.k, Some((idx as u32, t as u32)))?;
                        sets.push(PositionRetrieval::from_neighbors(
                            &cfg.kernel,
                            &h,
                            &neighbors,
                            &active,
                        )?);
                    }
                    Some(sets)
                } else {
                    None
                };
                let loss = pair_loss(
                    &mut graph,
                    states,
                    &pair.target,
                    retrieval.as_deref(),
                    &loss_cfg,
                )?;
                check_finite(loss.total, epoch, adam.steps_taken() + 1)?;
                graph.accumulate_gradients(loss.root, scale, &mut grads);
                sums.0 += loss.total;
                sums.1 += loss.l_a;
                sums.2 += loss.l_i;
                sums.3 += loss.l_r;
                clamp_hits += loss.clamp_hits;
                pairs_seen += 1;
            }
            last_lr = inverse_sqrt_lr(adam.steps_taken() + 1, cfg.peak_lr, cfg.warmup_steps);
            adam.step(&mut model.params, &grads, &mask, last_lr);
            steps += 1;
        }

        if refreshing {
            let next = match pending.take() {
                Some(join) => join
                    .join()
                    .map_err(|_| Error::state("background refresh panicked"))??,
                None => handle.current().refresh(&model, train)?,
            };
            handle.swap(next);
        }

        let active = handle.current();
        let dev_acc = token_accuracy(&model, dev)?;
        let dev_knn = mean_knn_accuracy(&model, &active, dev, cfg.k, &buckets, false)?;
        let n = pairs_seen as f64;
        reports.push(EpochReport {
            epoch,
            steps,
            train_loss: Some(sums.0 / n),
            l_a: Some(sums.1 / n),
            l_i: Some(sums.2 / n),
            l_r: Some(sums.3 / n),
            clamp_hits,
            dev_token_accuracy: dev_acc,
            dev_knn_accuracy: Some(dev_knn.overall),
            datastore_version: Some(active.version()),
            learning_rate: Some(last_lr),
            seconds: started.elapsed().as_secs_f64(),
        });

        if dev_acc > best_acc {
            best_acc = dev_acc;
            best_adapters = Some(model.clone());
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    if let Some(join) = pending.take() {
        let _ = join.join();
    }

    let final_version = handle.current().version();
    let tuned = best_adapters.unwrap_or(model);
    debug_assert!(base_is_untouched(base, &tuned));
    Ok(InkOutcome {
        model: tuned,
        reports,
        best_epoch,
        final_datastore_version: final_version,
    })
}

fn base_is_untouched(base: &Model, tuned: &Model) -> bool {
    (0..base.params.len()).all(|slot| {
        let name = base.params.name(slot);
        let a = base.params.tensor(slot);
        let b = tuned.params.get(name);
        a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
    })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ArmRun {
    pub seed: u64,
    pub dev_token_accuracy: f64,
    /// Percent, from a datastore rebuilt off the tuned model.
    pub dev_knn_accuracy: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AblationArm {
    pub name: String,
    pub runs: Vec<std::result::Result<ArmRun, String>>,
}

impl AblationArm {
    pub fn successes(&self) -> impl Iterator<Item = &ArmRun> {
        self.runs.iter().filter_map(|r| r.as_ref().ok())
    }

    /// Mean and sample standard deviation of dev token accuracy.
    pub fn accuracy_stats(&self) -> Option<(f64, f64)> {
        stats(self.successes().map(|r| r.dev_token_accuracy))
    }

    pub fn knn_stats(&self) -> Option<(f64, f64)> {
        stats(self.successes().map(|r| r.dev_knn_accuracy))
    }
}

fn stats(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return None;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some((mean, std))
}

/// Deployment-style metrics for a tuned model: teacher-forced accuracy
/// (fraction) and retrieval accuracy (percent) against a datastore built
/// fresh from that model.
pub fn deployment_metrics(
    model: &Model,
    train: &ParallelCorpus,
    dev: &ParallelCorpus,
    k: usize,
) -> Result<(f64, f64)> {
    let ds = Datastore::build(model, train, 0)?;
    let buckets = FrequencyBuckets::quartiles(model.vocab_size);
    let acc = token_accuracy(model, dev)?;
    let knn = mean_knn_accuracy(model, &ds, dev, k, &buckets, false)?;
    Ok((acc, knn.overall))
}

/// Retrain the same base under ablated objectives, every arm with the same
/// seeds. A failing run is recorded as its error string; the table always
/// comes back.
pub fn ablation_suite(
    base: &Model,
    train: &ParallelCorpus,
    dev: &ParallelCorpus,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<AblationArm>> {
    if seeds.is_empty() {
        return Err(Error::invalid_input("ablation needs at least one seed"));
    }
    let arms: Vec<(&str, TrainConfig)> = vec![
        ("full", cfg.clone()),
        ("no-refresh", TrainConfig { refresh: false, ..cfg.clone() }),
        ("no-alignment", TrainConfig { use_alignment: false, ..cfg.clone() }),
        ("no-representation", TrainConfig { use_representation: false, ..cfg.clone() }),
        (
            "prediction-only",
            TrainConfig {
                use_alignment: false,
                use_representation: false,
                ..cfg.clone()
            },
        ),
    ];

    let mut out = Vec::with_capacity(arms.len());
    for (name, arm_cfg) in arms {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let run_cfg = TrainConfig { seed, ..arm_cfg.clone() };
            let run = train_ink(base, train, dev, &run_cfg)
                .and_then(|outcome| {
                    let (acc, knn) = deployment_metrics(&outcome.model, train, dev, cfg.k)?;
                    Ok(ArmRun {
                        seed,
                        dev_token_accuracy: acc,
                        dev_knn_accuracy: knn,
                        best_epoch: outcome.best_epoch,
                        epochs_run: outcome.reports.len().saturating_sub(1),
                    })
                })
                .map_err(|e| e.to_string());
            runs.push(run);
        }
        out.push(AblationArm {
            name: name.to_owned(),
            runs,
        });
    }
    Ok(out)
}

/// Aligned text table over the arms, one row each, errors inlined.
pub fn render_ablation_table(arms: &[AblationArm]) -> String {
    let mut rows: Vec<[String; 4]> = vec![[
        "arm".into(),
        "dev token acc".into(),
        "dev knn acc".into(),
        "runs".into(),
    ]];
    for arm in arms {
        let (acc, knn) = match (arm.accuracy_stats(), arm.knn_stats()) {
            (Some((am, asd)), Some((km, ksd))) => (
                format!("{am:.4} +/- {asd:.4}"),
                format!("{km:.4} +/- {ksd:.4}"),
            ),
            _ => ("all runs failed".into(), "-".into()),
        };
        let ok = arm.successes().count();
        let mut runs = format!("{ok}/{}", arm.runs.len());
        if let Some(err) = arm.runs.iter().find_map(|r| r.as_ref().err()) {
            runs.push_str(&format!(" ({err})"));
        }
        rows.push([arm.name.clone(), acc, knn, runs]);
    }
    let widths: Vec<usize> = (0..4)
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            out.push_str(&format!("{cell:<width$}", width = widths[c]));
            if c < 3 {
                out.push_str("  ");
            }
        }
        out.push('\n');
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 6;
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}

/// The smallest file-ready artifact of adapter training.
pub fn adapters_only(model: &Model) -> Result<ParamSet> {
    if !model.has_adapters {
        return Err(Error::state("model has no adapters"));
    }
    Ok(model.adapter_params())
}
