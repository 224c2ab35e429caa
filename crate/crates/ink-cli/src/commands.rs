//! One function per subcommand. Each is a thin wrapper: resolve inputs,
//! call into the library, print a human-readable report, and mirror the
//! machine-readable artifacts into the output directory when one is given.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;

use clap::Args;
use ink_core::{
    ablation_suite, bleu, mean_knn_accuracy, render_ablation_table, render_bench_table,
    save_adapters, save_model, speedup_at, throughput_bench, token_accuracy, Datastore, Error,
    FrequencyBuckets, IndexMode, KnnAccuracyReport, KnnBenchSettings, Model, Result, RunConfig,
};

use crate::artifacts::{
    detokenize, load_model_with_adapters, load_pairs, load_vocab, prepare_out_dir, with_path,
    write_jsonl, write_text,
};

#[derive(Args)]
pub struct GenToyArgs {
    /// Directory for pretrain.tsv, train.tsv, dev.tsv, test.tsv
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

pub fn gen_toy(cfg: &RunConfig, args: &GenToyArgs) -> Result<()> {
    prepare_out_dir(&args.out_dir, cfg)?;
    let task = ink_core::toy::generate(&cfg.toy);
    for (name, lines) in [
        ("pretrain.tsv", &task.pretrain),
        ("train.tsv", &task.train),
        ("dev.tsv", &task.dev),
        ("test.tsv", &task.test),
    ] {
        let mut text = lines.join("\n");
        text.push('\n');
        write_text(&args.out_dir.join(name), &text)?;
        println!("{}: {} pairs", name, lines.len());
    }
    Ok(())
}

#[derive(Args)]
pub struct PretrainArgs {
    /// Parallel training corpus, source<TAB>target per line
    #[arg(long, value_name = "FILE")]
    pub train: PathBuf,
    /// Parallel dev corpus for early stopping
    #[arg(long, value_name = "FILE")]
    pub dev: PathBuf,
    /// Directory for vocab.txt, base.inkc, pretrain_reports.jsonl
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

pub fn pretrain(cfg: &RunConfig, args: &PretrainArgs) -> Result<()> {
    prepare_out_dir(&args.out_dir, cfg)?;
    let raw = ink_core::RawCorpus::read(&args.train, cfg.ingest.tokenizer)?;
    let vocab = ink_core::build_vocabulary(&raw, cfg.ingest.min_count)?;
    vocab.save(&args.out_dir.join("vocab.txt"))?;
    let train = raw.encode(&vocab);
    let dev = load_pairs(&args.dev, &vocab, cfg.ingest.tokenizer)?;
    println!(
        "vocabulary: {} types; train: {} pairs; dev: {} pairs",
        vocab.len(),
        train.len(),
        dev.len()
    );

    let model = Model::new_base(cfg.model, vocab.len(), cfg.train.seed)?;
    let mut reports_file = std::io::BufWriter::new(std::fs::File::create(
        args.out_dir.join("pretrain_reports.jsonl"),
    )?);
    let outcome = ink_core::pretrain_base(model, &train, &dev, &cfg.train, |_, report| {
        serde_json::to_writer(&mut reports_file, report)
            .map_err(|e| Error::format(e.to_string()))?;
        writeln!(reports_file)?;
        println!("{}", epoch_line(report));
        Ok(())
    })?;
    reports_file.flush()?;

    save_model(&args.out_dir.join("base.inkc"), &outcome.model, vocab.hash64())?;
    if let Some(best) = outcome.reports.iter().find(|r| r.epoch == outcome.best_epoch) {
        println!(
            "kept epoch {} (dev token accuracy {:.4}); wrote base.inkc",
            best.epoch, best.dev_token_accuracy
        );
    }
    Ok(())
}

#[derive(Args)]
pub struct BuildDatastoreArgs {
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub vocab: PathBuf,
    /// Corpus whose target positions become datastore entries
    #[arg(long, value_name = "FILE")]
    pub corpus: PathBuf,
    /// Directory for datastore.inkd
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

pub fn build_datastore(cfg: &RunConfig, args: &BuildDatastoreArgs) -> Result<()> {
    prepare_out_dir(&args.out_dir, cfg)?;
    let vocab = load_vocab(&args.vocab)?;
    let model = load_model_with_adapters(&args.model, None, &vocab)?;
    let corpus = load_pairs(&args.corpus, &vocab, cfg.ingest.tokenizer)?;
    let mut ds = Datastore::build(&model, &corpus, 0)?;
    if let IndexMode::Ivf { n_list, n_probe } = cfg.datastore.mode {
        ds = ds.with_ivf_index(n_list, n_probe)?;
    }
    ds.save(&args.out_dir.join("datastore.inkd"))?;
    println!(
        "datastore.inkd: {} entries, dim {}, version {}, {} index",
        ds.len(),
        ds.dim(),
        ds.version(),
        match ds.index_mode() {
            IndexMode::Exact => "exact".to_string(),
            IndexMode::Ivf { n_list, n_probe } => format!("ivf({n_list},{n_probe})"),
        }
    );
    Ok(())
}

#[derive(Args)]
pub struct TrainInkArgs {
    /// Pretrained base model (bare, no adapters)
    #[arg(long, value_name = "FILE")]
    pub base: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub vocab: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub train: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub dev: PathBuf,
    /// Directory for adapters.inkc and ink_reports.jsonl
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Keep the epoch-1 datastore for the whole run
    #[arg(long)]
    pub no_refresh: bool,
    /// Drop the alignment term (retrieval distribution match)
    #[arg(long)]
    pub no_li: bool,
    /// Drop the representation term (gold-key pull)
    #[arg(long)]
    pub no_lr: bool,
    /// Rebuild the datastore concurrently with the next epoch
    #[arg(long)]
    pub overlapped: bool,
}

pub fn train_ink(cfg: &mut RunConfig, args: &TrainInkArgs) -> Result<()> {
    // Convenience flags fold into the config before the snapshot is taken,
    // so the written snapshot reproduces the run without the flags.
    if args.no_refresh {
        cfg.train.refresh = false;
    }
    if args.no_li {
        cfg.train.use_alignment = false;
    }
    if args.no_lr {
        cfg.train.use_representation = false;
    }
    if args.overlapped {
        cfg.train.overlapped_refresh = true;
    }
    prepare_out_dir(&args.out_dir, cfg)?;

    let vocab = load_vocab(&args.vocab)?;
    let base = load_model_with_adapters(&args.base, None, &vocab)?;
    let train = load_pairs(&args.train, &vocab, cfg.ingest.tokenizer)?;
    let dev = load_pairs(&args.dev, &vocab, cfg.ingest.tokenizer)?;

    let outcome = ink_core::train_ink(&base, &train, &dev, &cfg.train)?;
    for report in &outcome.reports {
        println!("{}", epoch_line(report));
    }
    write_jsonl(&args.out_dir.join("ink_reports.jsonl"), &outcome.reports)?;
    save_adapters(&args.out_dir.join("adapters.inkc"), &outcome.model, vocab.hash64())?;
    if let Some(best) = outcome.reports.iter().find(|r| r.epoch == outcome.best_epoch) {
        println!(
            "kept epoch {} (dev token accuracy {:.4}); final datastore version {}; wrote adapters.inkc",
            best.epoch, best.dev_token_accuracy, outcome.final_datastore_version
        );
    }
    Ok(())
}

fn epoch_line(r: &ink_core::EpochReport) -> String {
    let mut line = format!("epoch {:>3}  ", r.epoch);
    match r.train_loss {
        Some(loss) => {
            let _ = write!(line, "loss {loss:>8.4}  ");
        }
        None => line.push_str("loss        -  "),
    }
    let _ = write!(line, "dev acc {:.4}", r.dev_token_accuracy);
    if let Some(knn) = r.dev_knn_accuracy {
        let _ = write!(line, "  dev knn {knn:.2}%");
    }
    if let Some(v) = r.datastore_version {
        let _ = write!(line, "  store v{v}");
    }
    if let Some(lr) = r.learning_rate {
        let _ = write!(line, "  lr {lr:.2e}");
    }
    let _ = write!(line, "  ({:.1}s)", r.seconds);
    line
}

#[derive(Args)]
pub struct TranslateArgs {
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub vocab: PathBuf,
    /// Saved adapters to graft onto the model
    #[arg(long, value_name = "FILE")]
    pub adapters: Option<PathBuf>,
    /// Source sentences, one per line
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Datastore for retrieval-smoothed decoding
    #[arg(long, value_name = "FILE")]
    pub datastore: Option<PathBuf>,
    /// Also write translations.txt here
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
}

pub fn translate(cfg: &RunConfig, args: &TranslateArgs) -> Result<()> {
    if let Some(dir) = &args.out_dir {
        prepare_out_dir(dir, cfg)?;
    }
    let vocab = load_vocab(&args.vocab)?;
    let model = load_model_with_adapters(&args.model, args.adapters.as_ref(), &vocab)?;
    let sources = ink_core::load_source_lines(&args.input, &vocab, cfg.ingest.tokenizer)?;
    let ds = match &args.datastore {
        Some(path) => Some(with_path("datastore", path, Datastore::load(path))?),
        None => None,
    };

    let decode_cfg = cfg.decode_config();
    let mut lines = String::new();
    for src in &sources {
        let ids = match &ds {
            Some(ds) => model.decode_with_store(
                src,
                ds,
                cfg.train.kernel,
                cfg.inference.lambda,
                cfg.inference.k,
                &decode_cfg,
            )?,
            None => model.decode(src, &decode_cfg)?,
        };
        lines.push_str(&detokenize(&vocab, &ids));
        lines.push('\n');
    }
    print!("{lines}");
    if let Some(dir) = &args.out_dir {
        write_text(&dir.join("translations.txt"), &lines)?;
    }
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub vocab: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub adapters: Option<PathBuf>,
    /// Reference corpus, source<TAB>target per line
    #[arg(long, value_name = "FILE")]
    pub corpus: PathBuf,
    /// Datastore for the retrieval-accuracy metric
    #[arg(long, value_name = "FILE")]
    pub datastore: Option<PathBuf>,
    /// Also write eval_report.txt and eval.jsonl here
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
}

#[derive(serde::Serialize)]
struct EvalReport {
    token_accuracy: f64,
    bleu: f64,
    knn: Option<KnnAccuracyReport>,
}

pub fn eval(cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    if let Some(dir) = &args.out_dir {
        prepare_out_dir(dir, cfg)?;
    }
    let vocab = load_vocab(&args.vocab)?;
    let model = load_model_with_adapters(&args.model, args.adapters.as_ref(), &vocab)?;
    let corpus = load_pairs(&args.corpus, &vocab, cfg.ingest.tokenizer)?;

    let accuracy = token_accuracy(&model, &corpus)?;
    let decode_cfg = cfg.decode_config();
    let mut candidates = Vec::with_capacity(corpus.len());
    let mut references = Vec::with_capacity(corpus.len());
    for pair in &corpus.pairs {
        candidates.push(model.decode(&pair.source, &decode_cfg)?);
        references.push(pair.target[..pair.target.len() - 1].to_vec());
    }
    let bleu_score = bleu(&candidates, &references)?;

    let knn = match &args.datastore {
        Some(path) => {
            let ds = with_path("datastore", path, Datastore::load(path))?;
            let buckets = FrequencyBuckets::quartiles(vocab.len());
            Some(mean_knn_accuracy(&model, &ds, &corpus, cfg.inference.k, &buckets, false)?)
        }
        None => None,
    };

    let mut text = format!(
        "pairs            {}\ntoken accuracy   {:.4}\nbleu             {:.2}\n",
        corpus.len(),
        accuracy,
        bleu_score
    );
    if let Some(report) = &knn {
        let _ = writeln!(
            text,
            "knn accuracy     {:.2}% overall (k={}, {} positions)",
            report.overall, report.k, report.positions
        );
        for b in &report.buckets {
            let hi = b.hi.map_or("end".to_string(), |h| h.to_string());
            let acc = b.accuracy.map_or("   -".to_string(), |a| format!("{a:.2}%"));
            let _ = writeln!(
                text,
                "  ranks [{:>4}, {:>4})  {:>8}  ({} positions)",
                b.lo, hi, acc, b.positions
            );
        }
    }
    print!("{text}");

    if let Some(dir) = &args.out_dir {
        write_text(&dir.join("eval_report.txt"), &text)?;
        write_jsonl(
            &dir.join("eval.jsonl"),
            &[EvalReport { token_accuracy: accuracy, bleu: bleu_score, knn }],
        )?;
    }
    Ok(())
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub vocab: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub datastore: PathBuf,
    /// Source sentences, one per line
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Also write bench_table.txt and bench.jsonl here
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
}

pub fn bench(cfg: &RunConfig, args: &BenchArgs, threads: usize) -> Result<()> {
    if let Some(dir) = &args.out_dir {
        prepare_out_dir(dir, cfg)?;
    }
    let vocab = load_vocab(&args.vocab)?;
    let model = load_model_with_adapters(&args.model, None, &vocab)?;
    let ds = with_path("datastore", &args.datastore, Datastore::load(&args.datastore))?;
    let sources = ink_core::load_source_lines(&args.input, &vocab, cfg.ingest.tokenizer)?;

    let settings = KnnBenchSettings {
        kernel: cfg.train.kernel,
        lambda: cfg.inference.lambda,
        k: cfg.inference.k,
    };
    let results = throughput_bench(
        &model,
        &ds,
        &sources,
        &cfg.bench.batch_sizes,
        cfg.bench.repetitions,
        &cfg.decode_config(),
        &settings,
        threads,
    )?;

    let mut table = render_bench_table(&results);
    for &bs in &cfg.bench.batch_sizes {
        if let Some(ratio) = speedup_at(&results, bs) {
            let _ = writeln!(table, "batch {bs}: adapter-only is {ratio:.2}x the smoothed speed");
        }
    }
    print!("{table}");
    if let Some(dir) = &args.out_dir {
        write_text(&dir.join("bench_table.txt"), &table)?;
        write_jsonl(&dir.join("bench.jsonl"), &results)?;
    }
    Ok(())
}

#[derive(Args)]
pub struct AblateArgs {
    /// Pretrained base model shared by every arm
    #[arg(long, value_name = "FILE")]
    pub base: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub vocab: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub train: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub dev: PathBuf,
    /// Also write ablation_table.txt and ablation.jsonl here
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
}

pub fn ablate(cfg: &RunConfig, args: &AblateArgs) -> Result<()> {
    if let Some(dir) = &args.out_dir {
        prepare_out_dir(dir, cfg)?;
    }
    let vocab = load_vocab(&args.vocab)?;
    let base = load_model_with_adapters(&args.base, None, &vocab)?;
    let train = load_pairs(&args.train, &vocab, cfg.ingest.tokenizer)?;
    let dev = load_pairs(&args.dev, &vocab, cfg.ingest.tokenizer)?;

    let arms = ablation_suite(&base, &train, &dev, &cfg.train, &cfg.ablate.seeds)?;
    let table = render_ablation_table(&arms);
    print!("{table}");
    if let Some(dir) = &args.out_dir {
        write_text(&dir.join("ablation_table.txt"), &table)?;
        write_jsonl(&dir.join("ablation.jsonl"), &arms)?;
    }
    Ok(())
}
