//! File plumbing shared by the commands: path-labelled error wrapping,
//! output directory setup, and line-delimited JSON writing.

use std::fs;
use std::path::{Path, PathBuf};

use ink_core::{Error, Result, RunConfig, Tokenizer, Vocabulary};

/// Labels an error with the file it came from. Unreadable inputs become
/// input errors (exit 1): a missing file is the user's to fix.
pub fn with_path<T>(what: &str, path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| {
        let p = path.display();
        match e {
            Error::Io(io) => Error::invalid_input(format!("{what} {p}: {io}")),
            Error::Format(m) => Error::format(format!("{what} {p}: {m}")),
            Error::InvalidInput(m) => Error::invalid_input(format!("{what} {p}: {m}")),
            other => other,
        }
    })
}

/// Creates the output directory and snapshots the effective config into it.
/// Called before a command does any real work.
pub fn prepare_out_dir(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    cfg.write_snapshot(&dir.join("config.snapshot"))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

pub fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).map_err(|e| Error::format(e.to_string()))?);
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn load_vocab(path: &Path) -> Result<Vocabulary> {
    with_path("vocabulary", path, Vocabulary::load(path))
}

pub fn load_model_checked(path: &Path, vocab: &Vocabulary) -> Result<ink_core::Model> {
    let (model, _) = with_path("model", path, ink_core::load_model(path, Some(vocab.hash64())))?;
    Ok(model)
}

/// Loads the model and grafts saved adapters onto it when a path is given.
pub fn load_model_with_adapters(
    model_path: &Path,
    adapters: Option<&PathBuf>,
    vocab: &Vocabulary,
) -> Result<ink_core::Model> {
    let model = load_model_checked(model_path, vocab)?;
    match adapters {
        Some(path) => with_path(
            "adapters",
            path,
            ink_core::load_adapters_onto(path, &model, vocab.hash64()),
        ),
        None => Ok(model),
    }
}

pub fn load_pairs(
    path: &Path,
    vocab: &Vocabulary,
    tokenizer: Tokenizer,
) -> Result<ink_core::ParallelCorpus> {
    // the corpus reader labels its own errors with the path
    ink_core::load_corpus(path, vocab, tokenizer)
}

/// Renders decoded token ids back to text (decode output carries no
/// end marker).
pub fn detokenize(vocab: &Vocabulary, ids: &[u32]) -> String {
    vocab.decode(ids).join(" ")
}
