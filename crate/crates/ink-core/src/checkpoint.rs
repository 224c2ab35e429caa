//! Binary container for model and adapter parameters.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "INKC" | u32 container version | 7 x u32 model config |
//! u64 vocabulary hash | u32 vocabulary size | u32 tensor count |
//! per tensor: u32 name length, name bytes, u32 rows, u32 cols,
//!             rows * cols f32 row-major
//! ```
//!
//! Tensors are written in parameter insertion order and values are stored
//! at f32; a save/load/save cycle reproduces identical bytes. The
//! vocabulary hash ties a checkpoint to the token table it was trained
//! with, so id/token drift surfaces as a load error instead of garbage
//! translations. Adapter files use the same container holding only the
//! adapter tensors.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::{is_adapter_param, Model, ModelConfig, ParamSet};

const MAGIC: &[u8; 4] = b"INKC";
const CONTAINER_VERSION: u32 = 1;

#[derive(Debug)]
pub struct TensorFile {
    pub config: ModelConfig,
    pub vocab_hash: u64,
    pub vocab_size: u32,
    pub params: ParamSet,
}

pub fn save_tensors(path: &Path, file: &TensorFile) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(CONTAINER_VERSION)?;
    for v in config_words(&file.config) {
        out.write_u32::<LittleEndian>(v)?;
    }
    out.write_u64::<LittleEndian>(file.vocab_hash)?;
    out.write_u32::<LittleEndian>(file.vocab_size)?;
    out.write_u32::<LittleEndian>(file.params.len() as u32)?;
    for slot in 0..file.params.len() {
        let name = file.params.name(slot).as_bytes();
        out.write_u32::<LittleEndian>(name.len() as u32)?;
        out.write_all(name)?;
        let tensor = file.params.tensor(slot);
        out.write_u32::<LittleEndian>(tensor.nrows() as u32)?;
        out.write_u32::<LittleEndian>(tensor.ncols() as u32)?;
        for &v in tensor.iter() {
            out.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<TensorFile> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)
        .map_err(|_| Error::format("checkpoint file truncated"))?;
    if &magic != MAGIC {
        return Err(Error::format("not a checkpoint file (bad magic)"));
    }
    let version = file.read_u32::<LittleEndian>().map_err(truncated)?;
    if version != CONTAINER_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint container version {version}"
        )));
    }
    let mut words = [0u32; 7];
    for w in &mut words {
        *w = file.read_u32::<LittleEndian>().map_err(truncated)?;
    }
    let config = config_from_words(words);
    config.validate()?;
    let vocab_hash = file.read_u64::<LittleEndian>().map_err(truncated)?;
    let vocab_size = file.read_u32::<LittleEndian>().map_err(truncated)?;
    let n_tensors = file.read_u32::<LittleEndian>().map_err(truncated)?;

    let mut params = ParamSet::default();
    for _ in 0..n_tensors {
        let name_len = file.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        if name_len > 4096 {
            return Err(Error::format("implausible tensor name length"));
        }
        let mut name = vec![0u8; name_len];
        file.read_exact(&mut name).map_err(|_| truncated_plain())?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format("tensor name is not valid utf-8"))?;
        let rows = file.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let cols = file.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let mut flat = vec![0f32; rows * cols];
        file.read_f32_into::<LittleEndian>(&mut flat)
            .map_err(truncated)?;
        if params.contains(&name) {
            return Err(Error::format(format!("duplicate tensor name {name}")));
        }
        let tensor = Array2::from_shape_vec((rows, cols), flat.iter().map(|&v| v as f64).collect())
            .expect("dimensions match the buffer just read");
        params.insert(name, tensor);
    }
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing)? != 0 {
        return Err(Error::format("trailing bytes after checkpoint payload"));
    }
    Ok(TensorFile {
        config,
        vocab_hash,
        vocab_size,
        params,
    })
}

pub fn save_model(path: &Path, model: &Model, vocab_hash: u64) -> Result<()> {
    save_tensors(
        path,
        &TensorFile {
            config: model.config,
            vocab_hash,
            vocab_size: model.vocab_size as u32,
            params: model.params.clone(),
        },
    )
}

/// Load a full model checkpoint. The tensor names and shapes must exactly
/// match what the recorded configuration produces, adapters included when
/// present. `expected_vocab_hash` guards against mixing checkpoints and
/// vocabularies from different runs.
pub fn load_model(path: &Path, expected_vocab_hash: Option<u64>) -> Result<(Model, u64)> {
    let file = load_tensors(path)?;
    if let Some(expected) = expected_vocab_hash {
        if expected != file.vocab_hash {
            return Err(Error::format(
                "checkpoint was trained with a different vocabulary",
            ));
        }
    }
    let has_adapters = file.params.names().any(is_adapter_param);
    let reference = Model::new_base(file.config, file.vocab_size as usize, 0)?;
    let reference = if has_adapters {
        reference.with_identity_adapters(0)
    } else {
        reference
    };
    check_layout(&file.params, &reference.params)?;
    Ok((
        Model {
            config: file.config,
            vocab_size: file.vocab_size as usize,
            params: file.params,
            has_adapters,
        },
        file.vocab_hash,
    ))
}

pub fn save_adapters(path: &Path, model: &Model, vocab_hash: u64) -> Result<()> {
    if !model.has_adapters {
        return Err(Error::state("model has no adapters to save"));
    }
    save_tensors(
        path,
        &TensorFile {
            config: model.config,
            vocab_hash,
            vocab_size: model.vocab_size as u32,
            params: model.adapter_params(),
        },
    )
}

/// Load an adapter-only file and graft it onto a base model. The base must
/// match the recorded configuration, vocabulary size, and hash.
pub fn load_adapters_onto(path: &Path, base: &Model, vocab_hash: u64) -> Result<Model> {
    let file = load_tensors(path)?;
    if file.vocab_hash != vocab_hash {
        return Err(Error::format(
            "adapters were trained with a different vocabulary",
        ));
    }
    if file.config != base.config {
        return Err(Error::format(
            "adapter file was trained under a different model configuration",
        ));
    }
    if file.vocab_size as usize != base.vocab_size {
        return Err(Error::format(
            "adapter file records a different vocabulary size",
        ));
    }
    Model::apply_adapters(base, &file.params)
}

fn check_layout(got: &ParamSet, expect: &ParamSet) -> Result<()> {
    if got.len() != expect.len() {
        return Err(Error::format(format!(
            "checkpoint holds {} tensors, configuration needs {}",
            got.len(),
            expect.len()
        )));
    }
    for slot in 0..expect.len() {
        let name = expect.name(slot);
        if got.name(slot) != name {
            return Err(Error::format(format!(
                "tensor {slot} is named {}, expected {name}",
                got.name(slot)
            )));
        }
        let got_dim = got.tensor(slot).dim();
        let want_dim = expect.tensor(slot).dim();
        if got_dim != want_dim {
            return Err(Error::format(format!(
                "tensor {name} has shape {got_dim:?}, expected {want_dim:?}"
            )));
        }
    }
    Ok(())
}

fn config_words(c: &ModelConfig) -> [u32; 7] {
    [
        c.d_model as u32,
        c.n_enc_layers as u32,
        c.n_dec_layers as u32,
        c.n_heads as u32,
        c.d_ffn as u32,
        c.adapter_inner as u32,
        c.max_len as u32,
    ]
}

fn config_from_words(w: [u32; 7]) -> ModelConfig {
    ModelConfig {
        d_model: w[0] as usize,
        n_enc_layers: w[1] as usize,
        n_dec_layers: w[2] as usize,
        n_heads: w[3] as usize,
        d_ffn: w[4] as usize,
        adapter_inner: w[5] as usize,
        max_len: w[6] as usize,
    }
}

fn truncated(_: std::io::Error) -> Error {
    truncated_plain()
}

fn truncated_plain() -> Error {
    Error::format("checkpoint file truncated")
}
