//! Checkpoint directories.
//!
//! ```text
//! <dir>/config.toml   model configuration
//! <dir>/manifest.txt  one `tensor <name> <shape> f64le <byte offset>` line per parameter
//! <dir>/params.bin    every parameter, little-endian f64, canonical order
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::model::{ModelConfig, MyGoModel};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &str = "mygo-checkpoint 1";
const BLOB: &str = "params.bin";

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: MyGoModel,
    pub params: ParamStore,
    /// Free-form run description recorded at save time.
    pub run: String,
    pub config_hash: String,
}

fn hash_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash identifying a model configuration together with a run description.
pub fn config_hash(config: &ModelConfig, run: &str) -> String {
    let text = toml::to_string(config).expect("config serializes");
    hash_hex(format!("{text}\n{run}").as_bytes())
}

fn shape_str(shape: &[usize]) -> String {
    shape
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join("x")
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Writes `params` for `model` into `dir` (created if missing), replacing any
/// previous checkpoint there. `run` must be a single line.
pub fn save_checkpoint(
    dir: &Path,
    model: &MyGoModel,
    params: &ParamStore,
    run: &str,
) -> Result<()> {
    if run.contains('\n') {
        return Err(Error::InvalidArgument(
            "run description must be one line".into(),
        ));
    }
    check_layout(
        model,
        params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec())),
    )?;
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(params.numel() * 8);
    let mut lines = vec![
        MAGIC.to_string(),
        format!("config_hash {}", config_hash(&model.config, run)),
        format!("run {run}"),
    ];
    let mut tensor_lines = Vec::new();
    for (name, t) in params.iter() {
        tensor_lines.push(format!(
            "tensor {name} {} f64le {}",
            shape_str(t.shape()),
            blob.len()
        ));
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    lines.push(format!("blob {BLOB} {} {}", blob.len(), hash_hex(&blob)));
    lines.push(format!("tensors {}", tensor_lines.len()));
    lines.extend(tensor_lines);
    let manifest = lines.join("\n") + "\n";
    fs::write(
        dir.join("config.toml"),
        toml::to_string(&model.config).expect("config serializes"),
    )?;
    fs::write(dir.join(BLOB), &blob)?;
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// SHA-256 of the manifest, which covers the configuration, the run
/// description, every parameter name and shape, and the blob contents.
pub fn manifest_hash(dir: &Path) -> Result<String> {
    Ok(hash_hex(&fs::read(dir.join("manifest.txt"))?))
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

fn parse_manifest(text: &str) -> Result<(String, String, usize, String, Vec<Entry>)> {
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(corrupt("missing manifest header"));
    }
    let mut field = |key: &str| -> Result<String> {
        let line = lines
            .next()
            .ok_or_else(|| corrupt(format!("missing `{key}`")))?;
        line.strip_prefix(key)
            .and_then(|r| {
                r.strip_prefix(' ')
                    .or(if r.is_empty() { Some("") } else { None })
            })
            .map(str::to_string)
            .ok_or_else(|| corrupt(format!("expected `{key}`, found `{line}`")))
    };
    let hash = field("config_hash")?;
    let run = field("run")?;
    let blob = field("blob")?;
    let count = field("tensors")?;
    let b: Vec<&str> = blob.split(' ').collect();
    if b.len() != 3 || b[0] != BLOB {
        return Err(corrupt(format!("bad blob line `{blob}`")));
    }
    let blob_len = b[1].parse().map_err(|_| corrupt("bad blob length"))?;
    let count: usize = count.parse().map_err(|_| corrupt("bad tensor count"))?;
    let mut entries = Vec::with_capacity(count);
    for line in lines.by_ref().take(count) {
        let f: Vec<&str> = line.split(' ').collect();
        if f.len() != 5 || f[0] != "tensor" || f[3] != "f64le" {
            return Err(corrupt(format!("bad tensor line `{line}`")));
        }
        let shape = f[2]
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| corrupt(format!("bad shape in `{line}`")))?;
        let offset = f[4]
            .parse()
            .map_err(|_| corrupt(format!("bad offset in `{line}`")))?;
        entries.push(Entry {
            name: f[1].to_string(),
            shape,
            offset,
        });
    }
    if entries.len() != count || lines.next().is_some() {
        return Err(corrupt("tensor count does not match manifest body"));
    }
    Ok((hash, run, blob_len, b[2].to_string(), entries))
}

/// Checks names and shapes against the model's parameter layout.
fn check_layout(
    model: &MyGoModel,
    found: impl Iterator<Item = (String, Vec<usize>)>,
) -> Result<()> {
    let expected = model.layout();
    let found: Vec<_> = found.collect();
    for ((en, es), (fname, fs)) in expected.iter().zip(&found) {
        if en != fname {
            return Err(corrupt(format!("expected tensor `{en}`, found `{fname}`")));
        }
        if es != fs {
            return Err(Error::ParamShape {
                name: en.clone(),
                expected: es.clone(),
                found: fs.clone(),
            });
        }
    }
    if expected.len() != found.len() {
        return Err(corrupt(format!(
            "model has {} tensors, checkpoint has {}",
            expected.len(),
            found.len()
        )));
    }
    Ok(())
}

fn read_params(dir: &Path, model: &MyGoModel) -> Result<(ParamStore, String, String)> {
    let text = fs::read_to_string(dir.join("manifest.txt"))?;
    let (hash, run, blob_len, blob_hash, entries) = parse_manifest(&text)?;
    check_layout(
        model,
        entries.iter().map(|e| (e.name.clone(), e.shape.clone())),
    )?;
    let blob = fs::read(dir.join(BLOB))?;
    if blob.len() != blob_len || hash_hex(&blob) != blob_hash {
        return Err(corrupt("parameter blob does not match manifest"));
    }
    let mut store = ParamStore::new();
    let mut expect_offset = 0;
    for e in entries {
        let n: usize = e.shape.iter().product();
        if e.offset != expect_offset || e.offset + 8 * n > blob.len() {
            return Err(corrupt(format!("bad offset for `{}`", e.name)));
        }
        let data = blob[e.offset..e.offset + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.insert(e.name, Tensor::new(e.shape, data)?)?;
        expect_offset += 8 * n;
    }
    if expect_offset != blob.len() {
        return Err(corrupt("trailing bytes in parameter blob"));
    }
    Ok((store, run, hash))
}

/// Loads a checkpoint, rebuilding the model from its stored configuration.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let cfg_text = fs::read_to_string(dir.join("config.toml"))?;
    let config: ModelConfig =
        toml::from_str(&cfg_text).map_err(|e| corrupt(format!("config.toml: {e}")))?;
    let model = MyGoModel::new(config)?;
    let (params, run, config_hash_stored) = read_params(dir, &model)?;
    if config_hash(&config, &run) != config_hash_stored {
        return Err(corrupt("config hash does not match config.toml"));
    }
    Ok(Checkpoint {
        model,
        params,
        run,
        config_hash: config_hash_stored,
    })
}

/// Loads parameters for an existing `model`; names and shapes must match.
pub fn load_params_for(dir: &Path, model: &MyGoModel) -> Result<ParamStore> {
    Ok(read_params(dir, model)?.0)
}
