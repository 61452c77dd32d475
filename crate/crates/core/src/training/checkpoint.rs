//! Checkpoint directories: `manifest.txt`, `weights.bin` and `config.txt`.
//!
//! Each manifest line reads `name d1,d2,… dtype=f64 byte_offset`; the
//! weights are little-endian `f64` concatenated in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::model::ModelParams;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint config: {0}")]
    Config(#[from] ConfigError),
    #[error("configuration does not match the checkpoint: {0}")]
    Mismatch(String),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config: RunConfig,
}

impl Checkpoint {
    /// Fails unless `requested` agrees with the stored configuration on
    /// every key.
    pub fn ensure_matches(&self, requested: &RunConfig) -> Result<(), CheckpointError> {
        let keys = self.config.differing_keys(requested);
        if keys.is_empty() {
            return Ok(());
        }
        let detail: Vec<String> = keys
            .iter()
            .map(|k| {
                format!(
                    "{k} is {} in the checkpoint but {} was requested",
                    self.config.get(k).unwrap_or_default(),
                    requested.get(k).unwrap_or_default()
                )
            })
            .collect();
        Err(CheckpointError::Mismatch(detail.join("; ")))
    }
}

fn shape_text(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "-".into();
    }
    shape
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// Writes `params` and `config` under `dir`, creating it if needed.
pub fn save_checkpoint(
    params: &ModelParams,
    config: &RunConfig,
    dir: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    if config.model != params.config {
        return Err(CheckpointError::Mismatch(
            "architecture in the run configuration differs from the parameters".into(),
        ));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut manifest = String::new();
    let mut weights = Vec::with_capacity(params.count() * 8);
    for (name, t) in params.named() {
        manifest.push_str(&format!(
            "{name} {} dtype=f64 {}\n",
            shape_text(t.shape()),
            weights.len()
        ));
        for v in t.data() {
            weights.extend_from_slice(&v.to_le_bytes());
        }
    }
    let write = |file: &str, bytes: &[u8]| {
        let path = dir.join(file);
        fs::write(&path, bytes).map_err(io(&path))
    };
    write(MANIFEST_FILE, manifest.as_bytes())?;
    write(WEIGHTS_FILE, &weights)?;
    write(CONFIG_FILE, config.to_text().as_bytes())
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

fn parse_manifest(text: &str) -> Result<Vec<Entry>, CheckpointError> {
    let corrupt = |line: usize, m: &str| {
        CheckpointError::Corrupt(format!("{MANIFEST_FILE} line {line}: {m}"))
    };
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, shape, dtype, offset] = fields[..] else {
            return Err(corrupt(n, "expected `name shape dtype=f64 offset`"));
        };
        if dtype != "dtype=f64" {
            return Err(corrupt(n, &format!("unsupported {dtype}")));
        }
        let shape = if shape == "-" {
            Vec::new()
        } else {
            shape
                .split(',')
                .map(str::parse)
                .collect::<Result<Vec<usize>, _>>()
                .map_err(|_| corrupt(n, &format!("bad shape {shape:?}")))?
        };
        let offset = offset
            .parse()
            .map_err(|_| corrupt(n, &format!("bad offset {offset:?}")))?;
        entries.push(Entry {
            name: name.to_string(),
            shape,
            offset,
        });
    }
    Ok(entries)
}

/// Reads a checkpoint written by [`save_checkpoint`], verifying that the
/// manifest, the weight bytes and the configured architecture agree.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let dir = dir.as_ref();
    let read = |file: &str| {
        let path = dir.join(file);
        fs::read(&path).map_err(io(&path))
    };
    let config_bytes = read(CONFIG_FILE)?;
    let manifest = read(MANIFEST_FILE)?;
    let weights = read(WEIGHTS_FILE)?;

    let config_text = String::from_utf8(config_bytes)
        .map_err(|_| CheckpointError::Corrupt(format!("{CONFIG_FILE} is not UTF-8")))?;
    let config = RunConfig::parse(&config_text)?;
    let manifest = String::from_utf8(manifest)
        .map_err(|_| CheckpointError::Corrupt(format!("{MANIFEST_FILE} is not UTF-8")))?;

    let mut named = Vec::new();
    let mut expected_offset = 0;
    for entry in parse_manifest(&manifest)? {
        if entry.offset != expected_offset {
            return Err(CheckpointError::Corrupt(format!(
                "{}: offset {} but previous arrays end at {expected_offset}",
                entry.name, entry.offset
            )));
        }
        let len: usize = entry.shape.iter().product();
        let end = entry.offset + 8 * len;
        if end > weights.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{WEIGHTS_FILE} holds {} bytes, {} needs bytes up to {end}",
                weights.len(),
                entry.name
            )));
        }
        let data = weights[entry.offset..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(entry.shape, data)
            .map_err(|e| CheckpointError::Corrupt(format!("{}: {e}", entry.name)))?;
        named.push((entry.name, t));
        expected_offset = end;
    }
    if expected_offset != weights.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{WEIGHTS_FILE} holds {} bytes, manifest accounts for {expected_offset}",
            weights.len()
        )));
    }
    let params = ModelParams::from_named(config.model, named)
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    Ok(Checkpoint { params, config })
}
