//! Single-file checkpoints: one line of JSON manifest followed by the
//! parameter tensors as concatenated CTF records in manifest order.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Group, ModelBundle, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{read_ctf_from, write_ctf_to};

const FORMAT: &str = "c2vae-checkpoint-1";

/// A model plus the training provenance stored alongside it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelBundle,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: u64,
    /// `key=value` echo of the training configuration.
    pub config: Vec<(String, String)>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    model: ModelConfig,
    step: u64,
    config_hash: String,
    config: Vec<(String, String)>,
    tensors: Vec<TensorEntry>,
}

/// Hex SHA-256 of the `key=value` lines of a config echo.
pub fn config_hash(config: &[(String, String)]) -> String {
    let mut h = Sha256::new();
    for (k, v) in config {
        h.update(format!("{k}={v}\n").as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes atomically (temporary file, then rename).
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let model = &ckpt.model;
    let mut tensors = Vec::new();
    let mut entries = Vec::new();
    for g in Group::ALL {
        for (name, t) in model.group_names(g).into_iter().zip(model.group(g)) {
            entries.push(TensorEntry { name, shape: t.shape().to_vec() });
            tensors.push(t);
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        model: model.config.clone(),
        step: ckpt.step,
        config_hash: config_hash(&ckpt.config),
        config: ckpt.config.clone(),
        tensors: entries,
    };
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        serde_json::to_writer(&mut w, &manifest).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
        for t in tensors {
            write_ctf_to(&mut w, t)?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    let manifest: Manifest =
        serde_json::from_slice(&line).map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(Error::Format(format!("unknown checkpoint format {:?}", manifest.format)));
    }
    if config_hash(&manifest.config) != manifest.config_hash {
        return Err(Error::Format("checkpoint config hash mismatch".into()));
    }
    let mut model = ModelBundle::init(manifest.model.clone(), 0)?;
    let mut entries = manifest.tensors.iter();
    for g in Group::ALL {
        let names = model.group_names(g);
        for (name, slot) in names.into_iter().zip(model.group_mut(g)) {
            let entry = entries.next().ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
            if entry.name != name || entry.shape != slot.shape() {
                return Err(Error::Format(format!(
                    "checkpoint entry {} {:?} does not match {name} {:?}",
                    entry.name,
                    entry.shape,
                    slot.shape()
                )));
            }
            let t = read_ctf_from(&mut r)?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!("tensor {name} has shape {:?}", t.shape())));
            }
            *slot = t;
        }
    }
    if entries.next().is_some() {
        return Err(Error::Format("checkpoint lists extra tensors".into()));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint tensors", rest.len())));
    }
    Ok(Checkpoint { model, step: manifest.step, config: manifest.config })
}
