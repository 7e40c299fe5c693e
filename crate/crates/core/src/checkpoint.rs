//! Binary container for checkpoints and datasets.
//!
//! Layout:
//!
//! ```text
//! b"LARGOCK1"                 8-byte magic
//! u64 little-endian           manifest length in bytes
//! manifest                    pretty-printed JSON (see [`Manifest`])
//! payload                     raw little-endian f64 arrays
//! ```
//!
//! Entry offsets and lengths in the manifest are in bytes, relative to the
//! start of the payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::networks::{hex, Model};
use crate::params::ParamStore;
use crate::tensor::DenseTensor;

pub const MAGIC: &[u8; 8] = b"LARGOCK1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub path: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// `"checkpoint"` or `"dataset"`.
    pub kind: String,
    pub spec_hash: String,
    #[serde(default)]
    pub epoch: Option<usize>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    /// The spec the payload was produced from.
    #[serde(default)]
    pub spec: serde_json::Value,
    pub entries: Vec<Entry>,
}

pub fn write_container<'a>(
    path: &Path,
    mut manifest: Manifest,
    tensors: impl IntoIterator<Item = (&'a str, &'a DenseTensor)>,
) -> Result<()> {
    let mut payload = Vec::new();
    manifest.entries.clear();
    for (name, t) in tensors {
        let offset = payload.len() as u64;
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        manifest.entries.push(Entry {
            path: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: payload.len() as u64 - offset,
        });
    }
    let json = serde_json::to_vec_pretty(&manifest)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(json.len() as u64).to_le_bytes())?;
    f.write_all(&json)?;
    f.write_all(&payload)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<(Manifest, BTreeMap<String, DenseTensor>)> {
    let bytes = fs::read(path)?;
    parse_container(&bytes)
}

pub fn parse_container(bytes: &[u8]) -> Result<(Manifest, BTreeMap<String, DenseTensor>)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a container (bad magic or too short)".into()));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let start = 16usize
        .checked_add(mlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("manifest runs past end of file".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..start])
        .map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let payload = &bytes[start..];
    let mut tensors = BTreeMap::new();
    for e in &manifest.entries {
        let (off, len) = (e.offset as usize, e.len as usize);
        let n: usize = e.shape.iter().product();
        if len != n * 8 || off.checked_add(len).is_none_or(|end| end > payload.len()) {
            return Err(Error::Format(format!("entry {} is truncated or inconsistent", e.path)));
        }
        let data = payload[off..off + len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(e.path.clone(), DenseTensor::new(e.shape.clone(), data)?);
    }
    Ok((manifest, tensors))
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    store: &ParamStore,
    epoch: Option<usize>,
    metrics: BTreeMap<String, f64>,
) -> Result<()> {
    let manifest = Manifest {
        kind: "checkpoint".into(),
        spec_hash: model.hash(),
        epoch,
        metrics,
        spec: serde_json::json!({ "kind": model.kind, "network": model.spec }),
        entries: vec![],
    };
    write_container(path, manifest, store.iter())
}

/// Loads parameters for `model`, rejecting files written for another layout.
pub fn load_checkpoint(path: &Path, model: &Model) -> Result<(ParamStore, Manifest)> {
    let (manifest, tensors) = read_container(path)?;
    if manifest.kind != "checkpoint" {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{} holds a {}, not a checkpoint",
            path.display(),
            manifest.kind
        )));
    }
    if manifest.spec_hash != model.hash() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "spec hash {} does not match the model's {}",
            manifest.spec_hash,
            model.hash()
        )));
    }
    let mut store = ParamStore::new();
    let infos = model.param_infos();
    if infos.len() != tensors.len() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint has {} tensors, model declares {}",
            tensors.len(),
            infos.len()
        )));
    }
    for info in infos {
        let t = tensors.get(&info.path).ok_or_else(|| {
            Error::IncompatibleCheckpoint(format!("missing tensor {}", info.path))
        })?;
        if t.shape() != info.shape.as_slice() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{}: shape {:?}, model expects {:?}",
                info.path,
                t.shape(),
                info.shape
            )));
        }
        store.insert(&info.path, t.clone())?;
    }
    Ok((store, manifest))
}

fn dataset_hash(spec: &DatasetSpec) -> String {
    let json = serde_json::to_string(spec).expect("dataset spec serializes");
    hex(&Sha256::digest(json.as_bytes()))
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let targets = DenseTensor::new(
        vec![data.targets.len()],
        data.targets.iter().map(|&t| t as f64).collect(),
    )?;
    let names: Vec<String> = (0..data.modalities.len()).map(|n| format!("modality{n}")).collect();
    let mut entries: Vec<(&str, &DenseTensor)> = names
        .iter()
        .map(String::as_str)
        .zip(&data.modalities)
        .collect();
    entries.push(("targets", &targets));
    let manifest = Manifest {
        kind: "dataset".into(),
        spec_hash: dataset_hash(&data.spec),
        epoch: None,
        metrics: BTreeMap::new(),
        spec: serde_json::to_value(&data.spec)?,
        entries: vec![],
    };
    write_container(path, manifest, entries)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (manifest, mut tensors) = read_container(path)?;
    if manifest.kind != "dataset" {
        return Err(Error::Format(format!("{} is not a dataset", path.display())));
    }
    let spec: DatasetSpec = serde_json::from_value(manifest.spec.clone())
        .map_err(|e| Error::Format(format!("dataset spec: {e}")))?;
    if dataset_hash(&spec) != manifest.spec_hash {
        return Err(Error::Format("dataset spec hash mismatch".into()));
    }
    let mut modalities = Vec::new();
    for n in 0..spec.n_modalities {
        modalities.push(
            tensors
                .remove(&format!("modality{n}"))
                .ok_or_else(|| Error::Format(format!("missing modality{n}")))?,
        );
    }
    let targets = tensors
        .remove("targets")
        .ok_or_else(|| Error::Format("missing targets".into()))?
        .into_data()
        .into_iter()
        .map(|v| v as usize)
        .collect();
    Ok(Dataset {
        spec,
        modalities,
        targets,
    })
}

/// Appends one JSON record per line.
pub fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    f.write_all(&line)?;
    Ok(())
}
