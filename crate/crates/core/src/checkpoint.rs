//! Checkpoint directories: one raw little-endian file plus JSON sidecar per
//! parameter, and a manifest naming every file and the network config.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, NetworkConfig};
use crate::params::{Param, ParamStore};
use crate::Scalar;

pub const MANIFEST: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSidecar {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub epoch: usize,
    pub network: NetworkConfig,
    pub params: Vec<ManifestEntry>,
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Writes every parameter of `store` under `dir` (created if absent).
pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    cfg: &NetworkConfig,
    store: &ParamStore<T>,
    epoch: usize,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(store.len());
    for (name, p) in store.iter() {
        let file = format!("{name}.bin");
        let mut bytes = Vec::with_capacity(p.value.len() * T::BYTES);
        for &v in &p.value {
            v.write_le(&mut bytes);
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        write_json(
            &dir.join(format!("{name}.json")),
            &TensorSidecar {
                shape: p.shape.clone(),
                dtype: T::DTYPE.to_string(),
                name: name.clone(),
            },
        )?;
        entries.push(ManifestEntry {
            name: name.clone(),
            file,
            shape: p.shape.clone(),
            trainable: p.trainable,
        });
    }
    write_json(
        &dir.join(MANIFEST),
        &Manifest {
            format_version: FORMAT_VERSION,
            seed: store.seed(),
            epoch,
            network: cfg.clone(),
            params: entries,
        },
    )
}

fn read_values<T: Scalar>(path: &Path, dtype: &str, count: usize) -> Result<Vec<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let width = match dtype {
        "f32le" => 4,
        "f64le" => 8,
        other => {
            return Err(Error::Manifest(format!(
                "{}: unsupported dtype {other:?}",
                path.display()
            )))
        }
    };
    if bytes.len() != count * width {
        return Err(Error::PayloadLength {
            path: path.to_path_buf(),
            expected: count * width,
            found: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(width)
        .map(|c| {
            if width == 4 {
                T::cast(f32::read_le(c) as f64)
            } else {
                T::cast(f64::read_le(c))
            }
        })
        .collect())
}

/// Loads a checkpoint, rebuilding the network from its manifest. When
/// `expected` is given it must equal the stored network config.
pub fn load_checkpoint<T: Scalar>(
    dir: &Path,
    expected: Option<&NetworkConfig>,
) -> Result<(Network, ParamStore<T>, Manifest)> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Manifest(format!(
            "unsupported checkpoint format {}",
            manifest.format_version
        )));
    }
    if let Some(cfg) = expected {
        if *cfg != manifest.network {
            return Err(Error::Manifest(
                "checkpoint was written for a different network config".into(),
            ));
        }
    }
    let (net, mut store) = Network::build::<T>(&manifest.network, manifest.seed)?;
    if store.len() != manifest.params.len() {
        return Err(Error::Manifest(format!(
            "manifest lists {} parameters, network has {}",
            manifest.params.len(),
            store.len()
        )));
    }
    for e in &manifest.params {
        let slot = store
            .get(&e.name)
            .map_err(|_| Error::Manifest(format!("unexpected parameter {:?}", e.name)))?;
        if slot.shape != e.shape {
            return Err(Error::Manifest(format!(
                "parameter {:?} has shape {:?}, network expects {:?}",
                e.name, e.shape, slot.shape
            )));
        }
        let side: TensorSidecar = read_json(&dir.join(format!("{}.json", e.name)))?;
        if side.shape != e.shape || side.name != e.name {
            return Err(Error::Manifest(format!(
                "sidecar of {:?} disagrees with manifest",
                e.name
            )));
        }
        let path: PathBuf = dir.join(&e.file);
        let value = read_values::<T>(&path, &side.dtype, e.shape.iter().product())?;
        store.insert(
            &e.name,
            Param {
                shape: e.shape.clone(),
                value,
                trainable: e.trainable,
            },
        );
    }
    Ok((net, store, manifest))
}
