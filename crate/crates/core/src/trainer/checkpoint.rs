//! Checkpoint directories: `step_<N>/params` (tensor archive) and
//! `step_<N>/meta` (plain `key=value` text).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use hps_autograd::{ParamStore, Tensor};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::objectives::OimTable;

const MAGIC: &[u8; 6] = b"HPSA1\n";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("checkpoint {path}: params hash mismatch (meta says {expected}, file hashes to {actual})")]
    ParamsHashMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("checkpoint {path}: config hash mismatch (checkpoint {found}, run {expected})")]
    ConfigHashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("checkpoint is missing parameter {0:?}")]
    MissingParam(String),
    #[error("parameter {name:?} has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: BTreeMap<String, Tensor>,
    pub velocity: BTreeMap<String, Tensor>,
    pub oim: Option<OimTable>,
    pub global_step: u64,
    pub config_hash: String,
    pub id_space_size: usize,
}

impl Checkpoint {
    /// Snapshot of a store and its momentum buffers (indexed like the store).
    pub fn capture(
        store: &ParamStore,
        velocity: &[Option<Tensor>],
        oim: Option<&OimTable>,
        global_step: u64,
        config_hash: &str,
    ) -> Self {
        let mut params = BTreeMap::new();
        let mut vel = BTreeMap::new();
        for (id, name, t) in store.iter() {
            params.insert(name.to_string(), t.clone());
            if let Some(Some(v)) = velocity.get(id.index()) {
                vel.insert(name.to_string(), v.clone());
            }
        }
        Self {
            params,
            velocity: vel,
            oim: oim.cloned(),
            global_step,
            config_hash: config_hash.to_string(),
            id_space_size: oim.map_or(0, OimTable::len),
        }
    }

    /// Copy parameters whose names start with one of `prefixes` into
    /// `store`. Every matching store parameter must be present.
    pub fn restore_params(&self, store: &mut ParamStore, prefixes: &[&str]) -> Result<usize, CheckpointError> {
        let ids: Vec<_> = store.ids().collect();
        let mut n = 0;
        for id in ids {
            let name = store.name(id).to_string();
            if !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            let t = self
                .params
                .get(&name)
                .ok_or_else(|| CheckpointError::MissingParam(name.clone()))?;
            if t.shape() != store.get(id).shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected: store.get(id).shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            *store.get_mut(id) = t.clone();
            n += 1;
        }
        Ok(n)
    }

    /// Momentum buffers laid out for `store`.
    pub fn velocity_for(&self, store: &ParamStore) -> Vec<Option<Tensor>> {
        store
            .iter()
            .map(|(_, name, _)| self.velocity.get(name).cloned())
            .collect()
    }

    fn archive(&self) -> Vec<u8> {
        let mut entries: Vec<(String, &Tensor)> = Vec::new();
        for (k, v) in &self.params {
            entries.push((format!("param/{k}"), v));
        }
        for (k, v) in &self.velocity {
            entries.push((format!("velocity/{k}"), v));
        }
        if let Some(o) = &self.oim {
            entries.push(("oim/prototypes".into(), o.prototypes()));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
        for (name, t) in entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Write `dir/step_<N>` atomically (temp directory, then rename).
    pub fn save(&self, dir: &Path) -> Result<PathBuf, CheckpointError> {
        fs::create_dir_all(dir).map_err(io(dir))?;
        let final_dir = dir.join(format!("step_{}", self.global_step));
        let tmp = dir.join(format!(".step_{}.tmp", self.global_step));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(io(&tmp))?;
        }
        fs::create_dir_all(&tmp).map_err(io(&tmp))?;
        let bytes = self.archive();
        let digest = hex::encode(Sha256::digest(&bytes));
        let params_path = tmp.join("params");
        fs::write(&params_path, &bytes).map_err(io(&params_path))?;
        let mut meta = format!(
            "config_hash={}\nglobal_step={}\nid_space_size={}\nparams_sha256={}\n",
            self.config_hash, self.global_step, self.id_space_size, digest
        );
        if let Some(o) = &self.oim {
            meta.push_str(&format!(
                "oim_momentum={:?}\noim_temperature={:?}\n",
                o.momentum, o.temperature
            ));
        }
        let meta_path = tmp.join("meta");
        fs::write(&meta_path, meta).map_err(io(&meta_path))?;
        if final_dir.exists() {
            fs::remove_dir_all(&final_dir).map_err(io(&final_dir))?;
        }
        fs::rename(&tmp, &final_dir).map_err(io(&final_dir))?;
        Ok(final_dir)
    }

    /// Load and verify a checkpoint directory. With `expected_config`
    /// given, the stored config hash must match it.
    pub fn load(path: &Path, expected_config: Option<&str>) -> Result<Self, CheckpointError> {
        let corrupt = |message: String| CheckpointError::Corrupt {
            path: path.to_path_buf(),
            message,
        };
        let meta_path = path.join("meta");
        let meta_text = fs::read_to_string(&meta_path).map_err(io(&meta_path))?;
        let meta: BTreeMap<&str, &str> = meta_text
            .lines()
            .filter_map(|l| l.split_once('='))
            .collect();
        let get = |k: &str| {
            meta.get(k)
                .copied()
                .ok_or_else(|| corrupt(format!("meta lacks {k}")))
        };
        let params_path = path.join("params");
        let bytes = fs::read(&params_path).map_err(io(&params_path))?;
        let actual = hex::encode(Sha256::digest(&bytes));
        let expected = get("params_sha256")?;
        if actual != expected {
            return Err(CheckpointError::ParamsHashMismatch {
                path: path.to_path_buf(),
                expected: expected.to_string(),
                actual,
            });
        }
        let config_hash = get("config_hash")?.to_string();
        if let Some(e) = expected_config {
            if e != config_hash {
                return Err(CheckpointError::ConfigHashMismatch {
                    path: path.to_path_buf(),
                    expected: e.to_string(),
                    found: config_hash,
                });
            }
        }
        let global_step = get("global_step")?
            .parse()
            .map_err(|e| corrupt(format!("global_step: {e}")))?;
        let id_space_size = get("id_space_size")?
            .parse()
            .map_err(|e| corrupt(format!("id_space_size: {e}")))?;
        let entries = parse_archive(&bytes).map_err(corrupt)?;
        let mut params = BTreeMap::new();
        let mut velocity = BTreeMap::new();
        let mut oim = None;
        for (name, t) in entries {
            if let Some(n) = name.strip_prefix("param/") {
                params.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix("velocity/") {
                velocity.insert(n.to_string(), t);
            } else if name == "oim/prototypes" {
                let momentum: f64 = get("oim_momentum")?
                    .parse()
                    .map_err(|e| corrupt(format!("oim_momentum: {e}")))?;
                let temperature: f64 = get("oim_temperature")?
                    .parse()
                    .map_err(|e| corrupt(format!("oim_temperature: {e}")))?;
                let mut table = OimTable::from_rows(&[], momentum, temperature);
                table.set_prototypes(t);
                oim = Some(table);
            } else {
                return Err(corrupt(format!("unknown archive entry {name:?}")));
            }
        }
        Ok(Self {
            params,
            velocity,
            oim,
            global_step,
            config_hash,
            id_space_size,
        })
    }
}

fn parse_archive(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, String> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], String> {
        let s = bytes.get(pos..pos + n).ok_or("truncated archive")?;
        pos += n;
        Ok(s)
    };
    if take(MAGIC.len())? != MAGIC {
        return Err("bad magic".into());
    }
    let u64_of = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));
    let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    let count = u64_of(take(8)?);
    let mut out = Vec::new();
    for _ in 0..count {
        let len = u32_of(take(4)?) as usize;
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|e| e.to_string())?;
        let ndim = u32_of(take(4)?) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64_of(take(8)?) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(&shape, data).map_err(|e| e.to_string())?));
    }
    Ok(out)
}

/// The highest `step_<N>` directory under `dir`.
pub fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let entries = fs::read_dir(dir).ok()?;
    entries
        .filter_map(Result::ok)
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let n: u64 = name.strip_prefix("step_")?.parse().ok()?;
            e.path().join("meta").is_file().then_some((n, e.path()))
        })
        .max_by_key(|(n, _)| *n)
        .map(|(_, p)| p)
}
