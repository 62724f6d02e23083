//! Single-file checkpoints.
//!
//! Layout: `SCRPTCKP` magic, format version (u32 LE), header length (u64 LE),
//! JSON header, the concatenated f32 LE tensor data in header order, and a
//! SHA-256 digest of everything before it. Writes go to a temporary sibling
//! and are renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ctc::Alphabet;
use crate::nets::{BundleConfig, ModelBundle, NamedArray, ROLES};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SCRPTCKP";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub bundle: BundleConfig,
    pub alphabet: Alphabet,
    pub step: u64,
    pub epoch: u64,
    pub seed: u64,
    /// Free-form integer state, such as optimizer step counts.
    #[serde(default)]
    pub counters: BTreeMap<String, Vec<u64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header<M> {
    meta: M,
    entries: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    /// Captures every parameter and buffer of `bundle`.
    pub fn from_bundle(bundle: &ModelBundle, step: u64, epoch: u64, seed: u64) -> Result<Self> {
        let mut ck = Checkpoint {
            meta: CheckpointMeta {
                bundle: bundle.config,
                alphabet: bundle.alphabet.clone(),
                step,
                epoch,
                seed,
                counters: BTreeMap::new(),
            },
            arrays: Vec::new(),
        };
        for (role, (params, buffers)) in bundle.export()? {
            ck.push(&format!("{role}/param"), params);
            ck.push(&format!("{role}/buffer"), buffers);
        }
        Ok(ck)
    }

    /// Adds arrays under `prefix/`.
    pub fn push(&mut self, prefix: &str, arrays: Vec<NamedArray>) {
        self.arrays.extend(arrays.into_iter().map(|a| NamedArray {
            name: format!("{prefix}/{}", a.name),
            ..a
        }));
    }

    /// Arrays stored under `prefix/`, with the prefix removed.
    pub fn take(&self, prefix: &str) -> Vec<NamedArray> {
        let p = format!("{prefix}/");
        self.arrays
            .iter()
            .filter_map(|a| {
                a.name.strip_prefix(&p).map(|rest| NamedArray {
                    name: rest.to_string(),
                    ..a.clone()
                })
            })
            .collect()
    }

    /// Rebuilds the bundle the checkpoint was taken from.
    pub fn to_bundle(&self) -> Result<ModelBundle> {
        let bundle = ModelBundle::new(self.meta.bundle, self.meta.alphabet.clone(), 0)?;
        self.restore_into(&bundle)?;
        Ok(bundle)
    }

    /// Overwrites the parameters of a bundle with matching architecture.
    pub fn restore_into(&self, bundle: &ModelBundle) -> Result<()> {
        if bundle.config != self.meta.bundle || bundle.alphabet != self.meta.alphabet {
            return Err(Error::InvalidArgument(
                "checkpoint architecture or alphabet differs from the target bundle".into(),
            ));
        }
        let state = ROLES
            .iter()
            .map(|&r| (r.to_string(), (self.take(&format!("{r}/param")), self.take(&format!("{r}/buffer")))))
            .collect();
        bundle.import(&state)
    }

    /// Atomically writes the checkpoint to `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_container(path.as_ref(), &self.meta, &self.arrays)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (meta, arrays) = read_container(path.as_ref())?;
        Ok(Checkpoint { meta, arrays })
    }
}

fn encode<M: Serialize>(meta: &M, arrays: &[NamedArray]) -> Result<Vec<u8>> {
    let header = Header {
        meta,
        entries: arrays
            .iter()
            .map(|a| Entry {
                name: a.name.clone(),
                shape: a.shape.clone(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let blob_len: usize = arrays.iter().map(|a| a.data.len() * 4).sum();
    let mut out = Vec::with_capacity(20 + header.len() + blob_len + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for a in arrays {
        for v in &a.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Writes `meta` and `arrays` in the checkpoint container format, atomically.
pub(crate) fn write_container<M: Serialize>(path: &Path, meta: &M, arrays: &[NamedArray]) -> Result<()> {
    let bytes = encode(meta, arrays)?;
    let tmp = tmp_path(path);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub(crate) fn read_container<M: DeserializeOwned>(path: &Path) -> Result<(M, Vec<NamedArray>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::checkpoint(path, reason);
    if bytes.len() < 20 + DIGEST_LEN || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::checkpoint(
            path,
            format!("format version {version} is not supported (expected {VERSION})"),
        ));
    }
    let body_len = bytes.len() - DIGEST_LEN;
    let stored = &bytes[body_len..];
    if Sha256::digest(&bytes[..body_len]).as_slice() != stored {
        return Err(bad("digest mismatch: file is corrupted or truncated"));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= body_len)
        .ok_or_else(|| bad("header length out of range"))?;
    let header: Header<M> = serde_json::from_slice(&bytes[20..header_end])
        .map_err(|e| Error::checkpoint(path, format!("unreadable header: {e}")))?;
    let mut offset = header_end;
    let mut arrays = Vec::with_capacity(header.entries.len());
    for e in header.entries {
        let n: usize = e.shape.iter().product();
        let end = offset + 4 * n;
        if end > body_len {
            return Err(bad("tensor data shorter than the header declares"));
        }
        let data = bytes[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        arrays.push(NamedArray {
            name: e.name,
            shape: e.shape,
            data,
        });
        offset = end;
    }
    if offset != body_len {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok((header.meta, arrays))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

/// The digest stored in a checkpoint file and one recomputed from its body.
pub fn digests(path: impl AsRef<Path>) -> Result<(Vec<u8>, Vec<u8>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < DIGEST_LEN {
        return Err(Error::checkpoint(path, "file too short"));
    }
    let body = bytes.len() - DIGEST_LEN;
    Ok((bytes[body..].to_vec(), Sha256::digest(&bytes[..body]).to_vec()))
}

pub fn save_checkpoint(bundle: &ModelBundle, step: u64, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_bundle(bundle, step, 0, 0)?.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelBundle> {
    Checkpoint::load(path)?.to_bundle()
}
