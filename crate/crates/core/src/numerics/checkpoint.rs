//! Parameter checkpoints: a JSON manifest plus one little-endian f64 blob.
//!
//! Every parameter contributes its value and its optimizer moments
//! (`name@adam_m`, `name@adam_v`, `name@adam_t`). Each entry carries a CRC32
//! of its bytes so corruption is reported against the parameter it hits.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{Moments, ParamStore};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    pub crc32: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: BTreeMap<String, Entry>,
    /// Free-form run state (step counters, RNG labels) stored alongside.
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

fn push(blob: &mut Vec<u8>, manifest: &mut Manifest, name: String, shape: Vec<usize>, data: &[f64]) {
    let offset = blob.len();
    for x in data {
        blob.extend_from_slice(&x.to_le_bytes());
    }
    let crc32 = crc32fast::hash(&blob[offset..]);
    manifest.entries.insert(
        name,
        Entry {
            shape,
            offset,
            crc32,
        },
    );
}

/// Serializes stores into `(manifest json, blob)`.
pub fn to_bytes(stores: &[&ParamStore], meta: &BTreeMap<String, String>) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut manifest = Manifest {
        meta: meta.clone(),
        ..Manifest::default()
    };
    let mut blob = Vec::new();
    for store in stores {
        for id in store.ids() {
            let name = store.name(id).to_string();
            if manifest.entries.contains_key(&name) {
                return Err(Error::DuplicateParameter(name));
            }
            let v = store.value(id);
            let m = store.moments(id);
            push(&mut blob, &mut manifest, format!("{name}@adam_m"), v.shape().to_vec(), &m.m);
            push(&mut blob, &mut manifest, format!("{name}@adam_t"), vec![1], &[m.step as f64]);
            push(&mut blob, &mut manifest, format!("{name}@adam_v"), v.shape().to_vec(), &m.v);
            push(&mut blob, &mut manifest, name, v.shape().to_vec(), v.data());
        }
    }
    let json = serde_json::to_vec_pretty(&manifest)?;
    Ok((json, blob))
}

fn read(manifest: &Manifest, blob: &[u8], name: &str, shape: &[usize]) -> Result<Vec<f64>> {
    let err = |reason: String| Error::Checkpoint {
        name: name.to_string(),
        reason,
    };
    let e = manifest
        .entries
        .get(name)
        .ok_or_else(|| err("missing from manifest".into()))?;
    if e.shape != shape {
        return Err(err(format!("shape {:?} in manifest, expected {shape:?}", e.shape)));
    }
    let n: usize = shape.iter().product();
    let end = e.offset + 8 * n;
    let bytes = blob
        .get(e.offset..end)
        .ok_or_else(|| err(format!("blob too short: need bytes {}..{end}", e.offset)))?;
    if crc32fast::hash(bytes) != e.crc32 {
        return Err(err("checksum mismatch".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Restores values and moments into stores whose layout already matches.
/// Nothing is written unless every parameter validates.
pub fn from_bytes(stores: &mut [&mut ParamStore], manifest_json: &[u8], blob: &[u8]) -> Result<Manifest> {
    let manifest: Manifest = serde_json::from_slice(manifest_json)?;
    let mut staged = Vec::new();
    for (si, store) in stores.iter().enumerate() {
        for id in store.ids() {
            let name = store.name(id);
            let shape = store.value(id).shape().to_vec();
            let value = read(&manifest, blob, name, &shape)?;
            let m = read(&manifest, blob, &format!("{name}@adam_m"), &shape)?;
            let v = read(&manifest, blob, &format!("{name}@adam_v"), &shape)?;
            let t = read(&manifest, blob, &format!("{name}@adam_t"), &[1])?[0];
            staged.push((si, id, value, Moments { m, v, step: t as u64 }));
        }
    }
    for (si, id, value, moments) in staged {
        stores[si].value_mut(id).data_mut().copy_from_slice(&value);
        stores[si].set_moments(id, moments);
    }
    Ok(manifest)
}

pub fn save(dir: &Path, stores: &[&ParamStore], meta: &BTreeMap<String, String>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (json, blob) = to_bytes(stores, meta)?;
    fs::write(dir.join(MANIFEST_FILE), json)?;
    fs::write(dir.join(BLOB_FILE), blob)?;
    Ok(())
}

pub fn load(dir: &Path, stores: &mut [&mut ParamStore]) -> Result<Manifest> {
    let json = fs::read(dir.join(MANIFEST_FILE))?;
    let blob = fs::read(dir.join(BLOB_FILE))?;
    from_bytes(stores, &json, &blob)
}
