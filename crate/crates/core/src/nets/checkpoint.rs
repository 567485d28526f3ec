//! Checkpoint directories: one binary blob per parameter group plus a JSON
//! manifest that describes the networks and the training position.
//!
//! Blob layout (little endian), repeated per parameter:
//! `u32 name_len | name | u32 ndim | u64 dims[ndim] | f32 values[prod(dims)]`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::layers::{Layer, Param};
use super::models::{param_checksum, DecoderSpec, EncoderSpec, HeadSpec};
use super::NetError;
use crate::rng::RngState;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// `pretrain` or `finetune`.
    pub stage: String,
    pub encoder: EncoderSpec,
    #[serde(default)]
    pub heads: Vec<HeadSpec>,
    #[serde(default)]
    pub decoder: Option<DecoderSpec>,
    pub config_hash: String,
    pub epoch: usize,
    pub step: usize,
    #[serde(default)]
    pub rng_state: Option<RngState>,
    /// Group name to blob file name.
    pub blobs: BTreeMap<String, String>,
    /// Group name to [`param_checksum`] of its contents.
    pub checksums: BTreeMap<String, String>,
    /// Stage-specific training state (optimizer counters, best metric, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// A named tensor read back from a blob.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn write_blob(path: &Path, params: &[&Param]) -> Result<(), NetError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for p in params {
        write_tensor(&mut out, &p.name, &p.shape, &p.value)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_tensors(path: &Path, tensors: &[StoredTensor]) -> Result<(), NetError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for t in tensors {
        write_tensor(&mut out, &t.name, &t.shape, &t.values)?;
    }
    out.flush()?;
    Ok(())
}

fn write_tensor(out: &mut impl Write, name: &str, shape: &[usize], values: &[f32]) -> Result<(), NetError> {
    out.write_all(&(name.len() as u32).to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    out.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_blob(path: &Path) -> Result<Vec<StoredTensor>, NetError> {
    let mut input = BufReader::new(fs::File::open(path)?);
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| NetError::Format(format!("{}: parameter name is not UTF-8", path.display())))?;
        let ndim = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = cur.take(len * 4)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(StoredTensor { name, shape, values });
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        if self.pos + n > self.bytes.len() {
            return Err(NetError::Format("truncated parameter blob".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NetError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, NetError> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

/// Overwrites `layer`'s parameters with `stored`, which must match in
/// order, names and shapes.
pub fn assign_params(layer: &mut dyn Layer, stored: &[StoredTensor]) -> Result<(), NetError> {
    let mut params = layer.params_mut();
    if params.len() != stored.len() {
        return Err(NetError::StructureMismatch(format!(
            "checkpoint has {} tensors, network has {}",
            stored.len(),
            params.len()
        )));
    }
    for (p, s) in params.iter_mut().zip(stored) {
        if p.name != s.name || p.shape != s.shape {
            return Err(NetError::StructureMismatch(format!(
                "{} {:?} vs stored {} {:?}",
                p.name, p.shape, s.name, s.shape
            )));
        }
        p.value.copy_from_slice(&s.values);
    }
    Ok(())
}

/// Writes a checkpoint directory atomically enough for resumption: blobs
/// first, manifest last.
pub struct CheckpointWriter {
    dir: PathBuf,
    blobs: BTreeMap<String, String>,
    checksums: BTreeMap<String, String>,
}

impl CheckpointWriter {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, NetError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            blobs: BTreeMap::new(),
            checksums: BTreeMap::new(),
        })
    }

    pub fn group(&mut self, name: &str, params: &[&Param]) -> Result<(), NetError> {
        let file = format!("{name}.bin");
        write_blob(&self.dir.join(&file), params)?;
        self.blobs.insert(name.to_string(), file);
        self.checksums.insert(name.to_string(), param_checksum(params));
        Ok(())
    }

    pub fn tensors(&mut self, name: &str, tensors: &[StoredTensor]) -> Result<(), NetError> {
        let file = format!("{name}.bin");
        write_tensors(&self.dir.join(&file), tensors)?;
        self.blobs.insert(name.to_string(), file);
        Ok(())
    }

    /// Fills in blob bookkeeping and writes the manifest.
    pub fn finish(self, mut manifest: CheckpointManifest) -> Result<PathBuf, NetError> {
        manifest.blobs = self.blobs;
        manifest.checksums = self.checksums;
        let path = self.dir.join(MANIFEST_FILE);
        let tmp = self.dir.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(
            &tmp,
            serde_json::to_vec_pretty(&manifest).map_err(|e| NetError::Format(e.to_string()))?,
        )?;
        fs::rename(&tmp, &path)?;
        Ok(self.dir)
    }
}

/// Read side of a checkpoint directory.
pub struct Checkpoint {
    pub dir: PathBuf,
    pub manifest: CheckpointManifest,
}

impl Checkpoint {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, NetError> {
        let dir = dir.into();
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| NetError::Format(format!("{}: {e}", dir.display())))?;
        if manifest.format_version != CHECKPOINT_FORMAT {
            return Err(NetError::Format(format!(
                "unsupported checkpoint format {}",
                manifest.format_version
            )));
        }
        Ok(Self { dir, manifest })
    }

    pub fn has_group(&self, name: &str) -> bool {
        self.manifest.blobs.contains_key(name)
    }

    pub fn read_group(&self, name: &str) -> Result<Vec<StoredTensor>, NetError> {
        let file = self
            .manifest
            .blobs
            .get(name)
            .ok_or_else(|| NetError::Format(format!("checkpoint has no group {name}")))?;
        read_blob(&self.dir.join(file))
    }

    /// Loads group `name` into `layer` and verifies its recorded checksum.
    pub fn load_into(&self, name: &str, layer: &mut dyn Layer) -> Result<(), NetError> {
        assign_params(layer, &self.read_group(name)?)?;
        if let Some(expected) = self.manifest.checksums.get(name) {
            let actual = param_checksum(&layer.params());
            if &actual != expected {
                return Err(NetError::Format(format!("checksum mismatch for group {name}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EncoderArch;
    use crate::nets::models::Encoder;
    use crate::rng::RngStream;

    #[test]
    fn blob_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = EncoderSpec::new(EncoderArch::ToyCnn, (16, 16), 16, vec![1, 2]).unwrap();
        let a = Encoder::new(spec.clone(), &mut RngStream::new(1, "a")).unwrap();
        let mut b = Encoder::new(spec.clone(), &mut RngStream::new(2, "b")).unwrap();
        assert_ne!(param_checksum(&a.params()), param_checksum(&b.params()));

        let mut w = CheckpointWriter::new(dir.path()).unwrap();
        w.group("encoder", &a.params()).unwrap();
        w.finish(CheckpointManifest {
            format_version: CHECKPOINT_FORMAT,
            stage: "pretrain".into(),
            encoder: spec,
            heads: vec![],
            decoder: None,
            config_hash: "x".into(),
            epoch: 3,
            step: 7,
            rng_state: Some(RngStream::new(5, "s").state()),
            blobs: BTreeMap::new(),
            checksums: BTreeMap::new(),
            extra: serde_json::Value::Null,
        })
        .unwrap();

        let ck = Checkpoint::open(dir.path()).unwrap();
        assert_eq!(ck.manifest.step, 7);
        ck.load_into("encoder", &mut b).unwrap();
        assert_eq!(param_checksum(&a.params()), param_checksum(&b.params()));
    }

    #[test]
    fn structure_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let small = EncoderSpec::new(EncoderArch::ToyCnn, (16, 16), 16, vec![1, 2]).unwrap();
        let big = EncoderSpec::new(EncoderArch::ToyCnn, (16, 16), 32, vec![1, 2]).unwrap();
        let a = Encoder::new(small, &mut RngStream::new(1, "a")).unwrap();
        let mut b = Encoder::new(big, &mut RngStream::new(1, "a")).unwrap();
        let path = dir.path().join("e.bin");
        write_blob(&path, &a.params()).unwrap();
        let stored = read_blob(&path).unwrap();
        assert!(matches!(
            assign_params(&mut b, &stored),
            Err(NetError::StructureMismatch(_))
        ));
    }
}
