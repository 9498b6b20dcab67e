//! Versioned binary model checkpoints.
//!
//! Layout: magic `IFCK`, u32 format version, a JSON header carrying the
//! model configuration and feature schema, then one record per parameter
//! tensor (name, rows, cols, little-endian f64 values) in store order,
//! closed by a SHA-256 digest of all preceding bytes. The digest is
//! verified before anything is parsed, so a flipped byte anywhere is a
//! corruption error rather than garbage tensors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::FeatureSchema;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"IFCK";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    schema: FeatureSchema,
}

/// Serializes the model to the container format.
pub fn to_bytes(params: &ModelParams) -> Result<Vec<u8>> {
    let header = Header {
        config: params.config.clone(),
        schema: params.schema.clone(),
    };
    let json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialization failed: {e}")))?;

    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.set.len() as u64).to_le_bytes());
    for (name, t) in params.set.iter() {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(e) => {
                let s = &self.buf[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::Checkpoint("file is truncated".to_string())),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64_len(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v)
            .map_err(|_| Error::Checkpoint(format!("length field {v} does not fit in memory")))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Checks magic and digest, then hands back the verified interior.
fn verify_container(bytes: &[u8]) -> Result<Reader<'_>> {
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN || bytes[..4] != MAGIC {
        return Err(Error::Checkpoint(
            "not a model checkpoint (bad magic bytes)".to_string(),
        ));
    }
    let body_len = bytes.len() - DIGEST_LEN;
    let expect = Sha256::digest(&bytes[..body_len]);
    if expect[..] != bytes[body_len..] {
        return Err(Error::Checkpoint(
            "checksum mismatch: file is corrupt".to_string(),
        ));
    }
    let mut r = Reader { buf: &bytes[..body_len], pos: MAGIC.len() };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    Ok(r)
}

/// Reads tensor records and installs them into `params` by name. Records
/// are scanned in file order, so the first incompatibility reported is
/// the first mismatched tensor.
fn apply_records(mut r: Reader<'_>, params: &mut ModelParams) -> Result<()> {
    let index_of: std::collections::HashMap<String, (usize, usize, usize)> = params
        .set
        .iter()
        .enumerate()
        .map(|(i, (name, t))| (name.to_string(), (i, t.rows(), t.cols())))
        .collect();
    let count = r.u64_len()?;
    if count != params.set.len() {
        return Err(Error::Checkpoint(format!(
            "file holds {count} tensors but the assembled model has {}",
            params.set.len()
        )));
    }
    let mut filled = vec![false; params.set.len()];
    for _ in 0..count {
        let name_len = r.u64_len()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not valid utf-8".to_string()))?
            .to_string();
        let rows = r.u64_len()?;
        let cols = r.u64_len()?;
        let numel = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint(format!("tensor '{name}' shape overflows")))?;
        let raw = r.take(numel * 8)?;
        let (idx, want_rows, want_cols) = *index_of.get(&name).ok_or_else(|| {
            Error::Checkpoint(format!(
                "tensor '{name}' has no slot in the assembled model"
            ))
        })?;
        if (want_rows, want_cols) != (rows, cols) {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' is {rows}x{cols} in the file but the assembled model expects {want_rows}x{want_cols}"
            )));
        }
        if filled[idx] {
            return Err(Error::Checkpoint(format!("tensor '{name}' appears twice")));
        }
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.set.replace(idx, Tensor::new(rows, cols, data)?);
        filled[idx] = true;
    }
    if !r.done() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".to_string()));
    }
    params.set.check_finite()?;
    Ok(())
}

fn skip_header(r: &mut Reader<'_>) -> Result<Header> {
    let json_len = r.u64_len()?;
    let header: Header = serde_json::from_slice(r.take(json_len)?)
        .map_err(|e| Error::Checkpoint(format!("header is unreadable: {e}")))?;
    Ok(header)
}

/// Restores a model using the configuration stored in the file.
pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = verify_container(bytes)?;
    let header = skip_header(&mut r)?;
    let mut params = ModelParams::new(header.config, header.schema, 0)?;
    apply_records(r, &mut params)?;
    Ok(params)
}

/// Restores a model under a caller-supplied configuration, ignoring the
/// one stored in the file. Incompatible shapes surface as an error naming
/// the first mismatched tensor.
pub fn from_bytes_with(
    config: ModelConfig,
    schema: FeatureSchema,
    bytes: &[u8],
) -> Result<ModelParams> {
    let mut r = verify_container(bytes)?;
    skip_header(&mut r)?;
    let mut params = ModelParams::new(config, schema, 0)?;
    apply_records(r, &mut params)?;
    Ok(params)
}

pub fn save(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(params)?;
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    from_bytes(&bytes)
}

pub fn load_with(
    config: ModelConfig,
    schema: FeatureSchema,
    path: impl AsRef<Path>,
) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    from_bytes_with(config, schema, &bytes)
}
