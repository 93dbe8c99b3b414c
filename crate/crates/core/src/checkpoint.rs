//! Model checkpoint files.
//!
//! Layout: 8-byte magic, little-endian `u32` format version, `u64` payload
//! length, JSON payload, SHA-256 of the payload. Floats are written with
//! round-trip precision so loading is bit-exact.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::trainer::TrainedModel;

pub const MAGIC: &[u8; 8] = b"EPIFNPCK";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;
const DIGEST_LEN: usize = 32;

pub fn to_bytes(model: &TrainedModel) -> Result<Vec<u8>> {
    model.params.check_finite()?;
    let payload = serde_json::to_vec(model).map_err(|e| Error::Checkpoint(format!("encode: {e}")))?;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&Sha256::digest(&payload));
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainedModel> {
    let corrupt = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < HEADER_LEN {
        return Err(corrupt("file truncated inside header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt("not a model checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let expected = (HEADER_LEN as u64).checked_add(len).and_then(|n| n.checked_add(DIGEST_LEN as u64));
    match expected {
        Some(n) if n == bytes.len() as u64 => {}
        Some(n) if n > bytes.len() as u64 => return Err(corrupt("file truncated")),
        _ => return Err(corrupt("trailing bytes after payload")),
    }
    let payload = &bytes[HEADER_LEN..HEADER_LEN + len as usize];
    if Sha256::digest(payload).as_slice() != &bytes[HEADER_LEN + len as usize..] {
        return Err(corrupt("checksum mismatch"));
    }
    let model: TrainedModel =
        serde_json::from_slice(payload).map_err(|e| Error::Checkpoint(format!("decode: {e}")))?;
    model.params.check_finite()?;
    Ok(model)
}

pub fn save_model(path: &Path, model: &TrainedModel) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    from_bytes(&fs::read(path)?)
}
