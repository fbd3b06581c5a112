//! `UDECKPT v1` container: one header line naming the module, then a JSON body
//! holding the serialized model and the content hashes of the checkpoints it was
//! trained against.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::motion::io::write_atomic;

const MAGIC: &str = "UDECKPT v1 module=";

#[derive(Serialize, Deserialize)]
struct Body<T> {
    deps: BTreeMap<String, String>,
    model: T,
}

/// Hex SHA-256 of `bytes`.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode<T: Serialize>(module: &str, model: &T, deps: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let body = Body { deps: deps.clone(), model };
    let json = serde_json::to_string(&body).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(format!("{MAGIC}{module}\n{json}\n").into_bytes())
}

/// Writes the checkpoint and returns its content hash.
pub fn save<T: Serialize>(path: &Path, module: &str, model: &T, deps: &BTreeMap<String, String>) -> Result<String> {
    let bytes = encode(module, model, deps)?;
    write_atomic(path, &bytes)?;
    Ok(content_hash(&bytes))
}

pub struct Loaded<T> {
    pub model: T,
    pub deps: BTreeMap<String, String>,
    pub hash: String,
}

pub fn decode<T: DeserializeOwned>(bytes: &[u8], module: &str) -> Result<Loaded<T>> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::Checkpoint("checkpoint is not UTF-8".into()))?;
    let (header, json) = text
        .split_once('\n')
        .ok_or_else(|| Error::Checkpoint("checkpoint has no body".into()))?;
    let found = header
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::Checkpoint(format!("bad checkpoint header `{header}`")))?;
    if found != module {
        return Err(Error::Checkpoint(format!("expected module {module}, found {found}")));
    }
    let body: Body<T> = serde_json::from_str(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(Loaded {
        model: body.model,
        deps: body.deps,
        hash: content_hash(bytes),
    })
}

pub fn load<T: DeserializeOwned>(path: &Path, module: &str) -> Result<Loaded<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, module).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Hash of the file at `path`.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(content_hash(&bytes))
}
