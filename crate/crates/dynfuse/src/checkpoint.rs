//! Model checkpoints: one self-describing binary file holding the
//! architecture and every parameter, bit-exact.
//!
//! Layout: magic `DMMC` | version (u16 LE) | header length (u32 LE) |
//! JSON header | parameters as little-endian f64 in registration order.
//! The header records the architecture, the flat parameter count, and a
//! digest of the model's cost table; a checkpoint whose rebuilt cost table
//! disagrees is rejected rather than silently re-costed.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bytes::Reader;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

const MAGIC: &[u8; 4] = b"DMMC";
const VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    params: u64,
    cost_digest: u64,
}

/// Serialize a model into the `.ckpt` byte layout.
pub fn model_to_bytes(model: &Model) -> Result<Vec<u8>> {
    let flat = model.store().flat();
    let header = serde_json::to_vec(&CheckpointHeader {
        model: model.config(),
        params: flat.len() as u64,
        cost_digest: model.cost_table().digest(),
    })
    .map_err(|e| Error::Config(format!("checkpoint header does not serialize: {e}")))?;
    let mut out = Vec::with_capacity(10 + header.len() + flat.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Rebuild a model from the `.ckpt` byte layout, validating magic,
/// version, parameter count, finiteness, and the cost-table digest.
pub fn model_from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, want {MAGIC:?}"),
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}, want {VERSION}"),
        });
    }
    let header_len = r.u32("header length")? as usize;
    let header_start = r.pos;
    let header_bytes = r.take(header_len, "JSON header")?;
    let header: CheckpointHeader =
        serde_json::from_slice(header_bytes).map_err(|e| Error::Format {
            offset: header_start as u64,
            message: format!("header does not parse: {e}"),
        })?;

    let mut model = Model::build(&header.model)?;
    let expected = model.store().flat().len();
    if header.params as usize != expected {
        return Err(Error::Format {
            offset: header_start as u64,
            message: format!(
                "header declares {} parameters but the architecture has {expected}",
                header.params
            ),
        });
    }
    if model.cost_table().digest() != header.cost_digest {
        return Err(Error::Format {
            offset: header_start as u64,
            message: "cost table of the rebuilt model disagrees with the checkpoint".into(),
        });
    }
    let mut flat = Vec::with_capacity(expected);
    for i in 0..expected {
        let off = r.pos as u64;
        let v = r.f64("parameter")?;
        if !v.is_finite() {
            return Err(Error::Format {
                offset: off,
                message: format!("parameter {i} is not finite"),
            });
        }
        flat.push(v);
    }
    r.finish()?;
    model.store_mut().load_flat(&flat)?;
    Ok(model)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, model_to_bytes(model)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    model_from_bytes(&fs::read(path)?)
}
