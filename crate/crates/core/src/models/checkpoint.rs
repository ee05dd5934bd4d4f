//! Model checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | content                                      |
//! |--------------|----------------------------------------------|
//! | 8            | magic `XRMMODEL`                             |
//! | 4            | format version, currently `1`                |
//! | 4            | header length `h`                            |
//! | `h`          | UTF-8 JSON of the [`ModelSpec`]              |
//! | 8            | parameter count `k`                          |
//! | `8·k`        | `f64` parameters, blocks `W0, b0, W1, b1, …` |
//!
//! Values are written bit-for-bit, so a round trip is exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelParams, ModelSpec};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"XRMMODEL";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, params: &ModelParams) -> Result<()> {
    let header = serde_json::to_vec(params.spec())?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    let flat = params.to_flat();
    w.write_all(&(flat.len() as u64).to_le_bytes())?;
    for v in flat {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelParams> {
    let bad = |detail: String| Error::Format {
        path: "<checkpoint>".into(),
        detail,
    };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    r.read_exact(&mut word)?;
    let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
    r.read_exact(&mut header)?;
    let spec: ModelSpec = serde_json::from_slice(&header)?;
    let mut long = [0u8; 8];
    r.read_exact(&mut long)?;
    let count = u64::from_le_bytes(long) as usize;
    let expected = ModelParams::zeros(&spec)?.num_params();
    if count != expected {
        return Err(bad(format!("{count} parameters, spec needs {expected}")));
    }
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes)?;
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    ModelParams::from_flat(&spec, &flat)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), params)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    read_checkpoint(BufReader::new(File::open(path)?)).map_err(|e| match e {
        Error::Format { detail, .. } => Error::Format {
            path: path.to_path_buf(),
            detail,
        },
        e => e,
    })
}
