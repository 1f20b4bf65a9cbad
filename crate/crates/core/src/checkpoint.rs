//! Parameter checkpoint container.
//!
//! Versioned little-endian binary layout:
//!
//! ```text
//! magic   b"AVFCKPT1"
//! version u32
//! config  length-prefixed UTF-8 JSON of the model configuration
//! digest  32-byte SHA-256 of that JSON
//! count   u32, then per parameter:
//!   name  length-prefixed UTF-8
//!   rank  u32, extents u64..., values f64... (row-major)
//! ```
//!
//! Parameters are written in sorted-name order so identical models produce
//! identical bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::binio;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"AVFCKPT1";
const VERSION: u32 = 1;

pub fn config_digest(config_json: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(config_json.as_bytes());
    h.finalize().into()
}

pub fn save(path: &Path, config_json: &str, params: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    binio::write_u32(&mut w, VERSION)?;
    binio::write_string(&mut w, config_json)?;
    w.write_all(&config_digest(config_json))?;
    binio::write_u32(&mut w, params.len() as u32)?;
    for (name, t) in params {
        binio::write_string(&mut w, name)?;
        binio::write_tensor(&mut w, t)?;
    }
    w.flush()?;
    Ok(())
}

pub struct Loaded {
    pub config_json: String,
    pub digest: [u8; 32],
    pub params: BTreeMap<String, Tensor>,
}

pub fn load(path: &Path) -> Result<Loaded> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {:?}",
            path.display(),
            magic
        )));
    }
    let version = binio::read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let config_json = binio::read_string(&mut r)?;
    let mut digest = [0u8; 32];
    r.read_exact(&mut digest)?;
    if digest != config_digest(&config_json) {
        return Err(Error::Checkpoint(format!(
            "{}: config digest mismatch",
            path.display()
        )));
    }
    let count = binio::read_u32(&mut r)? as usize;
    let mut params = BTreeMap::new();
    for _ in 0..count {
        let name = binio::read_string(&mut r)?;
        let t = binio::read_tensor(&mut r)?;
        params.insert(name, t);
    }
    Ok(Loaded {
        config_json,
        digest,
        params,
    })
}
