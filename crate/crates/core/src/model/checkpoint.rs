//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "DCVAECKP"
//! version  u32      1
//! hlen     u32      length of the JSON header
//! header   hlen     {"dims":…, "hyper":…, "tensors":[{"name","rows","cols"},…]}
//! payload           f64 LE for every tensor, in header order
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a save/load round trip is
//! bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::{DcvaeParams, Group, ModelDims};
use crate::model::HyperParams;
use crate::numerics::Matrix;

const MAGIC: &[u8; 8] = b"DCVAECKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: DcvaeParams,
    pub hyper: HyperParams,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dims: ModelDims,
    hyper: HyperParams,
    tensors: Vec<TensorHeader>,
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &DcvaeParams, hyper: &HyperParams) -> Result<()> {
    let dims = *params.dims();
    let mut tensors = Vec::new();
    for g in Group::ALL {
        for (name, t) in DcvaeParams::tensor_names(g, &dims).into_iter().zip(params.group(g)) {
            tensors.push(TensorHeader {
                name,
                rows: t.rows(),
                cols: t.cols(),
            });
        }
    }
    let header = Header {
        dims,
        hyper: hyper.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;

    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for g in Group::ALL {
        for t in params.group(g) {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    r.read_exact(&mut word)?;
    let mut json = vec![0u8; u32::from_le_bytes(word) as usize];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let mut tensors = header.tensors.iter();
    let mut groups: [Vec<Matrix>; 6] = Default::default();
    for g in Group::ALL {
        for expected in DcvaeParams::tensor_names(g, &header.dims) {
            let th = tensors
                .next()
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {expected}")))?;
            if th.name != expected {
                return Err(Error::Checkpoint(format!("expected tensor {expected}, found {}", th.name)));
            }
            let mut data = Vec::with_capacity(th.rows * th.cols);
            let mut buf = [0u8; 8];
            for _ in 0..th.rows * th.cols {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            groups[g.index()].push(Matrix::new(th.rows, th.cols, data)?);
        }
    }
    if tensors.next().is_some() {
        return Err(Error::Checkpoint("unexpected extra tensors".into()));
    }
    let params = DcvaeParams::from_groups(header.dims, groups)?;
    Ok(Checkpoint {
        params,
        hyper: header.hyper,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &DcvaeParams, hyper: &HyperParams) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), params, hyper)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
