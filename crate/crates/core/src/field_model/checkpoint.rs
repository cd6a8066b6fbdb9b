//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "ODFCKPT\0"
//! version    u32       1
//! header_len u32       length of the UTF-8 TOML header that follows
//! header     TOML      [model] config, optional [grid] geometry
//! n_params   u64       number of f64 values that follow
//! params     f64 LE    hash tables level by level (entry-major, F values per entry),
//!                      then each head layer as weight (row-major, out×in) and bias,
//!                      then W (row-major, K×r)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{FieldModel, ModelConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ODFCKPT\0";
pub const VERSION: u32 = 1;

/// Geometry of the volume a model was fitted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridInfo {
    pub dims: [usize; 3],
    pub pixdim: [f64; 3],
    pub affine: [[f64; 4]; 4],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    grid: Option<GridInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: FieldModel,
    pub grid: Option<GridInfo>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let header = Header {
            model: self.model.config().clone(),
            grid: self.grid.clone(),
        };
        let text = toml::to_string(&header).map_err(std::io::Error::other)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(text.len() as u32).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        let params = flatten(&self.model);
        w.write_all(&(params.len() as u64).to_le_bytes())?;
        for p in params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let io = |e: std::io::Error| Error::format("checkpoint", format!("truncated file: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::format("magic", "not a model checkpoint"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(io)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(Error::format("version", format!("unsupported checkpoint version {version}")));
        }
        r.read_exact(&mut b4).map_err(io)?;
        let mut text = vec![0u8; u32::from_le_bytes(b4) as usize];
        r.read_exact(&mut text).map_err(io)?;
        let text = String::from_utf8(text).map_err(|e| Error::format("header", e.to_string()))?;
        let header: Header = toml::from_str(&text).map_err(|e| Error::format("header", e.to_string()))?;
        let mut model = FieldModel::zeros(header.model).map_err(|e| Error::format("header", e.to_string()))?;

        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(io)?;
        let count = u64::from_le_bytes(b8) as usize;
        let expected = model.parameter_count();
        if count != expected {
            return Err(Error::format(
                "n_params",
                format!("header config implies {expected} parameters, file declares {count}"),
            ));
        }
        let mut raw = vec![0u8; count * 8];
        r.read_exact(&mut raw).map_err(io)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        unflatten(&mut model, &values);
        Ok(Self {
            model,
            grid: header.grid,
        })
    }
}

fn push_row_major(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
}

fn read_row_major(m: &mut DMatrix<f64>, values: &[f64]) -> usize {
    let (rows, cols) = m.shape();
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = values[i * cols + j];
        }
    }
    rows * cols
}

/// Parameters in checkpoint order.
pub fn flatten(model: &FieldModel) -> Vec<f64> {
    let mut out = Vec::with_capacity(model.parameter_count());
    if let Some(enc) = &model.encoder {
        for t in enc.tables() {
            out.extend_from_slice(t);
        }
    }
    for layer in &model.layers {
        push_row_major(&mut out, &layer.weight);
        out.extend(layer.bias.iter());
    }
    push_row_major(&mut out, &model.w);
    out
}

/// Inverse of [`flatten`]; `values` must hold exactly `parameter_count` entries.
pub fn unflatten(model: &mut FieldModel, values: &[f64]) {
    let mut at = 0;
    if let Some(enc) = &mut model.encoder {
        for t in enc.tables_mut() {
            let n = t.len();
            t.copy_from_slice(&values[at..at + n]);
            at += n;
        }
    }
    for layer in &mut model.layers {
        at += read_row_major(&mut layer.weight, &values[at..]);
        let n = layer.bias.len();
        layer.bias.as_mut_slice().copy_from_slice(&values[at..at + n]);
        at += n;
    }
    at += read_row_major(&mut model.w, &values[at..]);
    debug_assert_eq!(at, values.len());
}
