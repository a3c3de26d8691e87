//! Binary model checkpoints.
//!
//! Layout, little-endian: magic `SGBM`, `u32` version, `u32` aggregator
//! (0 mean, 1 sum), `u32` layer count, one `u32` per layer width, then for
//! the street branch followed by the satellite branch, every layer's weights
//! (row-major, `d_out x d_in`) and bias as `f32`.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::network::{Aggregator, LayerParams, ModelParams};
use super::ModelError;

const MAGIC: &[u8; 4] = b"SGBM";
const VERSION: u32 = 1;

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let agg: u32 = match params.aggregator {
        Aggregator::Mean => 0,
        Aggregator::Sum => 1,
    };
    out.extend_from_slice(&agg.to_le_bytes());
    out.extend_from_slice(&(params.layer_dims.len() as u32).to_le_bytes());
    for &d in &params.layer_dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for layer in params.street_branch.iter().chain(&params.sat_branch) {
        for &v in layer.weights.iter().chain(layer.bias.iter()) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ModelError::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, ModelError> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| ModelError::Checkpoint("size overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams, ModelError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let aggregator = match r.u32()? {
        0 => Aggregator::Mean,
        1 => Aggregator::Sum,
        other => return Err(ModelError::Checkpoint(format!("unknown aggregator {other}"))),
    };
    let n = r.u32()? as usize;
    if !(2..=64).contains(&n) {
        return Err(ModelError::Checkpoint(format!("implausible layer count {n}")));
    }
    let dims = (0..n)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let mut branch = || -> Result<Vec<LayerParams>, ModelError> {
        dims.windows(2)
            .map(|w| {
                let (d_in, d_out) = (w[0], w[1]);
                let weights = Array2::from_shape_vec((d_out, d_in), r.f32s(d_in * d_out)?)
                    .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
                let bias = Array1::from(r.f32s(d_out)?);
                Ok(LayerParams { weights, bias })
            })
            .collect()
    };
    let street_branch = branch()?;
    let sat_branch = branch()?;
    if r.pos != bytes.len() {
        return Err(ModelError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let params = ModelParams {
        layer_dims: dims,
        aggregator,
        street_branch,
        sat_branch,
    };
    params.validate()?;
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    fs::write(path, encode(params)).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ModelError> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}
