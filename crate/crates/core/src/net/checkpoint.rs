//! JSON checkpoint of an [`Estimator`].
//!
//! Layout (`version` 1):
//!
//! ```text
//! {
//!   "format": "fthd-checkpoint",
//!   "version": 1,
//!   "seed": <u64 used for initialisation>,
//!   "config": { hidden_layers, hidden_size, gru_layers, history, outputs },
//!   "known": { mass, lf, lr },
//!   "bounds": { lower: [..], upper: [..] },
//!   "blocks": [
//!     { "kind": "gru" | "dense", "frozen": bool,
//!       "tensors": [ { "rows": r, "cols": c, "data": [row-major r*c floats] }, .. ] },
//!     ..
//!   ]
//! }
//! ```
//!
//! Blocks appear in network order (GRU layers, hidden dense layers, output
//! layer). Floats are written in shortest round-trip form, so a save/load
//! cycle is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Block, BlockKind, Estimator, GuardBounds, NetworkConfig, ParameterSet};
use crate::dynamics::KnownCoefficients;
use crate::error::{Error, Result};

pub const FORMAT: &str = "fthd-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorRecord {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlockRecord {
    kind: BlockKind,
    frozen: bool,
    tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Record {
    format: String,
    version: u32,
    seed: u64,
    config: NetworkConfig,
    known: KnownCoefficients,
    bounds: GuardBounds,
    blocks: Vec<BlockRecord>,
}

/// A saved estimator together with the seed it was initialised from.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub estimator: Estimator,
    pub seed: u64,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let e = &self.estimator;
        let record = Record {
            format: FORMAT.into(),
            version: VERSION,
            seed: self.seed,
            config: e.config,
            known: e.known,
            bounds: e.bounds.clone(),
            blocks: e
                .params
                .blocks
                .iter()
                .map(|b| BlockRecord {
                    kind: b.kind,
                    frozen: b.frozen,
                    tensors: b
                        .tensors
                        .iter()
                        .map(|t| TensorRecord {
                            rows: t.nrows(),
                            cols: t.ncols(),
                            data: t.iter().copied().collect(),
                        })
                        .collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&record)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let record: Record = serde_json::from_str(text)?;
        if record.format != FORMAT || record.version != VERSION {
            return Err(Error::SchemaMismatch(format!(
                "unsupported checkpoint {} v{}",
                record.format, record.version
            )));
        }
        let blocks = record
            .blocks
            .into_iter()
            .map(|b| {
                let tensors = b
                    .tensors
                    .into_iter()
                    .map(|t| {
                        Array2::from_shape_vec((t.rows, t.cols), t.data)
                            .map_err(|e| Error::SchemaMismatch(format!("tensor shape: {e}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Block { kind: b.kind, tensors, frozen: b.frozen })
            })
            .collect::<Result<Vec<_>>>()?;
        let estimator = Estimator {
            config: record.config,
            params: ParameterSet { blocks },
            bounds: record.bounds,
            known: record.known,
        };
        estimator.validate()?;
        Ok(Self { estimator, seed: record.seed })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(self.to_json()?.as_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut text = String::new();
        std::io::Read::read_to_string(&mut BufReader::new(File::open(path)?), &mut text)?;
        Self::from_json(&text)
    }
}
