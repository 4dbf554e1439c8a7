//! JSON checkpoint container.
//!
//! ```text
//! {
//!   "format": "mmanet-checkpoint/1",
//!   "role": "teacher" | "deployment",
//!   "architecture": { input_dims, hidden_width, feature_width, fused_width, num_classes },
//!   "params": [ { "module": "encoder0.l1.weight", "shape": [rows, cols], "values": [...] }, ... ]
//! }
//! ```
//!
//! Values are stored row-major as `f64` and parsed with exact float
//! round-tripping, so save followed by load reproduces every bit.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::fusion::Fusion;
use super::net::{Architecture, MultimodalNet, NetRole};
use crate::error::{ensure_finite, Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "mmanet-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub module: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub role: NetRole,
    pub architecture: Architecture,
    pub params: Vec<ParamEntry>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Format {
            kind: "checkpoint",
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Format {
                kind: "checkpoint",
                path: path.to_path_buf(),
                reason: format!("unsupported format tag {:?}", ckpt.format),
            });
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }
}

impl<T: Scalar, F: Fusion<T>> MultimodalNet<T, F> {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut params = Vec::new();
        for (module, p) in self.params() {
            let values: Vec<f64> = p.iter().map(|v| v.to_f64_lossless()).collect();
            if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
                ensure_finite(
                    &format!("{} parameter {module}", self.role().as_str()),
                    *bad,
                )?;
            }
            params.push(ParamEntry {
                module,
                shape: [p.nrows(), p.ncols()],
                values,
            });
        }
        Ok(Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            role: self.role(),
            architecture: self.architecture().clone(),
            params,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Self::init(ckpt.role, ckpt.architecture.clone(), &mut rng)?;
        let names: Vec<String> = net.params().into_iter().map(|(n, _)| n).collect();
        if names.len() != ckpt.params.len() {
            return Err(Error::shape(
                "checkpoint parameter count",
                names.len(),
                ckpt.params.len(),
            ));
        }
        for ((name, slot), entry) in names.iter().zip(net.params_mut()).zip(&ckpt.params) {
            if *name != entry.module {
                return Err(Error::shape("checkpoint module", name, &entry.module));
            }
            let shape = [slot.nrows(), slot.ncols()];
            if shape != entry.shape || entry.values.len() != shape[0] * shape[1] {
                return Err(Error::shape(
                    "checkpoint shape",
                    format!("{name} {shape:?}"),
                    format!("{:?} with {} values", entry.shape, entry.values.len()),
                ));
            }
            *slot = Array2::from_shape_vec(
                (shape[0], shape[1]),
                entry.values.iter().map(|&v| T::of(v)).collect(),
            )
            .expect("shape checked");
        }
        Ok(net)
    }
}
