//! Versioned JSON checkpoint container.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::graph::Tensor;
use super::{FieldConfig, FieldParams};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
const FORMAT: &str = "evsdf-checkpoint";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: FieldParams,
    pub iteration: u64,
    pub seed: u64,
    /// Auxiliary tensors such as optimiser moments, by name.
    pub extra: Vec<(String, Tensor)>,
    /// Free-form run settings stored alongside the weights.
    pub settings: Value,
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: [usize; 2],
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Container {
    format: String,
    schema_version: u32,
    iteration: u64,
    seed: u64,
    s_sharpness: f64,
    config: FieldConfig,
    tensors: Vec<NamedTensor>,
    extra: Vec<NamedTensor>,
    settings: Value,
}

fn pack(name: &str, t: &Tensor) -> NamedTensor {
    NamedTensor {
        name: name.to_string(),
        shape: [t.nrows(), t.ncols()],
        values: t.iter().copied().collect(),
    }
}

fn unpack(t: NamedTensor) -> Result<(String, Tensor)> {
    let arr = Array2::from_shape_vec((t.shape[0], t.shape[1]), t.values)
        .map_err(|e| Error::invalid(format!("tensor {}: {e}", t.name)))?;
    Ok((t.name, arr))
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let c = Container {
            format: FORMAT.into(),
            schema_version: SCHEMA_VERSION,
            iteration: self.iteration,
            seed: self.seed,
            s_sharpness: self.params.sharpness(),
            config: self.params.config.clone(),
            tensors: self
                .params
                .names
                .iter()
                .zip(&self.params.tensors)
                .map(|(n, t)| pack(n, t))
                .collect(),
            extra: self.extra.iter().map(|(n, t)| pack(n, t)).collect(),
            settings: self.settings.clone(),
        };
        serde_json::to_string(&c).expect("checkpoint serialisation")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Value = serde_json::from_str(text).map_err(|e| Error::invalid(format!("checkpoint: {e}")))?;
        if raw.get("format").and_then(Value::as_str) != Some(FORMAT) {
            return Err(Error::invalid("not a checkpoint file"));
        }
        let version = raw.get("schema_version").and_then(Value::as_u64).unwrap_or(0) as u32;
        if version != SCHEMA_VERSION {
            return Err(Error::Schema {
                found: version,
                expected: SCHEMA_VERSION,
            });
        }
        let c: Container = serde_json::from_value(raw).map_err(|e| Error::invalid(format!("checkpoint: {e}")))?;
        let reference = FieldParams::new(c.config.clone(), 0)?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for t in c.tensors {
            let (n, arr) = unpack(t)?;
            names.push(n);
            tensors.push(arr);
        }
        if names != reference.names || tensors.iter().map(|t| t.dim()).ne(reference.shapes()) {
            return Err(Error::invalid("checkpoint tensors do not match the network configuration"));
        }
        let extra = c.extra.into_iter().map(unpack).collect::<Result<_>>()?;
        Ok(Self {
            params: FieldParams {
                config: c.config,
                names,
                tensors,
            },
            iteration: c.iteration,
            seed: c.seed,
            extra,
            settings: c.settings,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
