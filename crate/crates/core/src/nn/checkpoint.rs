//! Parameter checkpoints.
//!
//! A checkpoint is a UTF-8 JSON document:
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "metadata": { "...": "..." },
//!   "params": { "q.0.weight": { "shape": [64, 64], "values": [ ... ] } }
//! }
//! ```
//!
//! Values are written as shortest round-trip decimal and parsed with exact
//! float round-tripping, so save → load is lossless. There is no binary
//! payload and therefore no byte-order concern. `params` is key-sorted.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::Parameterized;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub params: BTreeMap<String, TensorRecord>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new()
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self { format_version: CHECKPOINT_FORMAT_VERSION, metadata: BTreeMap::new(), params: BTreeMap::new() }
    }

    pub fn with_metadata(mut self, key: &str, value: impl Serialize) -> Result<Self> {
        self.metadata.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(self)
    }

    pub fn metadata<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .metadata
            .get(key)
            .ok_or_else(|| Error::input(format!("checkpoint metadata missing {key:?}")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    /// Store every parameter of `model` under `prefix.<name>`.
    pub fn insert<M: Parameterized + ?Sized>(&mut self, prefix: &str, model: &M) {
        for (name, t) in model.parameter_names().into_iter().zip(model.parameters()) {
            self.params.insert(
                format!("{prefix}.{name}"),
                TensorRecord { shape: t.shape().to_vec(), values: t.values().to_vec() },
            );
        }
    }

    /// Overwrite `model`'s parameters from `prefix.<name>` entries.
    pub fn load_into<M: Parameterized + ?Sized>(&self, prefix: &str, model: &mut M) -> Result<()> {
        let names = model.parameter_names();
        for (name, t) in names.into_iter().zip(model.parameters_mut()) {
            let key = format!("{prefix}.{name}");
            let rec = self.params.get(&key).ok_or_else(|| Error::input(format!("checkpoint missing {key}")))?;
            if rec.shape != t.shape() {
                return Err(Error::config(format!(
                    "checkpoint {key} has shape {:?}, model expects {:?}",
                    rec.shape,
                    t.shape()
                )));
            }
            *t = Tensor::new(rec.shape.clone(), rec.values.clone())?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::input(format!("unsupported checkpoint format_version {}", ck.format_version)));
        }
        for (k, rec) in &ck.params {
            if rec.shape.iter().product::<usize>() != rec.values.len() {
                return Err(Error::input(format!("checkpoint entry {k} has inconsistent shape")));
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{Activation, Mlp};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #[test]
        fn json_round_trip_is_bitwise(values in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 1..40)) {
            let mut ck = Checkpoint::new();
            ck.params.insert("p".into(), TensorRecord { shape: vec![values.len()], values: values.clone() });
            let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
            let got = &back.params["p"].values;
            prop_assert!(got.iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn model_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Mlp::new(&mut rng, &[3, 5, 2], Activation::Relu, Activation::Identity);
        let mut b = Mlp::new(&mut rng, &[3, 5, 2], Activation::Relu, Activation::Identity);
        let mut ck = Checkpoint::new();
        ck.insert("q", &a);
        let ck = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        ck.load_into("q", &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_on_load() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Mlp::new(&mut rng, &[3, 5, 2], Activation::Relu, Activation::Identity);
        let mut b = Mlp::new(&mut rng, &[3, 4, 2], Activation::Relu, Activation::Identity);
        let mut ck = Checkpoint::new();
        ck.insert("q", &a);
        assert!(matches!(ck.load_into("q", &mut b), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_unknown_version() {
        let text = r#"{"format_version": 99, "params": {}}"#;
        assert!(Checkpoint::from_json(text).is_err());
    }
}
