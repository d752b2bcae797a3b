//! JSON checkpoint documents: named tensors plus free-form metadata.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, TensorRecord>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            meta: serde_json::Value::Null,
            tensors: BTreeMap::new(),
        }
    }
}

impl Checkpoint {
    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.insert(
            name.into(),
            TensorRecord {
                shape: t.shape().to_vec(),
                data: t.to_f64_vec(),
            },
        );
    }

    /// Adds every tensor of `store`, names prefixed with `prefix`.
    pub fn insert_store<T: Scalar>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (name, t) in store.iter() {
            self.insert(format!("{prefix}{name}"), t);
        }
    }

    pub fn tensor<T: Scalar>(&self, name: &str, expected_shape: &[usize]) -> Result<Tensor<T>> {
        let rec = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if rec.shape != expected_shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: expected shape {expected_shape:?}, found {:?}",
                rec.shape
            )));
        }
        Tensor::new(&rec.shape, rec.data.iter().map(|&x| T::of(x)).collect())
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))
    }

    /// Overwrites every parameter of `store` from `{prefix}{name}` records,
    /// validating each shape.
    pub fn restore_store<T: Scalar>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{prefix}{}", store.name(id));
            let t = self.tensor::<T>(&name, store.get(id).shape())?;
            store.get_mut(id).data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {}",
                ck.format_version
            )));
        }
        for (name, rec) in &ck.tensors {
            if rec.shape.iter().product::<usize>() != rec.data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?} does not match {} values",
                    rec.shape,
                    rec.data.len()
                )));
            }
        }
        Ok(ck)
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(self.to_json()?.as_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn restore_rejects_wrong_shape() {
        let mut store = ParamStore::<f64>::new();
        store.add("a.W", Tensor::zeros(&[2, 3])).unwrap();
        let mut ck = Checkpoint::default();
        ck.insert("a.W", &Tensor::<f64>::zeros(&[3, 2]));
        let err = ck.restore_store("", &mut store).unwrap_err();
        assert!(err.to_string().contains("a.W"));
    }

    #[test]
    fn rejects_unknown_version_and_inconsistent_records() {
        let bad_version = r#"{"format_version": 9, "tensors": {}}"#;
        assert!(Checkpoint::from_json(bad_version).is_err());
        let bad_len = r#"{"format_version": 1, "tensors": {"x": {"shape": [2], "data": [1.0]}}}"#;
        assert!(Checkpoint::from_json(bad_len).is_err());
    }

    #[test]
    fn values_survive_a_file_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let mut store = ParamStore::<f64>::new();
        store
            .add("w", Tensor::from_vec(vec![0.1, 1.0 / 3.0, -2.5e-17, 1e300]))
            .unwrap();
        let mut ck = Checkpoint::default();
        ck.insert_store("model.", &store);
        ck.save(&path).unwrap();
        let mut restored = ParamStore::<f64>::new();
        restored.add("w", Tensor::zeros(&[4])).unwrap();
        Checkpoint::load(&path)
            .unwrap()
            .restore_store("model.", &mut restored)
            .unwrap();
        assert_eq!(
            restored.get(restored.id("w").unwrap()).data(),
            store.get(store.id("w").unwrap()).data()
        );
    }
}
