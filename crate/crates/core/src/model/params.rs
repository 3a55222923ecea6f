//! Flat `key → array` parameter maps and their on-disk JSON form.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Parameters keyed by canonical name, iterated in sorted key order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamMap(BTreeMap<String, Tensor>);

impl FromIterator<(String, Tensor)> for ParamMap {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamMap(iter.into_iter().collect())
    }
}

impl ParamMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.0.insert(key.into(), tensor)
    }

    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.0.get(key)
    }

    pub fn get_mut(&mut self, key: &str) -> Option<&mut Tensor> {
        self.0.get_mut(key)
    }

    pub fn remove(&mut self, key: &str) -> Option<Tensor> {
        self.0.remove(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.0.values().map(Tensor::numel).sum()
    }

    pub fn same_schema(&self, other: &ParamMap) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|((ka, ta), (kb, tb))| ka == kb && ta.shape() == tb.shape())
    }

    /// Errors unless the key set equals `expected`.
    pub fn check_keys<'a>(&self, expected: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let expected: std::collections::BTreeSet<&str> = expected.into_iter().collect();
        let actual: std::collections::BTreeSet<&str> = self.0.keys().map(String::as_str).collect();
        if expected == actual {
            return Ok(());
        }
        let missing: Vec<_> = expected.difference(&actual).collect();
        let extra: Vec<_> = actual.difference(&expected).collect();
        Err(Error::Schema(format!(
            "missing keys {missing:?}, unexpected keys {extra:?}"
        )))
    }

    pub fn to_file(&self, format: &str) -> ParamFile {
        ParamFile {
            format: format.to_string(),
            params: self
                .0
                .iter()
                .map(|(k, t)| {
                    (
                        k.clone(),
                        ParamRecord {
                            shape: t.shape().to_vec(),
                            #[allow(clippy::useless_conversion)]
                            data: t.data().iter().map(|&v| f64::from(v)).collect(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn from_file(file: &ParamFile) -> Result<Self> {
        file.params
            .iter()
            .map(|(k, r)| {
                #[allow(clippy::unnecessary_cast)]
                let data = r.data.iter().map(|v| *v as Scalar).collect();
                Ok((k.clone(), Tensor::param(r.shape.clone(), data)?))
            })
            .collect::<Result<BTreeMap<_, _>>>()
            .map(ParamMap)
    }

    pub fn to_json(&self, format: &str) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file(format))?)
    }

    pub fn from_json(text: &str) -> Result<(String, Self)> {
        let file: ParamFile = serde_json::from_str(text)?;
        Ok((file.format.clone(), Self::from_file(&file)?))
    }

    pub fn read(path: &Path) -> Result<(String, Self)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// One serialized array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// JSON document holding a parameter map; `format` names what it contains
/// (a bundle checkpoint, a client's prompts, an upload payload).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamFile {
    pub format: String,
    pub params: BTreeMap<String, ParamRecord>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_is_exact() {
        let mut m = ParamMap::new();
        m.insert("a", Tensor::new(vec![2], vec![0.1, -1.0 / 3.0]).unwrap());
        m.insert("b.c", Tensor::new(vec![1, 1], vec![1e-300]).unwrap());
        let text = m.to_json("test").unwrap();
        let (fmt, back) = ParamMap::from_json(&text).unwrap();
        assert_eq!(fmt, "test");
        assert_eq!(back, m);
    }

    #[test]
    fn key_check_reports_differences() {
        let mut m = ParamMap::new();
        m.insert("a", Tensor::scalar(1.0));
        assert!(m.check_keys(["a"]).is_ok());
        let err = m.check_keys(["a", "b"]).unwrap_err().to_string();
        assert!(err.contains("\"b\""), "{err}");
    }
}
