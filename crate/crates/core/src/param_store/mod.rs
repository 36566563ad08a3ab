//! Named-tensor parameter sets and the `.evc` checkpoint container.
//!
//! A [`ParameterSet`] is the unit every other module trades in: pre-trained and
//! fine-tuned weights, merged models, emotion vectors and the speaker embedder
//! are all stored as one. Tensor iteration order is always lexicographic by
//! name, which is what makes serialization canonical.

mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use checkpoint::{decode, encode, load, save, CheckpointError, CHECKPOINT_MAGIC};

pub const META_ROLE: &str = "role";
pub const META_EMOTION: &str = "emotion";
pub const META_SCOPE: &str = "scope";

const ROLES: &[&str] = &["pretrained", "finetuned", "merged", "vector", "embedder"];
const SCOPES: &[&str] = &["single", "multi", "single-speaker", "speaker-agnostic"];
const EMOTIONS: &[&str] = &["angry", "sad", "happy", "neutral"];

/// One named tensor of row-major f32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl TensorEntry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::invalid("tensor name must be non-empty"));
        }
        if shape.contains(&0) {
            return Err(Error::invalid(format!(
                "tensor {name:?} has a zero dimension in shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "tensor {name:?}: shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { name, shape, data })
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(name, shape, vec![0.0; numel])
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A map of uniquely named tensors plus free-form string metadata.
///
/// Reserved metadata keys (`role`, `emotion`, `scope`) are validated on write.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    tensors: BTreeMap<String, TensorEntry>,
    meta: BTreeMap<String, String>,
    allow_nonfinite: bool,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// A set that accepts NaN/Inf values, for debugging diverged runs.
    pub fn new_allow_nonfinite() -> Self {
        Self {
            allow_nonfinite: true,
            ..Self::default()
        }
    }

    pub fn from_entries(entries: impl IntoIterator<Item = TensorEntry>) -> Result<Self> {
        let mut set = Self::new();
        for entry in entries {
            set.insert(entry)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, entry: TensorEntry) -> Result<()> {
        if !self.allow_nonfinite && !entry.is_finite() {
            return Err(Error::NonFinite {
                tensor: entry.name.clone(),
            });
        }
        if self.tensors.contains_key(&entry.name) {
            return Err(Error::invalid(format!("duplicate tensor name {:?}", entry.name)));
        }
        self.tensors.insert(entry.name.clone(), entry);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.get(name)
    }

    /// Tensors in lexicographic name order.
    pub fn tensors(&self) -> impl ExactSizeIterator<Item = &TensorEntry> {
        self.tensors.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(TensorEntry::numel).sum()
    }

    pub fn allows_nonfinite(&self) -> bool {
        self.allow_nonfinite
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) -> Result<()> {
        let key = key.into();
        let value = value.into();
        validate_meta_entry(&key, &value)?;
        self.meta.insert(key, value);
        Ok(())
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Result<Self> {
        self.set_meta(key, value)?;
        Ok(self)
    }

    pub fn remove_meta(&mut self, key: &str) -> Option<String> {
        self.meta.remove(key)
    }

    /// Same tensors, no metadata.
    pub fn without_meta(&self) -> Self {
        Self {
            tensors: self.tensors.clone(),
            meta: BTreeMap::new(),
            allow_nonfinite: self.allow_nonfinite,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for entry in self.tensors.values() {
            if !self.allow_nonfinite && !entry.is_finite() {
                return Err(Error::NonFinite {
                    tensor: entry.name.clone(),
                });
            }
        }
        for (k, v) in &self.meta {
            validate_meta_entry(k, v)?;
        }
        Ok(())
    }

    /// SHA-256 over tensor names, shapes and values (metadata excluded), hex encoded.
    pub fn tensor_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for entry in self.tensors.values() {
            hasher.update((entry.name.len() as u64).to_le_bytes());
            hasher.update(entry.name.as_bytes());
            hasher.update((entry.shape.len() as u64).to_le_bytes());
            for &d in &entry.shape {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in &entry.data {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn is_compatible(&self, other: &ParameterSet) -> bool {
        check_compatible(self, other).is_compatible()
    }
}

fn validate_meta_entry(key: &str, value: &str) -> Result<()> {
    let ok = match key {
        META_ROLE => ROLES.contains(&value),
        META_SCOPE => SCOPES.contains(&value),
        META_EMOTION => value.split('+').all(|part| EMOTIONS.contains(&part)),
        _ => true,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "reserved meta key {key:?} has unsupported value {value:?}"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeMismatch {
    pub name: String,
    pub shape_a: Vec<usize>,
    pub shape_b: Vec<usize>,
}

/// Differences between the name/shape layouts of two parameter sets.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CompatibilityReport {
    pub missing_in_a: Vec<String>,
    pub missing_in_b: Vec<String>,
    pub shape_mismatch: Vec<ShapeMismatch>,
}

impl CompatibilityReport {
    pub fn is_compatible(&self) -> bool {
        self.missing_in_a.is_empty() && self.missing_in_b.is_empty() && self.shape_mismatch.is_empty()
    }
}

impl fmt::Display for CompatibilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_compatible() {
            return write!(f, "compatible");
        }
        let mut parts = Vec::new();
        if !self.missing_in_a.is_empty() {
            parts.push(format!("missing in first: {:?}", self.missing_in_a));
        }
        if !self.missing_in_b.is_empty() {
            parts.push(format!("missing in second: {:?}", self.missing_in_b));
        }
        for m in &self.shape_mismatch {
            parts.push(format!("{:?} shape {:?} vs {:?}", m.name, m.shape_a, m.shape_b));
        }
        write!(f, "{}", parts.join("; "))
    }
}

pub fn check_compatible(a: &ParameterSet, b: &ParameterSet) -> CompatibilityReport {
    let mut report = CompatibilityReport::default();
    for (name, ea) in &a.tensors {
        match b.tensors.get(name) {
            None => report.missing_in_b.push(name.clone()),
            Some(eb) if eb.shape != ea.shape => report.shape_mismatch.push(ShapeMismatch {
                name: name.clone(),
                shape_a: ea.shape.clone(),
                shape_b: eb.shape.clone(),
            }),
            Some(_) => {}
        }
    }
    report.missing_in_a = b
        .tensors
        .keys()
        .filter(|name| !a.tensors.contains_key(*name))
        .cloned()
        .collect();
    report
}

/// Fails with [`Error::Incompatible`] unless the two sets share names and shapes.
pub fn ensure_compatible(a: &ParameterSet, b: &ParameterSet) -> Result<()> {
    let report = check_compatible(a, b);
    if report.is_compatible() {
        Ok(())
    } else {
        Err(Error::Incompatible(report))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(entries: &[(&str, Vec<usize>)]) -> ParameterSet {
        ParameterSet::from_entries(entries.iter().map(|(n, s)| TensorEntry::zeros(*n, s.clone()).unwrap())).unwrap()
    }

    #[test]
    fn identical_layouts_are_compatible() {
        let a = set(&[("enc.b1", vec![4]), ("dec.w", vec![4, 3])]);
        let b = set(&[("dec.w", vec![4, 3]), ("enc.b1", vec![4])]);
        assert!(check_compatible(&a, &b).is_compatible());
        assert!(a.is_compatible(&a));
    }

    #[test]
    fn missing_tensor_is_reported_on_the_right_side() {
        let a = set(&[("enc.b1", vec![4]), ("dec.w", vec![4, 3])]);
        let b = set(&[("dec.w", vec![4, 3])]);
        let report = check_compatible(&a, &b);
        assert_eq!(report.missing_in_b, vec!["enc.b1".to_string()]);
        assert!(report.missing_in_a.is_empty());
        assert!(report.shape_mismatch.is_empty());

        let flipped = check_compatible(&b, &a);
        assert_eq!(flipped.missing_in_a, vec!["enc.b1".to_string()]);
    }

    #[test]
    fn transposed_shape_is_a_mismatch() {
        let a = set(&[("dec.w", vec![4, 3])]);
        let b = set(&[("dec.w", vec![3, 4])]);
        let report = check_compatible(&a, &b);
        assert_eq!(
            report.shape_mismatch,
            vec![ShapeMismatch {
                name: "dec.w".into(),
                shape_a: vec![4, 3],
                shape_b: vec![3, 4],
            }]
        );
        assert!(matches!(ensure_compatible(&a, &b), Err(Error::Incompatible(_))));
    }

    #[test]
    fn entry_rejects_bad_lengths_and_names() {
        assert!(TensorEntry::new("w", vec![2, 2], vec![0.0; 3]).is_err());
        assert!(TensorEntry::new("", vec![1], vec![0.0]).is_err());
        assert!(TensorEntry::new("w", vec![0], vec![]).is_err());
    }

    #[test]
    fn nonfinite_rejected_unless_flagged() {
        let bad = TensorEntry::new("w", vec![1], vec![f32::NAN]).unwrap();
        let mut strict = ParameterSet::new();
        assert!(matches!(strict.insert(bad.clone()), Err(Error::NonFinite { .. })));
        let mut loose = ParameterSet::new_allow_nonfinite();
        loose.insert(bad).unwrap();
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterSet::new();
        s.insert(TensorEntry::zeros("w", vec![1]).unwrap()).unwrap();
        assert!(s.insert(TensorEntry::zeros("w", vec![2]).unwrap()).is_err());
    }

    #[test]
    fn reserved_meta_is_validated() {
        let mut s = ParameterSet::new();
        s.set_meta(META_ROLE, "pretrained").unwrap();
        s.set_meta(META_EMOTION, "angry+sad").unwrap();
        s.set_meta("note", "anything goes").unwrap();
        assert!(s.set_meta(META_ROLE, "teacher").is_err());
        assert!(s.set_meta(META_SCOPE, "global").is_err());
        assert!(s.set_meta(META_EMOTION, "bored").is_err());
    }

    #[test]
    fn iteration_is_lexicographic() {
        let s = set(&[("z", vec![1]), ("a", vec![1]), ("m.b", vec![1])]);
        assert_eq!(s.names().collect::<Vec<_>>(), vec!["a", "m.b", "z"]);
    }

    #[test]
    fn tensor_hash_ignores_meta_but_not_values() {
        let a = set(&[("w", vec![2])]);
        let b = a.clone().with_meta("seed", "1").unwrap();
        assert_eq!(a.tensor_hash(), b.tensor_hash());
        let c = ParameterSet::from_entries([TensorEntry::new("w", vec![2], vec![0.0, 1.0]).unwrap()]).unwrap();
        assert_ne!(a.tensor_hash(), c.tensor_hash());
    }
}
