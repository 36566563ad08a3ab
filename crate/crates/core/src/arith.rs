//! Emotion-vector arithmetic: extraction, scaled application and combination.
//!
//! Every element is computed in f64 from the f32 operands and rounded to f32
//! exactly once, so the error of each operation is bounded by half an f32 ulp
//! of its result.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param_store::{ensure_compatible, ParameterSet, TensorEntry, META_EMOTION, META_ROLE, META_SCOPE};

pub const META_SOURCE_EMO: &str = "source.emo";
pub const META_SOURCE_PRE: &str = "source.pre";
pub const META_ALPHA: &str = "alpha";
pub const META_VECTOR_HASH: &str = "vector.hash";
pub const META_TARGET_HASH: &str = "target.hash";

/// Range of scaling factors the method has been exercised with; outside it we only warn.
pub const EXERCISED_ALPHA_RANGE: (f64, f64) = (0.0, 1.2);

/// Threshold under which a vector element counts as zero in [`vector_stats`].
pub const NEAR_ZERO: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VectorScope {
    SingleSpeaker,
    SpeakerAgnostic,
}

impl VectorScope {
    pub fn as_str(self) -> &'static str {
        match self {
            VectorScope::SingleSpeaker => "single-speaker",
            VectorScope::SpeakerAgnostic => "speaker-agnostic",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "single-speaker" => Some(VectorScope::SingleSpeaker),
            "speaker-agnostic" => Some(VectorScope::SpeakerAgnostic),
            _ => None,
        }
    }
}

/// A parameter-space difference τ with its provenance.
///
/// Shares the tensor layout of the sets it was extracted from and is stored
/// in the same checkpoint container with `role = "vector"`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmotionVector {
    set: ParameterSet,
    label: String,
    scope: VectorScope,
}

impl EmotionVector {
    /// Reinterprets a loaded checkpoint as a vector; requires vector metadata.
    pub fn from_parameter_set(set: ParameterSet) -> Result<Self> {
        if set.meta_value(META_ROLE) != Some("vector") {
            return Err(Error::invalid(format!(
                "expected a checkpoint with role \"vector\", found {:?}",
                set.meta_value(META_ROLE)
            )));
        }
        let label = set
            .meta_value(META_EMOTION)
            .ok_or_else(|| Error::invalid("emotion vector has no emotion label"))?
            .to_string();
        let scope = set
            .meta_value(META_SCOPE)
            .and_then(VectorScope::parse)
            .ok_or_else(|| Error::invalid("emotion vector has no valid scope"))?;
        for key in [META_SOURCE_EMO, META_SOURCE_PRE] {
            if set.meta_value(key).is_none() {
                return Err(Error::invalid(format!("emotion vector lacks provenance key {key:?}")));
            }
        }
        Ok(Self { set, label, scope })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn scope(&self) -> VectorScope {
        self.scope
    }

    pub fn as_parameter_set(&self) -> &ParameterSet {
        &self.set
    }

    pub fn into_parameter_set(self) -> ParameterSet {
        self.set
    }

    pub fn source_emo(&self) -> &str {
        self.set.meta_value(META_SOURCE_EMO).unwrap_or_default()
    }

    pub fn source_pre(&self) -> &str {
        self.set.meta_value(META_SOURCE_PRE).unwrap_or_default()
    }

    pub fn tensor_hash(&self) -> String {
        self.set.tensor_hash()
    }

    pub fn negate(&self) -> Result<Self> {
        let mut out = ParameterSet::new();
        for t in self.set.tensors() {
            let data = t.data().iter().map(|v| -v).collect();
            out.insert(TensorEntry::new(t.name(), t.shape().to_vec(), data)?)?;
        }
        for (k, v) in self.set.meta() {
            out.set_meta(k.clone(), v.clone())?;
        }
        Ok(Self {
            set: out,
            label: self.label.clone(),
            scope: self.scope,
        })
    }
}

/// A validated scaling factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApplySpec {
    alpha: f64,
}

impl ApplySpec {
    pub fn new(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() {
            return Err(Error::invalid(format!("alpha must be finite, got {alpha}")));
        }
        let spec = Self { alpha };
        if !spec.in_exercised_range() {
            log::warn!(
                "alpha {alpha} is outside [{}, {}]; extrapolating",
                EXERCISED_ALPHA_RANGE.0,
                EXERCISED_ALPHA_RANGE.1
            );
        }
        Ok(spec)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn in_exercised_range(&self) -> bool {
        (EXERCISED_ALPHA_RANGE.0..=EXERCISED_ALPHA_RANGE.1).contains(&self.alpha)
    }
}

/// Elementwise map over two compatible sets, computed in f64 and rounded once.
fn zip_map(a: &ParameterSet, b: &ParameterSet, f: impl Fn(f64, f64) -> f64) -> Result<ParameterSet> {
    ensure_compatible(a, b)?;
    let mut out = ParameterSet::new();
    for ta in a.tensors() {
        let tb = b.get(ta.name()).expect("compatible sets share names");
        let data: Vec<f32> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x as f64, y as f64) as f32)
            .collect();
        let entry = TensorEntry::new(ta.name(), ta.shape().to_vec(), data)?;
        if !entry.is_finite() {
            return Err(Error::NonFinite {
                tensor: ta.name().to_string(),
            });
        }
        out.insert(entry)?;
    }
    Ok(out)
}

/// τ = θ_emo − θ_pre.
pub fn extract_vector(emo: &ParameterSet, pre: &ParameterSet, label: &str) -> Result<EmotionVector> {
    if let Some(role) = pre.meta_value(META_ROLE) {
        if role != "pretrained" {
            log::warn!("extracting against a base set with role {role:?}, not \"pretrained\"");
        }
    }
    let mut set = zip_map(emo, pre, |e, p| e - p)?;
    let scope = match emo.meta_value(META_SCOPE) {
        Some("multi") => VectorScope::SpeakerAgnostic,
        _ => VectorScope::SingleSpeaker,
    };
    set.set_meta(META_ROLE, "vector")?;
    set.set_meta(META_EMOTION, label)?;
    set.set_meta(META_SCOPE, scope.as_str())?;
    set.set_meta(META_SOURCE_EMO, emo.tensor_hash())?;
    set.set_meta(META_SOURCE_PRE, pre.tensor_hash())?;
    if let Some(spk) = emo.meta_value("speakers") {
        set.set_meta("source.speakers", spk)?;
    }
    Ok(EmotionVector {
        set,
        label: label.to_string(),
        scope,
    })
}

/// θ_new = θ_target + α·τ.
pub fn apply_vector(target: &ParameterSet, tau: &EmotionVector, alpha: f64) -> Result<ParameterSet> {
    let spec = ApplySpec::new(alpha)?;
    let a = spec.alpha();
    let mut out = zip_map(target, &tau.set, |t, v| t + a * v)?;
    // Provenance carries over; the target's training measurements do not
    // describe the merged model.
    for (k, v) in target.meta() {
        if !(k.starts_with("train.") || k.starts_with("val.") || k == "init.hash") {
            out.set_meta(k.clone(), v.clone())?;
        }
    }
    out.set_meta(META_ROLE, "merged")?;
    out.set_meta(META_EMOTION, tau.label())?;
    out.set_meta(META_ALPHA, format!("{a}"))?;
    out.set_meta(META_VECTOR_HASH, tau.tensor_hash())?;
    out.set_meta(META_TARGET_HASH, target.tensor_hash())?;
    out.set_meta("vector.scope", tau.scope().as_str())?;
    Ok(out)
}

/// Weighted sum Σ wᵢ·τᵢ, accumulated in f64 and rounded once per element.
pub fn combine(vectors: &[(&EmotionVector, f64)]) -> Result<EmotionVector> {
    let (first, _) = vectors
        .first()
        .ok_or_else(|| Error::invalid("combine needs at least one vector"))?;
    for (v, w) in vectors {
        ensure_compatible(&first.set, &v.set)?;
        if !w.is_finite() {
            return Err(Error::invalid(format!("combine weight must be finite, got {w}")));
        }
    }
    let mut set = ParameterSet::new();
    for t in first.set.tensors() {
        let mut acc = vec![0f64; t.numel()];
        for (v, w) in vectors {
            let src = v.set.get(t.name()).expect("compatible").data();
            for (a, &x) in acc.iter_mut().zip(src) {
                *a += w * x as f64;
            }
        }
        let entry = TensorEntry::new(
            t.name(),
            t.shape().to_vec(),
            acc.into_iter().map(|x| x as f32).collect(),
        )?;
        if !entry.is_finite() {
            return Err(Error::NonFinite {
                tensor: t.name().to_string(),
            });
        }
        set.insert(entry)?;
    }
    let scope = if vectors.iter().all(|(v, _)| v.scope == VectorScope::SpeakerAgnostic) {
        VectorScope::SpeakerAgnostic
    } else {
        VectorScope::SingleSpeaker
    };
    let label = vectors.iter().map(|(v, _)| v.label()).collect::<Vec<_>>().join("+");
    let sources = |key: &str| {
        vectors
            .iter()
            .map(|(v, w)| format!("{}*{w}", v.set.meta_value(key).unwrap_or("?")))
            .collect::<Vec<_>>()
            .join(",")
    };
    set.set_meta(META_ROLE, "vector")?;
    set.set_meta(META_EMOTION, label.clone())?;
    set.set_meta(META_SCOPE, scope.as_str())?;
    set.set_meta(META_SOURCE_EMO, sources(META_SOURCE_EMO))?;
    set.set_meta(META_SOURCE_PRE, sources(META_SOURCE_PRE))?;
    Ok(EmotionVector { set, label, scope })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorStats {
    pub name: String,
    pub numel: usize,
    pub l2: f64,
    pub max_abs: f64,
    pub near_zero_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorStats {
    pub label: String,
    pub global_l2: f64,
    pub max_abs: f64,
    pub near_zero_fraction: f64,
    pub tensors: Vec<TensorStats>,
}

/// Norm diagnostics; works on any parameter set, not only vectors.
pub fn parameter_stats(set: &ParameterSet) -> VectorStats {
    let mut tensors = Vec::with_capacity(set.len());
    let (mut sq, mut max_abs, mut near_zero, mut total) = (0f64, 0f64, 0usize, 0usize);
    for t in set.tensors() {
        let mut tsq = 0f64;
        let mut tmax = 0f64;
        let mut tzero = 0usize;
        for &v in t.data() {
            let v = (v as f64).abs();
            tsq += v * v;
            tmax = tmax.max(v);
            if v < NEAR_ZERO {
                tzero += 1;
            }
        }
        sq += tsq;
        max_abs = max_abs.max(tmax);
        near_zero += tzero;
        total += t.numel();
        tensors.push(TensorStats {
            name: t.name().to_string(),
            numel: t.numel(),
            l2: tsq.sqrt(),
            max_abs: tmax,
            near_zero_fraction: tzero as f64 / t.numel() as f64,
        });
    }
    VectorStats {
        label: set.meta_value(META_EMOTION).unwrap_or_default().to_string(),
        global_l2: sq.sqrt(),
        max_abs,
        near_zero_fraction: if total == 0 {
            1.0
        } else {
            near_zero as f64 / total as f64
        },
        tensors,
    }
}

pub fn vector_stats(tau: &EmotionVector) -> VectorStats {
    parameter_stats(&tau.set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, data: Vec<f32>) -> ParameterSet {
        let n = data.len();
        ParameterSet::from_entries([TensorEntry::new(name, vec![n], data).unwrap()]).unwrap()
    }

    fn vector(data: Vec<f32>) -> EmotionVector {
        let pre = single("w", vec![0.0; data.len()]);
        extract_vector(&single("w", data), &pre, "angry").unwrap()
    }

    #[test]
    fn self_difference_is_zero() {
        let s = single("w", vec![0.3, -1.5, 7.0]);
        let tau = extract_vector(&s, &s, "sad").unwrap();
        assert!(tau
            .as_parameter_set()
            .get("w")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn elementwise_subtraction() {
        let tau = extract_vector(&single("w", vec![2.0, 1.0]), &single("w", vec![0.5, 1.0]), "angry").unwrap();
        assert_eq!(tau.as_parameter_set().get("w").unwrap().data(), &[1.5, 0.0]);
        assert_eq!(tau.label(), "angry");
        assert_eq!(tau.scope(), VectorScope::SingleSpeaker);
        assert_eq!(tau.source_emo(), single("w", vec![2.0, 1.0]).tensor_hash());
        assert_eq!(tau.source_pre(), single("w", vec![0.5, 1.0]).tensor_hash());
    }

    #[test]
    fn scope_follows_source_meta() {
        let emo = single("w", vec![1.0]).with_meta(META_SCOPE, "multi").unwrap();
        let pre = single("w", vec![0.0]);
        assert_eq!(
            extract_vector(&emo, &pre, "happy").unwrap().scope(),
            VectorScope::SpeakerAgnostic
        );
    }

    #[test]
    fn missing_tensor_is_incompatible() {
        let emo = ParameterSet::from_entries([
            TensorEntry::zeros("a", vec![1]).unwrap(),
            TensorEntry::zeros("b", vec![1]).unwrap(),
        ])
        .unwrap();
        let pre = single("a", vec![0.0]);
        match extract_vector(&emo, &pre, "angry") {
            Err(Error::Incompatible(r)) => assert_eq!(r.missing_in_b, vec!["b".to_string()]),
            other => panic!("expected incompatibility, got {other:?}"),
        }
    }

    #[test]
    fn zero_alpha_is_bit_identical() {
        let target = single("w", vec![0.1, -3.25, 1e-20]);
        let tau = vector(vec![5.0, 6.0, -7.0]);
        let out = apply_vector(&target, &tau, 0.0).unwrap();
        assert_eq!(out.get("w").unwrap().data(), target.get("w").unwrap().data());
        assert_eq!(out.meta_value(META_ROLE), Some("merged"));
        assert_eq!(out.meta_value(META_ALPHA), Some("0"));
    }

    #[test]
    fn paper_alpha_example() {
        let out = apply_vector(&single("w", vec![1.0]), &vector(vec![2.0]), 0.9).unwrap();
        assert_eq!(out.get("w").unwrap().data(), &[(1.0f64 + 0.9 * 2.0) as f32]);
        assert_eq!(out.meta_value(META_ALPHA), Some("0.9"));
    }

    #[test]
    fn nonfinite_alpha_rejected() {
        let target = single("w", vec![1.0]);
        let tau = vector(vec![1.0]);
        assert!(apply_vector(&target, &tau, f64::NAN).is_err());
        assert!(apply_vector(&target, &tau, f64::INFINITY).is_err());
    }

    #[test]
    fn out_of_range_alpha_still_applies() {
        let spec = ApplySpec::new(-0.5).unwrap();
        assert!(!spec.in_exercised_range());
        assert!(ApplySpec::new(1.2).unwrap().in_exercised_range());
        let out = apply_vector(&single("w", vec![1.0]), &vector(vec![2.0]), -0.5).unwrap();
        assert_eq!(out.get("w").unwrap().data(), &[0.0]);
    }

    #[test]
    fn overflow_is_reported() {
        let target = single("w", vec![f32::MAX]);
        let tau = vector(vec![f32::MAX]);
        assert!(matches!(apply_vector(&target, &tau, 1.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn combine_identity_half_and_cancellation() {
        let tau = vector(vec![0.1, -2.5, 3.0e-5]);
        let same = combine(&[(&tau, 1.0)]).unwrap();
        assert_eq!(same.as_parameter_set().get("w"), tau.as_parameter_set().get("w"));

        let halves = combine(&[(&tau, 0.5), (&tau, 0.5)]).unwrap();
        assert_eq!(halves.as_parameter_set().get("w"), tau.as_parameter_set().get("w"));
        assert_eq!(halves.label(), "angry+angry");

        let zero = combine(&[(&tau, 1.0), (&tau, -1.0)]).unwrap();
        assert!(zero
            .as_parameter_set()
            .get("w")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn combine_rejects_empty_and_mismatch() {
        assert!(combine(&[]).is_err());
        let a = vector(vec![1.0]);
        let b = vector(vec![1.0, 2.0]);
        assert!(matches!(combine(&[(&a, 1.0), (&b, 1.0)]), Err(Error::Incompatible(_))));
    }

    #[test]
    fn combine_scope_is_agnostic_only_if_all_inputs_are() {
        let pre = single("w", vec![0.0]);
        let multi = single("w", vec![1.0]).with_meta(META_SCOPE, "multi").unwrap();
        let agn = extract_vector(&multi, &pre, "angry").unwrap();
        let one = extract_vector(&single("w", vec![1.0]), &pre, "sad").unwrap();
        assert_eq!(
            combine(&[(&agn, 1.0), (&agn, 1.0)]).unwrap().scope(),
            VectorScope::SpeakerAgnostic
        );
        assert_eq!(
            combine(&[(&agn, 1.0), (&one, 1.0)]).unwrap().scope(),
            VectorScope::SingleSpeaker
        );
    }

    #[test]
    fn stats_of_zero_and_pythagorean_vectors() {
        let zero = vector(vec![0.0, 0.0]);
        let s = vector_stats(&zero);
        assert_eq!(s.global_l2, 0.0);
        assert_eq!(s.near_zero_fraction, 1.0);

        let s = vector_stats(&vector(vec![3.0, 4.0]));
        assert_eq!(s.global_l2, 5.0);
        assert_eq!(s.max_abs, 4.0);
        assert_eq!(s.near_zero_fraction, 0.0);
    }

    #[test]
    fn vector_roundtrips_through_parameter_set() {
        let tau = vector(vec![1.0, 2.0]);
        let back = EmotionVector::from_parameter_set(tau.as_parameter_set().clone()).unwrap();
        assert_eq!(back, tau);
        assert!(EmotionVector::from_parameter_set(single("w", vec![1.0])).is_err());
    }
}
