//! Speaker embeddings from a small stats-pooling speaker classifier.
//!
//! Pooling takes the per-utterance mean and standard deviation of each frame
//! dimension (22 values), standardizes them with training-set statistics, and
//! maps them through an affine bottleneck. The bottleneck output, L2-normalized,
//! is the utterance embedding; a softmax head over seen speakers is only used
//! for training.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param_store::{ParameterSet, TensorEntry, META_ROLE};
use crate::rng::substream;
use crate::synth::{Corpus, Emotion, Frame, Split, Utterance, FEATURE_DIM};

pub const POOLED_DIM: usize = 2 * FEATURE_DIM;
pub const POOL_MEAN: &str = "pool.mean";
pub const POOL_SCALE: &str = "pool.scale";
pub const BOTTLENECK_W: &str = "bottleneck.w";
pub const BOTTLENECK_B: &str = "bottleneck.b";
pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";

const TABLE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEmbedding {
    values: Vec<f64>,
    normalized: bool,
}

impl SpeakerEmbedding {
    pub fn raw(values: Vec<f64>) -> Self {
        Self {
            values,
            normalized: false,
        }
    }

    /// Scales `values` to unit L2 norm.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let norm = l2(&values);
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::invalid("cannot normalize a zero or non-finite embedding"));
        }
        Ok(Self {
            values: values.into_iter().map(|v| v / norm).collect(),
            normalized: true,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn norm(&self) -> f64 {
        l2(&self.values)
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Speaker encoder cosine similarity.
pub fn secs(a: &SpeakerEmbedding, b: &SpeakerEmbedding) -> Result<f64> {
    cosine(a.values(), b.values())
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "cosine of vectors with dims {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine similarity with a zero vector"));
    }
    // sqrt(na * nb) rather than sqrt(na) * sqrt(nb): exact 1.0 for identical inputs.
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// Mean and population standard deviation of each frame dimension.
pub fn pool(frames: &[Frame]) -> Result<[f64; POOLED_DIM]> {
    if frames.is_empty() {
        return Err(Error::invalid("cannot embed an empty utterance"));
    }
    let n = frames.len() as f64;
    let mut out = [0.0; POOLED_DIM];
    for d in 0..FEATURE_DIM {
        let mean = frames.iter().map(|f| f[d]).sum::<f64>() / n;
        let var = frames.iter().map(|f| (f[d] - mean).powi(2)).sum::<f64>() / n;
        out[d] = mean;
        out[FEATURE_DIM + d] = var.sqrt();
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderHyper {
    pub seed: u64,
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub dim: usize,
}

impl Default for EmbedderHyper {
    fn default() -> Self {
        Self {
            seed: 11,
            steps: 600,
            learning_rate: 0.5,
            momentum: 0.9,
            dim: 16,
        }
    }
}

/// Frozen speaker encoder. Backed by f32 tensors so it persists exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderModel {
    set: ParameterSet,
    speakers: Vec<String>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    bw: Vec<f64>,
    bb: Vec<f64>,
    hw: Vec<f64>,
    hb: Vec<f64>,
}

impl EmbedderModel {
    pub fn from_parameter_set(set: ParameterSet) -> Result<Self> {
        if set.meta_value(META_ROLE) != Some("embedder") {
            return Err(Error::invalid(format!(
                "expected a checkpoint with role \"embedder\", found {:?}",
                set.meta_value(META_ROLE)
            )));
        }
        let speakers: Vec<String> = set
            .meta_value("speakers")
            .ok_or_else(|| Error::invalid("embedder checkpoint lacks the speakers list"))?
            .split(',')
            .map(str::to_string)
            .collect();
        let get = |name: &str| -> Result<(Vec<usize>, Vec<f64>)> {
            let t = set
                .get(name)
                .ok_or_else(|| Error::invalid(format!("embedder lacks tensor {name:?}")))?;
            Ok((t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect()))
        };
        let (_, mean) = get(POOL_MEAN)?;
        let (_, scale) = get(POOL_SCALE)?;
        let (bshape, bw) = get(BOTTLENECK_W)?;
        let (_, bb) = get(BOTTLENECK_B)?;
        let (hshape, hw) = get(HEAD_W)?;
        let (_, hb) = get(HEAD_B)?;
        let dim = bshape[0];
        let expect = [
            (POOL_MEAN, mean.len(), POOLED_DIM),
            (POOL_SCALE, scale.len(), POOLED_DIM),
            (BOTTLENECK_W, bw.len(), dim * POOLED_DIM),
            (BOTTLENECK_B, bb.len(), dim),
            (HEAD_W, hw.len(), speakers.len() * dim),
            (HEAD_B, hb.len(), speakers.len()),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(Error::invalid(format!(
                    "embedder tensor {name:?} has {got} values, expected {want}"
                )));
            }
        }
        if hshape != [speakers.len(), dim] {
            return Err(Error::invalid("embedder head shape disagrees with speaker list"));
        }
        Ok(Self {
            set,
            speakers,
            mean,
            scale,
            bw,
            bb,
            hw,
            hb,
        })
    }

    pub fn as_parameter_set(&self) -> &ParameterSet {
        &self.set
    }

    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }

    pub fn dim(&self) -> usize {
        self.bb.len()
    }

    pub fn tensor_hash(&self) -> String {
        self.set.tensor_hash()
    }

    fn standardize(&self, pooled: &[f64; POOLED_DIM]) -> [f64; POOLED_DIM] {
        let mut x = [0.0; POOLED_DIM];
        for i in 0..POOLED_DIM {
            x[i] = (pooled[i] - self.mean[i]) * self.scale[i];
        }
        x
    }

    /// Unnormalized bottleneck output.
    pub fn bottleneck(&self, frames: &[Frame]) -> Result<Vec<f64>> {
        let x = self.standardize(&pool(frames)?);
        Ok(affine(&self.bw, &self.bb, &x))
    }

    pub fn classify(&self, frames: &[Frame]) -> Result<usize> {
        let e = self.bottleneck(frames)?;
        let logits = affine(&self.hw, &self.hb, &e);
        Ok(argmax(&logits))
    }

    /// Fraction of utterances whose predicted speaker matches their label.
    /// Utterances of speakers unknown to the head count as errors.
    pub fn accuracy<'a>(&self, utts: impl IntoIterator<Item = &'a Utterance>) -> Result<f64> {
        let (mut hit, mut total) = (0usize, 0usize);
        for u in utts {
            total += 1;
            let pred = self.classify(&u.features)?;
            if self.speakers[pred] == u.speaker {
                hit += 1;
            }
        }
        if total == 0 {
            return Err(Error::invalid("accuracy over no utterances"));
        }
        Ok(hit as f64 / total as f64)
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    w.chunks_exact(x.len())
        .zip(b)
        .map(|(row, b)| row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + b)
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderReport {
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
    pub speakers: usize,
    pub train_utterances: usize,
}

/// Trains the speaker classifier on neutral train-split speech of seen speakers.
pub fn train_embedder(corpus: &Corpus, hyper: &EmbedderHyper) -> Result<(EmbedderModel, EmbedderReport)> {
    let speakers: Vec<String> = corpus
        .profiles
        .iter()
        .filter(|p| p.seen)
        .map(|p| p.id.clone())
        .collect();
    if speakers.len() < 2 {
        return Err(Error::invalid("speaker embedder needs at least two seen speakers"));
    }
    if hyper.dim == 0 {
        return Err(Error::config("embedder.dim", "must be positive"));
    }
    let class_of: BTreeMap<&str, usize> = speakers.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let train: Vec<&Utterance> = corpus
        .utterances(Split::Train, None, Some(Emotion::Neutral))
        .filter(|u| class_of.contains_key(u.speaker.as_str()))
        .collect();
    let pooled: Vec<[f64; POOLED_DIM]> = train.iter().map(|u| pool(&u.features)).collect::<Result<_>>()?;
    let labels: Vec<usize> = train.iter().map(|u| class_of[u.speaker.as_str()]).collect();

    let n = pooled.len() as f64;
    let mut mean = [0.0; POOLED_DIM];
    let mut scale = [0.0; POOLED_DIM];
    for i in 0..POOLED_DIM {
        let m = pooled.iter().map(|p| p[i]).sum::<f64>() / n;
        let var = pooled.iter().map(|p| (p[i] - m).powi(2)).sum::<f64>() / n;
        mean[i] = m as f32 as f64;
        scale[i] = (1.0 / var.sqrt().max(1e-6)) as f32 as f64;
    }
    let xs: Vec<[f64; POOLED_DIM]> = pooled
        .iter()
        .map(|p| {
            let mut x = [0.0; POOLED_DIM];
            for i in 0..POOLED_DIM {
                x[i] = (p[i] - mean[i]) * scale[i];
            }
            x
        })
        .collect();

    let (k, dim) = (speakers.len(), hyper.dim);
    let glorot = |rows: usize, cols: usize, index: u64| -> Vec<f64> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let mut rng = substream(hyper.seed, "embedder-init", index);
        (0..rows * cols).map(|_| rng.random_range(-a..a)).collect()
    };
    let mut params = [
        glorot(dim, POOLED_DIM, 0),
        vec![0.0; dim],
        glorot(k, dim, 1),
        vec![0.0; k],
    ];
    let mut velocity: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();

    for _ in 0..hyper.steps {
        let [bw, bb, hw, hb] = &params;
        let mut grads: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        for (x, &label) in xs.iter().zip(&labels) {
            let e = affine(bw, bb, x);
            let logits = affine(hw, hb, &e);
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut de = vec![0.0; dim];
            for c in 0..k {
                let dl = exps[c] / z - if c == label { 1.0 } else { 0.0 };
                grads[3][c] += dl;
                for j in 0..dim {
                    grads[2][c * dim + j] += dl * e[j];
                    de[j] += hw[c * dim + j] * dl;
                }
            }
            for j in 0..dim {
                grads[1][j] += de[j];
                for i in 0..POOLED_DIM {
                    grads[0][j * POOLED_DIM + i] += de[j] * x[i];
                }
            }
        }
        for ((p, v), g) in params.iter_mut().zip(&mut velocity).zip(&grads) {
            for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = hyper.momentum * *vi + gi / n;
                *pi -= hyper.learning_rate * *vi;
            }
        }
    }

    let to_f32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    let mut set = ParameterSet::new();
    set.insert(TensorEntry::new(POOL_MEAN, vec![POOLED_DIM], to_f32(&mean))?)?;
    set.insert(TensorEntry::new(POOL_SCALE, vec![POOLED_DIM], to_f32(&scale))?)?;
    set.insert(TensorEntry::new(
        BOTTLENECK_W,
        vec![dim, POOLED_DIM],
        to_f32(&params[0]),
    )?)?;
    set.insert(TensorEntry::new(BOTTLENECK_B, vec![dim], to_f32(&params[1]))?)?;
    set.insert(TensorEntry::new(HEAD_W, vec![k, dim], to_f32(&params[2]))?)?;
    set.insert(TensorEntry::new(HEAD_B, vec![k], to_f32(&params[3]))?)?;
    set.set_meta(META_ROLE, "embedder")?;
    set.set_meta("speakers", speakers.join(","))?;
    set.set_meta("seed", hyper.seed.to_string())?;
    set.set_meta("steps", hyper.steps.to_string())?;

    let mut model = EmbedderModel::from_parameter_set(set)?;
    let train_accuracy = model.accuracy(train.iter().copied())?;
    let heldout: Vec<&Utterance> = corpus
        .utterances(Split::Val, None, Some(Emotion::Neutral))
        .chain(corpus.utterances(Split::Test, None, Some(Emotion::Neutral)))
        .filter(|u| class_of.contains_key(u.speaker.as_str()))
        .collect();
    let heldout_accuracy = model.accuracy(heldout.iter().copied())?;
    model.set.set_meta("train_accuracy", format!("{train_accuracy}"))?;
    model.set.set_meta("heldout_accuracy", format!("{heldout_accuracy}"))?;
    let report = EmbedderReport {
        train_accuracy,
        heldout_accuracy,
        speakers: k,
        train_utterances: train.len(),
    };
    Ok((model, report))
}

/// L2-normalized bottleneck output of one utterance.
pub fn embed_utterance(model: &EmbedderModel, frames: &[Frame]) -> Result<SpeakerEmbedding> {
    SpeakerEmbedding::normalized(model.bottleneck(frames)?)
}

/// Mean of per-utterance embeddings, re-normalized.
///
/// Embeddings are summed in a canonical (sorted) order so the result does not
/// depend on the order of `utterances`.
pub fn speaker_vector<F: AsRef<[Frame]>>(model: &EmbedderModel, utterances: &[F]) -> Result<SpeakerEmbedding> {
    if utterances.is_empty() {
        return Err(Error::invalid("speaker vector needs at least one utterance"));
    }
    let mut embs: Vec<SpeakerEmbedding> = utterances
        .iter()
        .map(|u| embed_utterance(model, u.as_ref()))
        .collect::<Result<_>>()?;
    embs.sort_by(|a, b| {
        a.values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let dim = model.dim();
    let mut mean = vec![0.0; dim];
    for e in &embs {
        mean.iter_mut().zip(e.values()).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= embs.len() as f64);
    SpeakerEmbedding::normalized(mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEntry {
    /// Split whose neutral utterances produced this vector.
    pub split: Split,
    pub utterances: usize,
    pub values: Vec<f64>,
}

/// Conditioning vectors for every corpus speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerTable {
    pub schema_version: u32,
    pub embedder_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub speakers: BTreeMap<String, SpeakerEntry>,
}

impl SpeakerTable {
    /// Seen speakers are averaged over their neutral training speech; unseen
    /// speakers over their neutral reference (test-split) speech.
    pub fn build(model: &EmbedderModel, corpus: &Corpus) -> Result<Self> {
        let mut speakers = BTreeMap::new();
        for p in &corpus.profiles {
            let split = if p.seen { Split::Train } else { Split::Test };
            let frames: Vec<&[Frame]> = corpus
                .utterances(split, Some(&p.id), Some(Emotion::Neutral))
                .map(|u| u.features.as_slice())
                .collect();
            if frames.is_empty() {
                return Err(Error::invalid(format!(
                    "speaker {} has no neutral {} utterances",
                    p.id,
                    split.as_str()
                )));
            }
            let v = speaker_vector(model, &frames)?;
            speakers.insert(
                p.id.clone(),
                SpeakerEntry {
                    split,
                    utterances: frames.len(),
                    values: v.values().to_vec(),
                },
            );
        }
        Ok(Self {
            schema_version: TABLE_SCHEMA_VERSION,
            embedder_hash: model.tensor_hash(),
            config_hash: None,
            speakers,
        })
    }

    pub fn get(&self, speaker: &str) -> Option<&SpeakerEntry> {
        self.speakers.get(speaker)
    }

    pub fn vector(&self, speaker: &str) -> Result<&[f64]> {
        self.get(speaker)
            .map(|e| e.values.as_slice())
            .ok_or_else(|| Error::invalid(format!("no speaker vector for {speaker:?}")))
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("table serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let table: SpeakerTable = serde_json::from_slice(&bytes).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if table.schema_version != TABLE_SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "{}: unsupported speaker table version {}",
                path.display(),
                table.schema_version
            )));
        }
        Ok(table)
    }
}
