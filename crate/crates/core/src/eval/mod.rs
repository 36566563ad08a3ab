//! End-to-end use-case evaluation: apply emotion vectors to the pretrained
//! model, synthesize test sentences for target speakers and score them.

mod metrics;
mod report;

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arith::{apply_vector, vector_stats, EmotionVector, VectorScope};
use crate::embed::{embed_utterance, secs, EmbedderModel, SpeakerEmbedding, SpeakerTable};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Weights};
use crate::param_store::ParameterSet;
use crate::synth::{Corpus, Emotion, Frame, Split};

pub use metrics::{
    intensity_ordering_eval, ordering_summary, predicted_ranks, secs_eval, strictly_increasing, IntensityEstimator,
    OrderingSummary, SecsSummary, Summary, Z_95,
};
pub use report::{
    render_markdown, write_report, IntensityRow, MarginRow, RunInfo, ScenarioReport, SecsRow, REPORT_SCHEMA_VERSION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Case {
    SameSpk,
    CrossSeen,
    CrossUnseen,
}

impl Case {
    pub const ALL: [Case; 3] = [Case::SameSpk, Case::CrossSeen, Case::CrossUnseen];

    pub fn as_str(self) -> &'static str {
        match self {
            Case::SameSpk => "same_spk",
            Case::CrossSeen => "cross_seen",
            Case::CrossUnseen => "cross_unseen",
        }
    }

    /// Speakers a scenario of this case targets when none are listed.
    pub fn default_targets(self, corpus: &Corpus) -> Vec<String> {
        corpus
            .profiles
            .iter()
            .filter(|p| match self {
                Case::SameSpk => p.has_emotion_data,
                Case::CrossSeen => p.seen && !p.has_emotion_data,
                Case::CrossUnseen => !p.seen,
            })
            .map(|p| p.id.clone())
            .collect()
    }
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Case {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Case::ALL.into_iter().find(|c| c.as_str() == s).ok_or_else(|| {
            Error::invalid(format!(
                "unknown case {s:?}; expected one of same_spk, cross_seen, cross_unseen"
            ))
        })
    }
}

/// Which fine-tune the emotion vectors come from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorSource {
    /// Multi-speaker fine-tune on all emotional speakers.
    SpeakerAgnostic,
    /// Fine-tune on a single emotional speaker.
    SingleSpeaker(String),
}

impl fmt::Display for VectorSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VectorSource::SpeakerAgnostic => f.write_str("speaker-agnostic"),
            VectorSource::SingleSpeaker(id) => write!(f, "single-speaker({id})"),
        }
    }
}

fn default_alphas() -> Vec<f64> {
    vec![0.1, 0.5, 0.9]
}

fn default_test_sentences() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub case: Case,
    /// Empty means every speaker eligible for the case.
    #[serde(default)]
    pub targets: Vec<String>,
    /// Empty means every emotion in the corpus.
    #[serde(default)]
    pub emotions: Vec<Emotion>,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "default_vector")]
    pub vector: VectorSource,
    #[serde(default = "default_test_sentences")]
    pub test_sentences: usize,
}

fn default_vector() -> VectorSource {
    VectorSource::SpeakerAgnostic
}

impl ScenarioSpec {
    pub fn new(name: impl Into<String>, case: Case) -> Self {
        Self {
            name: name.into(),
            case,
            targets: Vec::new(),
            emotions: Vec::new(),
            alphas: default_alphas(),
            vector: default_vector(),
            test_sentences: default_test_sentences(),
        }
    }

    /// Checks the spec on its own, without a corpus.
    pub fn validate(&self) -> Result<()> {
        let key = |field: &str| format!("scenario.{}.{field}", self.name);
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return Err(Error::config(
                "scenario.name",
                format!("{:?} must be non-empty and use only [A-Za-z0-9_-]", self.name),
            ));
        }
        if self.alphas.is_empty() {
            return Err(Error::config(key("alphas"), "must list at least one α"));
        }
        if let Some(a) = self.alphas.iter().find(|a| !a.is_finite()) {
            return Err(Error::config(key("alphas"), format!("α must be finite, got {a}")));
        }
        if self.test_sentences == 0 {
            return Err(Error::config(key("test_sentences"), "must be positive"));
        }
        if self.emotions.contains(&Emotion::Neutral) {
            return Err(Error::config(key("emotions"), "neutral has no emotion vector"));
        }
        Ok(())
    }

    /// Sorted, de-duplicated α values.
    pub fn sorted_alphas(&self) -> Vec<f64> {
        let mut a = self.alphas.clone();
        a.sort_by(f64::total_cmp);
        a.dedup();
        a
    }

    pub fn resolved_targets(&self, corpus: &Corpus) -> Vec<String> {
        if self.targets.is_empty() {
            self.case.default_targets(corpus)
        } else {
            self.targets.clone()
        }
    }

    pub fn resolved_emotions(&self, corpus: &Corpus) -> Vec<Emotion> {
        if self.emotions.is_empty() {
            corpus.config.emotions.clone()
        } else {
            self.emotions.clone()
        }
    }
}

/// Everything a scenario reads. Vectors must match the spec's source.
#[derive(Debug, Clone, Copy)]
pub struct ScenarioInputs<'a> {
    pub pretrained: &'a ParameterSet,
    pub model: &'a ModelConfig,
    pub vectors: &'a BTreeMap<Emotion, EmotionVector>,
    pub embedder: &'a EmbedderModel,
    pub speakers: &'a SpeakerTable,
    pub corpus: &'a Corpus,
}

fn check_targets(spec: &ScenarioSpec, targets: &[String], inputs: &ScenarioInputs<'_>) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::invalid(format!(
            "scenario {:?} has no {} targets in this corpus",
            spec.name, spec.case
        )));
    }
    for t in targets {
        let p = inputs
            .corpus
            .profile(t)
            .ok_or_else(|| Error::invalid(format!("scenario {:?}: unknown speaker {t:?}", spec.name)))?;
        let ok = match spec.case {
            Case::SameSpk => p.has_emotion_data,
            Case::CrossSeen => p.seen && !p.has_emotion_data,
            Case::CrossUnseen => !p.seen,
        };
        if !ok {
            let why = match spec.case {
                Case::SameSpk => "same_spk targets need emotional training data",
                Case::CrossSeen => "cross_seen targets must be seen speakers without emotional data",
                Case::CrossUnseen => "cross_unseen targets must be unseen speakers",
            };
            return Err(Error::invalid(format!("scenario {:?}: {t}: {why}", spec.name)));
        }
        let entry = inputs
            .speakers
            .get(t)
            .ok_or_else(|| Error::invalid(format!("no speaker vector for target {t:?}")))?;
        if !p.seen && entry.split == Split::Train {
            return Err(Error::Contract(format!(
                "unseen speaker {t} is conditioned on a vector derived from training data"
            )));
        }
    }
    Ok(())
}

fn check_vector(spec: &ScenarioSpec, emotion: Emotion, tau: &EmotionVector) -> Result<()> {
    if tau.label() != emotion.as_str() {
        return Err(Error::invalid(format!(
            "vector for {emotion} is labelled {:?}",
            tau.label()
        )));
    }
    let ok = match &spec.vector {
        VectorSource::SpeakerAgnostic => tau.scope() == VectorScope::SpeakerAgnostic,
        VectorSource::SingleSpeaker(id) => {
            tau.scope() == VectorScope::SingleSpeaker
                && tau
                    .as_parameter_set()
                    .meta_value("source.speakers")
                    .is_none_or(|s| s == id)
        }
    };
    if !ok {
        return Err(Error::invalid(format!(
            "scenario {:?} expects a {} vector for {emotion}, got scope {}",
            spec.name,
            spec.vector,
            tau.scope().as_str()
        )));
    }
    Ok(())
}

/// Token sequences of the target's first neutral test utterances.
pub fn test_sentences(corpus: &Corpus, speaker: &str, count: usize) -> Result<Vec<Vec<usize>>> {
    let sentences: Vec<Vec<usize>> = corpus
        .utterances(Split::Test, Some(speaker), Some(Emotion::Neutral))
        .take(count)
        .map(|u| u.tokens.clone())
        .collect();
    if sentences.len() < count {
        return Err(Error::invalid(format!(
            "speaker {speaker} has {} neutral test sentences, {count} requested",
            sentences.len()
        )));
    }
    Ok(sentences)
}

fn synthesize(weights: &Weights, sentences: &[Vec<usize>], speaker: &[f64]) -> Result<Vec<Vec<Frame>>> {
    sentences.iter().map(|s| weights.forward(s, speaker)).collect()
}

fn embed_all(embedder: &EmbedderModel, outputs: &[Vec<Frame>]) -> Result<Vec<SpeakerEmbedding>> {
    outputs.iter().map(|f| embed_utterance(embedder, f)).collect()
}

struct TargetResult {
    secs: Vec<(Emotion, usize, Vec<f64>)>,
    margins: Vec<MarginRow>,
    scores: Vec<(Emotion, Vec<Vec<f64>>)>,
}

#[allow(clippy::too_many_arguments)]
fn run_target(
    target: &str,
    spec: &ScenarioSpec,
    emotions: &[Emotion],
    alphas: &[f64],
    merged: &BTreeMap<(Emotion, usize), Weights>,
    pre: &Weights,
    estimators: &BTreeMap<Emotion, IntensityEstimator>,
    inputs: &ScenarioInputs<'_>,
) -> Result<TargetResult> {
    let sentences = test_sentences(inputs.corpus, target, spec.test_sentences)?;
    let own_vec = inputs.speakers.vector(target)?;
    let neutral = synthesize(pre, &sentences, own_vec)?;
    let neutral_emb = embed_all(inputs.embedder, &neutral)?;
    let mut others = Vec::new();
    for (id, entry) in &inputs.speakers.speakers {
        if id != target {
            others.push(embed_all(
                inputs.embedder,
                &synthesize(pre, &sentences, &entry.values)?,
            )?);
        }
    }
    let margin_alpha = alphas.len() - 1;

    let mut result = TargetResult {
        secs: Vec::new(),
        margins: Vec::new(),
        scores: Vec::new(),
    };
    for &emotion in emotions {
        let mut by_alpha = Vec::with_capacity(alphas.len());
        for (k, &alpha) in alphas.iter().enumerate() {
            let out = synthesize(&merged[&(emotion, k)], &sentences, own_vec)?;
            let emb = embed_all(inputs.embedder, &out)?;
            let own: Vec<f64> = emb
                .iter()
                .zip(&neutral_emb)
                .map(|(a, b)| secs(a, b))
                .collect::<Result<_>>()?;
            if k == margin_alpha {
                let own_mean = own.iter().sum::<f64>() / own.len() as f64;
                let mut cross = 0.0;
                let mut n = 0usize;
                for other in &others {
                    for (a, b) in emb.iter().zip(other) {
                        cross += secs(a, b)?;
                        n += 1;
                    }
                }
                let cross_mean = if n == 0 { f64::NAN } else { cross / n as f64 };
                result.margins.push(MarginRow {
                    target: target.to_string(),
                    emotion,
                    alpha,
                    own_secs: own_mean,
                    cross_secs: cross_mean,
                    margin: own_mean - cross_mean,
                });
            }
            result.secs.push((emotion, k, own));
            by_alpha.push(out);
        }
        if let Some(est) = estimators.get(&emotion) {
            let scores = (0..sentences.len())
                .map(|s| {
                    by_alpha
                        .iter()
                        .map(|frames| est.score(&frames[s], &neutral[s]))
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            result.scores.push((emotion, scores));
        }
    }
    Ok(result)
}

/// Runs one use case over its targets, emotions and α values.
///
/// The intensity-ordering part needs at least three distinct α values and is
/// skipped otherwise.
pub fn run_scenario(spec: &ScenarioSpec, inputs: &ScenarioInputs<'_>, run: RunInfo) -> Result<ScenarioReport> {
    spec.validate()?;
    let targets = spec.resolved_targets(inputs.corpus);
    check_targets(spec, &targets, inputs)?;
    let emotions = spec.resolved_emotions(inputs.corpus);
    let alphas = spec.sorted_alphas();
    if inputs.speakers.speakers.len() < 2 {
        return Err(Error::invalid("SECS margins need at least two speakers"));
    }

    let pre = Weights::from_params(inputs.model, inputs.pretrained)?;
    let mut merged = BTreeMap::new();
    let mut stats = Vec::new();
    let mut vector_hashes = BTreeMap::new();
    for &emotion in &emotions {
        let tau = inputs
            .vectors
            .get(&emotion)
            .ok_or_else(|| Error::invalid(format!("no emotion vector for {emotion}")))?;
        check_vector(spec, emotion, tau)?;
        for (k, &alpha) in alphas.iter().enumerate() {
            let set = apply_vector(inputs.pretrained, tau, alpha)?;
            merged.insert((emotion, k), Weights::from_params(inputs.model, &set)?);
        }
        stats.push(vector_stats(tau));
        vector_hashes.insert(emotion.as_str().to_string(), tau.tensor_hash());
    }
    let estimators: BTreeMap<Emotion, IntensityEstimator> = if alphas.len() >= 3 {
        emotions
            .iter()
            .map(|&e| Ok((e, IntensityEstimator::from_corpus(inputs.corpus, e)?)))
            .collect::<Result<_>>()?
    } else {
        log::warn!(
            "scenario {}: {} distinct α values, skipping intensity ordering",
            spec.name,
            alphas.len()
        );
        BTreeMap::new()
    };

    let per_target: Vec<TargetResult> = targets
        .par_iter()
        .map(|t| run_target(t, spec, &emotions, &alphas, &merged, &pre, &estimators, inputs))
        .collect::<Result<_>>()?;

    let mut secs_rows = Vec::new();
    for &emotion in &emotions {
        for (k, &alpha) in alphas.iter().enumerate() {
            let values: Vec<f64> = per_target
                .iter()
                .flat_map(|r| r.secs.iter())
                .filter(|(e, i, _)| *e == emotion && *i == k)
                .flat_map(|(_, _, v)| v.iter().copied())
                .collect();
            let s = Summary::of(&values)?;
            secs_rows.push(SecsRow {
                emotion,
                alpha,
                n: s.n,
                mean: s.mean,
                half_width: s.half_width,
            });
        }
    }
    let margins = per_target.iter().flat_map(|r| r.margins.iter().cloned()).collect();
    let mut intensity = Vec::new();
    for &emotion in estimators.keys() {
        let scores: Vec<Vec<f64>> = per_target
            .iter()
            .flat_map(|r| r.scores.iter())
            .filter(|(e, _)| *e == emotion)
            .flat_map(|(_, s)| s.iter().cloned())
            .collect();
        let o = ordering_summary(&scores)?;
        intensity.push(IntensityRow {
            emotion,
            direction: estimators[&emotion].direction.to_vec(),
            confusion: o.confusion,
            mean_diagonal: o.mean_diagonal,
            monotonic_fraction: o.monotonic_fraction,
            sentences: o.sentences,
        });
    }

    let run = RunInfo {
        pretrained_hash: inputs.pretrained.tensor_hash(),
        embedder_hash: inputs.embedder.tensor_hash(),
        vector_hashes,
        ..run
    };
    Ok(ScenarioReport {
        schema_version: REPORT_SCHEMA_VERSION,
        name: spec.name.clone(),
        case: spec.case,
        vector: spec.vector.clone(),
        targets,
        emotions,
        alphas,
        test_sentences: spec.test_sentences,
        secs: secs_rows,
        margins,
        intensity,
        vector_stats: stats,
        run,
    })
}
