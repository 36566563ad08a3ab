//! Deterministic synthetic multi-speaker, multi-emotion corpora.
//!
//! Each utterance is a token sequence with one 11-dim frame per token:
//! `[log-duration, log-F0, log-energy, envelope(8)]`. Frames come from a closed
//! form (token contribution + speaker offsets + intensity-scaled emotion shift)
//! plus Gaussian observation noise drawn from a per-utterance substream.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::substream;

pub const VOCAB_SIZE: usize = 32;
pub const ENVELOPE_DIM: usize = 8;
pub const FEATURE_DIM: usize = 3 + ENVELOPE_DIM;
pub const MIN_TOKENS: usize = 4;
pub const MAX_TOKENS: usize = 24;
pub const NOISE_STD: f64 = 0.1;

pub const F_LOG_DURATION: usize = 0;
pub const F_LOG_F0: usize = 1;
pub const F_LOG_ENERGY: usize = 2;
pub const F_ENVELOPE: usize = 3;

const CORPUS_SCHEMA_VERSION: u32 = 1;

pub type Frame = [f64; FEATURE_DIM];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emotion {
    Neutral,
    Angry,
    Sad,
    Happy,
}

impl Emotion {
    pub const EMOTIONAL: [Emotion; 3] = [Emotion::Angry, Emotion::Sad, Emotion::Happy];

    pub fn as_str(self) -> &'static str {
        match self {
            Emotion::Neutral => "neutral",
            Emotion::Angry => "angry",
            Emotion::Sad => "sad",
            Emotion::Happy => "happy",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Emotion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neutral" => Ok(Emotion::Neutral),
            "angry" => Ok(Emotion::Angry),
            "sad" => Ok(Emotion::Sad),
            "happy" => Ok(Emotion::Happy),
            other => Err(Error::invalid(format!(
                "unknown emotion {other:?} (expected neutral, angry, sad or happy)"
            ))),
        }
    }
}

/// Parametric emotion style: shifts applied at full intensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmotionTransform {
    pub label: Emotion,
    pub delta_log_f0: f64,
    pub delta_log_energy: f64,
    pub delta_log_rate: f64,
    pub delta_tilt: [f64; ENVELOPE_DIM],
}

impl EmotionTransform {
    pub fn for_emotion(label: Emotion) -> Self {
        let bands = |lo: usize, hi: usize, v: f64| {
            let mut t = [0.0; ENVELOPE_DIM];
            t[lo..hi].iter_mut().for_each(|x| *x = v);
            t
        };
        let (f0, energy, rate, tilt) = match label {
            Emotion::Neutral => (0.0, 0.0, 0.0, [0.0; ENVELOPE_DIM]),
            Emotion::Angry => (0.30, 0.40, 0.10, bands(4, 8, 0.2)),
            Emotion::Sad => (-0.25, -0.30, -0.15, bands(4, 8, -0.2)),
            Emotion::Happy => (0.20, 0.20, 0.10, bands(2, 6, 0.1)),
        };
        Self {
            label,
            delta_log_f0: f0,
            delta_log_energy: energy,
            delta_log_rate: rate,
            delta_tilt: tilt,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.delta_log_f0 == 0.0
            && self.delta_log_energy == 0.0
            && self.delta_log_rate == 0.0
            && self.delta_tilt.iter().all(|&v| v == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub id: String,
    pub base_log_f0: f64,
    pub rate: f64,
    pub tilt: [f64; ENVELOPE_DIM],
    /// Speaker-specific envelope shift that accompanies any emotional rendering.
    pub emotion_style: [f64; ENVELOPE_DIM],
    pub seen: bool,
    pub has_emotion_data: bool,
}

/// Per-token intrinsic contributions, drawn once per corpus seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenTable {
    pub log_duration: Vec<f64>,
    pub log_f0: Vec<f64>,
    pub log_energy: Vec<f64>,
    pub envelope: Vec<[f64; ENVELOPE_DIM]>,
}

impl TokenTable {
    pub fn generate(seed: u64) -> Self {
        let mut rng = substream(seed, "token-table", 0);
        let n = |std: f64| Normal::new(0.0, std).expect("valid std");
        let (dur, f0, en, env) = (n(0.3), n(0.2), n(0.3), n(0.3));
        let mut table = TokenTable {
            log_duration: Vec::with_capacity(VOCAB_SIZE),
            log_f0: Vec::with_capacity(VOCAB_SIZE),
            log_energy: Vec::with_capacity(VOCAB_SIZE),
            envelope: Vec::with_capacity(VOCAB_SIZE),
        };
        for _ in 0..VOCAB_SIZE {
            table.log_duration.push(dur.sample(&mut rng));
            table.log_f0.push(f0.sample(&mut rng));
            table.log_energy.push(en.sample(&mut rng));
            let mut e = [0.0; ENVELOPE_DIM];
            e.iter_mut().for_each(|x| *x = env.sample(&mut rng));
            table.envelope.push(e);
        }
        table
    }
}

/// Noise-free closed-form frames.
pub fn render_clean(
    table: &TokenTable,
    tokens: &[usize],
    speaker: &SpeakerProfile,
    emotion: &EmotionTransform,
    intensity: f64,
) -> Result<Vec<Frame>> {
    if !(0.0..=1.0).contains(&intensity) {
        return Err(Error::invalid(format!("intensity must lie in [0, 1], got {intensity}")));
    }
    let style_weight = if emotion.label == Emotion::Neutral {
        0.0
    } else {
        intensity
    };
    tokens
        .iter()
        .map(|&tok| {
            if tok >= VOCAB_SIZE {
                return Err(Error::invalid(format!("token id {tok} outside vocabulary")));
            }
            let mut f = [0.0; FEATURE_DIM];
            f[F_LOG_DURATION] =
                (1.0 / speaker.rate).ln() + table.log_duration[tok] - intensity * emotion.delta_log_rate;
            f[F_LOG_F0] = speaker.base_log_f0 + table.log_f0[tok] + intensity * emotion.delta_log_f0;
            f[F_LOG_ENERGY] = table.log_energy[tok] + intensity * emotion.delta_log_energy;
            for b in 0..ENVELOPE_DIM {
                f[F_ENVELOPE + b] = speaker.tilt[b]
                    + table.envelope[tok][b]
                    + intensity * emotion.delta_tilt[b]
                    + style_weight * speaker.emotion_style[b];
            }
            Ok(f)
        })
        .collect()
}

/// Closed-form frames plus N(0, σ²) observation noise, σ = [`NOISE_STD`].
pub fn render_features<R: Rng + ?Sized>(
    table: &TokenTable,
    tokens: &[usize],
    speaker: &SpeakerProfile,
    emotion: &EmotionTransform,
    intensity: f64,
    rng: &mut R,
) -> Result<Vec<Frame>> {
    let mut frames = render_clean(table, tokens, speaker, emotion, intensity)?;
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    for f in &mut frames {
        for v in f.iter_mut() {
            *v += noise.sample(rng);
        }
    }
    Ok(frames)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    pub emotion: Emotion,
    pub intensity: f64,
    pub tokens: Vec<usize>,
    pub features: Vec<Frame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub neutral_only_speakers: usize,
    pub emotional_speakers: usize,
    pub unseen_speakers: usize,
    /// Neutral utterances per speaker.
    pub utterances_per_speaker: usize,
    /// Utterances per emotion for each emotional speaker.
    pub utterances_per_emotion: usize,
    pub emotions: Vec<Emotion>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 2025,
            neutral_only_speakers: 8,
            emotional_speakers: 4,
            unseen_speakers: 2,
            utterances_per_speaker: 200,
            utterances_per_emotion: 200,
            emotions: Emotion::EMOTIONAL.to_vec(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.neutral_only_speakers + self.emotional_speakers < 2 {
            return Err(Error::config(
                "corpus",
                "need at least two seen speakers to train a speaker embedder",
            ));
        }
        if self.utterances_per_speaker < 3 {
            return Err(Error::config(
                "corpus.utterances_per_speaker",
                "need at least 3 utterances per speaker to fill train/val/test",
            ));
        }
        if self.emotional_speakers > 0 && self.utterances_per_emotion < 3 {
            return Err(Error::config(
                "corpus.utterances_per_emotion",
                "need at least 3 utterances per emotion to fill train/val/test",
            ));
        }
        if self.emotions.contains(&Emotion::Neutral) {
            return Err(Error::config(
                "corpus.emotions",
                "list only non-neutral emotions; neutral data is always generated",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Sizes of the (train, val, test) portions for `n` utterances: 5% val, 5% test.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let held = ((n as f64) * 0.05).round().max(1.0) as usize;
    let held = held.min(n / 3);
    (n - 2 * held, held, held)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ProfilesFile {
    schema_version: u32,
    config: CorpusConfig,
    token_table: TokenTable,
    speakers: Vec<SpeakerProfile>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub token_table: TokenTable,
    pub profiles: Vec<SpeakerProfile>,
    pub train: Vec<Utterance>,
    pub val: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

fn generate_profile(seed: u64, index: usize, id: String, seen: bool, has_emotion_data: bool) -> SpeakerProfile {
    let mut rng = substream(seed, "speaker-profile", index as u64);
    let tilt_dist = Normal::new(0.0, 0.5).expect("valid std");
    let style_dist = Normal::new(0.0, 0.15).expect("valid std");
    let base_log_f0 = 5.0 + rng.random_range(-0.4..0.4);
    let rate = rng.random_range(-0.25f64..0.25).exp();
    let mut tilt = [0.0; ENVELOPE_DIM];
    tilt.iter_mut().for_each(|x| *x = tilt_dist.sample(&mut rng));
    let mut emotion_style = [0.0; ENVELOPE_DIM];
    emotion_style.iter_mut().for_each(|x| *x = style_dist.sample(&mut rng));
    SpeakerProfile {
        id,
        base_log_f0,
        rate,
        tilt,
        emotion_style,
        seen,
        has_emotion_data,
    }
}

impl Corpus {
    pub fn build(config: &CorpusConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let token_table = TokenTable::generate(seed);

        let mut profiles = Vec::new();
        let groups = [
            ("n", config.neutral_only_speakers, true, false),
            ("e", config.emotional_speakers, true, true),
            ("u", config.unseen_speakers, false, false),
        ];
        for (prefix, count, seen, emo) in groups {
            for k in 0..count {
                let index = profiles.len();
                profiles.push(generate_profile(seed, index, format!("{prefix}{k:02}"), seen, emo));
            }
        }

        let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
        let length = Uniform::new_inclusive(MIN_TOKENS, MAX_TOKENS).expect("valid range");
        let token = Uniform::new(0, VOCAB_SIZE).expect("valid range");
        for (spk_index, profile) in profiles.iter().enumerate() {
            let mut plan = vec![(Emotion::Neutral, config.utterances_per_speaker)];
            if profile.has_emotion_data {
                plan.extend(config.emotions.iter().map(|&e| (e, config.utterances_per_emotion)));
            }
            for (emotion, count) in plan {
                let transform = EmotionTransform::for_emotion(emotion);
                let intensity = if emotion == Emotion::Neutral { 0.0 } else { 1.0 };
                let mut utts = Vec::with_capacity(count);
                for i in 0..count {
                    let stream = ((spk_index as u64) << 40) | (emotion.index() << 32) | i as u64;
                    let mut rng = substream(seed, "utterance", stream);
                    let len = length.sample(&mut rng);
                    let tokens: Vec<usize> = (0..len).map(|_| token.sample(&mut rng)).collect();
                    let features = render_features(&token_table, &tokens, profile, &transform, intensity, &mut rng)?;
                    utts.push(Utterance {
                        id: format!("{}_{}_{i:04}", profile.id, emotion),
                        speaker: profile.id.clone(),
                        emotion,
                        intensity,
                        tokens,
                        features,
                    });
                }
                if !profile.seen {
                    test.extend(utts);
                    continue;
                }
                let (n_train, n_val, _) = split_counts(count);
                let mut it = utts.into_iter();
                train.extend(it.by_ref().take(n_train));
                val.extend(it.by_ref().take(n_val));
                test.extend(it);
            }
        }
        Ok(Corpus {
            config: config.clone(),
            token_table,
            profiles,
            train,
            val,
            test,
        })
    }

    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn profile(&self, id: &str) -> Option<&SpeakerProfile> {
        self.profiles.iter().find(|p| p.id == id)
    }

    pub fn utterances<'a>(
        &'a self,
        split: Split,
        speaker: Option<&'a str>,
        emotion: Option<Emotion>,
    ) -> impl Iterator<Item = &'a Utterance> + 'a {
        self.split(split)
            .iter()
            .filter(move |u| speaker.is_none_or(|s| u.speaker == s) && emotion.is_none_or(|e| u.emotion == e))
    }

    fn profiles_json(&self) -> Vec<u8> {
        let file = ProfilesFile {
            schema_version: CORPUS_SCHEMA_VERSION,
            config: self.config.clone(),
            token_table: self.token_table.clone(),
            speakers: self.profiles.clone(),
        };
        let mut bytes = serde_json::to_vec_pretty(&file).expect("profiles serialize");
        bytes.push(b'\n');
        bytes
    }

    fn split_jsonl(utts: &[Utterance]) -> Vec<u8> {
        let mut out = Vec::new();
        for u in utts {
            serde_json::to_writer(&mut out, u).expect("utterance serializes");
            out.push(b'\n');
        }
        out
    }

    /// The serialized files as `(file name, bytes)`.
    pub fn serialize(&self) -> Vec<(&'static str, Vec<u8>)> {
        vec![
            ("profiles.json", self.profiles_json()),
            ("train.jsonl", Self::split_jsonl(&self.train)),
            ("val.jsonl", Self::split_jsonl(&self.val)),
            ("test.jsonl", Self::split_jsonl(&self.test)),
        ]
    }

    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, bytes) in self.serialize() {
            hasher.update(name.as_bytes());
            hasher.update((bytes.len() as u64).to_le_bytes());
            hasher.update(&bytes);
        }
        hex::encode(hasher.finalize())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, bytes) in self.serialize() {
            let path = dir.join(name);
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("profiles.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let profiles: ProfilesFile = serde_json::from_slice(&bytes).map_err(|source| Error::Json {
            path: path.clone(),
            source,
        })?;
        if profiles.schema_version != CORPUS_SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "{}: unsupported corpus schema version {}",
                path.display(),
                profiles.schema_version
            )));
        }
        let read_split = |name: &str| -> Result<Vec<Utterance>> {
            let path = dir.join(name);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            text.lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| {
                    serde_json::from_str(l).map_err(|source| Error::Json {
                        path: path.clone(),
                        source,
                    })
                })
                .collect()
        };
        Ok(Corpus {
            config: profiles.config,
            token_table: profiles.token_table,
            profiles: profiles.speakers,
            train: read_split("train.jsonl")?,
            val: read_split("val.jsonl")?,
            test: read_split("test.jsonl")?,
        })
    }
}
