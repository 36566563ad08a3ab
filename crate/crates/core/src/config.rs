//! Experiment configuration: one TOML file drives the whole pipeline.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::EmbedderHyper;
use crate::error::{Error, Result};
use crate::eval::{ScenarioSpec, VectorSource};
use crate::model::ModelConfig;
use crate::synth::{CorpusConfig, FEATURE_DIM, VOCAB_SIZE};
use crate::train::TrainHyper;

/// Seed keys that must be written out in every config file.
pub const REQUIRED_SEEDS: [&str; 5] = [
    "corpus.seed",
    "model.init_seed",
    "embedder.seed",
    "train.pretrain.seed",
    "train.finetune.seed",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub init_seed: u64,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
}

fn default_embed_dim() -> usize {
    ModelConfig::default().embed_dim
}

fn default_hidden() -> usize {
    ModelConfig::default().hidden
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub pretrain: PhaseHyper,
    pub finetune: PhaseHyper,
}

/// Optimizer settings of one phase; unset values take the phase defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseHyper {
    pub seed: u64,
    pub steps: Option<usize>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub batch_size: Option<usize>,
}

impl PhaseHyper {
    fn resolve(&self, defaults: TrainHyper) -> TrainHyper {
        TrainHyper {
            steps: self.steps.unwrap_or(defaults.steps),
            learning_rate: self.learning_rate.unwrap_or(defaults.learning_rate),
            momentum: self.momentum.unwrap_or(defaults.momentum),
            batch_size: self.batch_size.unwrap_or(defaults.batch_size),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderSection {
    pub seed: u64,
    pub steps: Option<usize>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Where artifacts go; relative paths resolve against the working directory.
    /// Not part of the config hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub corpus: CorpusConfig,
    pub model: ModelSection,
    pub embedder: EmbedderSection,
    pub train: TrainSection,
    #[serde(default, rename = "scenario")]
    pub scenarios: Vec<ScenarioSpec>,
}

fn missing_seed(value: &toml::Value, dotted: &str) -> bool {
    let mut cur = value;
    for part in dotted.split('.') {
        match cur.get(part) {
            Some(v) => cur = v,
            None => return true,
        }
    }
    false
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| Error::config("<file>", e.to_string()))?;
        for key in REQUIRED_SEEDS {
            if missing_seed(&value, key) {
                return Err(Error::config(key, "missing; every seed must be set explicitly"));
            }
        }
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config("<file>", e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config { key, message } => Error::Config {
                key,
                message: format!("{message} (in {})", path.display()),
            },
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model_config().validate()?;
        self.pretrain_hyper().validate("train.pretrain")?;
        self.finetune_hyper().validate("train.finetune")?;
        let e = self.embedder_hyper();
        if e.dim == 0 {
            return Err(Error::config("embedder.dim", "must be positive"));
        }
        let mut names = std::collections::BTreeSet::new();
        for s in &self.scenarios {
            s.validate()?;
            if !names.insert(s.name.as_str()) {
                return Err(Error::config(
                    "scenario.name",
                    format!("duplicate scenario {:?}", s.name),
                ));
            }
            if let Some(e) = s.emotions.iter().find(|e| !self.corpus.emotions.contains(e)) {
                return Err(Error::config(
                    format!("scenario.{}.emotions", s.name),
                    format!("{e} is not in corpus.emotions"),
                ));
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab: VOCAB_SIZE,
            embed_dim: self.model.embed_dim,
            hidden: self.model.hidden,
            speaker_dim: self.embedder_hyper().dim,
            feature_dim: FEATURE_DIM,
        }
    }

    pub fn embedder_hyper(&self) -> EmbedderHyper {
        let d = EmbedderHyper::default();
        let e = &self.embedder;
        EmbedderHyper {
            seed: e.seed,
            steps: e.steps.unwrap_or(d.steps),
            learning_rate: e.learning_rate.unwrap_or(d.learning_rate),
            momentum: e.momentum.unwrap_or(d.momentum),
            dim: e.dim.unwrap_or(d.dim),
        }
    }

    pub fn pretrain_hyper(&self) -> TrainHyper {
        self.train
            .pretrain
            .resolve(TrainHyper::pretrain(self.train.pretrain.seed))
    }

    pub fn finetune_hyper(&self) -> TrainHyper {
        self.train
            .finetune
            .resolve(TrainHyper::finetune(self.train.finetune.seed))
    }

    /// Speakers whose single-speaker vectors some scenario asks for, sorted.
    pub fn single_speaker_sources(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .scenarios
            .iter()
            .filter_map(|s| match &s.vector {
                VectorSource::SingleSpeaker(id) => Some(id.clone()),
                VectorSource::SpeakerAgnostic => None,
            })
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// SHA-256 of the config's canonical JSON form, output directory excluded.
    pub fn hash(&self) -> String {
        let canonical = ExperimentConfig {
            output_dir: None,
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::Case;

    const MINIMAL: &str = r#"
        [corpus]
        seed = 1
        [model]
        init_seed = 2
        [embedder]
        seed = 3
        [train.pretrain]
        seed = 4
        [train.finetune]
        seed = 5
    "#;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.pretrain_hyper(), TrainHyper::pretrain(4));
        assert_eq!(cfg.finetune_hyper(), TrainHyper::finetune(5));
        assert_eq!(cfg.model_config(), ModelConfig::default());
        assert_eq!(cfg.corpus.neutral_only_speakers, 8);
        assert!(cfg.scenarios.is_empty());
    }

    #[test]
    fn every_seed_is_required() {
        for key in REQUIRED_SEEDS {
            let last = key.rsplit('.').next().unwrap();
            let section = &key[..key.len() - last.len() - 1];
            let header = format!("[{section}]");
            let text: String = MINIMAL
                .lines()
                .scan(false, |in_section, line| {
                    let t = line.trim();
                    if t.starts_with('[') {
                        *in_section = t == header;
                    }
                    let drop = *in_section && t.starts_with(&format!("{last} ="));
                    Some(if drop { String::new() } else { format!("{line}\n") })
                })
                .collect();
            match ExperimentConfig::from_toml_str(&text) {
                Err(Error::Config { key: k, .. }) => assert_eq!(k, key),
                other => panic!("{key}: {other:?}"),
            }
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\n[extra]\nx = 1\n");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("extra"), "{err}");
    }

    #[test]
    fn scenarios_parse() {
        let text = format!(
            "{MINIMAL}\n[[scenario]]\nname = \"a\"\ncase = \"cross_seen\"\nvector = {{ single_speaker = \"e00\" }}\n\
             [[scenario]]\nname = \"b\"\ncase = \"cross_unseen\"\nalphas = [0.2, 0.4, 0.6]\n"
        );
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg.scenarios[0].vector, VectorSource::SingleSpeaker("e00".into()));
        assert_eq!(cfg.scenarios[0].alphas, vec![0.1, 0.5, 0.9]);
        assert_eq!(cfg.scenarios[1].case, Case::CrossUnseen);
        assert_eq!(cfg.scenarios[1].vector, VectorSource::SpeakerAgnostic);
        assert_eq!(cfg.single_speaker_sources(), vec!["e00".to_string()]);
    }

    #[test]
    fn duplicate_scenario_names_rejected() {
        let text = format!("{MINIMAL}\n[[scenario]]\nname = \"a\"\ncase = \"same_spk\"\n[[scenario]]\nname = \"a\"\ncase = \"cross_seen\"\n");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        let mut b = a.clone();
        b.output_dir = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.corpus.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn toml_roundtrip() {
        let text = format!("output_dir = \"out\"\n{MINIMAL}\n[[scenario]]\nname = \"a\"\ncase = \"same_spk\"\n");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
    }
}
