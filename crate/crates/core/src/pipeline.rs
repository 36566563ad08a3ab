//! Stage-by-stage orchestration over an output directory.
//!
//! Every stage reads its inputs from files written by earlier stages, so the
//! stages can also be run one at a time from the command line.
//!
//! Layout under the output directory:
//!
//! ```text
//! corpus/                      profiles.json, {train,val,test}.jsonl
//! embedder.evc                 speaker encoder
//! speakers.json                per-speaker conditioning vectors
//! pretrain.evc                 multi-speaker neutral model
//! pretrain_<spk>.evc           single-speaker neutral model (baselines only)
//! ft_<emo>.evc, ft_<emo>_<spk>.evc
//! tau_<emo>.evc, tau_<emo>_<spk>.evc
//! reports/<scenario>/report.{json,md}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::arith::{extract_vector, EmotionVector};
use crate::config::ExperimentConfig;
use crate::embed::{train_embedder, EmbedderModel, EmbedderReport, SpeakerTable};
use crate::error::{Error, Result};
use crate::eval::{run_scenario, write_report, Case, RunInfo, ScenarioInputs, ScenarioReport, VectorSource};
use crate::model::init_params;
use crate::param_store::{self, ParameterSet, META_EMOTION, META_SCOPE};
use crate::synth::{Corpus, Emotion, Split, Utterance};
use crate::train::{train, TrainReport};

pub const META_CONFIG_HASH: &str = "config.hash";
pub const META_CORPUS_HASH: &str = "corpus.hash";
pub const META_EMBEDDER_HASH: &str = "embedder.hash";
pub const META_SPEAKERS: &str = "speakers";

/// File names inside an output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    root: PathBuf,
}

fn suffix(speaker: Option<&str>) -> String {
    speaker.map_or(String::new(), |s| format!("_{s}"))
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn embedder(&self) -> PathBuf {
        self.root.join("embedder.evc")
    }

    pub fn speakers(&self) -> PathBuf {
        self.root.join("speakers.json")
    }

    pub fn pretrain(&self, speaker: Option<&str>) -> PathBuf {
        self.root.join(format!("pretrain{}.evc", suffix(speaker)))
    }

    pub fn finetune(&self, emotion: Emotion, speaker: Option<&str>) -> PathBuf {
        self.root.join(format!("ft_{emotion}{}.evc", suffix(speaker)))
    }

    pub fn vector(&self, emotion: Emotion, speaker: Option<&str>) -> PathBuf {
        self.root.join(format!("tau_{emotion}{}.evc", suffix(speaker)))
    }

    pub fn report_dir(&self, scenario: &str) -> PathBuf {
        self.root.join("reports").join(scenario)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterSet> {
    param_store::load(path)
}

fn save_checkpoint(set: &ParameterSet, path: &Path) -> Result<()> {
    param_store::save(set, path)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

pub struct Pipeline {
    config: ExperimentConfig,
    layout: Layout,
    config_hash: String,
}

impl Pipeline {
    /// `out_dir` overrides the config's `output_dir`; one of them must be set.
    pub fn new(config: ExperimentConfig, out_dir: Option<PathBuf>) -> Result<Self> {
        config.validate()?;
        let root = out_dir.or_else(|| config.output_dir.clone()).ok_or_else(|| {
            Error::config(
                "output_dir",
                "missing; set it in the config or pass an output directory",
            )
        })?;
        let config_hash = config.hash();
        Ok(Self {
            config,
            layout: Layout::new(root),
            config_hash,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    fn ensure_root(&self) -> Result<()> {
        let root = self.layout.root();
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        let corpus = Corpus::load(self.layout.corpus())?;
        if corpus.config != self.config.corpus {
            return Err(Error::Contract(format!(
                "corpus in {} was generated from a different corpus section; rerun dataset-gen",
                self.layout.corpus().display()
            )));
        }
        Ok(corpus)
    }

    pub fn load_embedder(&self) -> Result<EmbedderModel> {
        EmbedderModel::from_parameter_set(load_checkpoint(&self.layout.embedder())?)
    }

    pub fn load_speakers(&self) -> Result<SpeakerTable> {
        SpeakerTable::load(self.layout.speakers())
    }

    pub fn dataset_gen(&self) -> Result<Corpus> {
        self.ensure_root()?;
        let corpus = Corpus::build(&self.config.corpus)?;
        corpus.save(self.layout.corpus())?;
        log::info!(
            "corpus: {} speakers, {}/{}/{} utterances",
            corpus.profiles.len(),
            corpus.train.len(),
            corpus.val.len(),
            corpus.test.len()
        );
        Ok(corpus)
    }

    /// Trains the speaker encoder and writes the conditioning-vector table.
    pub fn train_embedder(&self) -> Result<EmbedderReport> {
        let corpus = self.load_corpus()?;
        let (model, report) = train_embedder(&corpus, &self.config.embedder_hyper())?;
        log::info!(
            "embedder: train accuracy {:.4}, held-out accuracy {:.4}",
            report.train_accuracy,
            report.heldout_accuracy
        );
        let mut set = model.as_parameter_set().clone();
        set.set_meta(META_CONFIG_HASH, self.config_hash.clone())?;
        set.set_meta(META_CORPUS_HASH, corpus.content_hash())?;
        save_checkpoint(&set, &self.layout.embedder())?;
        let mut table = SpeakerTable::build(&model, &corpus)?;
        table.config_hash = Some(self.config_hash.clone());
        table.save(self.layout.speakers())?;
        Ok(report)
    }

    fn provenance(&self, corpus: &Corpus, table: &SpeakerTable) -> BTreeMap<String, String> {
        BTreeMap::from([
            (META_CONFIG_HASH.to_string(), self.config_hash.clone()),
            (META_CORPUS_HASH.to_string(), corpus.content_hash()),
            (META_EMBEDDER_HASH.to_string(), table.embedder_hash.clone()),
        ])
    }

    fn seen_speakers(corpus: &Corpus, speaker: Option<&str>, emotional: bool) -> Result<Vec<String>> {
        match speaker {
            Some(id) => {
                let p = corpus
                    .profile(id)
                    .ok_or_else(|| Error::invalid(format!("unknown speaker {id:?}")))?;
                if !p.seen {
                    return Err(Error::invalid(format!(
                        "{id} is an unseen speaker and may not be trained on"
                    )));
                }
                if emotional && !p.has_emotion_data {
                    return Err(Error::invalid(format!("{id} has no emotional training data")));
                }
                Ok(vec![id.to_string()])
            }
            None => Ok(corpus
                .profiles
                .iter()
                .filter(|p| p.seen && (!emotional || p.has_emotion_data))
                .map(|p| p.id.clone())
                .collect()),
        }
    }

    fn select<'a>(corpus: &'a Corpus, split: Split, speakers: &[String], emotion: Emotion) -> Vec<&'a Utterance> {
        corpus
            .utterances(split, None, Some(emotion))
            .filter(|u| speakers.contains(&u.speaker))
            .collect()
    }

    /// Neutral pretraining: multi-speaker over every seen speaker, or on one
    /// speaker's neutral data for a single-speaker baseline.
    pub fn pretrain(&self, speaker: Option<&str>) -> Result<TrainReport> {
        let corpus = self.load_corpus()?;
        let table = self.load_speakers()?;
        let speakers = Self::seen_speakers(&corpus, speaker, false)?;
        let train_utts = Self::select(&corpus, Split::Train, &speakers, Emotion::Neutral);
        let val_utts = Self::select(&corpus, Split::Val, &speakers, Emotion::Neutral);
        let model = self.config.model_config();
        let init = init_params(&model, self.config.model.init_seed)?;
        let mut meta = self.provenance(&corpus, &table);
        meta.insert(
            META_SCOPE.into(),
            if speaker.is_some() { "single" } else { "multi" }.into(),
        );
        meta.insert(META_SPEAKERS.into(), speakers.join(","));
        let (set, report) = train(
            &init,
            &model,
            &train_utts,
            &val_utts,
            &table,
            &self.config.pretrain_hyper(),
            "pretrained",
            &meta,
        )?;
        save_checkpoint(&set, &self.layout.pretrain(speaker))?;
        Ok(report)
    }

    /// Emotional fine-tuning from the matching pretrained model. Conditioning
    /// stays each speaker's neutral vector.
    pub fn finetune(&self, emotion: Emotion, speaker: Option<&str>) -> Result<TrainReport> {
        if emotion == Emotion::Neutral {
            return Err(Error::invalid("fine-tuning needs a non-neutral emotion"));
        }
        let corpus = self.load_corpus()?;
        if !corpus.config.emotions.contains(&emotion) {
            return Err(Error::invalid(format!("the corpus has no {emotion} speech")));
        }
        let table = self.load_speakers()?;
        let pre = load_checkpoint(&self.layout.pretrain(speaker))?;
        let speakers = Self::seen_speakers(&corpus, speaker, true)?;
        let train_utts = Self::select(&corpus, Split::Train, &speakers, emotion);
        let val_utts = Self::select(&corpus, Split::Val, &speakers, emotion);
        let mut meta = self.provenance(&corpus, &table);
        meta.insert(
            META_SCOPE.into(),
            if speaker.is_some() { "single" } else { "multi" }.into(),
        );
        meta.insert(META_EMOTION.into(), emotion.as_str().into());
        meta.insert(META_SPEAKERS.into(), speakers.join(","));
        let (set, report) = train(
            &pre,
            &self.config.model_config(),
            &train_utts,
            &val_utts,
            &table,
            &self.config.finetune_hyper(),
            "finetuned",
            &meta,
        )?;
        save_checkpoint(&set, &self.layout.finetune(emotion, speaker))?;
        Ok(report)
    }

    /// τ = θ_emo − θ_pre for the given fine-tune.
    pub fn extract(&self, emotion: Emotion, speaker: Option<&str>) -> Result<EmotionVector> {
        let emo = load_checkpoint(&self.layout.finetune(emotion, speaker))?;
        let pre = load_checkpoint(&self.layout.pretrain(speaker))?;
        let tau = extract_vector(&emo, &pre, emotion.as_str())?;
        let mut set = tau.into_parameter_set();
        set.set_meta(META_CONFIG_HASH, self.config_hash.clone())?;
        save_checkpoint(&set, &self.layout.vector(emotion, speaker))?;
        EmotionVector::from_parameter_set(set)
    }

    fn load_vectors(&self, source: &VectorSource, emotions: &[Emotion]) -> Result<BTreeMap<Emotion, EmotionVector>> {
        let speaker = match source {
            VectorSource::SpeakerAgnostic => None,
            VectorSource::SingleSpeaker(id) => Some(id.as_str()),
        };
        emotions
            .iter()
            .map(|&e| {
                let set = load_checkpoint(&self.layout.vector(e, speaker))?;
                Ok((e, EmotionVector::from_parameter_set(set)?))
            })
            .collect()
    }

    /// Runs the configured scenarios, optionally only those of one case.
    pub fn run_scenarios(&self, case: Option<Case>) -> Result<Vec<ScenarioReport>> {
        let specs: Vec<_> = self
            .config
            .scenarios
            .iter()
            .filter(|s| case.is_none_or(|c| s.case == c))
            .collect();
        if specs.is_empty() {
            return Err(Error::config(
                "scenario",
                match case {
                    Some(c) => format!("no scenario with case {c} in the config"),
                    None => "the config lists no scenarios".to_string(),
                },
            ));
        }
        let corpus = self.load_corpus()?;
        let embedder = self.load_embedder()?;
        let speakers = self.load_speakers()?;
        if speakers.embedder_hash != embedder.tensor_hash() {
            return Err(Error::Contract(format!(
                "{} was not produced by {}; rerun train-embedder",
                self.layout.speakers().display(),
                self.layout.embedder().display()
            )));
        }
        let pretrained = load_checkpoint(&self.layout.pretrain(None))?;
        let model = self.config.model_config();
        let seeds = BTreeMap::from([
            ("corpus".to_string(), self.config.corpus.seed),
            ("model.init".to_string(), self.config.model.init_seed),
            ("embedder".to_string(), self.config.embedder.seed),
            ("train.pretrain".to_string(), self.config.train.pretrain.seed),
            ("train.finetune".to_string(), self.config.train.finetune.seed),
        ]);
        let mut reports = Vec::with_capacity(specs.len());
        for spec in specs {
            let vectors = self.load_vectors(&spec.vector, &spec.resolved_emotions(&corpus))?;
            let inputs = ScenarioInputs {
                pretrained: &pretrained,
                model: &model,
                vectors: &vectors,
                embedder: &embedder,
                speakers: &speakers,
                corpus: &corpus,
            };
            let run = RunInfo {
                config_hash: Some(self.config_hash.clone()),
                corpus_hash: Some(corpus.content_hash()),
                seeds: seeds.clone(),
                ..RunInfo::default()
            };
            let report = run_scenario(spec, &inputs, run)?;
            let dir = self.layout.report_dir(&spec.name);
            write_report(&report, &dir)?;
            log::info!(
                "scenario {}: mean SECS margin {:.4}, wrote {}",
                spec.name,
                report.mean_margin(),
                dir.display()
            );
            reports.push(report);
        }
        Ok(reports)
    }

    /// Every stage in order, including single-speaker baselines that scenarios ask for.
    pub fn run_all(&self) -> Result<Vec<ScenarioReport>> {
        self.dataset_gen()?;
        self.train_embedder()?;
        self.pretrain(None)?;
        let emotions = self.config.corpus.emotions.clone();
        for &e in &emotions {
            self.finetune(e, None)?;
            self.extract(e, None)?;
        }
        for id in self.config.single_speaker_sources() {
            self.pretrain(Some(&id))?;
            for &e in &emotions {
                self.finetune(e, Some(&id))?;
                self.extract(e, Some(&id))?;
            }
        }
        if self.config.scenarios.is_empty() {
            return Ok(Vec::new());
        }
        self.run_scenarios(None)
    }
}
