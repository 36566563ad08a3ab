//! Minibatch SGD with momentum for the toy acoustic model.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::embed::SpeakerTable;
use crate::error::{Error, Result};
use crate::model::{Example, ModelConfig, Weights};
use crate::param_store::{ParameterSet, META_ROLE};
use crate::rng::substream;
use crate::synth::Utterance;

pub const META_STEPS: &str = "train.steps";
pub const META_SEED: &str = "train.seed";
pub const META_TRAIN_LOSS: &str = "train.loss";
pub const META_VAL_LOSS: &str = "val.loss";
pub const META_INIT_HASH: &str = "init.hash";

/// Loss above which training is aborted.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHyper {
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainHyper {
    pub fn pretrain(seed: u64) -> Self {
        Self {
            steps: 2000,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            seed,
        }
    }

    pub fn finetune(seed: u64) -> Self {
        Self {
            steps: 500,
            ..Self::pretrain(seed)
        }
    }

    pub fn validate(&self, section: &str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config(format!("{section}.batch_size"), "must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(
                format!("{section}.learning_rate"),
                "must be a positive finite number",
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("{section}.momentum"), "must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Endless stream of minibatches drawn from per-epoch shuffles.
struct BatchOrder {
    seed: u64,
    n: usize,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchOrder {
    fn new(seed: u64, n: usize) -> Self {
        let mut b = Self {
            seed,
            n,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut substream(self.seed, "batch-order", self.epoch));
        self.epoch += 1;
        self.cursor = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.cursor == self.n {
                self.reshuffle();
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }
}

pub fn examples<'a>(utts: &[&'a Utterance], speakers: &'a SpeakerTable) -> Result<Vec<Example<'a>>> {
    utts.iter()
        .map(|u| {
            Ok(Example {
                tokens: &u.tokens,
                target: &u.features,
                speaker: speakers.vector(&u.speaker)?,
            })
        })
        .collect()
}

/// Trains from `init` and returns the updated parameters with training meta.
///
/// Conditioning for every utterance is its speaker's entry in `speakers`,
/// regardless of the utterance's emotion. Work is done on an f64 copy of the
/// weights that is rounded to f32 once at the end. `meta` is merged into the
/// output after the training keys, so callers can add provenance.
#[allow(clippy::too_many_arguments)]
pub fn train(
    init: &ParameterSet,
    config: &ModelConfig,
    train_utts: &[&Utterance],
    val_utts: &[&Utterance],
    speakers: &SpeakerTable,
    hyper: &TrainHyper,
    role: &str,
    meta: &BTreeMap<String, String>,
) -> Result<(ParameterSet, TrainReport)> {
    hyper.validate("train")?;
    if train_utts.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let train_ex = examples(train_utts, speakers)?;
    let val_ex = examples(val_utts, speakers)?;
    let mut weights = Weights::from_params(config, init)?;
    let mut velocity = Weights::zeros(*config);
    let mut order = BatchOrder::new(hyper.seed, train_ex.len());

    for step in 0..hyper.steps {
        let batch: Vec<Example<'_>> = order
            .next_batch(hyper.batch_size)
            .into_iter()
            .map(|i| train_ex[i])
            .collect();
        let (loss, grad) = weights.loss_and_grad(&batch)?;
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(Error::Divergence { step, loss });
        }
        velocity.scale(hyper.momentum);
        velocity.add_assign(&grad);
        let mut update = velocity.clone();
        update.scale(-hyper.learning_rate);
        weights.add_assign(&update);
        if step % 250 == 0 {
            log::debug!("{role} step {step}: batch loss {loss:.5}");
        }
    }

    let mut out = if hyper.steps == 0 {
        init.without_meta()
    } else {
        weights.to_params()?
    };
    let rounded = Weights::from_params(config, &out)?;
    let train_loss = rounded.loss(&train_ex)?;
    let val_loss = if val_ex.is_empty() {
        None
    } else {
        Some(rounded.loss(&val_ex)?)
    };
    out.set_meta(META_ROLE, role)?;
    out.set_meta(META_STEPS, hyper.steps.to_string())?;
    out.set_meta(META_SEED, hyper.seed.to_string())?;
    out.set_meta(META_TRAIN_LOSS, format!("{train_loss}"))?;
    if let Some(v) = val_loss {
        out.set_meta(META_VAL_LOSS, format!("{v}"))?;
    }
    out.set_meta(META_INIT_HASH, init.tensor_hash())?;
    for (k, v) in meta {
        out.set_meta(k.clone(), v.clone())?;
    }
    log::info!(
        "{role}: {} steps, train MSE {train_loss:.5}, val MSE {}",
        hyper.steps,
        val_loss.map_or("n/a".to_string(), |v| format!("{v:.5}"))
    );
    Ok((
        out,
        TrainReport {
            steps: hyper.steps,
            train_loss,
            val_loss,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::SpeakerEntry;
    use crate::model::init_params;
    use crate::synth::{Corpus, CorpusConfig, Split};

    fn setup() -> (Corpus, SpeakerTable) {
        let corpus = Corpus::build(&CorpusConfig {
            neutral_only_speakers: 2,
            emotional_speakers: 1,
            unseen_speakers: 0,
            utterances_per_speaker: 20,
            utterances_per_emotion: 10,
            ..CorpusConfig::default()
        })
        .unwrap();
        // Arbitrary fixed conditioning vectors; training only needs a lookup.
        let speakers = corpus
            .profiles
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut values = vec![0.0; 16];
                values[i] = 1.0;
                let entry = SpeakerEntry {
                    split: Split::Train,
                    utterances: 1,
                    values,
                };
                (p.id.clone(), entry)
            })
            .collect();
        let table = SpeakerTable {
            schema_version: 1,
            embedder_hash: String::new(),
            config_hash: None,
            speakers,
        };
        (corpus, table)
    }

    fn hyper(steps: usize) -> TrainHyper {
        TrainHyper {
            steps,
            batch_size: 8,
            ..TrainHyper::pretrain(5)
        }
    }

    #[test]
    fn zero_steps_keeps_tensors_bit_identical() {
        let (corpus, table) = setup();
        let cfg = ModelConfig::default();
        let init = init_params(&cfg, 1).unwrap();
        let utts: Vec<&Utterance> = corpus.train.iter().collect();
        let (out, report) = train(
            &init,
            &cfg,
            &utts,
            &[],
            &table,
            &hyper(0),
            "pretrained",
            &BTreeMap::new(),
        )
        .unwrap();
        assert_eq!(out.tensor_hash(), init.tensor_hash());
        assert_eq!(out.meta_value(META_STEPS), Some("0"));
        assert_eq!(out.meta_value(META_ROLE), Some("pretrained"));
        assert!(report.val_loss.is_none());
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let (corpus, table) = setup();
        let cfg = ModelConfig::default();
        let init = init_params(&cfg, 1).unwrap();
        let utts: Vec<&Utterance> = corpus.train.iter().collect();
        let val: Vec<&Utterance> = corpus.val.iter().collect();
        let meta = BTreeMap::from([("config.hash".to_string(), "abc".to_string())]);
        let (_, before) = train(&init, &cfg, &utts, &val, &table, &hyper(0), "pretrained", &meta).unwrap();
        let (a, after) = train(&init, &cfg, &utts, &val, &table, &hyper(60), "pretrained", &meta).unwrap();
        let (b, _) = train(&init, &cfg, &utts, &val, &table, &hyper(60), "pretrained", &meta).unwrap();
        assert!(after.train_loss < before.train_loss);
        assert_eq!(a, b);
        assert_eq!(a.meta_value("config.hash"), Some("abc"));
        assert_eq!(a.meta_value(META_INIT_HASH), Some(init.tensor_hash().as_str()));
        assert!(a.is_compatible(&init));
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let (corpus, table) = setup();
        let cfg = ModelConfig::default();
        let init = init_params(&cfg, 1).unwrap();
        let utts: Vec<&Utterance> = corpus.train.iter().collect();
        let h = TrainHyper {
            learning_rate: 1e4,
            ..hyper(200)
        };
        let err = train(&init, &cfg, &utts, &[], &table, &h, "pretrained", &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }

    #[test]
    fn missing_speaker_vector_is_an_error() {
        let (corpus, mut table) = setup();
        table.speakers.remove("n00");
        let cfg = ModelConfig::default();
        let init = init_params(&cfg, 1).unwrap();
        let utts: Vec<&Utterance> = corpus.train.iter().collect();
        assert!(train(
            &init,
            &cfg,
            &utts,
            &[],
            &table,
            &hyper(1),
            "pretrained",
            &BTreeMap::new()
        )
        .is_err());
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let mut order = BatchOrder::new(3, 10);
        let mut seen = order.next_batch(4);
        seen.extend(order.next_batch(6));
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}
