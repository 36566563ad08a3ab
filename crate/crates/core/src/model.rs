//! Tiny token → feature-frame regressor with additive speaker conditioning.
//!
//! Per token `t` of an utterance of length `n`:
//!
//! ```text
//! x  = [emb[token_t]; t / n]
//! h  = tanh(W1·x + b1)
//! h' = h + P·s                      (s = speaker embedding)
//! y  = W3·tanh(W2·h' + b2) + b3     (y ∈ R^11)
//! ```
//!
//! Parameters live in a [`ParameterSet`] as f32; all computation here is f64.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param_store::{ParameterSet, TensorEntry};
use crate::rng::substream;
use crate::synth::{Frame, FEATURE_DIM, VOCAB_SIZE};

pub const EMB: &str = "emb";
pub const ENC_W1: &str = "enc.w1";
pub const ENC_B1: &str = "enc.b1";
pub const SPK_PROJ: &str = "spk.proj";
pub const DEC_W2: &str = "dec.w2";
pub const DEC_B2: &str = "dec.b2";
pub const DEC_W3: &str = "dec.w3";
pub const DEC_B3: &str = "dec.b3";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub speaker_dim: usize,
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: VOCAB_SIZE,
            embed_dim: 16,
            hidden: 64,
            speaker_dim: 16,
            feature_dim: FEATURE_DIM,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab != VOCAB_SIZE {
            return Err(Error::config("model.vocab", format!("must be {VOCAB_SIZE}")));
        }
        if self.feature_dim != FEATURE_DIM {
            return Err(Error::config("model.feature_dim", format!("must be {FEATURE_DIM}")));
        }
        for (key, v) in [
            ("model.embed_dim", self.embed_dim),
            ("model.hidden", self.hidden),
            ("model.speaker_dim", self.speaker_dim),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        Ok(())
    }

    /// The fixed name → shape layout. A pure function of the config.
    pub fn tensor_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (e, h, s, d) = (self.embed_dim, self.hidden, self.speaker_dim, self.feature_dim);
        vec![
            (EMB, vec![self.vocab, e]),
            (ENC_W1, vec![h, e + 1]),
            (ENC_B1, vec![h]),
            (SPK_PROJ, vec![h, s]),
            (DEC_W2, vec![h, h]),
            (DEC_B2, vec![h]),
            (DEC_W3, vec![d, h]),
            (DEC_B3, vec![d]),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensor_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParameterSet> {
    config.validate()?;
    let mut set = ParameterSet::new();
    for (index, (name, shape)) in config.tensor_shapes().into_iter().enumerate() {
        let numel: usize = shape.iter().product();
        let data = if shape.len() == 1 {
            vec![0.0; numel]
        } else {
            let bound = xavier_bound(&shape);
            let mut rng = substream(seed, "init", index as u64);
            (0..numel)
                .map(|_| loop {
                    let v = rng.random_range(-bound..bound) as f32;
                    if (v as f64).abs() < bound {
                        break v;
                    }
                })
                .collect()
        };
        set.insert(TensorEntry::new(name, shape, data)?)?;
    }
    set.set_meta("init.seed", seed.to_string())?;
    Ok(set)
}

/// `sqrt(6 / (fan_in + fan_out))` for a `[fan_out, fan_in]` matrix.
pub fn xavier_bound(shape: &[usize]) -> f64 {
    (6.0 / (shape[0] + shape[1]) as f64).sqrt()
}

/// f64 working copy of the model parameters; also used for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub config: ModelConfig,
    pub emb: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub proj: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

/// One utterance of a training or evaluation batch.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub tokens: &'a [usize],
    pub target: &'a [Frame],
    pub speaker: &'a [f64],
}

/// Per-token activations kept for backpropagation, each flattened `[tokens, dim]`.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    pub inputs: Vec<f64>,
    pub hidden: Vec<f64>,
    pub conditioned: Vec<f64>,
    pub decoder: Vec<f64>,
    pub outputs: Vec<Frame>,
}

fn matvec(w: &[f64], x: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
    if let Some(b) = bias {
        out.iter_mut().zip(b).for_each(|(o, b)| *o += b);
    }
}

impl Weights {
    pub fn zeros(config: ModelConfig) -> Self {
        let (v, e, h, s, d) = (
            config.vocab,
            config.embed_dim,
            config.hidden,
            config.speaker_dim,
            config.feature_dim,
        );
        Self {
            config,
            emb: vec![0.0; v * e],
            w1: vec![0.0; h * (e + 1)],
            b1: vec![0.0; h],
            proj: vec![0.0; h * s],
            w2: vec![0.0; h * h],
            b2: vec![0.0; h],
            w3: vec![0.0; d * h],
            b3: vec![0.0; d],
        }
    }

    pub fn from_params(config: &ModelConfig, params: &ParameterSet) -> Result<Self> {
        config.validate()?;
        let expected = config.tensor_shapes();
        if params.len() != expected.len() {
            let names: Vec<_> = params.names().collect();
            return Err(Error::invalid(format!(
                "parameter set has tensors {names:?}, expected exactly the model layout"
            )));
        }
        let mut w = Self::zeros(*config);
        for ((name, shape), slot) in expected.iter().zip(w.slots_mut()) {
            let entry = params
                .get(name)
                .ok_or_else(|| Error::invalid(format!("parameter set lacks tensor {name:?}")))?;
            if entry.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    name: name.to_string(),
                    expected: shape.clone(),
                    actual: entry.shape().to_vec(),
                });
            }
            *slot = entry.data().iter().map(|&v| v as f64).collect();
        }
        Ok(w)
    }

    /// Rounds every value to f32 once.
    pub fn to_params(&self) -> Result<ParameterSet> {
        let mut set = ParameterSet::new();
        for ((name, shape), data) in self.config.tensor_shapes().into_iter().zip(self.slots()) {
            let data = data.iter().map(|&v| v as f32).collect();
            set.insert(TensorEntry::new(name, shape, data)?)?;
        }
        Ok(set)
    }

    /// Tensors in the order of [`ModelConfig::tensor_shapes`].
    pub fn slots(&self) -> [&Vec<f64>; 8] {
        [
            &self.emb, &self.w1, &self.b1, &self.proj, &self.w2, &self.b2, &self.w3, &self.b3,
        ]
    }

    pub fn slots_mut(&mut self) -> [&mut Vec<f64>; 8] {
        [
            &mut self.emb,
            &mut self.w1,
            &mut self.b1,
            &mut self.proj,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    pub fn named_slots(&self) -> Vec<(&'static str, &Vec<f64>)> {
        self.config
            .tensor_shapes()
            .into_iter()
            .map(|(n, _)| n)
            .zip(self.slots())
            .collect()
    }

    pub fn add_assign(&mut self, other: &Weights) {
        for (a, b) in self.slots_mut().into_iter().zip(other.slots()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for a in self.slots_mut() {
            a.iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slots().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    fn check_inputs(&self, tokens: &[usize], speaker: &[f64]) -> Result<()> {
        if speaker.len() != self.config.speaker_dim {
            return Err(Error::Shape {
                name: "speaker embedding".into(),
                expected: vec![self.config.speaker_dim],
                actual: vec![speaker.len()],
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary")));
        }
        Ok(())
    }

    pub fn forward(&self, tokens: &[usize], speaker: &[f64]) -> Result<Vec<Frame>> {
        Ok(self.forward_trace(tokens, speaker)?.outputs)
    }

    pub fn forward_trace(&self, tokens: &[usize], speaker: &[f64]) -> Result<ForwardTrace> {
        self.check_inputs(tokens, speaker)?;
        let ModelConfig {
            embed_dim: e,
            hidden: h,
            ..
        } = self.config;
        let n = tokens.len();
        let mut cond = vec![0.0; h];
        matvec(&self.proj, speaker, None, &mut cond);

        let mut trace = ForwardTrace {
            inputs: vec![0.0; n * (e + 1)],
            hidden: vec![0.0; n * h],
            conditioned: vec![0.0; n * h],
            decoder: vec![0.0; n * h],
            outputs: vec![[0.0; FEATURE_DIM]; n],
        };
        for (t, &tok) in tokens.iter().enumerate() {
            let x = &mut trace.inputs[t * (e + 1)..(t + 1) * (e + 1)];
            x[..e].copy_from_slice(&self.emb[tok * e..(tok + 1) * e]);
            x[e] = t as f64 / n as f64;

            let hid = &mut trace.hidden[t * h..(t + 1) * h];
            matvec(&self.w1, x, Some(&self.b1), hid);
            hid.iter_mut().for_each(|v| *v = v.tanh());

            let hp = &mut trace.conditioned[t * h..(t + 1) * h];
            hp.iter_mut()
                .zip(hid.iter().zip(&cond))
                .for_each(|(o, (a, b))| *o = a + b);

            let z = &mut trace.decoder[t * h..(t + 1) * h];
            matvec(&self.w2, hp, Some(&self.b2), z);
            z.iter_mut().for_each(|v| *v = v.tanh());

            matvec(&self.w3, z, Some(&self.b3), &mut trace.outputs[t]);
        }
        Ok(trace)
    }

    /// Mean squared error over all tokens and feature dims of the batch.
    pub fn loss(&self, batch: &[Example<'_>]) -> Result<f64> {
        let (sq, count) = batch.iter().try_fold((0.0, 0usize), |(sq, count), ex| {
            let out = self.forward(ex.tokens, ex.speaker)?;
            check_target(ex)?;
            let s: f64 = out
                .iter()
                .zip(ex.target)
                .flat_map(|(y, t)| y.iter().zip(t).map(|(a, b)| (a - b) * (a - b)))
                .sum();
            Ok::<_, Error>((sq + s, count + ex.tokens.len()))
        })?;
        if count == 0 {
            return Err(Error::invalid("loss over an empty batch"));
        }
        Ok(sq / (count * self.config.feature_dim) as f64)
    }

    /// MSE and its gradient. Utterances are evaluated independently (in
    /// parallel when a pool is available) and their gradients summed in batch
    /// order, so the result is bit-identical for any thread count.
    pub fn loss_and_grad(&self, batch: &[Example<'_>]) -> Result<(f64, Weights)> {
        let per_utt: Vec<(f64, Weights)> = batch
            .par_iter()
            .map(|ex| self.utterance_grad(ex))
            .collect::<Result<_>>()?;
        let count: usize = batch.iter().map(|ex| ex.tokens.len()).sum();
        if count == 0 {
            return Err(Error::invalid("loss over an empty batch"));
        }
        let mut grad = Weights::zeros(self.config);
        let mut sq = 0.0;
        for (s, g) in &per_utt {
            sq += s;
            grad.add_assign(g);
        }
        let denom = (count * self.config.feature_dim) as f64;
        grad.scale(1.0 / denom);
        let loss = sq / denom;
        if !loss.is_finite() || !grad.is_finite() {
            let tensor = grad
                .named_slots()
                .into_iter()
                .find(|(_, s)| s.iter().any(|v| !v.is_finite()))
                .map(|(n, _)| n.to_string())
                .unwrap_or_else(|| "loss".into());
            return Err(Error::NonFinite { tensor });
        }
        Ok((loss, grad))
    }

    /// Sum of squared errors of one utterance and its (unnormalized) gradient.
    // Index loops keep the backward pass readable against the forward math.
    #[allow(clippy::needless_range_loop)]
    fn utterance_grad(&self, ex: &Example<'_>) -> Result<(f64, Weights)> {
        check_target(ex)?;
        let trace = self.forward_trace(ex.tokens, ex.speaker)?;
        let ModelConfig {
            embed_dim: e,
            hidden: h,
            speaker_dim: s,
            feature_dim: d,
            ..
        } = self.config;
        let mut g = Weights::zeros(self.config);
        let mut sq = 0.0;
        let mut dcond = vec![0.0; h];
        let mut dz = vec![0.0; h];
        let mut dhp = vec![0.0; h];
        let mut da1 = vec![0.0; h];

        for (t, &tok) in ex.tokens.iter().enumerate() {
            let x = &trace.inputs[t * (e + 1)..(t + 1) * (e + 1)];
            let hid = &trace.hidden[t * h..(t + 1) * h];
            let hp = &trace.conditioned[t * h..(t + 1) * h];
            let z = &trace.decoder[t * h..(t + 1) * h];

            let mut dy = [0.0; FEATURE_DIM];
            for k in 0..d {
                let r = trace.outputs[t][k] - ex.target[t][k];
                sq += r * r;
                dy[k] = 2.0 * r;
            }

            dz.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..d {
                g.b3[k] += dy[k];
                let row = &self.w3[k * h..(k + 1) * h];
                let grow = &mut g.w3[k * h..(k + 1) * h];
                for j in 0..h {
                    grow[j] += dy[k] * z[j];
                    dz[j] += row[j] * dy[k];
                }
            }

            dhp.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..h {
                let da2 = dz[j] * (1.0 - z[j] * z[j]);
                if da2 == 0.0 {
                    continue;
                }
                g.b2[j] += da2;
                let row = &self.w2[j * h..(j + 1) * h];
                let grow = &mut g.w2[j * h..(j + 1) * h];
                for i in 0..h {
                    grow[i] += da2 * hp[i];
                    dhp[i] += row[i] * da2;
                }
            }

            for i in 0..h {
                dcond[i] += dhp[i];
                da1[i] = dhp[i] * (1.0 - hid[i] * hid[i]);
            }

            let demb = &mut g.emb[tok * e..(tok + 1) * e];
            for i in 0..h {
                let a = da1[i];
                g.b1[i] += a;
                let row = &self.w1[i * (e + 1)..(i + 1) * (e + 1)];
                let grow = &mut g.w1[i * (e + 1)..(i + 1) * (e + 1)];
                for c in 0..=e {
                    grow[c] += a * x[c];
                }
                for c in 0..e {
                    demb[c] += row[c] * a;
                }
            }
        }

        for i in 0..h {
            let grow = &mut g.proj[i * s..(i + 1) * s];
            for c in 0..s {
                grow[c] += dcond[i] * ex.speaker[c];
            }
        }
        Ok((sq, g))
    }

    /// Upper bound on how much any output frame moves per unit change of the
    /// speaker embedding: `‖W3‖·‖W2‖·‖P‖` with Frobenius norms (tanh is 1-Lipschitz).
    pub fn speaker_lipschitz_bound(&self) -> f64 {
        let fro = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        fro(&self.w3) * fro(&self.w2) * fro(&self.proj)
    }
}

fn check_target(ex: &Example<'_>) -> Result<()> {
    if ex.target.len() != ex.tokens.len() {
        return Err(Error::invalid(format!(
            "target has {} frames for {} tokens",
            ex.target.len(),
            ex.tokens.len()
        )));
    }
    Ok(())
}

/// Convenience wrapper: forward pass straight from a parameter set.
pub fn forward(config: &ModelConfig, params: &ParameterSet, tokens: &[usize], speaker: &[f64]) -> Result<Vec<Frame>> {
    Weights::from_params(config, params)?.forward(tokens, speaker)
}
