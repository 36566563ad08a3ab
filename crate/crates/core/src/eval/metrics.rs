//! Objective metrics: SECS summaries and intensity-ordering confusion matrices.

use serde::{Deserialize, Serialize};

use crate::embed::{embed_utterance, secs, EmbedderModel};
use crate::error::{Error, Result};
use crate::synth::{render_clean, Corpus, Emotion, EmotionTransform, Frame, FEATURE_DIM, VOCAB_SIZE};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.96;

/// Mean and 95% normal-approximation half-width of a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub half_width: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("summary of an empty sample"));
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let half_width = if n < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            Z_95 * var.sqrt() / (n as f64).sqrt()
        };
        Ok(Self { n, mean, half_width })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecsSummary {
    pub per_sentence: Vec<f64>,
    pub summary: Summary,
}

/// Per-sentence SECS between two syntheses of the same sentences.
pub fn secs_eval(a: &[Vec<Frame>], b: &[Vec<Frame>], embedder: &EmbedderModel) -> Result<SecsSummary> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "sentence-set mismatch: {} vs {} sentences",
            a.len(),
            b.len()
        )));
    }
    let per_sentence = a
        .iter()
        .zip(b)
        .enumerate()
        .map(|(i, (x, y))| {
            if x.len() != y.len() {
                return Err(Error::invalid(format!(
                    "sentence-set mismatch: sentence {i} has {} vs {} frames",
                    x.len(),
                    y.len()
                )));
            }
            secs(&embed_utterance(embedder, x)?, &embed_utterance(embedder, y)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = Summary::of(&per_sentence)?;
    Ok(SecsSummary { per_sentence, summary })
}

/// Unit direction in feature space along which an emotion grows with intensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityEstimator {
    pub emotion: Emotion,
    pub direction: [f64; FEATURE_DIM],
}

impl IntensityEstimator {
    /// Mean noise-free difference between full and zero intensity over every
    /// emotional speaker of the corpus and every vocabulary token, normalized.
    pub fn from_corpus(corpus: &Corpus, emotion: Emotion) -> Result<Self> {
        if emotion == Emotion::Neutral {
            return Err(Error::invalid("neutral speech has no intensity direction"));
        }
        let transform = EmotionTransform::for_emotion(emotion);
        let tokens: Vec<usize> = (0..VOCAB_SIZE).collect();
        let mut sum = [0.0; FEATURE_DIM];
        let mut count = 0usize;
        for p in corpus.profiles.iter().filter(|p| p.has_emotion_data) {
            let full = render_clean(&corpus.token_table, &tokens, p, &transform, 1.0)?;
            let none = render_clean(&corpus.token_table, &tokens, p, &transform, 0.0)?;
            for (f, z) in full.iter().zip(&none) {
                for d in 0..FEATURE_DIM {
                    sum[d] += f[d] - z[d];
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::invalid("corpus has no emotional speakers"));
        }
        Self::from_direction(emotion, sum)
    }

    pub fn from_direction(emotion: Emotion, raw: [f64; FEATURE_DIM]) -> Result<Self> {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::invalid(format!("degenerate intensity direction for {emotion}")));
        }
        Ok(Self {
            emotion,
            direction: raw.map(|v| v / norm),
        })
    }

    /// Mean over tokens of the projection of `frames − neutral` onto the direction.
    pub fn score(&self, frames: &[Frame], neutral: &[Frame]) -> Result<f64> {
        if frames.len() != neutral.len() || frames.is_empty() {
            return Err(Error::invalid(format!(
                "intensity score needs equal non-empty frame sequences, got {} and {}",
                frames.len(),
                neutral.len()
            )));
        }
        let total: f64 = frames
            .iter()
            .zip(neutral)
            .map(|(f, n)| (0..FEATURE_DIM).map(|d| self.direction[d] * (f[d] - n[d])).sum::<f64>())
            .sum();
        Ok(total / frames.len() as f64)
    }
}

fn tied(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

/// Rank each score would be given by a listener sorting them ascending.
///
/// Members of a tied group are assigned the group's ranks shifted cyclically
/// by one, so no tied slot is ever counted as correctly placed.
pub fn predicted_ranks(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]).then(i.cmp(&j)));
    let mut ranks = vec![0; scores.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && tied(scores[order[end - 1]], scores[order[end]]) {
            end += 1;
        }
        let group = &order[start..end];
        if group.len() == 1 {
            ranks[group[0]] = start;
        } else {
            // Sort the group by true position so the shift moves every slot.
            let mut members = group.to_vec();
            members.sort_unstable();
            for (k, &m) in members.iter().enumerate() {
                ranks[m] = start + (k + 1) % members.len();
            }
        }
        start = end;
    }
    ranks
}

/// True when scores rise strictly with slot index, ties counting as failures.
pub fn strictly_increasing(scores: &[f64]) -> bool {
    scores.windows(2).all(|w| w[1] > w[0] && !tied(w[0], w[1]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingSummary {
    /// Row-stochastic, indexed `[true level][perceived level]`.
    pub confusion: Vec<Vec<f64>>,
    pub mean_diagonal: f64,
    pub monotonic_fraction: f64,
    pub sentences: usize,
}

/// Ranks per-sentence intensity scores against the true α order.
///
/// `scores[s][k]` is sentence `s` synthesized at the k-th smallest α.
pub fn ordering_summary(scores: &[Vec<f64>]) -> Result<OrderingSummary> {
    let levels = scores.first().map_or(0, Vec::len);
    if levels < 3 {
        return Err(Error::invalid(format!(
            "intensity ordering needs at least 3 levels, got {levels}"
        )));
    }
    let mut counts = vec![vec![0usize; levels]; levels];
    let mut monotonic = 0usize;
    for s in scores {
        if s.len() != levels {
            return Err(Error::invalid("every sentence needs a score at every level"));
        }
        for (truth, pred) in predicted_ranks(s).into_iter().enumerate() {
            counts[truth][pred] += 1;
        }
        if strictly_increasing(s) {
            monotonic += 1;
        }
    }
    let n = scores.len();
    let confusion: Vec<Vec<f64>> = counts
        .iter()
        .map(|row| row.iter().map(|&c| c as f64 / n as f64).collect())
        .collect();
    let mean_diagonal = (0..levels).map(|i| confusion[i][i]).sum::<f64>() / levels as f64;
    Ok(OrderingSummary {
        confusion,
        mean_diagonal,
        monotonic_fraction: monotonic as f64 / n as f64,
        sentences: n,
    })
}

/// Scores every α synthesis against the neutral synthesis of the same sentence.
///
/// `by_alpha[k][s]` holds the frames of sentence `s` at the k-th α, with α
/// sorted ascending by the caller.
pub fn intensity_ordering_eval(
    by_alpha: &[Vec<Vec<Frame>>],
    neutral: &[Vec<Frame>],
    estimator: &IntensityEstimator,
) -> Result<OrderingSummary> {
    if by_alpha.len() < 3 {
        return Err(Error::invalid(format!(
            "intensity ordering needs at least 3 α values, got {}",
            by_alpha.len()
        )));
    }
    let scores = (0..neutral.len())
        .map(|s| {
            by_alpha
                .iter()
                .map(|frames| {
                    let f = frames
                        .get(s)
                        .ok_or_else(|| Error::invalid("sentence-set mismatch across α values"))?;
                    estimator.score(f, &neutral[s])
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    ordering_summary(&scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_of_constant_sample() {
        let s = Summary::of(&[1.0; 10]).unwrap();
        assert_eq!(s.mean, 1.0);
        assert_eq!(s.half_width, 0.0);
        assert!(Summary::of(&[]).is_err());
    }

    #[test]
    fn summary_half_width_matches_formula() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        let sd = (5.0f64 / 3.0).sqrt();
        assert!((s.half_width - 1.96 * sd / 2.0).abs() < 1e-15);
    }

    #[test]
    fn increasing_scores_give_identity() {
        let scores = vec![vec![0.1, 0.5, 0.9]; 7];
        let o = ordering_summary(&scores).unwrap();
        assert_eq!(o.mean_diagonal, 1.0);
        assert_eq!(o.monotonic_fraction, 1.0);
        assert_eq!(o.confusion[1], vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn constant_scores_score_at_most_a_third() {
        let o = ordering_summary(&vec![vec![0.0; 3]; 5]).unwrap();
        assert!(o.mean_diagonal <= 1.0 / 3.0);
        assert_eq!(o.mean_diagonal, 0.0);
        assert_eq!(o.monotonic_fraction, 0.0);
        for row in &o.confusion {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn partial_ties_only_penalize_tied_slots() {
        assert_eq!(predicted_ranks(&[0.0, 1.0, 1.0]), vec![0, 2, 1]);
        assert_eq!(predicted_ranks(&[2.0, 1.0, 3.0]), vec![1, 0, 2]);
        assert!(!strictly_increasing(&[0.0, 1.0, 1.0]));
    }

    #[test]
    fn reversed_scores() {
        let o = ordering_summary(&[vec![3.0, 2.0, 1.0]]).unwrap();
        assert_eq!(o.confusion[0], vec![0.0, 0.0, 1.0]);
        assert_eq!(o.confusion[1], vec![0.0, 1.0, 0.0]);
        assert!((o.mean_diagonal - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn too_few_levels() {
        assert!(ordering_summary(&[vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn estimator_direction_is_unit() {
        let e = IntensityEstimator::from_direction(Emotion::Angry, [2.0; FEATURE_DIM]).unwrap();
        let norm: f64 = e.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(IntensityEstimator::from_direction(Emotion::Angry, [0.0; FEATURE_DIM]).is_err());
        let frames = vec![[1.0; FEATURE_DIM]; 3];
        let zero = vec![[0.0; FEATURE_DIM]; 3];
        assert!((e.score(&frames, &zero).unwrap() - (FEATURE_DIM as f64).sqrt()).abs() < 1e-12);
        assert!(e.score(&frames, &zero[..2]).is_err());
    }
}
