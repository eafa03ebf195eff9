//! Pretraining the answer model toward the population's answers.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AnswerModel, LmConfig, Vocab};
use crate::dataset::{ResponseKey, ResponseMatrix};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Individual responses sampled per epoch and rendered with a
    /// demographic or answered-question context in front of the question.
    pub context_samples: usize,
    /// Upper bound on (question, option) pairs in a context sequence.
    pub max_context_pairs: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            learning_rate: 3e-3,
            batch_size: 32,
            context_samples: 4000,
            max_context_pairs: 14,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainTrace {
    /// Mean cross-entropy of the plain question sequences at each epoch end.
    pub epoch_losses: Vec<f64>,
}

/// Population answer distribution per question over `keys`.
fn population_distributions<T: Scalar>(matrix: &ResponseMatrix, keys: &[ResponseKey]) -> BTreeMap<usize, Vec<T>> {
    let mut counts: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &key in keys {
        let Some(option) = matrix.option_index(key) else {
            continue;
        };
        let m = matrix.question(key.question).option_count();
        counts.entry(key.question).or_insert_with(|| vec![0; m])[option] += 1;
    }
    counts
        .into_iter()
        .map(|(q, c)| {
            let total = T::from_count(c.iter().sum());
            (q, c.into_iter().map(|n| T::from_count(n) / total).collect())
        })
        .collect()
}

/// Most frequent option per question id (lowest index on ties).
pub fn majority_targets(matrix: &ResponseMatrix, keys: &[ResponseKey]) -> BTreeMap<String, usize> {
    population_distributions::<f64>(matrix, keys)
        .into_iter()
        .map(|(q, dist)| (matrix.question(q).id.clone(), super::argmax(&dist)))
        .collect()
}

/// One sampled response rendered with either the respondent's demographic
/// tokens or a few of their other answers in front of the question.
fn conditioned_sequence(
    vocab: &Vocab,
    matrix: &ResponseMatrix,
    own: &[ResponseKey],
    key: ResponseKey,
    max_pairs: usize,
    context_len: usize,
    rng: &mut rng::StdRng,
) -> Result<Vec<usize>> {
    let question = &matrix.question(key.question).id;
    if rng.random_bool(0.5) {
        let seq = vocab.demographics_sequence(&matrix.individual(key.individual).demographics, question)?;
        if seq.len() <= context_len {
            return Ok(seq);
        }
    }
    let room = context_len - 2;
    let pairs = rng.random_range(1..=max_pairs.max(1)).min(room);
    let context: Vec<(&str, usize)> = own
        .choose_multiple(rng, pairs + 1)
        .filter(|k| k.question != key.question)
        .take(pairs)
        .filter_map(|&k| Some((matrix.question(k.question).id.as_str(), matrix.option_index(k)?)))
        .collect();
    vocab.context_sequence(&context, question)
}

/// Train a fresh model, then freeze it. Bare question sequences learn the
/// population answer distribution of `keys`; sequences carrying demographic
/// or answered-question context learn the respondent's own answer.
pub fn pretrain_toy_lm<T: Scalar>(
    matrix: &ResponseMatrix,
    keys: &[ResponseKey],
    config: &LmConfig,
) -> Result<(AnswerModel<T>, PretrainTrace)> {
    if keys.is_empty() {
        return Err(Error::EmptyKeys);
    }
    let vocab = Vocab::from_matrix(matrix);
    let mut model = AnswerModel::<T>::new(config.clone(), vocab.clone())?;
    let pre = &config.pretrain;
    let population = population_distributions::<T>(matrix, keys);
    let mut by_individual: BTreeMap<usize, Vec<ResponseKey>> = BTreeMap::new();
    for &k in keys {
        by_individual.entry(k.individual).or_default().push(k);
    }
    let plain: Vec<(Vec<usize>, Vec<T>)> = population
        .iter()
        .map(|(&q, dist)| Ok((vocab.question_sequence(&matrix.question(q).id)?, dist.clone())))
        .collect::<Result<_>>()?;
    let plain_repeats = (pre.context_samples / (3 * plain.len())).max(1);

    let mut rng = rng::seeded(rng::derive_seed(config.seed, 1));
    let mut opt = Adam::<T>::new(AdamConfig::adam(pre.learning_rate), model.parameters().len());
    let mut trace = PretrainTrace::default();
    let batch_size = pre.batch_size.max(1);
    for epoch in 0..pre.epochs {
        let mut samples: Vec<(Vec<usize>, Vec<T>)> =
            Vec::with_capacity(plain.len() * plain_repeats + pre.context_samples);
        for _ in 0..plain_repeats {
            samples.extend(plain.iter().cloned());
        }
        for _ in 0..pre.context_samples {
            let key = keys[rng.random_range(0..keys.len())];
            let Some(answer) = matrix.option_index(key) else {
                continue;
            };
            let seq = conditioned_sequence(
                &vocab,
                matrix,
                &by_individual[&key.individual],
                key,
                pre.max_context_pairs,
                config.context_len,
                &mut rng,
            )?;
            let mut target = vec![T::zero(); matrix.question(key.question).option_count()];
            target[answer] = T::one();
            samples.push((seq, target));
        }
        samples.shuffle(&mut rng);
        for batch in samples.chunks(batch_size) {
            let mut grad = vec![T::zero(); model.parameters().len()];
            let scale = T::one() / T::from_count(batch.len());
            for (seq, target) in batch {
                let (_, g) = model.parameter_gradient(seq, target)?;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b * scale;
                }
            }
            model.update_parameters(|p| opt.update(p, &grad))?;
        }
        let mut total = 0.0;
        for (seq, target) in &plain {
            let probs = super::softmax(&model.forward_with_prefix(None, seq, target.len())?);
            total -= target
                .iter()
                .zip(&probs)
                .filter(|(t, _)| **t > T::zero())
                .map(|(t, p)| t.as_f64() * p.as_f64().ln())
                .sum::<f64>();
        }
        let loss = total / plain.len() as f64;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        log::debug!("pretrain epoch {epoch}: loss {loss:.5}");
        trace.epoch_losses.push(loss);
    }
    model.freeze();
    Ok((model, trace))
}
