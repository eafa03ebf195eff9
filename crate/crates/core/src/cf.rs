//! Collaborative filtering: inner-product factorization of the response
//! matrix, trained with minibatch Adam on the squared error
//! `(<u_i, q_j> - r_ij)^2`.

use std::collections::BTreeMap;

use log::debug;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{ResponseKey, ResponseMatrix};
use crate::error::{check_dim, Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, StdRng};
use crate::scalar::{dot, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CfLoss {
    #[default]
    SquaredError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CfConfig {
    pub dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub init_scale: f64,
    pub seed: u64,
    pub loss: CfLoss,
    /// L2 penalty on the embeddings touched by a minibatch. Off by default.
    pub regularization: f64,
    /// Stop once the training loss improves by less than this over `early_stop_window` epochs.
    pub early_stop_tolerance: f64,
    pub early_stop_window: usize,
    /// Step size used when fitting unseen individuals against frozen questions.
    /// Each such fit sees few observations per epoch, so it needs larger steps.
    pub unseen_learning_rate: f64,
}

impl Default for CfConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            learning_rate: 1e-3,
            batch_size: 2048,
            epochs: 200,
            init_scale: 0.1,
            seed: 0,
            loss: CfLoss::SquaredError,
            regularization: 0.0,
            early_stop_tolerance: 1e-6,
            early_stop_window: 10,
            unseen_learning_rate: 1e-2,
        }
    }
}

impl CfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidInput("embedding dimension must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.unseen_learning_rate > 0.0) {
            return Err(Error::InvalidInput("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Learned individual (u_i) and question (q_j) vectors, keyed by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable<T> {
    pub d: usize,
    pub individuals: BTreeMap<String, Vec<T>>,
    pub questions: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> EmbeddingTable<T> {
    pub fn individual(&self, id: &str) -> Result<&[T]> {
        self.individuals
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::lookup("individual embedding", id))
    }

    pub fn question(&self, id: &str) -> Result<&[T]> {
        self.questions
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::lookup("question embedding", id))
    }

    /// Copy of the table with individual vectors replaced.
    pub fn with_individuals(&self, individuals: BTreeMap<String, Vec<T>>) -> Self {
        Self {
            d: self.d,
            individuals,
            questions: self.questions.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Full training-set loss at the end of each epoch.
    pub epoch_losses: Vec<f64>,
    pub validation_loss: Option<f64>,
    pub stopped_early: bool,
}

/// Inner-product prediction `<u, q>`, unclamped.
pub fn predict<T: Scalar>(u: &[T], q: &[T]) -> Result<T> {
    check_dim(u.len(), q.len())?;
    Ok(dot(u, q))
}

/// Mean squared error of the table's predictions over `keys`.
pub fn cf_loss<T: Scalar>(table: &EmbeddingTable<T>, matrix: &ResponseMatrix, keys: &[ResponseKey]) -> Result<T> {
    if keys.is_empty() {
        return Err(Error::EmptyKeys);
    }
    let mut total = T::zero();
    for &key in keys {
        let (u, q, r) = resolve(table, matrix, key)?;
        let e = predict(u, q)? - r;
        total += e * e;
    }
    Ok(total / T::from_count(keys.len()))
}

/// Loss and its exact gradient with respect to every embedding coordinate.
pub fn cf_loss_gradient<T: Scalar>(
    table: &EmbeddingTable<T>,
    matrix: &ResponseMatrix,
    keys: &[ResponseKey],
) -> Result<(T, EmbeddingTable<T>)> {
    if keys.is_empty() {
        return Err(Error::EmptyKeys);
    }
    let zeros = |m: &BTreeMap<String, Vec<T>>| -> BTreeMap<String, Vec<T>> {
        m.iter().map(|(k, v)| (k.clone(), vec![T::zero(); v.len()])).collect()
    };
    let mut grad = EmbeddingTable {
        d: table.d,
        individuals: zeros(&table.individuals),
        questions: zeros(&table.questions),
    };
    let n = T::from_count(keys.len());
    let mut total = T::zero();
    for &key in keys {
        let (u, q, r) = resolve(table, matrix, key)?;
        let e = predict(u, q)? - r;
        total += e * e;
        let scale = (e + e) / n;
        let ind = &matrix.individual(key.individual).id;
        let qid = &matrix.question(key.question).id;
        for (g, &x) in grad.individuals.get_mut(ind).unwrap().iter_mut().zip(q) {
            *g += scale * x;
        }
        for (g, &x) in grad.questions.get_mut(qid).unwrap().iter_mut().zip(u) {
            *g += scale * x;
        }
    }
    Ok((total / n, grad))
}

fn resolve<'a, T: Scalar>(
    table: &'a EmbeddingTable<T>,
    matrix: &ResponseMatrix,
    key: ResponseKey,
) -> Result<(&'a [T], &'a [T], T)> {
    let u = table.individual(&matrix.individual(key.individual).id)?;
    let q = table.question(&matrix.question(key.question).id)?;
    let r = matrix
        .value::<T>(key)
        .ok_or_else(|| Error::lookup("response", format!("{key:?}")))?;
    Ok((u, q, r))
}

#[derive(Debug, Clone, Copy)]
struct Observation<T> {
    row: usize,
    col: usize,
    target: T,
}

enum QuestionParams<'a, T> {
    Trainable(&'a mut [T]),
    Frozen(&'a [T]),
}

impl<T> QuestionParams<'_, T> {
    fn values(&self) -> &[T] {
        match self {
            QuestionParams::Trainable(v) => v,
            QuestionParams::Frozen(v) => v,
        }
    }
}

fn gaussian_block<T: Scalar>(rng: &mut StdRng, len: usize, scale: f64) -> Vec<T> {
    (0..len).map(|_| T::gaussian(rng, T::lit(scale))).collect()
}

fn mse<T: Scalar>(obs: &[Observation<T>], rows: &[T], cols: &[T], d: usize) -> T {
    let mut total = T::zero();
    for o in obs {
        let e = dot(&rows[o.row * d..(o.row + 1) * d], &cols[o.col * d..(o.col + 1) * d]) - o.target;
        total += e * e;
    }
    total / T::from_count(obs.len())
}

/// Shared minibatch loop. Question parameters are updated only when trainable.
fn fit<T: Scalar>(
    obs: &[Observation<T>],
    rows: &mut [T],
    mut cols: QuestionParams<'_, T>,
    config: &CfConfig,
    rng: &mut StdRng,
) -> Result<TrainTrace> {
    let d = config.dim;
    let adam = AdamConfig::adam(config.learning_rate);
    let mut row_opt = Adam::new(adam, rows.len());
    let mut col_opt = Adam::new(adam, cols.values().len());
    let mut row_grad = vec![T::zero(); rows.len()];
    let mut col_grad = vec![T::zero(); cols.values().len()];
    let train_cols = matches!(cols, QuestionParams::Trainable(_));
    let reg = T::lit(2.0 * config.regularization);

    let mut order: Vec<usize> = (0..obs.len()).collect();
    let mut trace = TrainTrace::default();
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        for batch in order.chunks(config.batch_size) {
            row_grad.iter_mut().for_each(|g| *g = T::zero());
            if train_cols {
                col_grad.iter_mut().for_each(|g| *g = T::zero());
            }
            let scale = T::lit(2.0) / T::from_count(batch.len());
            let col_values = cols.values();
            for &idx in batch {
                let o = obs[idx];
                let u = &rows[o.row * d..(o.row + 1) * d];
                let q = &col_values[o.col * d..(o.col + 1) * d];
                let e = (dot(u, q) - o.target) * scale;
                for k in 0..d {
                    row_grad[o.row * d + k] += e * q[k] + reg * u[k];
                    if train_cols {
                        col_grad[o.col * d + k] += e * u[k] + reg * q[k];
                    }
                }
            }
            row_opt.update(rows, &row_grad);
            if let QuestionParams::Trainable(c) = &mut cols {
                col_opt.update(c, &col_grad);
            }
        }
        let loss = mse(obs, rows, cols.values(), d);
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        trace.epoch_losses.push(loss.as_f64());
        let w = config.early_stop_window;
        if w > 0 && trace.epoch_losses.len() > w {
            let n = trace.epoch_losses.len();
            if trace.epoch_losses[n - 1 - w] - trace.epoch_losses[n - 1] < config.early_stop_tolerance {
                debug!("cf early stop at epoch {epoch}, loss {loss}");
                trace.stopped_early = true;
                break;
            }
        }
    }
    Ok(trace)
}

/// Fit individual and question embeddings on `keys`.
///
/// Only individuals and questions that occur in `keys` receive vectors.
/// When `validation_keys` is given its loss is recorded in the trace;
/// validation individuals or questions without a trained vector are skipped.
pub fn train_cf<T: Scalar>(
    matrix: &ResponseMatrix,
    keys: &[ResponseKey],
    validation_keys: Option<&[ResponseKey]>,
    config: &CfConfig,
) -> Result<(EmbeddingTable<T>, TrainTrace)> {
    config.validate()?;
    if keys.is_empty() {
        return Err(Error::EmptyKeys);
    }
    let d = config.dim;
    let mut row_of: BTreeMap<usize, usize> = keys.iter().map(|k| (k.individual, 0)).collect();
    let mut col_of: BTreeMap<usize, usize> = keys.iter().map(|k| (k.question, 0)).collect();
    // index by id order so the table does not depend on matrix row order
    let mut row_ids: Vec<usize> = row_of.keys().copied().collect();
    row_ids.sort_by(|&a, &b| matrix.individual(a).id.cmp(&matrix.individual(b).id));
    let mut col_ids: Vec<usize> = col_of.keys().copied().collect();
    col_ids.sort_by(|&a, &b| matrix.question(a).id.cmp(&matrix.question(b).id));
    for (pos, idx) in row_ids.iter().enumerate() {
        row_of.insert(*idx, pos);
    }
    for (pos, idx) in col_ids.iter().enumerate() {
        col_of.insert(*idx, pos);
    }

    let obs = observations(matrix, keys, |k| Some((row_of[&k.individual], col_of[&k.question])))?;
    let mut rng = rng::seeded(config.seed);
    let mut rows: Vec<T> = gaussian_block(&mut rng, row_ids.len() * d, config.init_scale);
    let mut cols: Vec<T> = gaussian_block(&mut rng, col_ids.len() * d, config.init_scale);
    let mut trace = fit(&obs, &mut rows, QuestionParams::Trainable(&mut cols), config, &mut rng)?;

    let table = EmbeddingTable {
        d,
        individuals: row_ids
            .iter()
            .enumerate()
            .map(|(pos, &i)| (matrix.individual(i).id.clone(), rows[pos * d..(pos + 1) * d].to_vec()))
            .collect(),
        questions: col_ids
            .iter()
            .enumerate()
            .map(|(pos, &j)| (matrix.question(j).id.clone(), cols[pos * d..(pos + 1) * d].to_vec()))
            .collect(),
    };
    if let Some(val) = validation_keys {
        let usable: Vec<ResponseKey> = val
            .iter()
            .copied()
            .filter(|k| row_of.contains_key(&k.individual) && col_of.contains_key(&k.question))
            .collect();
        if !usable.is_empty() {
            trace.validation_loss = Some(cf_loss(&table, matrix, &usable)?.as_f64());
        }
    }
    Ok((table, trace))
}

fn observations<T: Scalar>(
    matrix: &ResponseMatrix,
    keys: &[ResponseKey],
    locate: impl Fn(&ResponseKey) -> Option<(usize, usize)>,
) -> Result<Vec<Observation<T>>> {
    keys.iter()
        .filter_map(|k| locate(k).map(|loc| (k, loc)))
        .map(|(k, (row, col))| {
            let target = matrix
                .value::<T>(*k)
                .ok_or_else(|| Error::lookup("response", format!("{k:?}")))?;
            Ok(Observation { row, col, target })
        })
        .collect()
}

/// Embeddings fitted for individuals outside the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct UnseenEmbeddings<T> {
    pub vectors: BTreeMap<String, Vec<T>>,
    /// Responses actually used per individual (after the `k_responses` cap).
    pub used_keys: BTreeMap<String, Vec<ResponseKey>>,
    pub trace: TrainTrace,
}

/// Fit vectors for the individuals in `keys` with question vectors held fixed.
///
/// Each individual contributes at most `k_responses` responses (a seeded
/// subsample when more are available; `None` uses all). Keys whose question
/// has no frozen vector are not usable.
pub fn embed_unseen<T: Scalar>(
    matrix: &ResponseMatrix,
    keys: &[ResponseKey],
    frozen_questions: &BTreeMap<String, Vec<T>>,
    config: &CfConfig,
    k_responses: Option<usize>,
) -> Result<UnseenEmbeddings<T>> {
    config.validate()?;
    let config = &CfConfig {
        learning_rate: config.unseen_learning_rate,
        ..config.clone()
    };
    let d = config.dim;
    let mut by_individual: BTreeMap<&str, Vec<ResponseKey>> = BTreeMap::new();
    for &k in keys {
        let entry = by_individual
            .entry(matrix.individual(k.individual).id.as_str())
            .or_default();
        if frozen_questions.contains_key(&matrix.question(k.question).id) {
            entry.push(k);
        }
    }
    if by_individual.is_empty() {
        return Err(Error::EmptyKeys);
    }

    let mut rng = rng::seeded(config.seed);
    let mut used_keys = BTreeMap::new();
    for (id, mut list) in by_individual {
        if let Some(k) = k_responses {
            if list.len() > k {
                list.shuffle(&mut rng);
                list.truncate(k);
                list.sort_unstable();
            }
        }
        if list.is_empty() {
            return Err(Error::InsufficientData(id.to_string()));
        }
        used_keys.insert(id.to_string(), list);
    }

    let question_ids: Vec<&String> = frozen_questions.keys().collect();
    let mut cols = Vec::with_capacity(question_ids.len() * d);
    for v in frozen_questions.values() {
        check_dim(d, v.len())?;
        cols.extend_from_slice(v);
    }
    let col_of: BTreeMap<&str, usize> = question_ids
        .iter()
        .enumerate()
        .map(|(p, id)| (id.as_str(), p))
        .collect();

    let mut obs = Vec::new();
    for (row, list) in used_keys.values().enumerate() {
        obs.extend(observations::<T>(matrix, list, |k| {
            Some((row, col_of[matrix.question(k.question).id.as_str()]))
        })?);
    }
    let mut rows: Vec<T> = gaussian_block(&mut rng, used_keys.len() * d, config.init_scale);
    let trace = fit(&obs, &mut rows, QuestionParams::Frozen(&cols), config, &mut rng)?;

    let vectors = used_keys
        .keys()
        .enumerate()
        .map(|(pos, id)| (id.clone(), rows[pos * d..(pos + 1) * d].to_vec()))
        .collect();
    Ok(UnseenEmbeddings {
        vectors,
        used_keys,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticSpec};

    #[test]
    fn predict_examples() {
        assert_eq!(predict(&[1.0, 0.0, 0.0], &[0.5, 0.0, 0.0]).unwrap(), 0.5);
        assert_eq!(predict(&[0.0, 0.0], &[3.0, -7.0]).unwrap(), 0.0);
        assert!((predict(&[0.3, -0.2], &[1.0, 0.5]).unwrap() - 0.2f64).abs() < 1e-15);
        assert!(matches!(predict(&[1.0], &[1.0, 2.0]), Err(Error::Dimension { .. })));
    }

    fn small_matrix() -> ResponseMatrix {
        generate_synthetic(&SyntheticSpec {
            n_individuals: 6,
            n_questions: 5,
            n_latent_clusters: 2,
            ..Default::default()
        })
        .unwrap()
        .0
    }

    #[test]
    fn loss_of_empty_keys_is_an_error() {
        let m = small_matrix();
        let table = EmbeddingTable::<f64> {
            d: 1,
            individuals: BTreeMap::new(),
            questions: BTreeMap::new(),
        };
        assert!(matches!(cf_loss(&table, &m, &[]), Err(Error::EmptyKeys)));
    }

    #[test]
    fn single_key_loss() {
        let m = small_matrix();
        let key = m.keys().find(|&k| m.value::<f64>(k) == Some(1.0)).unwrap();
        let mut table = EmbeddingTable::<f64> {
            d: 1,
            individuals: BTreeMap::new(),
            questions: BTreeMap::new(),
        };
        table
            .individuals
            .insert(m.individual(key.individual).id.clone(), vec![1.0]);
        table.questions.insert(m.question(key.question).id.clone(), vec![0.5]);
        assert_eq!(cf_loss(&table, &m, &[key]).unwrap(), 0.25);
    }

    #[test]
    fn training_is_deterministic() {
        let m = small_matrix();
        let keys: Vec<_> = m.keys().collect();
        let config = CfConfig {
            dim: 3,
            epochs: 5,
            seed: 4,
            ..Default::default()
        };
        let (a, ta) = train_cf::<f64>(&m, &keys, None, &config).unwrap();
        let (b, tb) = train_cf::<f64>(&m, &keys, None, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(a.individuals.len(), 6);
        assert_eq!(a.questions.len(), 5);
        assert!(ta.epoch_losses.len() <= 5);
    }

    #[test]
    fn divergence_is_reported() {
        let m = small_matrix();
        let keys: Vec<_> = m.keys().collect();
        let config = CfConfig {
            dim: 2,
            init_scale: 1e200,
            epochs: 3,
            ..Default::default()
        };
        assert!(matches!(
            train_cf::<f64>(&m, &keys, None, &config),
            Err(Error::TrainingDiverged { epoch: 0 })
        ));
    }

    #[test]
    fn unseen_uses_at_most_k_and_errors_on_none() {
        let m = small_matrix();
        let keys: Vec<_> = m.keys().collect();
        let config = CfConfig {
            dim: 2,
            epochs: 3,
            ..Default::default()
        };
        let (table, _) = train_cf::<f64>(&m, &keys, None, &config).unwrap();
        let mine: Vec<_> = m.responses_of(0).map(|(k, _)| k).collect();
        let out = embed_unseen(&m, &mine, &table.questions, &config, Some(1)).unwrap();
        assert_eq!(out.used_keys[&m.individual(0).id].len(), 1);
        let err = embed_unseen(&m, &mine, &table.questions, &config, Some(0)).unwrap_err();
        assert_eq!(err.category(), "insufficient-data");
        let no_questions = BTreeMap::new();
        assert!(embed_unseen::<f64>(&m, &mine, &no_questions, &config, None).is_err());
    }
}
