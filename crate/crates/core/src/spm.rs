//! Soft-prompt model: a two-layer tanh MLP from persona embedding to a
//! virtual prefix for the frozen answer model.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{ResponseKey, ResponseMatrix};
use crate::error::{check_dim, Error, Result};
use crate::lm::{argmax, AnswerModel, PrefixMode, VirtualPrefix};
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::scalar::Scalar;

pub const SPM_FORMAT: &str = "persona-steer/soft-prompt/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpmConfig {
    pub hidden_units: usize,
    pub virtual_tokens: usize,
    pub mode: PrefixMode,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for SpmConfig {
    fn default() -> Self {
        Self {
            hidden_units: 32,
            virtual_tokens: 1,
            mode: PrefixMode::Prefix,
            learning_rate: 1e-3,
            weight_decay: 1e-3,
            epochs: 10,
            patience: 3,
            batch_size: 64,
            init_scale: 0.02,
            seed: 0,
        }
    }
}

impl SpmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_units == 0 || self.virtual_tokens == 0 {
            return Err(Error::InvalidInput(
                "hidden_units and virtual_tokens must be positive".into(),
            ));
        }
        if self.batch_size == 0 || self.learning_rate <= 0.0 {
            return Err(Error::InvalidInput(
                "batch_size and learning_rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpmTrace {
    pub train_losses: Vec<f64>,
    pub validation_losses: Vec<f64>,
    /// Epoch whose parameters were kept (lowest validation loss).
    pub best_epoch: Option<usize>,
}

/// Weights are one flat buffer: `w1 [d][h]`, `b1 [h]`, `w2 [h][out]`, `b2 [out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftPromptModel<T> {
    pub format: String,
    pub config: SpmConfig,
    pub input_dim: usize,
    pub layers: usize,
    pub model_dim: usize,
    /// Fingerprint of the answer model this network was built for.
    pub answer_model: String,
    params: Vec<T>,
}

impl<T: Scalar> SoftPromptModel<T> {
    /// Randomly initialized network bound to `model`.
    pub fn new(config: SpmConfig, input_dim: usize, model: &AnswerModel<T>) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::InvalidInput("persona dimension must be positive".into()));
        }
        let mut spm = Self {
            format: SPM_FORMAT.to_string(),
            config,
            input_dim,
            layers: model.config.layers,
            model_dim: model.config.model_dim,
            answer_model: model.fingerprint(),
            params: Vec::new(),
        };
        let mut rng = rng::seeded(spm.config.seed);
        let std = T::lit(spm.config.init_scale);
        spm.params = (0..spm.param_count()).map(|_| T::gaussian(&mut rng, std)).collect();
        let (h, out) = (spm.config.hidden_units, spm.output_dim());
        let b1 = input_dim * h;
        spm.params[b1..b1 + h].iter_mut().for_each(|b| *b = T::zero());
        let b2 = b1 + h + h * out;
        spm.params[b2..b2 + out].iter_mut().for_each(|b| *b = T::zero());
        Ok(spm)
    }

    pub fn output_dim(&self) -> usize {
        self.config.virtual_tokens * self.config.mode.width(self.layers, self.model_dim)
    }

    fn param_count(&self) -> usize {
        let (d, h, out) = (self.input_dim, self.config.hidden_units, self.output_dim());
        d * h + h + h * out + out
    }

    pub fn parameters(&self) -> &[T] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Fail unless this network was built for exactly `model`.
    pub fn check_compatible(&self, model: &AnswerModel<T>) -> Result<()> {
        let fp = model.fingerprint();
        if fp != self.answer_model {
            return Err(Error::Incompatible(format!(
                "soft-prompt model was trained against answer model {} but got {fp}",
                self.answer_model
            )));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        crate::fingerprint::of_value(self)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Load and verify against the answer model it will steer.
    pub fn from_json(text: &str, model: &AnswerModel<T>) -> Result<Self> {
        let spm: Self = serde_json::from_str(text)?;
        if spm.format != SPM_FORMAT {
            return Err(Error::Incompatible(format!("soft-prompt format {}", spm.format)));
        }
        check_dim(spm.param_count(), spm.params.len())?;
        spm.check_compatible(model)?;
        Ok(spm)
    }

    fn split(&self) -> (&[T], &[T], &[T], &[T]) {
        let (d, h, out) = (self.input_dim, self.config.hidden_units, self.output_dim());
        let (w1, rest) = self.params.split_at(d * h);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(h * out);
        debug_assert_eq!(b2.len(), out);
        (w1, b1, w2, b2)
    }

    fn hidden(&self, persona: &[T]) -> Vec<T> {
        let h = self.config.hidden_units;
        let (w1, b1, _, _) = self.split();
        let mut z = b1.to_vec();
        for (i, &x) in persona.iter().enumerate() {
            for (zj, &w) in z.iter_mut().zip(&w1[i * h..(i + 1) * h]) {
                *zj += x * w;
            }
        }
        z.into_iter().map(|v| v.tanh()).collect()
    }

    fn output(&self, hidden: &[T]) -> Vec<T> {
        let out = self.output_dim();
        let (_, _, w2, b2) = self.split();
        let mut y = b2.to_vec();
        for (j, &a) in hidden.iter().enumerate() {
            for (yo, &w) in y.iter_mut().zip(&w2[j * out..(j + 1) * out]) {
                *yo += a * w;
            }
        }
        y
    }

    /// Map a persona vector to its virtual prefix.
    pub fn forward(&self, persona: &[T]) -> Result<VirtualPrefix<T>> {
        check_dim(self.input_dim, persona.len())?;
        let data = self.output(&self.hidden(persona));
        Ok(VirtualPrefix {
            mode: self.config.mode,
            tokens: self.config.virtual_tokens,
            layers: self.layers,
            model_dim: self.model_dim,
            data,
        })
    }

    /// Accumulate `scale · dL/dθ` into `grads` given dL/d(prefix) for `persona`.
    fn backward(&self, persona: &[T], dprefix: &[T], scale: T, grads: &mut [T]) {
        let (d, h, out) = (self.input_dim, self.config.hidden_units, self.output_dim());
        let (_, _, w2, _) = self.split();
        let a = self.hidden(persona);
        let (gw1, rest) = grads.split_at_mut(d * h);
        let (gb1, rest) = rest.split_at_mut(h);
        let (gw2, gb2) = rest.split_at_mut(h * out);
        for (g, &dy) in gb2.iter_mut().zip(dprefix) {
            *g += scale * dy;
        }
        let mut dz = vec![T::zero(); h];
        for j in 0..h {
            let row = &mut gw2[j * out..(j + 1) * out];
            for (g, &dy) in row.iter_mut().zip(dprefix) {
                *g += scale * a[j] * dy;
            }
            let da = crate::scalar::dot(&w2[j * out..(j + 1) * out], dprefix);
            dz[j] = da * (T::one() - a[j] * a[j]);
        }
        for (g, &v) in gb1.iter_mut().zip(&dz) {
            *g += scale * v;
        }
        for (i, &x) in persona.iter().enumerate() {
            for (g, &v) in gw1[i * h..(i + 1) * h].iter_mut().zip(&dz) {
                *g += scale * x * v;
            }
        }
    }

    /// Mean cross-entropy over `keys` and its gradient with respect to θ.
    /// The answer model receives no update.
    pub fn loss_and_gradient(
        &self,
        model: &AnswerModel<T>,
        personas: &BTreeMap<String, Vec<T>>,
        matrix: &ResponseMatrix,
        keys: &[ResponseKey],
    ) -> Result<(T, Vec<T>)> {
        if keys.is_empty() {
            return Err(Error::EmptyKeys);
        }
        let mut grads = vec![T::zero(); self.params.len()];
        let scale = T::one() / T::from_count(keys.len());
        let mut loss = T::zero();
        let mut by_individual: BTreeMap<usize, Vec<ResponseKey>> = BTreeMap::new();
        for &k in keys {
            by_individual.entry(k.individual).or_default().push(k);
        }
        for (person, own) in by_individual {
            let id = &matrix.individual(person).id;
            let persona = personas.get(id).ok_or_else(|| Error::lookup("persona", id.clone()))?;
            let prefix = self.forward(persona)?;
            let mut dprefix = vec![T::zero(); prefix.data.len()];
            for key in own {
                let (tokens, m, target) = answer_inputs(model, matrix, key)?;
                let (l, g) = model.prefix_gradient(&prefix, &tokens, m, target)?;
                loss += l * scale;
                for (a, b) in dprefix.iter_mut().zip(&g.data) {
                    *a += *b;
                }
            }
            self.backward(persona, &dprefix, scale, &mut grads);
        }
        Ok((loss, grads))
    }

    /// Mean cross-entropy over `keys` without gradients.
    pub fn loss(
        &self,
        model: &AnswerModel<T>,
        personas: &BTreeMap<String, Vec<T>>,
        matrix: &ResponseMatrix,
        keys: &[ResponseKey],
    ) -> Result<T> {
        if keys.is_empty() {
            return Err(Error::EmptyKeys);
        }
        let mut total = T::zero();
        let mut cached: Option<(usize, VirtualPrefix<T>)> = None;
        for &key in keys {
            if cached.as_ref().is_none_or(|(p, _)| *p != key.individual) {
                let id = &matrix.individual(key.individual).id;
                let persona = personas.get(id).ok_or_else(|| Error::lookup("persona", id.clone()))?;
                cached = Some((key.individual, self.forward(persona)?));
            }
            let prefix = &cached.as_ref().expect("cached prefix").1;
            let (tokens, m, target) = answer_inputs(model, matrix, key)?;
            let logits = model.forward_with_prefix(Some(prefix), &tokens, m)?;
            let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = logits.iter().map(|&l| (l - max).exp()).sum::<T>().ln() + max;
            total += lse - logits[target];
        }
        Ok(total / T::from_count(keys.len()))
    }
}

fn answer_inputs<T: Scalar>(
    model: &AnswerModel<T>,
    matrix: &ResponseMatrix,
    key: ResponseKey,
) -> Result<(Vec<usize>, usize, usize)> {
    let question = matrix.question(key.question);
    let target = matrix.option_index(key).ok_or_else(|| {
        Error::lookup(
            "response",
            format!("{}/{}", matrix.individual(key.individual).id, question.id),
        )
    })?;
    Ok((
        model.vocab.question_sequence(&question.id)?,
        question.option_count(),
        target,
    ))
}

/// Train a fresh soft-prompt network against the frozen `model`, keeping the
/// parameters with the lowest validation loss.
pub fn train_spm<T: Scalar>(
    model: &AnswerModel<T>,
    personas: &BTreeMap<String, Vec<T>>,
    matrix: &ResponseMatrix,
    train_keys: &[ResponseKey],
    val_keys: &[ResponseKey],
    config: &SpmConfig,
) -> Result<(SoftPromptModel<T>, SpmTrace)> {
    if !model.is_frozen() {
        return Err(Error::InvalidInput(
            "answer model must be frozen before soft-prompt training".into(),
        ));
    }
    if train_keys.is_empty() {
        return Err(Error::EmptyKeys);
    }
    let dim = personas
        .values()
        .next()
        .map(Vec::len)
        .ok_or_else(|| Error::InsufficientData("no persona embeddings".into()))?;
    for &k in train_keys.iter().chain(val_keys) {
        let id = &matrix.individual(k.individual).id;
        let v = personas.get(id).ok_or_else(|| Error::lookup("persona", id.clone()))?;
        check_dim(dim, v.len())?;
    }
    let mut spm = SoftPromptModel::new(config.clone(), dim, model)?;
    let mut opt = Adam::<T>::new(
        AdamConfig::adamw(config.learning_rate, config.weight_decay),
        spm.params.len(),
    );
    let mut rng = rng::seeded(rng::derive_seed(config.seed, 1));
    let mut order = train_keys.to_vec();
    let mut trace = SpmTrace::default();
    let mut best: Option<(f64, Vec<T>)> = None;
    let mut stale = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (loss, grads) = spm.loss_and_gradient(model, personas, matrix, batch)?;
            epoch_loss += loss.as_f64() * batch.len() as f64;
            opt.update(&mut spm.params, &grads);
        }
        let train_loss = epoch_loss / order.len() as f64;
        if !train_loss.is_finite() || spm.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::TrainingDiverged { epoch });
        }
        trace.train_losses.push(train_loss);
        let val_loss = if val_keys.is_empty() {
            train_loss
        } else {
            spm.loss(model, personas, matrix, val_keys)?.as_f64()
        };
        trace.validation_losses.push(val_loss);
        log::debug!("spm epoch {epoch}: train {train_loss:.5} validation {val_loss:.5}");
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, spm.params.clone()));
            trace.best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    if let Some((_, params)) = best {
        spm.params = params;
    }
    Ok((spm, trace))
}

/// Steered answer to `question_id` for `persona` (lowest option index on ties).
pub fn steer_predict<T: Scalar>(
    spm: &SoftPromptModel<T>,
    model: &AnswerModel<T>,
    persona: &[T],
    matrix: &ResponseMatrix,
    question_id: &str,
) -> Result<usize> {
    let prefix = spm.forward(persona)?;
    let question = &matrix.questions()[matrix.question_idx(question_id)?];
    let tokens = model.vocab.question_sequence(question_id)?;
    let logits = model.forward_with_prefix(Some(&prefix), &tokens, question.option_count())?;
    Ok(argmax(&logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticSpec};
    use crate::lm::{LmConfig, Vocab};

    fn setup() -> (ResponseMatrix, AnswerModel<f64>) {
        let (m, _) = generate_synthetic(&SyntheticSpec {
            n_individuals: 4,
            n_questions: 3,
            n_latent_clusters: 2,
            ..Default::default()
        })
        .unwrap();
        let mut model = AnswerModel::new(LmConfig::default(), Vocab::from_matrix(&m)).unwrap();
        model.freeze();
        (m, model)
    }

    #[test]
    fn default_output_is_128_numbers() {
        let (_, model) = setup();
        let spm = SoftPromptModel::new(SpmConfig::default(), 16, &model).unwrap();
        assert_eq!(spm.output_dim(), 128);
        let prefix = spm.forward(&[0.1; 16]).unwrap();
        assert_eq!(prefix.shape(), vec![1, 2, 2, 32]);
        assert_eq!(prefix, spm.forward(&[0.1; 16]).unwrap());
        assert!(matches!(spm.forward(&[0.1; 15]), Err(Error::Dimension { .. })));
        let prompt = SoftPromptModel::new(
            SpmConfig {
                mode: PrefixMode::Prompt,
                ..Default::default()
            },
            16,
            &model,
        )
        .unwrap();
        assert_eq!(prompt.forward(&[0.1; 16]).unwrap().shape(), vec![1, 32]);
    }

    #[test]
    fn zero_weights_give_zero_prefix() {
        let (_, model) = setup();
        let mut spm = SoftPromptModel::new(SpmConfig::default(), 4, &model).unwrap();
        spm.parameters_mut().fill(0.0);
        assert!(spm
            .forward(&[1.0, -2.0, 3.0, 0.5])
            .unwrap()
            .data
            .iter()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn tied_logits_pick_option_zero() {
        let (m, _) = setup();
        let mut flat = AnswerModel::<f64>::new(LmConfig::default(), Vocab::from_matrix(&m)).unwrap();
        flat.update_parameters(|p| p.fill(0.0)).unwrap();
        flat.freeze();
        let spm = SoftPromptModel::new(SpmConfig::default(), 2, &flat).unwrap();
        for q in m.questions() {
            assert_eq!(steer_predict(&spm, &flat, &[0.4, -0.9], &m, &q.id).unwrap(), 0);
        }
    }

    #[test]
    fn training_needs_a_frozen_model() {
        let (m, _) = setup();
        let thawed = AnswerModel::<f64>::new(LmConfig::default(), Vocab::from_matrix(&m)).unwrap();
        let keys: Vec<_> = m.keys().collect();
        let personas = m.individuals().iter().map(|i| (i.id.clone(), vec![0.0; 2])).collect();
        assert!(train_spm(&thawed, &personas, &m, &keys, &[], &SpmConfig::default()).is_err());
    }

    #[test]
    fn missing_persona_is_a_lookup_error() {
        let (m, model) = setup();
        let keys: Vec<_> = m.keys().collect();
        let mut personas: BTreeMap<String, Vec<f64>> =
            m.individuals().iter().map(|i| (i.id.clone(), vec![0.0; 2])).collect();
        personas.remove(&m.individual(0).id);
        assert!(matches!(
            train_spm(&model, &personas, &m, &keys, &[], &SpmConfig::default()),
            Err(Error::Lookup { .. })
        ));
    }

    #[test]
    fn weights_bind_to_their_answer_model() {
        let (m, model) = setup();
        let spm = SoftPromptModel::new(SpmConfig::default(), 3, &model).unwrap();
        let text = spm.to_json().unwrap();
        assert_eq!(SoftPromptModel::from_json(&text, &model).unwrap(), spm);
        let other = AnswerModel::<f64>::new(
            LmConfig {
                seed: 9,
                ..Default::default()
            },
            Vocab::from_matrix(&m),
        )
        .unwrap();
        assert!(matches!(
            SoftPromptModel::from_json(&text, &other),
            Err(Error::Incompatible(_))
        ));
    }
}
