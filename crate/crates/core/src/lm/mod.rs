//! Frozen answer model: a miniature causal transformer that reads a short
//! token sequence (a question token plus separator, optionally preceded by
//! demographic or context tokens) and scores the question's option tokens.
//!
//! Steering enters through a [`VirtualPrefix`]: either per-layer attention
//! key/value slots (prefix mode) or extra input-embedding rows (prompt
//! mode). Gradients flow back to the prefix while the model weights stay
//! fixed.

mod pretrain;
mod transformer;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::dataset::ResponseMatrix;
use crate::error::{Error, Result};
use crate::fingerprint;
use crate::scalar::Scalar;

pub use pretrain::{majority_targets, pretrain_toy_lm, PretrainConfig, PretrainTrace};
pub use transformer::Layout;

pub const MODEL_FORMAT: &str = "persona-steer/answer-model/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    /// Hidden width of the feed-forward block, as a multiple of `model_dim`.
    pub ffn_multiplier: usize,
    /// Maximum number of real tokens (virtual tokens excluded).
    pub context_len: usize,
    pub init_scale: f64,
    pub seed: u64,
    pub pretrain: PretrainConfig,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            model_dim: 32,
            heads: 2,
            ffn_multiplier: 4,
            context_len: 16,
            init_scale: 0.02,
            seed: 0,
            pretrain: PretrainConfig::default(),
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.model_dim == 0 || self.heads == 0 || self.ffn_multiplier == 0 {
            return Err(Error::InvalidInput("transformer sizes must be positive".into()));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidInput(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.context_len < 2 {
            return Err(Error::InvalidInput(
                "context_len must fit a question and separator".into(),
            ));
        }
        Ok(())
    }

    /// Fingerprint of the architecture (pretraining schedule excluded).
    pub fn architecture_fingerprint(&self) -> String {
        fingerprint::of_value(&(
            self.layers,
            self.model_dim,
            self.heads,
            self.ffn_multiplier,
            self.context_len,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct VocabSpec {
    max_options: usize,
    /// Question ids with their option counts.
    questions: Vec<(String, usize)>,
    demographics: Vec<(String, String)>,
}

/// Token inventory: separator, option indices, one token per question, one
/// token per (trait, category) pair, and one answer token per (question,
/// option) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabSpec", into = "VocabSpec")]
pub struct Vocab {
    spec: VocabSpec,
    question_lookup: HashMap<String, usize>,
    demographic_lookup: HashMap<(String, String), usize>,
    /// First answer token of each question.
    answer_base: HashMap<String, usize>,
    size: usize,
}

impl From<VocabSpec> for Vocab {
    fn from(spec: VocabSpec) -> Self {
        let q0 = 1 + spec.max_options;
        let d0 = q0 + spec.questions.len();
        let question_lookup = spec
            .questions
            .iter()
            .enumerate()
            .map(|(i, (q, _))| (q.clone(), q0 + i))
            .collect();
        let demographic_lookup = spec
            .demographics
            .iter()
            .enumerate()
            .map(|(i, td)| (td.clone(), d0 + i))
            .collect();
        let mut next = d0 + spec.demographics.len();
        let mut answer_base = HashMap::new();
        for (q, m) in &spec.questions {
            answer_base.insert(q.clone(), next);
            next += m;
        }
        Self {
            spec,
            question_lookup,
            demographic_lookup,
            answer_base,
            size: next,
        }
    }
}

impl From<Vocab> for VocabSpec {
    fn from(v: Vocab) -> Self {
        v.spec
    }
}

impl Vocab {
    pub const SEP: usize = 0;

    pub fn new(max_options: usize, questions: Vec<(String, usize)>, demographics: Vec<(String, String)>) -> Self {
        VocabSpec {
            max_options,
            questions,
            demographics,
        }
        .into()
    }

    pub fn from_matrix(matrix: &ResponseMatrix) -> Self {
        Self::new(
            matrix.max_option_count(),
            matrix
                .questions()
                .iter()
                .map(|q| (q.id.clone(), q.option_count()))
                .collect(),
            matrix.trait_categories(),
        )
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn max_options(&self) -> usize {
        self.spec.max_options
    }

    pub fn option(&self, index: usize) -> Result<usize> {
        if index < self.spec.max_options {
            Ok(1 + index)
        } else {
            Err(Error::Vocab(format!("option {index}")))
        }
    }

    pub fn question(&self, id: &str) -> Result<usize> {
        self.question_lookup
            .get(id)
            .copied()
            .ok_or_else(|| Error::Vocab(format!("question {id}")))
    }

    pub fn demographic(&self, trait_name: &str, category: &str) -> Result<usize> {
        self.demographic_lookup
            .get(&(trait_name.to_string(), category.to_string()))
            .copied()
            .ok_or_else(|| Error::Vocab(format!("{trait_name}={category}")))
    }

    /// Token for "answered `question_id` with `option`".
    pub fn answer(&self, question_id: &str, option: usize) -> Result<usize> {
        let &base = self
            .answer_base
            .get(question_id)
            .ok_or_else(|| Error::Vocab(format!("question {question_id}")))?;
        let m = self.spec.questions[base_index(&self.question_lookup, question_id, self.spec.max_options)].1;
        if option >= m {
            return Err(Error::Vocab(format!("option {option} of {question_id}")));
        }
        Ok(base + option)
    }

    /// `[question, SEP]`
    pub fn question_sequence(&self, id: &str) -> Result<Vec<usize>> {
        Ok(vec![self.question(id)?, Self::SEP])
    }

    /// Demographic tokens (sorted by trait) followed by the question sequence.
    pub fn demographics_sequence(
        &self,
        demographics: &BTreeMap<String, String>,
        question_id: &str,
    ) -> Result<Vec<usize>> {
        let mut seq = demographics
            .iter()
            .map(|(t, c)| self.demographic(t, c))
            .collect::<Result<Vec<_>>>()?;
        seq.extend(self.question_sequence(question_id)?);
        Ok(seq)
    }

    /// Answer tokens for `(question, chosen option)` pairs followed by the
    /// question sequence.
    pub fn context_sequence(&self, context: &[(&str, usize)], question_id: &str) -> Result<Vec<usize>> {
        let mut seq = context
            .iter()
            .map(|&(q, o)| self.answer(q, o))
            .collect::<Result<Vec<_>>>()?;
        seq.extend(self.question_sequence(question_id)?);
        Ok(seq)
    }
}

fn base_index(lookup: &HashMap<String, usize>, id: &str, max_options: usize) -> usize {
    lookup[id] - 1 - max_options
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PrefixMode {
    /// Per-layer key and value rows: shape [T, L, 2, D].
    #[default]
    Prefix,
    /// Input-embedding rows prepended to the sequence: shape [T, D].
    Prompt,
}

impl std::str::FromStr for PrefixMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prefix" => Ok(PrefixMode::Prefix),
            "prompt" => Ok(PrefixMode::Prompt),
            other => Err(Error::InvalidInput(format!("unknown mode {other}"))),
        }
    }
}

impl PrefixMode {
    /// Numbers per virtual token.
    pub fn width(self, layers: usize, model_dim: usize) -> usize {
        match self {
            PrefixMode::Prefix => layers * 2 * model_dim,
            PrefixMode::Prompt => model_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualPrefix<T> {
    pub mode: PrefixMode,
    pub tokens: usize,
    pub layers: usize,
    pub model_dim: usize,
    /// Row-major data: `[t][layer][key|value][d]` (prefix) or `[t][d]` (prompt).
    pub data: Vec<T>,
}

impl<T: Scalar> VirtualPrefix<T> {
    pub fn zeros(mode: PrefixMode, tokens: usize, config: &LmConfig) -> Self {
        Self {
            mode,
            tokens,
            layers: config.layers,
            model_dim: config.model_dim,
            data: vec![T::zero(); tokens * mode.width(config.layers, config.model_dim)],
        }
    }

    pub fn from_data(mode: PrefixMode, tokens: usize, config: &LmConfig, data: Vec<T>) -> Result<Self> {
        let expected = tokens * mode.width(config.layers, config.model_dim);
        if data.len() != expected {
            return Err(Error::Dimension {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            mode,
            tokens,
            layers: config.layers,
            model_dim: config.model_dim,
            data,
        })
    }

    pub fn shape(&self) -> Vec<usize> {
        match self.mode {
            PrefixMode::Prefix => vec![self.tokens, self.layers, 2, self.model_dim],
            PrefixMode::Prompt => vec![self.tokens, self.model_dim],
        }
    }

    pub fn per_token(&self) -> usize {
        self.mode.width(self.layers, self.model_dim)
    }

    /// Key (`kv = 0`) or value (`kv = 1`) row of virtual token `t` at `layer`.
    pub fn kv_row(&self, t: usize, layer: usize, kv: usize) -> &[T] {
        let d = self.model_dim;
        let start = ((t * self.layers + layer) * 2 + kv) * d;
        &self.data[start..start + d]
    }

    pub fn prompt_row(&self, t: usize) -> &[T] {
        &self.data[t * self.model_dim..(t + 1) * self.model_dim]
    }

    fn check(&self, config: &LmConfig) -> Result<()> {
        if self.layers != config.layers || self.model_dim != config.model_dim {
            return Err(Error::Dimension {
                expected: config.layers * config.model_dim,
                actual: self.layers * self.model_dim,
            });
        }
        let expected = self.tokens * self.per_token();
        if self.data.len() != expected {
            return Err(Error::Dimension {
                expected,
                actual: self.data.len(),
            });
        }
        if self.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("virtual prefix has non-finite entries".into()));
        }
        Ok(())
    }
}

/// The answer model. Weights live in one flat buffer described by [`Layout`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerModel<T> {
    pub format: String,
    pub config: LmConfig,
    pub vocab: Vocab,
    params: Vec<T>,
    frozen: bool,
}

impl<T: Scalar> AnswerModel<T> {
    /// Randomly initialized, trainable model.
    pub fn new(config: LmConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config, vocab.size());
        let params = layout.init::<T>(&config);
        Ok(Self {
            format: MODEL_FORMAT.to_string(),
            config,
            vocab,
            params,
            frozen: false,
        })
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.config, self.vocab.size())
    }

    pub fn parameters(&self) -> &[T] {
        &self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Apply `update` to the weights; fails once the model is frozen.
    pub fn update_parameters(&mut self, update: impl FnOnce(&mut [T])) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        update(&mut self.params);
        Ok(())
    }

    /// Little-endian bytes of every weight, for exact equality checks.
    pub fn parameter_bytes(&self) -> Vec<u8> {
        self.params.iter().flat_map(|p| p.as_f64().to_le_bytes()).collect()
    }

    /// Fingerprint over architecture, vocabulary and weights.
    pub fn fingerprint(&self) -> String {
        fingerprint::chain(&[
            &self.config.architecture_fingerprint(),
            &fingerprint::of_value(&self.vocab),
            &fingerprint::of_bytes(&self.parameter_bytes()),
        ])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        if model.format != MODEL_FORMAT {
            return Err(Error::Incompatible(format!(
                "model format {} (expected {MODEL_FORMAT})",
                model.format
            )));
        }
        let expected = model.layout().total;
        if model.params.len() != expected {
            return Err(Error::Dimension {
                expected,
                actual: model.params.len(),
            });
        }
        Ok(model)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        if tokens.len() > self.config.context_len {
            return Err(Error::InvalidInput(format!(
                "{} tokens exceed context length {}",
                tokens.len(),
                self.config.context_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab.size()) {
            return Err(Error::Vocab(format!("token id {bad}")));
        }
        Ok(())
    }

    fn check_options(&self, option_count: usize) -> Result<()> {
        if option_count == 0 || option_count > self.vocab.max_options() {
            return Err(Error::Vocab(format!("{option_count} options")));
        }
        Ok(())
    }

    /// Logits over the first `option_count` option tokens at the last position.
    pub fn forward_with_prefix(
        &self,
        prefix: Option<&VirtualPrefix<T>>,
        tokens: &[usize],
        option_count: usize,
    ) -> Result<Vec<T>> {
        self.check_options(option_count)?;
        let full = self.logits_at(prefix, tokens, tokens.len().saturating_sub(1))?;
        Ok((0..option_count).map(|o| full[1 + o]).collect())
    }

    /// Full-vocabulary logits at sequence position `position`.
    pub fn logits_at(&self, prefix: Option<&VirtualPrefix<T>>, tokens: &[usize], position: usize) -> Result<Vec<T>> {
        self.check_tokens(tokens)?;
        if let Some(p) = prefix {
            p.check(&self.config)?;
        }
        if position >= tokens.len() {
            return Err(Error::InvalidInput(format!("position {position} beyond sequence")));
        }
        let cache = transformer::forward(self, prefix, tokens);
        Ok(transformer::logits_at(self, &cache, position))
    }

    /// Every attention row (all layers, heads and query positions), each a
    /// distribution over virtual slots plus visible real positions.
    pub fn attention_rows(&self, prefix: Option<&VirtualPrefix<T>>, tokens: &[usize]) -> Result<Vec<Vec<T>>> {
        self.check_tokens(tokens)?;
        if let Some(p) = prefix {
            p.check(&self.config)?;
        }
        let cache = transformer::forward(self, prefix, tokens);
        Ok(transformer::attention_rows(self, &cache))
    }

    /// Cross-entropy at `target` over the restricted option logits, and its
    /// gradient with respect to every prefix entry. Weights get no gradient.
    pub fn prefix_gradient(
        &self,
        prefix: &VirtualPrefix<T>,
        tokens: &[usize],
        option_count: usize,
        target: usize,
    ) -> Result<(T, VirtualPrefix<T>)> {
        self.check_tokens(tokens)?;
        self.check_options(option_count)?;
        prefix.check(&self.config)?;
        if target >= option_count {
            return Err(Error::InvalidResponse(format!(
                "target {target} of {option_count} options"
            )));
        }
        let mut targets = vec![T::zero(); option_count];
        targets[target] = T::one();
        let cache = transformer::forward(self, Some(prefix), tokens);
        let (loss, dlogits) = transformer::soft_cross_entropy(self, &cache, &targets);
        let grads = transformer::backward(self, &cache, &dlogits, false);
        let data = grads.prefix.expect("prefix gradient requested");
        Ok((loss, VirtualPrefix { data, ..prefix.clone() }))
    }

    /// Cross-entropy against a target distribution over the options, and the
    /// gradient with respect to the weights (used by pretraining).
    pub fn parameter_gradient(&self, tokens: &[usize], targets: &[T]) -> Result<(T, Vec<T>)> {
        self.check_tokens(tokens)?;
        self.check_options(targets.len())?;
        let cache = transformer::forward(self, None, tokens);
        let (loss, dlogits) = transformer::soft_cross_entropy(self, &cache, targets);
        let grads = transformer::backward(self, &cache, &dlogits, true);
        Ok((loss, grads.params.expect("parameter gradient requested")))
    }
}

/// Restricted softmax over option logits.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax<T: Scalar>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> AnswerModel<f64> {
        let vocab = Vocab::new(
            4,
            vec![("q0".into(), 3), ("q1".into(), 4)],
            vec![("party".into(), "a".into())],
        );
        AnswerModel::new(
            LmConfig {
                seed: 3,
                ..Default::default()
            },
            vocab,
        )
        .unwrap()
    }

    #[test]
    fn vocab_layout() {
        let v = model().vocab;
        assert_eq!(v.option(0).unwrap(), 1);
        assert_eq!(v.question("q0").unwrap(), 5);
        assert_eq!(v.demographic("party", "a").unwrap(), 7);
        assert_eq!(v.answer("q0", 2).unwrap(), 10);
        assert_eq!(v.answer("q1", 0).unwrap(), 11);
        assert_eq!(v.size(), 15);
        assert!(v.answer("q0", 3).is_err());
        assert!(matches!(v.question("nope"), Err(Error::Vocab(_))));
        assert_eq!(v.question_sequence("q1").unwrap(), vec![6, Vocab::SEP]);
    }

    #[test]
    fn forward_is_deterministic() {
        let m = model();
        let tokens = m.vocab.question_sequence("q0").unwrap();
        let a = m.forward_with_prefix(None, &tokens, 3).unwrap();
        let b = m.forward_with_prefix(None, &tokens, 3).unwrap();
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|x| x.is_finite()));
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn frozen_weights_reject_updates() {
        let mut m = model();
        m.update_parameters(|p| p[0] += 1.0).unwrap();
        m.freeze();
        let before = m.parameter_bytes();
        assert!(matches!(m.update_parameters(|p| p[0] += 1.0), Err(Error::Frozen)));
        assert_eq!(before, m.parameter_bytes());
    }

    #[test]
    fn prefix_shapes() {
        let config = LmConfig::default();
        let p = VirtualPrefix::<f64>::zeros(PrefixMode::Prefix, 1, &config);
        assert_eq!(p.data.len(), 128);
        assert_eq!(p.shape(), vec![1, 2, 2, 32]);
        let p = VirtualPrefix::<f64>::zeros(PrefixMode::Prompt, 2, &config);
        assert_eq!(p.shape(), vec![2, 32]);
        assert!(VirtualPrefix::<f64>::from_data(PrefixMode::Prefix, 1, &config, vec![0.0; 127]).is_err());
    }

    #[test]
    fn zero_prompt_row_still_changes_logits() {
        let m = model();
        let tokens = m.vocab.question_sequence("q1").unwrap();
        let bare = m.forward_with_prefix(None, &tokens, 4).unwrap();
        let zero = VirtualPrefix::zeros(PrefixMode::Prompt, 1, &m.config);
        assert_ne!(bare, m.forward_with_prefix(Some(&zero), &tokens, 4).unwrap());
    }

    #[test]
    fn later_tokens_do_not_leak_backwards() {
        let m = model();
        let prefix = VirtualPrefix::from_data(
            PrefixMode::Prefix,
            1,
            &m.config,
            (0..128).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        let short = vec![7, 5, Vocab::SEP];
        let mut long = short.clone();
        long.extend([6, 9, Vocab::SEP]);
        for pos in 0..short.len() {
            assert_eq!(
                m.logits_at(Some(&prefix), &short, pos).unwrap(),
                m.logits_at(Some(&prefix), &long, pos).unwrap()
            );
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let m = model();
        let prefix = VirtualPrefix::from_data(PrefixMode::Prefix, 2, &m.config, vec![0.3; 256]).unwrap();
        let rows = m.attention_rows(Some(&prefix), &[7, 5, Vocab::SEP]).unwrap();
        assert_eq!(rows.len(), 2 * 2 * 3);
        for row in rows {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn input_errors() {
        let m = model();
        assert!(matches!(m.forward_with_prefix(None, &[99], 3), Err(Error::Vocab(_))));
        assert!(matches!(m.forward_with_prefix(None, &[5, 0], 5), Err(Error::Vocab(_))));
        assert!(m.forward_with_prefix(None, &[0; 17], 3).is_err());
        let wrong = VirtualPrefix::<f64>::zeros(
            PrefixMode::Prefix,
            1,
            &LmConfig {
                layers: 3,
                ..Default::default()
            },
        );
        assert!(matches!(
            m.forward_with_prefix(Some(&wrong), &[5, 0], 3),
            Err(Error::Dimension { .. })
        ));
        let p = VirtualPrefix::zeros(PrefixMode::Prefix, 1, &m.config);
        assert!(m.prefix_gradient(&p, &[5, 0], 3, 3).is_err());
    }

    #[test]
    fn json_round_trip() {
        let mut m = model();
        m.freeze();
        let back = AnswerModel::<f64>::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back.fingerprint(), m.fingerprint());
        assert!(back.is_frozen());
    }

    #[test]
    fn ties_pick_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
        let p = softmax(&[0.0, 0.0, 0.0, 0.0]);
        assert!(p.iter().all(|&x| (x - 0.25f64).abs() < 1e-15));
    }
}
