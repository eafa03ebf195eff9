//! Evaluation protocol: baselines, steered prediction, and macro accuracy.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::cf::{embed_unseen, CfConfig};
use crate::dataset::{FourWaySplit, ResponseKey, ResponseMatrix};
use crate::error::{Error, Result};
use crate::fingerprint;
use crate::lm::{argmax, AnswerModel};
use crate::persona::{demographic_embedding, kmeans, ClusterModel, PersonaKind};
use crate::scalar::{cosine, Scalar};
use crate::spm::{steer_predict, SoftPromptModel};

/// `(individual id, question id)`
pub type AnswerKey = (String, String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub method: String,
    pub macro_accuracy: f64,
    pub per_individual: BTreeMap<String, f64>,
    pub n_individuals: usize,
    pub n_responses: usize,
    pub config_fingerprint: String,
    /// Individuals evaluated with a degraded protocol, and why.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub fallbacks: BTreeMap<String, String>,
}

impl EvaluationReport {
    pub fn labeled(mut self, method: impl Into<String>, config_fingerprint: impl Into<String>) -> Self {
        self.method = method.into();
        self.config_fingerprint = config_fingerprint.into();
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `individual_id,accuracy`
    pub fn per_individual_csv(&self) -> String {
        let mut out = String::from("individual_id,accuracy\n");
        for (id, acc) in &self.per_individual {
            out.push_str(&format!("{id},{acc}\n"));
        }
        out
    }
}

/// Per-individual accuracy averaged uniformly over individuals.
pub fn macro_accuracy(
    predictions: &BTreeMap<AnswerKey, usize>,
    truths: &BTreeMap<AnswerKey, usize>,
) -> Result<EvaluationReport> {
    if truths.is_empty() {
        return Err(Error::EmptyKeys);
    }
    if predictions.len() != truths.len() || predictions.keys().zip(truths.keys()).any(|(a, b)| a != b) {
        return Err(Error::Alignment(format!(
            "{} predictions against {} truths with differing keys",
            predictions.len(),
            truths.len()
        )));
    }
    let mut tally: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for ((key, truth), predicted) in truths.iter().zip(predictions.values()) {
        let entry = tally.entry(key.0.as_str()).or_default();
        entry.1 += 1;
        if predicted == truth {
            entry.0 += 1;
        }
    }
    let per_individual: BTreeMap<String, f64> = tally
        .into_iter()
        .map(|(id, (correct, total))| (id.to_string(), correct as f64 / total as f64))
        .collect();
    let macro_accuracy = per_individual.values().sum::<f64>() / per_individual.len() as f64;
    Ok(EvaluationReport {
        method: String::new(),
        macro_accuracy,
        n_individuals: per_individual.len(),
        n_responses: truths.len(),
        per_individual,
        config_fingerprint: String::new(),
        fallbacks: BTreeMap::new(),
    })
}

fn truths_of(matrix: &ResponseMatrix, keys: &[ResponseKey]) -> Result<BTreeMap<AnswerKey, usize>> {
    keys.iter()
        .map(|&k| {
            let key = answer_key(matrix, k);
            let option = matrix
                .option_index(k)
                .ok_or_else(|| Error::lookup("response", format!("{}/{}", key.0, key.1)))?;
            Ok((key, option))
        })
        .collect()
}

fn answer_key(matrix: &ResponseMatrix, k: ResponseKey) -> AnswerKey {
    (
        matrix.individual(k.individual).id.clone(),
        matrix.question(k.question).id.clone(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    RawQ,
    DemographicsRawQ,
    ContextRawQ,
}

impl BaselineKind {
    pub fn label(self) -> &'static str {
        match self {
            BaselineKind::RawQ => "raw_q",
            BaselineKind::DemographicsRawQ => "demographics_raw_q",
            BaselineKind::ContextRawQ => "context_raw_q",
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" | "raw_q" => Ok(BaselineKind::RawQ),
            "demo" | "demographics_raw_q" => Ok(BaselineKind::DemographicsRawQ),
            "context" | "context_raw_q" => Ok(BaselineKind::ContextRawQ),
            other => Err(Error::InvalidInput(format!("unknown baseline {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub kind: BaselineKind,
    pub context_k: usize,
}

impl BaselineSpec {
    pub fn new(kind: BaselineKind) -> Self {
        Self { kind, context_k: 5 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == BaselineKind::ContextRawQ && self.context_k == 0 {
            return Err(Error::InvalidInput("context_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Baseline on the seen individuals' held-out responses, with their
/// training responses as the context pool.
pub fn run_baseline<T: Scalar>(
    spec: &BaselineSpec,
    model: &AnswerModel<T>,
    matrix: &ResponseMatrix,
    split: &FourWaySplit,
    question_vectors: &BTreeMap<String, Vec<T>>,
) -> Result<EvaluationReport> {
    run_baseline_on(spec, model, matrix, &split.r_tr_val, &split.r_tr_tr, question_vectors)
}

/// Baseline predictions for `eval_keys`. Context pairs for an individual are
/// drawn from their responses in `context_pool`.
pub fn run_baseline_on<T: Scalar>(
    spec: &BaselineSpec,
    model: &AnswerModel<T>,
    matrix: &ResponseMatrix,
    eval_keys: &[ResponseKey],
    context_pool: &[ResponseKey],
    question_vectors: &BTreeMap<String, Vec<T>>,
) -> Result<EvaluationReport> {
    spec.validate()?;
    let vocab = &model.vocab;
    let mut pool: BTreeMap<usize, Vec<ResponseKey>> = BTreeMap::new();
    for &k in context_pool {
        pool.entry(k.individual).or_default().push(k);
    }
    let room = model.config.context_len - 2;
    let mut fallbacks = BTreeMap::new();
    let mut predictions = BTreeMap::new();
    for &key in eval_keys {
        let person = matrix.individual(key.individual);
        let question = matrix.question(key.question);
        let raw = vocab.question_sequence(&question.id)?;
        let tokens = match spec.kind {
            BaselineKind::RawQ => raw,
            BaselineKind::DemographicsRawQ => match vocab.demographics_sequence(&person.demographics, &question.id) {
                Ok(seq) if seq.len() <= model.config.context_len => seq,
                _ => {
                    fallbacks.insert(person.id.clone(), "demographics unavailable; question only".to_string());
                    raw
                }
            },
            BaselineKind::ContextRawQ => {
                let target = question_vectors.get(&question.id);
                let candidates = pool.get(&key.individual).map(Vec::as_slice).unwrap_or(&[]);
                match target {
                    Some(target) if !candidates.is_empty() => {
                        let mut scored: Vec<(T, &str, usize)> = candidates
                            .iter()
                            .filter(|k| k.question != key.question)
                            .filter_map(|&k| {
                                let id = matrix.question(k.question).id.as_str();
                                let v = question_vectors.get(id)?;
                                Some((cosine(v, target), id, matrix.option_index(k)?))
                            })
                            .collect();
                        scored.sort_by(|a, b| {
                            b.0.partial_cmp(&a.0)
                                .unwrap_or(std::cmp::Ordering::Equal)
                                .then(a.1.cmp(b.1))
                        });
                        let take = spec.context_k.min(room);
                        if spec.context_k > room {
                            fallbacks.insert(person.id.clone(), format!("context truncated to {room} pairs"));
                        }
                        let context: Vec<(&str, usize)> = scored.iter().take(take).map(|&(_, q, o)| (q, o)).collect();
                        vocab.context_sequence(&context, &question.id)?
                    }
                    _ => {
                        fallbacks.insert(
                            person.id.clone(),
                            "no training responses for context; question only".to_string(),
                        );
                        raw
                    }
                }
            }
        };
        let logits = model.forward_with_prefix(None, &tokens, question.option_count())?;
        predictions.insert(answer_key(matrix, key), argmax(&logits));
    }
    let fp = fingerprint::chain(&[
        &model.fingerprint(),
        &fingerprint::of_value(spec),
        &fingerprint::of_value(eval_keys),
    ]);
    let mut report = macro_accuracy(&predictions, &truths_of(matrix, eval_keys)?)?.labeled(spec.kind.label(), fp);
    report.fallbacks = fallbacks;
    Ok(report)
}

/// Steered predictions for `eval_keys`, using `personas[individual id]` as
/// each individual's persona vector.
pub fn run_steered<T: Scalar>(
    label: &str,
    spm: &SoftPromptModel<T>,
    model: &AnswerModel<T>,
    matrix: &ResponseMatrix,
    eval_keys: &[ResponseKey],
    personas: &BTreeMap<String, Vec<T>>,
) -> Result<EvaluationReport> {
    spm.check_compatible(model)?;
    let mut predictions = BTreeMap::new();
    for &key in eval_keys {
        let id = &matrix.individual(key.individual).id;
        let persona = personas.get(id).ok_or_else(|| Error::lookup("persona", id.clone()))?;
        let option = steer_predict(spm, model, persona, matrix, &matrix.question(key.question).id)?;
        predictions.insert(answer_key(matrix, key), option);
    }
    let fp = fingerprint::chain(&[
        &model.fingerprint(),
        &spm.fingerprint(),
        &fingerprint::of_value(personas),
        &fingerprint::of_value(eval_keys),
    ]);
    Ok(macro_accuracy(&predictions, &truths_of(matrix, eval_keys)?)?.labeled(label, fp))
}

/// Each clustered individual mapped to its cluster centroid.
pub fn cluster_personas<T: Scalar>(clusters: &ClusterModel<T>) -> BTreeMap<String, Vec<T>> {
    crate::persona::substitute_centroids(clusters)
}

/// Each individual in `ids` mapped to the mean embedding of the training
/// individuals sharing their `trait_name` category.
pub fn demographic_personas<T: Scalar>(
    embeddings: &BTreeMap<String, Vec<T>>,
    matrix: &ResponseMatrix,
    trait_name: &str,
    ids: &BTreeSet<String>,
) -> Result<BTreeMap<String, Vec<T>>> {
    let mut by_category: BTreeMap<String, Vec<T>> = BTreeMap::new();
    let mut out = BTreeMap::new();
    for person in matrix.individuals().iter().filter(|p| ids.contains(&p.id)) {
        let category = person
            .demographics
            .get(trait_name)
            .ok_or_else(|| Error::lookup("demographic trait", format!("{}:{trait_name}", person.id)))?;
        if !by_category.contains_key(category) {
            let e = demographic_embedding(embeddings, matrix.individuals(), trait_name, category)?;
            by_category.insert(category.clone(), e.vector);
        }
        out.insert(person.id.clone(), by_category[category].clone());
    }
    Ok(out)
}

pub fn persona_label(kind: PersonaKind) -> &'static str {
    match kind {
        PersonaKind::Individual => "individual",
        PersonaKind::Cluster => "cluster",
        PersonaKind::Demographic => "demographic",
    }
}

/// Number of responses used to embed each unseen individual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SweepK {
    Count(usize),
    All,
}

impl SweepK {
    pub fn label(self) -> String {
        match self {
            SweepK::Count(k) => k.to_string(),
            SweepK::All => "all".to_string(),
        }
    }
}

impl std::str::FromStr for SweepK {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(SweepK::All);
        }
        s.parse()
            .map(SweepK::Count)
            .map_err(|_| Error::InvalidInput(format!("K must be a count or 'all', got {s}")))
    }
}

impl TryFrom<String> for SweepK {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SweepK> for String {
    fn from(k: SweepK) -> String {
        k.label()
    }
}

/// For each K, embed the validation individuals from K of their training
/// responses (question vectors frozen) and evaluate steering on their
/// held-out responses. Neither the soft-prompt model nor the question
/// vectors are retrained.
pub fn unseen_sweep<T: Scalar>(
    k_values: &[SweepK],
    spm: &SoftPromptModel<T>,
    model: &AnswerModel<T>,
    matrix: &ResponseMatrix,
    split: &FourWaySplit,
    question_vectors: &BTreeMap<String, Vec<T>>,
    cf_config: &CfConfig,
) -> Result<Vec<EvaluationReport>> {
    if split.r_val_tr.is_empty() || split.r_val_val.is_empty() {
        return Err(Error::InsufficientData("validation partitions are empty".into()));
    }
    let mut available: BTreeMap<usize, usize> = BTreeMap::new();
    for k in &split.r_val_tr {
        *available.entry(k.individual).or_default() += 1;
    }
    let mut reports = Vec::with_capacity(k_values.len());
    for &k in k_values {
        let cap = match k {
            SweepK::Count(n) => Some(n),
            SweepK::All => None,
        };
        let unseen = embed_unseen(matrix, &split.r_val_tr, question_vectors, cf_config, cap)?;
        let eval_keys: Vec<ResponseKey> = split
            .r_val_val
            .iter()
            .copied()
            .filter(|key| unseen.vectors.contains_key(&matrix.individual(key.individual).id))
            .collect();
        let mut report = run_steered(
            &format!("unseen K={}", k.label()),
            spm,
            model,
            matrix,
            &eval_keys,
            &unseen.vectors,
        )?;
        if let Some(n) = cap {
            for (&person, &have) in &available {
                if have < n {
                    report.fallbacks.insert(
                        matrix.individual(person).id.clone(),
                        format!("only {have} responses available; used all"),
                    );
                }
            }
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Steered accuracy with cluster personas for each k.
pub fn cluster_count_sweep<T: Scalar>(
    k_values: &[usize],
    embeddings: &BTreeMap<String, Vec<T>>,
    spm: &SoftPromptModel<T>,
    model: &AnswerModel<T>,
    matrix: &ResponseMatrix,
    eval_keys: &[ResponseKey],
    seed: u64,
) -> Result<Vec<EvaluationReport>> {
    k_values
        .iter()
        .map(|&k| {
            let clusters = kmeans(embeddings, k, seed)?;
            run_steered(
                &format!("cluster k={k}"),
                spm,
                model,
                matrix,
                eval_keys,
                &cluster_personas(&clusters),
            )
        })
        .collect()
}

/// Method comparison table, one row per report.
pub fn comparison_markdown(reports: &[EvaluationReport]) -> String {
    let mut out = String::from("| Method | Macro accuracy (%) | Individuals | Responses |\n|---|---:|---:|---:|\n");
    for r in reports {
        out.push_str(&format!(
            "| {} | {:.2} | {} | {} |\n",
            r.method,
            100.0 * r.macro_accuracy,
            r.n_individuals,
            r.n_responses
        ));
    }
    out
}

/// `method,macro_accuracy,n_individuals,n_responses,config_fingerprint`
pub fn reports_csv(reports: &[EvaluationReport]) -> String {
    let mut out = String::from("method,macro_accuracy,n_individuals,n_responses,config_fingerprint\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.method, r.macro_accuracy, r.n_individuals, r.n_responses, r.config_fingerprint
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keyed(entries: &[(&str, &str, usize)]) -> BTreeMap<AnswerKey, usize> {
        entries
            .iter()
            .map(|&(i, q, o)| ((i.to_string(), q.to_string()), o))
            .collect()
    }

    #[test]
    fn macro_examples() {
        let truth = keyed(&[
            ("a", "1", 0),
            ("a", "2", 0),
            ("a", "3", 0),
            ("a", "4", 0),
            ("b", "1", 1),
            ("b", "2", 1),
            ("b", "3", 1),
            ("b", "4", 1),
        ]);
        let pred = keyed(&[
            ("a", "1", 0),
            ("a", "2", 0),
            ("a", "3", 1),
            ("a", "4", 1),
            ("b", "1", 1),
            ("b", "2", 1),
            ("b", "3", 1),
            ("b", "4", 1),
        ]);
        let r = macro_accuracy(&pred, &truth).unwrap();
        assert_eq!(r.macro_accuracy, 0.75);
        assert_eq!(macro_accuracy(&truth, &truth).unwrap().macro_accuracy, 1.0);
    }

    #[test]
    fn macro_differs_from_micro() {
        let mut truth = BTreeMap::new();
        let mut pred = BTreeMap::new();
        for q in 0..10 {
            truth.insert(("a".to_string(), format!("q{q}")), 0);
            pred.insert(("a".to_string(), format!("q{q}")), 1);
        }
        truth.insert(("b".to_string(), "q0".to_string()), 2);
        pred.insert(("b".to_string(), "q0".to_string()), 2);
        let r = macro_accuracy(&pred, &truth).unwrap();
        assert_eq!(r.macro_accuracy, 0.5);
        assert_eq!(r.n_responses, 11);
    }

    #[test]
    fn mismatched_keys_are_an_alignment_error() {
        let truth = keyed(&[("a", "1", 0)]);
        let pred = keyed(&[("a", "2", 0)]);
        assert_eq!(macro_accuracy(&pred, &truth).unwrap_err().category(), "alignment");
        assert_eq!(
            macro_accuracy(&BTreeMap::new(), &BTreeMap::new())
                .unwrap_err()
                .category(),
            "undefined-mean"
        );
    }

    #[test]
    fn sweep_k_parsing() {
        assert_eq!("all".parse::<SweepK>().unwrap(), SweepK::All);
        assert_eq!("5".parse::<SweepK>().unwrap(), SweepK::Count(5));
        assert!("x".parse::<SweepK>().is_err());
        assert_eq!("demo".parse::<BaselineKind>().unwrap(), BaselineKind::DemographicsRawQ);
    }
}
