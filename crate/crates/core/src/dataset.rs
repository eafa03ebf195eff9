//! Survey data: questions with ordinal options, individuals with
//! demographics, and the sparse response matrix.
//!
//! Responses are stored as chosen option indices; the value used for
//! factorization is derived on access via [`map_ordinal`], so the stored
//! value always equals `option_index / (m - 1)` for the question's `m`
//! options.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

pub const DEFAULT_REFUSAL_LABELS: &[&str] = &["Refused"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    pub topic: String,
    pub options: Vec<String>,
}

impl Question {
    pub fn option_count(&self) -> usize {
        self.options.len()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Individual {
    pub id: String,
    pub demographics: BTreeMap<String, String>,
}

/// Position of a response in the matrix: indices into
/// [`ResponseMatrix::individuals`] and [`ResponseMatrix::questions`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ResponseKey {
    pub individual: usize,
    pub question: usize,
}

impl ResponseKey {
    pub fn new(individual: usize, question: usize) -> Self {
        Self { individual, question }
    }
}

/// Map the `option_index`-th of `option_count` ordered options onto [0, 1]
/// with uniform spacing.
pub fn map_ordinal<T: Scalar>(option_index: usize, option_count: usize) -> Result<T> {
    if option_count < 2 {
        return Err(Error::InvalidQuestion {
            id: String::new(),
            reason: format!("{option_count} options; at least 2 required"),
        });
    }
    if option_index >= option_count {
        return Err(Error::InvalidResponse(format!(
            "option index {option_index} out of range for {option_count} options"
        )));
    }
    Ok(T::from_count(option_index) / T::from_count(option_count - 1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMatrix {
    individuals: Vec<Individual>,
    questions: Vec<Question>,
    responses: BTreeMap<ResponseKey, usize>,
    individual_index: HashMap<String, usize>,
    question_index: HashMap<String, usize>,
}

impl ResponseMatrix {
    /// Build and validate a matrix from `(individual_id, question_id, option_index)` triples.
    pub fn new<I>(individuals: Vec<Individual>, questions: Vec<Question>, responses: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String, usize)>,
    {
        let mut individual_index = HashMap::with_capacity(individuals.len());
        for (idx, ind) in individuals.iter().enumerate() {
            if individual_index.insert(ind.id.clone(), idx).is_some() {
                return Err(Error::InvalidInput(format!("duplicate individual id {}", ind.id)));
            }
        }
        let mut question_index = HashMap::with_capacity(questions.len());
        for (idx, q) in questions.iter().enumerate() {
            validate_question(q)?;
            if question_index.insert(q.id.clone(), idx).is_some() {
                return Err(Error::InvalidQuestion {
                    id: q.id.clone(),
                    reason: "duplicate question id".into(),
                });
            }
        }
        let mut matrix = Self {
            individuals,
            questions,
            responses: BTreeMap::new(),
            individual_index,
            question_index,
        };
        for (ind, q, option) in responses {
            matrix.insert(&ind, &q, option)?;
        }
        Ok(matrix)
    }

    fn insert(&mut self, individual_id: &str, question_id: &str, option: usize) -> Result<()> {
        let individual = *self
            .individual_index
            .get(individual_id)
            .ok_or_else(|| Error::ReferentialIntegrity(format!("response cites unknown individual {individual_id}")))?;
        let question = *self
            .question_index
            .get(question_id)
            .ok_or_else(|| Error::ReferentialIntegrity(format!("response cites unknown question {question_id}")))?;
        let m = self.questions[question].option_count();
        if option >= m {
            return Err(Error::InvalidResponse(format!(
                "{individual_id} answered option {option} of question {question_id} with {m} options"
            )));
        }
        let key = ResponseKey::new(individual, question);
        if self.responses.insert(key, option).is_some() {
            return Err(Error::InvalidResponse(format!(
                "duplicate response for ({individual_id}, {question_id})"
            )));
        }
        Ok(())
    }

    pub fn individuals(&self) -> &[Individual] {
        &self.individuals
    }

    pub fn questions(&self) -> &[Question] {
        &self.questions
    }

    pub fn individual(&self, idx: usize) -> &Individual {
        &self.individuals[idx]
    }

    pub fn question(&self, idx: usize) -> &Question {
        &self.questions[idx]
    }

    pub fn individual_idx(&self, id: &str) -> Result<usize> {
        self.individual_index
            .get(id)
            .copied()
            .ok_or_else(|| Error::lookup("individual", id))
    }

    pub fn question_idx(&self, id: &str) -> Result<usize> {
        self.question_index
            .get(id)
            .copied()
            .ok_or_else(|| Error::lookup("question", id))
    }

    /// Number of observed responses, |R|.
    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = ResponseKey> + '_ {
        self.responses.keys().copied()
    }

    pub fn responses(&self) -> impl Iterator<Item = (ResponseKey, usize)> + '_ {
        self.responses.iter().map(|(&k, &v)| (k, v))
    }

    pub fn option_index(&self, key: ResponseKey) -> Option<usize> {
        self.responses.get(&key).copied()
    }

    /// Ordinal value r_ij in [0, 1].
    pub fn value<T: Scalar>(&self, key: ResponseKey) -> Option<T> {
        let option = self.option_index(key)?;
        let m = self.questions[key.question].option_count();
        Some(T::from_count(option) / T::from_count(m - 1))
    }

    /// Responses of one individual, ordered by question index.
    pub fn responses_of(&self, individual: usize) -> impl Iterator<Item = (ResponseKey, usize)> + '_ {
        let lo = ResponseKey::new(individual, 0);
        let hi = ResponseKey::new(individual + 1, 0);
        self.responses.range(lo..hi).map(|(&k, &v)| (k, v))
    }

    pub fn max_option_count(&self) -> usize {
        self.questions.iter().map(Question::option_count).max().unwrap_or(0)
    }

    /// Sorted, de-duplicated list of demographic trait names.
    pub fn traits(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self
            .individuals
            .iter()
            .flat_map(|ind| ind.demographics.keys())
            .collect();
        set.into_iter().cloned().collect()
    }

    /// Every (trait, category) pair present, sorted.
    pub fn trait_categories(&self) -> Vec<(String, String)> {
        let set: BTreeSet<(&String, &String)> = self
            .individuals
            .iter()
            .flat_map(|ind| ind.demographics.iter())
            .collect();
        set.into_iter().map(|(t, c)| (t.clone(), c.clone())).collect()
    }

    /// Write the matrix in the three-file interchange format.
    pub fn write_files(&self, questions: &Path, responses: &Path, demographics: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(questions).map_err(|e| Error::io(questions, e))?);
        for q in &self.questions {
            serde_json::to_writer(&mut out, q)?;
            out.write_all(b"\n").map_err(|e| Error::io(questions, e))?;
        }
        out.flush().map_err(|e| Error::io(questions, e))?;

        let mut w = csv::Writer::from_path(responses)?;
        w.write_record(["individual_id", "question_id", "option_index"])?;
        for (key, option) in self.responses() {
            w.write_record([
                self.individuals[key.individual].id.as_str(),
                self.questions[key.question].id.as_str(),
                &option.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(responses, e))?;

        let mut w = csv::Writer::from_path(demographics)?;
        w.write_record(["individual_id", "trait", "category"])?;
        for ind in &self.individuals {
            for (t, c) in &ind.demographics {
                w.write_record([ind.id.as_str(), t, c])?;
            }
        }
        w.flush().map_err(|e| Error::io(demographics, e))?;
        Ok(())
    }
}

fn validate_question(q: &Question) -> Result<()> {
    if q.options.len() < 2 {
        return Err(Error::InvalidQuestion {
            id: q.id.clone(),
            reason: format!("{} options; at least 2 required", q.options.len()),
        });
    }
    let distinct: HashSet<&String> = q.options.iter().collect();
    if distinct.len() != q.options.len() {
        return Err(Error::InvalidQuestion {
            id: q.id.clone(),
            reason: "option labels are not distinct".into(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Option labels treated as non-answers: dropped from the option list,
    /// and responses choosing them become nulls.
    pub refusal_labels: Vec<String>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            refusal_labels: DEFAULT_REFUSAL_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Deserialize)]
struct QuestionRow {
    id: String,
    text: String,
    #[serde(default)]
    topic: String,
    options: Vec<String>,
}

#[derive(Deserialize)]
struct ResponseRow {
    individual_id: String,
    question_id: String,
    option_index: usize,
}

#[derive(Deserialize)]
struct DemographicRow {
    individual_id: String,
    #[serde(rename = "trait")]
    trait_name: String,
    category: String,
}

fn csv_line(err: &csv::Error) -> usize {
    err.position().map(|p| p.line() as usize).unwrap_or(0)
}

/// Load questions (JSON lines), responses (CSV) and optional demographics (CSV).
pub fn load_dataset(
    questions_path: &Path,
    responses_path: &Path,
    demographics_path: Option<&Path>,
    options: &LoadOptions,
) -> Result<ResponseMatrix> {
    let refusals: HashSet<&str> = options.refusal_labels.iter().map(String::as_str).collect();

    // original option index -> kept option index, per question id
    let mut remap: HashMap<String, Vec<Option<usize>>> = HashMap::new();
    let mut questions = Vec::new();
    let reader = BufReader::new(File::open(questions_path).map_err(|e| Error::io(questions_path, e))?);
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(questions_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: QuestionRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: questions_path.to_path_buf(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        let mut mapping = Vec::with_capacity(row.options.len());
        let mut kept = Vec::new();
        for label in row.options {
            if refusals.contains(label.as_str()) {
                mapping.push(None);
            } else {
                mapping.push(Some(kept.len()));
                kept.push(label);
            }
        }
        remap.insert(row.id.clone(), mapping);
        questions.push(Question {
            id: row.id,
            text: row.text,
            topic: row.topic,
            options: kept,
        });
    }

    let mut demographics: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    if let Some(path) = demographics_path {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| parse_error(path, &e))?;
        for row in rdr.deserialize::<DemographicRow>() {
            let row = row.map_err(|e| parse_error(path, &e))?;
            demographics
                .entry(row.individual_id)
                .or_default()
                .insert(row.trait_name, row.category);
        }
    }

    let mut triples = Vec::new();
    let mut individual_ids: BTreeSet<String> = demographics.keys().cloned().collect();
    let mut rdr = csv::Reader::from_path(responses_path).map_err(|e| parse_error(responses_path, &e))?;
    for row in rdr.deserialize::<ResponseRow>() {
        let row = row.map_err(|e| parse_error(responses_path, &e))?;
        let mapping = remap.get(&row.question_id).ok_or_else(|| {
            Error::ReferentialIntegrity(format!("response cites unknown question {}", row.question_id))
        })?;
        let kept = match mapping.get(row.option_index) {
            Some(Some(kept)) => *kept,
            Some(None) => continue,
            None => {
                return Err(Error::InvalidResponse(format!(
                    "{} answered option {} of question {} with {} options",
                    row.individual_id,
                    row.option_index,
                    row.question_id,
                    mapping.len()
                )))
            }
        };
        individual_ids.insert(row.individual_id.clone());
        triples.push((row.individual_id, row.question_id, kept));
    }

    let individuals = individual_ids
        .into_iter()
        .map(|id| Individual {
            demographics: demographics.remove(&id).unwrap_or_default(),
            id,
        })
        .collect();
    ResponseMatrix::new(individuals, questions, triples)
}

fn parse_error(path: &Path, err: &csv::Error) -> Error {
    if let csv::ErrorKind::Io(io) = err.kind() {
        return Error::io(path, std::io::Error::new(io.kind(), io.to_string()));
    }
    Error::Parse {
        path: path.to_path_buf(),
        line: csv_line(err),
        message: err.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub seed: u64,
    pub individual_train_fraction: f64,
    pub response_train_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            individual_train_fraction: 0.8,
            response_train_fraction: 0.8,
        }
    }
}

impl SplitSpec {
    fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("individual_train_fraction", self.individual_train_fraction),
            ("response_train_fraction", self.response_train_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::InvalidInput(format!("{name} = {f} must lie strictly in (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Size of the training side when `n` items are split at `fraction`:
/// the validation side gets `floor(n * (1 - fraction))`, the remainder trains.
pub fn train_count(n: usize, fraction: f64) -> usize {
    let val = ((n as f64) * (1.0 - fraction) + 1e-9).floor() as usize;
    n - val.min(n)
}

/// Responses partitioned by (train/validation individual) x (train/validation response).
#[derive(Debug, Clone, PartialEq)]
pub struct FourWaySplit {
    pub spec: SplitSpec,
    pub p_tr: Vec<usize>,
    pub p_val: Vec<usize>,
    pub r_tr_tr: Vec<ResponseKey>,
    pub r_tr_val: Vec<ResponseKey>,
    pub r_val_tr: Vec<ResponseKey>,
    pub r_val_val: Vec<ResponseKey>,
}

pub fn four_way_split(matrix: &ResponseMatrix, spec: &SplitSpec) -> Result<FourWaySplit> {
    spec.validate()?;
    if matrix.is_empty() {
        return Err(Error::DegenerateSplit("response matrix is empty".into()));
    }
    let mut rng = rng::seeded(spec.seed);
    let mut order: Vec<usize> = (0..matrix.individuals().len()).collect();
    order.sort_by(|&a, &b| matrix.individual(a).id.cmp(&matrix.individual(b).id));
    order.shuffle(&mut rng);

    let n_tr = train_count(order.len(), spec.individual_train_fraction);
    let mut p_tr = order[..n_tr].to_vec();
    let mut p_val = order[n_tr..].to_vec();
    p_tr.sort_unstable();
    p_val.sort_unstable();

    let mut split_side = |people: &[usize]| {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for &ind in people {
            let mut keys: Vec<ResponseKey> = matrix.responses_of(ind).map(|(k, _)| k).collect();
            keys.shuffle(&mut rng);
            let cut = train_count(keys.len(), spec.response_train_fraction);
            train.extend_from_slice(&keys[..cut]);
            val.extend_from_slice(&keys[cut..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        (train, val)
    };
    let (r_tr_tr, r_tr_val) = split_side(&p_tr);
    let (r_val_tr, r_val_val) = split_side(&p_val);

    let split = FourWaySplit {
        spec: *spec,
        p_tr,
        p_val,
        r_tr_tr,
        r_tr_val,
        r_val_tr,
        r_val_val,
    };
    for (name, empty) in [
        ("P_tr", split.p_tr.is_empty()),
        ("P_val", split.p_val.is_empty()),
        ("R_tr^tr", split.r_tr_tr.is_empty()),
        ("R_tr^val", split.r_tr_val.is_empty()),
        ("R_val^tr", split.r_val_tr.is_empty()),
        ("R_val^val", split.r_val_val.is_empty()),
    ] {
        if empty {
            return Err(Error::DegenerateSplit(format!("partition {name} would be empty")));
        }
    }
    Ok(split)
}

/// Serialized split: ids instead of matrix indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub spec: SplitSpec,
    pub p_tr: Vec<String>,
    pub p_val: Vec<String>,
    pub r_tr_tr: Vec<(String, String)>,
    pub r_tr_val: Vec<(String, String)>,
    pub r_val_tr: Vec<(String, String)>,
    pub r_val_val: Vec<(String, String)>,
}

impl FourWaySplit {
    pub fn to_file(&self, matrix: &ResponseMatrix) -> SplitFile {
        let people = |v: &[usize]| v.iter().map(|&i| matrix.individual(i).id.clone()).collect();
        let keys = |v: &[ResponseKey]| {
            v.iter()
                .map(|k| {
                    (
                        matrix.individual(k.individual).id.clone(),
                        matrix.question(k.question).id.clone(),
                    )
                })
                .collect()
        };
        SplitFile {
            spec: self.spec,
            p_tr: people(&self.p_tr),
            p_val: people(&self.p_val),
            r_tr_tr: keys(&self.r_tr_tr),
            r_tr_val: keys(&self.r_tr_val),
            r_val_tr: keys(&self.r_val_tr),
            r_val_val: keys(&self.r_val_val),
        }
    }

    pub fn from_file(file: &SplitFile, matrix: &ResponseMatrix) -> Result<Self> {
        let people = |v: &[String]| -> Result<Vec<usize>> { v.iter().map(|id| matrix.individual_idx(id)).collect() };
        let keys = |v: &[(String, String)]| -> Result<Vec<ResponseKey>> {
            v.iter()
                .map(|(i, q)| {
                    let key = ResponseKey::new(matrix.individual_idx(i)?, matrix.question_idx(q)?);
                    matrix
                        .option_index(key)
                        .map(|_| key)
                        .ok_or_else(|| Error::ReferentialIntegrity(format!("split cites missing response ({i}, {q})")))
                })
                .collect()
        };
        Ok(Self {
            spec: file.spec,
            p_tr: people(&file.p_tr)?,
            p_val: people(&file.p_val)?,
            r_tr_tr: keys(&file.r_tr_tr)?,
            r_tr_val: keys(&file.r_tr_val)?,
            r_val_tr: keys(&file.r_val_tr)?,
            r_val_val: keys(&file.r_val_val)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_individuals: usize,
    pub n_questions: usize,
    pub n_latent_clusters: usize,
    /// Std-dev of the additive response noise.
    pub noise: f64,
    /// Per-individual latent jitter around its cluster prototype, as a
    /// multiple of `noise`.
    pub latent_spread: f64,
    pub seed: u64,
    pub latent_dim: usize,
    pub min_options: usize,
    pub max_options: usize,
    /// Probability that any given (individual, question) response is observed.
    pub response_rate: f64,
    /// With two clusters, make the second prototype the negation of the first.
    pub opposed: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_individuals: 300,
            n_questions: 60,
            n_latent_clusters: 3,
            noise: 0.05,
            latent_spread: 4.0,
            seed: 7,
            latent_dim: 4,
            min_options: 3,
            max_options: 4,
            response_rate: 1.0,
            opposed: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Planted cluster label per individual index.
    pub labels: Vec<usize>,
    pub latents: Vec<Vec<f64>>,
    pub prototypes: Vec<Vec<f64>>,
    pub question_vectors: Vec<Vec<f64>>,
}

pub const SYNTHETIC_TOPICS: &[&str] = &["economy", "immigration", "crime", "health"];
const REGIONS: &[&str] = &["northeast", "midwest", "south", "west"];

/// Planted-cluster survey generator.
///
/// An individual's latent vector is its cluster prototype plus
/// `N(0, noise * latent_spread)` jitter. Each response is
/// `clamp(0.5 + 0.5 <latent, question>) + N(0, noise)`, clamped again and
/// snapped to the nearest ordinal level. Demographics
/// carry one trait tied to the planted cluster (`party`) and one that is
/// independent of it (`region`).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(ResponseMatrix, GroundTruth)> {
    if spec.n_individuals == 0 || spec.n_questions == 0 || spec.n_latent_clusters == 0 || spec.latent_dim == 0 {
        return Err(Error::InvalidInput("synthetic counts must be at least 1".into()));
    }
    if !(spec.noise >= 0.0) || !(spec.latent_spread >= 0.0) {
        return Err(Error::InvalidInput(
            "noise and latent_spread must be non-negative".into(),
        ));
    }
    if spec.min_options < 2 || spec.max_options < spec.min_options {
        return Err(Error::InvalidInput("option range must satisfy 2 <= min <= max".into()));
    }
    if !(spec.response_rate > 0.0 && spec.response_rate <= 1.0) {
        return Err(Error::InvalidInput("response_rate must lie in (0, 1]".into()));
    }
    let mut rng = rng::seeded(spec.seed);
    let dim = spec.latent_dim;
    let prototypes = planted_prototypes(&mut rng, spec);

    let questions_w: Vec<Vec<f64>> = (0..spec.n_questions)
        .map(|_| (0..dim).map(|_| f64::gaussian(&mut rng, 1.0)).collect())
        .collect();
    let questions: Vec<Question> = (0..spec.n_questions)
        .map(|j| {
            let m = rng.random_range(spec.min_options..=spec.max_options);
            Question {
                id: format!("q{j:03}"),
                text: format!("Synthetic question {j}"),
                topic: SYNTHETIC_TOPICS[j % SYNTHETIC_TOPICS.len()].to_string(),
                options: (0..m).map(|o| format!("option {o}")).collect(),
            }
        })
        .collect();

    let mut labels = Vec::with_capacity(spec.n_individuals);
    let mut latents = Vec::with_capacity(spec.n_individuals);
    let mut individuals = Vec::with_capacity(spec.n_individuals);
    let width = spec.n_individuals.to_string().len().max(4);
    for i in 0..spec.n_individuals {
        let label = i % spec.n_latent_clusters;
        let latent: Vec<f64> = prototypes[label]
            .iter()
            .map(|&p| p + f64::gaussian(&mut rng, spec.noise * spec.latent_spread))
            .collect();
        let party = if rng.random_bool(0.8) {
            label
        } else {
            rng.random_range(0..spec.n_latent_clusters)
        };
        let region = REGIONS[rng.random_range(0..REGIONS.len())];
        let mut demographics = BTreeMap::new();
        demographics.insert("party".to_string(), format!("party-{party}"));
        demographics.insert("region".to_string(), region.to_string());
        individuals.push(Individual {
            id: format!("p{i:0width$}"),
            demographics,
        });
        labels.push(label);
        latents.push(latent);
    }

    let mut triples = Vec::new();
    for (i, latent) in latents.iter().enumerate() {
        for (j, w) in questions_w.iter().enumerate() {
            if spec.response_rate < 1.0 && !rng.random_bool(spec.response_rate) {
                continue;
            }
            let m = questions[j].option_count();
            let signal: f64 = latent.iter().zip(w).map(|(a, b)| a * b).sum();
            let clean = (0.5 + 0.5 * signal).clamp(0.0, 1.0);
            let value = (clean + f64::gaussian(&mut rng, spec.noise)).clamp(0.0, 1.0);
            let option = (value * (m - 1) as f64).round() as usize;
            triples.push((individuals[i].id.clone(), questions[j].id.clone(), option.min(m - 1)));
        }
    }
    let matrix = ResponseMatrix::new(individuals, questions, triples)?;
    Ok((
        matrix,
        GroundTruth {
            labels,
            latents,
            prototypes,
            question_vectors: questions_w,
        },
    ))
}

fn planted_prototypes<R: Rng>(rng: &mut R, spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let dim = spec.latent_dim;
    let unit = |rng: &mut R| {
        let v: Vec<f64> = (0..dim).map(|_| f64::gaussian(rng, 1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.into_iter().map(|x| x / norm).collect::<Vec<f64>>()
    };
    if spec.opposed && spec.n_latent_clusters == 2 {
        let p = unit(rng);
        let q = p.iter().map(|x| -x).collect();
        return vec![p, q];
    }
    // Rejection-sample well separated unit prototypes; fall back to the
    // last draw if the dimension cannot accommodate the separation.
    let mut best: Vec<Vec<f64>> = Vec::new();
    for _ in 0..1000 {
        let candidate: Vec<Vec<f64>> = (0..spec.n_latent_clusters).map(|_| unit(rng)).collect();
        let separated = candidate.iter().enumerate().all(|(a, pa)| {
            candidate[a + 1..].iter().all(|pb| {
                let d2: f64 = pa.iter().zip(pb).map(|(x, y)| (x - y) * (x - y)).sum();
                d2 >= 1.0
            })
        });
        best = candidate;
        if separated {
            break;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ResponseMatrix {
        let individuals = vec![
            Individual {
                id: "a".into(),
                ..Default::default()
            },
            Individual {
                id: "b".into(),
                ..Default::default()
            },
        ];
        let questions = vec![
            Question {
                id: "q1".into(),
                text: "first".into(),
                topic: "t".into(),
                options: vec!["x".into(), "y".into(), "z".into()],
            },
            Question {
                id: "q2".into(),
                text: "second".into(),
                topic: "t".into(),
                options: vec!["no".into(), "yes".into()],
            },
        ];
        ResponseMatrix::new(
            individuals,
            questions,
            vec![
                ("a".into(), "q1".into(), 0),
                ("a".into(), "q2".into(), 1),
                ("b".into(), "q1".into(), 1),
            ],
        )
        .unwrap()
    }

    #[test]
    fn ordinal_mapping_examples() {
        assert_eq!(map_ordinal::<f64>(0, 3).unwrap(), 0.0);
        assert_eq!(map_ordinal::<f64>(1, 3).unwrap(), 0.5);
        assert_eq!(map_ordinal::<f64>(2, 3).unwrap(), 1.0);
        assert_eq!(map_ordinal::<f64>(0, 2).unwrap(), 0.0);
        assert_eq!(map_ordinal::<f64>(1, 2).unwrap(), 1.0);
        assert_eq!(map_ordinal::<f64>(1, 5).unwrap(), 0.25);
        assert_eq!(map_ordinal::<f64>(3, 5).unwrap(), 0.75);
    }

    #[test]
    fn ordinal_mapping_errors() {
        assert!(matches!(map_ordinal::<f64>(0, 1), Err(Error::InvalidQuestion { .. })));
        assert!(matches!(map_ordinal::<f64>(3, 3), Err(Error::InvalidResponse(_))));
    }

    #[test]
    fn stored_values_follow_ordinal_map() {
        let m = tiny();
        assert_eq!(m.len(), 3);
        assert_eq!(m.value::<f64>(ResponseKey::new(0, 1)), Some(1.0));
        assert_eq!(m.value::<f32>(ResponseKey::new(1, 0)), Some(0.5));
        assert_eq!(m.value::<f64>(ResponseKey::new(1, 1)), None);
        assert_eq!(m.responses_of(0).count(), 2);
        assert_eq!(m.responses_of(1).count(), 1);
    }

    #[test]
    fn rejects_bad_rows() {
        let m = tiny();
        let err = ResponseMatrix::new(
            m.individuals().to_vec(),
            m.questions().to_vec(),
            vec![("a".to_string(), "q9".to_string(), 0)],
        )
        .unwrap_err();
        assert_eq!(err.category(), "referential-integrity");
        let err = ResponseMatrix::new(
            m.individuals().to_vec(),
            m.questions().to_vec(),
            vec![("a".to_string(), "q2".to_string(), 2)],
        )
        .unwrap_err();
        assert_eq!(err.category(), "invalid-response");
        let err = ResponseMatrix::new(
            m.individuals().to_vec(),
            m.questions().to_vec(),
            vec![
                ("a".to_string(), "q2".to_string(), 0),
                ("a".to_string(), "q2".to_string(), 1),
            ],
        )
        .unwrap_err();
        assert_eq!(err.category(), "invalid-response");
    }

    #[test]
    fn train_count_rounds_remainder_to_training() {
        assert_eq!(train_count(10, 0.8), 8);
        assert_eq!(train_count(9, 0.8), 8);
        assert_eq!(train_count(5, 0.8), 4);
        assert_eq!(train_count(1, 0.8), 1);
        assert_eq!(train_count(3, 0.5), 2);
    }

    #[test]
    fn split_ten_individuals() {
        let (m, _) = generate_synthetic(&SyntheticSpec {
            n_individuals: 10,
            n_questions: 10,
            ..Default::default()
        })
        .unwrap();
        let s = four_way_split(&m, &SplitSpec::default()).unwrap();
        assert_eq!(s.p_tr.len(), 8);
        assert_eq!(s.p_val.len(), 2);
        let again = four_way_split(&m, &SplitSpec::default()).unwrap();
        assert_eq!(
            serde_json::to_vec(&s.to_file(&m)).unwrap(),
            serde_json::to_vec(&again.to_file(&m)).unwrap()
        );
        let other = four_way_split(
            &m,
            &SplitSpec {
                seed: 99,
                ..Default::default()
            },
        )
        .unwrap();
        assert_ne!(s.p_val, other.p_val);
    }

    #[test]
    fn split_rejects_bad_fractions_and_degenerate_partitions() {
        let m = tiny();
        let err = four_way_split(
            &m,
            &SplitSpec {
                individual_train_fraction: 1.0,
                ..Default::default()
            },
        )
        .unwrap_err();
        assert_eq!(err.category(), "invalid-input");
        // two individuals at 0.8 -> 2 train, 0 validation
        let err = four_way_split(&m, &SplitSpec::default()).unwrap_err();
        assert_eq!(err.category(), "degenerate-split");
    }

    #[test]
    fn split_file_roundtrip() {
        let (m, _) = generate_synthetic(&SyntheticSpec {
            n_individuals: 20,
            n_questions: 8,
            ..Default::default()
        })
        .unwrap();
        let s = four_way_split(&m, &SplitSpec::default()).unwrap();
        let file = s.to_file(&m);
        let text = serde_json::to_string(&file).unwrap();
        let back: SplitFile = serde_json::from_str(&text).unwrap();
        assert_eq!(FourWaySplit::from_file(&back, &m).unwrap(), s);
    }

    #[test]
    fn zero_noise_single_cluster_answers_identically() {
        let (m, truth) = generate_synthetic(&SyntheticSpec {
            n_individuals: 12,
            n_questions: 15,
            n_latent_clusters: 1,
            noise: 0.0,
            ..Default::default()
        })
        .unwrap();
        assert!(truth.labels.iter().all(|&l| l == 0));
        let first: Vec<usize> = m.responses_of(0).map(|(_, o)| o).collect();
        for i in 1..12 {
            let answers: Vec<usize> = m.responses_of(i).map(|(_, o)| o).collect();
            assert_eq!(answers, first);
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec {
            n_individuals: 30,
            n_questions: 12,
            response_rate: 0.7,
            ..Default::default()
        };
        let (a, ta) = generate_synthetic(&spec).unwrap();
        let (b, tb) = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert!(a.len() < 30 * 12);
    }

    #[test]
    fn opposed_clusters_mirror_answers() {
        let (m, truth) = generate_synthetic(&SyntheticSpec {
            n_individuals: 4,
            n_questions: 20,
            n_latent_clusters: 2,
            noise: 0.0,
            opposed: true,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(truth.labels, vec![0, 1, 0, 1]);
        for j in 0..20 {
            let mm = m.question(j).option_count();
            let a = m.option_index(ResponseKey::new(0, j)).unwrap();
            let b = m.option_index(ResponseKey::new(1, j)).unwrap();
            // snapping can only disagree with the mirror image on an exact tie
            assert!(a + b == mm - 1 || (a as isize - (mm - 1 - b) as isize).abs() <= 1);
        }
    }
}
