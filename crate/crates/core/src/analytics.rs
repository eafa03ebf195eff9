//! Response distributions and total-variation disagreement between
//! personas and the population.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{Individual, ResponseKey, ResponseMatrix};
use crate::error::{Error, Result};
use crate::persona::ClusterModel;
use crate::scalar::Scalar;

pub const DEFAULT_MIN_SUPPORT: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseDistribution<T> {
    pub question_id: String,
    pub probabilities: Vec<T>,
    pub support_count: usize,
}

impl<T: Scalar> ResponseDistribution<T> {
    /// Most frequent option, lowest index on ties.
    pub fn modal_option(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probabilities.iter().enumerate() {
            if p > self.probabilities[best] {
                best = i;
            }
        }
        best
    }
}

/// Empirical option frequencies among `members` who answered `question`.
pub fn response_distribution<T: Scalar>(
    matrix: &ResponseMatrix,
    question: usize,
    members: &BTreeSet<usize>,
) -> Result<ResponseDistribution<T>> {
    let q = matrix.question(question);
    let mut counts = vec![0usize; q.option_count()];
    for &ind in members {
        if let Some(option) = matrix.option_index(ResponseKey::new(ind, question)) {
            counts[option] += 1;
        }
    }
    distribution_from_counts(&q.id, &counts)
}

pub(crate) fn distribution_from_counts<T: Scalar>(
    question_id: &str,
    counts: &[usize],
) -> Result<ResponseDistribution<T>> {
    let support: usize = counts.iter().sum();
    if support == 0 {
        return Err(Error::EmptySupport(question_id.to_string()));
    }
    let total = T::from_count(support);
    Ok(ResponseDistribution {
        question_id: question_id.to_string(),
        probabilities: counts.iter().map(|&c| T::from_count(c) / total).collect(),
        support_count: support,
    })
}

/// Half the L1 distance between two option distributions.
pub fn total_variation<T: Scalar>(p: &ResponseDistribution<T>, q: &ResponseDistribution<T>) -> Result<T> {
    if p.probabilities.len() != q.probabilities.len() {
        return Err(Error::Dimension {
            expected: p.probabilities.len(),
            actual: q.probabilities.len(),
        });
    }
    if p.question_id != q.question_id {
        return Err(Error::InvalidInput(format!(
            "distributions belong to different questions ({} vs {})",
            p.question_id, q.question_id
        )));
    }
    let l1: T = p
        .probabilities
        .iter()
        .zip(&q.probabilities)
        .map(|(&a, &b)| (a - b).abs())
        .sum();
    Ok(T::lit(0.5) * l1)
}

/// Mean total variation over all unordered pairs of cluster distributions.
pub fn tv_ave<T: Scalar>(distributions: &[ResponseDistribution<T>]) -> Result<T> {
    let k = distributions.len();
    if k < 2 {
        return Err(Error::InvalidInput(format!(
            "TV average needs at least 2 clusters, got {k}"
        )));
    }
    let mut total = T::zero();
    for i in 0..k {
        for j in i + 1..k {
            total += total_variation(&distributions[i], &distributions[j])?;
        }
    }
    Ok(total / T::from_count(k * (k - 1) / 2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportOptions {
    pub top_n: usize,
    /// Minimum answers per group per question for the question to be ranked.
    pub min_support: usize,
    pub topic_filter: Option<String>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            top_n: 3,
            min_support: DEFAULT_MIN_SUPPORT,
            topic_filter: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisagreementRow {
    pub question_id: String,
    pub score: f64,
    /// Modal option per group, in `group_labels` order.
    pub modal: Vec<usize>,
    pub distributions: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisagreementReport {
    pub title: String,
    pub group_labels: Vec<String>,
    pub rows: Vec<DisagreementRow>,
}

impl DisagreementReport {
    pub fn to_csv(&self, matrix: &ResponseMatrix) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["question_id".to_string(), "topic".to_string(), "score".to_string()];
        header.extend(self.group_labels.iter().map(|g| format!("{g}_modal")));
        w.write_record(&header)?;
        for row in &self.rows {
            let q = matrix.question(matrix.question_idx(&row.question_id)?);
            let mut rec = vec![row.question_id.clone(), q.topic.clone(), format!("{:.6}", row.score)];
            rec.extend(row.modal.iter().map(|&o| q.options[o].clone()));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// One block per question: options as rows, groups as percentage columns.
    pub fn to_markdown(&self, matrix: &ResponseMatrix) -> Result<String> {
        let mut out = format!("## {}\n\n", self.title);
        for row in &self.rows {
            let q = matrix.question(matrix.question_idx(&row.question_id)?);
            let _ = writeln!(out, "**{}** ({}, score {:.4})\n", q.text, q.id, row.score);
            let _ = writeln!(out, "| Option | {} |", self.group_labels.join(" | "));
            let _ = writeln!(out, "|---|{}", "---|".repeat(self.group_labels.len()));
            for (o, label) in q.options.iter().enumerate() {
                let cells: Vec<String> = row
                    .distributions
                    .iter()
                    .map(|d| format!("{:.2}%", 100.0 * d[o]))
                    .collect();
                let _ = writeln!(out, "| {} | {} |", label, cells.join(" | "));
            }
            out.push('\n');
        }
        Ok(out)
    }
}

fn cluster_groups<T: Scalar>(matrix: &ResponseMatrix, clusters: &ClusterModel<T>) -> Result<Vec<BTreeSet<usize>>> {
    let mut groups = vec![BTreeSet::new(); clusters.k];
    for (id, &c) in &clusters.assignment {
        groups[c].insert(matrix.individual_idx(id)?);
    }
    Ok(groups)
}

fn eligible_questions<'a>(matrix: &'a ResponseMatrix, topic: Option<&'a str>) -> impl Iterator<Item = usize> + 'a {
    (0..matrix.questions().len()).filter(move |&j| topic.is_none_or(|t| matrix.question(j).topic == t))
}

fn finish(mut rows: Vec<DisagreementRow>, top_n: usize) -> Vec<DisagreementRow> {
    rows.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.question_id.cmp(&b.question_id))
    });
    rows.truncate(top_n);
    rows
}

/// Questions ranked by TV between one cluster and the whole clustered population.
pub fn top_disagreement_vs_population<T: Scalar>(
    matrix: &ResponseMatrix,
    clusters: &ClusterModel<T>,
    cluster_index: usize,
    options: &ReportOptions,
) -> Result<DisagreementReport> {
    let groups = cluster_groups(matrix, clusters)?;
    let members = groups
        .get(cluster_index)
        .ok_or_else(|| Error::lookup("cluster", cluster_index.to_string()))?;
    if members.is_empty() {
        return Err(Error::InvalidInput(format!("cluster {cluster_index} is empty")));
    }
    let population: BTreeSet<usize> = groups.iter().flatten().copied().collect();
    let mut rows = Vec::new();
    for j in eligible_questions(matrix, options.topic_filter.as_deref()) {
        let (Ok(dc), Ok(dq)) = (
            response_distribution::<T>(matrix, j, members),
            response_distribution::<T>(matrix, j, &population),
        ) else {
            continue;
        };
        if dc.support_count < options.min_support || dq.support_count < options.min_support {
            continue;
        }
        rows.push(DisagreementRow {
            question_id: dc.question_id.clone(),
            score: total_variation(&dc, &dq)?.as_f64(),
            modal: vec![dc.modal_option(), dq.modal_option()],
            distributions: vec![to_f64(&dc), to_f64(&dq)],
        });
    }
    Ok(DisagreementReport {
        title: format!("Cluster-{cluster_index} vs population"),
        group_labels: vec![format!("Cluster-{cluster_index}"), "Population".into()],
        rows: finish(rows, options.top_n),
    })
}

/// Questions ranked by the average pairwise TV across all clusters.
pub fn top_disagreement_between_clusters<T: Scalar>(
    matrix: &ResponseMatrix,
    clusters: &ClusterModel<T>,
    options: &ReportOptions,
) -> Result<DisagreementReport> {
    let groups = cluster_groups(matrix, clusters)?;
    let mut rows = Vec::new();
    'questions: for j in eligible_questions(matrix, options.topic_filter.as_deref()) {
        let mut dists = Vec::with_capacity(groups.len());
        for g in &groups {
            match response_distribution::<T>(matrix, j, g) {
                Ok(d) if d.support_count >= options.min_support => dists.push(d),
                _ => continue 'questions,
            }
        }
        rows.push(DisagreementRow {
            question_id: matrix.question(j).id.clone(),
            score: tv_ave(&dists)?.as_f64(),
            modal: dists.iter().map(ResponseDistribution::modal_option).collect(),
            distributions: dists.iter().map(to_f64).collect(),
        });
    }
    let title = match &options.topic_filter {
        Some(t) => format!("Largest disagreement among clusters ({t})"),
        None => "Largest disagreement among clusters".to_string(),
    };
    Ok(DisagreementReport {
        title,
        group_labels: (0..clusters.k).map(|c| format!("Cluster-{c}")).collect(),
        rows: finish(rows, options.top_n),
    })
}

fn to_f64<T: Scalar>(d: &ResponseDistribution<T>) -> Vec<f64> {
    d.probabilities.iter().map(|p| p.as_f64()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionRow {
    pub label: String,
    /// Members of the group who carry the trait.
    pub count: usize,
    pub frequencies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionTable {
    pub trait_name: String,
    pub categories: Vec<String>,
    /// One row per cluster, then the overall population.
    pub rows: Vec<CompositionRow>,
}

impl CompositionTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("group,count,{}\n", self.categories.join(","));
        for row in &self.rows {
            let freqs: Vec<String> = row.frequencies.iter().map(|f| format!("{f:.6}")).collect();
            let _ = writeln!(out, "{},{},{}", row.label, row.count, freqs.join(","));
        }
        out
    }
}

/// Relative frequency of each category of `trait_name`, per cluster and overall.
pub fn demographic_composition<T: Scalar>(
    individuals: &[Individual],
    clusters: &ClusterModel<T>,
    trait_name: &str,
) -> Result<CompositionTable> {
    let by_id: BTreeMap<&str, &Individual> = individuals.iter().map(|i| (i.id.as_str(), i)).collect();
    let categories: Vec<String> = clusters
        .assignment
        .keys()
        .filter_map(|id| by_id.get(id.as_str())?.demographics.get(trait_name))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .cloned()
        .collect();
    if categories.is_empty() {
        return Err(Error::lookup("trait", trait_name));
    }
    let col: BTreeMap<&str, usize> = categories.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let mut counts = vec![vec![0usize; categories.len()]; clusters.k + 1];
    for (id, &c) in &clusters.assignment {
        if let Some(cat) = by_id.get(id.as_str()).and_then(|i| i.demographics.get(trait_name)) {
            counts[c][col[cat.as_str()]] += 1;
            counts[clusters.k][col[cat.as_str()]] += 1;
        }
    }
    let rows = counts
        .into_iter()
        .enumerate()
        .map(|(g, row)| {
            let total: usize = row.iter().sum();
            CompositionRow {
                label: if g == clusters.k {
                    "Population".to_string()
                } else {
                    format!("Cluster-{g}")
                },
                count: total,
                frequencies: row
                    .iter()
                    .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
                    .collect(),
            }
        })
        .collect();
    Ok(CompositionTable {
        trait_name: trait_name.to_string(),
        categories,
        rows,
    })
}
