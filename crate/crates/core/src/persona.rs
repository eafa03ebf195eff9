//! Cluster and demographic personas over individual embeddings.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cf::{cf_loss, EmbeddingTable};
use crate::dataset::{Individual, ResponseKey, ResponseMatrix};
use crate::error::{check_dim, Error, Result};
use crate::rng::{self, derive_seed, StdRng};
use crate::scalar::{squared_distance, Scalar};

pub const MAX_LLOYD_ITERATIONS: usize = 300;
/// Independent k-means++ restarts; the lowest-inertia run wins.
pub const DEFAULT_RESTARTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel<T> {
    pub k: usize,
    pub centroids: Vec<Vec<T>>,
    pub assignment: BTreeMap<String, usize>,
    pub inertia: T,
}

impl<T: Scalar> ClusterModel<T> {
    pub fn members(&self, cluster: usize) -> impl Iterator<Item = &str> {
        self.assignment
            .iter()
            .filter(move |(_, &c)| c == cluster)
            .map(|(id, _)| id.as_str())
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &c in self.assignment.values() {
            sizes[c] += 1;
        }
        sizes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PersonaKind {
    Individual,
    Cluster,
    Demographic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaEmbedding<T> {
    pub vector: Vec<T>,
    pub kind: PersonaKind,
    pub source_id: String,
}

/// One Lloyd run from a fixed seed; exposes the per-iteration inertia.
#[derive(Debug, Clone)]
pub struct LloydRun<T> {
    pub centroids: Vec<Vec<T>>,
    pub labels: Vec<usize>,
    pub inertia: T,
    pub inertia_trace: Vec<T>,
    pub iterations: usize,
}

fn plus_plus_init<T: Scalar>(points: &[&[T]], k: usize, rng: &mut StdRng) -> Vec<Vec<T>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].to_vec()];
    let mut nearest: Vec<T> = points.iter().map(|p| squared_distance(p, points[first])).collect();
    while centroids.len() < k {
        let total: T = nearest.iter().copied().sum();
        let pick = if total > T::zero() {
            let mut target = T::lit(rng.random::<f64>()) * total;
            let mut pick = None;
            for (i, &w) in nearest.iter().enumerate() {
                if w <= T::zero() {
                    continue;
                }
                if target < w {
                    pick = Some(i);
                    break;
                }
                target -= w;
            }
            // rounding can walk past the last positive weight
            pick.unwrap_or_else(|| nearest.iter().rposition(|&w| w > T::zero()).unwrap())
        } else {
            // all remaining points coincide with a centroid
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        centroids.push(points[pick].to_vec());
        for (i, p) in points.iter().enumerate() {
            let d = squared_distance(p, points[pick]);
            if d < nearest[i] {
                nearest[i] = d;
            }
        }
    }
    centroids
}

fn nearest_centroid<T: Scalar>(p: &[T], centroids: &[Vec<T>]) -> (usize, T) {
    let mut best = (0, squared_distance(p, &centroids[0]));
    for (c, centroid) in centroids.iter().enumerate().skip(1) {
        let d = squared_distance(p, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn recompute_centroids<T: Scalar>(points: &[&[T]], labels: &[usize], k: usize, dim: usize) -> Vec<Vec<T>> {
    let mut sums = vec![vec![T::zero(); dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(labels) {
        counts[c] += 1;
        for (s, &x) in sums[c].iter_mut().zip(p.iter()) {
            *s += x;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        let n = T::from_count(n);
        s.iter_mut().for_each(|x| *x /= n);
    }
    sums
}

/// Give every empty cluster the point farthest from its current centroid,
/// taken from a cluster that keeps at least one member.
fn repair_empty<T: Scalar>(points: &[&[T]], labels: &mut [usize], centroids: &mut [Vec<T>]) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&c| counts[c] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut donor = None;
        let mut far = T::neg_infinity();
        for (i, p) in points.iter().enumerate() {
            if counts[labels[i]] < 2 {
                continue;
            }
            let d = squared_distance(p, &centroids[labels[i]]);
            if d > far {
                far = d;
                donor = Some(i);
            }
        }
        let i = donor.expect("k <= n guarantees a donor cluster");
        labels[i] = empty;
        centroids[empty] = points[i].to_vec();
    }
}

pub fn lloyd<T: Scalar>(points: &[&[T]], k: usize, seed: u64) -> Result<LloydRun<T>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::InvalidK { k, n });
    }
    let dim = points[0].len();
    for p in points {
        check_dim(dim, p.len())?;
    }
    let mut rng = rng::seeded(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut labels = vec![usize::MAX; n];
    let mut inertia_trace = Vec::new();
    let mut iterations = 0;
    loop {
        let mut changed = false;
        let mut inertia = T::zero();
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest_centroid(p, &centroids);
            inertia += d;
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        inertia_trace.push(inertia);
        if !changed || iterations == MAX_LLOYD_ITERATIONS {
            break;
        }
        iterations += 1;
        repair_empty(points, &mut labels, &mut centroids);
        centroids = recompute_centroids(points, &labels, k, dim);
    }
    repair_empty(points, &mut labels, &mut centroids);
    let centroids = recompute_centroids(points, &labels, k, dim);
    let inertia = points
        .iter()
        .zip(&labels)
        .map(|(p, &c)| squared_distance(p, &centroids[c]))
        .sum();
    Ok(LloydRun {
        centroids,
        labels,
        inertia,
        inertia_trace,
        iterations,
    })
}

/// K-means with k-means++ seeding and Lloyd iterations over the given vectors.
pub fn kmeans<T: Scalar>(embeddings: &BTreeMap<String, Vec<T>>, k: usize, seed: u64) -> Result<ClusterModel<T>> {
    kmeans_with_restarts(embeddings, k, seed, DEFAULT_RESTARTS)
}

pub fn kmeans_with_restarts<T: Scalar>(
    embeddings: &BTreeMap<String, Vec<T>>,
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<ClusterModel<T>> {
    let ids: Vec<&String> = embeddings.keys().collect();
    let points: Vec<&[T]> = embeddings.values().map(Vec::as_slice).collect();
    if k == 0 || k > points.len() {
        return Err(Error::InvalidK { k, n: points.len() });
    }
    let mut best: Option<LloydRun<T>> = None;
    for r in 0..restarts.max(1) {
        let run = lloyd(&points, k, derive_seed(seed, r as u64))?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let best = best.unwrap();
    Ok(ClusterModel {
        k,
        assignment: ids.into_iter().cloned().zip(best.labels).collect(),
        centroids: best.centroids,
        inertia: best.inertia,
    })
}

/// Individual vectors replaced by their cluster centroid.
pub fn substitute_centroids<T: Scalar>(model: &ClusterModel<T>) -> BTreeMap<String, Vec<T>> {
    model
        .assignment
        .iter()
        .map(|(id, &c)| (id.clone(), model.centroids[c].clone()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowCurve {
    pub entries: Vec<(usize, f64)>,
}

impl ElbowCurve {
    /// The k with the largest discrete curvature (second divided difference)
    /// of the loss curve. Needs at least three entries.
    pub fn max_curvature_k(&self) -> Option<usize> {
        let e = &self.entries;
        if e.len() < 3 {
            return None;
        }
        let mut best: Option<(usize, f64)> = None;
        for w in e.windows(3) {
            let (k0, l0) = (w[0].0 as f64, w[0].1);
            let (k1, l1) = (w[1].0 as f64, w[1].1);
            let (k2, l2) = (w[2].0 as f64, w[2].1);
            let left = (l1 - l0) / (k1 - k0);
            let right = (l2 - l1) / (k2 - k1);
            let curvature = 2.0 * (right - left) / (k2 - k0);
            if best.is_none_or(|(_, c)| curvature > c) {
                best = Some((w[1].0, curvature));
            }
        }
        best.map(|(k, _)| k)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,substitution_loss\n");
        for (k, loss) in &self.entries {
            out.push_str(&format!("{k},{loss}\n"));
        }
        out
    }
}

/// For each k, cluster the individual vectors and record the factorization
/// loss on `keys` when every individual is replaced by its centroid.
pub fn elbow_scan<T: Scalar>(
    embeddings: &EmbeddingTable<T>,
    matrix: &ResponseMatrix,
    keys: &[ResponseKey],
    k_values: &[usize],
    seed: u64,
) -> Result<ElbowCurve> {
    if k_values.is_empty() {
        return Err(Error::InvalidInput("elbow scan needs at least one k".into()));
    }
    let mut ks = k_values.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let mut entries = Vec::with_capacity(ks.len());
    for k in ks {
        let model = kmeans(&embeddings.individuals, k, seed)?;
        let substituted = embeddings.with_individuals(substitute_centroids(&model));
        entries.push((k, cf_loss(&substituted, matrix, keys)?.as_f64()));
    }
    Ok(ElbowCurve { entries })
}

/// Mean embedding of the individuals carrying `trait_name = category`.
///
/// Individuals without an embedding are ignored.
pub fn demographic_embedding<T: Scalar>(
    embeddings: &BTreeMap<String, Vec<T>>,
    individuals: &[Individual],
    trait_name: &str,
    category: &str,
) -> Result<PersonaEmbedding<T>> {
    let members: Vec<&Vec<T>> = individuals
        .iter()
        .filter(|ind| ind.demographics.get(trait_name).map(String::as_str) == Some(category))
        .filter_map(|ind| embeddings.get(&ind.id))
        .collect();
    if members.is_empty() {
        return Err(Error::EmptyGroup {
            trait_name: trait_name.to_string(),
            category: category.to_string(),
        });
    }
    let dim = members[0].len();
    let mut mean = vec![T::zero(); dim];
    for v in &members {
        for (m, &x) in mean.iter_mut().zip(v.iter()) {
            *m += x;
        }
    }
    let n = T::from_count(members.len());
    mean.iter_mut().for_each(|x| *x /= n);
    Ok(PersonaEmbedding {
        vector: mean,
        kind: PersonaKind::Demographic,
        source_id: format!("{trait_name}={category}"),
    })
}

pub fn cluster_embedding<T: Scalar>(model: &ClusterModel<T>, individual_id: &str) -> Result<PersonaEmbedding<T>> {
    let &c = model
        .assignment
        .get(individual_id)
        .ok_or_else(|| Error::lookup("clustered individual", individual_id))?;
    Ok(PersonaEmbedding {
        vector: model.centroids[c].clone(),
        kind: PersonaKind::Cluster,
        source_id: format!("cluster-{c}"),
    })
}

pub fn individual_embedding<T: Scalar>(table: &EmbeddingTable<T>, individual_id: &str) -> Result<PersonaEmbedding<T>> {
    Ok(PersonaEmbedding {
        vector: table.individual(individual_id)?.to_vec(),
        kind: PersonaKind::Individual,
        source_id: individual_id.to_string(),
    })
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cols: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let pairs = |c: usize| (c * c.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.values().map(|&c| pairs(c)).sum();
    let sum_rows: f64 = rows.values().map(|&c| pairs(c)).sum();
    let sum_cols: f64 = cols.values().map(|&c| pairs(c)).sum();
    let expected = sum_rows * sum_cols / pairs(n);
    let max = 0.5 * (sum_rows + sum_cols);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(points: &[[f64; 2]]) -> BTreeMap<String, Vec<f64>> {
        points
            .iter()
            .enumerate()
            .map(|(i, p)| (format!("p{i:02}"), p.to_vec()))
            .collect()
    }

    #[test]
    fn k_one_is_global_mean() {
        let pts = table(&[[0.0, 0.0], [2.0, 0.0], [1.0, 3.0]]);
        let m = kmeans(&pts, 1, 0).unwrap();
        assert!((m.centroids[0][0] - 1.0).abs() < 1e-12);
        assert!((m.centroids[0][1] - 1.0).abs() < 1e-12);
        // inertia = n * total variance = sum of squared deviations
        assert!((m.inertia - (2.0 + 2.0 + 4.0)).abs() < 1e-12);
    }

    #[test]
    fn invalid_k() {
        let pts = table(&[[0.0, 0.0], [1.0, 1.0]]);
        assert!(matches!(kmeans(&pts, 3, 0), Err(Error::InvalidK { k: 3, n: 2 })));
        assert!(matches!(kmeans(&pts, 0, 0), Err(Error::InvalidK { .. })));
    }

    #[test]
    fn duplicate_points_still_yield_nonempty_clusters() {
        let pts = table(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0], [5.0, 5.0]]);
        let m = kmeans(&pts, 3, 2).unwrap();
        assert!(m.sizes().iter().all(|&s| s > 0));
        assert_eq!(m.inertia, 0.0);
    }

    #[test]
    fn ari_examples() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        assert!(adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]) < 0.0);
        assert_eq!(adjusted_rand_index(&[0, 0, 0], &[0, 0, 0]), 1.0);
    }

    #[test]
    fn curvature_pick() {
        let curve = ElbowCurve {
            entries: vec![(1, 10.0), (2, 6.0), (3, 1.0), (4, 0.9), (5, 0.85)],
        };
        assert_eq!(curve.max_curvature_k(), Some(3));
        let short = ElbowCurve {
            entries: vec![(1, 1.0), (2, 0.5)],
        };
        assert_eq!(short.max_curvature_k(), None);
    }

    #[test]
    fn demographic_groups() {
        let mut emb = BTreeMap::new();
        emb.insert("a".to_string(), vec![1.0, -2.0]);
        emb.insert("b".to_string(), vec![-1.0, 2.0]);
        let ind = |id: &str, party: &str| Individual {
            id: id.into(),
            demographics: [("party".to_string(), party.to_string())].into_iter().collect(),
        };
        let people = vec![ind("a", "x"), ind("b", "x")];
        let both = demographic_embedding(&emb, &people, "party", "x").unwrap();
        assert_eq!(both.vector, vec![0.0, 0.0]);
        assert_eq!(both.kind, PersonaKind::Demographic);
        let people = vec![ind("a", "x"), ind("b", "y")];
        let single = demographic_embedding(&emb, &people, "party", "y").unwrap();
        assert_eq!(single.vector, vec![-1.0, 2.0]);
        assert!(matches!(
            demographic_embedding(&emb, &people, "party", "z"),
            Err(Error::EmptyGroup { .. })
        ));
    }

    #[test]
    fn cluster_lookup() {
        let pts = table(&[[0.0, 0.0], [0.0, 0.0], [9.0, 9.0]]);
        let m = kmeans(&pts, 2, 1).unwrap();
        let e = cluster_embedding(&m, "p02").unwrap();
        assert_eq!(e.vector, vec![9.0, 9.0]);
        assert_eq!(e.kind, PersonaKind::Cluster);
        assert!(cluster_embedding(&m, "nope").is_err());
    }
}
