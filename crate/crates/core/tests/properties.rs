//! Randomized invariants checked against brute-force recomputation.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use persona_steer::analytics::{response_distribution, total_variation, tv_ave, ResponseDistribution};
use persona_steer::dataset::{four_way_split, train_count, Individual, Question, ResponseMatrix, SplitSpec};
use persona_steer::eval::macro_accuracy;

#[derive(Debug, Clone)]
struct Fixture {
    options: Vec<usize>,
    /// `cells[i][j]` is individual i's answer to question j, if any.
    cells: Vec<Vec<Option<usize>>>,
}

impl Fixture {
    fn matrix(&self) -> ResponseMatrix {
        let individuals = (0..self.cells.len())
            .map(|i| Individual {
                id: format!("i{i:02}"),
                demographics: BTreeMap::new(),
            })
            .collect();
        let questions = self
            .options
            .iter()
            .enumerate()
            .map(|(j, &m)| Question {
                id: format!("q{j:02}"),
                text: String::new(),
                topic: "t".into(),
                options: (0..m).map(|o| o.to_string()).collect(),
            })
            .collect();
        let triples = self.cells.iter().enumerate().flat_map(|(i, row)| {
            row.iter()
                .enumerate()
                .filter_map(move |(j, c)| c.map(|o| (format!("i{i:02}"), format!("q{j:02}"), o)))
        });
        ResponseMatrix::new(individuals, questions, triples).unwrap()
    }

    /// Option frequencies of `members` on question `j`, counted straight off the cells.
    fn frequencies(&self, j: usize, members: &[usize]) -> Option<Vec<f64>> {
        let answers: Vec<usize> = members.iter().filter_map(|&i| self.cells[i][j]).collect();
        if answers.is_empty() {
            return None;
        }
        Some(
            (0..self.options[j])
                .map(|o| answers.iter().filter(|&&a| a == o).count() as f64 / answers.len() as f64)
                .collect(),
        )
    }
}

fn fixture() -> impl Strategy<Value = Fixture> {
    (1usize..14, prop::collection::vec(2usize..6, 1..6)).prop_flat_map(|(n, options)| {
        let row: Vec<_> = options.iter().map(|&m| prop::option::weighted(0.85, 0..m)).collect();
        (Just(options), prop::collection::vec(row, n)).prop_map(|(options, cells)| Fixture { options, cells })
    })
}

fn dist(question_id: &str, probabilities: Vec<f64>) -> ResponseDistribution<f64> {
    ResponseDistribution {
        question_id: question_id.into(),
        probabilities,
        support_count: 1,
    }
}

fn simplex(m: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-3f64..1.0, m).prop_map(|w| {
        let total: f64 = w.iter().sum();
        w.iter().map(|x| x / total).collect()
    })
}

/// Sum of the positive parts of p - q.
fn tv_oracle(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).max(0.0)).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn distributions_match_counting(f in fixture(), mask in prop::collection::vec(any::<bool>(), 14)) {
        let m = f.matrix();
        let members: Vec<usize> = (0..f.cells.len()).filter(|&i| mask[i]).collect();
        let set: BTreeSet<usize> = members.iter().copied().collect();
        for j in 0..f.options.len() {
            match (f.frequencies(j, &members), response_distribution::<f64>(&m, j, &set)) {
                (Some(expected), Ok(got)) => {
                    prop_assert!((got.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    for (a, b) in expected.iter().zip(&got.probabilities) {
                        prop_assert!((a - b).abs() <= 1e-12);
                    }
                }
                (None, Err(_)) => {}
                (e, g) => prop_assert!(false, "oracle {e:?} vs library {g:?}"),
            }
        }
    }

    #[test]
    fn total_variation_matches_oracle_and_is_a_metric(
        (p, q, r) in (2usize..7).prop_flat_map(|m| (simplex(m), simplex(m), simplex(m)))
    ) {
        let (dp, dq, dr) = (dist("q", p.clone()), dist("q", q.clone()), dist("q", r));
        let pq = total_variation(&dp, &dq).unwrap();
        prop_assert!((pq - tv_oracle(&p, &q)).abs() <= 1e-12);
        prop_assert_eq!(pq, total_variation(&dq, &dp).unwrap());
        prop_assert_eq!(total_variation(&dp, &dp).unwrap(), 0.0);
        let via = total_variation(&dp, &dr).unwrap() + total_variation(&dr, &dq).unwrap();
        prop_assert!(pq <= via + 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&pq));
    }

    #[test]
    fn tv_average_matches_oracle(
        clusters in (2usize..6).prop_flat_map(|m| prop::collection::vec(simplex(m), 2..6)),
        rotate in 0usize..6,
    ) {
        let ds: Vec<_> = clusters.iter().map(|p| dist("q", p.clone())).collect();
        let k = ds.len();
        let mut total = 0.0;
        for a in 0..k {
            for b in 0..k {
                if a != b {
                    total += tv_oracle(&clusters[a], &clusters[b]);
                }
            }
        }
        let expected = total / (k * (k - 1)) as f64;
        let got = tv_ave(&ds).unwrap();
        prop_assert!((got - expected).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&got));
        let mut relabeled = ds.clone();
        relabeled.rotate_left(rotate % k);
        prop_assert!((tv_ave(&relabeled).unwrap() - got).abs() <= 1e-12);
    }

    #[test]
    fn macro_accuracy_matches_oracle(
        rows in prop::collection::vec((0usize..6, 0usize..20, 0usize..3, 0usize..3), 1..60)
    ) {
        let mut truths = BTreeMap::new();
        let mut predictions = BTreeMap::new();
        for &(i, j, t, p) in &rows {
            let key = (format!("i{i}"), format!("q{j:02}"));
            if !truths.contains_key(&key) {
                truths.insert(key.clone(), t);
                predictions.insert(key, p);
            }
        }
        let mut people: Vec<String> = truths.keys().map(|k| k.0.clone()).collect();
        people.dedup();
        let mut sum = 0.0;
        for person in &people {
            let mine: Vec<_> = truths.keys().filter(|k| &k.0 == person).collect();
            let hits = mine.iter().filter(|k| truths[**k] == predictions[**k]).count();
            sum += hits as f64 / mine.len() as f64;
        }
        let report = macro_accuracy(&predictions, &truths).unwrap();
        prop_assert!((report.macro_accuracy - sum / people.len() as f64).abs() <= 1e-12);
        prop_assert_eq!(report.n_individuals, people.len());
        prop_assert_eq!(report.n_responses, truths.len());
    }

    #[test]
    fn split_partitions_every_response(
        f in fixture(),
        seed in any::<u64>(),
        fi in 0.3f64..0.9,
        fr in 0.3f64..0.9,
    ) {
        let m = f.matrix();
        let spec = SplitSpec { seed, individual_train_fraction: fi, response_train_fraction: fr };
        let Ok(split) = four_way_split(&m, &spec) else { return Ok(()); };
        prop_assert_eq!(split.p_tr.len(), train_count(m.individuals().len(), fi));
        let tr: BTreeSet<usize> = split.p_tr.iter().copied().collect();
        let mut all: Vec<_> = split.r_tr_tr.iter().chain(&split.r_tr_val).chain(&split.r_val_tr).chain(&split.r_val_val).copied().collect();
        prop_assert!(split.r_tr_tr.iter().chain(&split.r_tr_val).all(|k| tr.contains(&k.individual)));
        prop_assert!(split.r_val_tr.iter().chain(&split.r_val_val).all(|k| !tr.contains(&k.individual)));
        all.sort_unstable();
        let expected: Vec<_> = m.keys().collect();
        prop_assert_eq!(all, expected);
        prop_assert_eq!(four_way_split(&m, &spec).unwrap(), split);
    }
}
