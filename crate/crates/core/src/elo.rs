//! ELO ratings with pairwise decomposition of multi-agent results.
//!
//! A single iteration scores every competitor on the same questions. The
//! resulting accuracies are turned into head-to-head results for every
//! unordered pair in roster order, `(1,2), (1,3), ..., (2,3), ...`, and each
//! pair is applied sequentially with the ratings as they stand at that point.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const K_FACTOR: f64 = 32.0;
pub const INITIAL_RATING: f64 = 1500.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub value: f64,
    /// Pairwise comparisons this agent took part in.
    pub games: u32,
}

impl Default for Rating {
    fn default() -> Self {
        Self {
            value: INITIAL_RATING,
            games: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub iteration: u32,
    pub agent_a: String,
    pub agent_b: String,
    pub score_a: f64,
    pub rating_a_before: f64,
    pub rating_a_after: f64,
    pub rating_b_before: f64,
    pub rating_b_after: f64,
}

impl MatchRecord {
    pub fn score_b(&self) -> f64 {
        1.0 - self.score_a
    }
}

/// Anything that owns ratings keyed by agent id.
pub trait RatingStore {
    fn rating_mut(&mut self, id: &str) -> Option<&mut Rating>;
}

impl RatingStore for BTreeMap<String, Rating> {
    fn rating_mut(&mut self, id: &str) -> Option<&mut Rating> {
        self.get_mut(id)
    }
}

/// Probability that `rating_self` beats `rating_opp` under the 400-point logistic.
pub fn expected_score(rating_self: f64, rating_opp: f64) -> Result<f64> {
    if !rating_self.is_finite() || !rating_opp.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "ratings must be finite (got {rating_self}, {rating_opp})"
        )));
    }
    Ok(1.0 / (1.0 + 10f64.powf((rating_opp - rating_self) / 400.0)))
}

fn check_score(score: f64) -> Result<()> {
    if score == 0.0 || score == 0.5 || score == 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "score must be 0, 0.5 or 1 (got {score})"
        )))
    }
}

/// Applies one head-to-head result and returns the new `(a, b)` ratings.
pub fn update_pair(rating_a: f64, rating_b: f64, score_a: f64) -> Result<(f64, f64)> {
    check_score(score_a)?;
    let expected_a = expected_score(rating_a, rating_b)?;
    let delta = K_FACTOR * (score_a - expected_a);
    // b's delta is K((1 - s) - (1 - e)) = -delta, which keeps the pair zero-sum.
    Ok((rating_a + delta, rating_b - delta))
}

/// Score of `a` against `b` from their accuracies on identical questions.
pub fn pairwise_score(accuracy_a: f64, accuracy_b: f64) -> f64 {
    if accuracy_a > accuracy_b {
        1.0
    } else if accuracy_a == accuracy_b {
        0.5
    } else {
        0.0
    }
}

/// Every unordered index pair in canonical roster order.
pub fn canonical_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect()
}

/// Decomposes one iteration's accuracies into pairwise results and applies
/// them to `store` in canonical order.
pub fn decompose_and_update<S: RatingStore>(
    store: &mut S,
    iteration: u32,
    results: &[(String, f64)],
) -> Result<Vec<MatchRecord>> {
    if results.len() < 2 {
        return Ok(Vec::new());
    }
    for (id, accuracy) in results {
        if !(0.0..=1.0).contains(accuracy) {
            return Err(Error::InvalidArgument(format!(
                "accuracy for {id} outside [0, 1]: {accuracy}"
            )));
        }
        if store.rating_mut(id).is_none() {
            return Err(Error::NotFound(format!("agent {id} is not registered")));
        }
    }

    let mut records = Vec::with_capacity(results.len() * (results.len() - 1) / 2);
    for (i, j) in canonical_pairs(results.len()) {
        let (id_a, acc_a) = &results[i];
        let (id_b, acc_b) = &results[j];
        let score_a = pairwise_score(*acc_a, *acc_b);
        let before_a = store.rating_mut(id_a).map(|r| r.value).unwrap_or_default();
        let before_b = store.rating_mut(id_b).map(|r| r.value).unwrap_or_default();
        let (after_a, after_b) = update_pair(before_a, before_b, score_a)?;
        for (id, value) in [(id_a, after_a), (id_b, after_b)] {
            if let Some(r) = store.rating_mut(id) {
                r.value = value;
                r.games += 1;
            }
        }
        records.push(MatchRecord {
            iteration,
            agent_a: id_a.clone(),
            agent_b: id_b.clone(),
            score_a,
            rating_a_before: before_a,
            rating_a_after: after_a,
            rating_b_before: before_b,
            rating_b_after: after_b,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn store(ids: &[(&str, f64)]) -> BTreeMap<String, Rating> {
        ids.iter()
            .map(|(id, v)| {
                (
                    id.to_string(),
                    Rating {
                        value: *v,
                        games: 0,
                    },
                )
            })
            .collect()
    }

    #[test]
    fn expected_score_examples() {
        assert_eq!(expected_score(1500.0, 1500.0).unwrap(), 0.5);
        // 10^(1/2) = sqrt(10), so E = sqrt(10) / (sqrt(10) + 1).
        let root = 10f64.sqrt();
        let oracle = root / (root + 1.0);
        assert_abs_diff_eq!(expected_score(1600.0, 1400.0).unwrap(), oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(oracle, 0.759746, epsilon = 1e-6);
        assert_abs_diff_eq!(expected_score(1400.0, 1600.0).unwrap(), 1.0 - oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(1.0 - oracle, 0.240253, epsilon = 1e-6);
    }

    #[test]
    fn expected_score_rejects_non_finite() {
        assert!(matches!(
            expected_score(f64::NAN, 1500.0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(expected_score(1500.0, f64::INFINITY).is_err());
    }

    #[test]
    fn update_pair_examples() {
        assert_eq!(update_pair(1500.0, 1500.0, 1.0).unwrap(), (1516.0, 1484.0));
        assert_eq!(update_pair(1500.0, 1500.0, 0.5).unwrap(), (1500.0, 1500.0));
        let root = 10f64.sqrt();
        let e = root / (root + 1.0);
        let (a, b) = update_pair(1600.0, 1400.0, 0.0).unwrap();
        assert_abs_diff_eq!(a, 1600.0 - 32.0 * e, epsilon = 1e-9);
        assert_abs_diff_eq!(b, 1400.0 + 32.0 * e, epsilon = 1e-9);
        assert_abs_diff_eq!(a, 1575.688, epsilon = 1e-3);
        assert_abs_diff_eq!(b, 1424.311, epsilon = 1e-3);
    }

    #[test]
    fn update_pair_rejects_bad_score() {
        assert!(update_pair(1500.0, 1500.0, 0.7).is_err());
        assert!(update_pair(1500.0, 1500.0, -1.0).is_err());
    }

    #[test]
    fn worked_three_way_case() {
        let mut s = store(&[("A", 1500.0), ("B", 1500.0), ("C", 1500.0)]);
        let recs = decompose_and_update(
            &mut s,
            1,
            &[("A".into(), 0.65), ("B".into(), 0.62), ("C".into(), 0.62)],
        )
        .unwrap();
        let shape: Vec<_> = recs
            .iter()
            .map(|r| (r.agent_a.as_str(), r.agent_b.as_str(), r.score_a))
            .collect();
        assert_eq!(shape, [("A", "B", 1.0), ("A", "C", 1.0), ("B", "C", 0.5)]);
        assert!(s.values().all(|r| r.games == 2));
    }

    #[test]
    fn sequential_updates_use_current_ratings() {
        let mut s = store(&[("A", 1500.0), ("B", 1500.0), ("C", 1500.0)]);
        let recs = decompose_and_update(
            &mut s,
            3,
            &[("A".into(), 1.0), ("B".into(), 0.5), ("C".into(), 0.0)],
        )
        .unwrap();
        // (A,C) starts from A's post-(A,B) rating.
        assert_eq!(recs[1].rating_a_before, recs[0].rating_a_after);
        assert_eq!(recs[2].rating_a_before, recs[0].rating_b_after);
        assert_eq!(recs[2].rating_b_before, recs[1].rating_b_after);
    }

    #[test]
    fn degenerate_inputs() {
        let mut s = store(&[("A", 1500.0)]);
        assert!(decompose_and_update(&mut s, 1, &[("A".into(), 0.5)])
            .unwrap()
            .is_empty());
        let mut s = store(&[("A", 1500.0), ("B", 1500.0), ("C", 1500.0)]);
        decompose_and_update(
            &mut s,
            1,
            &[("A".into(), 0.4), ("B".into(), 0.4), ("C".into(), 0.4)],
        )
        .unwrap();
        assert!(s.values().all(|r| r.value == 1500.0));
        let err = decompose_and_update(&mut s, 1, &[("A".into(), 0.4), ("Z".into(), 0.1)]);
        assert!(matches!(err, Err(Error::NotFound(_))));
        // Nothing was applied before the unknown id was detected.
        assert!(s.values().all(|r| r.games == 2));
    }

    #[test]
    fn canonical_pairs_match_roster_order() {
        assert_eq!(canonical_pairs(3), [(0, 1), (0, 2), (1, 2)]);
        assert_eq!(canonical_pairs(4).len(), 6);
        assert!(canonical_pairs(1).is_empty());
    }

    proptest! {
        #[test]
        fn expectation_is_symmetric(a in -5000.0f64..5000.0, b in -5000.0f64..5000.0) {
            let s = expected_score(a, b).unwrap() + expected_score(b, a).unwrap();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn decomposition_is_zero_sum(
            ratings in proptest::collection::vec(1000.0f64..2000.0, 2..6),
            correct in proptest::collection::vec(0u32..=30, 6),
        ) {
            let ids: Vec<String> = (0..ratings.len()).map(|i| format!("a{i}")).collect();
            let mut s: BTreeMap<String, Rating> = ids.iter().zip(&ratings)
                .map(|(id, v)| (id.clone(), Rating { value: *v, games: 0 }))
                .collect();
            let before: f64 = s.values().map(|r| r.value).sum();
            let results: Vec<(String, f64)> = ids.iter().zip(&correct)
                .map(|(id, c)| (id.clone(), f64::from(*c) / 30.0))
                .collect();
            let recs = decompose_and_update(&mut s, 1, &results).unwrap();
            let after: f64 = s.values().map(|r| r.value).sum();
            prop_assert!((before - after).abs() < 1e-9);
            for r in &recs {
                let pair_before = r.rating_a_before + r.rating_b_before;
                let pair_after = r.rating_a_after + r.rating_b_after;
                prop_assert!((pair_before - pair_after).abs() < 1e-9);
                if r.score_a == 1.0 {
                    prop_assert!(r.rating_a_after >= r.rating_a_before);
                }
                if r.score_a == 0.0 {
                    prop_assert!(r.rating_a_after <= r.rating_a_before);
                }
            }
        }

        #[test]
        fn upsets_move_ratings_more(gap_small in 0.0f64..400.0, extra in 1.0f64..400.0) {
            // Winner's rating advantage grows: the gain must shrink.
            let gain = |gap: f64| update_pair(1500.0 + gap, 1500.0, 1.0).unwrap().0 - (1500.0 + gap);
            prop_assert!(gain(gap_small + extra) < gain(gap_small));
        }
    }
}
