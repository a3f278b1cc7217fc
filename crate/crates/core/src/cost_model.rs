//! Class statistics, misclassification costs and loss weights.
//!
//! Costs follow a clamped log-ratio of class frequencies: mistaking a rare
//! class for a common one is expensive, mistaking a common class for anything
//! costs at least one. The positive weight of a class is its expected
//! misclassification cost under the class priors, and the negative weights
//! for an example are the cost-matrix row of its true class.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};

/// Per-class example counts together with their priors.
///
/// Index `j` is class `j` of whatever label space the caller uses; when a
/// background class is modelled it is simply index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    counts: Vec<u64>,
    total: u64,
    priors: Vec<f64>,
}

impl ClassStats {
    /// Builds statistics from raw counts. Every class needs at least one
    /// example, and there must be two classes or more.
    pub fn from_counts(counts: &[i64]) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::TooFewClasses(counts.len()));
        }
        if let Some((class, &count)) = counts.iter().enumerate().find(|(_, &c)| c < 1) {
            return Err(Error::InsufficientClassSupport { class, count });
        }
        let counts: Vec<u64> = counts.iter().map(|&c| c as u64).collect();
        let total: u64 = counts.iter().sum();
        let priors = counts.iter().map(|&c| c as f64 / total as f64).collect();
        Ok(Self { counts, total, priors })
    }

    /// Same as [`ClassStats::from_counts`] for unsigned tallies.
    pub fn from_tally(counts: &[u64]) -> Result<Self> {
        let signed: Vec<i64> = counts.iter().map(|&c| i64::try_from(c).unwrap_or(i64::MAX)).collect();
        Self::from_counts(&signed)
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }
}

/// Square cost table; entry `(j, k)` is the cost of predicting `k` when the
/// truth is `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    entries: Array2<f64>,
}

impl CostMatrix {
    /// `w_jk = 0` on the diagonal and `max(1, log2(N_k / N_j))` elsewhere.
    pub fn from_stats(stats: &ClassStats) -> Self {
        let counts = stats.counts();
        let c = counts.len();
        let entries = Array2::from_shape_fn((c, c), |(j, k)| {
            if j == k {
                0.0
            } else {
                (counts[k] as f64 / counts[j] as f64).log2().max(1.0)
            }
        });
        Self { entries }
    }

    pub fn num_classes(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn get(&self, truth: usize, predicted: usize) -> f64 {
        self.entries[[truth, predicted]]
    }

    pub fn row(&self, truth: usize) -> ArrayView1<'_, f64> {
        self.entries.row(truth)
    }
}

/// Free-function form of [`CostMatrix::from_stats`].
pub fn build_cost_matrix(stats: &ClassStats) -> CostMatrix {
    CostMatrix::from_stats(stats)
}

/// Positive weights `u` and the per-true-class negative weight rows `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightPair {
    positive: Array1<f64>,
    negative_rows: Array2<f64>,
}

impl WeightPair {
    /// Derives the weights from a cost matrix and the priors it was built from.
    pub fn from_cost_matrix(stats: &ClassStats, costs: &CostMatrix) -> Result<Self> {
        let c = stats.num_classes();
        if costs.num_classes() != c {
            return Err(Error::ShapeMismatch {
                expected: format!("{c}x{c} cost matrix"),
                found: format!("{0}x{0}", costs.num_classes()),
            });
        }
        let counts = stats.counts();
        let total = stats.total();
        let mut positive = Array1::zeros(c);
        for j in 0..c {
            // P_k / (1 - P_j) == N_k / (N - N_j); the count form keeps
            // balanced and small integer cases exact.
            let rest = total - counts[j];
            if rest == 0 {
                return Err(Error::DegeneratePrior { class: j });
            }
            let weighted: f64 = (0..c).filter(|&k| k != j).map(|k| counts[k] as f64 * costs.get(j, k)).sum();
            positive[j] = weighted / rest as f64;
        }
        Ok(Self { positive, negative_rows: costs.entries().clone() })
    }

    /// Convenience: statistics to weights in one step.
    pub fn from_stats(stats: &ClassStats) -> Result<Self> {
        Self::from_cost_matrix(stats, &CostMatrix::from_stats(stats))
    }

    /// Unit weights; the weighted loss then reduces to plain binary cross
    /// entropy.
    pub fn uniform(num_classes: usize) -> Self {
        Self {
            positive: Array1::ones(num_classes),
            negative_rows: Array2::from_shape_fn((num_classes, num_classes), |(j, k)| if j == k { 0.0 } else { 1.0 }),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.positive.len()
    }

    pub fn positive(&self) -> &Array1<f64> {
        &self.positive
    }

    pub fn negative_rows(&self) -> &Array2<f64> {
        &self.negative_rows
    }

    /// Negative weights used for an example whose true class is `truth`.
    pub fn negative_for(&self, truth: usize) -> ArrayView1<'_, f64> {
        self.negative_rows.row(truth)
    }
}

/// Free-function form of [`WeightPair::from_cost_matrix`].
pub fn weight_pair_from_cost_matrix(stats: &ClassStats, costs: &CostMatrix) -> Result<WeightPair> {
    WeightPair::from_cost_matrix(stats, costs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stats(counts: &[i64]) -> ClassStats {
        ClassStats::from_counts(counts).unwrap()
    }

    #[test]
    fn priors_are_count_ratios() {
        let s = stats(&[8, 4, 1]);
        assert_eq!(s.total(), 13);
        assert_eq!(s.priors(), &[8.0 / 13.0, 4.0 / 13.0, 1.0 / 13.0]);
        assert_eq!(stats(&[5, 5]).priors(), &[0.5, 0.5]);
    }

    #[test]
    fn rejects_bad_counts() {
        assert!(matches!(
            ClassStats::from_counts(&[8, 0]),
            Err(Error::InsufficientClassSupport { class: 1, count: 0 })
        ));
        assert!(matches!(ClassStats::from_counts(&[3, -2, 4]), Err(Error::InsufficientClassSupport { class: 1, .. })));
        assert!(matches!(ClassStats::from_counts(&[]), Err(Error::TooFewClasses(0))));
        assert!(matches!(ClassStats::from_counts(&[7]), Err(Error::TooFewClasses(1))));
    }

    #[test]
    fn cost_matrix_hand_values() {
        let w = CostMatrix::from_stats(&stats(&[8, 4, 1]));
        let expected = [[0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [3.0, 2.0, 0.0]];
        for (j, row) in expected.iter().enumerate() {
            for (k, &e) in row.iter().enumerate() {
                assert_eq!(w.get(j, k), e, "({j},{k})");
            }
        }

        let w = CostMatrix::from_stats(&stats(&[1, 1024]));
        assert_eq!(w.get(0, 1), 10.0);
        assert_eq!(w.get(1, 0), 1.0);

        let w = CostMatrix::from_stats(&stats(&[5, 5, 5]));
        for j in 0..3 {
            for k in 0..3 {
                assert_eq!(w.get(j, k), if j == k { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn weight_pair_hand_values() {
        let w = WeightPair::from_stats(&stats(&[8, 4, 1])).unwrap();
        assert_eq!(w.positive().to_vec(), vec![1.0, 1.0, 8.0 / 3.0]);

        let w = WeightPair::from_stats(&stats(&[5, 5, 5])).unwrap();
        assert_eq!(w.positive().to_vec(), vec![1.0, 1.0, 1.0]);

        let w = WeightPair::from_stats(&stats(&[8, 1])).unwrap();
        assert_eq!(w.positive().to_vec(), vec![1.0, 3.0]);
        assert_eq!(w.negative_for(0).to_vec(), vec![0.0, 1.0]);
        assert_eq!(w.negative_for(1).to_vec(), vec![3.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let w = CostMatrix::from_stats(&stats(&[2, 3]));
        let err = WeightPair::from_cost_matrix(&stats(&[1, 2, 3]), &w).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn uniform_matches_balanced_stats() {
        let from_stats = WeightPair::from_stats(&stats(&[7, 7, 7, 7])).unwrap();
        assert_eq!(from_stats, WeightPair::uniform(4));
    }

    fn counts_strategy() -> impl Strategy<Value = Vec<i64>> {
        prop::collection::vec(1i64..100_000, 2..12)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn cost_and_weight_bounds(counts in counts_strategy()) {
            let s = stats(&counts);
            let w = CostMatrix::from_stats(&s);
            let pair = WeightPair::from_cost_matrix(&s, &w).unwrap();
            for j in 0..counts.len() {
                for k in 0..counts.len() {
                    let e = w.get(j, k);
                    prop_assert!(e.is_finite());
                    if j == k { prop_assert_eq!(e, 0.0); } else { prop_assert!(e >= 1.0); }
                }
                prop_assert!(pair.positive()[j] >= 1.0);
            }
        }

        #[test]
        fn balanced_counts_give_unit_weights(n in 1i64..10_000, c in 2usize..15) {
            let s = stats(&vec![n; c]);
            let pair = WeightPair::from_stats(&s).unwrap();
            prop_assert_eq!(pair, WeightPair::uniform(c));
        }

        #[test]
        fn scaling_counts_is_invariant(counts in prop::collection::vec(1i64..1000, 2..10), scale in 2i64..50) {
            let base = WeightPair::from_stats(&stats(&counts)).unwrap();
            let scaled: Vec<i64> = counts.iter().map(|c| c * scale).collect();
            let scaled = WeightPair::from_stats(&stats(&scaled)).unwrap();
            for (a, b) in base.negative_rows().iter().zip(scaled.negative_rows().iter()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            for (a, b) in base.positive().iter().zip(scaled.positive().iter()) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }

        #[test]
        fn shrinking_a_class_never_lowers_its_weight(
            counts in prop::collection::vec(2i64..5000, 2..10),
            pick in any::<prop::sample::Index>(),
            frac in 0.0f64..1.0,
        ) {
            let j = pick.index(counts.len());
            let before = WeightPair::from_stats(&stats(&counts)).unwrap().positive()[j];
            let mut reduced = counts.clone();
            reduced[j] = 1 + ((counts[j] - 1) as f64 * frac) as i64;
            let after = WeightPair::from_stats(&stats(&reduced)).unwrap().positive()[j];
            prop_assert!(after >= before - 1e-12, "{before} -> {after}");
        }
    }
}
