//! Class-incremental evaluation metrics and concept-fidelity diagnostics.
//!
//! The accuracy matrix is lower-triangular: entry (t, j) is the accuracy on
//! phase-j test classes after learning phase t. All means run through
//! compensated summation so results do not depend on platform reassociation.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sparse::SparsePredictor;
use crate::Real;
use ndarray::ArrayView2;

/// Kahan-compensated sum.
pub fn kahan_sum<F: Scalar>(values: impl IntoIterator<Item = F>) -> F {
    let mut sum = F::zero();
    let mut c = F::zero();
    for v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Lower-triangular per-phase accuracy record with per-phase class counts
/// for the weighted metric variants.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<Real>>,
    class_counts: Vec<usize>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<Real>>, class_counts: Vec<usize>) -> Result<Self> {
        let mut m = AccuracyMatrix::new();
        if rows.len() != class_counts.len() {
            return Err(Error::Shape(format!(
                "{} accuracy rows but {} phase class counts",
                rows.len(),
                class_counts.len()
            )));
        }
        for (row, count) in rows.into_iter().zip(class_counts) {
            m.push_phase(row, count)?;
        }
        Ok(m)
    }

    /// Append the accuracy row measured after learning the next phase.
    pub fn push_phase(&mut self, row: Vec<Real>, class_count: usize) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::Shape(format!(
                "row for phase {} must have {} entries, got {}",
                self.rows.len() + 1,
                self.rows.len() + 1,
                row.len()
            )));
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Validation(format!(
                "accuracy entries must lie in [0, 1]: {row:?}"
            )));
        }
        if class_count == 0 {
            return Err(Error::Validation("phase with zero classes".into()));
        }
        self.rows.push(row);
        self.class_counts.push(class_count);
        Ok(())
    }

    pub fn phases(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<Real>] {
        &self.rows
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    /// a[t][j], 1-based phases, t >= j.
    pub fn entry(&self, t: usize, j: usize) -> Result<Real> {
        if t == 0 || j == 0 || j > t || t > self.phases() {
            return Err(Error::Validation(format!(
                "accuracy entry ({t},{j}) outside the lower triangle of {} phases",
                self.phases()
            )));
        }
        Ok(self.rows[t - 1][j - 1])
    }

    fn require_row(&self, t: usize) -> Result<&[Real]> {
        if t == 0 || t > self.phases() {
            return Err(Error::Validation(format!(
                "phase {t} not recorded (have {})",
                self.phases()
            )));
        }
        Ok(&self.rows[t - 1])
    }
}

/// Average accuracy over phases 1..=t after learning phase t.
pub fn avg_phase_accuracy(a: &AccuracyMatrix, t: usize) -> Result<Real> {
    let row = a.require_row(t)?;
    Ok(kahan_sum(row.iter().copied()) / t as Real)
}

/// Class-count-weighted variant of the average phase accuracy.
pub fn weighted_avg_phase_accuracy(a: &AccuracyMatrix, t: usize) -> Result<Real> {
    let row = a.require_row(t)?;
    let weights = &a.class_counts()[..t];
    let total: usize = weights.iter().sum();
    let acc = kahan_sum(
        row.iter()
            .zip(weights)
            .map(|(&acc, &w)| acc * w as Real),
    );
    Ok(acc / total as Real)
}

/// Mean over earlier phases of the largest accuracy drop relative to any
/// previous checkpoint. Negative when accuracy improved. Undefined at t = 1.
pub fn avg_phase_forgetting(a: &AccuracyMatrix, t: usize) -> Result<Real> {
    forgetting_impl(a, t, false)
}

/// Class-count-weighted variant of the average phase forgetting.
pub fn weighted_avg_phase_forgetting(a: &AccuracyMatrix, t: usize) -> Result<Real> {
    forgetting_impl(a, t, true)
}

fn forgetting_impl(a: &AccuracyMatrix, t: usize, weighted: bool) -> Result<Real> {
    if t < 2 {
        return Err(Error::Validation(
            "forgetting is undefined before phase 2".into(),
        ));
    }
    let row = a.require_row(t)?;
    let mut terms = Vec::with_capacity(t - 1);
    let mut weights = Vec::with_capacity(t - 1);
    for j in 1..t {
        let mut best = Real::NEG_INFINITY;
        for i in j..t {
            best = best.max(a.entry(i, j)?);
        }
        terms.push(best - row[j - 1]);
        weights.push(if weighted {
            a.class_counts()[j - 1] as Real
        } else {
            1.0
        });
    }
    let wsum = kahan_sum(weights.iter().copied());
    let num = kahan_sum(terms.iter().zip(&weights).map(|(&d, &w)| d * w));
    Ok(num / wsum)
}

/// Mean of the average phase accuracies over all recorded phases.
pub fn avg_incremental_accuracy(a: &AccuracyMatrix) -> Result<Real> {
    let t = a.phases();
    if t == 0 {
        return Err(Error::Validation("empty accuracy matrix".into()));
    }
    let per_phase: Result<Vec<Real>> = (1..=t).map(|i| avg_phase_accuracy(a, i)).collect();
    Ok(kahan_sum(per_phase?) / t as Real)
}

/// Mean of the average phase forgetting over phases 2..=T.
pub fn avg_incremental_forgetting(a: &AccuracyMatrix) -> Result<Real> {
    let t = a.phases();
    if t < 2 {
        return Err(Error::Validation(
            "incremental forgetting is undefined with fewer than 2 phases".into(),
        ));
    }
    let per_phase: Result<Vec<Real>> = (2..=t).map(|i| avg_phase_forgetting(a, i)).collect();
    Ok(kahan_sum(per_phase?) / (t - 1) as Real)
}

/// Concept-fidelity diagnostics for the bottleneck units.
#[derive(Debug, Clone, serde::Serialize)]
pub struct FidelityReport {
    /// Mean cosine similarity, in concept-embedding space, between each
    /// unit's assigned concept and its ground-truth concept.
    pub mean_embedding_cosine: Real,
    /// Fraction of units whose ground-truth concept appears in their top-5
    /// profile ranking.
    pub top5_accuracy: Real,
    pub evaluated_units: usize,
    /// Units skipped because their activation profile was constant.
    pub skipped_units: Vec<usize>,
    /// Assigned concept per unit (None when skipped). Not serialized:
    /// TOML has no holes in arrays; `skipped_units` carries the gaps.
    #[serde(skip_serializing)]
    pub assignments: Vec<Option<usize>>,
}

/// Assign each bottleneck unit the concept whose test-set activation profile
/// it matches best, then score the assignment against the identity ground
/// truth. Column k of `unit_activations` must correspond to ground-truth
/// concept k (the columns of `reference`).
pub fn concept_fidelity<F: Scalar>(
    unit_activations: ArrayView2<'_, F>,
    reference: ArrayView2<'_, F>,
    concept_embeddings: ArrayView2<'_, F>,
) -> Result<FidelityReport> {
    let m = unit_activations.ncols();
    if reference.ncols() != m {
        return Err(Error::Shape(format!(
            "{} bottleneck units vs {} reference concepts",
            m,
            reference.ncols()
        )));
    }
    if reference.nrows() != unit_activations.nrows() {
        return Err(Error::Shape(format!(
            "{} activation rows vs {} reference rows",
            unit_activations.nrows(),
            reference.nrows()
        )));
    }
    if concept_embeddings.nrows() != m {
        return Err(Error::Shape(format!(
            "{} concept embeddings for {} concepts",
            concept_embeddings.nrows(),
            m
        )));
    }
    let n = unit_activations.nrows();
    let nf = F::from(n).unwrap();
    let is_constant = |col: ndarray::ArrayView1<'_, F>| {
        let mean = col.sum() / nf;
        col.iter().all(|&v| (v - mean).abs() <= F::from(1e-12).unwrap())
    };
    let cos = |a: ndarray::ArrayView1<'_, F>, b: ndarray::ArrayView1<'_, F>| -> F {
        let na = a.dot(&a).sqrt();
        let nb = b.dot(&b).sqrt();
        if na == F::zero() || nb == F::zero() {
            return F::zero();
        }
        a.dot(&b) / (na * nb)
    };
    let emb_cos = |a: usize, b: usize| -> Real {
        cos(concept_embeddings.row(a), concept_embeddings.row(b))
            .to_f64()
            .unwrap()
    };

    let mut assignments = Vec::with_capacity(m);
    let mut skipped = Vec::new();
    let mut cos_terms = Vec::new();
    let mut top5_hits = 0usize;
    let mut evaluated = 0usize;
    for k in 0..m {
        let q = unit_activations.column(k);
        if is_constant(q) {
            skipped.push(k);
            assignments.push(None);
            continue;
        }
        let mut sims: Vec<(F, usize)> = (0..m)
            .map(|c| (cos(q, reference.column(c)), c))
            .collect();
        // Descending similarity, ascending concept id on ties.
        sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let assigned = sims[0].1;
        assignments.push(Some(assigned));
        evaluated += 1;
        cos_terms.push(emb_cos(assigned, k));
        if sims.iter().take(5).any(|&(_, c)| c == k) {
            top5_hits += 1;
        }
    }
    let mean_cos = if evaluated == 0 {
        0.0
    } else {
        kahan_sum(cos_terms.iter().copied()) / evaluated as Real
    };
    let top5 = if evaluated == 0 {
        0.0
    } else {
        top5_hits as Real / evaluated as Real
    };
    Ok(FidelityReport {
        mean_embedding_cosine: mean_cos,
        top5_accuracy: top5,
        evaluated_units: evaluated,
        skipped_units: skipped,
        assignments,
    })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SparsityReport {
    pub per_class: Vec<(i32, usize)>,
    pub total_nonzeros: usize,
    /// total nonzeros / (K * M), as a percentage.
    pub percent: Real,
}

pub fn sparsity_report<F: Scalar>(pred: &SparsePredictor<F>) -> SparsityReport {
    let per_class = pred.per_class_nonzeros();
    let total = pred.total_nonzeros();
    let cells = pred.classes() * pred.concepts();
    SparsityReport {
        per_class,
        total_nonzeros: total,
        percent: if cells == 0 {
            0.0
        } else {
            100.0 * total as Real / cells as Real
        },
    }
}

/// Fraction of matching label pairs.
pub fn accuracy(pred: &[i32], truth: &[i32]) -> Result<Real> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Validation("accuracy of an empty set".into()));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as Real / pred.len() as Real)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{array, Array2};

    fn matrix(rows: &[&[Real]], counts: &[usize]) -> AccuracyMatrix {
        AccuracyMatrix::from_rows(
            rows.iter().map(|r| r.to_vec()).collect(),
            counts.to_vec(),
        )
        .unwrap()
    }

    /// Naive double-loop recomputation of every metric, kept deliberately
    /// separate from the implementation.
    fn naive(a: &AccuracyMatrix) -> (Vec<Real>, Vec<Real>, Real, Real) {
        let t_max = a.phases();
        let rows = a.rows();
        let mut avg_acc = vec![];
        for t in 1..=t_max {
            let mut s = 0.0;
            for j in 1..=t {
                s += rows[t - 1][j - 1];
            }
            avg_acc.push(s / t as Real);
        }
        let mut forg = vec![];
        for t in 2..=t_max {
            let mut s = 0.0;
            for j in 1..t {
                let mut best = Real::NEG_INFINITY;
                for i in j..t {
                    if rows[i - 1][j - 1] > best {
                        best = rows[i - 1][j - 1];
                    }
                }
                s += best - rows[t - 1][j - 1];
            }
            forg.push(s / (t - 1) as Real);
        }
        let abar = avg_acc.iter().sum::<Real>() / t_max as Real;
        let fbar = forg.iter().sum::<Real>() / (t_max - 1) as Real;
        (avg_acc, forg, abar, fbar)
    }

    #[test]
    fn single_phase_metrics() {
        let a = matrix(&[&[0.85]], &[5]);
        assert_eq!(avg_phase_accuracy(&a, 1).unwrap(), 0.85);
        assert_eq!(avg_incremental_accuracy(&a).unwrap(), 0.85);
        assert!(avg_phase_forgetting(&a, 1).is_err());
        assert!(avg_incremental_forgetting(&a).is_err());
    }

    #[test]
    fn two_phase_hand_values() {
        let a = matrix(&[&[0.9], &[0.8, 0.6]], &[5, 5]);
        assert_relative_eq!(avg_phase_accuracy(&a, 2).unwrap(), 0.7, epsilon = 1e-15);
        assert_relative_eq!(
            avg_phase_forgetting(&a, 2).unwrap(),
            0.1,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            avg_incremental_accuracy(&a).unwrap(),
            0.8,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            avg_incremental_forgetting(&a).unwrap(),
            0.1,
            epsilon = 1e-15
        );
        // Example from the forgetting definition: 0.9 then 0.7.
        let a = matrix(&[&[0.9], &[0.5, 0.6]], &[5, 5]);
        assert_relative_eq!(
            avg_phase_forgetting(&a, 2).unwrap(),
            0.4,
            epsilon = 1e-15
        );
    }

    #[test]
    fn weighted_mean_matches_hand_value() {
        let a = matrix(&[&[0.9], &[0.8, 0.6]], &[50, 10]);
        let w = weighted_avg_phase_accuracy(&a, 2).unwrap();
        assert_relative_eq!(w, (50.0 * 0.8 + 10.0 * 0.6) / 60.0, epsilon = 1e-15);
        assert_relative_eq!(w, 0.7666666666666667, epsilon = 1e-15);
    }

    #[test]
    fn weighted_reduces_to_unweighted_for_equal_counts() {
        let a = matrix(
            &[&[0.9], &[0.7, 0.8], &[0.6, 0.75, 0.9], &[0.55, 0.7, 0.8, 0.95]],
            &[7, 7, 7, 7],
        );
        for t in 1..=4 {
            assert_relative_eq!(
                avg_phase_accuracy(&a, t).unwrap(),
                weighted_avg_phase_accuracy(&a, t).unwrap(),
                epsilon = 1e-12
            );
        }
        for t in 2..=4 {
            assert_relative_eq!(
                avg_phase_forgetting(&a, t).unwrap(),
                weighted_avg_phase_forgetting(&a, t).unwrap(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn four_phase_fixture_matches_double_loop() {
        let fixtures = [
            matrix(
                &[&[0.9], &[0.7, 0.8], &[0.6, 0.75, 0.9], &[0.55, 0.7, 0.8, 0.95]],
                &[3, 3, 3, 3],
            ),
            matrix(
                &[&[1.0], &[1.0, 1.0], &[0.2, 0.9, 0.8], &[0.5, 0.95, 0.7, 0.6]],
                &[2, 4, 6, 8],
            ),
            // Columns improving over time: negative forgetting.
            matrix(&[&[0.5], &[0.6, 0.5], &[0.7, 0.6, 0.5]], &[1, 1, 1]),
        ];
        for a in &fixtures {
            let (acc, forg, abar, fbar) = naive(a);
            for t in 1..=a.phases() {
                assert_relative_eq!(
                    avg_phase_accuracy(a, t).unwrap(),
                    acc[t - 1],
                    epsilon = 1e-12
                );
            }
            for t in 2..=a.phases() {
                assert_relative_eq!(
                    avg_phase_forgetting(a, t).unwrap(),
                    forg[t - 2],
                    epsilon = 1e-12
                );
            }
            assert_relative_eq!(avg_incremental_accuracy(a).unwrap(), abar, epsilon = 1e-12);
            assert_relative_eq!(
                avg_incremental_forgetting(a).unwrap(),
                fbar,
                epsilon = 1e-12
            );
        }
        // Nondecreasing columns imply nonpositive forgetting.
        assert!(avg_phase_forgetting(&fixtures[2], 3).unwrap() <= 0.0);
    }

    #[test]
    fn malformed_rows_are_rejected() {
        let mut a = AccuracyMatrix::new();
        a.push_phase(vec![0.9], 3).unwrap();
        assert!(a.push_phase(vec![0.8], 3).is_err());
        assert!(a.push_phase(vec![0.8, 1.4], 3).is_err());
        assert!(avg_phase_accuracy(&a, 2).is_err());
    }

    #[test]
    fn fidelity_is_perfect_on_identical_activations() {
        let p = array![
            [0.3, -0.2, 0.9],
            [0.1, 0.4, -0.5],
            [0.7, 0.2, 0.3],
            [-0.2, 0.8, 0.1]
        ];
        let emb = Array2::<Real>::eye(3);
        let r = concept_fidelity(p.view(), p.view(), emb.view()).unwrap();
        assert_eq!(r.top5_accuracy, 1.0);
        assert_relative_eq!(r.mean_embedding_cosine, 1.0, epsilon = 1e-12);
        assert_eq!(r.assignments, vec![Some(0), Some(1), Some(2)]);
        assert!(r.skipped_units.is_empty());
    }

    #[test]
    fn permuted_columns_match_brute_force_assignment() {
        let p = array![
            [0.3, -0.2, 0.9, 0.0],
            [0.1, 0.4, -0.5, 1.0],
            [0.7, 0.2, 0.3, -1.0],
            [-0.2, 0.8, 0.1, 0.5],
            [0.9, -0.7, 0.25, -0.4]
        ];
        // Units = columns of P permuted by (0 1 2 3) -> (2 0 3 1).
        let perm = [2usize, 0, 3, 1];
        let mut q = Array2::<Real>::zeros(p.raw_dim());
        for (unit, &src) in perm.iter().enumerate() {
            q.column_mut(unit).assign(&p.column(src));
        }
        let emb = Array2::<Real>::eye(4);
        let r = concept_fidelity(q.view(), p.view(), emb.view()).unwrap();
        for (unit, &src) in perm.iter().enumerate() {
            assert_eq!(r.assignments[unit], Some(src));
        }
        // Identity embeddings: assigned != truth scores cosine 0, and the
        // truth concept is still within the top 5 of only those units whose
        // profiles correlate; with 4 concepts top-5 always hits.
        assert_eq!(r.top5_accuracy, 1.0);
        assert_relative_eq!(r.mean_embedding_cosine, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn random_units_match_exhaustive_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(91);
        let n = 12;
        let m = 6;
        let mut p = Array2::<Real>::zeros((n, m));
        let mut q = Array2::<Real>::zeros((n, m));
        for v in p.iter_mut() {
            *v = rng.random::<Real>() * 2.0 - 1.0;
        }
        for v in q.iter_mut() {
            *v = rng.random::<Real>() * 2.0 - 1.0;
        }
        let emb = Array2::<Real>::eye(m);
        let r = concept_fidelity(q.view(), p.view(), emb.view()).unwrap();
        for k in 0..m {
            let mut best = (Real::NEG_INFINITY, usize::MAX);
            for c in 0..m {
                let a = q.column(k);
                let b = p.column(c);
                let sim = a.dot(&b) / a.dot(&a).sqrt() / b.dot(&b).sqrt();
                if sim > best.0 {
                    best = (sim, c);
                }
            }
            assert_eq!(r.assignments[k], Some(best.1), "unit {k}");
        }
    }

    #[test]
    fn constant_units_are_skipped_and_flagged() {
        let p = array![[0.3, -0.2], [0.1, 0.4], [0.7, 0.2]];
        let q = array![[0.5, -0.2], [0.5, 0.4], [0.5, 0.2]];
        let emb = Array2::<Real>::eye(2);
        let r = concept_fidelity(q.view(), p.view(), emb.view()).unwrap();
        assert_eq!(r.skipped_units, vec![0]);
        assert_eq!(r.assignments[0], None);
        assert_eq!(r.evaluated_units, 1);
    }

    #[test]
    fn sparsity_report_counts_exactly() {
        let mut pred = SparsePredictor::zeros(vec![0, 1], 10, 0.1, 0.99);
        let r = sparsity_report(&pred);
        assert_eq!(r.percent, 0.0);
        pred.weights[[0, 1]] = 0.5;
        pred.weights[[0, 2]] = -0.5;
        pred.weights[[1, 0]] = 1.0;
        pred.weights[[1, 9]] = 2.0;
        let r = sparsity_report(&pred);
        assert_eq!(r.total_nonzeros, 4);
        assert_relative_eq!(r.percent, 20.0, epsilon = 1e-12);
        assert_eq!(r.per_class, vec![(0, 2), (1, 2)]);
        // Direct count oracle.
        let direct = pred.weights.iter().filter(|w| **w != 0.0).count();
        assert_eq!(r.total_nonzeros, direct);
    }

    #[test]
    fn sample_permutation_leaves_accuracy_unchanged() {
        let pred = vec![0, 1, 1, 0, 2, 2, 1];
        let truth = vec![0, 1, 0, 0, 2, 1, 1];
        let base = accuracy(&pred, &truth).unwrap();
        let perm = [6usize, 2, 0, 4, 5, 1, 3];
        let pred2: Vec<i32> = perm.iter().map(|&i| pred[i]).collect();
        let truth2: Vec<i32> = perm.iter().map(|&i| truth[i]).collect();
        assert_eq!(base, accuracy(&pred2, &truth2).unwrap());
    }
}
