//! Local and global interpretability exports.
//!
//! A local explanation decomposes one logit into per-concept contributions
//! `weight * activation`, which together with the bias reconstruct the logit
//! exactly. A global explanation is the thresholded weight graph of one
//! class, with negative weights flagged as NOT concepts.

use crate::bottleneck::BottleneckWeights;
use crate::concept::ConceptSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sparse::SparsePredictor;
use crate::Real;
use ndarray::ArrayView1;

#[derive(Debug, Clone, serde::Serialize)]
pub struct ContributionReport {
    pub class_id: i32,
    pub bias: Real,
    pub logit: Real,
    /// (concept id, contribution), sorted by descending magnitude with ties
    /// on the concept id.
    pub contributions: Vec<(usize, Real)>,
}

/// Per-concept contributions of one sample to one class logit.
pub fn contributions<F: Scalar>(
    features: ArrayView1<'_, F>,
    bottleneck: &BottleneckWeights<F>,
    pred: &SparsePredictor<F>,
    class_id: i32,
) -> Result<ContributionReport> {
    if features.len() != bottleneck.feature_dim() {
        return Err(Error::Shape(format!(
            "sample has dim {}, bottleneck expects {}",
            features.len(),
            bottleneck.feature_dim()
        )));
    }
    if bottleneck.concept_count() != pred.concepts() {
        return Err(Error::Shape(format!(
            "bottleneck has {} concepts, predictor expects {}",
            bottleneck.concept_count(),
            pred.concepts()
        )));
    }
    let row = pred.row_of_class(class_id)?;
    let activations = bottleneck.weights.dot(&features);
    let mut contributions: Vec<(usize, Real)> = activations
        .iter()
        .enumerate()
        .map(|(j, &a)| (j, (pred.weights[[row, j]] * a).to_f64().unwrap()))
        .collect();
    let bias = pred.bias[row].to_f64().unwrap();
    let logit = bias + contributions.iter().map(|&(_, c)| c).sum::<Real>();
    contributions.sort_by(|a, b| {
        b.1.abs()
            .partial_cmp(&a.1.abs())
            .unwrap()
            .then(a.0.cmp(&b.0))
    });
    Ok(ContributionReport {
        class_id,
        bias,
        logit,
        contributions,
    })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct WeightEdge {
    pub concept_id: usize,
    pub concept: String,
    pub weight: Real,
    pub introduced_phase: u32,
    /// Negative weights read as evidence against the class.
    pub is_not_concept: bool,
}

/// Edges of the class's weight graph with |weight| strictly above the
/// threshold, ordered by descending magnitude.
pub fn global_weight_graph<F: Scalar>(
    pred: &SparsePredictor<F>,
    concepts: &ConceptSet,
    class_id: i32,
    threshold: Real,
) -> Result<Vec<WeightEdge>> {
    if threshold < 0.0 {
        return Err(Error::Validation(format!(
            "threshold must be nonnegative, got {threshold}"
        )));
    }
    if concepts.len() != pred.concepts() {
        return Err(Error::Shape(format!(
            "{} concepts in the set, predictor has {}",
            concepts.len(),
            pred.concepts()
        )));
    }
    let row = pred.row_of_class(class_id)?;
    let mut edges: Vec<WeightEdge> = pred
        .weights
        .row(row)
        .iter()
        .enumerate()
        .filter_map(|(j, &w)| {
            let w = w.to_f64().unwrap();
            (w.abs() > threshold).then(|| {
                let entry = concepts.entry(j).expect("length checked");
                WeightEdge {
                    concept_id: j,
                    concept: entry.text.clone(),
                    weight: w,
                    introduced_phase: entry.introduced_phase,
                    is_not_concept: w < 0.0,
                }
            })
        })
        .collect();
    edges.sort_by(|a, b| {
        b.weight
            .abs()
            .partial_cmp(&a.weight.abs())
            .unwrap()
            .then(a.concept_id.cmp(&b.concept_id))
    });
    Ok(edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concept::{expand, filter_candidates, Candidate, ConceptSet, FilterParams};
    use approx::assert_relative_eq;
    use ndarray::{array, Array1, Array2};
    use rand::{Rng, SeedableRng};

    fn toy_concepts(n: usize) -> ConceptSet {
        let cands: Vec<Candidate> = (0..n)
            .map(|i| {
                let mut e = Array1::<Real>::zeros(n);
                e[i] = 1.0;
                Candidate {
                    text: format!("concept-{i}"),
                    embedding: e,
                    embedding_alt: None,
                    source_index: i,
                }
            })
            .collect();
        let set = ConceptSet::new();
        let report = filter_candidates(&cands, &set, &[], &FilterParams::default()).unwrap();
        expand(&set, &report, 1).unwrap()
    }

    #[test]
    fn zero_row_gives_bias_only_logit() {
        let w = BottleneckWeights::new(Array2::eye(3), 1).unwrap();
        let mut pred = SparsePredictor::zeros(vec![5], 3, 0.0, 0.99);
        pred.bias[0] = 0.75;
        let r = contributions(array![1.0, 2.0, 3.0].view(), &w, &pred, 5).unwrap();
        assert!(r.contributions.iter().all(|&(_, c)| c == 0.0));
        assert_eq!(r.logit, 0.75);
    }

    #[test]
    fn single_weight_contribution() {
        let w = BottleneckWeights::new(Array2::eye(3), 1).unwrap();
        let mut pred = SparsePredictor::zeros(vec![0], 3, 0.0, 0.99);
        pred.weights[[0, 1]] = -2.0;
        let r = contributions(array![1.0, 3.0, 0.0].view(), &w, &pred, 0).unwrap();
        assert_eq!(r.contributions[0], (1, -6.0));
        assert_relative_eq!(r.logit, -6.0, epsilon = 1e-15);
    }

    #[test]
    fn contributions_reconstruct_logits_and_match_product_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let d = 6;
        let m = 9;
        let mut wb = Array2::<Real>::zeros((m, d));
        for v in wb.iter_mut() {
            *v = rng.random::<Real>() * 2.0 - 1.0;
        }
        let bottleneck = BottleneckWeights::new(wb, 1).unwrap();
        let mut pred = SparsePredictor::zeros(vec![0, 1, 2], m, 0.01, 0.99);
        for v in pred.weights.iter_mut() {
            if rng.random::<Real>() < 0.4 {
                *v = rng.random::<Real>() * 2.0 - 1.0;
            }
        }
        for v in pred.bias.iter_mut() {
            *v = rng.random::<Real>() * 2.0 - 1.0;
        }
        for _ in 0..20 {
            let x = Array1::from_iter((0..d).map(|_| rng.random::<Real>() * 4.0 - 2.0));
            let acts = bottleneck.weights.dot(&x);
            for class in 0..3 {
                let r = contributions(x.view(), &bottleneck, &pred, class).unwrap();
                // Elementwise-product oracle.
                for &(j, c) in &r.contributions {
                    assert_relative_eq!(
                        c,
                        pred.weights[[class as usize, j]] * acts[j],
                        epsilon = 1e-12
                    );
                }
                // Logit reconstruction against the predict path.
                let (_, logits) = crate::sparse::predict(
                    &pred,
                    acts.clone().insert_axis(ndarray::Axis(0)).view(),
                )
                .unwrap();
                assert!(
                    (r.logit - logits[[0, class as usize]]).abs() < 1e-10,
                    "logit mismatch {} vs {}",
                    r.logit,
                    logits[[0, class as usize]]
                );
                // Sorted by descending magnitude.
                for w in r.contributions.windows(2) {
                    assert!(w[0].1.abs() >= w[1].1.abs());
                }
            }
        }
    }

    #[test]
    fn unseen_class_is_an_error() {
        let w = BottleneckWeights::new(Array2::eye(2), 1).unwrap();
        let pred = SparsePredictor::zeros(vec![0], 2, 0.0, 0.99);
        assert!(matches!(
            contributions(array![1.0, 0.0].view(), &w, &pred, 3),
            Err(Error::UnseenClass { class_id: 3 })
        ));
    }

    #[test]
    fn weight_graph_filters_and_flags() {
        let concepts = toy_concepts(3);
        let mut pred = SparsePredictor::zeros(vec![0], 3, 0.0, 0.99);
        pred.weights[[0, 0]] = 0.3;
        pred.weights[[0, 1]] = -0.25;
        pred.weights[[0, 2]] = 0.1;
        let edges = global_weight_graph(&pred, &concepts, 0, 0.2).unwrap();
        assert_eq!(edges.len(), 2);
        assert_eq!(edges[0].concept_id, 0);
        assert!(!edges[0].is_not_concept);
        assert_eq!(edges[1].concept_id, 1);
        assert!(edges[1].is_not_concept);
        assert_eq!(edges[0].introduced_phase, 1);

        // Threshold above the largest magnitude: empty graph.
        let edges = global_weight_graph(&pred, &concepts, 0, 0.5).unwrap();
        assert!(edges.is_empty());
    }

    #[test]
    fn raising_the_threshold_never_adds_edges() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let concepts = toy_concepts(12);
        let mut pred = SparsePredictor::zeros(vec![0], 12, 0.0, 0.99);
        for v in pred.weights.iter_mut() {
            *v = rng.random::<Real>() * 2.0 - 1.0;
        }
        let mut prev: Option<Vec<usize>> = None;
        for threshold in [0.0, 0.1, 0.2, 0.4, 0.8] {
            let ids: Vec<usize> = global_weight_graph(&pred, &concepts, 0, threshold)
                .unwrap()
                .iter()
                .map(|e| e.concept_id)
                .collect();
            // Direct filter oracle.
            let mut expect: Vec<usize> = (0..12)
                .filter(|&j| pred.weights[[0, j]].abs() > threshold)
                .collect();
            let mut sorted = ids.clone();
            sorted.sort_unstable();
            expect.sort_unstable();
            assert_eq!(sorted, expect);
            if let Some(prev) = &prev {
                assert!(ids.iter().all(|i| prev.contains(i)));
            }
            prev = Some(ids);
        }
    }
}
