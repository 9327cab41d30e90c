//! Class centroids, pseudo-feature generation by centroid shifting, and the
//! cosine-prototype diagnostic classifier.
//!
//! Pseudo-features stand in for past classes without storing their samples:
//! the current phase's nearest new class donates its whole feature batch,
//! translated from the donor centroid to the past-class centroid. The shift
//! transports the mean exactly and leaves the centered covariance untouched.

use crate::bottleneck::BottleneckWeights;
use crate::error::{Error, Result};
use crate::matrixio::{FeatureMatrix, Split};
use crate::scalar::Scalar;
use crate::Real;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use std::collections::BTreeMap;

/// Per-class summary statistics. Entries are written once when a class is
/// introduced and never modified afterwards.
#[derive(Debug, Clone)]
pub struct CentroidEntry<F = Real> {
    pub centroid: Array1<F>,
    /// Concept-space centroid at the introduction phase, for the
    /// concept-space prototype variant. Length equals the concept count of
    /// the bottleneck that produced it.
    pub concept_centroid: Option<Array1<F>>,
    pub sample_count: usize,
    pub phase_introduced: u32,
}

/// Map class id -> centroid statistics, append-only across phases.
#[derive(Debug, Clone, Default)]
pub struct CentroidStore<F = Real> {
    entries: BTreeMap<i32, CentroidEntry<F>>,
}

impl<F: Scalar> CentroidStore<F> {
    pub fn new() -> Self {
        CentroidStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert_new(&mut self, class_id: i32, entry: CentroidEntry<F>) -> Result<()> {
        if entry.sample_count == 0 {
            return Err(Error::Validation(format!(
                "centroid for class {class_id} built from zero samples"
            )));
        }
        if entry.centroid.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "centroid for class {class_id} contains NaN/Inf"
            )));
        }
        if self.entries.contains_key(&class_id) {
            return Err(Error::Validation(format!(
                "centroid for class {class_id} already stored; centroids are immutable"
            )));
        }
        self.entries.insert(class_id, entry);
        Ok(())
    }

    pub fn get(&self, class_id: i32) -> Option<&CentroidEntry<F>> {
        self.entries.get(&class_id)
    }

    pub fn require(&self, class_id: i32) -> Result<&CentroidEntry<F>> {
        self.entries
            .get(&class_id)
            .ok_or(Error::MissingCentroid { class_id })
    }

    pub fn class_ids(&self) -> Vec<i32> {
        self.entries.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&i32, &CentroidEntry<F>)> {
        self.entries.iter()
    }
}

/// Arithmetic mean of the rows of each expected class. Every expected class
/// must appear in the batch.
pub fn compute_centroids<F: Scalar>(
    features: &FeatureMatrix<F>,
    expected_classes: &[i32],
) -> Result<Vec<(i32, Array1<F>, usize)>> {
    let mut out = Vec::with_capacity(expected_classes.len());
    for &c in expected_classes {
        let rows = features.rows_of(c);
        if rows.is_empty() {
            return Err(Error::Validation(format!(
                "class {c} has no samples in its own phase"
            )));
        }
        let mut mean = Array1::<F>::zeros(features.feature_dim());
        for &r in &rows {
            mean = mean + features.data.row(r);
        }
        mean /= F::from(rows.len()).unwrap();
        out.push((c, mean, rows.len()));
    }
    Ok(out)
}

fn cosine<F: Scalar>(a: ArrayView1<'_, F>, b: ArrayView1<'_, F>) -> Result<F> {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == F::zero() || nb == F::zero() {
        return Err(Error::Validation(
            "cosine undefined for a zero-norm vector".into(),
        ));
    }
    Ok(a.dot(&b) / (na * nb))
}

/// The new class whose centroid has the largest cosine similarity to the
/// past class's centroid; ties break toward the smaller class id.
pub fn nearest_new_class<F: Scalar>(
    past_class: i32,
    store: &CentroidStore<F>,
    new_classes: &[i32],
) -> Result<i32> {
    if new_classes.is_empty() {
        return Err(Error::Validation(
            "nearest_new_class called with no new classes".into(),
        ));
    }
    let past = store.require(past_class)?;
    let mut best: Option<(F, i32)> = None;
    let mut sorted = new_classes.to_vec();
    sorted.sort_unstable();
    for &c in &sorted {
        let cand = store.require(c)?;
        let sim = cosine(past.centroid.view(), cand.centroid.view())?;
        if best.is_none_or(|(s, _)| sim > s) {
            best = Some((sim, c));
        }
    }
    Ok(best.expect("new_classes nonempty").1)
}

/// Shift the donor batch from its centroid to the past class's centroid.
/// Output rows are labeled `past_class`.
pub fn generate_pseudo_features<F: Scalar>(
    past_class: i32,
    donor_class: i32,
    donor_rows: ArrayView2<'_, F>,
    store: &CentroidStore<F>,
    phase_id: u32,
) -> Result<FeatureMatrix<F>> {
    if donor_rows.nrows() == 0 {
        return Err(Error::Validation(format!(
            "no donor rows from class {donor_class} for pseudo-features"
        )));
    }
    let mu_p = &store.require(past_class)?.centroid;
    let mu_n = &store.require(donor_class)?.centroid;
    if mu_p.len() != donor_rows.ncols() || mu_n.len() != donor_rows.ncols() {
        return Err(Error::Shape(format!(
            "centroid dim {} vs donor feature dim {}",
            mu_p.len(),
            donor_rows.ncols()
        )));
    }
    let shift = mu_p - mu_n;
    let mut data = donor_rows.to_owned();
    for mut row in data.rows_mut() {
        row += &shift.view();
    }
    FeatureMatrix::new(
        data,
        vec![past_class; donor_rows.nrows()],
        phase_id,
        Split::Train,
    )
}

/// Project pseudo-features (or any feature batch) into concept space.
pub fn project_pseudo_concepts<F: Scalar>(
    pseudo: ArrayView2<'_, F>,
    bottleneck: &BottleneckWeights<F>,
) -> Result<Array2<F>> {
    bottleneck.project(pseudo)
}

/// Concept-space variant of the pseudo-sample mechanism: translate the donor
/// batch in concept space toward the past class's stored concept prototype,
/// zero-padded to the current concept count.
pub fn generate_pseudo_concepts_prototype_variant<F: Scalar>(
    past_class: i32,
    donor_class: i32,
    donor_concepts: ArrayView2<'_, F>,
    donor_concept_centroid: ArrayView1<'_, F>,
    store: &CentroidStore<F>,
) -> Result<Array2<F>> {
    let past = store.require(past_class)?;
    let proto = past.concept_centroid.as_ref().ok_or_else(|| {
        Error::Validation(format!(
            "class {past_class} has no stored concept-space prototype"
        ))
    })?;
    let m_now = donor_concepts.ncols();
    if proto.len() > m_now || donor_concept_centroid.len() != m_now {
        return Err(Error::Shape(format!(
            "class {past_class} prototype of length {} against {} current concepts              (donor {donor_class})",
            proto.len(),
            m_now
        )));
    }
    let mut padded = Array1::<F>::zeros(m_now);
    padded.slice_mut(ndarray::s![..proto.len()]).assign(proto);
    let shift = &padded - &donor_concept_centroid;
    let mut out = donor_concepts.to_owned();
    for mut row in out.rows_mut() {
        row += &shift.view();
    }
    Ok(out)
}

/// Assign each row to the stored centroid with maximal cosine similarity;
/// ties break toward the smaller class id.
pub fn prototype_classify<F: Scalar>(
    features: ArrayView2<'_, F>,
    store: &CentroidStore<F>,
) -> Result<Vec<i32>> {
    if store.is_empty() {
        return Err(Error::Validation(
            "prototype classifier has no centroids".into(),
        ));
    }
    let mut labels = Vec::with_capacity(features.nrows());
    for row in features.rows() {
        let mut best: Option<(F, i32)> = None;
        for (&c, entry) in store.iter() {
            let sim = cosine(row, entry.centroid.view())?;
            if best.is_none_or(|(s, _)| sim > s) {
                best = Some((sim, c));
            }
        }
        labels.push(best.expect("store nonempty").1);
    }
    Ok(labels)
}

/// Fraction of rows whose prototype assignment equals the given labels.
pub fn prototype_accuracy<F: Scalar>(
    features: ArrayView2<'_, F>,
    labels: &[i32],
    store: &CentroidStore<F>,
) -> Result<Real> {
    let pred = prototype_classify(features, store)?;
    if pred.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as Real / labels.len() as Real)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn store_with(entries: &[(i32, Array1<Real>)]) -> CentroidStore {
        let mut s = CentroidStore::new();
        for (c, v) in entries {
            s.insert_new(
                *c,
                CentroidEntry {
                    centroid: v.clone(),
                    concept_centroid: None,
                    sample_count: 1,
                    phase_introduced: 1,
                },
            )
            .unwrap();
        }
        s
    }

    fn gaussian_rows(n: usize, mean: &Array1<Real>, seed: u64) -> Array2<Real> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d = mean.len();
        let mut m = Array2::<Real>::zeros((n, d));
        for mut row in m.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = mean[j] + z;
            }
        }
        m
    }

    #[test]
    fn centroid_of_single_sample_is_the_sample() {
        let f = FeatureMatrix::new(array![[2.0, -1.0]], vec![7], 1, Split::Train).unwrap();
        let c = compute_centroids(&f, &[7]).unwrap();
        assert_eq!(c[0].1, array![2.0, -1.0]);
        assert_eq!(c[0].2, 1);
    }

    #[test]
    fn centroid_is_the_arithmetic_mean() {
        let f = FeatureMatrix::new(array![[0.0, 0.0], [2.0, 4.0]], vec![3, 3], 1, Split::Train)
            .unwrap();
        let c = compute_centroids(&f, &[3]).unwrap();
        assert_eq!(c[0].1, array![1.0, 2.0]);
    }

    #[test]
    fn missing_class_in_its_own_phase_is_an_error() {
        let f = FeatureMatrix::new(array![[1.0, 1.0]], vec![0], 1, Split::Train).unwrap();
        assert!(matches!(
            compute_centroids(&f, &[0, 1]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn seeded_centroids_match_a_direct_mean_oracle() {
        let d = 6;
        let means = [
            Array1::from_elem(d, 2.0),
            Array1::from_elem(d, -1.0),
            Array1::linspace(0.0, 5.0, d),
        ];
        let mut data = Array2::<Real>::zeros((150, d));
        let mut labels = Vec::new();
        for (k, mean) in means.iter().enumerate() {
            let rows = gaussian_rows(50, mean, 70 + k as u64);
            data.slice_mut(ndarray::s![50 * k..50 * (k + 1), ..])
                .assign(&rows);
            labels.extend(std::iter::repeat_n(k as i32, 50));
        }
        let f = FeatureMatrix::new(data.clone(), labels.clone(), 1, Split::Train).unwrap();
        let got = compute_centroids(&f, &[0, 1, 2]).unwrap();
        for (k, mean) in means.iter().enumerate() {
            // Direct recomputation with plain loops.
            let mut oracle = vec![0.0; d];
            let mut count = 0.0;
            for (i, &l) in labels.iter().enumerate() {
                if l == k as i32 {
                    for j in 0..d {
                        oracle[j] += data[[i, j]];
                    }
                    count += 1.0;
                }
            }
            for (j, o) in oracle.iter().enumerate() {
                assert_relative_eq!(got[k].1[j], o / count, epsilon = 1e-12);
            }
            // Within 3 sigma / sqrt(50) of the true mean per coordinate.
            for j in 0..d {
                assert!((got[k].1[j] - mean[j]).abs() < 3.0 / (50.0_f64).sqrt() * 1.5);
            }
        }
    }

    #[test]
    fn centroids_are_immutable_once_stored() {
        let mut s = store_with(&[(0, array![1.0, 0.0])]);
        let err = s.insert_new(
            0,
            CentroidEntry {
                centroid: array![0.0, 1.0],
                concept_centroid: None,
                sample_count: 1,
                phase_introduced: 2,
            },
        );
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn nearest_class_follows_cosine_and_breaks_ties_low() {
        let s = store_with(&[
            (0, array![1.0, 0.0]),
            (5, array![1.0, 0.1]),
            (6, array![0.0, 1.0]),
        ]);
        // cos(mu0, mu5) ~ 0.995 beats cos(mu0, mu6) = 0.
        assert_eq!(nearest_new_class(0, &s, &[5, 6]).unwrap(), 5);
        // Identical candidates: the smaller id wins.
        let s = store_with(&[
            (0, array![1.0, 0.0]),
            (5, array![0.5, 0.5]),
            (4, array![0.5, 0.5]),
        ]);
        assert_eq!(nearest_new_class(0, &s, &[5, 4]).unwrap(), 4);
        // Single candidate short-circuits to that candidate.
        assert_eq!(nearest_new_class(0, &s, &[5]).unwrap(), 5);
    }

    #[test]
    fn zero_norm_centroid_is_an_error() {
        let s = store_with(&[(0, array![1.0, 0.0]), (1, array![0.0, 0.0])]);
        assert!(matches!(
            nearest_new_class(0, &s, &[1]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn zero_shift_returns_the_donor_batch() {
        let mu = array![1.0, 2.0];
        let s = store_with(&[(0, mu.clone()), (9, mu)]);
        let donor = array![[1.5, 2.5], [0.5, 1.5]];
        let out = generate_pseudo_features(0, 9, donor.view(), &s, 2).unwrap();
        assert_eq!(out.data, donor);
        assert_eq!(out.labels, vec![0, 0]);
    }

    #[test]
    fn single_sample_shifts_to_the_target_centroid() {
        let x = array![3.0, -1.0];
        let m = array![10.0, 10.0];
        let s = store_with(&[(0, m.clone()), (9, x.clone())]);
        let out =
            generate_pseudo_features(0, 9, x.clone().insert_axis(ndarray::Axis(0)).view(), &s, 2)
                .unwrap();
        assert_eq!(out.data.row(0).to_owned(), m);
    }

    #[test]
    fn transport_preserves_mean_and_covariance_exactly() {
        let d = 8;
        let donor = gaussian_rows(100, &Array1::from_elem(d, 3.0), 123);
        // Donor centroid computed from exactly these rows.
        let mu_n = donor.mean_axis(ndarray::Axis(0)).unwrap();
        let mu_p = Array1::linspace(-4.0, 4.0, d);
        let s = store_with(&[(0, mu_p.clone()), (9, mu_n.clone())]);
        let out = generate_pseudo_features(0, 9, donor.view(), &s, 2).unwrap();
        assert_eq!(out.samples(), 100);

        let mean_out = out.data.mean_axis(ndarray::Axis(0)).unwrap();
        for j in 0..d {
            assert!(
                (mean_out[j] - mu_p[j]).abs() < 1e-10,
                "coordinate {j}: {} vs {}",
                mean_out[j],
                mu_p[j]
            );
        }

        let cov = |m: &Array2<Real>| -> Array2<Real> {
            let mu = m.mean_axis(ndarray::Axis(0)).unwrap();
            let centered = m - &mu;
            centered.t().dot(&centered) / (m.nrows() as Real)
        };
        let diff = cov(&donor) - cov(&out.data);
        let fro = diff.iter().map(|v| v * v).sum::<Real>().sqrt();
        assert!(fro < 1e-10, "covariance Frobenius diff {fro}");
    }

    #[test]
    fn missing_centroid_is_reported() {
        let s = store_with(&[(0, array![1.0, 0.0])]);
        let donor = array![[1.0, 0.0]];
        assert!(matches!(
            generate_pseudo_features(0, 9, donor.view(), &s, 2),
            Err(Error::MissingCentroid { class_id: 9 })
        ));
    }

    #[test]
    fn projection_is_the_exact_matrix_product() {
        let w = BottleneckWeights::new(array![[1.0, 0.0], [0.0, 1.0]], 1).unwrap();
        let x = array![[3.0, 4.0], [1.0, -1.0]];
        let out = project_pseudo_concepts(x.view(), &w).unwrap();
        assert_eq!(out, x);
        let zero = Array2::<Real>::zeros((3, 2));
        let out = project_pseudo_concepts(zero.view(), &w).unwrap();
        assert_eq!(out, Array2::<Real>::zeros((3, 2)));
    }

    #[test]
    fn projection_matches_oracle_and_is_linear() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let d = 5;
        let m = 7;
        let mut wt = Array2::<Real>::zeros((m, d));
        for v in wt.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let w = BottleneckWeights::new(wt.clone(), 1).unwrap();
        let a = gaussian_rows(10, &Array1::zeros(d), 32);
        let b = gaussian_rows(10, &Array1::zeros(d), 33);
        let pa = project_pseudo_concepts(a.view(), &w).unwrap();
        let pb = project_pseudo_concepts(b.view(), &w).unwrap();
        let pab = project_pseudo_concepts((&a + &b).view(), &w).unwrap();
        // Linearity.
        let lin_diff = (&pa + &pb) - &pab;
        assert!(lin_diff.iter().all(|v| v.abs() < 1e-10));
        // Independent triple-loop product.
        for i in 0..10 {
            for k in 0..m {
                let mut dot = 0.0;
                for j in 0..d {
                    dot += a[[i, j]] * wt[[k, j]];
                }
                assert!((pa[[i, k]] - dot).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prototypes_classify_themselves() {
        let s = store_with(&[
            (0, array![1.0, 0.0]),
            (1, array![0.0, 1.0]),
            (2, array![-1.0, 1.0]),
        ]);
        let queries = array![[1.0, 0.0], [0.0, 1.0], [-1.0, 1.0]];
        assert_eq!(prototype_classify(queries.view(), &s).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn thirty_degree_query_prefers_the_nearer_prototype() {
        let s = store_with(&[(0, array![1.0, 0.0]), (1, array![0.0, 1.0])]);
        let rad = 30.0_f64.to_radians();
        let q = array![[rad.cos(), rad.sin()]];
        assert_eq!(prototype_classify(q.view(), &s).unwrap(), vec![0]);
    }

    #[test]
    fn prototype_rule_matches_exhaustive_search_on_pseudo_features() {
        let d = 6;
        let mu_p = Array1::from_elem(d, 5.0);
        let mu_n = Array1::from_elem(d, -5.0);
        let mu_other = Array1::linspace(-2.0, 2.0, d);
        let donor = gaussian_rows(80, &mu_n, 55);
        let emp_mu_n = donor.mean_axis(ndarray::Axis(0)).unwrap();
        let s = store_with(&[(0, mu_p), (1, mu_other), (2, emp_mu_n)]);
        let pseudo = generate_pseudo_features(0, 2, donor.view(), &s, 2).unwrap();
        let got = prototype_classify(pseudo.data.view(), &s).unwrap();
        // Brute-force oracle over all centroids.
        let ids = s.class_ids();
        for (i, row) in pseudo.data.rows().into_iter().enumerate() {
            let mut best = (f64::NEG_INFINITY, i32::MAX);
            for &c in &ids {
                let cen = &s.get(c).unwrap().centroid;
                let sim = row.dot(cen) / row.dot(&row).sqrt() / cen.dot(cen).sqrt();
                if sim > best.0 || (sim == best.0 && c < best.1) {
                    best = (sim, c);
                }
            }
            assert_eq!(got[i], best.1, "row {i}");
        }
        let acc = prototype_accuracy(pseudo.data.view(), &pseudo.labels, &s).unwrap();
        assert!(acc > 0.95, "well-separated transport landed at {acc}");
    }

    #[test]
    fn zero_norm_query_row_is_an_error() {
        let s = store_with(&[(0, array![1.0, 0.0])]);
        let q = array![[0.0, 0.0]];
        assert!(matches!(
            prototype_classify(q.view(), &s),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn concept_space_variant_pads_and_translates() {
        let mut s = CentroidStore::new();
        s.insert_new(
            0,
            CentroidEntry {
                centroid: array![1.0, 0.0],
                concept_centroid: Some(array![2.0, 3.0]),
                sample_count: 4,
                phase_introduced: 1,
            },
        )
        .unwrap();
        let donor_concepts = array![[1.0, 1.0, 1.0], [3.0, 3.0, 3.0]];
        let donor_centroid = array![2.0, 2.0, 2.0];
        let out = generate_pseudo_concepts_prototype_variant(
            0,
            9,
            donor_concepts.view(),
            donor_centroid.view(),
            &s,
        )
        .unwrap();
        // Shift = pad([2,3]) - [2,2,2] = [0,1,-2].
        assert_eq!(out, array![[1.0, 2.0, -1.0], [3.0, 4.0, 1.0]]);
    }
}
