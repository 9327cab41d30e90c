//! Self-contained geometric lab: isotropic Gaussian class models, Bayes
//! boundaries, pseudo-feature boundary agreement, and synthetic end-to-end
//! scenarios that drive the whole pipeline with no external data.
//!
//! Synthetic concept activations are noisy linear functionals of the
//! features, so the bottleneck has a recoverable linear target; synthetic
//! concept texts get random unit embeddings so the filtering pipeline has
//! something real to chew on.

use crate::concept::{Candidate, ClassNameEmbedding, ConceptSet};
use crate::config::{streams, sub_seed, RunConfig};
use crate::error::{Error, Result};
use crate::matrixio::{FeatureMatrix, Split};
use crate::protocol::{evaluate_phase, run_phase, PhaseInputs, PhaseReport, RunReport};
use crate::scalar::Scalar;
use crate::state::PhaseState;
use crate::{Matrix, Real, Vector};
use ndarray::{Array1, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;
use std::path::Path;

/// One class modeled as an isotropic Gaussian in feature space.
#[derive(Debug, Clone)]
pub struct GaussianClass<F = Real> {
    pub mean: Array1<F>,
    pub sigma: F,
    pub prior: F,
    pub class_id: i32,
    pub phase_id: u32,
}

impl<F: Scalar> GaussianClass<F> {
    pub fn log_density(&self, x: ArrayView1<'_, F>) -> F {
        let d = F::from(self.mean.len()).unwrap();
        let two = F::from(2.0).unwrap();
        let tau = F::from(2.0 * std::f64::consts::PI).unwrap();
        let var = self.sigma * self.sigma;
        let diff = &x.to_owned() - &self.mean;
        let sq = diff.dot(&diff);
        -d / two * (tau * var).ln() - sq / (two * var)
    }
}

/// Coefficients of the pairwise Bayes boundary as the quadratic form
/// `quad * x.x + linear.x + constant`, which evaluates to
/// `2 (log p_i(x) - log p_j(x))` at every point under equal priors.
#[derive(Debug, Clone)]
pub struct BoundaryCoeffs<F = Real> {
    pub quad: F,
    pub linear: Array1<F>,
    pub constant: F,
}

impl<F: Scalar> BoundaryCoeffs<F> {
    pub fn eval(&self, x: ArrayView1<'_, F>) -> F {
        self.quad * x.dot(&x) + self.linear.dot(&x) + self.constant
    }
}

/// Boundary between two isotropic Gaussians with equal priors. The
/// quadratic coefficient vanishes exactly when the variances are equal,
/// collapsing the boundary to a hyperplane.
pub fn bayes_boundary_coeffs<F: Scalar>(
    ci: &GaussianClass<F>,
    cj: &GaussianClass<F>,
) -> Result<BoundaryCoeffs<F>> {
    if ci.mean.len() != cj.mean.len() {
        return Err(Error::Shape(format!(
            "class means of dim {} and {}",
            ci.mean.len(),
            cj.mean.len()
        )));
    }
    let d = F::from(ci.mean.len()).unwrap();
    let vi = ci.sigma * ci.sigma;
    let vj = cj.sigma * cj.sigma;
    let quad = if ci.sigma == cj.sigma {
        F::zero()
    } else {
        F::one() / vj - F::one() / vi
    };
    let two = F::from(2.0).unwrap();
    let linear = &(&cj.mean / vj) - &(&ci.mean / vi);
    let linear = linear.mapv(|v| -two * v);
    let constant =
        cj.mean.dot(&cj.mean) / vj - ci.mean.dot(&ci.mean) / vi + d * (vj / vi).ln();
    Ok(BoundaryCoeffs {
        quad,
        linear,
        constant,
    })
}

/// Maximum-log-density classification with equal priors; ties break toward
/// the smaller class id.
pub fn bayes_classify<F: Scalar>(x: ArrayView1<'_, F>, classes: &[GaussianClass<F>]) -> Result<i32> {
    if classes.is_empty() {
        return Err(Error::Validation("bayes_classify with no classes".into()));
    }
    let mut best: Option<(F, i32)> = None;
    for c in classes {
        let lp = c.log_density(x);
        let better = match best {
            None => true,
            Some((b, id)) => lp > b || (lp == b && c.class_id < id),
        };
        if better {
            best = Some((lp, c.class_id));
        }
    }
    Ok(best.expect("classes nonempty").1)
}

/// The pseudo-feature class models: past classes keep their means but take
/// the variance of their nearest new class (by centroid cosine); new classes
/// stay as they are.
pub fn pseudo_class_models<F: Scalar>(
    classes: &[GaussianClass<F>],
    last_phase: u32,
) -> Result<Vec<GaussianClass<F>>> {
    let new: Vec<&GaussianClass<F>> = classes
        .iter()
        .filter(|c| c.phase_id == last_phase)
        .collect();
    if new.is_empty() {
        return Err(Error::Validation(format!(
            "no classes in the last phase {last_phase}"
        )));
    }
    classes
        .iter()
        .map(|c| {
            if c.phase_id == last_phase {
                return Ok(c.clone());
            }
            let mut best: Option<(F, &GaussianClass<F>)> = None;
            let norm_c = c.mean.dot(&c.mean).sqrt();
            for cand in &new {
                let norm_n = cand.mean.dot(&cand.mean).sqrt();
                if norm_c == F::zero() || norm_n == F::zero() {
                    return Err(Error::Validation(
                        "zero-norm class mean in donor search".into(),
                    ));
                }
                let sim = c.mean.dot(&cand.mean) / (norm_c * norm_n);
                let better = match best {
                    None => true,
                    Some((s, b)) => sim > s || (sim == s && cand.class_id < b.class_id),
                };
                if better {
                    best = Some((sim, cand));
                }
            }
            let donor = best.expect("new classes nonempty").1;
            Ok(GaussianClass {
                sigma: donor.sigma,
                ..c.clone()
            })
        })
        .collect()
}

/// Fraction of probe points on which the Bayes rules of two class-model sets
/// disagree. Probes are drawn from the reference mixture.
pub fn boundary_disagreement(
    pseudo: &[GaussianClass],
    reference: &[GaussianClass],
    n_probe: usize,
    seed: u64,
) -> Result<Real> {
    if reference.len() < 2 || pseudo.len() != reference.len() {
        return Err(Error::Validation(format!(
            "need matching model sets with >= 2 classes, got {} and {}",
            pseudo.len(),
            reference.len()
        )));
    }
    if n_probe == 0 {
        return Err(Error::Validation("zero probe points".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = reference[0].mean.len();
    // Cumulative priors for component draws.
    let total: Real = reference.iter().map(|c| c.prior).sum();
    let mut disagreements = 0usize;
    let mut x = Vector::zeros(d);
    for _ in 0..n_probe {
        let u: Real = rng.random::<Real>() * total;
        let mut acc = 0.0;
        let mut comp = &reference[reference.len() - 1];
        for c in reference {
            acc += c.prior;
            if u < acc {
                comp = c;
                break;
            }
        }
        for (j, v) in x.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = comp.mean[j] + comp.sigma * z;
        }
        let a = bayes_classify(x.view(), reference)?;
        let b = bayes_classify(x.view(), pseudo)?;
        if a != b {
            disagreements += 1;
        }
    }
    Ok(disagreements as Real / n_probe as Real)
}

// ---------------------------------------------------------------------------
// Scenario configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassSpec {
    id: i32,
    name: Option<String>,
    sigma: Real,
    /// Explicit mean; mutually exclusive with `mean_norm`.
    mean: Option<Vec<Real>>,
    /// Seeded random direction scaled to this norm.
    mean_norm: Option<Real>,
    prior: Option<Real>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct PhaseSpec {
    classes: Vec<ClassSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConceptSpec {
    per_phase: Vec<usize>,
    embedding_dim: usize,
    snr_db: Option<Real>,
    #[serde(default)]
    duplicate_fraction: Real,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub feature_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    concepts: ConceptSpec,
    phases: Vec<PhaseSpec>,
}

impl ScenarioConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_str_checked(&text)
    }

    pub fn from_str_checked(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Format {
            path: "<scenario>".into(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::Validation("scenario has no phases".into()));
        }
        if self.concepts.per_phase.len() != self.phases.len() {
            return Err(Error::Validation(format!(
                "{} phases but {} per-phase candidate counts",
                self.phases.len(),
                self.concepts.per_phase.len()
            )));
        }
        if self.feature_dim == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Validation(
                "feature_dim and per-class sample counts must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.concepts.duplicate_fraction) {
            return Err(Error::Validation(
                "duplicate_fraction must lie in [0, 1]".into(),
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.phases {
            if p.classes.is_empty() {
                return Err(Error::Validation("phase with no classes".into()));
            }
            for c in &p.classes {
                if !seen.insert(c.id) {
                    return Err(Error::Validation(format!(
                        "class {} appears in more than one phase",
                        c.id
                    )));
                }
                if c.sigma <= 0.0 {
                    return Err(Error::Validation(format!(
                        "class {} has nonpositive sigma",
                        c.id
                    )));
                }
                if c.mean.is_some() == c.mean_norm.is_some() {
                    return Err(Error::Validation(format!(
                        "class {} must specify exactly one of mean / mean_norm",
                        c.id
                    )));
                }
                if let Some(m) = &c.mean {
                    if m.len() != self.feature_dim {
                        return Err(Error::Validation(format!(
                            "class {} mean has dim {}, scenario uses {}",
                            c.id,
                            m.len(),
                            self.feature_dim
                        )));
                    }
                }
            }
        }
        // Priors default to equal; explicit priors must sum to 1.
        let explicit: Vec<Real> = self
            .phases
            .iter()
            .flat_map(|p| &p.classes)
            .filter_map(|c| c.prior)
            .collect();
        let n_classes = seen.len();
        if !explicit.is_empty() {
            if explicit.len() != n_classes {
                return Err(Error::Validation(
                    "either all classes or none must declare priors".into(),
                ));
            }
            let sum: Real = explicit.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Validation(format!(
                    "class priors sum to {sum}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

/// Synthetic concept activations: seeded linear functionals of the features
/// plus optional Gaussian noise at a configured signal-to-noise ratio.
#[derive(Debug, Clone)]
pub struct ConceptGenerator {
    /// One functional per candidate, rows aligned with candidate
    /// source indices.
    pub functionals: Matrix,
    pub snr_db: Option<Real>,
    seed: u64,
}

impl ConceptGenerator {
    /// Activations of the given candidate functionals on a feature batch.
    /// `noise_stream` distinguishes train/test/phase draws.
    pub fn activations(
        &self,
        features: &Matrix,
        source_indices: &[usize],
        noise_stream: u64,
    ) -> Result<Matrix> {
        let m = source_indices.len();
        let mut g = Matrix::zeros((m, self.functionals.ncols()));
        for (row, &src) in source_indices.iter().enumerate() {
            if src >= self.functionals.nrows() {
                return Err(Error::Validation(format!(
                    "candidate source index {src} outside the generator ({} functionals)",
                    self.functionals.nrows()
                )));
            }
            g.row_mut(row).assign(&self.functionals.row(src));
        }
        let mut p = features.dot(&g.t());
        if let Some(snr_db) = self.snr_db {
            let scale = (10.0 as Real).powf(-snr_db / 20.0);
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(self.seed, 0, noise_stream));
            let n = p.nrows() as Real;
            for j in 0..p.ncols() {
                let mean = p.column(j).sum() / n;
                let var = p.column(j).iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n;
                let noise_sd = var.sqrt() * scale;
                for i in 0..p.nrows() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    p[[i, j]] += noise_sd * z;
                }
            }
        }
        Ok(p)
    }

    /// Activations for the current concept set (columns follow concept ids).
    pub fn activations_for_set(
        &self,
        features: &Matrix,
        concepts: &ConceptSet,
        noise_stream: u64,
    ) -> Result<Matrix> {
        let sources: Vec<usize> = concepts.entries().iter().map(|e| e.source_index).collect();
        self.activations(features, &sources, noise_stream)
    }
}

/// A fully sampled scenario: per-phase datasets, candidates, and the
/// activation generator.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub classes: Vec<GaussianClass>,
    pub phases: Vec<ScenarioPhase>,
    pub generator: ConceptGenerator,
}

#[derive(Debug, Clone)]
pub struct ScenarioPhase {
    pub phase_id: u32,
    pub classes: Vec<(i32, String)>,
    pub train: FeatureMatrix,
    pub test: FeatureMatrix,
    pub candidates: Vec<Candidate>,
    pub class_embeddings: Vec<ClassNameEmbedding>,
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vector {
    loop {
        let mut v = Vector::zeros(dim);
        for x in v.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *x = z;
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

fn sample_rows(
    mean: &Vector,
    sigma: Real,
    n: usize,
    seed: u64,
) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Matrix::zeros((n, mean.len()));
    for mut row in rows.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = mean[j] + sigma * z;
        }
    }
    rows
}

/// Sample the whole scenario deterministically from its seed.
pub fn sample_scenario(cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    let d = cfg.feature_dim;
    let n_classes: usize = cfg.phases.iter().map(|p| p.classes.len()).sum();
    let default_prior = 1.0 / n_classes as Real;

    // Class models. Means either explicit or seeded random directions.
    let mut mean_rng =
        ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 0, streams::SCENARIO_MEANS));
    let mut classes: Vec<GaussianClass> = Vec::new();
    for (pi, phase) in cfg.phases.iter().enumerate() {
        for spec in &phase.classes {
            let mean = match (&spec.mean, spec.mean_norm) {
                (Some(m), None) => Array1::from_vec(m.clone()),
                (None, Some(norm)) => unit_vector(&mut mean_rng, d) * norm,
                _ => unreachable!("validated"),
            };
            classes.push(GaussianClass {
                mean,
                sigma: spec.sigma,
                prior: spec.prior.unwrap_or(default_prior),
                class_id: spec.id,
                phase_id: pi as u32 + 1,
            });
        }
    }

    // Concept generator over the cumulative candidate stream.
    let total_candidates: usize = cfg.concepts.per_phase.iter().sum();
    let mut gen_rng =
        ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 0, streams::SCENARIO_GENERATOR));
    let mut functionals = Matrix::zeros((total_candidates, d));
    let scale = 1.0 / (d as Real).sqrt();
    for v in functionals.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut gen_rng);
        *v = z * scale;
    }
    let generator = ConceptGenerator {
        functionals,
        snr_db: cfg.concepts.snr_db,
        seed: cfg.seed,
    };

    // Candidates: unit text embeddings; a configured fraction duplicates an
    // earlier candidate's embedding (and functional) to exercise the
    // redundancy filter.
    let mut cand_rng =
        ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 0, streams::SCENARIO_CANDIDATES));
    let e_dim = cfg.concepts.embedding_dim;
    let mut all_candidates: Vec<Vec<Candidate>> = Vec::new();
    let mut generator = generator;
    let mut global = 0usize;
    for &count in cfg.concepts.per_phase.iter() {
        let mut batch = Vec::with_capacity(count);
        for _ in 0..count {
            let dup_from = if global > 0 && cfg.concepts.duplicate_fraction > 0.0 {
                let roll: Real = cand_rng.random();
                (roll < cfg.concepts.duplicate_fraction)
                    .then(|| cand_rng.random_range(0..global))
            } else {
                None
            };
            let (text, embedding) = match dup_from {
                Some(src) => {
                    let original: &Candidate = all_candidates
                        .iter()
                        .flatten()
                        .chain(batch.iter())
                        .nth(src)
                        .expect("source index in range");
                    let row = generator.functionals.row(src).to_owned();
                    generator.functionals.row_mut(global).assign(&row);
                    (
                        format!("{} (restated)", original.text),
                        original.embedding.clone(),
                    )
                }
                None => (
                    format!("synthetic concept {global}"),
                    unit_vector(&mut cand_rng, e_dim),
                ),
            };
            batch.push(Candidate {
                text,
                embedding,
                embedding_alt: None,
                source_index: global,
            });
            global += 1;
        }
        all_candidates.push(batch);
    }

    // Class-name embeddings: random unit vectors in the same text space.
    let mut class_emb_rng =
        ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 0, streams::SCENARIO_CANDIDATES ^ 0xffff));

    // Per-phase datasets.
    let mut phases = Vec::new();
    for (pi, phase) in cfg.phases.iter().enumerate() {
        let phase_id = pi as u32 + 1;
        let mut train_rows = Vec::new();
        let mut train_labels = Vec::new();
        let mut test_rows = Vec::new();
        let mut test_labels = Vec::new();
        let mut class_embeddings = Vec::new();
        let mut class_list = Vec::new();
        for spec in &phase.classes {
            let model = classes
                .iter()
                .find(|c| c.class_id == spec.id)
                .expect("class registered");
            let train_seed = sub_seed(cfg.seed, phase_id, streams::SCENARIO_SAMPLES ^ (spec.id as u64) << 1);
            let test_seed = sub_seed(cfg.seed, phase_id, streams::SCENARIO_SAMPLES ^ ((spec.id as u64) << 1 | 1));
            train_rows.push(sample_rows(&model.mean, model.sigma, cfg.train_per_class, train_seed));
            train_labels.extend(std::iter::repeat_n(spec.id, cfg.train_per_class));
            test_rows.push(sample_rows(&model.mean, model.sigma, cfg.test_per_class, test_seed));
            test_labels.extend(std::iter::repeat_n(spec.id, cfg.test_per_class));
            let name = spec
                .name
                .clone()
                .unwrap_or_else(|| format!("class-{}", spec.id));
            class_embeddings.push(ClassNameEmbedding {
                name: name.clone(),
                embedding: unit_vector(&mut class_emb_rng, e_dim),
                embedding_alt: None,
            });
            class_list.push((spec.id, name));
        }
        let stack = |rows: Vec<Matrix>| -> Matrix {
            let total: usize = rows.iter().map(|r| r.nrows()).sum();
            let mut m = Matrix::zeros((total, d));
            let mut at = 0;
            for r in rows {
                m.slice_mut(ndarray::s![at..at + r.nrows(), ..]).assign(&r);
                at += r.nrows();
            }
            m
        };
        phases.push(ScenarioPhase {
            phase_id,
            classes: class_list,
            train: FeatureMatrix::new(stack(train_rows), train_labels, phase_id, Split::Train)?,
            test: FeatureMatrix::new(stack(test_rows), test_labels, phase_id, Split::Test)?,
            candidates: all_candidates[pi].clone(),
            class_embeddings,
        });
    }
    Ok(Scenario {
        name: cfg.name.clone(),
        seed: cfg.seed,
        classes,
        phases,
        generator,
    })
}

// ---------------------------------------------------------------------------
// End-to-end synthetic runs
// ---------------------------------------------------------------------------

pub struct E2eOutcome {
    pub states: Vec<PhaseState>,
    pub reports: Vec<PhaseReport>,
    pub report: RunReport,
}

/// Drive the full pipeline over a sampled scenario in memory. Ablation
/// switches come in through the run configuration.
pub fn run_e2e_scenario(scenario: &Scenario, cfg: &RunConfig) -> Result<E2eOutcome> {
    cfg.validate()?;
    let mut prev: Option<PhaseState> = None;
    let mut states: Vec<PhaseState> = Vec::new();
    let mut reports = Vec::new();
    for phase in &scenario.phases {
        let inputs = PhaseInputs {
            phase_id: phase.phase_id,
            classes: phase.classes.clone(),
            train: phase.train.clone(),
            candidates: phase.candidates.clone(),
            class_embeddings: phase.class_embeddings.clone(),
        };
        let (mut state, mut report) = run_phase(
            prev.as_ref(),
            &inputs,
            |concepts| {
                scenario.generator.activations_for_set(
                    &phase.train.data,
                    concepts,
                    sub_seed(scenario.seed, phase.phase_id, streams::SCENARIO_NOISE),
                )
            },
            cfg,
        )?;
        let tests: Vec<FeatureMatrix> = scenario.phases[..phase.phase_id as usize]
            .iter()
            .map(|p| p.test.clone())
            .collect();
        let fidelity_ref = scenario.generator.activations_for_set(
            &phase.test.data,
            &state.concepts,
            sub_seed(scenario.seed, phase.phase_id, streams::SCENARIO_NOISE ^ 1),
        )?;
        let eval = evaluate_phase(
            &mut state,
            &tests,
            Some((fidelity_ref, "synthetic generator".into())),
        )?;
        report.evaluation = Some(eval);
        state.quantize_to_storage()?;
        reports.push(report);
        states.push(state.clone());
        prev = Some(state);
    }
    let final_state = states.last().expect("at least one phase");
    let report = RunReport {
        seed: cfg.seed,
        phases: reports.clone(),
        accuracy_matrix: final_state.accuracy.clone(),
        avg_incremental_accuracy: crate::metrics::avg_incremental_accuracy(&final_state.accuracy)?,
        avg_incremental_forgetting: (final_state.accuracy.phases() >= 2)
            .then(|| crate::metrics::avg_incremental_forgetting(&final_state.accuracy))
            .transpose()?,
        audit: None,
    };
    Ok(E2eOutcome {
        states,
        reports,
        report,
    })
}

/// Write a sampled scenario as a manifest directory consumable by the
/// file-based protocol. The per-phase activation files cover exactly the
/// concepts the filter accepts, so the filter is replayed here with the
/// same configuration the run will use.
pub fn materialize_scenario(scenario: &Scenario, dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut prev: Option<PhaseState> = None;
    for phase in &scenario.phases {
        let t = phase.phase_id;
        let inputs = PhaseInputs {
            phase_id: t,
            classes: phase.classes.clone(),
            train: phase.train.clone(),
            candidates: phase.candidates.clone(),
            class_embeddings: phase.class_embeddings.clone(),
        };
        let (state, _) = crate::protocol::stage_concepts_chain(prev.as_ref(), &inputs, cfg)?;

        let tag = format!("phase{t}");
        crate::matrixio::save_feature_matrix(&dir.join(format!("{tag}_train.cimb")), &phase.train)?;
        crate::matrixio::save_feature_matrix(&dir.join(format!("{tag}_test.cimb")), &phase.test)?;
        let train_acts = scenario.generator.activations_for_set(
            &phase.train.data,
            &state.concepts,
            sub_seed(scenario.seed, t, streams::SCENARIO_NOISE),
        )?;
        let test_acts = scenario.generator.activations_for_set(
            &phase.test.data,
            &state.concepts,
            sub_seed(scenario.seed, t, streams::SCENARIO_NOISE ^ 1),
        )?;
        crate::matrixio::write_matrix(&dir.join(format!("{tag}_train_act.cimb")), &train_acts)?;
        crate::matrixio::write_matrix(&dir.join(format!("{tag}_test_act.cimb")), &test_acts)?;

        let mut cand_text = String::new();
        for c in &phase.candidates {
            cand_text.push_str("[[candidate]]\n");
            cand_text.push_str(&format!("text = {:?}\n", c.text));
            let vals: Vec<String> = c.embedding.iter().map(|v| format!("{v:?}")).collect();
            cand_text.push_str(&format!("embedding = [{}]\n\n", vals.join(", ")));
        }
        std::fs::write(dir.join(format!("{tag}_candidates.toml")), cand_text)
            .map_err(|e| Error::io(dir.join(format!("{tag}_candidates.toml")), e))?;

        let mut emb_text = String::new();
        for c in &phase.class_embeddings {
            emb_text.push_str("[[class_name]]\n");
            emb_text.push_str(&format!("name = {:?}\n", c.name));
            let vals: Vec<String> = c.embedding.iter().map(|v| format!("{v:?}")).collect();
            emb_text.push_str(&format!("embedding = [{}]\n\n", vals.join(", ")));
        }
        std::fs::write(dir.join(format!("{tag}_classes.toml")), emb_text)
            .map_err(|e| Error::io(dir.join(format!("{tag}_classes.toml")), e))?;

        let ids: Vec<String> = phase.classes.iter().map(|(c, _)| c.to_string()).collect();
        let names: Vec<String> = phase
            .classes
            .iter()
            .map(|(_, n)| format!("{n:?}"))
            .collect();
        let manifest = format!(
            "phase_id = {t}\nclass_ids = [{}]\nclass_names = [{}]\n\
             train_features = \"{tag}_train.cimb\"\ntest_features = \"{tag}_test.cimb\"\n\
             train_activations = \"{tag}_train_act.cimb\"\ntest_activations = \"{tag}_test_act.cimb\"\n\
             concept_candidates = \"{tag}_candidates.toml\"\nclass_name_embeddings = \"{tag}_classes.toml\"\n",
            ids.join(", "),
            names.join(", ")
        );
        std::fs::write(dir.join(format!("phase{t}.toml")), manifest)
            .map_err(|e| Error::io(dir.join(format!("phase{t}.toml")), e))?;
        prev = Some(state);
    }
    Ok(())
}
