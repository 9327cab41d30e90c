//! Multi-phase training protocol: per-phase staging (concept expansion,
//! bottleneck training, predictor fitting), evaluation, persistence, resume,
//! and the exemplar-free artifact audit.
//!
//! The stages operate on in-memory inputs so the same engine drives both
//! manifest-directory runs and the self-contained synthetic scenarios. All
//! randomness derives from (seed, phase, stream) sub-seeds, so a run resumed
//! from a persisted phase reproduces an uninterrupted run byte for byte.

use crate::bottleneck::{
    distillation_similarity, expand_bottleneck, train_bottleneck, BottleneckWeights,
    DistillationCache,
};
use crate::concept::{
    expand, filter_candidates, Candidate, ClassNameEmbedding, ConceptSet, RejectReason,
};
use crate::config::{streams, sub_seed, RunConfig};
use crate::error::{Error, Result};
use crate::matrixio::{self, ActivationMatrix, FeatureMatrix, PhaseManifest, Split};
use crate::metrics::{
    accuracy, avg_incremental_accuracy, avg_incremental_forgetting, avg_phase_accuracy,
    avg_phase_forgetting, concept_fidelity, sparsity_report, weighted_avg_phase_accuracy,
    weighted_avg_phase_forgetting, FidelityReport,
};
use crate::pseudo::{
    compute_centroids, generate_pseudo_concepts_prototype_variant, generate_pseudo_features,
    nearest_new_class, CentroidEntry,
};
use crate::sparse::{
    expand_predictor, fit_sparse_predictor, freeze_old_rows_fit, lambda_search, predict,
    LambdaSearchReport, SampleSource, SparsePredictor, TrainingBatch,
};
use crate::state::{save_phase_state, ClassInfo, PhaseState, Stage, STATE_TENSOR_FILES};
use crate::{Matrix, Real};
use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

/// Everything one phase consumes, independent of where it came from.
#[derive(Debug, Clone)]
pub struct PhaseInputs {
    pub phase_id: u32,
    pub classes: Vec<(i32, String)>,
    pub train: FeatureMatrix,
    pub candidates: Vec<Candidate>,
    pub class_embeddings: Vec<ClassNameEmbedding>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConceptStageReport {
    pub candidates: usize,
    pub accepted: usize,
    pub rejected_too_long: usize,
    pub rejected_class_similar: usize,
    pub rejected_duplicate: usize,
    pub masked: usize,
    pub total_concepts: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BottleneckStageReport {
    pub steps: usize,
    pub initial_loss: Real,
    pub final_loss: Real,
    pub beta: Real,
    /// Mean cosine-cubed similarity to the cached previous outputs on old
    /// concepts, after training (phases >= 2 only).
    pub distillation_similarity: Option<Real>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PseudoClassReport {
    pub past_class: i32,
    pub donor_class: i32,
    pub rows: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct PredictorStageReport {
    pub lambda: Real,
    pub alpha: Real,
    pub iterations: usize,
    pub converged: bool,
    pub kkt_residual: Real,
    pub missing_classes: Vec<i32>,
    pub per_class_nonzeros: Vec<(i32, usize)>,
    pub sparsity_percent: Real,
    pub lambda_search: Option<LambdaSearchReport>,
    pub pseudo: Vec<PseudoClassReport>,
    /// Set when per-class row counts in the training batch are unequal.
    pub pseudo_imbalance: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub accuracy_row: Vec<Real>,
    pub avg_phase_accuracy: Real,
    pub weighted_avg_phase_accuracy: Real,
    pub avg_phase_forgetting: Option<Real>,
    pub weighted_avg_phase_forgetting: Option<Real>,
    pub fidelity: Option<FidelityReport>,
    /// Where the fidelity reference activations came from, when computed.
    pub fidelity_source: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PhaseReport {
    pub phase_id: u32,
    pub concepts: ConceptStageReport,
    pub bottleneck: BottleneckStageReport,
    pub predictor: PredictorStageReport,
    pub evaluation: Option<EvalReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub seed: u64,
    pub phases: Vec<PhaseReport>,
    pub accuracy_matrix: crate::metrics::AccuracyMatrix,
    pub avg_incremental_accuracy: Real,
    pub avg_incremental_forgetting: Option<Real>,
    pub audit: Option<AuditReport>,
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

fn check_phase_order(
    prev: Option<&PhaseState>,
    phase_id: u32,
    require_complete: bool,
) -> Result<()> {
    match prev {
        None if phase_id == 1 => Ok(()),
        None => Err(Error::Validation(format!(
            "phase {phase_id} started without a phase {} state",
            phase_id - 1
        ))),
        Some(p) if require_complete && p.stage != Stage::Complete => {
            Err(Error::Validation(format!(
                "previous phase {} is not complete (stage {:?})",
                p.phase_id, p.stage
            )))
        }
        Some(p) if p.phase_id + 1 != phase_id => Err(Error::Validation(format!(
            "phase {phase_id} cannot follow phase {}",
            p.phase_id
        ))),
        Some(_) => Ok(()),
    }
}

/// Filter this phase's candidates against the grown vocabulary and expand.
pub fn stage_concepts(
    prev: Option<&PhaseState>,
    inputs: &PhaseInputs,
    cfg: &RunConfig,
) -> Result<(PhaseState, ConceptStageReport)> {
    stage_concepts_impl(prev, inputs, cfg, true)
}

/// Concept progression only: chains concepts-stage states without requiring
/// completed phases in between. The scenario materializer uses this to
/// replay exactly the filter decisions a real run will make.
pub(crate) fn stage_concepts_chain(
    prev: Option<&PhaseState>,
    inputs: &PhaseInputs,
    cfg: &RunConfig,
) -> Result<(PhaseState, ConceptStageReport)> {
    stage_concepts_impl(prev, inputs, cfg, false)
}

fn stage_concepts_impl(
    prev: Option<&PhaseState>,
    inputs: &PhaseInputs,
    cfg: &RunConfig,
    require_complete: bool,
) -> Result<(PhaseState, ConceptStageReport)> {
    check_phase_order(prev, inputs.phase_id, require_complete)?;
    if inputs.classes.is_empty() {
        return Err(Error::Validation(format!(
            "phase {} declares no classes",
            inputs.phase_id
        )));
    }
    if inputs.class_embeddings.len() != inputs.classes.len() {
        return Err(Error::Validation(format!(
            "phase {}: {} class-name embeddings for {} classes",
            inputs.phase_id,
            inputs.class_embeddings.len(),
            inputs.classes.len()
        )));
    }
    if let Some(p) = prev {
        if p.feature_dim != inputs.train.feature_dim() {
            return Err(Error::Validation(format!(
                "phase {} features have dim {}, earlier phases used {}",
                inputs.phase_id,
                inputs.train.feature_dim(),
                p.feature_dim
            )));
        }
        for (c, _) in &inputs.classes {
            if let Some(existing) = p.classes.iter().find(|k| k.class_id == *c) {
                return Err(Error::Disjoint {
                    class_id: *c,
                    earlier_phase: existing.phase,
                    phase: inputs.phase_id,
                });
            }
        }
    }
    let declared: BTreeSet<i32> = inputs.classes.iter().map(|(c, _)| *c).collect();
    for &l in &inputs.train.labels {
        if !declared.contains(&l) {
            return Err(Error::Validation(format!(
                "phase {} training labels contain class {l}, which this phase does not declare",
                inputs.phase_id
            )));
        }
    }

    let empty = ConceptSet::new();
    let existing = prev.map(|p| &p.concepts).unwrap_or(&empty);
    let mut all_class_embeddings: Vec<ClassNameEmbedding> = prev
        .map(|p| p.class_embeddings.clone())
        .unwrap_or_default();
    all_class_embeddings.extend(inputs.class_embeddings.iter().cloned());

    let mut report = filter_candidates(
        &inputs.candidates,
        existing,
        &all_class_embeddings,
        &cfg.filter_params(),
    )?;
    let mut masked = 0usize;
    if cfg.mask_concepts_pct > 0.0 {
        let keep_prob = 1.0 - cfg.mask_concepts_pct / 100.0;
        let mut rng =
            ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, inputs.phase_id, streams::CONCEPT_MASK));
        let before = report.accepted.len();
        report.accepted.retain(|_| rng.random::<Real>() < keep_prob);
        masked = before - report.accepted.len();
    }
    let stats = |reason: RejectReason| {
        report
            .rejected
            .iter()
            .filter(|(_, r)| *r == reason)
            .count()
    };
    let concept_report = ConceptStageReport {
        candidates: inputs.candidates.len(),
        accepted: report.accepted.len(),
        rejected_too_long: stats(RejectReason::TooLong),
        rejected_class_similar: stats(RejectReason::ClassSimilar),
        rejected_duplicate: stats(RejectReason::Duplicate),
        masked,
        total_concepts: existing.len() + report.accepted.len(),
    };
    let concepts = expand(existing, &report, inputs.phase_id)?;
    if concepts.is_empty() {
        return Err(Error::Validation(format!(
            "phase {}: concept set is empty after filtering",
            inputs.phase_id
        )));
    }

    let mut classes: Vec<ClassInfo> = prev.map(|p| p.classes.clone()).unwrap_or_default();
    classes.extend(inputs.classes.iter().map(|(c, n)| ClassInfo {
        class_id: *c,
        name: n.clone(),
        phase: inputs.phase_id,
    }));
    let mut state = PhaseState {
        phase_id: inputs.phase_id,
        feature_dim: inputs.train.feature_dim(),
        stage: Stage::Concepts,
        concepts,
        classes,
        centroids: prev.map(|p| p.centroids.clone()).unwrap_or_default(),
        bottleneck: None,
        predictor: None,
        accuracy: prev.map(|p| p.accuracy.clone()).unwrap_or_default(),
        class_embeddings: all_class_embeddings,
    };
    // Stage boundaries round through storage precision so staged, monolithic,
    // and resumed runs agree bit for bit.
    state.quantize_to_storage()?;
    Ok((state, concept_report))
}

/// Train (or expand and train) the bottleneck and store this phase's
/// centroids, both in feature space and in the new concept space.
pub fn stage_bottleneck(
    state: &mut PhaseState,
    prev: Option<&PhaseState>,
    inputs: &PhaseInputs,
    activations: Matrix,
    cfg: &RunConfig,
) -> Result<BottleneckStageReport> {
    if state.stage != Stage::Concepts {
        return Err(Error::Validation(format!(
            "bottleneck stage expects a concepts-stage state, got {:?}",
            state.stage
        )));
    }
    let m = state.concepts.len();
    if activations.ncols() != m {
        return Err(Error::Validation(format!(
            "phase {}: activation matrix has {} columns, the concept set has {m}; \
             regenerate activations for the filtered vocabulary",
            state.phase_id,
            activations.ncols()
        )));
    }
    if activations.nrows() != inputs.train.samples() {
        return Err(Error::Shape(format!(
            "phase {}: {} activation rows for {} training rows",
            state.phase_id,
            activations.nrows(),
            inputs.train.samples()
        )));
    }
    let activations = ActivationMatrix::new(activations, (0..m).collect())?;
    let activations = activations.data;
    let init_seed = sub_seed(cfg.seed, state.phase_id, streams::BOTTLENECK_INIT);
    let (w_init, cache) = match prev {
        None => (
            BottleneckWeights::seeded_init(m, state.feature_dim, init_seed, 1),
            None,
        ),
        Some(p) => {
            let prev_b = p.bottleneck()?;
            let cache =
                DistillationCache::from_previous(prev_b, inputs.train.data.view(), cfg.std_eps)?;
            (
                expand_bottleneck(prev_b, m - prev_b.concept_count(), init_seed),
                Some(cache),
            )
        }
    };
    let train_cfg = cfg.train_config();
    let (w, trajectory) = train_bottleneck(
        &w_init,
        inputs.train.data.view(),
        activations.view(),
        cache.as_ref(),
        &train_cfg,
    )?;
    let dsim = cache
        .as_ref()
        .map(|c| distillation_similarity(&w, inputs.train.data.view(), c, cfg.std_eps))
        .transpose()?;

    // Centroids for this phase's classes, plus their concept-space
    // prototypes under the freshly trained bottleneck.
    let projected = w.project(inputs.train.data.view())?;
    let class_ids: Vec<i32> = inputs.classes.iter().map(|(c, _)| *c).collect();
    for (class_id, centroid, count) in compute_centroids(&inputs.train, &class_ids)? {
        let rows = inputs.train.rows_of(class_id);
        let mut concept_centroid = ndarray::Array1::<Real>::zeros(m);
        for &r in &rows {
            concept_centroid += &projected.row(r);
        }
        concept_centroid /= rows.len() as Real;
        state.centroids.insert_new(
            class_id,
            CentroidEntry {
                centroid,
                concept_centroid: Some(concept_centroid),
                sample_count: count,
                phase_introduced: state.phase_id,
            },
        )?;
    }
    let report = BottleneckStageReport {
        steps: train_cfg.steps,
        initial_loss: trajectory[0],
        final_loss: *trajectory.last().expect("nonempty trajectory"),
        beta: train_cfg.beta,
        distillation_similarity: dsim,
    };
    state.bottleneck = Some(w);
    state.stage = Stage::Bottleneck;
    state.quantize_to_storage()?;
    Ok(report)
}

/// Pseudo rows for every past class, produced from the current phase's
/// donor batches.
#[derive(Debug, Clone)]
pub struct PseudoPhaseOutput {
    /// (past class, donor class, pseudo features).
    pub features: Vec<(i32, i32, FeatureMatrix)>,
    /// (past class, pseudo concept rows) aligned with `features`.
    pub concepts: Vec<(i32, Matrix)>,
}

/// Generate pseudo-features and pseudo-concepts for all past classes using
/// the nearest new class as donor. Empty output in phase 1.
pub fn generate_pseudo_for_phase(
    state: &PhaseState,
    train: &FeatureMatrix,
    cfg: &RunConfig,
) -> Result<PseudoPhaseOutput> {
    let bottleneck = state.bottleneck()?;
    let t = state.phase_id;
    let past: Vec<i32> = state
        .classes
        .iter()
        .filter(|c| c.phase < t)
        .map(|c| c.class_id)
        .collect();
    let new: Vec<i32> = state
        .classes
        .iter()
        .filter(|c| c.phase == t)
        .map(|c| c.class_id)
        .collect();
    let mut out = PseudoPhaseOutput {
        features: Vec::new(),
        concepts: Vec::new(),
    };
    if past.is_empty() {
        return Ok(out);
    }
    let projected = bottleneck.project(train.data.view())?;
    for &cp in &past {
        let donor = nearest_new_class(cp, &state.centroids, &new)?;
        let rows = train.rows_of(donor);
        let donor_features = train.data.select(Axis(0), &rows);
        if cfg.prototype_in_concept_space {
            let donor_concepts = projected.select(Axis(0), &rows);
            let donor_cc = state
                .centroids
                .require(donor)?
                .concept_centroid
                .clone()
                .ok_or_else(|| {
                    Error::Validation(format!("donor {donor} has no concept-space centroid"))
                })?;
            let pseudo_concepts = generate_pseudo_concepts_prototype_variant(
                cp,
                donor,
                donor_concepts.view(),
                donor_cc.view(),
                &state.centroids,
            )?;
            // Feature-space rows are still produced for export parity.
            let pseudo_features =
                generate_pseudo_features(cp, donor, donor_features.view(), &state.centroids, t)?;
            out.concepts.push((cp, pseudo_concepts));
            out.features.push((cp, donor, pseudo_features));
        } else {
            let pseudo_features =
                generate_pseudo_features(cp, donor, donor_features.view(), &state.centroids, t)?;
            let pseudo_concepts = bottleneck.project(pseudo_features.data.view())?;
            out.concepts.push((cp, pseudo_concepts));
            out.features.push((cp, donor, pseudo_features));
        }
    }
    Ok(out)
}

/// Assemble the mixed batch and fit the expanded sparse layer.
pub fn stage_predictor(
    state: &mut PhaseState,
    prev: Option<&PhaseState>,
    inputs: &PhaseInputs,
    cfg: &RunConfig,
) -> Result<PredictorStageReport> {
    if state.stage != Stage::Bottleneck {
        return Err(Error::Validation(format!(
            "predictor stage expects a bottleneck-stage state, got {:?}",
            state.stage
        )));
    }
    let bottleneck = state.bottleneck()?.clone();
    let m = state.concepts.len();
    let t = state.phase_id;
    let real_concepts = bottleneck.project(inputs.train.data.view())?;

    let mut pseudo_reports = Vec::new();
    let (mut rows, mut labels, mut source) = (Vec::new(), Vec::new(), Vec::new());
    if t >= 2 && cfg.pseudo_concepts {
        let pseudo = generate_pseudo_for_phase(state, &inputs.train, cfg)?;
        for ((cp, donor, feats), (_, concepts)) in
            pseudo.features.iter().zip(pseudo.concepts.iter())
        {
            pseudo_reports.push(PseudoClassReport {
                past_class: *cp,
                donor_class: *donor,
                rows: feats.samples(),
            });
            for row in concepts.rows() {
                rows.push(row.to_owned());
                labels.push(*cp);
                source.push(SampleSource::Pseudo);
            }
        }
    }
    for (i, row) in real_concepts.rows().into_iter().enumerate() {
        rows.push(row.to_owned());
        labels.push(inputs.train.labels[i]);
        source.push(SampleSource::Real);
    }
    let mut x = Matrix::zeros((rows.len(), m));
    for (i, r) in rows.iter().enumerate() {
        x.row_mut(i).assign(r);
    }
    let batch = TrainingBatch::new(x, labels, source)?;

    let class_ids = state.class_ids();
    let init = match prev {
        None => SparsePredictor::zeros(class_ids.clone(), m, 0.0, cfg.alpha),
        Some(p) => {
            let prev_pred = p.predictor()?;
            let new_ids: Vec<i32> = state
                .classes
                .iter()
                .filter(|c| c.phase == t)
                .map(|c| c.class_id)
                .collect();
            expand_predictor(prev_pred, &new_ids, m - prev_pred.concepts())?
        }
    };
    let old_classes = state.classes.iter().filter(|c| c.phase < t).count();
    let solver_cfg = cfg.solver_config();
    let frozen = if cfg.freeze_old { old_classes } else { 0 };

    let (pred, fit_report, search_report) = if cfg.dense {
        let (p, r) = if frozen > 0 {
            freeze_old_rows_fit(&batch, &init, 0.0, cfg.alpha, frozen, &solver_cfg)?
        } else {
            fit_sparse_predictor(&batch, &init, 0.0, cfg.alpha, &solver_cfg)?
        };
        (p, r, None)
    } else if let Some(lam) = cfg.lambda {
        let (p, r) = if frozen > 0 {
            freeze_old_rows_fit(&batch, &init, lam, cfg.alpha, frozen, &solver_cfg)?
        } else {
            fit_sparse_predictor(&batch, &init, lam, cfg.alpha, &solver_cfg)?
        };
        (p, r, None)
    } else {
        let mut search_cfg = solver_cfg.clone();
        search_cfg.frozen_classes = frozen;
        let (_, p, r, s) = lambda_search(&batch, &init, cfg.alpha, cfg.target_nnz, &search_cfg)?;
        (p, r, Some(s))
    };

    let sparsity = sparsity_report(&pred);
    let mut class_counts = std::collections::BTreeMap::<i32, usize>::new();
    for &l in &batch.labels {
        *class_counts.entry(l).or_insert(0) += 1;
    }
    let counts: Vec<usize> = class_counts.values().copied().collect();
    let imbalance = counts.iter().max() != counts.iter().min();
    let report = PredictorStageReport {
        lambda: pred.lambda,
        alpha: pred.alpha,
        iterations: fit_report.iterations,
        converged: fit_report.converged,
        kkt_residual: fit_report.kkt_residual,
        missing_classes: fit_report.missing_classes.clone(),
        per_class_nonzeros: sparsity.per_class.clone(),
        sparsity_percent: sparsity.percent,
        lambda_search: search_report,
        pseudo: pseudo_reports,
        pseudo_imbalance: imbalance,
    };
    state.predictor = Some(pred);
    state.stage = Stage::Complete;
    state.quantize_to_storage()?;
    Ok(report)
}

/// One complete phase: concepts, bottleneck, predictor.
pub fn run_phase(
    prev: Option<&PhaseState>,
    inputs: &PhaseInputs,
    activations: impl FnOnce(&ConceptSet) -> Result<Matrix>,
    cfg: &RunConfig,
) -> Result<(PhaseState, PhaseReport)> {
    let (mut state, concept_report) = stage_concepts(prev, inputs, cfg)?;
    let acts = activations(&state.concepts)?;
    let bottleneck_report = stage_bottleneck(&mut state, prev, inputs, acts, cfg)?;
    let predictor_report = stage_predictor(&mut state, prev, inputs, cfg)?;
    let report = PhaseReport {
        phase_id: inputs.phase_id,
        concepts: concept_report,
        bottleneck: bottleneck_report,
        predictor: predictor_report,
        evaluation: None,
    };
    Ok((state, report))
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Accuracy on each phase's test split under the current model.
pub fn compute_accuracy_row(state: &PhaseState, tests: &[FeatureMatrix]) -> Result<Vec<Real>> {
    if tests.len() != state.phase_id as usize {
        return Err(Error::Validation(format!(
            "phase {} evaluation needs {} test splits, got {}",
            state.phase_id,
            state.phase_id,
            tests.len()
        )));
    }
    let bottleneck = state.bottleneck()?;
    let predictor = state.predictor()?;
    let mut row = Vec::with_capacity(tests.len());
    for test in tests {
        let projected = bottleneck.project(test.data.view())?;
        let (labels, _) = predict(predictor, projected.view())?;
        row.push(accuracy(&labels, &test.labels)?);
    }
    Ok(row)
}

/// Evaluate after a completed phase, appending the accuracy row.
pub fn evaluate_phase(
    state: &mut PhaseState,
    tests: &[FeatureMatrix],
    fidelity_reference: Option<(Matrix, String)>,
) -> Result<EvalReport> {
    let t = state.phase_id as usize;
    if state.accuracy.phases() != t - 1 {
        return Err(Error::Validation(format!(
            "phase {t} already evaluated ({} rows recorded)",
            state.accuracy.phases()
        )));
    }
    let row = compute_accuracy_row(state, tests)?;
    let class_count = state
        .classes
        .iter()
        .filter(|c| c.phase == state.phase_id)
        .count();
    state.accuracy.push_phase(row.clone(), class_count)?;

    let (fidelity, fidelity_source) = match fidelity_reference {
        Some((reference, source)) => {
            let current_test = tests.last().expect("at least one split");
            if reference.nrows() != current_test.samples()
                || reference.ncols() != state.concepts.len()
            {
                (None, Some(format!(
                    "{source} (skipped: reference is {}x{}, expected {}x{})",
                    reference.nrows(),
                    reference.ncols(),
                    current_test.samples(),
                    state.concepts.len()
                )))
            } else {
                let units = state.bottleneck()?.project(current_test.data.view())?;
                let report = concept_fidelity(
                    units.view(),
                    reference.view(),
                    state.concepts.embedding_matrix().view(),
                )?;
                (Some(report), Some(source))
            }
        }
        None => (None, None),
    };

    Ok(EvalReport {
        accuracy_row: row,
        avg_phase_accuracy: avg_phase_accuracy(&state.accuracy, t)?,
        weighted_avg_phase_accuracy: weighted_avg_phase_accuracy(&state.accuracy, t)?,
        avg_phase_forgetting: (t >= 2)
            .then(|| avg_phase_forgetting(&state.accuracy, t))
            .transpose()?,
        weighted_avg_phase_forgetting: (t >= 2)
            .then(|| weighted_avg_phase_forgetting(&state.accuracy, t))
            .transpose()?,
        fidelity,
        fidelity_source,
    })
}

// ---------------------------------------------------------------------------
// Exemplar-free audit
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct AuditEntry {
    pub path: String,
    pub kind: String,
    pub allowed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub entries: Vec<AuditEntry>,
    pub clean: bool,
}

fn classify_state_file(name: &str) -> (&'static str, bool) {
    match name {
        "state.toml" => ("state-metadata", true),
        "report.toml" => ("phase-report", true),
        "bottleneck.cimb" => ("bottleneck-weights", true),
        "predictor_weights.cimb" | "predictor_bias.cimb" => ("predictor", true),
        "centroids.cimb" | "centroids_concept.cimb" => ("class-centroids", true),
        "concept_embeddings.cimb" | "concept_embeddings_alt.cimb" => ("concept-embeddings", true),
        "class_name_embeddings.cimb" | "class_name_embeddings_alt.cimb" => {
            ("class-name-embeddings", true)
        }
        _ => ("unexpected-artifact", false),
    }
}

/// List every artifact persisted under the output directory and verify that
/// nothing beyond the allowed summaries (weights, centroids, embeddings,
/// metadata) survives a phase. Raw or pseudo feature tensors anywhere in the
/// state tree fail the audit.
pub fn audit_state_dir(out_dir: &Path) -> Result<AuditReport> {
    debug_assert!(STATE_TENSOR_FILES
        .iter()
        .all(|f| classify_state_file(f).1));
    let mut entries = Vec::new();
    let mut stack = vec![out_dir.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let mut children: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        children.sort();
        for child in children {
            let rel = child
                .strip_prefix(out_dir)
                .unwrap_or(&child)
                .to_string_lossy()
                .into_owned();
            if child.is_dir() {
                let name = child.file_name().unwrap_or_default().to_string_lossy();
                if name.starts_with("phase_") {
                    stack.push(child);
                } else {
                    entries.push(AuditEntry {
                        path: rel,
                        kind: "unexpected-directory".into(),
                        allowed: false,
                    });
                }
                continue;
            }
            let name = child
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            let in_phase_dir = child
                .parent()
                .and_then(|p| p.file_name())
                .map(|n| n.to_string_lossy().starts_with("phase_"))
                .unwrap_or(false);
            let (kind, allowed) = if in_phase_dir {
                classify_state_file(&name)
            } else if name == "run_report.toml" {
                ("run-report", true)
            } else {
                ("unexpected-artifact", false)
            };
            entries.push(AuditEntry {
                path: rel,
                kind: kind.into(),
                allowed,
            });
        }
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    let clean = entries.iter().all(|e| e.allowed);
    Ok(AuditReport { entries, clean })
}

// ---------------------------------------------------------------------------
// Manifest-driven protocol
// ---------------------------------------------------------------------------

pub fn phase_dir_name(phase_id: u32) -> String {
    format!("phase_{phase_id:03}")
}

/// Load one phase's inputs from its manifest. `candidate_base` is the count
/// of candidates declared by earlier phases.
pub fn load_phase_inputs(manifest: &PhaseManifest, candidate_base: usize) -> Result<PhaseInputs> {
    let train = matrixio::load_feature_matrix(
        &manifest.train_features,
        manifest.phase_id,
        Split::Train,
    )?;
    let declared: BTreeSet<i32> = manifest.class_ids.iter().copied().collect();
    train.validate_labels(&declared)?;
    let candidates = crate::concept::load_candidates(&manifest.concept_candidates, candidate_base)?;
    let class_embeddings =
        crate::concept::load_class_name_embeddings(&manifest.class_name_embeddings)?;
    let names: Vec<&str> = class_embeddings.iter().map(|c| c.name.as_str()).collect();
    let expected: Vec<&str> = manifest.class_names.iter().map(|s| s.as_str()).collect();
    if names != expected {
        return Err(Error::Validation(format!(
            "{}: class-name embedding names {names:?} do not match the manifest {expected:?}",
            manifest.class_name_embeddings.display()
        )));
    }
    Ok(PhaseInputs {
        phase_id: manifest.phase_id,
        classes: manifest
            .class_ids
            .iter()
            .copied()
            .zip(manifest.class_names.iter().cloned())
            .collect(),
        train,
        candidates,
        class_embeddings,
    })
}

fn load_test_split(manifest: &PhaseManifest) -> Result<FeatureMatrix> {
    let test =
        matrixio::load_feature_matrix(&manifest.test_features, manifest.phase_id, Split::Test)?;
    let declared: BTreeSet<i32> = manifest.class_ids.iter().copied().collect();
    test.validate_labels(&declared)?;
    Ok(test)
}

pub struct ProtocolOutcome {
    pub final_state: PhaseState,
    pub report: RunReport,
}

/// Run the full protocol over a manifest directory, persisting one state per
/// phase under `out_dir` and auditing the persisted artifacts after every
/// phase. With `resume`, completed phases found in `out_dir` are reused and
/// later phases reproduce an uninterrupted run exactly.
pub fn run_protocol(
    manifest_dir: &Path,
    out_dir: &Path,
    cfg: &RunConfig,
    resume: bool,
) -> Result<ProtocolOutcome> {
    cfg.validate()?;
    let manifests = matrixio::load_manifest_dir(manifest_dir)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut prev: Option<PhaseState> = None;
    let mut phase_reports: Vec<PhaseReport> = Vec::new();
    let mut start_phase = 1u32;
    if resume {
        for m in &manifests {
            let dir = out_dir.join(phase_dir_name(m.phase_id));
            if dir.join("state.toml").exists() {
                let state = crate::state::load_phase_state(&dir)?;
                if state.stage == Stage::Complete
                    && state.accuracy.phases() == state.phase_id as usize
                {
                    start_phase = m.phase_id + 1;
                    prev = Some(state);
                    continue;
                }
            }
            break;
        }
    }

    let mut candidate_base = 0usize;
    for m in &manifests {
        if m.phase_id >= start_phase {
            break;
        }
        candidate_base += crate::concept::load_candidates(&m.concept_candidates, 0)?.len();
    }

    for manifest in &manifests {
        let t = manifest.phase_id;
        if t < start_phase {
            continue;
        }
        let inputs = load_phase_inputs(manifest, candidate_base)?;
        candidate_base += inputs.candidates.len();
        let n_train = inputs.train.samples();
        let acts_path = manifest.train_activations.clone();
        let (mut state, mut report) = run_phase(
            prev.as_ref(),
            &inputs,
            move |concepts| {
                let m = matrixio::read_matrix(&acts_path)?;
                if m.nrows() != n_train || m.ncols() != concepts.len() {
                    return Err(Error::Validation(format!(
                        "{}: activations are {}x{}, expected {}x{} for the filtered vocabulary",
                        acts_path.display(),
                        m.nrows(),
                        m.ncols(),
                        n_train,
                        concepts.len()
                    )));
                }
                Ok(m)
            },
            cfg,
        )?;
        let tests: Result<Vec<FeatureMatrix>> = manifests
            .iter()
            .filter(|m| m.phase_id <= t)
            .map(load_test_split)
            .collect();
        let tests = tests?;
        let fidelity_ref = {
            let reference = matrixio::read_matrix(&manifest.test_activations)?;
            Some((
                reference,
                manifest.test_activations.display().to_string(),
            ))
        };
        let eval = evaluate_phase(&mut state, &tests, fidelity_ref)?;
        report.evaluation = Some(eval);

        state.quantize_to_storage()?;
        let dir = out_dir.join(phase_dir_name(t));
        save_phase_state(&state, &dir)?;
        let report_text = toml::to_string_pretty(&report).map_err(|e| Error::Format {
            path: dir.join("report.toml"),
            detail: e.to_string(),
        })?;
        std::fs::write(dir.join("report.toml"), report_text)
            .map_err(|e| Error::io(dir.join("report.toml"), e))?;

        let audit = audit_state_dir(out_dir)?;
        if !audit.clean {
            let bad: Vec<&str> = audit
                .entries
                .iter()
                .filter(|e| !e.allowed)
                .map(|e| e.path.as_str())
                .collect();
            return Err(Error::Validation(format!(
                "exemplar-free audit failed after phase {t}: unexpected artifacts {bad:?}"
            )));
        }
        phase_reports.push(report);
        prev = Some(state);
    }

    let final_state = prev.ok_or_else(|| Error::Validation("no phases were run".into()))?;
    let audit = audit_state_dir(out_dir)?;
    let report = RunReport {
        seed: cfg.seed,
        phases: phase_reports,
        accuracy_matrix: final_state.accuracy.clone(),
        avg_incremental_accuracy: avg_incremental_accuracy(&final_state.accuracy)?,
        avg_incremental_forgetting: (final_state.accuracy.phases() >= 2)
            .then(|| avg_incremental_forgetting(&final_state.accuracy))
            .transpose()?,
        audit: Some(audit),
    };
    let text = toml::to_string_pretty(&report).map_err(|e| Error::Format {
        path: out_dir.join("run_report.toml"),
        detail: e.to_string(),
    })?;
    std::fs::write(out_dir.join("run_report.toml"), text)
        .map_err(|e| Error::io(out_dir.join("run_report.toml"), e))?;
    Ok(ProtocolOutcome {
        final_state,
        report,
    })
}

/// Thread count requested through the CICBM_THREADS environment variable.
pub fn thread_count_from_env() -> Option<usize> {
    std::env::var("CICBM_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
}
