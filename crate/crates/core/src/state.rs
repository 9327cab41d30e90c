//! Everything persisted between phases: concept set, bottleneck, predictor,
//! centroids, and the metric history.
//!
//! Metadata lives in `state.toml`; tensors live in `.cimb` files at float32
//! precision. The pipeline quantizes a state through storage precision when
//! a phase completes, so an uninterrupted run and a run resumed from disk
//! carry bit-identical state into the next phase.

use crate::bottleneck::BottleneckWeights;
use crate::concept::{ClassNameEmbedding, ConceptEntry, ConceptSet};
use crate::error::{Error, Result};
use crate::matrixio;
use crate::metrics::AccuracyMatrix;
use crate::pseudo::{CentroidEntry, CentroidStore};
use crate::sparse::SparsePredictor;
use crate::{Matrix, Real, Vector};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const STATE_SCHEMA_VERSION: u32 = 1;

/// How far through a phase a persisted state has progressed. Cross-phase
/// work requires the previous phase to be complete.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Concepts,
    Bottleneck,
    Complete,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassInfo {
    pub class_id: i32,
    pub name: String,
    pub phase: u32,
}

#[derive(Debug, Clone)]
pub struct PhaseState {
    pub phase_id: u32,
    pub feature_dim: usize,
    pub stage: Stage,
    pub concepts: ConceptSet,
    /// Seen classes in introduction order; predictor rows follow this order.
    pub classes: Vec<ClassInfo>,
    pub centroids: CentroidStore,
    pub bottleneck: Option<BottleneckWeights>,
    pub predictor: Option<SparsePredictor>,
    pub accuracy: AccuracyMatrix,
    /// Class-name embeddings of every seen class, for filtering later phases.
    pub class_embeddings: Vec<ClassNameEmbedding>,
}

impl PhaseState {
    pub fn class_ids(&self) -> Vec<i32> {
        self.classes.iter().map(|c| c.class_id).collect()
    }

    pub fn bottleneck(&self) -> Result<&BottleneckWeights> {
        self.bottleneck.as_ref().ok_or_else(|| {
            Error::Validation(format!(
                "phase {} state has no trained bottleneck (stage {:?})",
                self.phase_id, self.stage
            ))
        })
    }

    pub fn predictor(&self) -> Result<&SparsePredictor> {
        self.predictor.as_ref().ok_or_else(|| {
            Error::Validation(format!(
                "phase {} state has no fitted predictor (stage {:?})",
                self.phase_id, self.stage
            ))
        })
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.concepts.len();
        if let Some(b) = &self.bottleneck {
            if b.concept_count() != m {
                return Err(Error::Validation(format!(
                    "bottleneck has {} rows but the concept set has {m}",
                    b.concept_count()
                )));
            }
            if b.feature_dim() != self.feature_dim {
                return Err(Error::Validation(format!(
                    "bottleneck feature dim {} vs state feature dim {}",
                    b.feature_dim(),
                    self.feature_dim
                )));
            }
        }
        if let Some(p) = &self.predictor {
            if p.concepts() != m {
                return Err(Error::Validation(format!(
                    "predictor has {} concept columns but the concept set has {m}",
                    p.concepts()
                )));
            }
            if p.class_ids != self.class_ids() {
                return Err(Error::Validation(
                    "predictor class order disagrees with the state's class table".into(),
                ));
            }
        }
        if self.classes.len() != self.class_embeddings.len() {
            return Err(Error::Validation(format!(
                "{} classes but {} class-name embeddings",
                self.classes.len(),
                self.class_embeddings.len()
            )));
        }
        for c in &self.classes {
            if self.centroids.get(c.class_id).is_none() && c.phase < self.phase_id {
                return Err(Error::Validation(format!(
                    "class {} from phase {} has no stored centroid",
                    c.class_id, c.phase
                )));
            }
        }
        if self.stage == Stage::Complete
            && (self.bottleneck.is_none() || self.predictor.is_none())
        {
            return Err(Error::Validation(
                "complete state must carry a bottleneck and a predictor".into(),
            ));
        }
        Ok(())
    }

    /// Round every tensor through float32 storage precision in place, so
    /// the in-memory state equals what loading it back would give. Stages
    /// call this at their boundaries; it is idempotent.
    pub fn quantize_to_storage(&mut self) -> Result<()> {
        fn q(v: &mut Real) -> Result<()> {
            let cast = *v as f32;
            if !cast.is_finite() {
                return Err(Error::Validation(format!(
                    "value {v} not representable as finite float32"
                )));
            }
            *v = cast as Real;
            Ok(())
        }
        self.concepts.quantize_to_storage();
        for c in &mut self.class_embeddings {
            for v in c.embedding.iter_mut() {
                q(v)?;
            }
            if let Some(alt) = &mut c.embedding_alt {
                for v in alt.iter_mut() {
                    q(v)?;
                }
            }
        }
        if let Some(b) = &mut self.bottleneck {
            for v in b.weights.iter_mut() {
                q(v)?;
            }
        }
        if let Some(p) = &mut self.predictor {
            for v in p.weights.iter_mut() {
                q(v)?;
            }
            for v in p.bias.iter_mut() {
                q(v)?;
            }
        }
        let ids = self.centroids.class_ids();
        let mut quantized = CentroidStore::new();
        for id in ids {
            let mut e = self.centroids.get(id).expect("listed id").clone();
            for v in e.centroid.iter_mut() {
                q(v)?;
            }
            if let Some(cc) = &mut e.concept_centroid {
                for v in cc.iter_mut() {
                    q(v)?;
                }
            }
            quantized.insert_new(id, e)?;
        }
        self.centroids = quantized;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ConceptEntryMeta {
    text: String,
    introduced_phase: u32,
    source_index: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassMeta {
    class_id: i32,
    name: String,
    phase: u32,
    sample_count: usize,
    /// Length of the stored concept-space prototype (0 = none).
    concept_len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct StateMeta {
    schema_version: u32,
    phase_id: u32,
    feature_dim: usize,
    stage: Stage,
    per_phase_counts: Vec<usize>,
    has_alt_embeddings: bool,
    lambda: Real,
    alpha: Real,
    concepts: Vec<ConceptEntryMeta>,
    classes: Vec<ClassMeta>,
    accuracy: AccuracyMatrix,
}

const STATE_FILE: &str = "state.toml";
const BOTTLENECK_FILE: &str = "bottleneck.cimb";
const PREDICTOR_W_FILE: &str = "predictor_weights.cimb";
const PREDICTOR_B_FILE: &str = "predictor_bias.cimb";
const CENTROIDS_FILE: &str = "centroids.cimb";
const CONCEPT_CENTROIDS_FILE: &str = "centroids_concept.cimb";
const CONCEPT_EMB_FILE: &str = "concept_embeddings.cimb";
const CONCEPT_EMB_ALT_FILE: &str = "concept_embeddings_alt.cimb";
const CLASS_EMB_FILE: &str = "class_name_embeddings.cimb";
const CLASS_EMB_ALT_FILE: &str = "class_name_embeddings_alt.cimb";

/// Files a phase state may legitimately persist (tensor side).
pub const STATE_TENSOR_FILES: &[&str] = &[
    BOTTLENECK_FILE,
    PREDICTOR_W_FILE,
    PREDICTOR_B_FILE,
    CENTROIDS_FILE,
    CONCEPT_CENTROIDS_FILE,
    CONCEPT_EMB_FILE,
    CONCEPT_EMB_ALT_FILE,
    CLASS_EMB_FILE,
    CLASS_EMB_ALT_FILE,
];

fn stack_class_embeddings(embs: &[ClassNameEmbedding]) -> (Matrix, Option<Matrix>) {
    if embs.is_empty() {
        return (Array2::zeros((0, 0)), None);
    }
    let e = embs[0].embedding.len();
    let mut primary = Array2::zeros((embs.len(), e));
    for (i, c) in embs.iter().enumerate() {
        primary.row_mut(i).assign(&c.embedding);
    }
    let alt = embs[0].embedding_alt.as_ref().map(|first| {
        let mut m = Array2::zeros((embs.len(), first.len()));
        for (i, c) in embs.iter().enumerate() {
            m.row_mut(i)
                .assign(c.embedding_alt.as_ref().expect("all-or-none alt"));
        }
        m
    });
    (primary, alt)
}

/// Persist a state into a directory (created if needed).
pub fn save_phase_state(state: &PhaseState, dir: &Path) -> Result<()> {
    state.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (lambda, alpha) = state
        .predictor
        .as_ref()
        .map(|p| (p.lambda, p.alpha))
        .unwrap_or((0.0, 0.0));
    let meta = StateMeta {
        schema_version: STATE_SCHEMA_VERSION,
        phase_id: state.phase_id,
        feature_dim: state.feature_dim,
        stage: state.stage,
        per_phase_counts: crate::concept::concept_growth_curve(&state.concepts),
        has_alt_embeddings: state.concepts.has_alt_space(),
        lambda,
        alpha,
        concepts: state
            .concepts
            .entries()
            .iter()
            .map(|e| ConceptEntryMeta {
                text: e.text.clone(),
                introduced_phase: e.introduced_phase,
                source_index: e.source_index,
            })
            .collect(),
        classes: state
            .classes
            .iter()
            .map(|c| {
                let entry = state.centroids.get(c.class_id);
                ClassMeta {
                    class_id: c.class_id,
                    name: c.name.clone(),
                    phase: c.phase,
                    sample_count: entry.map(|e| e.sample_count).unwrap_or(0),
                    concept_len: entry
                        .and_then(|e| e.concept_centroid.as_ref())
                        .map(|v| v.len())
                        .unwrap_or(0),
                }
            })
            .collect(),
        accuracy: state.accuracy.clone(),
    };
    let text = toml::to_string_pretty(&meta).map_err(|e| Error::Format {
        path: dir.join(STATE_FILE),
        detail: e.to_string(),
    })?;
    std::fs::write(dir.join(STATE_FILE), text).map_err(|e| Error::io(dir.join(STATE_FILE), e))?;

    matrixio::write_matrix(&dir.join(CONCEPT_EMB_FILE), &state.concepts.embedding_matrix())?;
    if let Some(alt) = state.concepts.embedding_matrix_alt() {
        matrixio::write_matrix(&dir.join(CONCEPT_EMB_ALT_FILE), &alt)?;
    }
    let (class_emb, class_emb_alt) = stack_class_embeddings(&state.class_embeddings);
    matrixio::write_matrix(&dir.join(CLASS_EMB_FILE), &class_emb)?;
    if let Some(alt) = class_emb_alt {
        matrixio::write_matrix(&dir.join(CLASS_EMB_ALT_FILE), &alt)?;
    }
    if let Some(b) = &state.bottleneck {
        matrixio::write_matrix(&dir.join(BOTTLENECK_FILE), &b.weights)?;
    }
    if let Some(p) = &state.predictor {
        matrixio::write_matrix(&dir.join(PREDICTOR_W_FILE), &p.weights)?;
        matrixio::write_vector(&dir.join(PREDICTOR_B_FILE), &p.bias)?;
    }
    // Centroids in class-table order; concept prototypes zero-padded to the
    // current concept count with their true lengths in the metadata.
    let k = state.classes.len();
    let mut centroids = Array2::<Real>::zeros((k, state.feature_dim));
    let m = state.concepts.len();
    let mut concept_centroids = Array2::<Real>::zeros((k, m));
    for (i, c) in state.classes.iter().enumerate() {
        if let Some(e) = state.centroids.get(c.class_id) {
            centroids.row_mut(i).assign(&e.centroid);
            if let Some(cc) = &e.concept_centroid {
                concept_centroids
                    .row_mut(i)
                    .slice_mut(ndarray::s![..cc.len()])
                    .assign(cc);
            }
        }
    }
    matrixio::write_matrix(&dir.join(CENTROIDS_FILE), &centroids)?;
    matrixio::write_matrix(&dir.join(CONCEPT_CENTROIDS_FILE), &concept_centroids)?;
    Ok(())
}

/// Load a state directory, validating schema version and consistency.
pub fn load_phase_state(dir: &Path) -> Result<PhaseState> {
    let meta_path = dir.join(STATE_FILE);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: StateMeta = toml::from_str(&text).map_err(|e| Error::Format {
        path: meta_path.clone(),
        detail: e.to_string(),
    })?;
    if meta.schema_version > STATE_SCHEMA_VERSION {
        return Err(Error::Version {
            context: meta_path.display().to_string(),
            found: meta.schema_version,
            supported: STATE_SCHEMA_VERSION,
        });
    }
    let embeddings = matrixio::read_matrix(&dir.join(CONCEPT_EMB_FILE))?;
    let alt_path = dir.join(CONCEPT_EMB_ALT_FILE);
    let embeddings_alt = if meta.has_alt_embeddings {
        Some(matrixio::read_matrix(&alt_path)?)
    } else {
        None
    };
    let entries: Vec<ConceptEntry> = meta
        .concepts
        .iter()
        .enumerate()
        .map(|(id, e)| ConceptEntry {
            id,
            text: e.text.clone(),
            introduced_phase: e.introduced_phase,
            source_index: e.source_index,
        })
        .collect();
    let concepts = ConceptSet::from_parts(
        entries,
        embeddings,
        embeddings_alt,
        meta.per_phase_counts.clone(),
    )?;

    let class_emb = matrixio::read_matrix(&dir.join(CLASS_EMB_FILE))?;
    if class_emb.nrows() != meta.classes.len() {
        return Err(Error::Validation(format!(
            "{}: {} class embeddings for {} classes",
            dir.display(),
            class_emb.nrows(),
            meta.classes.len()
        )));
    }
    let class_emb_alt_path = dir.join(CLASS_EMB_ALT_FILE);
    let class_emb_alt = class_emb_alt_path
        .exists()
        .then(|| matrixio::read_matrix(&class_emb_alt_path))
        .transpose()?;
    let class_embeddings: Vec<ClassNameEmbedding> = meta
        .classes
        .iter()
        .enumerate()
        .map(|(i, c)| ClassNameEmbedding {
            name: c.name.clone(),
            embedding: class_emb.row(i).to_owned(),
            embedding_alt: class_emb_alt.as_ref().map(|m| m.row(i).to_owned()),
        })
        .collect();

    let bottleneck_path = dir.join(BOTTLENECK_FILE);
    let bottleneck = if meta.stage >= Stage::Bottleneck {
        Some(BottleneckWeights::new(
            matrixio::read_matrix(&bottleneck_path)?,
            meta.phase_id,
        )?)
    } else {
        None
    };
    let predictor = if meta.stage >= Stage::Complete {
        let weights = matrixio::read_matrix(&dir.join(PREDICTOR_W_FILE))?;
        let bias: Vector = matrixio::read_vector(&dir.join(PREDICTOR_B_FILE))?;
        Some(SparsePredictor {
            weights,
            bias,
            lambda: meta.lambda,
            alpha: meta.alpha,
            class_ids: meta.classes.iter().map(|c| c.class_id).collect(),
        })
    } else {
        None
    };

    let centroid_matrix = matrixio::read_matrix(&dir.join(CENTROIDS_FILE))?;
    let concept_centroid_matrix = matrixio::read_matrix(&dir.join(CONCEPT_CENTROIDS_FILE))?;
    let mut centroids = CentroidStore::new();
    for (i, c) in meta.classes.iter().enumerate() {
        if c.sample_count == 0 {
            continue;
        }
        let concept_centroid = (c.concept_len > 0).then(|| {
            concept_centroid_matrix
                .row(i)
                .slice(ndarray::s![..c.concept_len])
                .to_owned()
        });
        centroids.insert_new(
            c.class_id,
            CentroidEntry {
                centroid: centroid_matrix.row(i).to_owned(),
                concept_centroid,
                sample_count: c.sample_count,
                phase_introduced: c.phase,
            },
        )?;
    }

    let state = PhaseState {
        phase_id: meta.phase_id,
        feature_dim: meta.feature_dim,
        stage: meta.stage,
        concepts,
        classes: meta
            .classes
            .iter()
            .map(|c| ClassInfo {
                class_id: c.class_id,
                name: c.name.clone(),
                phase: c.phase,
            })
            .collect(),
        centroids,
        bottleneck,
        predictor,
        accuracy: meta.accuracy,
        class_embeddings,
    };
    state.validate()?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concept::{expand, filter_candidates, Candidate, FilterParams};
    use ndarray::{array, Array1};
    use tempfile::tempdir;

    fn toy_state() -> PhaseState {
        let cands: Vec<Candidate> = (0..3)
            .map(|i| {
                let mut e = Array1::<Real>::zeros(4);
                e[i] = 1.0;
                Candidate {
                    text: format!("c{i}"),
                    embedding: e,
                    embedding_alt: None,
                    source_index: i,
                }
            })
            .collect();
        let set = ConceptSet::new();
        let report = filter_candidates(&cands, &set, &[], &FilterParams::default()).unwrap();
        let concepts = expand(&set, &report, 1).unwrap();

        let mut centroids = CentroidStore::new();
        centroids
            .insert_new(
                0,
                CentroidEntry {
                    centroid: array![0.5, -0.25],
                    concept_centroid: Some(array![0.1, 0.2, 0.3]),
                    sample_count: 10,
                    phase_introduced: 1,
                },
            )
            .unwrap();
        centroids
            .insert_new(
                1,
                CentroidEntry {
                    centroid: array![-1.5, 2.25],
                    concept_centroid: Some(array![-0.1, 0.0, 0.4]),
                    sample_count: 12,
                    phase_introduced: 1,
                },
            )
            .unwrap();

        let mut accuracy = AccuracyMatrix::new();
        accuracy.push_phase(vec![0.9375], 2).unwrap();

        let mut predictor = SparsePredictor::zeros(vec![0, 1], 3, 0.125, 0.99);
        predictor.weights[[0, 1]] = 0.5;
        predictor.weights[[1, 2]] = -0.75;
        predictor.bias[0] = 0.25;

        PhaseState {
            phase_id: 1,
            feature_dim: 2,
            stage: Stage::Complete,
            concepts,
            classes: vec![
                ClassInfo {
                    class_id: 0,
                    name: "a".into(),
                    phase: 1,
                },
                ClassInfo {
                    class_id: 1,
                    name: "b".into(),
                    phase: 1,
                },
            ],
            centroids,
            bottleneck: Some(
                BottleneckWeights::new(array![[0.5, 0.5], [0.25, -0.25], [1.0, 0.0]], 1).unwrap(),
            ),
            predictor: Some(predictor),
            accuracy,
            class_embeddings: vec![
                ClassNameEmbedding {
                    name: "a".into(),
                    embedding: array![1.0, 0.0, 0.0, 0.0],
                    embedding_alt: None,
                },
                ClassNameEmbedding {
                    name: "b".into(),
                    embedding: array![0.0, 1.0, 0.0, 0.0],
                    embedding_alt: None,
                },
            ],
        }
    }

    #[test]
    fn state_round_trips_exactly() {
        let dir = tempdir().unwrap();
        let mut state = toy_state();
        state.quantize_to_storage().unwrap();
        save_phase_state(&state, dir.path()).unwrap();
        let loaded = load_phase_state(dir.path()).unwrap();
        assert_eq!(loaded.phase_id, state.phase_id);
        assert_eq!(loaded.stage, state.stage);
        assert_eq!(
            loaded.bottleneck.as_ref().unwrap().weights,
            state.bottleneck.as_ref().unwrap().weights
        );
        assert_eq!(
            loaded.predictor.as_ref().unwrap().weights,
            state.predictor.as_ref().unwrap().weights
        );
        assert_eq!(
            loaded.predictor.as_ref().unwrap().bias,
            state.predictor.as_ref().unwrap().bias
        );
        assert_eq!(loaded.accuracy, state.accuracy);
        assert_eq!(
            loaded.centroids.get(0).unwrap().centroid,
            state.centroids.get(0).unwrap().centroid
        );
        assert_eq!(
            loaded.centroids.get(1).unwrap().concept_centroid,
            state.centroids.get(1).unwrap().concept_centroid
        );
        assert_eq!(loaded.concepts.len(), 3);
        assert_eq!(loaded.concepts.entries()[2].text, "c2");
        // Saving the loaded state reproduces the exact bytes.
        let dir2 = tempdir().unwrap();
        save_phase_state(&loaded, dir2.path()).unwrap();
        for f in ["state.toml", BOTTLENECK_FILE, PREDICTOR_W_FILE, CENTROIDS_FILE] {
            assert_eq!(
                std::fs::read(dir.path().join(f)).unwrap(),
                std::fs::read(dir2.path().join(f)).unwrap(),
                "{f} differs"
            );
        }
    }

    #[test]
    fn inconsistent_predictor_width_is_rejected() {
        let dir = tempdir().unwrap();
        let mut state = toy_state();
        state.quantize_to_storage().unwrap();
        save_phase_state(&state, dir.path()).unwrap();
        // Overwrite the predictor weights with the wrong column count.
        matrixio::write_matrix(
            &dir.path().join(PREDICTOR_W_FILE),
            &Array2::<Real>::zeros((2, 5)),
        )
        .unwrap();
        assert!(matches!(
            load_phase_state(dir.path()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn newer_schema_version_is_rejected() {
        let dir = tempdir().unwrap();
        let mut state = toy_state();
        state.quantize_to_storage().unwrap();
        save_phase_state(&state, dir.path()).unwrap();
        let meta = std::fs::read_to_string(dir.path().join(STATE_FILE)).unwrap();
        let bumped = meta.replace("schema_version = 1", "schema_version = 2");
        std::fs::write(dir.path().join(STATE_FILE), bumped).unwrap();
        assert!(matches!(
            load_phase_state(dir.path()),
            Err(Error::Version { found: 2, .. })
        ));
    }

    #[test]
    fn quantization_is_idempotent() {
        let mut a = toy_state();
        a.quantize_to_storage().unwrap();
        let mut b = a.clone();
        b.quantize_to_storage().unwrap();
        assert_eq!(
            a.bottleneck.as_ref().unwrap().weights,
            b.bottleneck.as_ref().unwrap().weights
        );
        assert_eq!(
            a.predictor.as_ref().unwrap().weights,
            b.predictor.as_ref().unwrap().weights
        );
    }
}
