//! Growing concept vocabulary with the three-stage candidate filter.
//!
//! Candidates pass a length filter, a similarity filter against seen class
//! names, then a redundancy filter against existing concepts and earlier
//! accepted candidates from the same batch. The set itself is append-only:
//! once a concept has an index it keeps it forever.

use crate::error::{Error, Result};
use crate::Real;
use ndarray::{Array1, Array2, ArrayView1};
use serde::Deserialize;
use std::path::Path;

/// Default length filter: candidates longer than this many characters drop.
pub const DEFAULT_MAX_LEN: usize = 30;
/// Default similarity ceiling against any seen class name.
pub const DEFAULT_CLASS_SIM_THRESHOLD: Real = 0.85;
/// Default similarity ceiling against any existing or earlier-accepted concept.
pub const DEFAULT_DEDUP_THRESHOLD: Real = 0.9;

const UNIT_NORM_TOL: Real = 1e-6;

/// A concept candidate: text plus unit-norm embedding(s). When a second
/// embedding space is supplied, similarity filters reject on either space.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub text: String,
    pub embedding: Array1<Real>,
    pub embedding_alt: Option<Array1<Real>>,
    /// Position of this candidate in the cumulative candidate stream across
    /// phases. Carried into the accepted concept for provenance.
    pub source_index: usize,
}

/// A seen class name with its unit-norm embedding(s).
#[derive(Debug, Clone)]
pub struct ClassNameEmbedding {
    pub name: String,
    pub embedding: Array1<Real>,
    pub embedding_alt: Option<Array1<Real>>,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    TooLong,
    ClassSimilar,
    Duplicate,
}

#[derive(Debug, Clone)]
pub struct FilterParams {
    pub max_len: usize,
    pub class_sim_threshold: Real,
    pub dedup_threshold: Real,
}

impl Default for FilterParams {
    fn default() -> Self {
        FilterParams {
            max_len: DEFAULT_MAX_LEN,
            class_sim_threshold: DEFAULT_CLASS_SIM_THRESHOLD,
            dedup_threshold: DEFAULT_DEDUP_THRESHOLD,
        }
    }
}

/// Outcome of filtering one candidate batch against a concept set.
/// `accepted` and `rejected` together are the input batch in order; the
/// reason on each reject is the first failing rule.
#[derive(Debug, Clone)]
pub struct FilterReport {
    pub accepted: Vec<Candidate>,
    pub rejected: Vec<(Candidate, RejectReason)>,
    base_fingerprint: SetFingerprint,
}

/// One stable entry of the vocabulary. `id` equals its position in the set.
#[derive(Debug, Clone)]
pub struct ConceptEntry {
    pub id: usize,
    pub text: String,
    pub introduced_phase: u32,
    pub source_index: usize,
}

/// Ordered, append-only concept vocabulary with per-phase counts.
#[derive(Debug, Clone, Default)]
pub struct ConceptSet {
    entries: Vec<ConceptEntry>,
    embeddings: Vec<Array1<Real>>,
    embeddings_alt: Option<Vec<Array1<Real>>>,
    per_phase_counts: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct SetFingerprint {
    len: usize,
    text_hash: u64,
}

fn fnv64(texts: impl Iterator<Item = impl AsRef<str>>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in texts {
        for b in t.as_ref().as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn check_unit(context: &str, v: ArrayView1<Real>) -> Result<()> {
    let norm = v.dot(&v).sqrt();
    if (norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::Validation(format!(
            "{context}: embedding norm {norm} is not unit within {UNIT_NORM_TOL}"
        )));
    }
    Ok(())
}

fn cosine_unit(a: ArrayView1<Real>, b: ArrayView1<Real>) -> Real {
    // Both sides are unit-norm by contract.
    a.dot(&b)
}

impl ConceptSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ConceptEntry] {
        &self.entries
    }

    pub fn entry(&self, id: usize) -> Option<&ConceptEntry> {
        self.entries.get(id)
    }

    pub fn embedding(&self, id: usize) -> ArrayView1<'_, Real> {
        self.embeddings[id].view()
    }

    pub fn has_alt_space(&self) -> bool {
        self.embeddings_alt.is_some()
    }

    /// Number of phases this set has been expanded through.
    pub fn phases(&self) -> usize {
        self.per_phase_counts.len()
    }

    /// Embeddings stacked as an M x e matrix (empty set gives 0 x 0).
    pub fn embedding_matrix(&self) -> Array2<Real> {
        stack_rows(&self.embeddings)
    }

    pub fn embedding_matrix_alt(&self) -> Option<Array2<Real>> {
        self.embeddings_alt.as_ref().map(|v| stack_rows(v))
    }

    /// Rebuild a set from persisted parts.
    pub fn from_parts(
        entries: Vec<ConceptEntry>,
        embeddings: Array2<Real>,
        embeddings_alt: Option<Array2<Real>>,
        per_phase_counts: Vec<usize>,
    ) -> Result<Self> {
        if embeddings.nrows() != entries.len() {
            return Err(Error::Shape(format!(
                "{} embeddings for {} concept entries",
                embeddings.nrows(),
                entries.len()
            )));
        }
        if let Some(alt) = &embeddings_alt {
            if alt.nrows() != entries.len() {
                return Err(Error::Shape(format!(
                    "{} alt embeddings for {} concept entries",
                    alt.nrows(),
                    entries.len()
                )));
            }
        }
        if per_phase_counts.last().copied().unwrap_or(0) != entries.len()
            || per_phase_counts.windows(2).any(|w| w[0] > w[1])
        {
            return Err(Error::Validation(format!(
                "per-phase counts {per_phase_counts:?} inconsistent with {} entries",
                entries.len()
            )));
        }
        for (i, e) in entries.iter().enumerate() {
            if e.id != i {
                return Err(Error::Validation(format!(
                    "concept entry {i} carries id {}",
                    e.id
                )));
            }
        }
        let rows = |m: &Array2<Real>| m.rows().into_iter().map(|r| r.to_owned()).collect();
        Ok(ConceptSet {
            entries,
            embeddings: rows(&embeddings),
            embeddings_alt: embeddings_alt.as_ref().map(rows),
            per_phase_counts,
        })
    }

    fn fingerprint(&self) -> SetFingerprint {
        SetFingerprint {
            len: self.entries.len(),
            text_hash: fnv64(self.entries.iter().map(|e| e.text.as_str())),
        }
    }

    /// Round every embedding through float32 storage precision, so the
    /// in-memory set matches what a save/load round trip produces.
    pub fn quantize_to_storage(&mut self) {
        for v in self.embeddings.iter_mut().flatten() {
            *v = *v as f32 as Real;
        }
        if let Some(alt) = &mut self.embeddings_alt {
            for v in alt.iter_mut().flatten() {
                *v = *v as f32 as Real;
            }
        }
    }
}

fn stack_rows(rows: &[Array1<Real>]) -> Array2<Real> {
    if rows.is_empty() {
        return Array2::zeros((0, 0));
    }
    let e = rows[0].len();
    let mut m = Array2::zeros((rows.len(), e));
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).assign(r);
    }
    m
}

/// Run the three-stage filter over a candidate batch.
///
/// Earlier accepted candidates count as existing for the redundancy check of
/// later ones, so the accepted set of a single call is itself deduplicated.
pub fn filter_candidates(
    candidates: &[Candidate],
    existing: &ConceptSet,
    class_names: &[ClassNameEmbedding],
    params: &FilterParams,
) -> Result<FilterReport> {
    if !(params.class_sim_threshold > 0.0 && params.class_sim_threshold <= 1.0)
        || !(params.dedup_threshold > 0.0 && params.dedup_threshold <= 1.0)
    {
        return Err(Error::Validation(format!(
            "similarity thresholds must lie in (0, 1], got class {} / dedup {}",
            params.class_sim_threshold, params.dedup_threshold
        )));
    }
    for c in candidates {
        check_unit(&format!("candidate {:?}", c.text), c.embedding.view())?;
        if let Some(alt) = &c.embedding_alt {
            check_unit(&format!("candidate {:?} (alt)", c.text), alt.view())?;
        }
        if existing.has_alt_space() && c.embedding_alt.is_none() {
            return Err(Error::Validation(format!(
                "candidate {:?} lacks the alternate embedding the set carries",
                c.text
            )));
        }
    }
    for cn in class_names {
        check_unit(&format!("class name {:?}", cn.name), cn.embedding.view())?;
        if let Some(alt) = &cn.embedding_alt {
            check_unit(&format!("class name {:?} (alt)", cn.name), alt.view())?;
        }
    }

    let mut accepted: Vec<Candidate> = Vec::new();
    let mut rejected = Vec::new();
    'next: for c in candidates {
        if c.text.chars().count() > params.max_len {
            rejected.push((c.clone(), RejectReason::TooLong));
            continue;
        }
        for cn in class_names {
            let mut sim = cosine_unit(c.embedding.view(), cn.embedding.view());
            if let (Some(a), Some(b)) = (&c.embedding_alt, &cn.embedding_alt) {
                sim = sim.max(cosine_unit(a.view(), b.view()));
            }
            if sim > params.class_sim_threshold {
                rejected.push((c.clone(), RejectReason::ClassSimilar));
                continue 'next;
            }
        }
        let dup = |emb: ArrayView1<Real>, alt: Option<&Array1<Real>>| -> bool {
            let mut sim = cosine_unit(c.embedding.view(), emb);
            if let (Some(a), Some(b)) = (&c.embedding_alt, alt) {
                sim = sim.max(cosine_unit(a.view(), b.view()));
            }
            sim > params.dedup_threshold
        };
        for id in 0..existing.len() {
            let alt = existing.embeddings_alt.as_ref().map(|v| &v[id]);
            if dup(existing.embeddings[id].view(), alt) {
                rejected.push((c.clone(), RejectReason::Duplicate));
                continue 'next;
            }
        }
        for a in &accepted {
            if dup(a.embedding.view(), a.embedding_alt.as_ref()) {
                rejected.push((c.clone(), RejectReason::Duplicate));
                continue 'next;
            }
        }
        accepted.push(c.clone());
    }
    Ok(FilterReport {
        accepted,
        rejected,
        base_fingerprint: existing.fingerprint(),
    })
}

/// Append a filter report's accepted candidates as phase `phase_id`.
///
/// The report must have been produced against exactly this set, and phases
/// are sequential; both are checked. Returns a new set, leaving the old
/// entries at their old indices.
pub fn expand(existing: &ConceptSet, report: &FilterReport, phase_id: u32) -> Result<ConceptSet> {
    if report.base_fingerprint != existing.fingerprint() {
        return Err(Error::StaleReport(format!(
            "report was built against a set of {} concepts, current set has {}",
            report.base_fingerprint.len,
            existing.len()
        )));
    }
    let expected_phase = existing.per_phase_counts.len() as u32 + 1;
    if phase_id != expected_phase {
        return Err(Error::Validation(format!(
            "expand called for phase {phase_id}, expected phase {expected_phase}"
        )));
    }
    if let Some(c) = report.accepted.iter().find(|c| {
        existing.has_alt_space() != c.embedding_alt.is_some() && !existing.is_empty()
    }) {
        return Err(Error::Validation(format!(
            "candidate {:?} embedding spaces do not match the set",
            c.text
        )));
    }
    let mut out = existing.clone();
    if out.is_empty() && out.embeddings_alt.is_none() {
        // First expansion decides whether the set carries an alternate space.
        if report.accepted.iter().any(|c| c.embedding_alt.is_some()) {
            out.embeddings_alt = Some(Vec::new());
        }
    }
    for c in &report.accepted {
        let id = out.entries.len();
        out.entries.push(ConceptEntry {
            id,
            text: c.text.clone(),
            introduced_phase: phase_id,
            source_index: c.source_index,
        });
        out.embeddings.push(c.embedding.clone());
        if let Some(alt) = &mut out.embeddings_alt {
            alt.push(c.embedding_alt.clone().ok_or_else(|| {
                Error::Validation(format!(
                    "candidate {:?} lacks the alternate embedding the set carries",
                    c.text
                ))
            })?);
        }
    }
    out.per_phase_counts.push(out.entries.len());
    Ok(out)
}

/// Per-phase concept counts M_1..M_T (nondecreasing by construction).
pub fn concept_growth_curve(set: &ConceptSet) -> Vec<usize> {
    set.per_phase_counts.clone()
}

// ---------------------------------------------------------------------------
// Candidate / class-embedding files
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct CandidateRecord {
    text: String,
    embedding: Vec<Real>,
    #[serde(default)]
    embedding_alt: Option<Vec<Real>>,
}

#[derive(Debug, Deserialize)]
struct CandidateFile {
    #[serde(default)]
    candidate: Vec<CandidateRecord>,
}

#[derive(Debug, Deserialize)]
struct ClassNameRecord {
    name: String,
    embedding: Vec<Real>,
    #[serde(default)]
    embedding_alt: Option<Vec<Real>>,
}

#[derive(Debug, Deserialize)]
struct ClassNameFile {
    #[serde(default)]
    class_name: Vec<ClassNameRecord>,
}

fn normalized(context: &str, v: Vec<Real>) -> Result<Array1<Real>> {
    let arr = Array1::from_vec(v);
    if arr.iter().any(|x| !x.is_finite()) {
        return Err(Error::Validation(format!(
            "{context}: embedding contains NaN/Inf"
        )));
    }
    let norm = arr.dot(&arr).sqrt();
    if norm <= 0.0 {
        return Err(Error::Validation(format!(
            "{context}: zero-norm embedding cannot be normalized"
        )));
    }
    Ok(arr / norm)
}

/// Load a candidate file, normalizing embeddings to unit norm on ingestion.
/// `index_base` is the number of candidates seen in earlier phases.
pub fn load_candidates(path: &Path, index_base: usize) -> Result<Vec<Candidate>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CandidateFile = toml::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    file.candidate
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(Candidate {
                embedding: normalized(&format!("{}: candidate {i}", path.display()), r.embedding)?,
                embedding_alt: r
                    .embedding_alt
                    .map(|v| normalized(&format!("{}: candidate {i} (alt)", path.display()), v))
                    .transpose()?,
                text: r.text,
                source_index: index_base + i,
            })
        })
        .collect()
}

/// Load class-name embeddings, normalizing on ingestion.
pub fn load_class_name_embeddings(path: &Path) -> Result<Vec<ClassNameEmbedding>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ClassNameFile = toml::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    file.class_name
        .into_iter()
        .map(|r| {
            Ok(ClassNameEmbedding {
                embedding: normalized(&format!("{}: class {:?}", path.display(), r.name), r.embedding)?,
                embedding_alt: r
                    .embedding_alt
                    .map(|v| normalized(&format!("{}: class {:?} (alt)", path.display(), r.name), v))
                    .transpose()?,
                name: r.name,
            })
        })
        .collect()
}
