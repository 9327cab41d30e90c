//! Bit-exact persistence and ingestion for matrices, label vectors, and
//! phase manifests.
//!
//! Tensors use a fixed little-endian container: magic `CIMB`, a format
//! version byte, a dtype tag (1 = float32, 2 = int32), a u16 rank, `rank`
//! u64 dimensions, then the row-major payload. Identical input always
//! produces byte-identical files. Manifests are TOML.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::Real;
use ndarray::{Array1, Array2};
use serde::Deserialize;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

pub const MAGIC: &[u8; 4] = b"CIMB";
pub const FORMAT_VERSION: u8 = 1;

const DTYPE_F32: u8 = 1;
const DTYPE_I32: u8 = 2;

// ---------------------------------------------------------------------------
// Binary tensor container
// ---------------------------------------------------------------------------

/// A tensor read back from a `.cimb` file.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    MatF32(Array2<f32>),
    VecF32(Array1<f32>),
    MatI32(Array2<i32>),
    VecI32(Array1<i32>),
}

fn header(dtype: u8, dims: &[u64]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + 8 * dims.len());
    buf.extend_from_slice(MAGIC);
    buf.push(FORMAT_VERSION);
    buf.push(dtype);
    buf.extend_from_slice(&(dims.len() as u16).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    buf
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn check_finite_f32(path: &Path, values: impl IntoIterator<Item = f32>) -> Result<()> {
    for (i, v) in values.into_iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Validation(format!(
                "{}: non-finite value at element {i}",
                path.display()
            )));
        }
    }
    Ok(())
}

/// Write a rank-2 float32 tensor. The matrix must be finite.
pub fn write_matrix_f32(path: &Path, m: &Array2<f32>) -> Result<()> {
    check_finite_f32(path, m.iter().copied())?;
    let mut buf = header(DTYPE_F32, &[m.nrows() as u64, m.ncols() as u64]);
    for &v in m.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &buf)
}

/// Write a rank-1 float32 tensor.
pub fn write_vector_f32(path: &Path, v: &Array1<f32>) -> Result<()> {
    check_finite_f32(path, v.iter().copied())?;
    let mut buf = header(DTYPE_F32, &[v.len() as u64]);
    for &x in v.iter() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    write_file(path, &buf)
}

/// Write a rank-1 int32 tensor (label vectors).
pub fn write_vector_i32(path: &Path, v: &Array1<i32>) -> Result<()> {
    let mut buf = header(DTYPE_I32, &[v.len() as u64]);
    for &x in v.iter() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    write_file(path, &buf)
}

fn cast_storage<F: Scalar>(path: &Path, v: F) -> Result<f32> {
    let x = v.to_f32().unwrap_or(f32::NAN);
    if !x.is_finite() {
        return Err(Error::Validation(format!(
            "{}: value {v} not representable as finite float32",
            path.display()
        )));
    }
    Ok(x)
}

/// Write a matrix computed at working precision in the float32 storage format.
pub fn write_matrix<F: Scalar>(path: &Path, m: &Array2<F>) -> Result<()> {
    let mut cast = Array2::<f32>::zeros(m.raw_dim());
    for (dst, &src) in cast.iter_mut().zip(m.iter()) {
        *dst = cast_storage(path, src)?;
    }
    write_matrix_f32(path, &cast)
}

/// Write a vector computed at working precision in the float32 storage format.
pub fn write_vector<F: Scalar>(path: &Path, v: &Array1<F>) -> Result<()> {
    let mut cast = Array1::<f32>::zeros(v.len());
    for (dst, &src) in cast.iter_mut().zip(v.iter()) {
        *dst = cast_storage(path, src)?;
    }
    write_vector_f32(path, &cast)
}

/// Read any `.cimb` tensor, validating the header and the byte count.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 8 {
        return Err(fmt(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fmt(format!(
            "bad magic {:?}, expected {:?}",
            &bytes[0..4],
            MAGIC
        )));
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(fmt(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            bytes[4]
        )));
    }
    let dtype = bytes[5];
    if dtype != DTYPE_F32 && dtype != DTYPE_I32 {
        return Err(fmt(format!("unknown dtype tag {dtype}")));
    }
    let rank = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    if rank == 0 || rank > 2 {
        return Err(fmt(format!("unsupported rank {rank}")));
    }
    let dim_end = 8 + 8 * rank;
    if bytes.len() < dim_end {
        return Err(Error::Corruption {
            path: path.to_path_buf(),
            detail: format!("header truncated: {} bytes, need {dim_end}", bytes.len()),
        });
    }
    let mut dims = [0usize; 2];
    for r in 0..rank {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[8 + 8 * r..8 + 8 * (r + 1)]);
        let d = u64::from_le_bytes(b);
        dims[r] = usize::try_from(d)
            .map_err(|_| fmt(format!("dimension {d} does not fit in usize")))?;
    }
    let count: usize = dims[..rank].iter().product();
    let expected = dim_end + 4 * count;
    if bytes.len() != expected {
        return Err(Error::Corruption {
            path: path.to_path_buf(),
            detail: format!(
                "payload size mismatch: {} bytes on disk, header implies {expected}",
                bytes.len()
            ),
        });
    }
    let payload = &bytes[dim_end..];
    match dtype {
        DTYPE_F32 => {
            let mut data = Vec::with_capacity(count);
            for i in 0..count {
                let mut b = [0u8; 4];
                b.copy_from_slice(&payload[4 * i..4 * i + 4]);
                data.push(f32::from_le_bytes(b));
            }
            check_finite_f32(path, data.iter().copied())?;
            if rank == 2 {
                let m = Array2::from_shape_vec((dims[0], dims[1]), data)
                    .expect("shape checked against payload length");
                Ok(Tensor::MatF32(m))
            } else {
                Ok(Tensor::VecF32(Array1::from_vec(data)))
            }
        }
        _ => {
            let mut data = Vec::with_capacity(count);
            for i in 0..count {
                let mut b = [0u8; 4];
                b.copy_from_slice(&payload[4 * i..4 * i + 4]);
                data.push(i32::from_le_bytes(b));
            }
            if rank == 2 {
                let m = Array2::from_shape_vec((dims[0], dims[1]), data)
                    .expect("shape checked against payload length");
                Ok(Tensor::MatI32(m))
            } else {
                Ok(Tensor::VecI32(Array1::from_vec(data)))
            }
        }
    }
}

/// Read a rank-2 float32 tensor at working precision.
pub fn read_matrix(path: &Path) -> Result<Array2<Real>> {
    match read_tensor(path)? {
        Tensor::MatF32(m) => Ok(m.mapv(Real::from)),
        other => Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("expected a rank-2 float32 tensor, found {}", other.kind()),
        }),
    }
}

/// Read a rank-1 float32 tensor at working precision.
pub fn read_vector(path: &Path) -> Result<Array1<Real>> {
    match read_tensor(path)? {
        Tensor::VecF32(v) => Ok(v.mapv(Real::from)),
        other => Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("expected a rank-1 float32 tensor, found {}", other.kind()),
        }),
    }
}

/// Read a rank-1 int32 label vector.
pub fn read_labels(path: &Path) -> Result<Vec<i32>> {
    match read_tensor(path)? {
        Tensor::VecI32(v) => Ok(v.to_vec()),
        other => Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("expected a rank-1 int32 tensor, found {}", other.kind()),
        }),
    }
}

impl Tensor {
    fn kind(&self) -> &'static str {
        match self {
            Tensor::MatF32(_) => "rank-2 float32",
            Tensor::VecF32(_) => "rank-1 float32",
            Tensor::MatI32(_) => "rank-2 int32",
            Tensor::VecI32(_) => "rank-1 int32",
        }
    }
}

// ---------------------------------------------------------------------------
// Feature and activation matrices
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Backbone features for one phase split, with class labels.
#[derive(Debug, Clone)]
pub struct FeatureMatrix<F = Real> {
    pub data: Array2<F>,
    pub labels: Vec<i32>,
    pub phase_id: u32,
    pub split: Split,
}

impl<F: Scalar> FeatureMatrix<F> {
    pub fn new(data: Array2<F>, labels: Vec<i32>, phase_id: u32, split: Split) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::Validation(format!(
                "feature matrix must be non-empty, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        if labels.len() != data.nrows() {
            return Err(Error::Shape(format!(
                "{} labels for {} feature rows",
                labels.len(),
                data.nrows()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("feature matrix contains NaN/Inf".into()));
        }
        Ok(FeatureMatrix {
            data,
            labels,
            phase_id,
            split,
        })
    }

    pub fn samples(&self) -> usize {
        self.data.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.data.ncols()
    }

    /// Check that every label belongs to the given declared class set.
    pub fn validate_labels(&self, declared: &BTreeSet<i32>) -> Result<()> {
        for &l in &self.labels {
            if !declared.contains(&l) {
                return Err(Error::Validation(format!(
                    "label {l} not declared by any loaded phase manifest"
                )));
            }
        }
        Ok(())
    }

    /// Row indices carrying the given class.
    pub fn rows_of(&self, class_id: i32) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class_id)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Per-sample, per-concept activation scores with explicit column identity.
#[derive(Debug, Clone)]
pub struct ActivationMatrix<F = Real> {
    pub data: Array2<F>,
    pub concept_ids: Vec<usize>,
}

impl<F: Scalar> ActivationMatrix<F> {
    pub fn new(data: Array2<F>, concept_ids: Vec<usize>) -> Result<Self> {
        if data.ncols() != concept_ids.len() {
            return Err(Error::Shape(format!(
                "{} activation columns but {} concept ids",
                data.ncols(),
                concept_ids.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(
                "activation matrix contains NaN/Inf".into(),
            ));
        }
        Ok(ActivationMatrix { data, concept_ids })
    }
}

/// Path of the label sidecar for a feature file (`x.cimb` -> `x.labels.cimb`).
pub fn labels_path(features: &Path) -> PathBuf {
    let stem = features
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    features.with_file_name(format!("{stem}.labels.cimb"))
}

/// Load a feature matrix and its label sidecar.
pub fn load_feature_matrix(path: &Path, phase_id: u32, split: Split) -> Result<FeatureMatrix> {
    let data = read_matrix(path)?;
    let labels = read_labels(&labels_path(path))?;
    FeatureMatrix::new(data, labels, phase_id, split)
}

/// Save a feature matrix together with its label sidecar.
pub fn save_feature_matrix<F: Scalar>(path: &Path, m: &FeatureMatrix<F>) -> Result<()> {
    write_matrix(path, &m.data)?;
    write_vector_i32(&labels_path(path), &Array1::from_vec(m.labels.clone()))
}

// ---------------------------------------------------------------------------
// Phase manifests
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    phase_id: u32,
    class_ids: Vec<i32>,
    class_names: Vec<String>,
    train_features: String,
    test_features: String,
    train_activations: String,
    test_activations: String,
    concept_candidates: String,
    class_name_embeddings: String,
}

/// One phase of the dataset: disjoint classes plus paths to its tensors and
/// concept files. Paths are resolved against the manifest's directory.
#[derive(Debug, Clone)]
pub struct PhaseManifest {
    pub phase_id: u32,
    pub class_ids: Vec<i32>,
    pub class_names: Vec<String>,
    pub train_features: PathBuf,
    pub test_features: PathBuf,
    pub train_activations: PathBuf,
    pub test_activations: PathBuf,
    pub concept_candidates: PathBuf,
    pub class_name_embeddings: PathBuf,
}

/// Load one manifest and validate it against previously loaded phases.
///
/// Class ids must be disjoint from every earlier phase and every referenced
/// path (including label sidecars) must resolve.
pub fn load_phase_manifest(path: &Path, earlier: &[PhaseManifest]) -> Result<PhaseManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: ManifestFile = toml::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    if raw.class_ids.is_empty() {
        return Err(Error::Validation(format!(
            "{}: phase {} declares no classes",
            path.display(),
            raw.phase_id
        )));
    }
    if raw.class_ids.len() != raw.class_names.len() {
        return Err(Error::Validation(format!(
            "{}: {} class ids but {} class names",
            path.display(),
            raw.class_ids.len(),
            raw.class_names.len()
        )));
    }
    let mut seen = BTreeSet::new();
    for &c in &raw.class_ids {
        if !seen.insert(c) {
            return Err(Error::Validation(format!(
                "{}: class {c} listed twice in phase {}",
                path.display(),
                raw.phase_id
            )));
        }
    }
    for m in earlier {
        if m.phase_id == raw.phase_id {
            return Err(Error::Validation(format!(
                "{}: phase {} already loaded",
                path.display(),
                raw.phase_id
            )));
        }
        for &c in &raw.class_ids {
            if m.class_ids.contains(&c) {
                return Err(Error::Disjoint {
                    class_id: c,
                    earlier_phase: m.phase_id,
                    phase: raw.phase_id,
                });
            }
        }
    }
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |rel: &str| -> Result<PathBuf> {
        let p = dir.join(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::Validation(format!(
                "{}: referenced path {} does not resolve",
                path.display(),
                p.display()
            )))
        }
    };
    let train_features = resolve(&raw.train_features)?;
    let test_features = resolve(&raw.test_features)?;
    for f in [&train_features, &test_features] {
        let lp = labels_path(f);
        if !lp.exists() {
            return Err(Error::Validation(format!(
                "{}: label sidecar {} does not resolve",
                path.display(),
                lp.display()
            )));
        }
    }
    Ok(PhaseManifest {
        phase_id: raw.phase_id,
        class_ids: raw.class_ids,
        class_names: raw.class_names,
        train_features,
        test_features,
        train_activations: resolve(&raw.train_activations)?,
        test_activations: resolve(&raw.test_activations)?,
        concept_candidates: resolve(&raw.concept_candidates)?,
        class_name_embeddings: resolve(&raw.class_name_embeddings)?,
    })
}

/// Load every `phase<N>.toml` under a directory as the phase sequence 1..=T.
pub fn load_manifest_dir(dir: &Path) -> Result<Vec<PhaseManifest>> {
    let is_manifest_name = |name: &str| {
        name.strip_prefix("phase")
            .and_then(|rest| rest.strip_suffix(".toml"))
            .is_some_and(|digits| !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()))
    };
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .is_some_and(|n| is_manifest_name(&n.to_string_lossy()))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Validation(format!(
            "{}: no phase*.toml manifests found",
            dir.display()
        )));
    }
    let mut loaded: Vec<PhaseManifest> = Vec::new();
    for f in &files {
        let m = load_phase_manifest(f, &loaded)?;
        loaded.push(m);
    }
    loaded.sort_by_key(|m| m.phase_id);
    for (i, m) in loaded.iter().enumerate() {
        if m.phase_id != i as u32 + 1 {
            return Err(Error::Validation(format!(
                "{}: phase ids must be contiguous from 1, found {:?}",
                dir.display(),
                loaded.iter().map(|m| m.phase_id).collect::<Vec<_>>()
            )));
        }
    }
    Ok(loaded)
}
