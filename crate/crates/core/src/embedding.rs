//! Embedding containers: a named, role-tagged matrix of `f32` rows.
//!
//! On disk a container is two files: a JSON manifest (`<name>.manifest.json`)
//! and a headerless data file of `count × dim` little-endian `f32` values in
//! row-major order. The manifest names the data file by a path relative to
//! itself.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Manifest format version written by [`save_container`].
pub const MANIFEST_VERSION: u32 = 1;

/// The only supported on-disk element type.
pub const DTYPE_F32LE: &str = "f32le";

/// Rows flagged as normalized must have a norm within this distance of 1.
pub const NORM_TOLERANCE: f32 = 1e-4;

const MANIFEST_SUFFIX: &str = ".manifest.json";

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported manifest: {0}")]
    Unsupported(String),
    #[error("size mismatch: expected {expected} bytes of row data, found {found}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("{names} names supplied for {rows} rows")]
    NameCount { names: usize, rows: usize },
    #[error("duplicate name {0:?}")]
    DuplicateName(String),
    #[error("non-finite value in row {row}")]
    NonFinite { row: usize },
    #[error("embedding dimension must be at least 1")]
    ZeroDim,
    #[error("row {row} has zero norm")]
    ZeroNorm { row: usize },
    #[error("row {row} is flagged normalized but has norm {norm}")]
    NotUnit { row: usize, norm: f32 },
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("container {0:?} is not normalized")]
    Unnormalized(String),
}

/// What the rows of a container represent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Class,
    Prompt,
    Image,
    Concept,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Class => "class",
            Role::Prompt => "prompt",
            Role::Image => "image",
            Role::Concept => "concept",
        })
    }
}

impl FromStr for Role {
    type Err = EmbeddingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "class" => Ok(Role::Class),
            "prompt" => Ok(Role::Prompt),
            "image" => Ok(Role::Image),
            "concept" => Ok(Role::Concept),
            other => Err(EmbeddingError::Unsupported(format!("role {other:?}"))),
        }
    }
}

/// A validated set of named embedding rows.
///
/// Containers are immutable once built; every constructor checks the
/// invariants (unique names, finite values, unit rows when flagged normalized).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingContainer {
    dim: usize,
    role: Role,
    names: Vec<String>,
    data: Vec<f32>,
    normalized: bool,
}

impl EmbeddingContainer {
    /// Builds a container from a flat row-major buffer.
    pub fn new(
        dim: usize,
        role: Role,
        names: Vec<String>,
        data: Vec<f32>,
        normalized: bool,
    ) -> Result<Self, EmbeddingError> {
        if dim == 0 {
            return Err(EmbeddingError::ZeroDim);
        }
        if data.len() != names.len() * dim {
            return Err(EmbeddingError::SizeMismatch {
                expected: names.len() * dim * 4,
                found: data.len() * 4,
            });
        }
        let mut seen = HashSet::with_capacity(names.len());
        for name in &names {
            if !seen.insert(name.as_str()) {
                return Err(EmbeddingError::DuplicateName(name.clone()));
            }
        }
        let container = Self {
            dim,
            role,
            names,
            data,
            normalized,
        };
        for (i, row) in container.rows().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(EmbeddingError::NonFinite { row: i });
            }
            if normalized {
                let norm = row_norm(row);
                if (norm - 1.0).abs() > NORM_TOLERANCE {
                    return Err(EmbeddingError::NotUnit { row: i, norm });
                }
            }
        }
        Ok(container)
    }

    /// Builds a container from one vector per name.
    pub fn from_rows(
        role: Role,
        names: Vec<String>,
        rows: Vec<Vec<f32>>,
        normalized: bool,
    ) -> Result<Self, EmbeddingError> {
        if names.len() != rows.len() {
            return Err(EmbeddingError::NameCount {
                names: names.len(),
                rows: rows.len(),
            });
        }
        let dim = rows.first().map(Vec::len).unwrap_or(1);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in &rows {
            if row.len() != dim {
                return Err(EmbeddingError::DimMismatch {
                    left: dim,
                    right: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(dim, role, names, data, normalized)
    }

    /// An empty container of the given dimension.
    pub fn empty(dim: usize, role: Role) -> Result<Self, EmbeddingError> {
        Self::new(dim, role, Vec::new(), Vec::new(), true)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Flat row-major values.
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Same rows under a different role tag.
    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    /// A new container holding the given rows in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self, EmbeddingError> {
        let mut names = Vec::with_capacity(indices.len());
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            names.push(self.names[i].clone());
            data.extend_from_slice(self.row(i));
        }
        Self::new(self.dim, self.role, names, data, self.normalized)
    }
}

/// Euclidean norm, accumulated in `f64`.
pub fn row_norm(row: &[f32]) -> f32 {
    row.iter()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt() as f32
}

/// Dot product accumulated in `f64`.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

/// Divides a vector by its norm in place. Returns `false` on a zero vector.
pub fn normalize_in_place(v: &mut [f32]) -> bool {
    let norm = v
        .iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return false;
    }
    for x in v.iter_mut() {
        *x = (f64::from(*x) / norm) as f32;
    }
    true
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize(c: &EmbeddingContainer) -> Result<EmbeddingContainer, EmbeddingError> {
    let mut data = c.data.clone();
    for (i, row) in data.chunks_exact_mut(c.dim).enumerate() {
        if !normalize_in_place(row) {
            return Err(EmbeddingError::ZeroNorm { row: i });
        }
    }
    EmbeddingContainer::new(c.dim, c.role, c.names.clone(), data, true)
}

/// Dense row-major matrix of cosine similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl SimilarityMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }
}

/// Pairwise cosine similarity between the rows of two normalized containers.
pub fn cosine_sim(
    a: &EmbeddingContainer,
    b: &EmbeddingContainer,
) -> Result<SimilarityMatrix, EmbeddingError> {
    if a.dim != b.dim {
        return Err(EmbeddingError::DimMismatch {
            left: a.dim,
            right: b.dim,
        });
    }
    for c in [a, b] {
        if !c.normalized {
            return Err(EmbeddingError::Unnormalized(c.role.to_string()));
        }
    }
    let mut values = Vec::with_capacity(a.count() * b.count());
    for ra in a.rows() {
        values.extend(b.rows().map(|rb| dot(ra, rb) as f32));
    }
    Ok(SimilarityMatrix {
        rows: a.count(),
        cols: b.count(),
        values,
    })
}

/// Maps a cosine similarity onto `[0, 1]` with the affine map `(s + 1) / 2`.
///
/// Inputs outside `[-1, 1]` are clamped and logged.
pub fn sim_to_prob(s: f64) -> f64 {
    let clamped = s.clamp(-1.0, 1.0);
    if clamped != s {
        log::warn!("similarity {s} outside [-1, 1]; clamped");
    }
    (clamped + 1.0) / 2.0
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    dim: usize,
    count: usize,
    role: Role,
    normalized: bool,
    dtype: String,
    names: Vec<String>,
    data: String,
}

/// Path of the data file that accompanies a manifest path.
pub fn data_path_for(manifest: &Path) -> PathBuf {
    let file = manifest
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = file
        .strip_suffix(MANIFEST_SUFFIX)
        .unwrap_or_else(|| file.rsplit_once('.').map(|(s, _)| s).unwrap_or(&file));
    manifest.with_file_name(format!("{stem}.f32"))
}

/// Manifest path for a container called `name` inside `dir`.
pub fn manifest_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}{MANIFEST_SUFFIX}"))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EmbeddingError + '_ {
    move |source| EmbeddingError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a container from its manifest path.
pub fn load_container(path: impl AsRef<Path>) -> Result<EmbeddingContainer, EmbeddingError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|source| EmbeddingError::Manifest {
            path: path.to_path_buf(),
            source,
        })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(EmbeddingError::Unsupported(format!(
            "manifest version {}",
            manifest.version
        )));
    }
    if manifest.dtype != DTYPE_F32LE {
        return Err(EmbeddingError::Unsupported(format!(
            "dtype {:?}",
            manifest.dtype
        )));
    }
    if manifest.names.len() != manifest.count {
        return Err(EmbeddingError::NameCount {
            names: manifest.names.len(),
            rows: manifest.count,
        });
    }
    let data_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.data);
    let bytes = fs::read(&data_path).map_err(io_err(&data_path))?;
    let expected = manifest.count * manifest.dim * 4;
    if bytes.len() != expected {
        return Err(EmbeddingError::SizeMismatch {
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    EmbeddingContainer::new(
        manifest.dim,
        manifest.role,
        manifest.names,
        data,
        manifest.normalized,
    )
}

/// Writes a container as a manifest plus sibling data file.
///
/// `path` is the manifest path; the data file takes the same stem with an
/// `.f32` extension.
pub fn save_container(
    c: &EmbeddingContainer,
    path: impl AsRef<Path>,
) -> Result<(), EmbeddingError> {
    let path = path.as_ref();
    let data_path = data_path_for(path);
    let data_name = data_path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        dim: c.dim,
        count: c.count(),
        role: c.role,
        normalized: c.normalized,
        dtype: DTYPE_F32LE.to_string(),
        names: c.names.clone(),
        data: data_name,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut bytes = Vec::with_capacity(c.data.len() * 4);
    for v in &c.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&data_path, bytes).map_err(io_err(&data_path))?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(path, json).map_err(io_err(path))?;
    Ok(())
}
