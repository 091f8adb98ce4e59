//! Embedding and label storage, binary I/O, and the vector primitives
//! shared by every other module.
//!
//! On-disk embedding format (`.aemb`): magic bytes `AEMB`, format version
//! (u32), row count n (u64), dimension d (u32), then n·d little-endian
//! 32-bit floats in row-major order. Record identifiers live in a sidecar
//! file at `<path>.ids`, one id per line, order-aligned with the rows.
//! Arithmetic is carried out in f64 even though the file stores f32:
//! spectrum and participation-ratio computations are variance-of-variance
//! sensitive.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const AEMB_MAGIC: &[u8; 4] = b"AEMB";
pub const AEMB_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes in {0}: not an AEMB file")]
    BadMagic(PathBuf),
    #[error("unsupported AEMB version {version} in {path}")]
    UnsupportedVersion { path: PathBuf, version: u32 },
    #[error("truncated AEMB payload in {path}: expected {expected} floats, got {actual}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("header declares {header} rows but sidecar {path} has {sidecar} ids")]
    IdCountMismatch {
        path: PathBuf,
        header: usize,
        sidecar: usize,
    },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("id count {ids} does not match row count {rows}")]
    ShapeMismatch { ids: usize, rows: usize },
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("zero-norm vector where a direction is required")]
    ZeroNorm,
    #[error("empty matrix where at least one row is required")]
    Empty,
    #[error("malformed label table {path}: {reason}")]
    MalformedLabels { path: PathBuf, reason: String },
}

fn io_err(path: &Path, source: std::io::Error) -> EmbedError {
    EmbedError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Row-aligned id list plus an n×d matrix of 64-bit floats.
///
/// Immutable after construction; all diagnostics and indices consume it.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    /// Build from parts, enforcing the type invariants: `ids.len()` rows,
    /// unique ids, all values finite.
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<f64>) -> Result<Self, EmbedError> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(EmbedError::ShapeMismatch {
                ids: ids.len(),
                rows: data.len().checked_div(dim).unwrap_or(0),
            });
        }
        let rows = data.len() / dim;
        if ids.len() != rows {
            return Err(EmbedError::ShapeMismatch {
                ids: ids.len(),
                rows,
            });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(EmbedError::DuplicateId(id.clone()));
            }
        }
        for (i, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(EmbedError::NonFinite {
                    row: i / dim,
                    col: i % dim,
                });
            }
        }
        Ok(Self { ids, dim, data })
    }

    pub fn n_rows(&self) -> usize {
        self.ids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Linear scan; fine at the corpus sizes this crate targets.
    pub fn row_by_id(&self, id: &str) -> Option<&[f64]> {
        self.ids.iter().position(|x| x == id).map(|i| self.row(i))
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), self.row(i)))
    }
}

/// Binary pathology labels: one row per id, one column per finding name.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelTable {
    ids: Vec<String>,
    findings: Vec<String>,
    matrix: Vec<u8>,
}

impl LabelTable {
    pub fn new(
        ids: Vec<String>,
        findings: Vec<String>,
        matrix: Vec<u8>,
    ) -> Result<Self, EmbedError> {
        if ids.len() * findings.len() != matrix.len() {
            return Err(EmbedError::ShapeMismatch {
                ids: ids.len(),
                rows: if findings.is_empty() {
                    0
                } else {
                    matrix.len() / findings.len()
                },
            });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(EmbedError::DuplicateId(id.clone()));
            }
        }
        if let Some(bad) = matrix.iter().find(|&&v| v > 1) {
            return Err(EmbedError::MalformedLabels {
                path: PathBuf::new(),
                reason: format!("label value {bad} is not binary"),
            });
        }
        Ok(Self {
            ids,
            findings,
            matrix,
        })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn findings(&self) -> &[String] {
        &self.findings
    }

    pub fn n_rows(&self) -> usize {
        self.ids.len()
    }

    pub fn value(&self, row: usize, col: usize) -> bool {
        self.matrix[row * self.findings.len() + col] == 1
    }

    /// Column of one finding as a bool vector, row-aligned with `ids`.
    pub fn column(&self, finding: &str) -> Option<Vec<bool>> {
        let col = self.findings.iter().position(|f| f == finding)?;
        Some((0..self.ids.len()).map(|r| self.value(r, col)).collect())
    }

    /// The set of positive finding names for one id.
    pub fn positive_findings(&self, id: &str) -> Option<Vec<String>> {
        let row = self.ids.iter().position(|x| x == id)?;
        Some(
            self.findings
                .iter()
                .enumerate()
                .filter(|(c, _)| self.value(row, *c))
                .map(|(_, f)| f.clone())
                .collect(),
        )
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".ids");
    PathBuf::from(s)
}

/// Load an AEMB file and its `.ids` sidecar.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix, EmbedError> {
    let mut file = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);

    let mut magic = [0u8; 4];
    file.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != AEMB_MAGIC {
        return Err(EmbedError::BadMagic(path.to_path_buf()));
    }
    let mut buf4 = [0u8; 4];
    let mut buf8 = [0u8; 8];
    file.read_exact(&mut buf4).map_err(|e| io_err(path, e))?;
    let version = u32::from_le_bytes(buf4);
    if version != AEMB_VERSION {
        return Err(EmbedError::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    file.read_exact(&mut buf8).map_err(|e| io_err(path, e))?;
    let n = u64::from_le_bytes(buf8) as usize;
    file.read_exact(&mut buf4).map_err(|e| io_err(path, e))?;
    let d = u32::from_le_bytes(buf4) as usize;

    let mut payload = Vec::new();
    file.read_to_end(&mut payload).map_err(|e| io_err(path, e))?;
    let expected = n * d;
    if payload.len() != expected * 4 {
        return Err(EmbedError::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: payload.len() / 4,
        });
    }
    let mut data = Vec::with_capacity(expected);
    for chunk in payload.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        data.push(v as f64);
    }

    let ids_path = sidecar_path(path);
    let ids_file = BufReader::new(File::open(&ids_path).map_err(|e| io_err(&ids_path, e))?);
    let mut ids = Vec::with_capacity(n);
    for line in ids_file.lines() {
        let line = line.map_err(|e| io_err(&ids_path, e))?;
        if !line.is_empty() {
            ids.push(line);
        }
    }
    if ids.len() != n {
        return Err(EmbedError::IdCountMismatch {
            path: ids_path,
            header: n,
            sidecar: ids.len(),
        });
    }

    // EmbeddingMatrix::new re-checks finiteness and id uniqueness so a
    // corrupted file cannot smuggle NaNs past the loader.
    EmbeddingMatrix::new(ids, d, data)
}

/// Write an AEMB file plus its `.ids` sidecar. Values are narrowed to f32.
pub fn save_embeddings(m: &EmbeddingMatrix, path: &Path) -> Result<(), EmbedError> {
    let mut file = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    file.write_all(AEMB_MAGIC).map_err(|e| io_err(path, e))?;
    file.write_all(&AEMB_VERSION.to_le_bytes())
        .map_err(|e| io_err(path, e))?;
    file.write_all(&(m.n_rows() as u64).to_le_bytes())
        .map_err(|e| io_err(path, e))?;
    file.write_all(&(m.dim() as u32).to_le_bytes())
        .map_err(|e| io_err(path, e))?;
    for v in m.data() {
        file.write_all(&(*v as f32).to_le_bytes())
            .map_err(|e| io_err(path, e))?;
    }
    file.flush().map_err(|e| io_err(path, e))?;

    let ids_path = sidecar_path(path);
    let mut ids_file = BufWriter::new(File::create(&ids_path).map_err(|e| io_err(&ids_path, e))?);
    for id in m.ids() {
        writeln!(ids_file, "{id}").map_err(|e| io_err(&ids_path, e))?;
    }
    ids_file.flush().map_err(|e| io_err(&ids_path, e))?;
    Ok(())
}

/// Load a tab-separated label table: header `id<TAB>finding...`, then one
/// row of 0/1 values per id.
pub fn load_labels(path: &Path) -> Result<LabelTable, EmbedError> {
    let malformed = |reason: String| EmbedError::MalformedLabels {
        path: path.to_path_buf(),
        reason,
    };
    let file = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let mut lines = file.lines();
    let header = lines
        .next()
        .ok_or_else(|| malformed("empty file".into()))?
        .map_err(|e| io_err(path, e))?;
    let mut cols = header.split('\t');
    if cols.next() != Some("id") {
        return Err(malformed("header must start with an `id` column".into()));
    }
    let findings: Vec<String> = cols.map(str::to_string).collect();

    let mut ids = Vec::new();
    let mut matrix = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let id = fields
            .next()
            .ok_or_else(|| malformed(format!("row {} has no id", lineno + 2)))?;
        ids.push(id.to_string());
        let mut count = 0;
        for field in fields {
            matrix.push(match field {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(malformed(format!(
                        "row {} has non-binary value {other:?}",
                        lineno + 2
                    )))
                }
            });
            count += 1;
        }
        if count != findings.len() {
            return Err(malformed(format!(
                "row {} has {count} values, expected {}",
                lineno + 2,
                findings.len()
            )));
        }
    }
    LabelTable::new(ids, findings, matrix)
}

pub fn save_labels(t: &LabelTable, path: &Path) -> Result<(), EmbedError> {
    let mut file = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    write!(file, "id").map_err(|e| io_err(path, e))?;
    for f in t.findings() {
        write!(file, "\t{f}").map_err(|e| io_err(path, e))?;
    }
    writeln!(file).map_err(|e| io_err(path, e))?;
    for (r, id) in t.ids().iter().enumerate() {
        write!(file, "{id}").map_err(|e| io_err(path, e))?;
        for c in 0..t.findings().len() {
            write!(file, "\t{}", if t.value(r, c) { 1 } else { 0 })
                .map_err(|e| io_err(path, e))?;
        }
        writeln!(file).map_err(|e| io_err(path, e))?;
    }
    file.flush().map_err(|e| io_err(path, e))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Normalize a vector in place; returns false (leaving it untouched) when
/// the norm is zero.
pub fn normalize_in_place(v: &mut [f64]) -> bool {
    let n = norm(v);
    if n == 0.0 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

/// L2-normalize every row. Zero rows are legal (real pooled embeddings
/// can be degenerate), so they pass through unchanged and their indices
/// are reported alongside the result.
pub fn l2_normalize(m: &EmbeddingMatrix) -> (EmbeddingMatrix, Vec<usize>) {
    let mut data = m.data().to_vec();
    let mut zero_rows = Vec::new();
    for i in 0..m.n_rows() {
        let row = &mut data[i * m.dim()..(i + 1) * m.dim()];
        if !normalize_in_place(row) {
            zero_rows.push(i);
        }
    }
    let out = EmbeddingMatrix {
        ids: m.ids().to_vec(),
        dim: m.dim(),
        data,
    };
    (out, zero_rows)
}

/// Cosine similarity of two nonzero vectors of equal dimension.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64, EmbedError> {
    if a.len() != b.len() {
        return Err(EmbedError::DimMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(EmbedError::ZeroNorm);
    }
    Ok(dot(a, b) / (na * nb))
}

/// Subtract the column mean from every row; returns the centered matrix
/// and the mean vector.
pub fn mean_center(m: &EmbeddingMatrix) -> Result<(EmbeddingMatrix, Vec<f64>), EmbedError> {
    let n = m.n_rows();
    if n == 0 {
        return Err(EmbedError::Empty);
    }
    let d = m.dim();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (j, v) in m.row(i).iter().enumerate() {
            mean[j] += v;
        }
    }
    for v in &mut mean {
        *v /= n as f64;
    }
    let mut data = m.data().to_vec();
    for i in 0..n {
        for j in 0..d {
            data[i * d + j] -= mean[j];
        }
    }
    let out = EmbeddingMatrix {
        ids: m.ids().to_vec(),
        dim: d,
        data,
    };
    Ok((out, mean))
}
