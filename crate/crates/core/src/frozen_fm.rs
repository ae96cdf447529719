//! Frozen vision-language encoder surrogate.
//!
//! Class descriptions are embedded once (synthetically or from an ingested file)
//! and the image encoder is a fixed full-rank linear map. Nothing here is ever
//! updated by training.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics;
use crate::seed;

/// Tolerance on row norms of a validated embedding matrix.
pub const UNIT_NORM_TOL: f64 = 1e-6;
/// Accepted distance from unit norm for rows of an ingested file.
pub const INGEST_NORM_TOL: f64 = 1e-3;
/// Largest allowed `|cos|` between two synthetic class embeddings.
pub const MAX_SYNTH_COSINE: f64 = 0.99;

/// Which description template a dataset uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    General,
    Pets,
    Texture,
    Satellite,
    Digits,
    Synthetic,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "general" => DatasetKind::General,
            "pets" => DatasetKind::Pets,
            "texture" => DatasetKind::Texture,
            "satellite" => DatasetKind::Satellite,
            "digits" => DatasetKind::Digits,
            "synthetic" => DatasetKind::Synthetic,
            other => return Err(Error::InvalidInput(format!("unknown dataset kind `{other}`"))),
        })
    }
}

/// Linguistic description of a class.
pub fn prompt_template(kind: DatasetKind, class_name: &str) -> String {
    match kind {
        DatasetKind::General | DatasetKind::Pets => format!("a photo of {class_name}"),
        DatasetKind::Texture => format!("{class_name} texture"),
        DatasetKind::Satellite => format!("a centered satellite photo of {class_name}"),
        DatasetKind::Digits => format!("a photo of digit {class_name}"),
        DatasetKind::Synthetic => format!("class {class_name}"),
    }
}

/// Unit-norm text embeddings, one row per class in label order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: Array2<f64>,
    class_names: Vec<String>,
    descriptions: Vec<String>,
}

impl EmbeddingMatrix {
    pub fn new(rows: Array2<f64>, class_names: Vec<String>, descriptions: Vec<String>) -> Result<Self> {
        let classes = rows.nrows();
        if classes == 0 || rows.ncols() == 0 {
            return Err(Error::Validation("embedding matrix is empty".into()));
        }
        if class_names.len() != classes || descriptions.len() != classes {
            return Err(Error::Validation(format!(
                "{classes} rows but {} names and {} descriptions",
                class_names.len(),
                descriptions.len()
            )));
        }
        for (c, row) in rows.outer_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if !n.is_finite() || (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Validation(format!("row {c} has norm {n}, expected 1")));
            }
        }
        let mut seen = HashSet::new();
        for name in &class_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Validation(format!("duplicate class name `{name}`")));
            }
        }
        Ok(EmbeddingMatrix {
            rows,
            class_names,
            descriptions,
        })
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn row(&self, c: usize) -> ArrayView1<'_, f64> {
        self.rows.row(c)
    }

    pub fn classes(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn descriptions(&self) -> &[String] {
        &self.descriptions
    }

    pub fn with_class_names(self, names: Vec<String>) -> Result<Self> {
        EmbeddingMatrix::new(self.rows, names, self.descriptions)
    }

    /// Rows reordered by `perm`, so that new row `i` is old row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let rows = self.rows.select(ndarray::Axis(0), perm);
        let names = perm.iter().map(|i| self.class_names[*i].clone()).collect();
        let desc = perm.iter().map(|i| self.descriptions[*i].clone()).collect();
        EmbeddingMatrix::new(rows, names, desc)
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        fingerprint(self.rows.iter())
    }
}

fn fingerprint<'a>(values: impl Iterator<Item = &'a f64>) -> [u8; 32] {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

fn description_seed(description: &str, seed: u64, attempt: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(attempt.to_le_bytes());
    h.update(description.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("32-byte digest"))
}

/// Deterministic stand-in for a text encoder: each description hashes (with
/// `seed`) to a Gaussian direction. Rows closer than [`MAX_SYNTH_COSINE`] to an
/// earlier row are re-drawn.
pub fn synth_text_embed(descriptions: &[String], d: usize, seed: u64) -> Result<EmbeddingMatrix> {
    if descriptions.len() < 2 || d < 2 {
        return Err(Error::InvalidInput(format!(
            "need >= 2 descriptions and d >= 2, got {} and {d}",
            descriptions.len()
        )));
    }
    let mut seen = HashSet::new();
    for desc in descriptions {
        if !seen.insert(desc.as_str()) {
            return Err(Error::InvalidInput(format!("duplicate description `{desc}`")));
        }
    }
    let mut rows = Array2::zeros((descriptions.len(), d));
    for (c, desc) in descriptions.iter().enumerate() {
        for attempt in 0.. {
            let mut rng = seed::rng(description_seed(desc, seed, attempt));
            let mut v: Array1<f64> = Array1::from_shape_simple_fn(d, || StandardNormal.sample(&mut rng));
            let n = v.dot(&v).sqrt();
            if n < 1e-12 {
                continue;
            }
            v /= n;
            let collides = (0..c).any(|p| rows.row(p).dot(&v).abs() >= MAX_SYNTH_COSINE);
            if !collides {
                rows.row_mut(c).assign(&v);
                break;
            }
        }
    }
    EmbeddingMatrix::new(rows, descriptions.to_vec(), descriptions.to_vec())
}

/// Mixes a shared unit direction into every row: `e_c <- normalize(sqrt(rho) u +
/// sqrt(1 - rho) e_c)`. Trained vision-language text encoders place class
/// prompts in a narrow cone; `rho` sets how narrow. `rho = 0` is the identity.
pub fn concentrate(embeddings: &EmbeddingMatrix, rho: f64, seed: u64) -> Result<EmbeddingMatrix> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidInput(format!("concentration must lie in [0, 1), got {rho}")));
    }
    if rho == 0.0 {
        return Ok(embeddings.clone());
    }
    let d = embeddings.dim();
    let mut rng = seed::rng(seed);
    let shared = loop {
        let v: Array1<f64> = Array1::from_shape_simple_fn(d, || StandardNormal.sample(&mut rng));
        let n = v.dot(&v).sqrt();
        if n > 1e-12 {
            break v / n;
        }
    };
    let mut rows = embeddings.rows().clone();
    for mut row in rows.outer_iter_mut() {
        let mixed = &shared * rho.sqrt() + &row * (1.0 - rho).sqrt();
        let n = mixed.dot(&mixed).sqrt();
        if n < 1e-12 {
            return Err(Error::Domain("row cancels the shared direction".into()));
        }
        row.assign(&(mixed / n));
    }
    EmbeddingMatrix::new(rows, embeddings.class_names().to_vec(), embeddings.descriptions().to_vec())
}

/// Fixed linear map from prompt space to the shared embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenImageEncoder {
    projection: Array2<f64>,
}

impl FrozenImageEncoder {
    /// Orthogonal factor of a QR decomposition of a seeded Gaussian matrix.
    pub fn synthetic(d: usize, seed: u64) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidInput("encoder dimension must be >= 1".into()));
        }
        let mut rng = seed::rng(seed);
        loop {
            let g = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
            let q = g.qr().q();
            let smallest = q.singular_values().min();
            if smallest > 1e-8 {
                let projection = Array2::from_shape_fn((d, d), |(i, j)| q[(i, j)]);
                return Ok(FrozenImageEncoder { projection });
            }
        }
    }

    pub fn identity(d: usize) -> Self {
        FrozenImageEncoder {
            projection: Array2::eye(d),
        }
    }

    pub fn from_projection(projection: Array2<f64>) -> Result<Self> {
        if projection.nrows() != projection.ncols() || projection.is_empty() {
            return Err(Error::Shape("encoder projection must be square and non-empty".into()));
        }
        if projection.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite encoder projection".into()));
        }
        Ok(FrozenImageEncoder { projection })
    }

    pub fn projection(&self) -> &Array2<f64> {
        &self.projection
    }

    pub fn dim(&self) -> usize {
        self.projection.nrows()
    }

    /// `projection * h`.
    pub fn image_encode(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.dim() {
            return Err(Error::Shape(format!("prompt of length {} for encoder of dim {}", h.len(), self.dim())));
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite prompt".into()));
        }
        Ok(self.projection.dot(&ArrayView1::from(h)).to_vec())
    }

    /// Encodes every row of `prompts` (C x d), returning C x d.
    pub(crate) fn encode_rows(&self, prompts: &Array2<f64>) -> Array2<f64> {
        prompts.dot(&self.projection.t())
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        fingerprint(self.projection.iter())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingFile {
    dim: usize,
    classes: Vec<EmbeddingEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingEntry {
    name: String,
    description: String,
    embedding: Vec<f64>,
}

/// Parses and validates an embedding document. Rows within
/// [`INGEST_NORM_TOL`] of unit norm are re-normalized; anything else is rejected.
pub fn parse_embeddings(text: &str, origin: &str) -> Result<EmbeddingMatrix> {
    let file: EmbeddingFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        context: format!("{origin}:{}:{}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    if file.classes.is_empty() || file.dim == 0 {
        return Err(Error::Validation(format!("{origin}: no classes or zero dimension")));
    }
    let mut rows = Array2::zeros((file.classes.len(), file.dim));
    let mut names = Vec::with_capacity(file.classes.len());
    let mut descriptions = Vec::with_capacity(file.classes.len());
    for (c, entry) in file.classes.into_iter().enumerate() {
        if entry.embedding.len() != file.dim {
            return Err(Error::Parse {
                context: format!("{origin}: classes[{c}].embedding"),
                message: format!("expected {} numbers, found {}", file.dim, entry.embedding.len()),
            });
        }
        let n = numerics::norm(&entry.embedding);
        if !n.is_finite() || (n - 1.0).abs() > INGEST_NORM_TOL {
            return Err(Error::Validation(format!(
                "{origin}: class `{}` embedding has norm {n}, outside 1 +/- {INGEST_NORM_TOL}",
                entry.name
            )));
        }
        for (dst, v) in rows.row_mut(c).iter_mut().zip(&entry.embedding) {
            *dst = v / n;
        }
        names.push(entry.name);
        descriptions.push(entry.description);
    }
    EmbeddingMatrix::new(rows, names, descriptions)
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let text = std::fs::read_to_string(path)?;
    parse_embeddings(&text, &path.display().to_string())
}

/// Serializes in the ingestion format, numbers at 17 significant digits.
pub fn render_embeddings(emb: &EmbeddingMatrix) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{{\n  \"dim\": {},\n  \"classes\": [", emb.dim());
    for c in 0..emb.classes() {
        let nums: Vec<String> = emb.row(c).iter().map(|v| format!("{v:.16e}")).collect();
        let _ = write!(
            out,
            "    {{\"name\": {}, \"description\": {}, \"embedding\": [{}]}}",
            serde_json::Value::from(emb.class_names()[c].as_str()),
            serde_json::Value::from(emb.descriptions()[c].as_str()),
            nums.join(", ")
        );
        out.push_str(if c + 1 < emb.classes() { ",\n" } else { "\n" });
    }
    out.push_str("  ]\n}\n");
    out
}

pub fn save_embeddings(emb: &EmbeddingMatrix, path: &Path) -> Result<()> {
    std::fs::write(path, render_embeddings(emb))?;
    Ok(())
}
