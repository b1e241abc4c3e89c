//! Per-dimension moment alignment of projected vectors to a target
//! distribution, target construction from text embeddings, and per-row
//! normalization to LLM embedding-table statistics.
//!
//! Two compositions are provided. `MomentMatched` computes
//! `scale·(h − μ_src) + μ_src + shift`, which reproduces the target's
//! per-dimension mean and std on the fit source. `Literal` computes
//! `scale·h + shift`; it reproduces the target mean only when `μ_src = 0` or
//! `scale = 1`.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::embed_store::{load_matrix, save_matrix, EmbeddingMatrix, LabeledDataset, MatrixFormat, NormalizationParams};
use crate::error::{Error, Result};
use crate::pca::{apply_pca, stringify, PcaModel};
use crate::projector::parse_key_values;
use crate::stats::{self, CompensatedSum};
use crate::rng;

/// Below this source std a dimension is treated as constant (scale = 1).
pub const STD_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OtMode {
    /// Target = mean token embedding of each raw input text.
    Embed,
    /// Target = mean token embedding of each PCA string.
    Pca,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OtFormula {
    #[default]
    MomentMatched,
    Literal,
}

macro_rules! str_enum {
    ($ty:ty, $what:literal, { $($variant:path => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($variant => $name),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::invalid(format!(concat!("unknown ", $what, " {:?}"), other))),
                }
            }
        }
    };
}

str_enum!(OtMode, "OT mode", { OtMode::Embed => "embed", OtMode::Pca => "pca" });
str_enum!(OtFormula, "OT formula", {
    OtFormula::MomentMatched => "moment_matched",
    OtFormula::Literal => "literal",
});

#[derive(Debug, Clone, PartialEq)]
pub struct OtParams {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
    pub source_mean: Vec<f64>,
    pub source_std: Vec<f64>,
    pub mode: OtMode,
    pub formula: OtFormula,
}

impl OtParams {
    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    /// shift 0, scale 1.
    pub fn identity(dim: usize, mode: OtMode, formula: OtFormula) -> Self {
        Self {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
            source_mean: vec![0.0; dim],
            source_std: vec![1.0; dim],
            mode,
            formula,
        }
    }

    /// Writes `shift.bin`, `scale.bin`, `source_mean.bin`, `source_std.bin`
    /// (each 1×d) and `ot.txt`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, v) in self.vectors() {
            let m = EmbeddingMatrix::new(1, v.len(), v.to_vec())?;
            save_matrix(&m, dir.join(format!("{name}.bin")), MatrixFormat::Bin)?;
        }
        let header = dir.join("ot.txt");
        let text = format!("mode={}\nformula={}\ndim={}\n", self.mode, self.formula, self.dim());
        fs::write(&header, text).map_err(|e| Error::io(header, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let header = dir.join("ot.txt");
        let kv = parse_key_values(&fs::read_to_string(&header).map_err(|e| Error::io(&header, e))?);
        let field = |k: &str| {
            kv.get(k)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("ot.txt missing key {k:?}")))
        };
        let vec = |name: &str| -> Result<Vec<f64>> {
            Ok(load_matrix(dir.join(format!("{name}.bin")), MatrixFormat::Bin)?.into_values())
        };
        let params = Self {
            shift: vec("shift")?,
            scale: vec("scale")?,
            source_mean: vec("source_mean")?,
            source_std: vec("source_std")?,
            mode: field("mode")?.parse()?,
            formula: field("formula")?.parse()?,
        };
        let d = params.dim();
        if params.vectors().iter().any(|(_, v)| v.len() != d) {
            return Err(Error::invalid("OT parameter vectors differ in length"));
        }
        Ok(params)
    }

    fn vectors(&self) -> [(&'static str, &[f64]); 4] {
        [
            ("shift", &self.shift),
            ("scale", &self.scale),
            ("source_mean", &self.source_mean),
            ("source_std", &self.source_std),
        ]
    }
}

fn column_moments(h: &EmbeddingMatrix) -> (Vec<f64>, Vec<f64>) {
    (0..h.dim())
        .map(|j| stats::mean_and_std(&h.column(j)))
        .unzip()
}

pub fn fit_ot(h_proj: &EmbeddingMatrix, h_tar: &EmbeddingMatrix, mode: OtMode, formula: OtFormula) -> Result<OtParams> {
    if h_proj.dim() != h_tar.dim() {
        return Err(Error::DimensionMismatch {
            context: "fit_ot source vs target dim",
            expected: h_tar.dim(),
            found: h_proj.dim(),
        });
    }
    for (m, what) in [(h_proj, "source"), (h_tar, "target")] {
        if m.n_rows() < 2 {
            return Err(Error::invalid(format!(
                "fit_ot {what} needs at least 2 rows, got {}",
                m.n_rows()
            )));
        }
    }
    let (source_mean, source_std) = column_moments(h_proj);
    let (target_mean, target_std) = column_moments(h_tar);
    let shift = target_mean.iter().zip(&source_mean).map(|(t, s)| t - s).collect();
    let scale = target_std
        .iter()
        .zip(&source_std)
        .map(|(&t, &s)| if s < STD_GUARD || t <= 0.0 { 1.0 } else { t / s })
        .collect();
    Ok(OtParams {
        shift,
        scale,
        source_mean,
        source_std,
        mode,
        formula,
    })
}

pub fn apply_ot(params: &OtParams, h: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if h.dim() != params.dim() {
        return Err(Error::DimensionMismatch {
            context: "apply_ot input dim",
            expected: params.dim(),
            found: h.dim(),
        });
    }
    let mut out = h.clone();
    for i in 0..out.n_rows() {
        let row = out.row_mut(i);
        for (j, x) in row.iter_mut().enumerate() {
            *x = match params.formula {
                OtFormula::MomentMatched => {
                    params.scale[j] * (*x - params.source_mean[j]) + params.source_mean[j] + params.shift[j]
                }
                OtFormula::Literal => params.scale[j] * *x + params.shift[j],
            };
        }
    }
    Ok(out)
}

/// Token-level text embedding, e.g. a lookup into an LLM embedding table.
/// Implementations must be safe to call from several threads at once.
pub trait TextEmbedder: Sync {
    fn dim(&self) -> usize;

    /// One row per token of `text`.
    fn embed_tokens(&self, text: &str) -> std::result::Result<EmbeddingMatrix, String>;

    /// Mean over the token rows of `text`.
    fn embed_mean(&self, text: &str) -> std::result::Result<Vec<f64>, String> {
        let tokens = self.embed_tokens(text)?;
        if tokens.n_rows() == 0 {
            return Err("text produced no token embeddings".into());
        }
        let n = tokens.n_rows() as f64;
        Ok((0..tokens.dim())
            .map(|j| tokens.rows().map(|r| r[j]).collect::<CompensatedSum>().value() / n)
            .collect())
    }
}

/// Whitespace tokenizer with one hash-seeded N(0, 1) vector per distinct
/// token: token `t` maps to the stream `mix(seed, fnv1a64(t))`.
#[derive(Debug, Clone, Copy)]
pub struct MockTextEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl MockTextEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        rng::normal_vec(rng::mix(self.seed, rng::fnv1a64(token.as_bytes())), self.dim)
    }
}

impl TextEmbedder for MockTextEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_tokens(&self, text: &str) -> std::result::Result<EmbeddingMatrix, String> {
        let rows: Vec<Vec<f64>> = text.split_whitespace().map(|t| self.token_vector(t)).collect();
        if rows.is_empty() {
            return Ok(EmbeddingMatrix::zeros(0, self.dim));
        }
        EmbeddingMatrix::from_rows(&rows).map_err(|e| e.to_string())
    }
}

/// Whitespace tokens looked up in a vocabulary-indexed embedding table.
#[derive(Debug, Clone)]
pub struct VocabTableEmbedder {
    vocab: HashMap<String, usize>,
    table: EmbeddingMatrix,
}

impl VocabTableEmbedder {
    pub fn new(tokens: Vec<String>, table: EmbeddingMatrix) -> Result<Self> {
        if tokens.len() != table.n_rows() {
            return Err(Error::DimensionMismatch {
                context: "vocabulary size vs table rows",
                expected: table.n_rows(),
                found: tokens.len(),
            });
        }
        let vocab = tokens.into_iter().enumerate().map(|(i, t)| (t, i)).collect();
        Ok(Self { vocab, table })
    }

    pub fn table(&self) -> &EmbeddingMatrix {
        &self.table
    }
}

impl TextEmbedder for VocabTableEmbedder {
    fn dim(&self) -> usize {
        self.table.dim()
    }

    fn embed_tokens(&self, text: &str) -> std::result::Result<EmbeddingMatrix, String> {
        let idx = text
            .split_whitespace()
            .map(|t| self.vocab.get(t).copied().ok_or_else(|| format!("unknown token {t:?}")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(self.table.select_rows(&idx))
    }
}

fn embed_texts<E: TextEmbedder + ?Sized>(embedder: &E, ids: &[String], texts: &[String]) -> Result<EmbeddingMatrix> {
    let rows: Vec<Vec<f64>> = ids
        .par_iter()
        .zip(texts.par_iter())
        .map(|(id, text)| {
            embedder.embed_mean(text).map_err(|message| Error::Callback {
                id: id.clone(),
                message,
            })
        })
        .collect::<Result<_>>()?;
    if rows.is_empty() {
        return Ok(EmbeddingMatrix::zeros(0, embedder.dim()));
    }
    EmbeddingMatrix::from_rows(&rows)
}

/// Mean token embeddings of each example's text (`Embed`) or of its PCA
/// string (`Pca`), one row per dataset row.
pub fn build_ot_target<E: TextEmbedder + ?Sized>(
    mode: OtMode,
    dataset: &LabeledDataset,
    embedder: &E,
    pca_model: Option<&PcaModel>,
    precision: usize,
) -> Result<EmbeddingMatrix> {
    match mode {
        OtMode::Embed => {
            let texts = dataset
                .raw_texts()
                .ok_or_else(|| Error::invalid("OT embed mode requires raw texts"))?;
            embed_texts(embedder, dataset.ids(), texts)
        }
        OtMode::Pca => {
            let model = pca_model.ok_or_else(|| Error::invalid("OT pca mode requires a PCA model"))?;
            let strings = stringify(&apply_pca(model, dataset.embeddings())?, precision)?;
            embed_texts(embedder, dataset.ids(), &strings)
        }
    }
}

/// Standardize each row, then rescale to the target mean and variance.
pub fn normalize_rows(h: &EmbeddingMatrix, p: &NormalizationParams) -> Result<EmbeddingMatrix> {
    let target_std = p.target_var.sqrt();
    let mut out = h.clone();
    for i in 0..out.n_rows() {
        let row = out.row_mut(i);
        let (m, s) = stats::mean_and_std(row);
        if s <= STD_GUARD {
            if p.target_var > 0.0 {
                return Err(Error::ZeroVarianceRow { row: i });
            }
            row.fill(p.target_mean);
            continue;
        }
        for x in row.iter_mut() {
            *x = (*x - m) / s * target_std + p.target_mean;
        }
    }
    Ok(out)
}
