//! Few-shot example selection and prompt assembly.
//!
//! A prompt is kept as an intermediate representation of text spans and
//! references to attached vectors, so an external driver can splice the
//! vectors into an LLM input stream however it likes. Attached row `i` is the
//! vector of demonstration `i`; query vectors follow the demonstrations.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed_store::{load_matrix, save_matrix, EmbeddingMatrix, LabeledDataset, MatrixFormat};
use crate::error::{Error, Result};
use crate::pca::format_fixed;
use crate::rng;
use crate::stats::{cosine, CompensatedSum};

pub const DEFAULT_INSTRUCTION: &str =
    "You are a drug expert. The answer should be different from the examples; DO NOT COPY ANY FLOAT VALUE";
pub const DEFAULT_PLACEHOLDER: &str = "<REP>";
pub const DEFAULT_POOL_CAP: usize = 1000;
pub const DEFAULT_K_NEIGHBORS: usize = 5;
pub const LABEL_PRECISION: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Text(String),
    Vector(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectionMode {
    PcaString,
    Embedding,
    RawTextPlusEmbedding,
    RawTextOnly,
}

impl InjectionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InjectionMode::PcaString => "pca_string",
            InjectionMode::Embedding => "embedding",
            InjectionMode::RawTextPlusEmbedding => "raw_text_plus_embedding",
            InjectionMode::RawTextOnly => "raw_text_only",
        }
    }

    pub fn uses_vectors(self) -> bool {
        matches!(self, InjectionMode::Embedding | InjectionMode::RawTextPlusEmbedding)
    }

    pub fn uses_raw_text(self) -> bool {
        matches!(self, InjectionMode::RawTextOnly | InjectionMode::RawTextPlusEmbedding)
    }
}

impl fmt::Display for InjectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InjectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pca_string" => Ok(InjectionMode::PcaString),
            "embedding" => Ok(InjectionMode::Embedding),
            "raw_text_plus_embedding" => Ok(InjectionMode::RawTextPlusEmbedding),
            "raw_text_only" => Ok(InjectionMode::RawTextOnly),
            other => Err(Error::invalid(format!("unknown injection mode {other:?}"))),
        }
    }
}

/// Per-row inputs a mode may draw on. `injected` and `pca_strings` are indexed
/// like the dataset.
#[derive(Debug, Clone, Copy)]
pub struct Inputs<'a> {
    pub dataset: &'a LabeledDataset,
    pub injected: Option<&'a EmbeddingMatrix>,
    pub pca_strings: Option<&'a [String]>,
}

impl<'a> Inputs<'a> {
    pub fn new(dataset: &'a LabeledDataset) -> Self {
        Self {
            dataset,
            injected: None,
            pca_strings: None,
        }
    }

    pub fn with_injected(mut self, injected: &'a EmbeddingMatrix) -> Self {
        self.injected = Some(injected);
        self
    }

    pub fn with_pca_strings(mut self, strings: &'a [String]) -> Self {
        self.pca_strings = Some(strings);
        self
    }

    fn check(&self, mode: InjectionMode, indices: &[usize]) -> Result<()> {
        let n = self.dataset.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("row index {bad} out of range for {n} rows")));
        }
        if mode.uses_vectors() {
            let m = self
                .injected
                .ok_or_else(|| Error::invalid(format!("mode {mode} requires injected vectors")))?;
            if m.n_rows() != n {
                return Err(Error::DimensionMismatch {
                    context: "injected rows vs dataset rows",
                    expected: n,
                    found: m.n_rows(),
                });
            }
        }
        if mode.uses_raw_text() && self.dataset.raw_texts().is_none() {
            return Err(Error::invalid(format!("mode {mode} requires raw texts")));
        }
        if mode == InjectionMode::PcaString {
            let s = self
                .pca_strings
                .ok_or_else(|| Error::invalid("mode pca_string requires PCA strings"))?;
            if s.len() != n {
                return Err(Error::DimensionMismatch {
                    context: "PCA strings vs dataset rows",
                    expected: n,
                    found: s.len(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptIr {
    pub instruction: String,
    pub segments: Vec<Segment>,
    pub attached_vectors: EmbeddingMatrix,
    pub demo_labels: Vec<f64>,
    pub query_count: usize,
}

impl PromptIr {
    pub fn n_demos(&self) -> usize {
        self.demo_labels.len()
    }

    pub fn vector_segment_count(&self) -> usize {
        self.segments.iter().filter(|s| matches!(s, Segment::Vector(_))).count()
    }

    /// Rows of the attached matrix that belong to demonstrations.
    pub fn demo_vectors(&self) -> Option<EmbeddingMatrix> {
        let n = self.n_demos();
        if n == 0 || self.attached_vectors.n_rows() < n {
            return None;
        }
        let has_demo_vector = self
            .segments
            .iter()
            .any(|s| matches!(s, Segment::Vector(i) if *i < n));
        has_demo_vector.then(|| self.attached_vectors.select_rows(&(0..n).collect::<Vec<_>>()))
    }

    fn push_input(&mut self, mode: InjectionMode, inputs: &Inputs<'_>, row: usize, attached: &mut Vec<Vec<f64>>) {
        self.segments.push(Segment::Text("Input: ".into()));
        let text = |r: usize| inputs.dataset.raw_texts().expect("checked")[r].clone();
        let next_vector = self.attached_vectors.n_rows() + attached.len();
        match mode {
            InjectionMode::PcaString => {
                let s = inputs.pca_strings.expect("checked")[row].clone();
                self.segments.push(Segment::Text(s));
            }
            InjectionMode::Embedding => self.segments.push(Segment::Vector(next_vector)),
            InjectionMode::RawTextPlusEmbedding => {
                self.segments.push(Segment::Text(text(row)));
                self.segments.push(Segment::Text(" ".into()));
                self.segments.push(Segment::Vector(next_vector));
            }
            InjectionMode::RawTextOnly => self.segments.push(Segment::Text(text(row))),
        }
        if mode.uses_vectors() {
            attached.push(inputs.injected.expect("checked").row(row).to_vec());
        }
    }

    fn attach(&mut self, rows: Vec<Vec<f64>>, dim: usize) -> Result<()> {
        if rows.is_empty() {
            return Ok(());
        }
        let extra = EmbeddingMatrix::from_rows(&rows)?;
        self.attached_vectors = if self.attached_vectors.n_rows() == 0 {
            extra
        } else {
            self.attached_vectors.vstack(&extra)?
        };
        debug_assert_eq!(self.attached_vectors.dim(), dim);
        Ok(())
    }

    /// One JSON record per line: the instruction, each segment, then labels.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut line = |r: &Record| {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        };
        line(&Record::Instruction {
            instruction: self.instruction.clone(),
        });
        for s in &self.segments {
            line(&match s {
                Segment::Text(t) => Record::Text { t: t.clone() },
                Segment::Vector(v) => Record::Vector { v: *v },
            });
        }
        line(&Record::Labels {
            labels: self.demo_labels.clone(),
            query_count: self.query_count,
        });
        out
    }

    /// Inverse of [`PromptIr::to_jsonl`]; vectors are supplied separately.
    pub fn from_jsonl(reader: impl BufRead, attached_vectors: EmbeddingMatrix) -> Result<Self> {
        let mut instruction = None;
        let mut segments = Vec::new();
        let mut tail = None;
        for (row, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::Malformed {
                row,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            if tail.is_some() {
                return Err(Error::Malformed {
                    row,
                    message: "record after labels".into(),
                });
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Malformed {
                row,
                message: e.to_string(),
            })?;
            match rec {
                Record::Instruction { instruction: i } if instruction.is_none() && row == 0 => instruction = Some(i),
                Record::Instruction { .. } => {
                    return Err(Error::Malformed {
                        row,
                        message: "instruction must be the first record".into(),
                    })
                }
                _ if instruction.is_none() => {
                    return Err(Error::Malformed {
                        row,
                        message: "missing instruction record".into(),
                    })
                }
                Record::Text { t } => segments.push(Segment::Text(t)),
                Record::Vector { v } => {
                    if v >= attached_vectors.n_rows() {
                        return Err(Error::Malformed {
                            row,
                            message: format!("vector index {v} beyond {} attached rows", attached_vectors.n_rows()),
                        });
                    }
                    segments.push(Segment::Vector(v));
                }
                Record::Labels { labels, query_count } => tail = Some((labels, query_count)),
            }
        }
        let (demo_labels, query_count) = tail.ok_or_else(|| Error::invalid("prompt file has no labels record"))?;
        Ok(Self {
            instruction: instruction.unwrap_or_default(),
            segments,
            attached_vectors,
            demo_labels,
            query_count,
        })
    }

    /// Writes `<stem>.jsonl` and `<stem>.vectors.bin` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("{stem}.jsonl"));
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(&path, e))?;
        save_matrix(&self.attached_vectors, dir.join(format!("{stem}.vectors.bin")), MatrixFormat::Bin)
    }

    pub fn load(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let vectors = load_matrix(dir.join(format!("{stem}.vectors.bin")), MatrixFormat::Bin)?;
        let path = dir.join(format!("{stem}.jsonl"));
        let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_jsonl(BufReader::new(f), vectors)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Record {
    Instruction { instruction: String },
    Text { t: String },
    Vector { v: usize },
    Labels { labels: Vec<f64>, query_count: usize },
}

/// Uniform subset of `0..n` of size `min(n, cap)`, ascending.
pub fn downsample_pool(n: usize, cap: usize, seed: u64) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    let mut s = rng::stream(rng::mix(seed, 0));
    let mut pool = index::sample(&mut s, n, cap).into_vec();
    pool.sort_unstable();
    pool
}

/// Sizes of `k` contiguous bins over `n` items, larger bins first.
pub fn bin_sizes(n: usize, k: usize) -> Vec<usize> {
    let (base, extra) = (n / k, n % k);
    (0..k).map(|i| base + usize::from(i < extra)).collect()
}

pub fn stratified_sample(labels: &[f64], k: usize, seed: u64, pool_cap: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut pool = downsample_pool(labels.len(), pool_cap, seed);
    if k > pool.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the candidate pool of {}",
            pool.len()
        )));
    }
    pool.sort_by(|&a, &b| labels[a].total_cmp(&labels[b]).then(a.cmp(&b)));
    let mut s = rng::stream(rng::mix(seed, 1));
    let mut start = 0;
    let mut out = Vec::with_capacity(k);
    for size in bin_sizes(pool.len(), k) {
        let pick = rand::Rng::random_range(&mut s, 0..size);
        out.push(pool[start + pick]);
        start += size;
    }
    Ok(out)
}

pub fn build_demonstrations(
    mode: InjectionMode,
    inputs: &Inputs<'_>,
    selected: &[usize],
    instruction: &str,
) -> Result<PromptIr> {
    inputs.check(mode, selected)?;
    let dim = inputs.injected.map_or(0, |m| m.dim());
    let mut ir = PromptIr {
        instruction: instruction.to_string(),
        segments: Vec::new(),
        attached_vectors: EmbeddingMatrix::zeros(0, dim),
        demo_labels: Vec::with_capacity(selected.len()),
        query_count: 0,
    };
    let mut attached = Vec::new();
    for &row in selected {
        ir.push_input(mode, inputs, row, &mut attached);
        let label = inputs.dataset.labels()[row];
        ir.segments.push(Segment::Text(" Answer: ".into()));
        ir.segments.push(Segment::Text(format_fixed(label, LABEL_PRECISION)));
        ir.segments.push(Segment::Text("\n".into()));
        ir.demo_labels.push(label);
    }
    ir.attach(attached, dim)?;
    Ok(ir)
}

pub fn append_queries(mut ir: PromptIr, mode: InjectionMode, inputs: &Inputs<'_>, query_indices: &[usize]) -> Result<PromptIr> {
    if query_indices.is_empty() {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    inputs.check(mode, query_indices)?;
    if mode.uses_vectors() && ir.attached_vectors.n_rows() > 0 {
        let d = inputs.injected.expect("checked").dim();
        if d != ir.attached_vectors.dim() {
            return Err(Error::DimensionMismatch {
                context: "query vectors vs demonstration vectors",
                expected: ir.attached_vectors.dim(),
                found: d,
            });
        }
    }
    let dim = inputs.injected.map_or(ir.attached_vectors.dim(), |m| m.dim());
    let mut attached = Vec::new();
    for (n, &row) in query_indices.iter().enumerate() {
        ir.push_input(mode, inputs, row, &mut attached);
        ir.segments.push(Segment::Text(" Answer:".into()));
        if n + 1 < query_indices.len() {
            ir.segments.push(Segment::Text("\n".into()));
        }
    }
    if ir.attached_vectors.n_rows() == 0 && !attached.is_empty() {
        ir.attached_vectors = EmbeddingMatrix::zeros(0, dim);
    }
    ir.attach(attached, dim)?;
    ir.query_count += query_indices.len();
    Ok(ir)
}

/// Segments concatenated, each vector replaced by `placeholder`.
pub fn render_text(ir: &PromptIr, placeholder: &str) -> String {
    ir.segments
        .iter()
        .map(|s| match s {
            Segment::Text(t) => t.as_str(),
            Segment::Vector(_) => placeholder,
        })
        .collect()
}

/// Mean label of the `k` most cosine-similar demos, ties to the lower index.
pub fn knn_predict_vectors(demos: &EmbeddingMatrix, labels: &[f64], k: usize, queries: &EmbeddingMatrix) -> Result<Vec<f64>> {
    if demos.n_rows() == 0 {
        return Err(Error::NoVectorDemonstrations);
    }
    if labels.len() != demos.n_rows() {
        return Err(Error::DimensionMismatch {
            context: "demo labels vs demo vectors",
            expected: demos.n_rows(),
            found: labels.len(),
        });
    }
    if k == 0 || k > demos.n_rows() {
        return Err(Error::invalid(format!(
            "k_neighbors must be in [1, {}], got {k}",
            demos.n_rows()
        )));
    }
    if queries.dim() != demos.dim() {
        return Err(Error::DimensionMismatch {
            context: "query vector dim",
            expected: demos.dim(),
            found: queries.dim(),
        });
    }
    Ok((0..queries.n_rows())
        .into_par_iter()
        .map(|q| {
            let query = queries.row(q);
            let mut scored: Vec<(f64, usize)> = demos.rows().map(|d| cosine(query, d)).zip(0..).collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            scored[..k].iter().map(|&(_, i)| labels[i]).collect::<CompensatedSum>().value() / k as f64
        })
        .collect())
}

pub fn knn_predict(ir: &PromptIr, k_neighbors: usize, query_vectors: &EmbeddingMatrix) -> Result<Vec<f64>> {
    let demos = ir.demo_vectors().ok_or(Error::NoVectorDemonstrations)?;
    knn_predict_vectors(&demos, &ir.demo_labels, k_neighbors, query_vectors)
}

/// Something that turns a prompt into one prediction per query.
pub trait Predictor {
    fn predict(&self, ir: &PromptIr, query_vectors: &EmbeddingMatrix) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy)]
pub struct KnnSurrogate {
    pub k_neighbors: usize,
}

impl Default for KnnSurrogate {
    fn default() -> Self {
        Self {
            k_neighbors: DEFAULT_K_NEIGHBORS,
        }
    }
}

impl Predictor for KnnSurrogate {
    fn predict(&self, ir: &PromptIr, query_vectors: &EmbeddingMatrix) -> Result<Vec<f64>> {
        knn_predict(ir, self.k_neighbors, query_vectors)
    }
}
