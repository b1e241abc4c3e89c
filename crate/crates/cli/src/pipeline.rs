//! End-to-end run: inject, align, build a prompt per batch of queries, and
//! score the queries with the k-nearest-neighbor surrogate.
//!
//! Every row is queried once, in index order, in batches of `b`. The
//! demonstrations for batch `j` are a stratified sample (seed `mix(seed, j)`)
//! of the rows outside that batch. Text-only modes have no vectors in the
//! prompt, so the surrogate reads the text instead: PCA strings are parsed
//! back into numbers and raw texts are mean token embeddings.

use std::collections::BTreeSet;

use rayon::prelude::*;

use icrl::embed_store::{fit_normalization, EmbeddingMatrix, LabeledDataset, NormalizationParams};
use icrl::ot_align::{apply_ot, build_ot_target, fit_ot, normalize_rows, MockTextEmbedder, OtMode, TextEmbedder};
use icrl::pca::{apply_pca, fit_pca, parse_vector_string, stringify, PcaModel};
use icrl::projector::{init_projector, project, random_noise, zero_pad};
use icrl::prompting::{
    append_queries, build_demonstrations, knn_predict_vectors, stratified_sample, Inputs, InjectionMode, KnnSurrogate,
    Predictor, PromptIr, DEFAULT_POOL_CAP,
};
use icrl::{rng, stats};

use crate::config::{Injector, RunConfig};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub pearson: f64,
    pub spearman: f64,
    pub rmse: f64,
}

impl Metrics {
    pub fn compute(predicted: &[f64], truth: &[f64]) -> Self {
        Self {
            pearson: stats::pearson(predicted, truth),
            spearman: stats::spearman(predicted, truth),
            rmse: stats::rmse(predicted, truth),
        }
    }

    pub fn render(&self) -> String {
        format!("pearson={:?}\nspearman={:?}\nrmse={:?}\n", self.pearson, self.spearman, self.rmse)
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub predictions: Vec<f64>,
    pub metrics: Metrics,
    pub first_prompt: PromptIr,
}

/// Contiguous batches of `b` indices covering `0..n`.
pub fn batches(n: usize, b: usize) -> Vec<Vec<usize>> {
    (0..n).step_by(b).map(|s| (s..(s + b).min(n)).collect()).collect()
}

fn embed_all(embedder: &MockTextEmbedder, texts: &[String]) -> CliResult<EmbeddingMatrix> {
    let rows: Vec<Vec<f64>> = texts
        .par_iter()
        .map(|t| embedder.embed_mean(t).map_err(|e| CliError::runtime(format!("embedding {t:?}: {e}"))))
        .collect::<CliResult<_>>()?;
    Ok(EmbeddingMatrix::from_rows(&rows)?)
}

/// Statistics of the LLM embedding table, or of the mock table over every
/// distinct token in the dataset texts.
fn normalization(ds: &LabeledDataset, table: Option<&EmbeddingMatrix>, embedder: &MockTextEmbedder) -> CliResult<NormalizationParams> {
    if let Some(t) = table {
        return Ok(fit_normalization(t)?);
    }
    let texts = ds
        .raw_texts()
        .ok_or_else(|| CliError::usage("--normalize needs --llm-table or a dataset with texts"))?;
    let vocab: BTreeSet<&str> = texts.iter().flat_map(|t| t.split_whitespace()).collect();
    let rows: Vec<Vec<f64>> = vocab.iter().map(|t| embedder.token_vector(t)).collect();
    Ok(fit_normalization(&EmbeddingMatrix::from_rows(&rows)?)?)
}

struct Prepared {
    injected: Option<EmbeddingMatrix>,
    pca_strings: Option<Vec<String>>,
    /// What the surrogate compares, one row per dataset row.
    surrogate: EmbeddingMatrix,
}

fn check_inputs(cfg: &RunConfig, ds: &LabeledDataset) -> CliResult<()> {
    let n = ds.len();
    if n < 2 {
        return Err(CliError::usage("dataset needs at least 2 rows"));
    }
    let pool = n.saturating_sub(cfg.b.min(n)).min(DEFAULT_POOL_CAP);
    if cfg.k > pool {
        return Err(CliError::usage(format!(
            "--k ({}) exceeds the demonstration pool of {pool} rows",
            cfg.k
        )));
    }
    let needs_embeddings = cfg.mode.uses_vectors() && cfg.injector != Injector::Noise || cfg.mode == InjectionMode::PcaString;
    if needs_embeddings && ds.embeddings().dim() == 0 {
        return Err(CliError::usage(format!("--mode {} needs embedding columns in --dataset", cfg.mode)));
    }
    if cfg.mode.uses_raw_text() && ds.raw_texts().is_none() {
        return Err(CliError::usage(format!("--mode {} needs a text column in --dataset", cfg.mode)));
    }
    if cfg.mode.uses_vectors() && cfg.ot.0 == Some(OtMode::Embed) && ds.raw_texts().is_none() {
        return Err(CliError::usage("--ot embed needs a text column in --dataset"));
    }
    Ok(())
}

fn pca_model(cfg: &RunConfig, ds: &LabeledDataset) -> CliResult<PcaModel> {
    let h = ds.embeddings();
    let dim = cfg.pca_dim.min(h.n_rows()).min(h.dim());
    Ok(fit_pca(h, dim)?)
}

fn prepare(cfg: &RunConfig, ds: &LabeledDataset, table: Option<&EmbeddingMatrix>) -> CliResult<Prepared> {
    let embedder = MockTextEmbedder::new(cfg.llm_dim, cfg.embedder_seed);
    match cfg.mode {
        InjectionMode::PcaString => {
            let model = pca_model(cfg, ds)?;
            let strings = stringify(&apply_pca(&model, ds.embeddings())?, cfg.precision)?;
            let parsed = strings.iter().map(|s| parse_vector_string(s)).collect::<icrl::Result<Vec<_>>>()?;
            Ok(Prepared {
                injected: None,
                surrogate: EmbeddingMatrix::from_rows(&parsed)?,
                pca_strings: Some(strings),
            })
        }
        InjectionMode::RawTextOnly => Ok(Prepared {
            injected: None,
            pca_strings: None,
            surrogate: embed_all(&embedder, ds.raw_texts().expect("checked"))?,
        }),
        InjectionMode::Embedding | InjectionMode::RawTextPlusEmbedding => {
            let h = ds.embeddings();
            let mut injected = match cfg.injector {
                Injector::Projection => {
                    let spec = init_projector(h.dim(), cfg.llm_dim, cfg.init, cfg.seed, &[])?;
                    project(&spec, h)?
                }
                Injector::ZeroPad => zero_pad(h, cfg.llm_dim)?,
                Injector::Noise => random_noise(ds.ids(), cfg.llm_dim, cfg.seed)?,
            };
            if let Some(mode) = cfg.ot.0 {
                let model = match mode {
                    OtMode::Pca => Some(pca_model(cfg, ds)?),
                    OtMode::Embed => None,
                };
                let target = build_ot_target(mode, ds, &embedder, model.as_ref(), cfg.precision)?;
                let params = fit_ot(&injected, &target, mode, cfg.formula)?;
                injected = apply_ot(&params, &injected)?;
            }
            if cfg.normalize {
                injected = normalize_rows(&injected, &normalization(ds, table, &embedder)?)?;
            }
            Ok(Prepared {
                surrogate: injected.clone(),
                injected: Some(injected),
                pca_strings: None,
            })
        }
    }
}

fn batch_prompt(cfg: &RunConfig, ds: &LabeledDataset, prep: &Prepared, j: usize, batch: &[usize]) -> CliResult<(PromptIr, Vec<usize>)> {
    let n = ds.len();
    let candidates: Vec<usize> = (0..n).filter(|i| !batch.contains(i)).collect();
    let labels: Vec<f64> = candidates.iter().map(|&i| ds.labels()[i]).collect();
    let picked = stratified_sample(&labels, cfg.k, rng::mix(cfg.seed, j as u64), DEFAULT_POOL_CAP)?;
    let demos: Vec<usize> = picked.iter().map(|&p| candidates[p]).collect();
    let mut inputs = Inputs::new(ds);
    if let Some(m) = &prep.injected {
        inputs = inputs.with_injected(m);
    }
    if let Some(s) = &prep.pca_strings {
        inputs = inputs.with_pca_strings(s);
    }
    let ir = build_demonstrations(cfg.mode, &inputs, &demos, &cfg.instruction)?;
    Ok((append_queries(ir, cfg.mode, &inputs, batch)?, demos))
}

pub fn run_pipeline(cfg: &RunConfig, ds: &LabeledDataset, table: Option<&EmbeddingMatrix>) -> CliResult<PipelineOutput> {
    check_inputs(cfg, ds)?;
    let prep = prepare(cfg, ds, table)?;
    let surrogate = KnnSurrogate {
        k_neighbors: cfg.k_neighbors,
    };
    let all = batches(ds.len(), cfg.b);
    let scored: Vec<(Vec<f64>, Option<PromptIr>)> = all
        .par_iter()
        .enumerate()
        .map(|(j, batch)| {
            let (ir, demos) = batch_prompt(cfg, ds, &prep, j, batch)?;
            let queries = prep.surrogate.select_rows(batch);
            let preds = if cfg.mode.uses_vectors() {
                surrogate.predict(&ir, &queries)?
            } else {
                knn_predict_vectors(&prep.surrogate.select_rows(&demos), &ir.demo_labels, cfg.k_neighbors, &queries)?
            };
            Ok((preds, (j == 0).then_some(ir)))
        })
        .collect::<CliResult<_>>()?;
    let mut first_prompt = None;
    let mut predictions = Vec::with_capacity(ds.len());
    for (preds, ir) in scored {
        predictions.extend(preds);
        if ir.is_some() {
            first_prompt = ir;
        }
    }
    Ok(PipelineOutput {
        metrics: Metrics::compute(&predictions, ds.labels()),
        predictions,
        first_prompt: first_prompt.expect("at least one batch"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use icrl::synthetic::linear_latent;

    #[test]
    fn batches_cover_rows() {
        assert_eq!(batches(7, 3), vec![vec![0, 1, 2], vec![3, 4, 5], vec![6]]);
    }

    #[test]
    fn raw_text_only_without_embeddings() {
        let ds = linear_latent(40, 4, 0.1, 1).unwrap();
        let bare = LabeledDataset::new(ds.ids().to_vec(), ds.raw_texts().map(|t| t.to_vec()), EmbeddingMatrix::zeros(40, 0), ds.labels().to_vec()).unwrap();
        let cfg = RunConfig { mode: InjectionMode::RawTextOnly, llm_dim: 32, ..RunConfig::default() };
        let out = run_pipeline(&cfg, &bare, None).unwrap();
        assert_eq!(out.predictions.len(), 40);
        assert_eq!(out.first_prompt.vector_segment_count(), 0);
        assert_eq!(out.first_prompt.query_count, 3);
        assert_eq!(out.first_prompt.n_demos(), 5);
    }

    #[test]
    fn every_mode_runs() {
        let ds = linear_latent(60, 8, 0.1, 2).unwrap();
        for mode in [InjectionMode::PcaString, InjectionMode::Embedding, InjectionMode::RawTextPlusEmbedding, InjectionMode::RawTextOnly] {
            for injector in [Injector::Projection, Injector::ZeroPad, Injector::Noise] {
                let cfg = RunConfig { mode, injector, llm_dim: 64, pca_dim: 3, normalize: true, k: 10, ..RunConfig::default() };
                let out = run_pipeline(&cfg, &ds, None).unwrap();
                assert!(out.predictions.iter().all(|p| p.is_finite()));
            }
        }
    }

    #[test]
    fn oversized_k_is_a_usage_error() {
        let ds = linear_latent(10, 4, 0.1, 3).unwrap();
        let cfg = RunConfig { k: 8, llm_dim: 16, ..RunConfig::default() };
        assert_eq!(run_pipeline(&cfg, &ds, None).unwrap_err().exit_code(), 1);
    }
}
