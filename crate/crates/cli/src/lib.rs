//! The `icrl` command-line tool.
//!
//! Every command writes its artifacts and a `manifest.json` under `--out-dir`
//! and prints a one-line summary. Exit status: 0 on success, 1 for invalid
//! flags or inputs, 2 for failures while running (including a failed
//! `verify-theory` check).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use icrl::diagnostics::{
    cross_cosine, mean_pairwise_cosine, verify_activation_inflation, verify_cosine_preservation_with,
    verify_norm_concentration_with, Report, ReportFormat, TheoryReport, WeightSampling,
};
use icrl::embed_store::{load_matrix_auto, save_matrix, EmbeddingMatrix, LabeledDataset, MatrixFormat};
use icrl::ot_align::{apply_ot, fit_ot, OtFormula, OtMode};
use icrl::pca::{apply_pca, fit_pca, stringify, PcaModel, DEFAULT_PCA_DIM, DEFAULT_PRECISION};
use icrl::projector::{init_projector, project, random_noise, Activation, InitScheme};
use icrl::prompting::{
    append_queries, build_demonstrations, render_text, stratified_sample, Inputs, InjectionMode, DEFAULT_INSTRUCTION,
    DEFAULT_K_NEIGHBORS, DEFAULT_PLACEHOLDER, DEFAULT_POOL_CAP,
};
use icrl::synthetic::{linear_latent_with, LinearLatent};

pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;

use config::{Injector, OtChoice, RunConfig, DEFAULT_BATCH, DEFAULT_LLM_DIM, DEFAULT_SHOTS};
use error::{CliError, CliResult};
use manifest::{hash_input, hash_tree, Manifest, MANIFEST_NAME};

#[derive(Debug, Parser)]
#[command(name = "icrl", version, about = "Training-free alignment of embedding vectors to an LLM input space")]
pub struct Cli {
    /// Worker threads for parallel sections (0 = one per core); never changes outputs
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit PCA on embeddings and save the model
    FitPca(FitPcaArgs),
    /// Map embeddings to the LLM dimension (linear projection, zero padding or noise)
    Project(ProjectArgs),
    /// Fit per-dimension moment alignment of a source matrix to a target matrix
    AlignOt(AlignOtArgs),
    /// Render PCA-reduced embeddings as bracketed number strings
    Stringify(StringifyArgs),
    /// Assemble one demonstration set plus a batch of queries
    BuildPrompt(BuildPromptArgs),
    /// Cosine-similarity report for a set of vectors
    Diagnose(DiagnoseArgs),
    /// Monte Carlo check of norm concentration, cosine preservation and activation inflation
    VerifyTheory(VerifyTheoryArgs),
    /// Inject, align, prompt and score every row with the nearest-neighbor surrogate
    RunPipeline(PipelineArgs),
    /// Write a synthetic dataset whose labels are linear in a 2-D latent
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct InputArgs {
    /// Embedding matrix (.csv or binary)
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Dataset CSV (id,label[,text],e0,...); its embedding columns are used
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Directory for artifacts and manifest.json
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitPcaArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Number of principal components
    #[arg(long, default_value_t = DEFAULT_PCA_DIM)]
    pub pca_dim: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ProjectMethod {
    Linear,
    ZeroPad,
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum OutFormat {
    Bin,
    Csv,
}

impl OutFormat {
    fn matrix(self) -> MatrixFormat {
        match self {
            OutFormat::Bin => MatrixFormat::Bin,
            OutFormat::Csv => MatrixFormat::Csv,
        }
    }

    fn ext(self) -> &'static str {
        match self {
            OutFormat::Bin => "bin",
            OutFormat::Csv => "csv",
        }
    }
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, value_enum, default_value_t = ProjectMethod::Linear)]
    pub method: ProjectMethod,
    /// Output (LLM embedding) dimension
    #[arg(long, default_value_t = DEFAULT_LLM_DIM)]
    pub d_out: usize,
    /// Weight initialization: normal, glorot, he or dirac
    #[arg(long, default_value_t = InitScheme::Normal)]
    pub init: InitScheme,
    /// Output activation, ablation only: none, relu, gelu or sigmoid
    #[arg(long, default_value_t = Activation::None)]
    pub activation: Activation,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = OutFormat::Bin)]
    pub format: OutFormat,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct AlignOtArgs {
    /// Projected vectors to align (.csv or binary)
    #[arg(long)]
    pub source: PathBuf,
    /// Target vectors, e.g. mean token embeddings (.csv or binary)
    #[arg(long)]
    pub target: PathBuf,
    /// moment_matched: scale·(h − μ_src) + μ_src + shift; literal: scale·h + shift
    #[arg(long, default_value_t = OtFormula::MomentMatched)]
    pub formula: OtFormula,
    /// Recorded with the parameters: embed or pca
    #[arg(long, default_value_t = OtMode::Embed)]
    pub mode: OtMode,
    #[arg(long, value_enum, default_value_t = OutFormat::Bin)]
    pub format: OutFormat,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct StringifyArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Directory written by fit-pca
    #[arg(long)]
    pub pca_dir: PathBuf,
    /// Decimal places
    #[arg(long, default_value_t = DEFAULT_PRECISION)]
    pub precision: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct BuildPromptArgs {
    /// Dataset CSV (id,label[,text],e0,...)
    #[arg(long)]
    pub dataset: PathBuf,
    /// pca_string, embedding, raw_text_plus_embedding or raw_text_only
    #[arg(long, default_value_t = InjectionMode::Embedding)]
    pub mode: InjectionMode,
    /// Shots (demonstrations)
    #[arg(long, default_value_t = DEFAULT_SHOTS)]
    pub k: usize,
    /// Batch size (queries)
    #[arg(long, default_value_t = DEFAULT_BATCH)]
    pub b: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Vectors to inject, one row per dataset row; defaults to the dataset embeddings
    #[arg(long)]
    pub injected: Option<PathBuf>,
    /// PCA model for pca_string mode; fitted on the dataset when absent
    #[arg(long)]
    pub pca_dir: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_PCA_DIM)]
    pub pca_dim: usize,
    #[arg(long, default_value_t = DEFAULT_PRECISION)]
    pub precision: usize,
    #[arg(long, default_value = DEFAULT_INSTRUCTION)]
    pub instruction: String,
    /// Stands in for vectors in prompt.txt
    #[arg(long, default_value = DEFAULT_PLACEHOLDER)]
    pub placeholder: String,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// Vectors to analyze (.csv or binary)
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Paired text embeddings; adds a row-wise cross-cosine report
    #[arg(long)]
    pub text: Option<PathBuf>,
    /// csv or text
    #[arg(long, default_value = "csv")]
    pub format: ReportFormat,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct VerifyTheoryArgs {
    /// Projection dimension
    #[arg(long, default_value_t = 1000)]
    pub d: usize,
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Relative deviation for the Chebyshev bound
    #[arg(long, default_value_t = 0.1)]
    pub eps: f64,
    /// ‖b‖ in the norm check (‖u‖ = 1)
    #[arg(long, default_value_t = 0.0)]
    pub bias_norm: f64,
    /// cos(u, v) in the cosine check
    #[arg(long, default_value_t = 0.5)]
    pub cosine: f64,
    /// Correlations for the activation check
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.5,0.8")]
    pub rhos: Vec<f64>,
    /// relu, gelu, sigmoid or none
    #[arg(long, default_value_t = Activation::Relu)]
    pub activation: Activation,
    /// reduced or dense
    #[arg(long, default_value = "reduced")]
    pub sampling: WeightSampling,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Dataset CSV (id,label[,text],e0,...)
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Flat key=value file; explicit flags take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// LLM token-embedding table used for --normalize
    #[arg(long)]
    pub llm_table: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Shots per prompt
    #[arg(long, default_value_t = DEFAULT_SHOTS)]
    pub k: usize,
    /// Queries per prompt
    #[arg(long, default_value_t = DEFAULT_BATCH)]
    pub b: usize,
    #[arg(long, default_value_t = DEFAULT_PCA_DIM)]
    pub pca_dim: usize,
    #[arg(long, default_value_t = DEFAULT_PRECISION)]
    pub precision: usize,
    /// pca_string, embedding, raw_text_plus_embedding or raw_text_only
    #[arg(long, default_value_t = InjectionMode::Embedding)]
    pub mode: InjectionMode,
    #[arg(long, value_enum, default_value_t = Injector::Projection)]
    pub injector: Injector,
    /// Projection initialization: normal, glorot, he or dirac
    #[arg(long, default_value_t = InitScheme::Normal)]
    pub init: InitScheme,
    /// Alignment target: none, embed or pca
    #[arg(long, default_value_t = OtChoice(Some(OtMode::Embed)))]
    pub ot: OtChoice,
    /// moment_matched or literal
    #[arg(long, default_value_t = OtFormula::MomentMatched)]
    pub formula: OtFormula,
    /// Rescale rows to the LLM embedding-table statistics
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    pub normalize: bool,
    #[arg(long, default_value_t = DEFAULT_LLM_DIM)]
    pub llm_dim: usize,
    /// Neighbors averaged by the surrogate predictor
    #[arg(long, default_value_t = DEFAULT_K_NEIGHBORS)]
    pub k_neighbors: usize,
    /// Seed of the mock token embedder
    #[arg(long, default_value_t = 0)]
    pub embedder_seed: u64,
    #[arg(long, default_value = DEFAULT_INSTRUCTION)]
    pub instruction: String,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub d_fm: usize,
    /// Std of embedding and label noise
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Length of a constant offset added to every embedding
    #[arg(long, default_value_t = 0.0)]
    pub offset_norm: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

/// Flags that never influence artifacts.
const UNRECORDED: &[&str] = &["out_dir", "threads", "config"];

fn recorded_flags(m: &ArgMatches) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for id in m.ids() {
        let id = id.as_str();
        if UNRECORDED.contains(&id) {
            continue;
        }
        if let Ok(Some(values)) = m.try_get_raw(id) {
            let v: Vec<String> = values.map(|v| v.to_string_lossy().into_owned()).collect();
            out.insert(id.to_string(), v.join(","));
        }
    }
    out
}

struct Ctx {
    command: &'static str,
    flags: BTreeMap<String, String>,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    out_dir: PathBuf,
}

impl Ctx {
    fn new(command: &'static str, m: &ArgMatches, out_dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(out_dir)
            .map_err(|e| CliError::runtime(format!("cannot create --out-dir {}: {e}", out_dir.display())))?;
        Ok(Self {
            command,
            flags: recorded_flags(m),
            seed: None,
            inputs: Vec::new(),
            out_dir: out_dir.to_path_buf(),
        })
    }

    fn input(&mut self, p: &Path) -> CliResult<()> {
        if !p.exists() {
            return Err(CliError::usage(format!("no such input {}", p.display())));
        }
        self.inputs.push(p.to_path_buf());
        Ok(())
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out_dir.join(rel)
    }

    fn write(&self, rel: &str, text: &str) -> CliResult<()> {
        let p = self.path(rel);
        fs::write(&p, text).map_err(|e| CliError::runtime(format!("cannot write {}: {e}", p.display())))
    }

    fn finish(self, summary: String) -> CliResult<()> {
        let mut inputs = BTreeMap::new();
        for p in &self.inputs {
            hash_input(p, &mut inputs)?;
        }
        Manifest {
            command: self.command.to_string(),
            flags: self.flags,
            seed: self.seed,
            inputs,
            artifacts: hash_tree(&self.out_dir, &[MANIFEST_NAME])?,
        }
        .write(&self.out_dir)?;
        println!("{summary}");
        Ok(())
    }
}

fn load_input(ctx: &mut Ctx, input: &InputArgs) -> CliResult<(EmbeddingMatrix, Option<LabeledDataset>)> {
    if let Some(p) = &input.embeddings {
        ctx.input(p)?;
        return Ok((load_matrix_auto(p)?, None));
    }
    let p = input.dataset.as_ref().expect("clap enforces one input");
    ctx.input(p)?;
    let ds = LabeledDataset::load_csv(p)?;
    Ok((ds.embeddings().clone(), Some(ds)))
}

fn fit_pca_cmd(a: &FitPcaArgs, m: &ArgMatches) -> CliResult<()> {
    let mut ctx = Ctx::new("fit-pca", m, &a.out.out_dir)?;
    let (h, _) = load_input(&mut ctx, &a.input)?;
    let model = fit_pca(&h, a.pca_dim)?;
    model.save(ctx.path("pca"))?;
    let total: f64 = icrl::pca::population_covariance(&h).1.iter().step_by(h.dim() + 1).sum();
    let kept: f64 = model.explained_variance().iter().sum();
    let ratio = if total > 0.0 { kept / total } else { 1.0 };
    ctx.finish(format!(
        "fit-pca: {}x{} -> {} components, explained variance ratio {ratio:.4}",
        h.n_rows(),
        h.dim(),
        model.d_reduced()
    ))
}

fn project_cmd(a: &ProjectArgs, m: &ArgMatches) -> CliResult<()> {
    let mut ctx = Ctx::new("project", m, &a.out.out_dir)?;
    ctx.seed = Some(a.seed);
    let (h, ds) = load_input(&mut ctx, &a.input)?;
    let out = match a.method {
        ProjectMethod::Linear => {
            let spec = init_projector(h.dim(), a.d_out, a.init, a.seed, &[])?.with_activation(a.activation);
            spec.save(ctx.path("projector"))?;
            project(&spec, &h)?
        }
        ProjectMethod::ZeroPad => icrl::projector::zero_pad(&h, a.d_out)?,
        ProjectMethod::Noise => {
            let ids: Vec<String> = match &ds {
                Some(ds) => ds.ids().to_vec(),
                None => (0..h.n_rows()).map(|i| i.to_string()).collect(),
            };
            random_noise(&ids, a.d_out, a.seed)?
        }
    };
    let name = format!("projected.{}", a.format.ext());
    save_matrix(&out, ctx.path(&name), a.format.matrix())?;
    ctx.finish(format!("project: {}x{} -> {}x{} ({name})", h.n_rows(), h.dim(), out.n_rows(), out.dim()))
}

fn align_ot_cmd(a: &AlignOtArgs, m: &ArgMatches) -> CliResult<()> {
    let mut ctx = Ctx::new("align-ot", m, &a.out.out_dir)?;
    ctx.input(&a.source)?;
    ctx.input(&a.target)?;
    let src = load_matrix_auto(&a.source)?;
    let tar = load_matrix_auto(&a.target)?;
    let params = fit_ot(&src, &tar, a.mode, a.formula)?;
    let aligned = apply_ot(&params, &src)?;
    params.save(ctx.path("ot"))?;
    let name = format!("aligned.{}", a.format.ext());
    save_matrix(&aligned, ctx.path(&name), a.format.matrix())?;
    ctx.finish(format!("align-ot: {} rows x {} dims aligned ({}, {name})", src.n_rows(), src.dim(), a.formula))
}

fn stringify_cmd(a: &StringifyArgs, m: &ArgMatches) -> CliResult<()> {
    let mut ctx = Ctx::new("stringify", m, &a.out.out_dir)?;
    let (h, _) = load_input(&mut ctx, &a.input)?;
    ctx.input(&a.pca_dir)?;
    let model = PcaModel::load(&a.pca_dir)?;
    let strings = stringify(&apply_pca(&model, &h)?, a.precision)?;
    let mut text = strings.join("\n");
    text.push('\n');
    ctx.write("strings.txt", &text)?;
    ctx.finish(format!("stringify: {} rows -> strings.txt", strings.len()))
}

fn build_prompt_cmd(a: &BuildPromptArgs, m: &ArgMatches) -> CliResult<()> {
    let mut ctx = Ctx::new("build-prompt", m, &a.out.out_dir)?;
    ctx.seed = Some(a.seed);
    if a.k == 0 || a.b == 0 {
        return Err(CliError::usage("--k and --b must be at least 1"));
    }
    ctx.input(&a.dataset)?;
    let ds = LabeledDataset::load_csv(&a.dataset)?;
    if a.k + a.b > ds.len() {
        return Err(CliError::usage(format!(
            "--k ({}) plus --b ({}) exceeds the {} dataset rows",
            a.k,
            a.b,
            ds.len()
        )));
    }
    let injected = match &a.injected {
        Some(p) => {
            ctx.input(p)?;
            Some(load_matrix_auto(p)?)
        }
        None if a.mode.uses_vectors() => Some(ds.embeddings().clone()),
        None => None,
    };
    let strings = if a.mode == InjectionMode::PcaString {
        let model = match &a.pca_dir {
            Some(p) => {
                ctx.input(p)?;
                PcaModel::load(p)?
            }
            None => fit_pca(ds.embeddings(), a.pca_dim)?,
        };
        Some(stringify(&apply_pca(&model, ds.embeddings())?, a.precision)?)
    } else {
        None
    };
    let demos = stratified_sample(ds.labels(), a.k, a.seed, DEFAULT_POOL_CAP)?;
    let queries: Vec<usize> = (0..ds.len()).filter(|i| !demos.contains(i)).take(a.b).collect();
    let mut inputs = Inputs::new(&ds);
    if let Some(m) = &injected {
        inputs = inputs.with_injected(m);
    }
    if let Some(s) = &strings {
        inputs = inputs.with_pca_strings(s);
    }
    let ir = build_demonstrations(a.mode, &inputs, &demos, &a.instruction)?;
    let ir = append_queries(ir, a.mode, &inputs, &queries)?;
    ir.save(&a.out.out_dir, "prompt")?;
    ctx.write("prompt.txt", &format!("{}\n{}\n", ir.instruction, render_text(&ir, &a.placeholder)))?;
    ctx.finish(format!(
        "build-prompt: {} demonstrations, {} queries, {} vectors ({})",
        ir.n_demos(),
        ir.query_count,
        ir.vector_segment_count(),
        a.mode
    ))
}

fn diagnose_cmd(a: &DiagnoseArgs, m: &ArgMatches) -> CliResult<()> {
    let mut ctx = Ctx::new("diagnose", m, &a.out.out_dir)?;
    ctx.input(&a.embeddings)?;
    let h = load_matrix_auto(&a.embeddings)?;
    let ext = match a.format {
        ReportFormat::Csv => "csv",
        ReportFormat::Text => "txt",
    };
    let pairwise = mean_pairwise_cosine(&h)?;
    ctx.write(&format!("similarity.{ext}"), &pairwise.render(a.format))?;
    let mut summary = format!(
        "diagnose: mean pairwise cosine {:.6} over {} pairs",
        pairwise.mean_pairwise_cosine, pairwise.n_pairs
    );
    if let Some(t) = &a.text {
        ctx.input(t)?;
        let cross = cross_cosine(&h, &load_matrix_auto(t)?)?;
        ctx.write(&format!("cross.{ext}"), &cross.render(a.format))?;
        summary.push_str(&format!(", cross cosine {:.6}", cross.mean_pairwise_cosine));
    }
    ctx.finish(summary)
}

fn rho_tag(rho: f64) -> String {
    format!("{rho}").replace('.', "_").replace('-', "m")
}

fn verify_theory_cmd(a: &VerifyTheoryArgs, m: &ArgMatches) -> CliResult<()> {
    let mut ctx = Ctx::new("verify-theory", m, &a.out.out_dir)?;
    ctx.seed = Some(a.seed);
    if a.d < 2 {
        return Err(CliError::usage("--d must be at least 2"));
    }
    if !(-1.0..=1.0).contains(&a.cosine) {
        return Err(CliError::usage("--cosine must be in [-1, 1]"));
    }
    let d = a.d;
    let mut u = vec![0.0; d];
    u[0] = 1.0;
    let mut b = vec![0.0; d];
    b[1] = a.bias_norm;
    let mut v = vec![0.0; d];
    v[0] = a.cosine;
    v[1] = (1.0 - a.cosine * a.cosine).sqrt();

    let mut rows: Vec<(String, TheoryReport)> = Vec::new();
    let norm = verify_norm_concentration_with(d, &u, &b, a.trials, icrl::rng::mix(a.seed, 1), a.eps, a.sampling)?;
    rows.push(("norm".into(), norm));
    let cos = verify_cosine_preservation_with(d, &u, &v, a.trials, icrl::rng::mix(a.seed, 2), a.sampling)?;
    rows.push(("cosine".into(), cos.theory));
    for (i, &rho) in a.rhos.iter().enumerate() {
        let r = verify_activation_inflation(rho, d, a.trials, a.activation, icrl::rng::mix(a.seed, 3 + i as u64))?;
        rows.push((format!("inflation_{}_rho_{}", a.activation, rho_tag(rho)), r.theory));
    }

    let mut csv = format!("check,{}\n", TheoryReport::CSV_HEADER);
    for (name, r) in &rows {
        ctx.write(&format!("{name}.csv"), &r.to_csv())?;
        csv.push_str(&format!("{name},{}\n", r.csv_row()));
    }
    ctx.write("theory.csv", &csv)?;
    let failed: Vec<&str> = rows.iter().filter(|(_, r)| !r.pass).map(|(n, _)| n.as_str()).collect();
    let passed = rows.len() - failed.len();
    ctx.finish(format!("verify-theory: {passed}/{} checks passed", rows.len()))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::runtime(format!("failed checks: {}", failed.join(", "))))
    }
}

fn resolve_config(a: &PipelineArgs, m: &ArgMatches) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &a.config {
        cfg.apply_file(p)?;
    }
    let explicit = |id: &str| m.value_source(id) == Some(ValueSource::CommandLine);
    macro_rules! take {
        ($($field:ident),+ $(,)?) => {
            $(if explicit(stringify!($field)) {
                cfg.$field = a.$field.clone();
            })+
        };
    }
    take!(seed, k, b, pca_dim, precision, mode, injector, init, ot, formula, normalize, llm_dim, k_neighbors, embedder_seed, instruction);
    if a.dataset.is_some() {
        cfg.dataset = a.dataset.clone();
    }
    if a.llm_table.is_some() {
        cfg.llm_table = a.llm_table.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_pipeline_cmd(a: &PipelineArgs, m: &ArgMatches) -> CliResult<()> {
    let cfg = resolve_config(a, m)?;
    let mut ctx = Ctx::new("run-pipeline", m, &a.out.out_dir)?;
    ctx.flags = cfg.pairs().into_iter().collect();
    ctx.seed = Some(cfg.seed);
    let dataset_path = cfg.dataset.clone().expect("validated");
    ctx.input(&dataset_path)?;
    let ds = LabeledDataset::load_csv(&dataset_path)?;
    let table = match &cfg.llm_table {
        Some(p) => {
            ctx.input(p)?;
            Some(load_matrix_auto(p)?)
        }
        None => None,
    };
    let out = pipeline::run_pipeline(&cfg, &ds, table.as_ref())?;
    let mut csv = String::from("id,prediction\n");
    for (id, p) in ds.ids().iter().zip(&out.predictions) {
        csv.push_str(&format!("{},{p:?}\n", csv_field(id)));
    }
    ctx.write("predictions.csv", &csv)?;
    ctx.write("metrics.txt", &out.metrics.render())?;
    out.first_prompt.save(&a.out.out_dir, "prompt")?;
    ctx.finish(format!(
        "run-pipeline: {} rows, pearson {:.4}, spearman {:.4}, rmse {:.4}",
        ds.len(),
        out.metrics.pearson,
        out.metrics.spearman,
        out.metrics.rmse
    ))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn synth_cmd(a: &SynthArgs, m: &ArgMatches) -> CliResult<()> {
    let mut ctx = Ctx::new("synth", m, &a.out.out_dir)?;
    ctx.seed = Some(a.seed);
    let ds = linear_latent_with(LinearLatent {
        n: a.n,
        d_fm: a.d_fm,
        noise: a.noise,
        offset_norm: a.offset_norm,
        seed: a.seed,
    })?;
    ds.save_csv(ctx.path("dataset.csv"))?;
    ctx.finish(format!("synth: {} rows, d_fm {} -> dataset.csv", ds.len(), a.d_fm))
}

fn dispatch(cli: &Cli, m: &ArgMatches) -> CliResult<()> {
    let (_, sub) = m.subcommand().expect("subcommand required");
    match &cli.command {
        Command::FitPca(a) => fit_pca_cmd(a, sub),
        Command::Project(a) => project_cmd(a, sub),
        Command::AlignOt(a) => align_ot_cmd(a, sub),
        Command::Stringify(a) => stringify_cmd(a, sub),
        Command::BuildPrompt(a) => build_prompt_cmd(a, sub),
        Command::Diagnose(a) => diagnose_cmd(a, sub),
        Command::VerifyTheory(a) => verify_theory_cmd(a, sub),
        Command::RunPipeline(a) => run_pipeline_cmd(a, sub),
        Command::Synth(a) => synth_cmd(a, sub),
    }
}

/// Parse `args` (program name first) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    let result = if cli.threads > 0 {
        match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
            Ok(pool) => pool.install(|| dispatch(&cli, &matches)),
            Err(e) => Err(CliError::runtime(format!("cannot start thread pool: {e}"))),
        }
    } else {
        dispatch(&cli, &matches)
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
