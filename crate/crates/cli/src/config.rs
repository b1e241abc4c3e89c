//! Pipeline configuration: command-line flags override a flat `key=value`
//! file, which overrides the defaults.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use icrl::ot_align::{OtFormula, OtMode};
use icrl::pca::{DEFAULT_PCA_DIM, DEFAULT_PRECISION, MAX_PRECISION};
use icrl::projector::InitScheme;
use icrl::prompting::{InjectionMode, DEFAULT_INSTRUCTION, DEFAULT_K_NEIGHBORS};

use crate::error::{CliError, CliResult};

pub const DEFAULT_SHOTS: usize = 5;
pub const DEFAULT_BATCH: usize = 3;
pub const DEFAULT_LLM_DIM: usize = 4096;

/// How FM vectors become LLM-dimension vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Injector {
    Projection,
    ZeroPad,
    Noise,
}

impl Injector {
    pub fn as_str(self) -> &'static str {
        match self {
            Injector::Projection => "projection",
            Injector::ZeroPad => "zero-pad",
            Injector::Noise => "noise",
        }
    }
}

impl FromStr for Injector {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "projection" => Ok(Injector::Projection),
            "zero-pad" => Ok(Injector::ZeroPad),
            "noise" => Ok(Injector::Noise),
            other => Err(CliError::usage(format!("unknown injector {other:?}"))),
        }
    }
}

/// `none`, `embed` or `pca`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OtChoice(pub Option<OtMode>);

impl FromStr for OtChoice {
    type Err = icrl::Error;

    fn from_str(s: &str) -> icrl::Result<Self> {
        if s == "none" {
            Ok(OtChoice(None))
        } else {
            s.parse().map(|m| OtChoice(Some(m)))
        }
    }
}

impl std::fmt::Display for OtChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.0 {
            None => f.write_str("none"),
            Some(m) => write!(f, "{m}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub llm_table: Option<PathBuf>,
    pub seed: u64,
    pub k: usize,
    pub b: usize,
    pub pca_dim: usize,
    pub precision: usize,
    pub mode: InjectionMode,
    pub injector: Injector,
    pub init: InitScheme,
    pub ot: OtChoice,
    pub formula: OtFormula,
    pub normalize: bool,
    pub llm_dim: usize,
    pub k_neighbors: usize,
    pub embedder_seed: u64,
    pub instruction: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            llm_table: None,
            seed: 0,
            k: DEFAULT_SHOTS,
            b: DEFAULT_BATCH,
            pca_dim: DEFAULT_PCA_DIM,
            precision: DEFAULT_PRECISION,
            mode: InjectionMode::Embedding,
            injector: Injector::Projection,
            init: InitScheme::Normal,
            ot: OtChoice(Some(OtMode::Embed)),
            formula: OtFormula::MomentMatched,
            normalize: false,
            llm_dim: DEFAULT_LLM_DIM,
            k_neighbors: DEFAULT_K_NEIGHBORS,
            embedder_seed: 0,
            instruction: DEFAULT_INSTRUCTION.to_string(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> CliResult<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| CliError::usage(format!("invalid value {value:?} for {key}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> CliResult<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(CliError::usage(format!("invalid value {value:?} for {key}: expected true or false"))),
    }
}

impl RunConfig {
    /// Keys use underscores; dashes are accepted too.
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let key = key.replace('-', "_");
        let k = key.as_str();
        match k {
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "llm_table" => self.llm_table = Some(PathBuf::from(value)),
            "seed" => self.seed = parse(k, value)?,
            "k" => self.k = parse(k, value)?,
            "b" => self.b = parse(k, value)?,
            "pca_dim" => self.pca_dim = parse(k, value)?,
            "precision" => self.precision = parse(k, value)?,
            "mode" => self.mode = parse(k, value)?,
            "injector" => self.injector = parse(k, value)?,
            "init" => self.init = parse(k, value)?,
            "ot" => self.ot = parse(k, value)?,
            "formula" => self.formula = parse(k, value)?,
            "normalize" => self.normalize = parse_bool(k, value)?,
            "llm_dim" => self.llm_dim = parse(k, value)?,
            "k_neighbors" => self.k_neighbors = parse(k, value)?,
            "embedder_seed" => self.embedder_seed = parse(k, value)?,
            "instruction" => self.instruction = value.to_string(),
            _ => return Err(CliError::usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Blank lines and lines starting with `#` are ignored.
    pub fn apply_text(&mut self, text: &str) -> CliResult<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("config line {}: expected key=value", n + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> CliResult<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn validate(&self) -> CliResult<()> {
        let at_least_one = [("--k", self.k), ("--b", self.b), ("--pca-dim", self.pca_dim), ("--llm-dim", self.llm_dim), ("--k-neighbors", self.k_neighbors)];
        for (flag, v) in at_least_one {
            if v == 0 {
                return Err(CliError::usage(format!("{flag} must be at least 1")));
            }
        }
        if self.precision > MAX_PRECISION {
            return Err(CliError::usage(format!("--precision must be at most {MAX_PRECISION}")));
        }
        if self.k_neighbors > self.k {
            return Err(CliError::usage(format!(
                "--k-neighbors ({}) must not exceed --k ({})",
                self.k_neighbors, self.k
            )));
        }
        let dataset = self.dataset.as_ref().ok_or_else(|| CliError::usage("--dataset is required"))?;
        for (flag, p) in [("--dataset", Some(dataset)), ("--llm-table", self.llm_table.as_ref())] {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(CliError::usage(format!("{flag}: no such file {}", p.display())));
                }
            }
        }
        Ok(())
    }

    /// Resolved settings as ordered `key=value` pairs.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let opt = |p: &Option<PathBuf>| p.as_ref().map_or_else(String::new, |p| p.display().to_string());
        [
            ("dataset", opt(&self.dataset)),
            ("llm_table", opt(&self.llm_table)),
            ("seed", self.seed.to_string()),
            ("k", self.k.to_string()),
            ("b", self.b.to_string()),
            ("pca_dim", self.pca_dim.to_string()),
            ("precision", self.precision.to_string()),
            ("mode", self.mode.to_string()),
            ("injector", self.injector.as_str().to_string()),
            ("init", self.init.to_string()),
            ("ot", self.ot.to_string()),
            ("formula", self.formula.to_string()),
            ("normalize", self.normalize.to_string()),
            ("llm_dim", self.llm_dim.to_string()),
            ("k_neighbors", self.k_neighbors.to_string()),
            ("embedder_seed", self.embedder_seed.to_string()),
            ("instruction", self.instruction.clone()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_defaults() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nk = 9\nmode=raw_text_only\n\not=none\nnormalize=on\n").unwrap();
        assert_eq!(c.k, 9);
        assert_eq!(c.mode, InjectionMode::RawTextOnly);
        assert_eq!(c.ot, OtChoice(None));
        assert!(c.normalize);
        assert_eq!(c.b, DEFAULT_BATCH);
    }

    #[test]
    fn bad_lines_are_usage_errors() {
        for text in ["k", "k=x", "bogus=1", "normalize=maybe", "mode=sideways"] {
            let err = RunConfig::default().apply_text(text).unwrap_err();
            assert_eq!(err.exit_code(), 1, "{text}");
        }
    }

    #[test]
    fn validation_names_the_flag() {
        let mut c = RunConfig { dataset: Some(PathBuf::from("Cargo.toml")), ..RunConfig::default() };
        c.k = 0;
        assert!(c.validate().unwrap_err().to_string().contains("--k"));
        c.k = 3;
        c.k_neighbors = 4;
        assert!(c.validate().unwrap_err().to_string().contains("--k-neighbors"));
    }

    #[test]
    fn pairs_round_trip_through_text() {
        let mut c = RunConfig::default();
        c.apply_text("seed=17\nformula=literal\ninjector=zero-pad\ndataset=x.csv").unwrap();
        let text: String = c.pairs().iter().map(|(k, v)| format!("{k}={v}\n")).filter(|l| !l.ends_with("=\n")).collect();
        let mut back = RunConfig::default();
        back.apply_text(&text).unwrap();
        assert_eq!(back, c);
    }
}
