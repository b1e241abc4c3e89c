//! Untrained projectors from foundation-model space to LLM embedding space,
//! and the zero-pad / random-noise baselines.
//!
//! Weights are stored `d_in × d_out` and applied as `h · W + b` on row
//! vectors. Row `i` of a weight matrix is drawn from its own stream
//! `mix(seed, i)`, so generation order never affects the result.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::embed_store::{load_matrix, save_matrix, EmbeddingMatrix, MatrixFormat};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InitScheme {
    /// N(0, 1/d_in)
    Normal,
    /// N(0, 2/(d_in + d_out))
    Glorot,
    /// N(0, 2/d_in)
    He,
    /// Ones on the leading diagonal.
    Dirac,
}

impl InitScheme {
    pub fn variance(self, d_in: usize, d_out: usize) -> f64 {
        match self {
            InitScheme::Normal => 1.0 / d_in as f64,
            InitScheme::Glorot => 2.0 / (d_in + d_out) as f64,
            InitScheme::He => 2.0 / d_in as f64,
            InitScheme::Dirac => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InitScheme::Normal => "normal",
            InitScheme::Glorot => "glorot",
            InitScheme::He => "he",
            InitScheme::Dirac => "dirac",
        }
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Self::Normal),
            "glorot" => Ok(Self::Glorot),
            "he" => Ok(Self::He),
            "dirac" => Ok(Self::Dirac),
            other => Err(Error::invalid(format!("unknown init scheme {other:?}"))),
        }
    }
}

/// Output nonlinearity. Anything but `None` is an ablation setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Activation {
    #[default]
    None,
    Relu,
    Gelu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::None => x,
            Activation::Relu => x.max(0.0),
            // tanh approximation with pinned constants
            Activation::Gelu => {
                0.5 * x * (1.0 + (0.797_884_560_8 * (x + 0.044_715 * x * x * x)).tanh())
            }
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::None => "none",
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "relu" => Ok(Self::Relu),
            "gelu" => Ok(Self::Gelu),
            "sigmoid" => Ok(Self::Sigmoid),
            other => Err(Error::invalid(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorSpec {
    weight: EmbeddingMatrix,
    bias: Vec<f64>,
    init_scheme: InitScheme,
    seed: u64,
    activation: Activation,
    layer_sizes: Vec<usize>,
}

impl ProjectorSpec {
    pub fn from_parts(
        weight: EmbeddingMatrix,
        bias: Vec<f64>,
        init_scheme: InitScheme,
        seed: u64,
        activation: Activation,
        layer_sizes: Vec<usize>,
    ) -> Result<Self> {
        if weight.n_rows() == 0 || weight.dim() == 0 {
            return Err(Error::invalid("projector dimensions must be >= 1"));
        }
        if bias.len() != weight.dim() {
            return Err(Error::DimensionMismatch {
                context: "projector bias",
                expected: weight.dim(),
                found: bias.len(),
            });
        }
        weight.ensure_finite()?;
        Ok(Self {
            weight,
            bias,
            init_scheme,
            seed,
            activation,
            layer_sizes,
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.n_rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.dim()
    }

    pub fn weight(&self) -> &EmbeddingMatrix {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn init_scheme(&self) -> InitScheme {
        self.init_scheme
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn is_ablation(&self) -> bool {
        self.activation != Activation::None
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_bias(mut self, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != self.d_out() {
            return Err(Error::DimensionMismatch {
                context: "projector bias",
                expected: self.d_out(),
                found: bias.len(),
            });
        }
        self.bias = bias;
        Ok(self)
    }

    /// Writes `weight.bin`, `bias.bin` and the `projector.txt` header.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_matrix(&self.weight, dir.join("weight.bin"), MatrixFormat::Bin)?;
        let bias = EmbeddingMatrix::new(1, self.bias.len(), self.bias.clone())?;
        save_matrix(&bias, dir.join("bias.bin"), MatrixFormat::Bin)?;
        let header = dir.join("projector.txt");
        fs::write(&header, self.header()).map_err(|e| Error::io(header, e))
    }

    pub fn header(&self) -> String {
        let layers = self
            .layer_sizes
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "d_in={}\nd_out={}\nscheme={}\nseed={}\nactivation={}\nablation={}\nlayer_sizes={}\n",
            self.d_in(),
            self.d_out(),
            self.init_scheme,
            self.seed,
            self.activation,
            self.is_ablation(),
            layers
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let header_path = dir.join("projector.txt");
        let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
        let kv = parse_key_values(&text);
        let get = |k: &str| {
            kv.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::invalid(format!("projector.txt missing key {k:?}")))
        };
        let seed = get("seed")?
            .parse()
            .map_err(|_| Error::invalid("projector.txt: bad seed"))?;
        let layer_sizes = get("layer_sizes")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::invalid("projector.txt: bad layer size")))
            .collect::<Result<Vec<usize>>>()?;
        let weight = load_matrix(dir.join("weight.bin"), MatrixFormat::Bin)?;
        let bias = load_matrix(dir.join("bias.bin"), MatrixFormat::Bin)?.into_values();
        Self::from_parts(
            weight,
            bias,
            get("scheme")?.parse()?,
            seed,
            get("activation")?.parse()?,
            layer_sizes,
        )
    }
}

pub(crate) fn parse_key_values(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| {
            let l = l.trim();
            if l.is_empty() || l.starts_with('#') {
                return None;
            }
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

/// Row `row` of a single `d_in × d_out` layer initialized with `scheme`.
pub fn weight_row(scheme: InitScheme, d_in: usize, d_out: usize, seed: u64, row: usize) -> Vec<f64> {
    let mut out = vec![0.0; d_out];
    fill_weight_row(scheme, d_in, d_out, seed, row, &mut out);
    out
}

fn fill_weight_row(scheme: InitScheme, d_in: usize, d_out: usize, seed: u64, row: usize, out: &mut [f64]) {
    match scheme {
        InitScheme::Dirac => {
            out.fill(0.0);
            if row < d_out {
                out[row] = 1.0;
            }
        }
        _ => {
            let std = scheme.variance(d_in, d_out).sqrt();
            let mut stream = rng::stream(rng::mix(seed, row as u64));
            rng::fill_normal(&mut stream, std, out);
        }
    }
}

fn init_layer(d_in: usize, d_out: usize, scheme: InitScheme, seed: u64) -> EmbeddingMatrix {
    let mut values = vec![0.0; d_in * d_out];
    values
        .par_chunks_mut(d_out)
        .enumerate()
        .for_each(|(row, chunk)| fill_weight_row(scheme, d_in, d_out, seed, row, chunk));
    EmbeddingMatrix::new(d_in, d_out, values).expect("shape preserved")
}

/// Deterministic untrained projector. With `layer_sizes` the per-layer
/// matrices (each initialized for its own fan-in/fan-out) are multiplied
/// into one effective weight; layer `l` uses seed `mix(seed, !l)`.
pub fn init_projector(
    d_in: usize,
    d_out: usize,
    scheme: InitScheme,
    seed: u64,
    layer_sizes: &[usize],
) -> Result<ProjectorSpec> {
    if d_in == 0 || d_out == 0 || layer_sizes.contains(&0) {
        return Err(Error::invalid("projector dimensions must be >= 1"));
    }
    let weight = if layer_sizes.is_empty() {
        init_layer(d_in, d_out, scheme, seed)
    } else {
        let dims: Vec<usize> = std::iter::once(d_in)
            .chain(layer_sizes.iter().copied())
            .chain(std::iter::once(d_out))
            .collect();
        let mut acc: Option<EmbeddingMatrix> = None;
        for (l, pair) in dims.windows(2).enumerate() {
            let layer = init_layer(pair[0], pair[1], scheme, rng::mix(seed, !(l as u64)));
            acc = Some(match acc {
                None => layer,
                Some(prev) => prev.matmul(&layer)?,
            });
        }
        acc.expect("at least two layers")
    };
    ProjectorSpec::from_parts(
        weight,
        vec![0.0; d_out],
        scheme,
        seed,
        Activation::None,
        layer_sizes.to_vec(),
    )
}

/// `activation(h · W + b)`, row by row.
pub fn project(spec: &ProjectorSpec, h: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if h.dim() != spec.d_in() {
        return Err(Error::DimensionMismatch {
            context: "project input dim vs projector d_in",
            expected: spec.d_in(),
            found: h.dim(),
        });
    }
    let d_out = spec.d_out();
    let mut values = vec![0.0; h.n_rows() * d_out];
    values
        .par_chunks_mut(d_out)
        .zip(h.rows().collect::<Vec<_>>().into_par_iter())
        .for_each(|(out, row)| {
            for (k, &a) in row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &w) in out.iter_mut().zip(spec.weight.row(k)) {
                    *o += a * w;
                }
            }
            for (o, &b) in out.iter_mut().zip(&spec.bias) {
                *o = spec.activation.apply(*o + b);
            }
        });
    EmbeddingMatrix::new(h.n_rows(), d_out, values)
}

/// Append zeros to each row up to `d_out` coordinates.
pub fn zero_pad(h: &EmbeddingMatrix, d_out: usize) -> Result<EmbeddingMatrix> {
    if d_out < h.dim() {
        return Err(Error::invalid(format!(
            "pad_size negative: d_out {d_out} < input dim {}",
            h.dim()
        )));
    }
    let mut out = EmbeddingMatrix::zeros(h.n_rows(), d_out);
    for (i, row) in h.rows().enumerate() {
        out.row_mut(i)[..row.len()].copy_from_slice(row);
    }
    Ok(out)
}

/// Per-id standard-normal vectors seeded by `mix(global_seed, fnv1a64(id))`.
pub fn random_noise<S: AsRef<str> + Sync>(ids: &[S], d_out: usize, global_seed: u64) -> Result<EmbeddingMatrix> {
    if ids.is_empty() {
        return Err(Error::invalid("random_noise needs at least one id"));
    }
    let mut values = vec![0.0; ids.len() * d_out];
    if d_out > 0 {
        values
            .par_chunks_mut(d_out)
            .zip(ids.par_iter())
            .for_each(|(out, id)| {
                let seed = rng::mix(global_seed, rng::fnv1a64(id.as_ref().as_bytes()));
                rng::fill_normal(&mut rng::stream(seed), 1.0, out);
            });
    }
    EmbeddingMatrix::new(ids.len(), d_out, values)
}
