//! Synthetic datasets with a known low-dimensional structure.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::embed_store::{EmbeddingMatrix, LabeledDataset};
use crate::error::{Error, Result};
use crate::rng;

pub const LATENT_DIM: usize = 2;

const VOCAB: &[&str] = &[
    "C", "c", "O", "N", "n", "=", "(", ")", "1", "2", "Cl", "F", "S", "Br", "#", "[nH]",
];

/// Knobs for [`linear_latent_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearLatent {
    pub n: usize,
    pub d_fm: usize,
    /// Std of the isotropic noise added to embeddings and to labels.
    pub noise: f64,
    /// Length of a fixed random offset added to every embedding.
    pub offset_norm: f64,
    pub seed: u64,
}

/// `z ~ N(0, I₂)`, `h = A z + c + noise·ε`, `y = w·z + noise·η` with `A`
/// (`d_fm×2`) standard normal, `c` a fixed offset of length `offset_norm`
/// and `w = (1, -0.5)`. Texts are random whitespace-separated SMILES-like
/// tokens; ids are `syn-00000`, `syn-00001`, ...
pub fn linear_latent_with(p: LinearLatent) -> Result<LabeledDataset> {
    if p.d_fm == 0 || !(p.noise >= 0.0) || !(p.offset_norm >= 0.0) {
        return Err(Error::invalid("linear_latent needs d_fm >= 1 and non-negative noise and offset"));
    }
    let mut s = rng::stream(rng::mix(p.seed, 0));
    let a: Vec<f64> = (0..p.d_fm * LATENT_DIM).map(|_| s.sample(StandardNormal)).collect();
    let mut c: Vec<f64> = (0..p.d_fm).map(|_| s.sample(StandardNormal)).collect();
    let c_norm = crate::stats::norm(&c);
    for x in &mut c {
        *x *= p.offset_norm / c_norm;
    }
    let w = [1.0, -0.5];

    let mut values = Vec::with_capacity(p.n * p.d_fm);
    let mut labels = Vec::with_capacity(p.n);
    let mut texts = Vec::with_capacity(p.n);
    for i in 0..p.n {
        let mut s = rng::stream(rng::mix(p.seed, i as u64 + 1));
        let z: [f64; LATENT_DIM] = [s.sample(StandardNormal), s.sample(StandardNormal)];
        for j in 0..p.d_fm {
            let e: f64 = s.sample(StandardNormal);
            values.push(a[j * LATENT_DIM] * z[0] + a[j * LATENT_DIM + 1] * z[1] + c[j] + p.noise * e);
        }
        let eta: f64 = s.sample(StandardNormal);
        labels.push(w[0] * z[0] + w[1] * z[1] + p.noise * eta);
        let len = s.random_range(6..20);
        let tokens: Vec<&str> = (0..len).map(|_| VOCAB[s.random_range(0..VOCAB.len())]).collect();
        texts.push(tokens.join(" "));
    }
    LabeledDataset::new(
        (0..p.n).map(|i| format!("syn-{i:05}")).collect(),
        Some(texts),
        EmbeddingMatrix::new(p.n, p.d_fm, values)?,
        labels,
    )
}

/// [`linear_latent_with`] without an offset.
pub fn linear_latent(n: usize, d_fm: usize, noise: f64, seed: u64) -> Result<LabeledDataset> {
    linear_latent_with(LinearLatent {
        n,
        d_fm,
        noise,
        offset_norm: 0.0,
        seed,
    })
}
