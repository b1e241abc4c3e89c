//! Representation-similarity analyses and Monte Carlo checks of the
//! concentration results for untrained random projections.
//!
//! Projections `W` have i.i.d. `N(0, 1/d)` entries. `WeightSampling::Reduced`
//! samples only what each statistic depends on: by rotational invariance
//! `Wu` has the law of `‖u‖·g` with `g ~ N(0, I/d)`, and `(Wu, Wv)` has the
//! law of `(a₁g₁, c₁g₁ + c₂g₂)` where `(a₁, 0)` and `(c₁, c₂)` are `u` and `v`
//! in an orthonormal basis of their span. `Dense` draws the full `d×d` matrix.
//!
//! Trial `t` always draws from stream `mix(seed, t)`. Trials run in parallel,
//! are collected in trial order and reduced serially, so reports do not depend
//! on the thread count.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::embed_store::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::projector::Activation;
use crate::rng::{self, Stream};
use crate::stats::{self, dot, norm, CompensatedSum};

pub const HISTOGRAM_BINS: usize = 40;
pub const NORM_MEAN_TOLERANCE: f64 = 0.02;
pub const NORM_VAR_TOLERANCE: f64 = 0.15;
pub const RELU_HALF_TOLERANCE: f64 = 0.02;
pub const RELU_SECOND_MOMENT_TOLERANCE: f64 = 0.01;
pub const MIN_NORM_TRIALS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityReport {
    pub mean_pairwise_cosine: f64,
    pub histogram: [u64; HISTOGRAM_BINS],
    pub n_pairs: u64,
}

impl SimilarityReport {
    fn from_cosines(cosines: &[f64]) -> Self {
        let mut histogram = [0u64; HISTOGRAM_BINS];
        for &c in cosines {
            histogram[histogram_bin(c)] += 1;
        }
        Self {
            mean_pairwise_cosine: stats::mean(cosines),
            histogram,
            n_pairs: cosines.len() as u64,
        }
    }

    pub fn bin_edges(bin: usize) -> (f64, f64) {
        let w = 2.0 / HISTOGRAM_BINS as f64;
        (-1.0 + w * bin as f64, -1.0 + w * (bin + 1) as f64)
    }
}

/// Bin `i` covers `[-1 + i/20, -1 + (i+1)/20)`; 1.0 falls in the last bin.
pub fn histogram_bin(c: f64) -> usize {
    let i = ((c.clamp(-1.0, 1.0) + 1.0) * (HISTOGRAM_BINS as f64 / 2.0)).floor() as usize;
    i.min(HISTOGRAM_BINS - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryReport {
    pub d: usize,
    pub trials: usize,
    pub empirical_mean: f64,
    pub empirical_var: f64,
    pub theory_mean: f64,
    pub theory_var: f64,
    pub chebyshev_bound: f64,
    pub pass: bool,
}

impl TheoryReport {
    pub const CSV_HEADER: &'static str =
        "d,trials,empirical_mean,empirical_var,theory_mean,theory_var,chebyshev_bound,pass";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:?},{:?},{:?},{:?},{:?},{}",
            self.d,
            self.trials,
            self.empirical_mean,
            self.empirical_var,
            self.theory_mean,
            self.theory_var,
            self.chebyshev_bound,
            self.pass
        )
    }
}

fn reject_zero_rows(h: &EmbeddingMatrix) -> Result<()> {
    match h.rows().position(|r| r.iter().all(|&x| x == 0.0)) {
        Some(row) => Err(Error::ZeroNormRow { row }),
        None => Ok(()),
    }
}

/// Cosine over all `n(n-1)/2` unordered row pairs.
pub fn mean_pairwise_cosine(h: &EmbeddingMatrix) -> Result<SimilarityReport> {
    if h.n_rows() < 2 {
        return Err(Error::invalid(format!(
            "pairwise cosine needs at least 2 rows, got {}",
            h.n_rows()
        )));
    }
    reject_zero_rows(h)?;
    let n = h.n_rows();
    let cosines: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            (i + 1..n).map(move |j| stats::cosine(h.row(i), h.row(j)))
        })
        .collect();
    Ok(SimilarityReport::from_cosines(&cosines))
}

/// Mean of `cos(h_rep[i], h_text[i])` over rows.
pub fn cross_cosine(h_rep: &EmbeddingMatrix, h_text: &EmbeddingMatrix) -> Result<SimilarityReport> {
    if h_rep.n_rows() != h_text.n_rows() || h_rep.dim() != h_text.dim() {
        return Err(Error::invalid(format!(
            "cross cosine needs equal shapes, got {}x{} and {}x{}",
            h_rep.n_rows(),
            h_rep.dim(),
            h_text.n_rows(),
            h_text.dim()
        )));
    }
    reject_zero_rows(h_rep)?;
    reject_zero_rows(h_text)?;
    let cosines: Vec<f64> = (0..h_rep.n_rows())
        .map(|i| stats::cosine(h_rep.row(i), h_text.row(i)))
        .collect();
    Ok(SimilarityReport::from_cosines(&cosines))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightSampling {
    #[default]
    Reduced,
    Dense,
}

impl FromStr for WeightSampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reduced" => Ok(WeightSampling::Reduced),
            "dense" => Ok(WeightSampling::Dense),
            other => Err(Error::invalid(format!("unknown weight sampling {other:?}"))),
        }
    }
}

fn gaussian(s: &mut Stream, len: usize, std: f64) -> Vec<f64> {
    let mut v = vec![0.0; len];
    rng::fill_normal(s, std, &mut v);
    v
}

/// `W x` for a dense `d×len(x)` matrix drawn row by row from `s`.
fn dense_apply(s: &mut Stream, d: usize, xs: &[&[f64]]) -> Vec<Vec<f64>> {
    let std = (1.0 / d as f64).sqrt();
    let cols = xs[0].len();
    let mut row = vec![0.0; cols];
    let mut out = vec![vec![0.0; d]; xs.len()];
    for i in 0..d {
        rng::fill_normal(s, std, &mut row);
        for (o, x) in out.iter_mut().zip(xs) {
            o[i] = dot(&row, x);
        }
    }
    out
}

fn trial_streams<T: Send>(seed: u64, trials: usize, f: impl Fn(&mut Stream) -> T + Sync) -> Vec<T> {
    (0..trials)
        .into_par_iter()
        .map(|t| f(&mut rng::stream(rng::mix(seed, t as u64))))
        .collect()
}

fn check_len(context: &'static str, expected: usize, v: &[f64]) -> Result<()> {
    if v.len() != expected {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            found: v.len(),
        });
    }
    Ok(())
}

/// `‖Wu + b‖²` for each trial.
pub fn sample_norm_sq(d: usize, u: &[f64], b: &[f64], trials: usize, seed: u64, sampling: WeightSampling) -> Result<Vec<f64>> {
    check_len("u length vs d", d, u)?;
    check_len("b length vs d", d, b)?;
    if d == 0 {
        return Err(Error::invalid("d must be at least 1"));
    }
    let u_norm = norm(u);
    Ok(trial_streams(seed, trials, |s| {
        let wu = match sampling {
            WeightSampling::Reduced => gaussian(s, d, u_norm / (d as f64).sqrt()),
            WeightSampling::Dense => dense_apply(s, d, &[u]).pop().expect("one image"),
        };
        wu.iter().zip(b).map(|(x, y)| (x + y) * (x + y)).collect::<CompensatedSum>().value()
    }))
}

pub fn norm_theory(d: usize, u: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let (uu, bb) = (dot(u, u), dot(b, b));
    let mean = uu + bb;
    let spread = 2.0 * uu * uu + 4.0 * uu * bb;
    let c = if mean == 0.0 { 0.0 } else { spread / (mean * mean) };
    (mean, spread / d as f64, c)
}

/// Fraction of samples with `|z / mean - 1| >= eps`.
pub fn empirical_failure_rate(samples: &[f64], theory_mean: f64, eps: f64) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let hits = samples.iter().filter(|&&z| (z / theory_mean - 1.0).abs() >= eps).count();
    hits as f64 / samples.len() as f64
}

fn ratio_ok(empirical: f64, theory: f64, tol: f64) -> bool {
    if theory == 0.0 {
        empirical == 0.0
    } else {
        (empirical / theory - 1.0).abs() <= tol
    }
}

pub fn verify_norm_concentration(d: usize, u: &[f64], b: &[f64], trials: usize, seed: u64, eps: f64) -> Result<TheoryReport> {
    verify_norm_concentration_with(d, u, b, trials, seed, eps, WeightSampling::Reduced)
}

pub fn verify_norm_concentration_with(
    d: usize,
    u: &[f64],
    b: &[f64],
    trials: usize,
    seed: u64,
    eps: f64,
    sampling: WeightSampling,
) -> Result<TheoryReport> {
    if trials < MIN_NORM_TRIALS {
        return Err(Error::invalid(format!("trials must be at least {MIN_NORM_TRIALS}, got {trials}")));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    let z = sample_norm_sq(d, u, b, trials, seed, sampling)?;
    let (theory_mean, theory_var, c) = norm_theory(d, u, b);
    let empirical_mean = stats::mean(&z);
    let empirical_var = stats::population_variance(&z);
    let pass = ratio_ok(empirical_mean, theory_mean, NORM_MEAN_TOLERANCE)
        && ratio_ok(empirical_var, theory_var, NORM_VAR_TOLERANCE);
    Ok(TheoryReport {
        d,
        trials,
        empirical_mean,
        empirical_var,
        theory_mean,
        theory_var,
        chebyshev_bound: c / (d as f64 * eps * eps),
        pass,
    })
}

/// `cos(Wu, Wv)` for each trial.
pub fn sample_projected_cosine(d: usize, u: &[f64], v: &[f64], trials: usize, seed: u64, sampling: WeightSampling) -> Result<Vec<f64>> {
    check_len("u length vs d", d, u)?;
    check_len("v length vs d", d, v)?;
    for (x, name) in [(u, "u"), (v, "v")] {
        if norm(x) == 0.0 {
            return Err(Error::invalid(format!("{name} must be nonzero")));
        }
    }
    let same = u == v;
    // u = a1·e1, v = c1·e1 + c2·e2
    let a1 = norm(u);
    let c1 = dot(u, v) / a1;
    let c2 = (dot(v, v) - c1 * c1).max(0.0).sqrt();
    let std = (1.0 / d as f64).sqrt();
    Ok(trial_streams(seed, trials, |s| {
        let (wu, wv) = match sampling {
            WeightSampling::Reduced => {
                let g1 = gaussian(s, d, std);
                let g2 = gaussian(s, d, std);
                let wu: Vec<f64> = g1.iter().map(|x| a1 * x).collect();
                let wv = if same {
                    wu.clone()
                } else {
                    g1.iter().zip(&g2).map(|(x, y)| c1 * x + c2 * y).collect()
                };
                (wu, wv)
            }
            WeightSampling::Dense => {
                let mut out = dense_apply(s, d, &[u, v]);
                let wv = out.pop().expect("two images");
                (out.pop().expect("two images"), wv)
            }
        };
        stats::cosine(&wu, &wv)
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CosineReport {
    pub theory: TheoryReport,
    pub cosine_uv: f64,
    pub mean_abs_deviation: f64,
    pub p99_deviation: f64,
    pub percentile_bound: f64,
}

pub fn cosine_percentile_bound(d: usize) -> f64 {
    6.0 / (d as f64).sqrt()
}

pub fn verify_cosine_preservation(d: usize, u: &[f64], v: &[f64], trials: usize, seed: u64) -> Result<CosineReport> {
    verify_cosine_preservation_with(d, u, v, trials, seed, WeightSampling::Reduced)
}

pub fn verify_cosine_preservation_with(
    d: usize,
    u: &[f64],
    v: &[f64],
    trials: usize,
    seed: u64,
    sampling: WeightSampling,
) -> Result<CosineReport> {
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    let cosines = sample_projected_cosine(d, u, v, trials, seed, sampling)?;
    let rho = stats::cosine(u, v);
    let deviations: Vec<f64> = cosines.iter().map(|c| (c - rho).abs()).collect();
    let (empirical_mean, empirical_std) = stats::mean_and_std(&cosines);
    let bound = cosine_percentile_bound(d);
    let p99 = stats::quantile(&deviations, 0.99);
    let theory_var = (1.0 - rho * rho).powi(2) / d as f64;
    let pass = p99 <= bound && (empirical_mean - rho).abs() <= 3.0 * empirical_std / (trials as f64).sqrt();
    Ok(CosineReport {
        theory: TheoryReport {
            d,
            trials,
            empirical_mean,
            empirical_var: empirical_std * empirical_std,
            theory_mean: rho,
            theory_var,
            chebyshev_bound: theory_var / (bound * bound),
            pass,
        },
        cosine_uv: rho,
        mean_abs_deviation: stats::mean(&deviations),
        p99_deviation: p99,
        percentile_bound: bound,
    })
}

/// `E[σ(Z₁)σ(Z₂)] / √(E[σ(Z₁)²] E[σ(Z₂)²])` for `(Z₁, Z₂)` standard bivariate
/// normal with correlation `rho`, with `σ = ReLU`. Equal to the normalized
/// first-order arc-cosine kernel.
pub fn relu_correlation_closed_form(rho: f64) -> f64 {
    let theta = rho.clamp(-1.0, 1.0).acos();
    ((std::f64::consts::PI - theta) * rho + theta.sin()) / std::f64::consts::PI
}

#[derive(Debug, Clone, PartialEq)]
pub struct InflationReport {
    pub theory: TheoryReport,
    pub rho: f64,
    pub activation: Activation,
    /// Pooled over all `trials·d` pairs.
    pub corr_activation: f64,
    pub corr_linear: f64,
    /// Mean over trials of the per-trial `|Corr − rho|`.
    pub mean_abs_dev_activation: f64,
    pub mean_abs_dev_linear: f64,
    /// `E[σ(Z)²]` pooled over both coordinates.
    pub second_moment: f64,
    pub closed_form: Option<f64>,
}

#[derive(Default)]
struct Moments {
    xy: CompensatedSum,
    xx: CompensatedSum,
    yy: CompensatedSum,
}

impl Moments {
    fn push(&mut self, x: f64, y: f64) {
        self.xy.add(x * y);
        self.xx.add(x * x);
        self.yy.add(y * y);
    }

    fn merge(&mut self, o: &Moments) {
        self.xy.add(o.xy.value());
        self.xx.add(o.xx.value());
        self.yy.add(o.yy.value());
    }

    fn corr(&self) -> f64 {
        let denom = (self.xx.value() * self.yy.value()).sqrt();
        if denom == 0.0 {
            0.0
        } else {
            self.xy.value() / denom
        }
    }
}

/// Correlations here are uncentered (`E[XY] / √(E[X²]E[Y²])`), which is the
/// cosine between the activated coordinate vectors.
pub fn verify_activation_inflation(rho: f64, d: usize, trials: usize, activation: Activation, seed: u64) -> Result<InflationReport> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::invalid(format!("rho must be in [0, 1), got {rho}")));
    }
    if d == 0 || trials == 0 {
        return Err(Error::invalid("d and trials must be at least 1"));
    }
    let c = (1.0 - rho * rho).sqrt();
    let per_trial = trial_streams(seed, trials, |s| {
        let (mut act, mut lin) = (Moments::default(), Moments::default());
        for _ in 0..d {
            let z1: f64 = s.sample(StandardNormal);
            let g: f64 = s.sample(StandardNormal);
            let z2 = rho * z1 + c * g;
            lin.push(z1, z2);
            act.push(activation.apply(z1), activation.apply(z2));
        }
        (act, lin)
    });
    let (mut act, mut lin) = (Moments::default(), Moments::default());
    let (mut dev_act, mut dev_lin) = (CompensatedSum::new(), CompensatedSum::new());
    let per_trial_act: Vec<f64> = per_trial.iter().map(|(a, _)| a.corr()).collect();
    for (a, l) in &per_trial {
        act.merge(a);
        lin.merge(l);
        dev_act.add((a.corr() - rho).abs());
        dev_lin.add((l.corr() - rho).abs());
    }
    let n = trials as f64;
    let pairs = n * d as f64;
    let corr_activation = act.corr();
    let corr_linear = lin.corr();
    let mean_abs_dev_activation = dev_act.value() / n;
    let mean_abs_dev_linear = dev_lin.value() / n;
    let second_moment = (act.xx.value() + act.yy.value()) / (2.0 * pairs);
    let (mean, var) = (stats::mean(&per_trial_act), stats::population_variance(&per_trial_act));

    let pass = match activation {
        Activation::None => (corr_linear - rho).abs() <= 3.0 / pairs.sqrt(),
        Activation::Relu => {
            let mut ok = mean_abs_dev_activation > mean_abs_dev_linear
                && (second_moment - 0.5).abs() <= RELU_SECOND_MOMENT_TOLERANCE;
            if rho == 0.0 {
                ok &= (corr_activation - 0.5).abs() <= RELU_HALF_TOLERANCE;
            }
            ok
        }
        _ => mean_abs_dev_activation > mean_abs_dev_linear,
    };
    Ok(InflationReport {
        theory: TheoryReport {
            d,
            trials,
            empirical_mean: mean,
            empirical_var: var,
            theory_mean: rho,
            theory_var: f64::NAN,
            chebyshev_bound: f64::NAN,
            pass,
        },
        rho,
        activation,
        corr_activation,
        corr_linear,
        mean_abs_dev_activation,
        mean_abs_dev_linear,
        second_moment,
        closed_form: (activation == Activation::Relu).then(|| relu_correlation_closed_form(rho)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Text,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "text" => Ok(ReportFormat::Text),
            other => Err(Error::invalid(format!("unknown report format {other:?}"))),
        }
    }
}

pub trait Report {
    fn to_csv(&self) -> String;
    fn to_text(&self) -> String;

    fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Text => self.to_text(),
        }
    }
}

impl Report for TheoryReport {
    /// Header plus one row.
    fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }

    fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in Self::CSV_HEADER.split(',').zip(self.csv_row().split(',')) {
            let _ = writeln!(s, "{k}: {v}");
        }
        s
    }
}

impl Report for SimilarityReport {
    /// Columns `bin_lower,bin_upper,count,mean_pairwise_cosine,n_pairs`, one
    /// row per histogram bin; the last two columns repeat on every row.
    fn to_csv(&self) -> String {
        let mut s = String::from("bin_lower,bin_upper,count,mean_pairwise_cosine,n_pairs\n");
        for (i, count) in self.histogram.iter().enumerate() {
            let (lo, hi) = Self::bin_edges(i);
            let _ = writeln!(s, "{lo:?},{hi:?},{count},{:?},{}", self.mean_pairwise_cosine, self.n_pairs);
        }
        s
    }

    fn to_text(&self) -> String {
        let mut s = format!("mean_pairwise_cosine: {:?}\nn_pairs: {}\n", self.mean_pairwise_cosine, self.n_pairs);
        for (i, count) in self.histogram.iter().enumerate() {
            let (lo, hi) = Self::bin_edges(i);
            let _ = writeln!(s, "[{lo:+.2}, {hi:+.2}): {count}");
        }
        s
    }
}

impl Report for CosineReport {
    fn to_csv(&self) -> String {
        self.theory.to_csv()
    }

    fn to_text(&self) -> String {
        format!(
            "{}cosine_uv: {:?}\nmean_abs_deviation: {:?}\np99_deviation: {:?}\npercentile_bound: {:?}\n",
            self.theory.to_text(),
            self.cosine_uv,
            self.mean_abs_deviation,
            self.p99_deviation,
            self.percentile_bound
        )
    }
}

impl Report for InflationReport {
    fn to_csv(&self) -> String {
        self.theory.to_csv()
    }

    fn to_text(&self) -> String {
        let mut s = self.theory.to_text();
        let _ = write!(
            s,
            "rho: {:?}\nactivation: {}\ncorr_activation: {:?}\ncorr_linear: {:?}\nmean_abs_dev_activation: {:?}\nmean_abs_dev_linear: {:?}\nsecond_moment: {:?}\n",
            self.rho,
            self.activation,
            self.corr_activation,
            self.corr_linear,
            self.mean_abs_dev_activation,
            self.mean_abs_dev_linear,
            self.second_moment
        );
        if let Some(c) = self.closed_form {
            let _ = writeln!(s, "closed_form: {c:?}");
        }
        s
    }
}

pub fn emit_report(report: &dyn Report, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, report.render(format)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(rows).unwrap()
    }

    fn unit(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn pairwise_examples() {
        let r = mean_pairwise_cosine(&m(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]])).unwrap();
        assert_eq!(r.mean_pairwise_cosine, 1.0);
        assert_eq!(r.n_pairs, 3);
        assert_eq!(r.histogram[HISTOGRAM_BINS - 1], 3);
        let r = mean_pairwise_cosine(&m(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]])).unwrap();
        assert_eq!(r.mean_pairwise_cosine, 0.0);
        assert_eq!(r.histogram[20], 3);
        let r = mean_pairwise_cosine(&m(&[&[1.0, 0.0], &[1.0, 1.0]])).unwrap();
        assert!((r.mean_pairwise_cosine - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(r.histogram.iter().sum::<u64>(), r.n_pairs);
    }

    #[test]
    fn pairwise_errors() {
        assert!(mean_pairwise_cosine(&m(&[&[1.0]])).is_err());
        match mean_pairwise_cosine(&m(&[&[1.0], &[0.0], &[2.0]])) {
            Err(Error::ZeroNormRow { row }) => assert_eq!(row, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cross_examples() {
        let h = EmbeddingMatrix::new(4, 3, rng::normal_vec(2, 12)).unwrap();
        let neg = EmbeddingMatrix::new(4, 3, h.values().iter().map(|x| -x).collect()).unwrap();
        assert!((cross_cosine(&h, &h).unwrap().mean_pairwise_cosine - 1.0).abs() < 1e-15);
        assert!((cross_cosine(&h, &neg).unwrap().mean_pairwise_cosine + 1.0).abs() < 1e-15);
        assert_eq!(cross_cosine(&m(&[&[1.0, 0.0]]), &m(&[&[0.0, 1.0]])).unwrap().mean_pairwise_cosine, 0.0);
        assert!(cross_cosine(&h, &m(&[&[1.0, 0.0, 0.0]])).is_err());
        assert!(cross_cosine(&m(&[&[0.0]]), &m(&[&[1.0]])).is_err());
    }

    #[test]
    fn histogram_edges() {
        assert_eq!(histogram_bin(-1.0), 0);
        assert_eq!(histogram_bin(1.0), HISTOGRAM_BINS - 1);
        assert_eq!(histogram_bin(0.0), 20);
        assert_eq!(histogram_bin(-0.95), 1);
        assert_eq!(SimilarityReport::bin_edges(0), (-1.0, -0.95));
    }

    #[test]
    fn norm_theory_examples() {
        let (mean, var, _) = norm_theory(1000, &unit(1000, 0), &vec![0.0; 1000]);
        assert_eq!(mean, 1.0);
        assert!((var - 0.002).abs() < 1e-18);
        let (mean, var, c) = norm_theory(4096, &unit(4096, 0), &unit(4096, 1));
        assert_eq!(mean, 2.0);
        assert_eq!(var, 6.0 / 4096.0);
        assert_eq!(c, 1.5);
    }

    #[test]
    fn zero_u_is_degenerate() {
        let b: Vec<f64> = (0..50).map(|i| i as f64 / 10.0).collect();
        let r = verify_norm_concentration(50, &vec![0.0; 50], &b, 200, 1, 0.1).unwrap();
        let bb: f64 = dot(&b, &b);
        assert_eq!(r.empirical_var, 0.0);
        assert!((r.empirical_mean - bb).abs() <= 1e-12 * bb);
        assert_eq!(r.theory_var, 0.0);
        assert!(r.pass);
    }

    #[test]
    fn norm_argument_errors() {
        let u = unit(10, 0);
        assert!(verify_norm_concentration(10, &u, &[0.0; 9], 100, 0, 0.1).is_err());
        assert!(verify_norm_concentration(10, &u, &[0.0; 10], 99, 0, 0.1).is_err());
    }

    #[test]
    fn reduced_and_dense_agree_in_law() {
        let d = 32;
        let u: Vec<f64> = rng::normal_vec(4, d);
        let b: Vec<f64> = rng::normal_vec(5, d).iter().map(|x| 0.5 * x).collect();
        for sampling in [WeightSampling::Reduced, WeightSampling::Dense] {
            let r = verify_norm_concentration_with(d, &u, &b, 4000, 9, 0.1, sampling).unwrap();
            assert!((r.empirical_mean / r.theory_mean - 1.0).abs() < 0.02, "{sampling:?} {r:?}");
            assert!((r.empirical_var / r.theory_var - 1.0).abs() < 0.15, "{sampling:?} {r:?}");
        }
        let v: Vec<f64> = rng::normal_vec(6, d);
        let a = verify_cosine_preservation_with(d, &u, &v, 4000, 3, WeightSampling::Reduced).unwrap();
        let b = verify_cosine_preservation_with(d, &u, &v, 4000, 3, WeightSampling::Dense).unwrap();
        assert!((a.theory.empirical_mean - b.theory.empirical_mean).abs() < 0.01);
        assert!((a.p99_deviation / b.p99_deviation - 1.0).abs() < 0.15);
    }

    #[test]
    fn identical_vectors_have_zero_deviation() {
        let u = rng::normal_vec(1, 64);
        for sampling in [WeightSampling::Reduced, WeightSampling::Dense] {
            let r = verify_cosine_preservation_with(64, &u, &u, 200, 2, sampling).unwrap();
            assert_eq!(r.p99_deviation, 0.0);
            assert_eq!(r.theory.empirical_mean, 1.0);
            assert!(r.theory.pass);
        }
    }

    #[test]
    fn cosine_argument_errors() {
        assert!(verify_cosine_preservation(3, &[0.0; 3], &[1.0, 0.0, 0.0], 10, 0).is_err());
        assert!(verify_cosine_preservation(3, &[1.0; 3], &[1.0, 0.0], 10, 0).is_err());
    }

    #[test]
    fn orthogonal_at_4096() {
        let r = verify_cosine_preservation(4096, &unit(4096, 0), &unit(4096, 1), 2000, 11).unwrap();
        assert!(r.mean_abs_deviation < 0.0135, "{r:?}");
        assert!(r.p99_deviation <= 0.094, "{r:?}");
        assert!(r.theory.pass);
    }

    #[test]
    fn lower_dimension_deviates_more() {
        let dir = |d: usize| {
            let mut u = vec![0.0; d];
            let mut v = vec![0.0; d];
            u[0] = 1.0;
            v[0] = 0.5;
            v[1] = 0.75f64.sqrt();
            (u, v)
        };
        let (u, v) = dir(64);
        let small = verify_cosine_preservation(64, &u, &v, 2000, 1).unwrap();
        let (u, v) = dir(4096);
        let large = verify_cosine_preservation(4096, &u, &v, 2000, 1).unwrap();
        assert!(small.p99_deviation > large.p99_deviation);
    }

    #[test]
    fn relu_closed_form_values() {
        assert!((relu_correlation_closed_form(0.0) - 1.0 / std::f64::consts::PI).abs() < 1e-15);
        assert!((relu_correlation_closed_form(1.0) - 1.0).abs() < 1e-15);
        for rho in [0.2, 0.5, 0.8, 0.999] {
            assert!(relu_correlation_closed_form(rho) > rho);
        }
    }

    #[test]
    fn relu_sampling_matches_closed_form() {
        for rho in [0.0, 0.5, 0.999] {
            let r = verify_activation_inflation(rho, 500, 400, Activation::Relu, 3).unwrap();
            assert!((r.corr_activation - r.closed_form.unwrap()).abs() < 0.005, "{r:?}");
            assert!((r.second_moment - 0.5).abs() < 0.01);
        }
    }

    #[test]
    fn linear_correlation_converges() {
        for rho in [0.0, 0.3, 0.9] {
            let r = verify_activation_inflation(rho, 200, 200, Activation::None, 5).unwrap();
            assert!(r.theory.pass, "{r:?}");
            assert_eq!(r.corr_activation, r.corr_linear);
        }
    }

    #[test]
    fn inflation_rejects_bad_rho() {
        for rho in [-0.1, 1.0, f64::NAN] {
            assert!(verify_activation_inflation(rho, 10, 10, Activation::Relu, 0).is_err());
        }
    }

    #[test]
    fn reports_are_reproducible_across_pools() {
        let u = rng::normal_vec(1, 300);
        let run = || verify_norm_concentration(300, &u, &vec![0.0; 300], 500, 8, 0.1).unwrap();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(run);
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(run);
        assert_eq!(one, four);
        let relu = || verify_activation_inflation(0.5, 100, 100, Activation::Gelu, 4).unwrap();
        let a = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(relu);
        let b = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap().install(relu);
        assert_eq!(a.theory.csv_row(), b.theory.csv_row());
    }

    #[test]
    fn emit_formats() {
        let dir = tempfile::tempdir().unwrap();
        let r = verify_norm_concentration(10, &unit(10, 0), &[0.0; 10], 100, 0, 0.1).unwrap();
        let p = dir.path().join("t.csv");
        emit_report(&r, &p, ReportFormat::Csv).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split(',').count(), 8);
        assert_eq!(lines[1].split(',').count(), 8);

        let s = mean_pairwise_cosine(&m(&[&[1.0, 0.0], &[1.0, 1.0]])).unwrap();
        emit_report(&s, &p, ReportFormat::Csv).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap().lines().count(), 41);
        emit_report(&s, &p, ReportFormat::Text).unwrap();
        assert!(emit_report(&s, dir.path().join("missing/x.csv"), ReportFormat::Csv).is_err());
    }

    proptest! {
        #[test]
        fn pairwise_invariances(seed in any::<u64>(), n in 2usize..8, scales in proptest::collection::vec(0.01f64..100.0, 8)) {
            let d = 4;
            let h = EmbeddingMatrix::new(n, d, rng::normal_vec(seed, n * d)).unwrap();
            let base = mean_pairwise_cosine(&h).unwrap();
            prop_assert_eq!(base.histogram.iter().sum::<u64>(), base.n_pairs);
            let scaled = EmbeddingMatrix::from_rows(
                &h.rows().zip(&scales).map(|(r, s)| r.iter().map(|x| x * s).collect::<Vec<_>>()).collect::<Vec<_>>(),
            ).unwrap();
            prop_assert!((mean_pairwise_cosine(&scaled).unwrap().mean_pairwise_cosine - base.mean_pairwise_cosine).abs() < 1e-12);
            // rotate every row by the same Givens rotation in the (0, 1) plane
            let (c, s) = ((seed % 628) as f64 / 100.0).sin_cos();
            let rotated = EmbeddingMatrix::from_rows(
                &h.rows().map(|r| {
                    let mut r = r.to_vec();
                    let (a, b) = (r[0], r[1]);
                    r[0] = c * a - s * b;
                    r[1] = s * a + c * b;
                    r
                }).collect::<Vec<_>>(),
            ).unwrap();
            prop_assert!((mean_pairwise_cosine(&rotated).unwrap().mean_pairwise_cosine - base.mean_pairwise_cosine).abs() < 1e-12);
        }

        #[test]
        fn doubling_trials_stays_in_band(seed in any::<u64>()) {
            let d = 64;
            let u = unit(d, 0);
            let b = vec![0.0; d];
            let small = verify_norm_concentration(d, &u, &b, 500, seed, 0.1).unwrap();
            let large = verify_norm_concentration(d, &u, &b, 1000, seed, 0.1).unwrap();
            let band = 3.0 * (small.theory_var / 500.0).sqrt();
            prop_assert!((large.empirical_mean - large.theory_mean).abs() <= (small.empirical_mean - small.theory_mean).abs() + band);
        }
    }
}
