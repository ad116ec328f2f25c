//! Brute-force Monte Carlo estimators for every closed-form moment in
//! [`crate::coeffs`], each reported with its standard error.
//!
//! The estimators sample the finite objects directly (logits, softmax
//! attention, single network layers) and never call the closed forms they
//! are compared against.

use std::f64::consts::FRAC_1_SQRT_2;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::coeffs::{self, CoeffKind, CoeffParams};
use crate::ensemble::{run_indexed, SeedTree};
use crate::error::{Error, Result};
use crate::finitenet::{
    attention_logits, build_inputs, he_constant, sample_block, shaped_attention_matrix, shaped_relu, NetConfig, Variant,
};
use crate::symmat::{covariance_of, flatten, gram_factor, FlatIndexMap, TokenCovariance};

/// Uniform acceptance band, in standard errors.
pub const SE_BAND: f64 = 4.0;

/// Samples per random stream; batches are independent of thread count.
const BATCH: usize = 1024;

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    compensation: f64,
}

impl NeumaierSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl FromIterator<f64> for NeumaierSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = Self::default();
        iter.into_iter().for_each(|x| s.add(x));
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentEstimate {
    pub mean: f64,
    /// Sample standard deviation over `√samples`.
    pub std_error: f64,
    pub samples: usize,
}

impl MomentEstimate {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        let n = values.len();
        if n < 2 {
            return Err(Error::EmptySample);
        }
        let mean = values.iter().copied().collect::<NeumaierSum>().value() / n as f64;
        let ss = values.iter().map(|x| (x - mean).powi(2)).collect::<NeumaierSum>().value();
        let std_error = (ss / (n - 1) as f64 / n as f64).sqrt();
        if !mean.is_finite() || !std_error.is_finite() {
            return Err(Error::NonFinite("Monte Carlo sample"));
        }
        Ok(Self {
            mean,
            std_error,
            samples: n,
        })
    }

    /// `|mean - target| / SE`, with a round-off floor on the error.
    pub fn z_score(&self, target: f64) -> f64 {
        let floor = 1e-12 * (1.0 + target.abs());
        (self.mean - target).abs() / self.std_error.max(floor)
    }

    pub fn agrees_with(&self, target: f64) -> bool {
        self.z_score(target) <= SE_BAND
    }
}

/// Means and covariances of a vector-valued sample, each with its standard
/// error. The covariance entry `(k, l)` is the mean of
/// `(u_k - ū_k)(u_l - ū_l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorMoments {
    pub mean: Vec<MomentEstimate>,
    pub covariance: DMatrix<MomentEstimate>,
}

impl VectorMoments {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().ok_or(Error::EmptySample)?.len();
        let column = |k: usize| rows.iter().map(|r| r[k]).collect::<Vec<f64>>();
        let mean = (0..dim)
            .map(|k| MomentEstimate::from_values(&column(k)))
            .collect::<Result<Vec<_>>>()?;
        let centered: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m.mean).collect())
            .collect();
        let mut cov = Vec::with_capacity(dim * dim);
        for l in 0..dim {
            for k in 0..dim {
                let prods: Vec<f64> = centered.iter().map(|c| c[k] * c[l]).collect();
                cov.push(MomentEstimate::from_values(&prods)?);
            }
        }
        Ok(Self {
            mean,
            covariance: DMatrix::from_vec(dim, dim, cov),
        })
    }
}

/// Runs `f(rng, count)` over batches of [`BATCH`] samples, batch `b` on
/// stream `b`, and concatenates the results in order.
fn sample_batched<T, F>(samples: usize, seeds: &SeedTree, label: &str, threads: Option<usize>, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&mut rand_chacha::ChaCha8Rng, usize) -> Vec<T> + Sync + Send,
{
    let batches = samples.div_ceil(BATCH);
    run_indexed(batches, threads, |b| {
        let count = BATCH.min(samples - b * BATCH);
        f(&mut seeds.rng(label, b as u64), count)
    })
    .into_iter()
    .flatten()
    .collect()
}

fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Logits `X Wᵠ Wᴷᵀ Xᵀ / n` drawn through `X Wᵠ ~ L Gᵠ` with explicit
/// `m x n_k` Gaussian factors.
fn factor_logits<R: Rng + ?Sized>(l: &DMatrix<f64>, n: usize, nk: usize, rng: &mut R) -> DMatrix<f64> {
    let m = l.nrows();
    let q = l * gaussian(m, nk, rng);
    let k = l * gaussian(m, nk, rng);
    q * k.transpose() / n as f64
}

fn check_indices(v: &TokenCovariance, idx: &[usize]) -> Result<()> {
    match idx.iter().find(|&&i| i >= v.dim()) {
        Some(&index) => Err(Error::IndexOutOfRange { index, dim: v.dim() }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YMoments {
    /// `E[Y^{ab}]`.
    pub first: MomentEstimate,
    /// `E[Y^{ab} Y^{dw}]`.
    pub second: MomentEstimate,
}

/// Moments of attention logits under dense Gaussian `Wᵠ, Wᴷ` with `X` fixed
/// and `X Xᵀ / n = V`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_y_moment(
    v: &TokenCovariance,
    (a, b, d, w): (usize, usize, usize, usize),
    n: usize,
    nk: usize,
    samples: usize,
    seeds: &SeedTree,
    threads: Option<usize>,
) -> Result<YMoments> {
    check_indices(v, &[a, b, d, w])?;
    let x = build_inputs(v, n, &mut seeds.rng("y-moment/inputs", 0))?;
    let draws = sample_batched(samples, seeds, "y-moment", threads, |rng, count| {
        (0..count)
            .map(|_| {
                let wq = gaussian(n, nk, rng);
                let wk = gaussian(n, nk, rng);
                let y = attention_logits(&x, &wq, &wk).expect("consistent shapes");
                (y[(a, b)], y[(a, b)] * y[(d, w)])
            })
            .collect()
    });
    let (first, second): (Vec<f64>, Vec<f64>) = draws.into_iter().unzip();
    Ok(YMoments {
        first: MomentEstimate::from_values(&first)?,
        second: MomentEstimate::from_values(&second)?,
    })
}

/// Estimates of the softmax Taylor moments, indexed as `s1[((a*m + d)*m + b)*m + w]`
/// for `S1^{ad,bw}` and `s2[a*m + d]` for `S2^{ad}`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaylorMoments {
    pub m: usize,
    pub s1: Vec<MomentEstimate>,
    pub s2: Vec<MomentEstimate>,
}

impl TaylorMoments {
    pub fn s1(&self, a: usize, d: usize, b: usize, w: usize) -> MomentEstimate {
        let m = self.m;
        self.s1[((a * m + d) * m + b) * m + w]
    }

    pub fn s2(&self, a: usize, d: usize) -> MomentEstimate {
        self.s2[a * self.m + d]
    }
}

/// `S1^{ad,bw} = E[F1^{ad} F1^{bw}]/n_k` and `S2^{ad} = E[F2^{ad}]/n_k` with
/// `F1^{ad} = Y^{ad} - Ȳ^a` and
/// `F2^{ad} = (F1^{ad})² - ((1/m) Σ_ν (Y^{aν})² - (Ȳ^a)²)`.
pub fn estimate_taylor_moments(
    v: &TokenCovariance,
    n: usize,
    nk: usize,
    samples: usize,
    seeds: &SeedTree,
    threads: Option<usize>,
) -> Result<TaylorMoments> {
    let m = v.dim();
    if m > n {
        return Err(Error::InvalidParameter(format!("m = {m} exceeds n = {n}")));
    }
    let l = gram_factor(&(v.matrix() * n as f64));
    let mf = m as f64;
    let scale = 1.0 / nk as f64;
    let rows = sample_batched(samples, seeds, "taylor", threads, |rng, count| {
        (0..count)
            .map(|_| {
                let y = factor_logits(&l, n, nk, rng);
                let row_mean: Vec<f64> = (0..m).map(|a| y.row(a).sum() / mf).collect();
                let row_sq: Vec<f64> = (0..m).map(|a| y.row(a).norm_squared() / mf).collect();
                let f1 = DMatrix::from_fn(m, m, |a, d| y[(a, d)] - row_mean[a]);
                let mut out = Vec::with_capacity(m * m * m * m + m * m);
                for a in 0..m {
                    for d in 0..m {
                        for b in 0..m {
                            for w in 0..m {
                                out.push(f1[(a, d)] * f1[(b, w)] * scale);
                            }
                        }
                    }
                }
                for a in 0..m {
                    for d in 0..m {
                        let f2 = f1[(a, d)].powi(2) - (row_sq[a] - row_mean[a].powi(2));
                        out.push(f2 * scale);
                    }
                }
                out
            })
            .collect()
    });
    let len = m * m * m * m + m * m;
    let estimates = (0..len)
        .map(|k| MomentEstimate::from_values(&rows.iter().map(|r| r[k]).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    let (s1, s2) = estimates.split_at(m * m * m * m);
    Ok(TaylorMoments {
        m,
        s1: s1.to_vec(),
        s2: s2.to_vec(),
    })
}

/// `n (c K1(ρ) - ρ)` with `K1(ρ) = E[σ_s(g₁) σ_s(g₂)]` over unit Gaussians
/// with correlation `ρ`.
///
/// Each draw is averaged with its mirror `(-g₁, -g₂)`, and `g₁ g₂` (mean `ρ`)
/// is used as a regression control variate; the reported error is that of
/// the regression residual, combined with the round-off of `n (c K - ρ)`,
/// which dominates when the residual vanishes (`ρ = 1`).
pub fn estimate_k1(
    rho: f64,
    c_plus: f64,
    c_minus: f64,
    n: usize,
    samples: usize,
    seeds: &SeedTree,
    threads: Option<usize>,
) -> Result<MomentEstimate> {
    if !(-1.0..=1.0).contains(&rho) {
        return Err(Error::InvalidParameter(format!("correlation {rho} outside [-1, 1]")));
    }
    let c = he_constant(c_plus, c_minus, n);
    let nf = n as f64;
    let orth = (1.0 - rho * rho).sqrt();
    let draws = sample_batched(samples, seeds, "k1", threads, |rng, count| {
        (0..count)
            .map(|_| {
                let z1: f64 = rng.sample(StandardNormal);
                let z2: f64 = rng.sample(StandardNormal);
                let g1 = z1;
                let g2 = rho * z1 + orth * z2;
                let s = |x: f64| shaped_relu(x, c_plus, c_minus, n);
                let ck = c * 0.5 * (s(g1) * s(g2) + s(-g1) * s(-g2));
                (nf * (ck - rho), g1 * g2, ck.abs().max(rho.abs()))
            })
            .collect()
    });
    let y: Vec<f64> = draws.iter().map(|d| d.0).collect();
    let x: Vec<f64> = draws.iter().map(|d| d.1).collect();
    let scale = draws.iter().map(|d| d.2).collect::<NeumaierSum>().value() / draws.len().max(1) as f64;
    let est = control_variate(&y, &x, rho)?;
    let roundoff = 4.0 * f64::EPSILON * nf * scale;
    Ok(MomentEstimate {
        std_error: est.std_error.hypot(roundoff),
        ..est
    })
}

/// Regression estimator `ȳ - β (x̄ - μ_x)`, with `β` fitted on the sample.
fn control_variate(y: &[f64], x: &[f64], mu_x: f64) -> Result<MomentEstimate> {
    let n = y.len();
    if n < 3 {
        return Err(Error::EmptySample);
    }
    let nf = n as f64;
    let ym = y.iter().copied().collect::<NeumaierSum>().value() / nf;
    let xm = x.iter().copied().collect::<NeumaierSum>().value() / nf;
    let sxy = x.iter().zip(y).map(|(a, b)| (a - xm) * (b - ym)).collect::<NeumaierSum>().value();
    let sxx = x.iter().map(|a| (a - xm).powi(2)).collect::<NeumaierSum>().value();
    let beta = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let residuals: Vec<f64> = y.iter().zip(x).map(|(b, a)| b - beta * (a - mu_x)).collect();
    let est = MomentEstimate::from_values(&residuals)?;
    // one degree of freedom spent on β
    let dof = ((nf - 1.0) / (nf - 2.0)).sqrt();
    Ok(MomentEstimate {
        std_error: est.std_error * dof,
        ..est
    })
}

/// `n E[ΔV]` and `n Cov[ΔV]` of one block of `config` from a fixed input with
/// covariance `V₀`, flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct OneStepMoments {
    pub drift: Vec<MomentEstimate>,
    pub diffusion: DMatrix<MomentEstimate>,
}

pub fn one_step_moments(
    config: &NetConfig,
    v0: &TokenCovariance,
    samples: usize,
    seeds: &SeedTree,
    threads: Option<usize>,
) -> Result<OneStepMoments> {
    config.validate()?;
    let x0 = build_inputs(v0, config.n, &mut seeds.rng("one-step/inputs", 0))?;
    let base = flatten(&covariance_of(&x0));
    let nf = config.n as f64;
    let root = nf.sqrt();
    // u = √n ΔV: E[u] √n is the drift and Cov[u] the diffusion.
    let rows = sample_batched(samples, seeds, "one-step", threads, |rng, count| {
        (0..count)
            .map(|_| {
                let x1 = sample_block(&x0, config, rng).expect("validated configuration");
                flatten(&covariance_of(&x1))
                    .iter()
                    .zip(&base)
                    .map(|(a, b)| root * (a - b))
                    .collect()
            })
            .collect::<Vec<Vec<f64>>>()
    });
    let moments = VectorMoments::from_rows(&rows)?;
    let drift = moments
        .mean
        .iter()
        .map(|e| MomentEstimate {
            mean: e.mean * root,
            std_error: e.std_error * root,
            samples: e.samples,
        })
        .collect();
    Ok(OneStepMoments {
        drift,
        diffusion: moments.covariance,
    })
}

/// Shaped attention from logits sampled at covariance `V`, with the
/// attention-only temperature `τ₀ √(n n_k)`.
fn attention_config(m: usize, n: usize, nk: usize, tau0: f64) -> NetConfig {
    let mut cfg = NetConfig::new(Variant::ShapedAttention, n, 1, m, FRAC_1_SQRT_2);
    cfg.nk = nk;
    cfg.tau0 = tau0;
    cfg
}

/// `n γ² E[A V Aᵀ - V]`, the attention-layer drift conditioned on the
/// attention matrix (the value weights integrated out exactly). Each logit
/// draw `Y` is paired with `-Y`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_attention_drift(
    v: &TokenCovariance,
    n: usize,
    nk: usize,
    gamma: f64,
    tau0: f64,
    samples: usize,
    seeds: &SeedTree,
    threads: Option<usize>,
) -> Result<Vec<MomentEstimate>> {
    let m = v.dim();
    let cfg = attention_config(m, n, nk, tau0);
    let l = gram_factor(&(v.matrix() * n as f64));
    let vm = v.matrix().clone();
    let base = flatten(v);
    let scale = n as f64 * gamma * gamma;
    let rows = sample_batched(samples, seeds, "attention-drift", threads, |rng, count| {
        (0..count)
            .map(|_| {
                let y = factor_logits(&l, n, nk, rng);
                let a1 = shaped_attention_matrix(&y, &cfg);
                let a2 = shaped_attention_matrix(&(-y), &cfg);
                let avg = (&a1 * &vm * a1.transpose() + &a2 * &vm * a2.transpose()) * 0.5;
                flatten(&TokenCovariance::new(avg).expect("finite attention"))
                    .iter()
                    .zip(&base)
                    .map(|(x, b)| scale * (x - b))
                    .collect()
            })
            .collect::<Vec<Vec<f64>>>()
    });
    let dim = base.len();
    (0..dim)
        .map(|k| MomentEstimate::from_values(&rows.iter().map(|r| r[k]).collect::<Vec<_>>()))
        .collect()
}

/// `n Cov_A[(A V Aᵀ)^{ab}, (A V Aᵀ)^{dw}]` over the shaped attention matrix,
/// the part of the covariance of the attention update beyond `Σ_lin`; its
/// limit is `τ₀⁻² 𝒜`. Flattened `M x M`.
pub fn estimate_t2_cov(
    v: &TokenCovariance,
    n: usize,
    nk: usize,
    tau0: f64,
    samples: usize,
    seeds: &SeedTree,
    threads: Option<usize>,
) -> Result<DMatrix<MomentEstimate>> {
    let m = v.dim();
    let cfg = attention_config(m, n, nk, tau0);
    let l = gram_factor(&(v.matrix() * n as f64));
    let vm = v.matrix().clone();
    let root = (n as f64).sqrt();
    let rows = sample_batched(samples, seeds, "t2-cov", threads, |rng, count| {
        (0..count)
            .map(|_| {
                let y = factor_logits(&l, n, nk, rng);
                let a = shaped_attention_matrix(&y, &cfg);
                let mixed = &a * &vm * a.transpose();
                flatten(&TokenCovariance::new(mixed).expect("finite attention"))
                    .into_iter()
                    .map(|x| x * root)
                    .collect()
            })
            .collect::<Vec<Vec<f64>>>()
    });
    Ok(VectorMoments::from_rows(&rows)?.covariance)
}

/// One comparison of an estimate against its closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleCheck {
    pub name: String,
    pub estimate: MomentEstimate,
    pub target: f64,
}

impl OracleCheck {
    pub fn new(name: impl Into<String>, estimate: MomentEstimate, target: f64) -> Self {
        Self {
            name: name.into(),
            estimate,
            target,
        }
    }

    pub fn passed(&self) -> bool {
        self.estimate.agrees_with(self.target)
    }
}

/// Settings of the full oracle suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteSettings {
    pub n: usize,
    pub samples: usize,
    /// Width for the ν checks, large enough that `c - 1` is negligible.
    pub k1_width: usize,
    /// Key/query width for the logit-moment checks with dense weights.
    pub logit_nk: usize,
    pub seed: u64,
    pub threads: Option<usize>,
}

impl Default for SuiteSettings {
    fn default() -> Self {
        Self {
            n: 400,
            samples: 100_000,
            k1_width: 1_000_000,
            logit_nk: 16,
            seed: 20230601,
            threads: None,
        }
    }
}

/// Fixed generic covariance used where a random PSD state is called for.
pub fn reference_covariance_m3() -> TokenCovariance {
    TokenCovariance::from_row_slice(3, &[1.2, 0.3, -0.2, 0.3, 0.9, 0.4, -0.2, 0.4, 1.1]).expect("valid matrix")
}

fn rho02() -> TokenCovariance {
    TokenCovariance::from_row_slice(2, &[1.0, 0.2, 0.2, 1.0]).expect("valid matrix")
}

fn push_vector(out: &mut Vec<OracleCheck>, name: &str, est: &[MomentEstimate], target: &[f64]) {
    let map = crate::symmat::dim_from_flat_len(target.len()).map(FlatIndexMap::new);
    for (k, (e, t)) in est.iter().zip(target).enumerate() {
        let label = match &map {
            Some(map) => {
                let (a, b) = map.pair(k);
                format!("{name}[{a}{b}]")
            }
            None => format!("{name}[{k}]"),
        };
        out.push(OracleCheck::new(label, *e, *t));
    }
}

fn push_matrix(out: &mut Vec<OracleCheck>, name: &str, est: &DMatrix<MomentEstimate>, target: &DMatrix<f64>) {
    let map = crate::symmat::dim_from_flat_len(target.nrows()).map(FlatIndexMap::new);
    for k in 0..target.nrows() {
        for l in k..target.ncols() {
            let label = match &map {
                Some(map) => {
                    let ((a, b), (d, w)) = (map.pair(k), map.pair(l));
                    format!("{name}[{a}{b},{d}{w}]")
                }
                None => format!("{name}[{k},{l}]"),
            };
            out.push(OracleCheck::new(label, est[(k, l)], target[(k, l)]));
        }
    }
}

/// Every oracle comparison: logit moments, softmax Taylor moments, ν at two
/// shaping settings, one-step drift and diffusion of the three layer types,
/// the conditional attention drift, and the attention diffusion correction.
pub fn run_oracle_suite(settings: &SuiteSettings) -> Result<Vec<OracleCheck>> {
    let SuiteSettings {
        n,
        samples,
        k1_width,
        logit_nk,
        seed,
        threads,
    } = settings.clone();
    let root = SeedTree::new(seed);
    let mut out = Vec::new();
    let v2 = rho02();
    let v3 = reference_covariance_m3();
    let id2 = TokenCovariance::identity(2);

    // logits
    let nkf = logit_nk as f64;
    for (name, v, idx) in [
        ("E[Y01 Y01] V=I", &id2, (0, 1, 0, 1)),
        ("E[Y01 Y10] V=rho0.2", &v2, (0, 1, 1, 0)),
        ("E[Y01 Y21] V=m3", &v3, (0, 1, 2, 1)),
        ("E[Y00 Y11] V=m3", &v3, (0, 0, 1, 1)),
    ] {
        let (a, b, d, w) = idx;
        let est = estimate_y_moment(v, idx, n, logit_nk, samples, &root.child(name), threads)?;
        out.push(OracleCheck::new(name, est.second, nkf * v.get(a, d) * v.get(b, w)));
        out.push(OracleCheck::new(format!("E[Y{a}{b}] from {name}"), est.first, 0.0));
    }

    // softmax Taylor moments
    for (name, v) in [("V=rho0.2", &v2), ("V=m3", &v3)] {
        let est = estimate_taylor_moments(v, n, n, samples, &root.child(&format!("taylor {name}")), threads)?;
        let m = v.dim();
        let picks: Vec<(usize, usize, usize, usize)> = if m == 2 {
            (0..16).map(|k| (k >> 3 & 1, k >> 2 & 1, k >> 1 & 1, k & 1)).collect()
        } else {
            vec![(0, 0, 0, 0), (0, 1, 0, 2), (1, 2, 0, 1), (2, 2, 1, 0), (1, 1, 2, 2), (0, 2, 2, 0)]
        };
        for (a, d, b, w) in picks {
            out.push(OracleCheck::new(
                format!("S1[{a}{d},{b}{w}] {name}"),
                est.s1(a, d, b, w),
                coeffs::s1(v, a, d, b, w)?,
            ));
        }
        for a in 0..m {
            for d in 0..m {
                out.push(OracleCheck::new(format!("S2[{a}{d}] {name}"), est.s2(a, d), coeffs::s2(v, a, d)?));
            }
        }
    }

    // ν, at a setting where the two printed forms agree only at ρ = 0 and
    // one where they differ everywhere
    for (cp, cm) in [(0.0, -1.0), (1.0, -1.0)] {
        for rho in [-0.5, 0.0, 0.5, 1.0] {
            let name = format!("nu(rho={rho}) c+={cp} c-={cm}");
            let est = estimate_k1(rho, cp, cm, k1_width, samples, &root.child(&name), threads)?;
            out.push(OracleCheck::new(name, est, coeffs::nu(rho, cp, cm)?));
        }
    }

    // one-step moments of finite layers
    let gamma = FRAC_1_SQRT_2;
    let params = CoeffParams::new(gamma, 1.0, 0.0, -1.0)?;
    for (variant, kind) in [
        (Variant::ResnetRelu, CoeffKind::Resnet),
        (Variant::ShapedAttention, CoeffKind::Attention),
        (Variant::ShapedTransformer, CoeffKind::Transformer),
    ] {
        let cfg = NetConfig::new(variant, n, 1, 3, gamma);
        let name = format!("one-step {variant}");
        let est = one_step_moments(&cfg, &v3, samples, &root.child(&name), threads)?;
        let target = coeffs::coefficients(kind, &v3, &params)?;
        push_vector(&mut out, &format!("{name} drift"), &est.drift, &target.drift);
        push_matrix(&mut out, &format!("{name} diffusion"), &est.diffusion, &target.diffusion);
    }
    let zero = NetConfig::new(Variant::ShapedTransformer, n, 1, 3, 0.0);
    let est = one_step_moments(&zero, &v3, samples.min(10_000), &root.child("one-step gamma=0"), threads)?;
    push_vector(&mut out, "one-step gamma=0 drift", &est.drift, &[0.0; 6]);

    // attention drift with the value weights integrated out
    for (name, v, g) in [("V=I", &id2, 1.0), ("V=m3", &v3, gamma)] {
        let p = CoeffParams::new(g, 1.0, 0.0, -1.0)?;
        let label = format!("attention drift {name}");
        let est = estimate_attention_drift(v, n, n, g, 1.0, samples, &root.child(&label), threads)?;
        push_vector(&mut out, &label, &est, &coeffs::b_attn(v, &p)?);
    }

    // attention diffusion correction τ₀⁻² 𝒜
    for (name, v, tau0) in [("V=I", &id2, 1.0), ("V=rho0.2", &v2, 1.0), ("V=m3", &v3, 0.8)] {
        let label = format!("A/tau0^2 {name}");
        let est = estimate_t2_cov(v, n, n, tau0, samples, &root.child(&label), threads)?;
        let target = coeffs::a_matrix(v) / (tau0 * tau0);
        push_matrix(&mut out, &label, &est, &crate::symmat::symmetrize(&target));
    }

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn neumaier_recovers_lost_digits() {
        let s: NeumaierSum = [1.0, 1e100, 1.0, -1e100].into_iter().collect();
        assert_eq!(s.value(), 2.0);
    }

    #[test]
    fn moment_estimate_basics() {
        let e = MomentEstimate::from_values(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(e.mean, 2.5);
        assert_abs_diff_eq!(e.std_error, (5.0f64 / 3.0 / 4.0).sqrt(), epsilon = 1e-15);
        assert!(MomentEstimate::from_values(&[1.0]).is_err());
        assert!(e.agrees_with(2.5 + 4.0 * e.std_error - 1e-12));
        assert!(!e.agrees_with(2.5 + 4.1 * e.std_error));
        let exact = MomentEstimate::from_values(&[0.0, 0.0]).unwrap();
        assert!(exact.agrees_with(0.0));
        assert!(!exact.agrees_with(1e-6));
    }

    #[test]
    fn vector_moments_of_known_rows() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 6.0], vec![5.0, 10.0]];
        let vm = VectorMoments::from_rows(&rows).unwrap();
        assert_eq!(vm.mean[0].mean, 3.0);
        assert_abs_diff_eq!(vm.covariance[(0, 1)].mean, 16.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(vm.covariance[(1, 1)].mean, 32.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn batching_is_thread_independent() {
        let seeds = SeedTree::new(3);
        let a = estimate_k1(0.3, 0.0, -1.0, 100, 3000, &seeds, Some(1)).unwrap();
        let b = estimate_k1(0.3, 0.0, -1.0, 100, 3000, &seeds, Some(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples, 3000);
    }

    #[test]
    fn k1_at_identical_inputs() {
        let est = estimate_k1(1.0, 0.0, -1.0, 1_000_000, 4000, &SeedTree::new(1), None).unwrap();
        assert!(est.mean.abs() < 1e-8, "{est:?}");
        assert!(est.agrees_with(0.0), "{est:?}");
    }
}
