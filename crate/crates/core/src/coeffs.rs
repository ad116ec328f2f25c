//! Closed-form drift and diffusion of the limiting covariance SDEs.
//!
//! * residual shaped-ReLU MLP: `b_res = γ² b_ReLU`, `Σ_res = 2γ² Σ_lin`;
//! * shaped attention: drift built from the softmax Taylor moments `S1`, `S2`
//!   and diffusion `γ²(2-γ²) Σ_lin + γ⁴ τ₀⁻² 𝒜`;
//! * shaped Transformer block: the sum of both.
//!
//! Vectors and matrices are indexed by the flattened upper triangle of `V`
//! (see [`FlatIndexMap`]). All token sums are exact loops over `m`.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::symmat::{sym_eigen, symmetrize, FlatIndexMap, TokenCovariance, DEFAULT_PSD_TOL};

/// Scalars shared by all coefficient functions. The token count comes from
/// the covariance they are evaluated at; `λ` is implied by `λ² + γ² = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoeffParams {
    pub gamma: f64,
    pub tau0: f64,
    pub c_plus: f64,
    pub c_minus: f64,
    /// Relative tolerance for the PSD check on the diffusion matrix.
    pub psd_tol: f64,
}

impl CoeffParams {
    pub fn new(gamma: f64, tau0: f64, c_plus: f64, c_minus: f64) -> Result<Self> {
        let p = Self {
            gamma,
            tau0,
            c_plus,
            c_minus,
            psd_tol: DEFAULT_PSD_TOL,
        };
        p.validate()?;
        Ok(p)
    }

    /// `γ ∈ [0, 1]` and `τ₀ > 0`. `γ = 0` is accepted as the trivial limit.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidParameter(format!("gamma = {} not in [0, 1]", self.gamma)));
        }
        if !(self.tau0 > 0.0) || !self.tau0.is_finite() {
            return Err(Error::InvalidParameter(format!("tau0 = {} must be positive", self.tau0)));
        }
        if !self.c_plus.is_finite() || !self.c_minus.is_finite() {
            return Err(Error::InvalidParameter("ReLU shaping constants must be finite".into()));
        }
        Ok(())
    }
}

/// Which limiting SDE to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CoeffKind {
    Resnet,
    Attention,
    Transformer,
}

impl std::str::FromStr for CoeffKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet" => Ok(Self::Resnet),
            "attention" => Ok(Self::Attention),
            "transformer" => Ok(Self::Transformer),
            other => Err(Error::InvalidParameter(format!("unknown coefficient kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for CoeffKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Resnet => "resnet",
            Self::Attention => "attention",
            Self::Transformer => "transformer",
        })
    }
}

/// Evaluated SDE coefficients at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftDiffusion {
    /// Length `M = m(m+1)/2`.
    pub drift: Vec<f64>,
    /// `M x M`, symmetric.
    pub diffusion: DMatrix<f64>,
}

impl DriftDiffusion {
    pub fn zeros(flat_len: usize) -> Self {
        Self {
            drift: vec![0.0; flat_len],
            diffusion: DMatrix::zeros(flat_len, flat_len),
        }
    }
}

/// `ν(ρ) = (c₊ - c₋)²/(2π) (sqrt(1-ρ²) - ρ arccos ρ)`.
///
/// `ρ` slightly outside `[-1, 1]` (up to 1e-12) is clamped; `ν(1) = 0` is
/// returned directly.
pub fn nu(rho: f64, c_plus: f64, c_minus: f64) -> Result<f64> {
    if !rho.is_finite() || rho.abs() > 1.0 + 1e-12 {
        return Err(Error::InvalidParameter(format!("correlation {rho} outside [-1, 1]")));
    }
    Ok(nu_clamped(rho, c_plus, c_minus))
}

fn nu_clamped(rho: f64, c_plus: f64, c_minus: f64) -> f64 {
    let rho = rho.clamp(-1.0, 1.0);
    if rho == 1.0 {
        return 0.0;
    }
    let k = (c_plus - c_minus).powi(2) / (2.0 * PI);
    k * ((1.0 - rho * rho).sqrt() - rho * rho.acos())
}

fn check_positive_diagonal(v: &TokenCovariance) -> Result<()> {
    for i in 0..v.dim() {
        let d = v.get(i, i);
        if !(d > 0.0) {
            return Err(Error::NonPositiveDiagonal { index: i, value: d });
        }
    }
    Ok(())
}

/// Drift of the shaped-ReLU MLP: entry `(a,b)` is `ν(ρ^{ab}) sqrt(V^{aa} V^{bb})`.
///
/// Correlations are clamped to `[-1, 1]` so states that left the PSD cone by
/// round-off still evaluate.
pub fn b_relu(v: &TokenCovariance, c_plus: f64, c_minus: f64) -> Result<Vec<f64>> {
    check_positive_diagonal(v)?;
    let map = FlatIndexMap::new(v.dim());
    Ok(map
        .pairs()
        .map(|(a, b)| {
            if a == b {
                0.0
            } else {
                let scale = (v.get(a, a) * v.get(b, b)).sqrt();
                nu_clamped(v.get(a, b) / scale, c_plus, c_minus) * scale
            }
        })
        .collect())
}

/// `Σ_lin` with entry `((a,b),(d,w)) = V^{ad} V^{bw} + V^{aw} V^{bd}`.
pub fn sigma_lin(v: &TokenCovariance) -> DMatrix<f64> {
    let map = FlatIndexMap::new(v.dim());
    let len = map.len();
    let mut out = DMatrix::zeros(len, len);
    for k in 0..len {
        let (a, b) = map.pair(k);
        for l in 0..len {
            let (d, w) = map.pair(l);
            out[(k, l)] = v.get(a, d) * v.get(b, w) + v.get(a, w) * v.get(b, d);
        }
    }
    out
}

/// Token averages used by the softmax moments.
struct TokenMeans<'a> {
    v: &'a DMatrix<f64>,
    m: usize,
    /// `V^{a x̄} = (1/m) Σ_ν V^{aν}`
    with_mean: Vec<f64>,
    /// `V^{x̄ x̄}`
    mean_mean: f64,
    /// `V̄ = (1/m) tr V`
    mean_trace: f64,
}

impl<'a> TokenMeans<'a> {
    fn new(v: &'a TokenCovariance) -> Self {
        let mat = v.matrix();
        let m = v.dim();
        let mf = m as f64;
        let with_mean: Vec<f64> = (0..m).map(|a| mat.row(a).sum() / mf).collect();
        let mean_mean = with_mean.iter().sum::<f64>() / mf;
        let mean_trace = mat.trace() / mf;
        Self {
            v: mat,
            m,
            with_mean,
            mean_mean,
            mean_trace,
        }
    }

    fn s1(&self, a: usize, d: usize, b: usize, w: usize) -> f64 {
        self.v[(a, b)] * (self.v[(d, w)] - self.with_mean[d] - self.with_mean[w] + self.mean_mean)
    }

    fn s2(&self, a: usize, d: usize) -> f64 {
        self.v[(a, a)]
            * (self.v[(d, d)] - 2.0 * self.with_mean[d] + 2.0 * self.mean_mean - self.mean_trace)
    }

    fn attention_drift_entry(&self, a: usize, b: usize) -> f64 {
        let m = self.m;
        let mut first = 0.0;
        for nu in 0..m {
            for ka in 0..m {
                first += self.v[(nu, ka)] * self.s1(a, nu, b, ka);
            }
        }
        let mut second = 0.0;
        for nu in 0..m {
            second += self.v[(b, nu)] * self.s2(a, nu) + self.v[(a, nu)] * self.s2(b, nu);
        }
        let mf = m as f64;
        first / (mf * mf) + second / (2.0 * mf)
    }

    fn a_entry(&self, a: usize, b: usize, d: usize, w: usize) -> f64 {
        let v = self.v;
        let m = self.m;
        let mut acc = 0.0;
        for nu in 0..m {
            for ka in 0..m {
                acc += v[(a, ka)] * v[(d, nu)] * self.s1(b, ka, w, nu)
                    + v[(a, ka)] * v[(w, nu)] * self.s1(b, ka, d, nu)
                    + v[(b, nu)] * v[(d, ka)] * self.s1(a, nu, w, ka)
                    + v[(b, nu)] * v[(w, ka)] * self.s1(a, nu, d, ka);
            }
        }
        let mf = m as f64;
        acc / (mf * mf)
    }
}

fn check_index(v: &TokenCovariance, indices: &[usize]) -> Result<()> {
    match indices.iter().find(|&&i| i >= v.dim()) {
        Some(&index) => Err(Error::IndexOutOfRange { index, dim: v.dim() }),
        None => Ok(()),
    }
}

/// `S1^{ad,bw} = V^{ab} (V^{dw} - V^{d x̄} - V^{w x̄} + V^{x̄ x̄})`.
pub fn s1(v: &TokenCovariance, a: usize, d: usize, b: usize, w: usize) -> Result<f64> {
    check_index(v, &[a, d, b, w])?;
    Ok(TokenMeans::new(v).s1(a, d, b, w))
}

/// `S2^{ad} = V^{aa} (V^{dd} - 2 V^{d x̄} + 2 V^{x̄ x̄} - V̄)`.
pub fn s2(v: &TokenCovariance, a: usize, d: usize) -> Result<f64> {
    check_index(v, &[a, d])?;
    Ok(TokenMeans::new(v).s2(a, d))
}

/// Shaped-attention drift.
pub fn b_attn(v: &TokenCovariance, params: &CoeffParams) -> Result<Vec<f64>> {
    check_positive_diagonal(v)?;
    let means = TokenMeans::new(v);
    let scale = params.gamma * params.gamma / (params.tau0 * params.tau0);
    let map = FlatIndexMap::new(v.dim());
    Ok(map
        .pairs()
        .map(|(a, b)| scale * means.attention_drift_entry(a, b))
        .collect())
}

/// The attention correction `𝒜^{ab,dw}` to the diffusion (no `γ`, no `τ₀`).
pub fn a_tensor(v: &TokenCovariance, a: usize, b: usize, d: usize, w: usize) -> Result<f64> {
    check_index(v, &[a, b, d, w])?;
    Ok(TokenMeans::new(v).a_entry(a, b, d, w))
}

/// `𝒜` as an `M x M` matrix over flattened pairs (not symmetrized).
pub fn a_matrix(v: &TokenCovariance) -> DMatrix<f64> {
    let means = TokenMeans::new(v);
    let map = FlatIndexMap::new(v.dim());
    let len = map.len();
    DMatrix::from_fn(len, len, |k, l| {
        let (a, b) = map.pair(k);
        let (d, w) = map.pair(l);
        means.a_entry(a, b, d, w)
    })
}

fn sigma_attn_unchecked(v: &TokenCovariance, params: &CoeffParams) -> DMatrix<f64> {
    let g2 = params.gamma * params.gamma;
    let lin = sigma_lin(v) * (g2 * (2.0 - g2));
    let corr = a_matrix(v) * (g2 * g2 / (params.tau0 * params.tau0));
    symmetrize(&(lin + corr))
}

/// Errors when the symmetrized diffusion has an eigenvalue below
/// `-tol * max(1, λ_max)`, which indicates a coefficient bug or a state far
/// outside the PSD cone.
fn check_psd(sigma: &DMatrix<f64>, tol: f64) -> Result<()> {
    if sigma.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("diffusion matrix"));
    }
    let eig = sym_eigen(sigma)?;
    let scale = eig.max().max(1.0);
    if eig.min() < -tol * scale {
        return Err(Error::Indefinite {
            min: eig.min(),
            tol,
            scale,
        });
    }
    Ok(())
}

/// Shaped-attention diffusion `γ²(2-γ²) Σ_lin + γ⁴ τ₀⁻² 𝒜`, symmetrized and
/// checked for positive semi-definiteness.
pub fn sigma_attn(v: &TokenCovariance, params: &CoeffParams) -> Result<DMatrix<f64>> {
    let sigma = sigma_attn_unchecked(v, params);
    check_psd(&sigma, params.psd_tol)?;
    Ok(sigma)
}

pub fn resnet_coeffs(v: &TokenCovariance, params: &CoeffParams) -> Result<DriftDiffusion> {
    let g2 = params.gamma * params.gamma;
    let drift = b_relu(v, params.c_plus, params.c_minus)?
        .into_iter()
        .map(|x| g2 * x)
        .collect();
    let diffusion = sigma_lin(v) * (2.0 * g2);
    check_psd(&diffusion, params.psd_tol)?;
    Ok(DriftDiffusion { drift, diffusion })
}

pub fn attention_coeffs(v: &TokenCovariance, params: &CoeffParams) -> Result<DriftDiffusion> {
    Ok(DriftDiffusion {
        drift: b_attn(v, params)?,
        diffusion: sigma_attn(v, params)?,
    })
}

/// Shaped Transformer block: attention plus residual-MLP coefficients.
pub fn transformer_coeffs(v: &TokenCovariance, params: &CoeffParams) -> Result<DriftDiffusion> {
    let g2 = params.gamma * params.gamma;
    let attn = b_attn(v, params)?;
    let relu = b_relu(v, params.c_plus, params.c_minus)?;
    let drift = attn.iter().zip(&relu).map(|(x, y)| x + g2 * y).collect();
    let diffusion = sigma_attn_unchecked(v, params) + sigma_lin(v) * (2.0 * g2);
    check_psd(&diffusion, params.psd_tol)?;
    Ok(DriftDiffusion { drift, diffusion })
}

pub fn coefficients(kind: CoeffKind, v: &TokenCovariance, params: &CoeffParams) -> Result<DriftDiffusion> {
    match kind {
        CoeffKind::Resnet => resnet_coeffs(v, params),
        CoeffKind::Attention => attention_coeffs(v, params),
        CoeffKind::Transformer => transformer_coeffs(v, params),
    }
}
