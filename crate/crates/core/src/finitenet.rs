//! Finite-width forward simulation of residual attention, shaped-ReLU and
//! Transformer networks.
//!
//! Tokens are the rows of an `m x n` matrix `X`; weights are standard normal
//! and every `1/√n` scaling is written out in the layer formulas.
//!
//! Weights are consumed only through products `X W`, so a layer can either
//! draw dense matrices ([`LayerWeights`]) or sample `X W` directly from its
//! law ([`GaussianSketch`]): for `W` with iid `N(0,1)` entries, `X W` has the
//! same distribution as `L Z` where `L Lᵀ = X Xᵀ` and `Z` is `m x p` standard
//! normal. The sketch costs `O(m² n)` per layer instead of `O(m n²)` and is
//! exact, including under coordinatewise nonlinearities.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::ensemble::{run_indexed, SeedTree};
use crate::error::{Error, Result};
use crate::symmat::{covariance_of, flatten, gram_factor, TokenCovariance, DEFAULT_PSD_TOL};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// `λX + γ A X Wᵛ/√n` with the shaped attention matrix.
    ShapedAttention,
    /// Same residual form with `Softmax(Y/√n_k)`.
    VanillaSoftmax,
    /// Vanilla softmax attention with LayerNorm on the branch input.
    PreLn,
    /// Shaped-ReLU residual MLP.
    ResnetRelu,
    /// Shaped attention followed by a shaped-ReLU layer in every block.
    ShapedTransformer,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::ShapedAttention,
        Variant::VanillaSoftmax,
        Variant::PreLn,
        Variant::ResnetRelu,
        Variant::ShapedTransformer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::ShapedAttention => "shaped_attention",
            Self::VanillaSoftmax => "vanilla_softmax",
            Self::PreLn => "pre_ln",
            Self::ResnetRelu => "resnet_relu",
            Self::ShapedTransformer => "shaped_transformer",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown variant '{s}'")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Switches for the three modifications of shaped attention. With all three
/// off the attention matrix is `Softmax(Y/√n_k)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Ablation {
    pub use_identity: bool,
    pub use_centering: bool,
    /// `τ = τ₀ √(n n_k)` when set, `τ = √n_k` otherwise.
    pub use_wide_temperature: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_identity: true,
            use_centering: true,
            use_wide_temperature: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum WeightMode {
    /// Sample `X W` from its law through the Gram factor of `X`.
    #[default]
    Sketch,
    /// Draw full `n x n` and `n x n_k` weight matrices.
    Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub nk: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub tau0: f64,
    pub c_plus: f64,
    pub c_minus: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub variant: Variant,
    pub ablation: Ablation,
    pub weight_mode: WeightMode,
    /// Require `λ² + γ² = 1`.
    pub enforce_branch_norm: bool,
}

impl NetConfig {
    /// Defaults: `λ = √(1-γ²)`, `n_k = n`, `τ₀ = 1`, `c₊ = 0`, `c₋ = -1`,
    /// `γ₁ = γ₂ = 1`, all shaping modifications on.
    pub fn new(variant: Variant, n: usize, d: usize, m: usize, gamma: f64) -> Self {
        Self {
            n,
            d,
            m,
            nk: n,
            lambda: (1.0 - gamma * gamma).max(0.0).sqrt(),
            gamma,
            tau0: 1.0,
            c_plus: 0.0,
            c_minus: -1.0,
            gamma1: 1.0,
            gamma2: 1.0,
            variant,
            ablation: Ablation::default(),
            weight_mode: WeightMode::default(),
            enforce_branch_norm: true,
        }
    }

    /// Sets `γ` and, when the branch norm is enforced, `λ = √(1-γ²)`.
    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        if self.enforce_branch_norm {
            self.lambda = (1.0 - gamma * gamma).max(0.0).sqrt();
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.nk == 0 {
            return Err(Error::InvalidParameter("n, m and n_k must be at least 1".into()));
        }
        if !(self.tau0 > 0.0) || !self.tau0.is_finite() {
            return Err(Error::InvalidParameter(format!("tau0 = {} must be positive", self.tau0)));
        }
        let scalars = [
            self.lambda,
            self.gamma,
            self.c_plus,
            self.c_minus,
            self.gamma1,
            self.gamma2,
        ];
        if scalars.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("network scalars must be finite".into()));
        }
        if self.enforce_branch_norm && (self.lambda.powi(2) + self.gamma.powi(2) - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "lambda^2 + gamma^2 = {} but the branch norm is enforced",
                self.lambda.powi(2) + self.gamma.powi(2)
            )));
        }
        Ok(())
    }

    /// Softmax temperature of the attention layers.
    pub fn temperature(&self) -> f64 {
        match self.variant {
            Variant::VanillaSoftmax | Variant::PreLn => (self.nk as f64).sqrt(),
            _ if self.ablation.use_wide_temperature => self.tau0 * ((self.n * self.nk) as f64).sqrt(),
            _ => (self.nk as f64).sqrt(),
        }
    }
}

/// Matrix products a layer needs from its weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    Value,
    Pre,
    Post,
}

/// Source of the random products `X W` used by one layer.
pub trait WeightSource {
    /// `X Wᵠ Wᴷᵀ Xᵀ / n`.
    fn logits(&mut self, x: &DMatrix<f64>) -> DMatrix<f64>;
    /// `X W` for an `n x n` weight matrix.
    fn project(&mut self, which: Projection, x: &DMatrix<f64>) -> DMatrix<f64>;
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Dense standard-normal weights of one layer, drawn in the order
/// `Wᵠ, Wᴷ, Wᵛ, Wᵖʳᵉ, Wᵖᵒˢᵗ`, each column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
    pub wpre: DMatrix<f64>,
    pub wpost: DMatrix<f64>,
}

impl LayerWeights {
    pub fn sample<R: Rng + ?Sized>(n: usize, nk: usize, rng: &mut R) -> Self {
        Self {
            wq: gaussian_matrix(n, nk, rng),
            wk: gaussian_matrix(n, nk, rng),
            wv: gaussian_matrix(n, n, rng),
            wpre: gaussian_matrix(n, n, rng),
            wpost: gaussian_matrix(n, n, rng),
        }
    }
}

impl WeightSource for LayerWeights {
    fn logits(&mut self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let q = x * &self.wq;
        let k = x * &self.wk;
        q * k.transpose() / x.ncols() as f64
    }

    fn project(&mut self, which: Projection, x: &DMatrix<f64>) -> DMatrix<f64> {
        match which {
            Projection::Value => x * &self.wv,
            Projection::Pre => x * &self.wpre,
            Projection::Post => x * &self.wpost,
        }
    }
}

/// Samples `X W` through the Gram factor of `X`, drawing fresh weights on
/// every call.
pub struct GaussianSketch<'a, R: Rng + ?Sized> {
    rng: &'a mut R,
    nk: usize,
}

impl<'a, R: Rng + ?Sized> GaussianSketch<'a, R> {
    pub fn new(rng: &'a mut R, nk: usize) -> Self {
        Self { rng, nk }
    }

    /// A matrix distributed as `Gᵠ Gᴷᵀ` for independent `m x n_k` standard
    /// normal `Gᵠ, Gᴷ`. Given `Gᵠ`, the columns of the product are iid
    /// `N(0, Gᵠ Gᵠᵀ)`; the Wishart factor is drawn by Bartlett decomposition.
    fn query_key_product(&mut self, m: usize) -> DMatrix<f64> {
        if self.nk < m {
            let gq = gaussian_matrix(m, self.nk, self.rng);
            let gk = gaussian_matrix(m, self.nk, self.rng);
            return gq * gk.transpose();
        }
        let mut b = DMatrix::zeros(m, m);
        for i in 0..m {
            let dof = (self.nk - i) as f64;
            let chi2 = ChiSquared::new(dof).expect("positive degrees of freedom");
            b[(i, i)] = chi2.sample(self.rng).sqrt();
            for j in 0..i {
                b[(i, j)] = self.rng.sample(StandardNormal);
            }
        }
        b * gaussian_matrix(m, m, self.rng)
    }
}

impl<R: Rng + ?Sized> WeightSource for GaussianSketch<'_, R> {
    fn logits(&mut self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let l = gram_factor(&(x * x.transpose()));
        let p = self.query_key_product(x.nrows());
        &l * p * l.transpose() / x.ncols() as f64
    }

    fn project(&mut self, _which: Projection, x: &DMatrix<f64>) -> DMatrix<f64> {
        let l = gram_factor(&(x * x.transpose()));
        l * gaussian_matrix(x.nrows(), x.ncols(), self.rng)
    }
}

/// `s₊ max(x, 0) + s₋ min(x, 0)` with `s± = 1 + c±/√n`.
pub fn shaped_relu(x: f64, c_plus: f64, c_minus: f64, n: usize) -> f64 {
    let root = (n as f64).sqrt();
    if x >= 0.0 {
        (1.0 + c_plus / root) * x
    } else {
        (1.0 + c_minus / root) * x
    }
}

/// The normalizing constant `c` with `c⁻¹ = E σ_s(g)² = (s₊² + s₋²)/2`.
pub fn he_constant(c_plus: f64, c_minus: f64, n: usize) -> f64 {
    let root = (n as f64).sqrt();
    let sp = 1.0 + c_plus / root;
    let sm = 1.0 + c_minus / root;
    2.0 / (sp * sp + sm * sm)
}

/// `Y = X Wᵠ Wᴷᵀ Xᵀ / n` for dense weights.
pub fn attention_logits(x: &DMatrix<f64>, wq: &DMatrix<f64>, wk: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if wq.nrows() != x.ncols() || wk.nrows() != x.ncols() || wq.ncols() != wk.ncols() {
        return Err(Error::Shape(format!(
            "X is {}x{}, Wq {}x{}, Wk {}x{}",
            x.nrows(),
            x.ncols(),
            wq.nrows(),
            wq.ncols(),
            wk.nrows(),
            wk.ncols()
        )));
    }
    Ok((x * wq) * (x * wk).transpose() / x.ncols() as f64)
}

/// Row-wise softmax of `y / tau`, shifted by the row maximum.
pub fn softmax_rows(y: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let mut out = y / tau;
    for mut row in out.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// `γ₁ I + Softmax(Y/τ) - γ₂ (1/m) 1 1ᵀ`, with each modification switched
/// by the ablation flags and `τ` from [`NetConfig::temperature`].
///
/// The centering is applied before the identity so that zero logits give
/// exactly `γ₁ I` when `γ₂ = 1`.
pub fn shaped_attention_matrix(y: &DMatrix<f64>, config: &NetConfig) -> DMatrix<f64> {
    let m = y.nrows();
    let mut a = softmax_rows(y, config.temperature());
    if config.ablation.use_centering {
        let shift = config.gamma2 * (1.0 / m as f64);
        a.apply(|v| *v -= shift);
    }
    if config.ablation.use_identity {
        for i in 0..m {
            a[(i, i)] += config.gamma1;
        }
    }
    a
}

/// Per-token LayerNorm over the feature axis, without affine parameters.
pub fn layer_norm(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.ncols() as f64;
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        let mean = row.sum() / n;
        row.apply(|v| *v -= mean);
        let var = row.norm_squared() / n;
        row /= (var + LAYER_NORM_EPS).sqrt();
    }
    out
}

/// `X' = λX + γ A X Wᵛ / √n`. Pre-LN applies [`layer_norm`] to the branch
/// input first.
pub fn attention_layer<W: WeightSource + ?Sized>(
    x: &DMatrix<f64>,
    weights: &mut W,
    config: &NetConfig,
) -> Result<DMatrix<f64>> {
    check_tokens(x, config)?;
    let normed;
    let branch = if config.variant == Variant::PreLn {
        normed = layer_norm(x);
        &normed
    } else {
        x
    };
    let y = weights.logits(branch);
    let a = match config.variant {
        Variant::VanillaSoftmax | Variant::PreLn => softmax_rows(&y, config.temperature()),
        _ => shaped_attention_matrix(&y, config),
    };
    let mixed = weights.project(Projection::Value, &(a * branch));
    Ok(x * config.lambda + mixed * (config.gamma / (config.n as f64).sqrt()))
}

/// `X' = λX + γ σ_s(X Wᵖʳᵉ/√n) √(c/n) Wᵖᵒˢᵗ`.
pub fn resnet_layer<W: WeightSource + ?Sized>(
    x: &DMatrix<f64>,
    weights: &mut W,
    config: &NetConfig,
) -> Result<DMatrix<f64>> {
    check_tokens(x, config)?;
    let n = config.n;
    let root = (n as f64).sqrt();
    let mut h = weights.project(Projection::Pre, x) / root;
    h.apply(|v| *v = shaped_relu(*v, config.c_plus, config.c_minus, n));
    let c = he_constant(config.c_plus, config.c_minus, n);
    let out = weights.project(Projection::Post, &h);
    Ok(x * config.lambda + out * (config.gamma * (c / n as f64).sqrt()))
}

/// Attention layer followed by a shaped-ReLU layer with the same `λ, γ`.
pub fn transformer_block<W: WeightSource + ?Sized>(
    x: &DMatrix<f64>,
    weights: &mut W,
    config: &NetConfig,
) -> Result<DMatrix<f64>> {
    let z = attention_layer(x, weights, config)?;
    resnet_layer(&z, weights, config)
}

fn check_tokens(x: &DMatrix<f64>, config: &NetConfig) -> Result<()> {
    if x.nrows() != config.m || x.ncols() != config.n {
        return Err(Error::Shape(format!(
            "expected {}x{} tokens, got {}x{}",
            config.m,
            config.n,
            x.nrows(),
            x.ncols()
        )));
    }
    Ok(())
}

/// One block of the configured variant.
pub fn apply_block<W: WeightSource + ?Sized>(
    x: &DMatrix<f64>,
    weights: &mut W,
    config: &NetConfig,
) -> Result<DMatrix<f64>> {
    match config.variant {
        Variant::ShapedAttention | Variant::VanillaSoftmax | Variant::PreLn => {
            attention_layer(x, weights, config)
        }
        Variant::ResnetRelu => resnet_layer(x, weights, config),
        Variant::ShapedTransformer => transformer_block(x, weights, config),
    }
}

/// One block with weights drawn according to `config.weight_mode`.
pub fn sample_block<R: Rng + ?Sized>(x: &DMatrix<f64>, config: &NetConfig, rng: &mut R) -> Result<DMatrix<f64>> {
    match config.weight_mode {
        WeightMode::Sketch => apply_block(x, &mut GaussianSketch::new(rng, config.nk), config),
        WeightMode::Dense => apply_block(x, &mut LayerWeights::sample(config.n, config.nk, rng), config),
    }
}

/// `X₀ = √n L Qᵀ` with `L Lᵀ = V₀` and `Q` a random `n x m` orthonormal
/// frame, so that `X₀ X₀ᵀ / n = V₀` up to round-off.
pub fn build_inputs<R: Rng + ?Sized>(v0: &TokenCovariance, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    let m = v0.dim();
    if m > n {
        return Err(Error::InvalidParameter(format!("m = {m} tokens exceeds width n = {n}")));
    }
    let eig = v0.eigen()?;
    let scale = eig.max().max(1.0);
    if eig.min() < -DEFAULT_PSD_TOL * scale {
        return Err(Error::Indefinite {
            min: eig.min(),
            tol: DEFAULT_PSD_TOL,
            scale,
        });
    }
    let l = gram_factor(v0.matrix());
    let q = gaussian_matrix(n, m, rng).qr().q();
    Ok(l * q.transpose() * (n as f64).sqrt())
}

/// Covariances `V_0, …, V_d` of one forward pass, flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct NetTrajectory {
    pub covariances: Vec<Vec<f64>>,
    /// Layer whose output first contained a non-finite value; the trajectory
    /// stops before it.
    pub diverged_at: Option<usize>,
}

impl NetTrajectory {
    pub fn terminal(&self) -> &[f64] {
        self.covariances.last().expect("trajectory holds V_0")
    }
}

/// Runs `config.d` blocks from inputs with covariance `V₀`, with fresh
/// weights for every block.
pub fn forward_network<R: Rng + ?Sized>(
    config: &NetConfig,
    v0: &TokenCovariance,
    rng: &mut R,
) -> Result<NetTrajectory> {
    config.validate()?;
    if v0.dim() != config.m {
        return Err(Error::Shape(format!("V0 is {0}x{0} but m = {1}", v0.dim(), config.m)));
    }
    let mut x = build_inputs(v0, config.n, rng)?;
    let mut covariances = Vec::with_capacity(config.d + 1);
    covariances.push(flatten(&covariance_of(&x)));
    for layer in 1..=config.d {
        x = sample_block(&x, config, rng)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Ok(NetTrajectory {
                covariances,
                diverged_at: Some(layer),
            });
        }
        covariances.push(flatten(&covariance_of(&x)));
    }
    Ok(NetTrajectory {
        covariances,
        diverged_at: None,
    })
}

/// `samples` independent forward passes; trajectory `i` uses stream `i` of
/// `seeds` under `label`.
pub fn net_ensemble(
    config: &NetConfig,
    v0: &TokenCovariance,
    seeds: &SeedTree,
    label: &str,
    samples: usize,
    threads: Option<usize>,
) -> Result<Vec<NetTrajectory>> {
    run_indexed(samples, threads, |i| {
        forward_network(config, v0, &mut seeds.rng(label, i as u64))
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rho02() -> TokenCovariance {
        TokenCovariance::from_row_slice(2, &[1.0, 0.2, 0.2, 1.0]).unwrap()
    }

    #[test]
    fn shaped_relu_examples() {
        for x in [-2.0, -0.1, 0.0, 3.0] {
            assert_eq!(shaped_relu(x, 0.0, 0.0, 7), x);
        }
        assert_abs_diff_eq!(shaped_relu(-1.0, 0.0, -1.0, 100), -0.9, epsilon = 1e-15);
        for n in [1, 10, 1000] {
            assert_eq!(shaped_relu(2.0, 0.0, -1.0, n), 2.0);
        }
    }

    #[test]
    fn he_constant_examples() {
        assert_eq!(he_constant(0.0, 0.0, 50), 1.0);
        assert_abs_diff_eq!(he_constant(0.0, -1.0, 100), 1.0 / 0.905, epsilon = 1e-12);
        assert_abs_diff_eq!(he_constant(0.0, -1.0, 100), 1.104972, epsilon = 1e-6);
    }

    #[test]
    fn zero_logits_give_identity() {
        for m in 1..=8 {
            for tau0 in [0.1, 1.0, 7.0] {
                let mut cfg = NetConfig::new(Variant::ShapedAttention, 16, 1, m, 0.5);
                cfg.tau0 = tau0;
                let a = shaped_attention_matrix(&DMatrix::zeros(m, m), &cfg);
                assert_eq!(a, DMatrix::identity(m, m));
            }
        }
    }

    #[test]
    fn attention_row_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = gaussian_matrix(5, 5, &mut rng) * 10.0;
        let mut cfg = NetConfig::new(Variant::ShapedAttention, 4, 1, 5, 0.5);
        cfg.gamma1 = 0.7;
        cfg.gamma2 = 0.4;
        let a = shaped_attention_matrix(&y, &cfg);
        for row in a.row_iter() {
            assert_abs_diff_eq!(row.sum(), 0.7 + 1.0 - 0.4, epsilon = 1e-12);
        }
        for row in softmax_rows(&y, 0.3).row_iter() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn ablation_reduces_to_vanilla() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = gaussian_matrix(3, 3, &mut rng);
        let mut cfg = NetConfig::new(Variant::ShapedAttention, 64, 1, 3, 0.5);
        cfg.nk = 16;
        cfg.gamma1 = 0.0;
        cfg.gamma2 = 0.0;
        cfg.ablation.use_wide_temperature = false;
        let a = shaped_attention_matrix(&y, &cfg);
        assert!((a - softmax_rows(&y, 4.0)).amax() <= 1e-15);
    }

    #[test]
    fn saturated_attention() {
        let m = 4;
        let mut y = DMatrix::zeros(m, m);
        for i in 0..m {
            y[(i, (i + 1) % m)] = 1.0;
        }
        let mut cfg = NetConfig::new(Variant::ShapedAttention, 1, 1, m, 0.5);
        cfg.nk = 1;
        cfg.tau0 = 1e-3;
        assert_eq!(cfg.temperature(), 1e-3);
        let a = shaped_attention_matrix(&y, &cfg);
        for i in 0..m {
            for j in 0..m {
                let one_hot = if j == (i + 1) % m { 1.0 } else { 0.0 };
                let id = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(a[(i, j)], id + one_hot - 0.25, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn temperatures() {
        let mut cfg = NetConfig::new(Variant::ShapedAttention, 100, 1, 2, 0.5);
        cfg.nk = 4;
        cfg.tau0 = 2.0;
        assert_abs_diff_eq!(cfg.temperature(), 40.0, epsilon = 1e-12);
        cfg.ablation.use_wide_temperature = false;
        assert_eq!(cfg.temperature(), 2.0);
        cfg.variant = Variant::VanillaSoftmax;
        cfg.ablation.use_wide_temperature = true;
        assert_eq!(cfg.temperature(), 2.0);
    }

    #[test]
    fn logits_of_zero_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = LayerWeights::sample(8, 3, &mut rng);
        let y = attention_logits(&DMatrix::zeros(2, 8), &w.wq, &w.wk).unwrap();
        assert_eq!(y, DMatrix::zeros(2, 2));
        assert!(attention_logits(&DMatrix::zeros(2, 7), &w.wq, &w.wk).is_err());
    }

    #[test]
    fn zero_gamma_layers_scale_by_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = build_inputs(&rho02(), 32, &mut rng).unwrap();
        for variant in Variant::ALL {
            for mode in [WeightMode::Sketch, WeightMode::Dense] {
                let mut cfg = NetConfig::new(variant, 32, 1, 2, 0.0);
                cfg.nk = 8;
                cfg.weight_mode = mode;
                cfg.enforce_branch_norm = false;
                cfg.lambda = 0.6;
                let out = sample_block(&x, &cfg, &mut rng).unwrap();
                let expect = if variant == Variant::ShapedTransformer { &x * 0.6 * 0.6 } else { &x * 0.6 };
                assert_eq!(out, expect);
                cfg.lambda = 1.0;
                assert_eq!(sample_block(&x, &cfg, &mut rng).unwrap(), x);
            }
        }
    }

    #[test]
    fn build_inputs_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = build_inputs(&TokenCovariance::identity(2), 4, &mut rng).unwrap();
        let g = &x * x.transpose();
        assert_abs_diff_eq!(g[(0, 0)], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g[(1, 1)], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g[(0, 1)], 0.0, epsilon = 1e-12);

        let x = build_inputs(&rho02(), 200, &mut rng).unwrap();
        assert!((covariance_of(&x).into_inner() - rho02().into_inner()).amax() <= 1e-10);

        let big = TokenCovariance::equicorrelated(2, 0.2, 100.0).unwrap();
        let x = build_inputs(&big, 200, &mut rng).unwrap();
        for row in x.row_iter() {
            assert_abs_diff_eq!(row.norm(), 10.0 * 200f64.sqrt(), epsilon = 1e-9);
        }
        assert!(build_inputs(&TokenCovariance::identity(3), 2, &mut rng).is_err());
        let indefinite = TokenCovariance::from_row_slice(2, &[1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(build_inputs(&indefinite, 10, &mut rng).is_err());
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = gaussian_matrix(3, 50, &mut rng) * 5.0;
        let y = layer_norm(&x);
        for row in y.row_iter() {
            assert_abs_diff_eq!(row.sum(), 0.0, epsilon = 1e-10);
            assert_abs_diff_eq!(row.norm_squared() / 50.0, 1.0, epsilon = 1e-5);
        }
    }

    #[test]
    fn trajectory_basics() {
        let cfg = NetConfig::new(Variant::ShapedAttention, 16, 0, 2, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = forward_network(&cfg, &rho02(), &mut rng).unwrap();
        assert_eq!(t.covariances.len(), 1);
        for (a, b) in t.terminal().iter().zip(flatten(&rho02())) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }

        let cfg = NetConfig::new(Variant::ShapedTransformer, 16, 5, 2, 0.5);
        let seeds = SeedTree::new(1);
        let a = net_ensemble(&cfg, &rho02(), &seeds, "t", 3, Some(1)).unwrap();
        let b = net_ensemble(&cfg, &rho02(), &seeds, "t", 3, Some(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].covariances.len(), 6);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn transformer_stays_finite() {
        let cfg = NetConfig::new(Variant::ShapedTransformer, 64, 150, 3, 1.0 / 2f64.sqrt());
        let v0 = TokenCovariance::equicorrelated(3, 0.2, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = forward_network(&cfg, &v0, &mut rng).unwrap();
        assert_eq!(t.diverged_at, None);
        assert!(t.terminal().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn config_validation() {
        let mut cfg = NetConfig::new(Variant::ShapedAttention, 16, 1, 2, 0.5);
        assert!(cfg.validate().is_ok());
        cfg.lambda = 1.0;
        assert!(cfg.validate().is_err());
        cfg.enforce_branch_norm = false;
        assert!(cfg.validate().is_ok());
        cfg.tau0 = 0.0;
        assert!(cfg.validate().is_err());
        assert_eq!("pre_ln".parse::<Variant>().unwrap(), Variant::PreLn);
        assert!("post_ln".parse::<Variant>().is_err());
    }
}
