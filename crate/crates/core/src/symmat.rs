//! Dense symmetric-matrix kernel: upper-triangle flattening, cyclic Jacobi
//! eigendecomposition, PSD square roots and covariance/correlation helpers.
//!
//! All dimensions handled here are small (token counts `m <= 8`, flattened
//! dimensions `M = m(m+1)/2 <= 36`), so every routine is a plain dense loop.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative asymmetry accepted by [`TokenCovariance::new`].
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Default relative tolerance for clipping slightly negative eigenvalues.
pub const DEFAULT_PSD_TOL: f64 = 1e-8;

const JACOBI_MAX_SWEEPS: usize = 100;

/// Bijection between upper-triangular pairs `(a, b)`, `a <= b`, and flat
/// indices `0..m(m+1)/2`, ordered row-major over the upper triangle.
///
/// For `m = 3` the order is `(0,0) (0,1) (0,2) (1,1) (1,2) (2,2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlatIndexMap {
    dim: usize,
}

impl FlatIndexMap {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Flattened length `m(m+1)/2`.
    pub fn len(&self) -> usize {
        self.dim * (self.dim + 1) / 2
    }

    pub fn is_empty(&self) -> bool {
        self.dim == 0
    }

    /// Flat index of the pair; the arguments may be given in either order.
    pub fn index(&self, a: usize, b: usize) -> usize {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        debug_assert!(b < self.dim);
        a * (2 * self.dim - a + 1) / 2 + (b - a)
    }

    /// Pair `(a, b)` with `a <= b` stored at flat index `k`.
    pub fn pair(&self, k: usize) -> (usize, usize) {
        debug_assert!(k < self.len());
        let mut start = 0;
        for a in 0..self.dim {
            let row_len = self.dim - a;
            if k < start + row_len {
                return (a, a + (k - start));
            }
            start += row_len;
        }
        unreachable!("flat index {k} out of range for m = {}", self.dim)
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.len()).map(move |k| self.pair(k))
    }
}

/// Symmetric `m x m` matrix of token inner products `V^{ab} = <x^a, x^b>/n`.
///
/// Construction checks squareness, finiteness and symmetry (to
/// [`SYMMETRY_TOL`] relative) and stores the exactly symmetrized matrix.
/// Positive semi-definiteness is not enforced here: SDE states are allowed to
/// drift out of the cone, and [`TokenCovariance::is_psd`] reports it.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenCovariance(DMatrix<f64>);

impl TokenCovariance {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::Shape(format!(
                "covariance must be square, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("token covariance"));
        }
        let scale = matrix.amax().max(f64::MIN_POSITIVE);
        let asym = (&matrix - matrix.transpose()).amax();
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::NotSymmetric(asym));
        }
        Ok(Self(symmetrize(&matrix)))
    }

    /// Builds an `m x m` covariance from row-major entries.
    pub fn from_row_slice(dim: usize, entries: &[f64]) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(Error::Shape(format!(
                "expected {} entries for a {dim}x{dim} matrix, got {}",
                dim * dim,
                entries.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(dim, dim, entries))
    }

    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    /// Unit-variance two-or-more token covariance with a common off-diagonal
    /// correlation `rho`, scaled by `scale`.
    pub fn equicorrelated(dim: usize, rho: f64, scale: f64) -> Result<Self> {
        let m = DMatrix::from_fn(dim, dim, |a, b| if a == b { scale } else { scale * rho });
        Self::new(m)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.0[(a, b)]
    }

    pub fn eigen(&self) -> Result<SymEigen> {
        sym_eigen(&self.0)
    }

    /// True when the smallest eigenvalue is at least `-tol * max(1, largest)`.
    pub fn is_psd(&self, tol: f64) -> Result<bool> {
        let eig = self.eigen()?;
        Ok(eig.min() >= -tol * eig.max().max(1.0))
    }

    pub fn correlation(&self) -> Result<DMatrix<f64>> {
        correlation(self)
    }

    /// Correlation of a single pair, `V^{ab} / sqrt(V^{aa} V^{bb})`.
    pub fn rho(&self, a: usize, b: usize) -> f64 {
        self.0[(a, b)] / (self.0[(a, a)] * self.0[(b, b)]).sqrt()
    }
}

/// Upper-triangle entries of `v`, ordered by [`FlatIndexMap`].
pub fn flatten(v: &TokenCovariance) -> Vec<f64> {
    let map = FlatIndexMap::new(v.dim());
    map.pairs().map(|(a, b)| v.get(a, b)).collect()
}

/// Inverse of [`flatten`].
pub fn unflatten(flat: &[f64], dim: usize) -> Result<TokenCovariance> {
    let map = FlatIndexMap::new(dim);
    if flat.len() != map.len() {
        return Err(Error::LengthMismatch {
            dim,
            expected: map.len(),
            got: flat.len(),
        });
    }
    if flat.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("flattened covariance"));
    }
    let mut m = DMatrix::zeros(dim, dim);
    for (k, &x) in flat.iter().enumerate() {
        let (a, b) = map.pair(k);
        m[(a, b)] = x;
        m[(b, a)] = x;
    }
    Ok(TokenCovariance(m))
}

/// Recovers the token count from a flattened length, if it is triangular.
pub fn dim_from_flat_len(len: usize) -> Option<usize> {
    (0..=len).find(|m| m * (m + 1) / 2 == len)
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Eigendecomposition of a symmetric matrix; eigenvalues in descending order,
/// eigenvectors in the matching columns.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl SymEigen {
    pub fn max(&self) -> f64 {
        self.values[0]
    }

    pub fn min(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    /// `Q diag(f(λ)) Qᵀ`, symmetrized.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let mut scaled = self.vectors.clone();
        for (j, &lam) in self.values.iter().enumerate() {
            let s = f(lam);
            scaled.column_mut(j).scale_mut(s);
        }
        symmetrize(&(scaled * self.vectors.transpose()))
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Only the upper triangle is trusted for the rotation angles, but the input
/// is symmetrized first so both triangles contribute equally.
pub fn sym_eigen(a: &DMatrix<f64>) -> Result<SymEigen> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::Shape(format!("eigen input {}x{} not square", n, a.ncols())));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("eigendecomposition input"));
    }
    let mut w = symmetrize(a);
    let mut q = DMatrix::<f64>::identity(n, n);
    let norm = w.norm();

    let mut converged = n <= 1 || norm == 0.0;
    let mut sweep = 0;
    while !converged && sweep < JACOBI_MAX_SWEEPS {
        sweep += 1;
        for p in 0..n {
            for r in (p + 1)..n {
                let apr = w[(p, r)];
                if apr == 0.0 {
                    continue;
                }
                let app = w[(p, p)];
                let arr = w[(r, r)];
                // Skip rotations that cannot change the diagonal in floating point.
                if apr.abs() < f64::EPSILON * 1e-3 * (app.abs() + arr.abs()) {
                    w[(p, r)] = 0.0;
                    w[(r, p)] = 0.0;
                    continue;
                }
                let theta = (arr - app) / (2.0 * apr);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let wkp = w[(k, p)];
                    let wkr = w[(k, r)];
                    w[(k, p)] = c * wkp - s * wkr;
                    w[(k, r)] = s * wkp + c * wkr;
                }
                for k in 0..n {
                    let wpk = w[(p, k)];
                    let wrk = w[(r, k)];
                    w[(p, k)] = c * wpk - s * wrk;
                    w[(r, k)] = s * wpk + c * wrk;
                }
                w[(p, r)] = 0.0;
                w[(r, p)] = 0.0;
                for k in 0..n {
                    let qkp = q[(k, p)];
                    let qkr = q[(k, r)];
                    q[(k, p)] = c * qkp - s * qkr;
                    q[(k, r)] = s * qkp + c * qkr;
                }
            }
        }
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| w[(i, j)] * w[(i, j)])
            .sum();
        converged = off.sqrt() <= 1e-15 * norm;
    }
    if !converged {
        return Err(Error::NoConvergence(JACOBI_MAX_SWEEPS));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| w[(j, j)].total_cmp(&w[(i, i)]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| w[(i, i)]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &q.column(src));
    }
    Ok(SymEigen { values, vectors })
}

/// Symmetric PSD square root `S` with `S S = A⁺`, where `A⁺` has the negative
/// eigenvalues of `A` clipped to zero.
///
/// Eigenvalues below `-tol * max(1, λ_max)` mean the matrix is genuinely
/// indefinite and are reported as [`Error::Indefinite`] instead of clipped.
pub fn psd_sqrt(a: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let eig = sym_eigen(a)?;
    let scale = eig.max().max(1.0);
    if eig.min() < -tol * scale {
        return Err(Error::Indefinite {
            min: eig.min(),
            tol,
            scale,
        });
    }
    Ok(eig.map_values(|lam| lam.max(0.0).sqrt()))
}

/// `A` with negative eigenvalues set to zero.
pub fn psd_clip(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(sym_eigen(a)?.map_values(|lam| lam.max(0.0)))
}

/// `ρ^{ab} = V^{ab} / sqrt(V^{aa} V^{bb})`, unit diagonal.
pub fn correlation(v: &TokenCovariance) -> Result<DMatrix<f64>> {
    let m = v.matrix();
    let dim = v.dim();
    for i in 0..dim {
        if m[(i, i)] <= 0.0 {
            return Err(Error::NonPositiveDiagonal {
                index: i,
                value: m[(i, i)],
            });
        }
    }
    let inv_sd: Vec<f64> = (0..dim).map(|i| 1.0 / m[(i, i)].sqrt()).collect();
    Ok(DMatrix::from_fn(dim, dim, |a, b| {
        if a == b {
            1.0
        } else {
            m[(a, b)] * inv_sd[a] * inv_sd[b]
        }
    }))
}

/// Feature covariance `X Xᵀ / n` of an `m x n` token matrix.
pub fn covariance_of(x: &DMatrix<f64>) -> TokenCovariance {
    let n = x.ncols() as f64;
    let gram = x * x.transpose() / n;
    TokenCovariance(symmetrize(&gram))
}

/// Lower-triangular `L` with `L Lᵀ = G` for a PSD Gram matrix `G`.
///
/// Pivots at or below `1e-13 * max diag(G)` are treated as exact zeros, so
/// rank-deficient (collapsed) Gram matrices still factor. Used to sample
/// `X W` for Gaussian `W` as `L Z` with `Z` standard normal.
pub fn gram_factor(g: &DMatrix<f64>) -> DMatrix<f64> {
    let n = g.nrows();
    let max_diag = (0..n).map(|i| g[(i, i)]).fold(0.0_f64, f64::max);
    let floor = 1e-13 * max_diag;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = g[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= floor || !d.is_finite() {
            continue;
        }
        let pivot = d.sqrt();
        l[(j, j)] = pivot;
        for i in (j + 1)..n {
            let mut s = g[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / pivot;
        }
    }
    l
}
