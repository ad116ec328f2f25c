//! Ensemble summaries: correlation and covariance paths, kernel density
//! estimates, percentiles, histograms and Kolmogorov–Smirnov distances.

use std::f64::consts::PI;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::symmat::{dim_from_flat_len, FlatIndexMap};

/// Flattened covariance paths (or single terminal states) from one
/// configuration and master seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub config_hash: String,
    pub master_seed: u64,
    pub m: usize,
    /// One path per sample; paths may be shorter than the longest one when a
    /// sample stopped or diverged.
    pub paths: Vec<Vec<Vec<f64>>>,
}

impl Ensemble {
    /// `config` is any canonical description of the configuration; only its
    /// hash is kept.
    pub fn new(config: &str, master_seed: u64, paths: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let first = paths
            .iter()
            .find_map(|p| p.first())
            .ok_or(Error::EmptySample)?;
        let m = dim_from_flat_len(first.len())
            .ok_or_else(|| Error::Shape(format!("{} is not a triangular number", first.len())))?;
        if paths.iter().flatten().any(|s| s.len() != first.len()) {
            return Err(Error::Shape("ensemble states differ in length".into()));
        }
        Ok(Self {
            config_hash: config_hash(config),
            master_seed,
            m,
            paths,
        })
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// Last recorded state of every sample.
    pub fn terminal(&self) -> Vec<&[f64]> {
        self.paths.iter().filter_map(|p| p.last().map(Vec::as_slice)).collect()
    }

    /// Samples that reached step `step`.
    pub fn count_at(&self, step: usize) -> usize {
        self.paths.iter().filter(|p| p.len() > step).count()
    }

    fn max_len(&self) -> usize {
        self.paths.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// Hex SHA-256 of a configuration description.
pub fn config_hash(config: &str) -> String {
    Sha256::digest(config.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Correlation `ρ^{ab}` of a flattened state, `None` for a non-positive or
/// non-finite diagonal.
pub fn flat_rho(state: &[f64], map: &FlatIndexMap, a: usize, b: usize) -> Option<f64> {
    let (vaa, vbb) = (state[map.index(a, a)], state[map.index(b, b)]);
    if !(vaa > 0.0 && vbb > 0.0) || !vaa.is_finite() || !vbb.is_finite() {
        return None;
    }
    let rho = state[map.index(a, b)] / (vaa * vbb).sqrt();
    rho.is_finite().then_some(rho)
}

/// Mean of `ρ` over off-diagonal pairs of one state.
pub fn mean_offdiag_rho(state: &[f64], m: usize) -> Option<f64> {
    let map = FlatIndexMap::new(m);
    let mut acc = 0.0;
    let mut count = 0;
    for a in 0..m {
        for b in a + 1..m {
            acc += flat_rho(state, &map, a, b)?;
            count += 1;
        }
    }
    (count > 0).then(|| acc / count as f64)
}

/// Per-step ensemble means.
#[derive(Debug, Clone, PartialEq)]
pub struct PathMeans {
    pub signed: Vec<f64>,
    pub absolute: Vec<f64>,
    /// Samples contributing at each step.
    pub counts: Vec<usize>,
}

fn path_means(ensemble: &Ensemble, value: impl Fn(&[f64]) -> Option<f64>) -> Result<PathMeans> {
    if ensemble.m < 2 {
        return Err(Error::InvalidParameter("correlations need at least two tokens".into()));
    }
    let steps = ensemble.max_len();
    if steps == 0 {
        return Err(Error::EmptySample);
    }
    let mut out = PathMeans {
        signed: Vec::with_capacity(steps),
        absolute: Vec::with_capacity(steps),
        counts: Vec::with_capacity(steps),
    };
    for step in 0..steps {
        let values: Vec<f64> = ensemble
            .paths
            .iter()
            .filter_map(|p| p.get(step))
            .filter_map(|s| value(s))
            .collect();
        let count = values.len();
        let mean = |xs: &mut dyn Iterator<Item = f64>| if count == 0 { f64::NAN } else { xs.sum::<f64>() / count as f64 };
        out.signed.push(mean(&mut values.iter().copied()));
        out.absolute.push(mean(&mut values.iter().map(|x| x.abs())));
        out.counts.push(count);
    }
    Ok(out)
}

/// Per-step mean of `ρ^{ab}` averaged over off-diagonal pairs, signed and in
/// absolute value.
pub fn mean_correlation_trajectory(ensemble: &Ensemble) -> Result<PathMeans> {
    let m = ensemble.m;
    let map = FlatIndexMap::new(m);
    path_means(ensemble, |s| {
        let mut signed = 0.0;
        let mut count = 0.0;
        for a in 0..m {
            for b in a + 1..m {
                signed += flat_rho(s, &map, a, b)?;
                count += 1.0;
            }
        }
        Some(signed / count)
    })
}

/// Per-step mean of the off-diagonal covariance `V^{ab}`, signed and in
/// absolute value. Non-finite states are skipped.
pub fn mean_abs_covariance_trajectory(ensemble: &Ensemble) -> Result<PathMeans> {
    let m = ensemble.m;
    let map = FlatIndexMap::new(m);
    path_means(ensemble, |s| {
        let mut acc = 0.0;
        let mut count = 0.0;
        for a in 0..m {
            for b in a + 1..m {
                acc += s[map.index(a, b)];
                count += 1.0;
            }
        }
        let v = acc / count;
        v.is_finite().then_some(v)
    })
}

fn sorted(samples: &[f64]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptySample);
    }
    if samples.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("samples"));
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Linear-interpolation percentile: rank `p/100 · (N-1)` of the sorted sample.
pub fn percentile(samples: &[f64], p: f64) -> Result<f64> {
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::InvalidParameter(format!("percentile {p} not in [0, 100]")));
    }
    Ok(percentile_sorted(&sorted(samples)?, p))
}

/// Several percentiles with a single sort.
pub fn percentiles(samples: &[f64], ps: &[f64]) -> Result<Vec<f64>> {
    if let Some(p) = ps.iter().find(|p| !(0.0..=100.0).contains(*p)) {
        return Err(Error::InvalidParameter(format!("percentile {p} not in [0, 100]")));
    }
    let s = sorted(samples)?;
    Ok(ps.iter().map(|&p| percentile_sorted(&s, p)).collect())
}

/// Two-sample Kolmogorov–Smirnov statistic `sup |F_a - F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    let (a, b) = (sorted(a)?, sorted(b)?);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Counts normalized to integrate to one.
    pub density: Vec<f64>,
}

/// Equal-width histogram over `[lo, hi]`; values outside are ignored and `hi`
/// falls in the last bin.
pub fn histogram(samples: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Histogram> {
    if bins == 0 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidParameter(format!("bad histogram range [{lo}, {hi}] with {bins} bins")));
    }
    if samples.is_empty() {
        return Err(Error::EmptySample);
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &x in samples {
        if x >= lo && x <= hi {
            let k = (((x - lo) / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let density = counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / (total as f64 * width) })
        .collect();
    let edges = (0..=bins).map(|k| lo + k as f64 * width).collect();
    Ok(Histogram { edges, counts, density })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// `0.9 · min(std, IQR/1.34) · N^{-1/5}`.
    Silverman,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum DensityEstimate {
    Kde {
        grid: Vec<f64>,
        density: Vec<f64>,
        bandwidth: f64,
    },
    /// Zero-variance sample: a single unit-width bin around the value.
    Histogram(Histogram),
}

impl DensityEstimate {
    /// `(x, density)` pairs.
    pub fn points(&self) -> Vec<(f64, f64)> {
        match self {
            Self::Kde { grid, density, .. } => grid.iter().copied().zip(density.iter().copied()).collect(),
            Self::Histogram(h) => h
                .edges
                .windows(2)
                .zip(&h.density)
                .map(|(e, &d)| (0.5 * (e[0] + e[1]), d))
                .collect(),
        }
    }
}

pub const KDE_GRID_POINTS: usize = 512;
const KDE_MAX_GRID_POINTS: usize = 1 << 16;
/// Grid padding beyond the sample range, in bandwidths.
pub const KDE_PAD: f64 = 4.0;

fn std_dev(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Gaussian kernel density estimate on a uniform grid over the sample range
/// padded by [`KDE_PAD`] bandwidths. The grid has at least `grid_points`
/// points and is refined until its spacing is at most a quarter bandwidth.
pub fn kde(samples: &[f64], bandwidth: Bandwidth, grid_points: usize) -> Result<DensityEstimate> {
    if samples.len() < 2 {
        return Err(Error::EmptySample);
    }
    let s = sorted(samples)?;
    if s.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("samples"));
    }
    let (lo, hi) = (s[0], s[s.len() - 1]);
    if lo == hi {
        return Ok(DensityEstimate::Histogram(histogram(&s, 1, lo - 0.5, lo + 0.5)?));
    }
    let h = match bandwidth {
        Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => h,
        Bandwidth::Fixed(h) => return Err(Error::InvalidParameter(format!("bandwidth {h} must be positive"))),
        Bandwidth::Silverman => {
            let sd = std_dev(&s);
            let iqr = percentile_sorted(&s, 75.0) - percentile_sorted(&s, 25.0);
            let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
            0.9 * spread * (s.len() as f64).powf(-0.2)
        }
    };
    let (g0, g1) = (lo - KDE_PAD * h, hi + KDE_PAD * h);
    let needed = ((g1 - g0) / (0.25 * h)).ceil() as usize + 1;
    let points = grid_points.max(needed).clamp(2, KDE_MAX_GRID_POINTS);
    let step = (g1 - g0) / (points - 1) as f64;
    let grid: Vec<f64> = (0..points).map(|k| g0 + k as f64 * step).collect();
    let norm = 1.0 / (s.len() as f64 * h * (2.0 * PI).sqrt());
    // Kernels beyond 8 bandwidths contribute below 1e-14 and are skipped.
    let reach = 8.0 * h;
    let density = grid
        .iter()
        .map(|&x| {
            let start = s.partition_point(|&v| v < x - reach);
            let end = s.partition_point(|&v| v <= x + reach);
            s[start..end]
                .iter()
                .map(|&v| (-0.5 * ((x - v) / h).powi(2)).exp())
                .sum::<f64>()
                * norm
        })
        .collect();
    Ok(DensityEstimate::Kde {
        grid,
        density,
        bandwidth: h,
    })
}

/// Trapezoid integral of a density estimate.
pub fn integrate(estimate: &DensityEstimate) -> f64 {
    match estimate {
        DensityEstimate::Kde { grid, density, .. } => grid
            .windows(2)
            .zip(density.windows(2))
            .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
            .sum(),
        DensityEstimate::Histogram(h) => h
            .edges
            .windows(2)
            .zip(&h.density)
            .map(|(e, d)| (e[1] - e[0]) * d)
            .sum(),
    }
}
