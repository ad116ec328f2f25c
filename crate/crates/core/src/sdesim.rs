//! Euler–Maruyama integration of `dV = b(V) dt + Σ(V)^{1/2} dB` on the
//! flattened covariance, with eigenvalue stopping times.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::coeffs::{coefficients, CoeffKind, CoeffParams, DriftDiffusion};
use crate::ensemble::{run_indexed, SeedTree};
use crate::error::{Error, Result};
use crate::symmat::{flatten, psd_clip, psd_sqrt, sym_eigen, unflatten, TokenCovariance, DEFAULT_PSD_TOL};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdeConfig {
    pub step: f64,
    pub horizon: f64,
    /// Relative tolerance for the square root of the diffusion.
    pub psd_tol: f64,
    pub eig_upper: f64,
    pub eig_lower: f64,
    pub kind: CoeffKind,
    /// Project the state onto the PSD cone after every step. Off by default:
    /// clipping would hide the instabilities the stopping time detects.
    pub clip_psd: bool,
}

impl SdeConfig {
    /// Step 0.01, thresholds `[1e-4, 1e4]`, no clipping.
    pub fn new(kind: CoeffKind, horizon: f64) -> Self {
        Self {
            step: 0.01,
            horizon,
            psd_tol: DEFAULT_PSD_TOL,
            eig_upper: 1e4,
            eig_lower: 1e-4,
            kind,
            clip_psd: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !(self.step <= self.horizon) || !self.horizon.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "need 0 < step <= horizon, got step {} and horizon {}",
                self.step, self.horizon
            )));
        }
        if !(self.eig_lower > 0.0) || !(self.eig_lower < self.eig_upper) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < eig_lower < eig_upper, got {} and {}",
                self.eig_lower, self.eig_upper
            )));
        }
        Ok(())
    }

    /// Number of steps; the last one is shortened to land on the horizon.
    pub fn num_steps(&self) -> usize {
        ((self.horizon / self.step) - 1e-9).ceil().max(1.0) as usize
    }

    /// Grid times `t_0 = 0, …, t_N = T`.
    pub fn grid(&self) -> Vec<f64> {
        let n = self.num_steps();
        (0..=n)
            .map(|k| if k == n { self.horizon } else { k as f64 * self.step })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    EigenvalueAbove,
    EigenvalueBelow,
    NonFinite,
    /// Coefficients could not be evaluated (non-positive diagonal or an
    /// indefinite diffusion).
    InvalidState,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stop {
    pub time: f64,
    pub reason: StopReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdeTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub max_eig: Vec<f64>,
    pub min_eig: Vec<f64>,
    pub stop: Option<Stop>,
    pub horizon: f64,
}

impl SdeTrajectory {
    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("trajectory holds V_0")
    }
}

/// `t*` of the trajectory, or the horizon when it never stopped.
pub fn stopping_time(trajectory: &SdeTrajectory) -> f64 {
    trajectory.stop.map_or(trajectory.horizon, |s| s.time)
}

/// `V + b h + root √h ξ` on flattened states, where `root` is a square root
/// of the diffusion.
pub fn em_step_with_root(v: &[f64], drift: &[f64], root: &DMatrix<f64>, h: f64, noise: &[f64]) -> Result<Vec<f64>> {
    let len = v.len();
    if drift.len() != len || noise.len() != len || root.nrows() != len || root.ncols() != len {
        return Err(Error::Shape(format!(
            "state {len}, drift {}, noise {}, root {}x{}",
            drift.len(),
            noise.len(),
            root.nrows(),
            root.ncols()
        )));
    }
    let kick = root * DVector::from_column_slice(noise) * h.sqrt();
    Ok((0..len).map(|k| v[k] + drift[k] * h + kick[k]).collect())
}

/// One Euler–Maruyama step with the square root taken from `coeffs`.
pub fn em_step(v: &[f64], coeffs: &DriftDiffusion, h: f64, noise: &[f64], psd_tol: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!("step {h} must be positive")));
    }
    if coeffs.drift.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("drift"));
    }
    let root = psd_sqrt(&coeffs.diffusion, psd_tol)?;
    em_step_with_root(v, &coeffs.drift, &root, h, noise)
}

fn extreme_eigenvalues(flat: &[f64], m: usize) -> Option<(f64, f64)> {
    if flat.iter().any(|x| !x.is_finite()) {
        return None;
    }
    let v = unflatten(flat, m).ok()?;
    let eig = sym_eigen(v.matrix()).ok()?;
    Some((eig.max(), eig.min()))
}

pub fn simulate_sde<R: Rng + ?Sized>(
    config: &SdeConfig,
    params: &CoeffParams,
    v0: &TokenCovariance,
    rng: &mut R,
) -> Result<SdeTrajectory> {
    config.validate()?;
    params.validate()?;
    let m = v0.dim();
    let grid = config.grid();
    let eig0 = v0.eigen()?;
    let mut traj = SdeTrajectory {
        times: vec![0.0],
        states: vec![flatten(v0)],
        max_eig: vec![eig0.max()],
        min_eig: vec![eig0.min()],
        stop: None,
        horizon: config.horizon,
    };
    let mut noise = vec![0.0; traj.states[0].len()];
    for k in 0..grid.len() - 1 {
        let (t, t_next) = (grid[k], grid[k + 1]);
        let current = traj.states.last().expect("nonempty");
        let step = unflatten(current, m)
            .and_then(|v| coefficients(config.kind, &v, params))
            .and_then(|c| {
                let root = psd_sqrt(&c.diffusion, config.psd_tol)?;
                Ok((c.drift, root))
            });
        let (drift, root) = match step {
            Ok(pair) => pair,
            Err(e) if k == 0 => return Err(e),
            Err(_) => {
                traj.stop = Some(Stop {
                    time: t,
                    reason: StopReason::InvalidState,
                });
                break;
            }
        };
        noise.iter_mut().for_each(|z| *z = rng.sample(StandardNormal));
        let mut next = em_step_with_root(current, &drift, &root, t_next - t, &noise)?;
        if config.clip_psd && next.iter().all(|x| x.is_finite()) {
            let clipped = psd_clip(unflatten(&next, m)?.matrix())?;
            next = flatten(&TokenCovariance::new(clipped)?);
        }
        let Some((hi, lo)) = extreme_eigenvalues(&next, m) else {
            traj.stop = Some(Stop {
                time: t_next,
                reason: StopReason::NonFinite,
            });
            break;
        };
        traj.times.push(t_next);
        traj.states.push(next);
        traj.max_eig.push(hi);
        traj.min_eig.push(lo);
        let reason = if hi > config.eig_upper {
            Some(StopReason::EigenvalueAbove)
        } else if lo < config.eig_lower {
            Some(StopReason::EigenvalueBelow)
        } else {
            None
        };
        if let Some(reason) = reason {
            traj.stop = Some(Stop { time: t_next, reason });
            break;
        }
    }
    Ok(traj)
}

/// `samples` independent SDE paths; path `i` uses stream `i` of `seeds`
/// under `label`.
pub fn sde_ensemble(
    config: &SdeConfig,
    params: &CoeffParams,
    v0: &TokenCovariance,
    seeds: &SeedTree,
    label: &str,
    samples: usize,
    threads: Option<usize>,
) -> Result<Vec<SdeTrajectory>> {
    run_indexed(samples, threads, |i| {
        simulate_sde(config, params, v0, &mut seeds.rng(label, i as u64))
    })
    .into_iter()
    .collect()
}

/// `count` draws of network outputs at terminal covariance `V_T`: each is an
/// `m x n_out` matrix whose columns are iid `N(0, V_T)`.
pub fn sample_output<R: Rng + ?Sized>(
    v_t: &TokenCovariance,
    n_out: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<DMatrix<f64>>> {
    let root = psd_sqrt(v_t.matrix(), DEFAULT_PSD_TOL)?;
    let m = v_t.dim();
    Ok((0..count)
        .map(|_| &root * DMatrix::from_fn(m, n_out, |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::coeffs::{attention_coeffs, b_relu};

    fn rho02() -> TokenCovariance {
        TokenCovariance::from_row_slice(2, &[1.0, 0.2, 0.2, 1.0]).unwrap()
    }

    fn params(gamma: f64) -> CoeffParams {
        CoeffParams::new(gamma, 1.0, 0.0, -1.0).unwrap()
    }

    #[test]
    fn em_step_examples() {
        let v = vec![1.0, 0.2, 1.0];
        let zero = DriftDiffusion::zeros(3);
        assert_eq!(em_step(&v, &zero, 0.1, &[0.3, -1.0, 2.0], 1e-8).unwrap(), v);

        let drift = DriftDiffusion {
            drift: vec![1.0, -2.0, 0.5],
            diffusion: DMatrix::zeros(3, 3),
        };
        let out = em_step(&v, &drift, 0.1, &[5.0, 5.0, 5.0], 1e-8).unwrap();
        assert_abs_diff_eq!(out[0], 1.1, epsilon = 1e-15);
        assert_abs_diff_eq!(out[1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(out[2], 1.05, epsilon = 1e-15);

        let c = attention_coeffs(&TokenCovariance::identity(2), &params(1.0)).unwrap();
        let out = em_step(&[1.0, 0.0, 1.0], &c, 0.01, &[0.0; 3], 1e-8).unwrap();
        assert_abs_diff_eq!(out[0], 1.0025, epsilon = 1e-15);
        assert_eq!(out[1], 0.0);
        assert_abs_diff_eq!(out[2], 1.0025, epsilon = 1e-15);

        assert!(em_step(&v, &zero, 0.1, &[0.0; 2], 1e-8).is_err());
    }

    #[test]
    fn grid_lands_on_horizon() {
        let mut cfg = SdeConfig::new(CoeffKind::Attention, 0.75);
        assert_eq!(cfg.num_steps(), 75);
        assert_eq!(*cfg.grid().last().unwrap(), 0.75);
        cfg.horizon = 1.0 / 3.0;
        assert_eq!(cfg.num_steps(), 34);
        let g = cfg.grid();
        assert_eq!(*g.last().unwrap(), 1.0 / 3.0);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        cfg.step = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_gamma_is_stationary() {
        for kind in [CoeffKind::Resnet, CoeffKind::Attention, CoeffKind::Transformer] {
            let cfg = SdeConfig::new(kind, 0.5);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let t = simulate_sde(&cfg, &params(0.0), &rho02(), &mut rng).unwrap();
            assert_eq!(t.terminal(), flatten(&rho02()).as_slice());
            assert_eq!(stopping_time(&t), 0.5);
            assert_eq!(t.states.len(), 51);
        }
    }

    #[test]
    fn stopping_rules() {
        let mut cfg = SdeConfig::new(CoeffKind::Attention, 1.0);
        cfg.eig_upper = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v0 = TokenCovariance::identity(2);
        let t = simulate_sde(&cfg, &params(1.0), &v0, &mut rng).unwrap();
        let stop = t.stop.unwrap();
        assert!(stop.time > 0.0 && stop.time <= 1.0);
        assert_eq!(stopping_time(&t), stop.time);
        assert_eq!(*t.times.last().unwrap(), stop.time);
        assert_eq!(t.max_eig.len(), t.states.len());
        assert!(matches!(stop.reason, StopReason::EigenvalueAbove | StopReason::EigenvalueBelow));

        // the first post-step state already exceeds the bound
        cfg.eig_upper = 0.5;
        let t = simulate_sde(&cfg, &params(0.3), &v0, &mut rng).unwrap();
        assert_eq!(stopping_time(&t), 0.01);
    }

    #[test]
    fn deterministic_ode_converges_first_order() {
        // With the diffusion zeroed the scheme is forward Euler on the drift;
        // the error against a fine reference halves with the step.
        fn ode(v0: &[f64], h: f64, horizon: f64) -> Vec<f64> {
            let steps = (horizon / h).round() as usize;
            let mut v = v0.to_vec();
            for _ in 0..steps {
                let cov = unflatten(&v, 2).unwrap();
                let mut c = DriftDiffusion::zeros(3);
                c.drift = b_relu(&cov, 0.0, -3.0).unwrap();
                v = em_step(&v, &c, h, &[0.0; 3], 1e-8).unwrap();
            }
            v
        }
        let v0 = [1.0, -0.5, 2.0];
        let reference = ode(&v0, 1e-5, 1.0);
        let e1 = (ode(&v0, 0.02, 1.0)[1] - reference[1]).abs();
        let e2 = (ode(&v0, 0.01, 1.0)[1] - reference[1]).abs();
        let ratio = e1 / e2;
        assert!((1.8..2.2).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn ensembles_are_schedule_independent() {
        let cfg = SdeConfig::new(CoeffKind::Transformer, 0.2);
        let seeds = SeedTree::new(5);
        let a = sde_ensemble(&cfg, &params(0.5), &rho02(), &seeds, "s", 4, Some(1)).unwrap();
        let b = sde_ensemble(&cfg, &params(0.5), &rho02(), &seeds, "s", 4, Some(2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].terminal(), a[1].terminal());
        for t in &a {
            for s in &t.states {
                assert!(unflatten(s, 2).is_ok());
            }
        }
    }

    #[test]
    fn output_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rank_one = TokenCovariance::equicorrelated(2, 1.0, 2.0).unwrap();
        for x in sample_output(&rank_one, 5, 3, &mut rng).unwrap() {
            for col in x.column_iter() {
                assert_abs_diff_eq!(col[0], col[1], epsilon = 1e-12);
            }
        }
        let bad = TokenCovariance::from_row_slice(2, &[1.0, 3.0, 3.0, 1.0]).unwrap();
        assert!(sample_output(&bad, 1, 1, &mut rng).is_err());
    }
}
