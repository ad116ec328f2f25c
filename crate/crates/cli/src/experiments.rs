//! The figure reproductions and the generic `sde`, `net` and `oracle` runs.
//! Each returns a summary for programmatic checks and writes its tables to
//! the configured output directory.

use std::path::PathBuf;

use anyhow::Context;
use covsde::coeffs::CoeffKind;
use covsde::ensemble::{threads_from_env, SeedTree};
use covsde::finitenet::{net_ensemble, Ablation, NetConfig, NetTrajectory, Variant};
use covsde::mcoracle::{run_oracle_suite, OracleCheck, SuiteSettings};
use covsde::sdesim::{sde_ensemble, stopping_time, SdeTrajectory};
use covsde::stats::{
    self, flat_rho, kde, mean_abs_covariance_trajectory, mean_correlation_trajectory, Bandwidth, Ensemble,
    KDE_GRID_POINTS,
};
use covsde::symmat::{unflatten, FlatIndexMap};

use crate::config::{Format, RunConfig};
use crate::output::{write_table, write_table_as, Cell, Table};

fn threads() -> anyhow::Result<Option<usize>> {
    Ok(threads_from_env()?)
}

/// `ρ^{ab}` for every pair `a < b` of one flattened state.
fn pair_rhos(state: &[f64], m: usize) -> Vec<f64> {
    let map = FlatIndexMap::new(m);
    map.pairs()
        .filter(|&(a, b)| a < b)
        .filter_map(|(a, b)| flat_rho(state, &map, a, b))
        .collect()
}

/// Terminal correlations of the passes that reached the last layer.
fn net_terminal_rhos(trajs: &[NetTrajectory], m: usize) -> Vec<f64> {
    trajs
        .iter()
        .filter(|t| t.diverged_at.is_none())
        .flat_map(|t| pair_rhos(t.terminal(), m))
        .collect()
}

/// Terminal correlations of the paths that reached the horizon.
fn sde_terminal_rhos(trajs: &[SdeTrajectory], m: usize) -> Vec<f64> {
    trajs
        .iter()
        .filter(|t| t.stop.is_none())
        .flat_map(|t| pair_rhos(t.terminal(), m))
        .collect()
}

fn net_paths(trajs: &[NetTrajectory]) -> Vec<Vec<Vec<f64>>> {
    trajs.iter().map(|t| t.covariances.clone()).collect()
}

fn sde_paths(trajs: &[SdeTrajectory]) -> Vec<Vec<Vec<f64>>> {
    trajs.iter().map(|t| t.states.clone()).collect()
}

/// Per-step mean `ρ`, mean `|ρ|` and mean `|V^{ab}|` of an ensemble.
struct Summary {
    mean_rho: Vec<f64>,
    mean_abs_rho: Vec<f64>,
    mean_abs_cov: Vec<f64>,
    counts: Vec<usize>,
}

fn summarize(config: &RunConfig, paths: Vec<Vec<Vec<f64>>>) -> anyhow::Result<Summary> {
    let ens = Ensemble::new(&config.to_json().to_string(), config.seed, paths)?;
    let rho = mean_correlation_trajectory(&ens)?;
    let cov = mean_abs_covariance_trajectory(&ens)?;
    Ok(Summary {
        mean_rho: rho.signed,
        mean_abs_rho: rho.absolute,
        mean_abs_cov: cov.absolute,
        counts: rho.counts,
    })
}

fn last(xs: &[f64]) -> f64 {
    xs.last().copied().unwrap_or(f64::NAN)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantFinal {
    pub variant: String,
    pub mean_rho: f64,
    pub mean_abs_rho: f64,
    /// Passes that reached the last layer.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fig1Report {
    pub finals: Vec<VariantFinal>,
    /// KS distance between terminal shaped-attention and SDE correlations.
    pub ks: f64,
    pub files: Vec<PathBuf>,
}

impl Fig1Report {
    pub fn variant(&self, name: &str) -> Option<&VariantFinal> {
        self.finals.iter().find(|f| f.variant == name)
    }
}

pub const FIG1_VARIANTS: [Variant; 3] = [Variant::ShapedAttention, Variant::VanillaSoftmax, Variant::PreLn];

/// Rank collapse: mean correlation by layer of shaped, vanilla and Pre-LN
/// attention networks, and terminal correlations of the shaped network
/// against the attention SDE.
pub fn run_fig1(config: &RunConfig) -> anyhow::Result<Fig1Report> {
    let threads = threads()?;
    let seeds = SeedTree::new(config.seed);
    let v0 = config.initial_covariance()?;
    let m = config.m;
    let mut by_layer = Table::new(&["source", "layer", "t", "mean_rho", "mean_abs_rho", "count"]);
    let mut samples = Table::new(&["source", "sample", "rho"]);
    let mut finals = Vec::new();
    let mut shaped = Vec::new();
    for variant in FIG1_VARIANTS {
        let net = config.net(variant, config.gamma);
        let trajs = net_ensemble(&net, &v0, &seeds, &format!("fig1/{variant}"), config.samples, threads)?;
        let s = summarize(config, net_paths(&trajs))?;
        for (l, count) in s.counts.iter().enumerate() {
            by_layer.push(vec![
                variant.name().into(),
                l.into(),
                (l as f64 / config.n as f64).into(),
                s.mean_rho[l].into(),
                s.mean_abs_rho[l].into(),
                (*count).into(),
            ]);
        }
        let rhos = net_terminal_rhos(&trajs, m);
        for (i, r) in rhos.iter().enumerate() {
            samples.push(vec![variant.name().into(), i.into(), (*r).into()]);
        }
        let complete = trajs.iter().filter(|t| t.diverged_at.is_none()).count();
        finals.push(VariantFinal {
            variant: variant.name().into(),
            mean_rho: if s.counts.len() == config.d + 1 { last(&s.mean_rho) } else { f64::NAN },
            mean_abs_rho: if s.counts.len() == config.d + 1 { last(&s.mean_abs_rho) } else { f64::NAN },
            count: complete,
        });
        if variant == Variant::ShapedAttention {
            shaped = rhos;
        }
    }

    let params = config.coeff_params(config.gamma)?;
    let sde_cfg = config.sde(CoeffKind::Attention);
    let trajs = sde_ensemble(&sde_cfg, &params, &v0, &seeds, "fig1/sde", config.samples, threads)?;
    let s = summarize(config, sde_paths(&trajs))?;
    let grid = sde_cfg.grid();
    for (k, count) in s.counts.iter().enumerate() {
        by_layer.push(vec![
            "sde".into(),
            k.into(),
            grid[k].into(),
            s.mean_rho[k].into(),
            s.mean_abs_rho[k].into(),
            (*count).into(),
        ]);
    }
    let sde_rhos = sde_terminal_rhos(&trajs, m);
    let mut sde_samples = Table::new(&["source", "sample", "rho"]);
    for (i, r) in sde_rhos.iter().enumerate() {
        sde_samples.push(vec!["sde".into(), i.into(), (*r).into()]);
    }
    let ks = stats::ks_statistic(&shaped, &sde_rhos)?;
    let mut ks_table = Table::new(&["finite", "sde", "ks", "finite_samples", "sde_samples"]);
    ks_table.push(vec![
        "shaped_attention".into(),
        "attention".into(),
        ks.into(),
        shaped.len().into(),
        sde_rhos.len().into(),
    ]);

    let dir = &config.out;
    let files = vec![
        write_table(dir, "mean_corr_by_layer", &by_layer, config)?,
        write_table(dir, "terminal_corr_samples", &samples, config)?,
        write_table(dir, "sde_terminal_corr_samples", &sde_samples, config)?,
        write_table_as(dir, "ks", &ks_table, config, Format::Json)?,
    ];
    Ok(Fig1Report { finals, ks, files })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaSummary {
    pub gamma: f64,
    pub p95_net: f64,
    pub p95_sde: f64,
    pub ks: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fig2Report {
    pub rows: Vec<GammaSummary>,
    pub files: Vec<PathBuf>,
}

/// Residual shaped-ReLU networks across `γ`: KDEs of terminal correlations
/// and 95th percentiles of `|ρ|`, finite network against the resnet SDE.
pub fn run_fig2(config: &RunConfig) -> anyhow::Result<Fig2Report> {
    let threads = threads()?;
    let seeds = SeedTree::new(config.seed);
    let v0 = config.initial_covariance()?;
    let mut kde_table = Table::new(&["gamma", "source", "x", "density", "bandwidth"]);
    let mut p95_table = Table::new(&["gamma", "source", "p95_abs_rho", "samples", "ks"]);
    let mut rows = Vec::new();
    for (k, &gamma) in config.gammas.iter().enumerate() {
        let net = config.net(Variant::ResnetRelu, gamma);
        let trajs = net_ensemble(&net, &v0, &seeds, &format!("fig2/net/{k}"), config.samples, threads)?;
        let net_rhos = net_terminal_rhos(&trajs, config.m);
        let params = config.coeff_params(gamma)?;
        let sde = sde_ensemble(
            &config.sde(CoeffKind::Resnet),
            &params,
            &v0,
            &seeds,
            &format!("fig2/sde/{k}"),
            config.samples,
            threads,
        )?;
        let sde_rhos = sde_terminal_rhos(&sde, config.m);
        let ks = stats::ks_statistic(&net_rhos, &sde_rhos)?;
        let mut p95 = [0.0; 2];
        for (j, (source, rhos)) in [("net", &net_rhos), ("sde", &sde_rhos)].into_iter().enumerate() {
            let est = kde(rhos, Bandwidth::Silverman, KDE_GRID_POINTS)?;
            let bw = match &est {
                stats::DensityEstimate::Kde { bandwidth, .. } => *bandwidth,
                stats::DensityEstimate::Histogram(_) => f64::NAN,
            };
            for (x, dens) in est.points() {
                kde_table.push(vec![gamma.into(), source.into(), x.into(), dens.into(), bw.into()]);
            }
            let abs: Vec<f64> = rhos.iter().map(|r| r.abs()).collect();
            p95[j] = stats::percentile(&abs, 95.0)?;
            p95_table.push(vec![gamma.into(), source.into(), p95[j].into(), rhos.len().into(), ks.into()]);
        }
        rows.push(GammaSummary {
            gamma,
            p95_net: p95[0],
            p95_sde: p95[1],
            ks,
        });
    }
    let dir = &config.out;
    let files = vec![
        write_table(dir, "kde_by_gamma", &kde_table, config)?,
        write_table(dir, "p95_by_gamma", &p95_table, config)?,
    ];
    Ok(Fig2Report { rows, files })
}

/// The shaped-attention interventions: each removes one or two of identity,
/// centering and the wide temperature `τ² = τ₀² n n_k`.
pub const FIG3_INTERVENTIONS: [(&str, Ablation); 7] = [
    ("full", ablation(true, true, true)),
    ("no_identity", ablation(false, true, true)),
    ("no_centering", ablation(true, false, true)),
    ("no_wide_temperature", ablation(true, true, false)),
    ("only_identity", ablation(true, false, false)),
    ("only_centering", ablation(false, true, false)),
    ("only_wide_temperature", ablation(false, false, true)),
];

const fn ablation(use_identity: bool, use_centering: bool, use_wide_temperature: bool) -> Ablation {
    Ablation {
        use_identity,
        use_centering,
        use_wide_temperature,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterventionSummary {
    pub name: String,
    pub final_mean_rho: f64,
    pub final_mean_abs_rho: f64,
    pub initial_mean_abs_cov: f64,
    /// Mean `|V^{ab}|` at the last layer; passes that overflowed count as
    /// infinite.
    pub final_mean_abs_cov: f64,
    pub diverged: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fig3Report {
    pub interventions: Vec<InterventionSummary>,
    pub files: Vec<PathBuf>,
}

impl Fig3Report {
    pub fn get(&self, name: &str) -> Option<&InterventionSummary> {
        self.interventions.iter().find(|i| i.name == name)
    }
}

/// Ablations of shaped attention: mean `|ρ|` and mean `|V|` per layer for
/// every intervention.
pub fn run_fig3(config: &RunConfig) -> anyhow::Result<Fig3Report> {
    let threads = threads()?;
    let seeds = SeedTree::new(config.seed);
    let v0 = config.initial_covariance()?;
    let mut table = Table::new(&["intervention", "layer", "mean_rho", "mean_abs_rho", "mean_abs_cov", "count"]);
    let mut interventions = Vec::new();
    for (name, abl) in FIG3_INTERVENTIONS {
        let mut net: NetConfig = config.net(Variant::ShapedAttention, config.gamma);
        net.ablation = abl;
        let trajs = net_ensemble(&net, &v0, &seeds, &format!("fig3/{name}"), config.samples, threads)?;
        let s = summarize(config, net_paths(&trajs))?;
        for (l, count) in s.counts.iter().enumerate() {
            table.push(vec![
                name.into(),
                l.into(),
                s.mean_rho[l].into(),
                s.mean_abs_rho[l].into(),
                s.mean_abs_cov[l].into(),
                (*count).into(),
            ]);
        }
        let diverged = trajs.iter().filter(|t| t.diverged_at.is_some()).count();
        let complete = s.counts.len() == config.d + 1;
        let at_end = |xs: &[f64]| if complete { last(xs) } else { f64::NAN };
        interventions.push(InterventionSummary {
            name: name.into(),
            final_mean_rho: at_end(&s.mean_rho),
            final_mean_abs_rho: at_end(&s.mean_abs_rho),
            initial_mean_abs_cov: s.mean_abs_cov[0],
            final_mean_abs_cov: if diverged > 0 { f64::INFINITY } else { at_end(&s.mean_abs_cov) },
            diverged,
        });
    }
    let files = vec![write_table(&config.out, "ablation_trajectories", &table, config)?];
    Ok(Fig3Report { interventions, files })
}

/// First rescaled depth `ℓ/n` at which an eigenvalue of `V_ℓ` leaves
/// `[lower, upper]` or the pass overflowed, capped at `cap`.
pub fn net_stopping_time(traj: &NetTrajectory, m: usize, n: usize, lower: f64, upper: f64, cap: f64) -> f64 {
    for (l, state) in traj.covariances.iter().enumerate().skip(1) {
        let exits = match unflatten(state, m).and_then(|v| v.eigen()) {
            Ok(e) => e.max() > upper || e.min() < lower,
            Err(_) => true,
        };
        if exits {
            return (l as f64 / n as f64).min(cap);
        }
    }
    match traj.diverged_at {
        Some(l) => (l as f64 / n as f64).min(cap),
        None => cap,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoppingSummary {
    pub gamma: f64,
    pub source: String,
    pub median: f64,
    pub p10: f64,
    pub stopped: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fig4Report {
    pub rows: Vec<StoppingSummary>,
    pub files: Vec<PathBuf>,
}

impl Fig4Report {
    /// Median stopping times of `source` in grid order.
    pub fn medians(&self, source: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.source == source).map(|r| r.median).collect()
    }
}

/// Stopping times of shaped attention from an adversarially large `V₀`,
/// finite network and attention SDE, for every `γ` in the grid.
pub fn run_fig4(config: &RunConfig) -> anyhow::Result<Fig4Report> {
    let threads = threads()?;
    let seeds = SeedTree::new(config.seed);
    let v0 = config.initial_covariance()?;
    let cap = 1.0;
    let mut summary = Table::new(&["gamma", "source", "median", "p10", "stopped", "samples"]);
    let mut samples = Table::new(&["gamma", "source", "sample", "t_star"]);
    let mut rows = Vec::new();
    for (k, &gamma) in config.gammas.iter().enumerate() {
        let net = config.net(Variant::ShapedAttention, gamma);
        let sde_cfg = config.sde(CoeffKind::Attention);
        let trajs = net_ensemble(&net, &v0, &seeds, &format!("fig4/net/{k}"), config.samples, threads)?;
        let net_times: Vec<f64> = trajs
            .iter()
            .map(|t| net_stopping_time(t, config.m, config.n, sde_cfg.eig_lower, sde_cfg.eig_upper, cap))
            .collect();
        let params = config.coeff_params(gamma)?;
        let sde = sde_ensemble(&sde_cfg, &params, &v0, &seeds, &format!("fig4/sde/{k}"), config.samples, threads)?;
        let sde_times: Vec<f64> = sde.iter().map(|t| stopping_time(t).min(cap)).collect();
        for (source, times) in [("net", net_times), ("sde", sde_times)] {
            let q = stats::percentiles(&times, &[50.0, 10.0])?;
            let stopped = times.iter().filter(|&&t| t < cap).count();
            summary.push(vec![
                gamma.into(),
                source.into(),
                q[0].into(),
                q[1].into(),
                stopped.into(),
                times.len().into(),
            ]);
            for (i, t) in times.iter().enumerate() {
                samples.push(vec![gamma.into(), source.into(), i.into(), (*t).into()]);
            }
            rows.push(StoppingSummary {
                gamma,
                source: source.into(),
                median: q[0],
                p10: q[1],
                stopped,
                samples: times.len(),
            });
        }
    }
    let files = vec![
        write_table(&config.out, "stopping_times", &summary, config)?,
        write_table(&config.out, "stopping_time_samples", &samples, config)?,
    ];
    Ok(Fig4Report { rows, files })
}

fn state_columns(m: usize) -> Vec<String> {
    FlatIndexMap::new(m).pairs().map(|(a, b)| format!("v_{a}_{b}")).collect()
}

fn trajectory_table(step_name: &str, times: &[f64], s: &Summary) -> Table {
    let mut t = Table::new(&[step_name, "t", "mean_rho", "mean_abs_rho", "mean_abs_cov", "count"]);
    for (k, count) in s.counts.iter().enumerate() {
        t.push(vec![
            k.into(),
            times[k].into(),
            s.mean_rho[k].into(),
            s.mean_abs_rho[k].into(),
            s.mean_abs_cov[k].into(),
            (*count).into(),
        ]);
    }
    t
}

/// SDE ensemble of the configured kind: mean paths and terminal states.
pub fn run_sde(config: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    let threads = threads()?;
    let seeds = SeedTree::new(config.seed);
    let v0 = config.initial_covariance()?;
    let sde_cfg = config.sde(config.kind()?);
    let params = config.coeff_params(config.gamma)?;
    let trajs = sde_ensemble(&sde_cfg, &params, &v0, &seeds, "sde", config.samples, threads)?;
    let s = summarize(config, sde_paths(&trajs))?;
    let means = trajectory_table("step", &sde_cfg.grid(), &s);
    let mut cols = vec!["sample".to_owned(), "stop_time".to_owned(), "stop_reason".to_owned()];
    cols.extend(state_columns(config.m));
    let mut terminal = Table::new(&cols);
    for (i, t) in trajs.iter().enumerate() {
        let reason = t.stop.map_or("none".to_owned(), |s| format!("{:?}", s.reason));
        let mut row: Vec<Cell> = vec![i.into(), stopping_time(t).into(), reason.into()];
        row.extend(t.terminal().iter().map(|&x| Cell::from(x)));
        terminal.push(row);
    }
    Ok(vec![
        write_table(&config.out, "sde_mean_corr", &means, config)?,
        write_table(&config.out, "sde_terminal", &terminal, config)?,
    ])
}

/// Finite-network ensemble of the configured variant: mean paths and
/// terminal covariances.
pub fn run_net(config: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    let threads = threads()?;
    let seeds = SeedTree::new(config.seed);
    let v0 = config.initial_covariance()?;
    let net = config.net(config.variant()?, config.gamma);
    let trajs = net_ensemble(&net, &v0, &seeds, "net", config.samples, threads)?;
    let s = summarize(config, net_paths(&trajs))?;
    let times: Vec<f64> = (0..s.counts.len()).map(|l| l as f64 / config.n as f64).collect();
    let means = trajectory_table("layer", &times, &s);
    let mut cols = vec!["sample".to_owned(), "diverged_at".to_owned()];
    cols.extend(state_columns(config.m));
    let mut terminal = Table::new(&cols);
    for (i, t) in trajs.iter().enumerate() {
        let diverged = t.diverged_at.map_or(Cell::Text("none".into()), Cell::from);
        let mut row: Vec<Cell> = vec![i.into(), diverged];
        row.extend(t.terminal().iter().map(|&x| Cell::from(x)));
        terminal.push(row);
    }
    Ok(vec![
        write_table(&config.out, "net_mean_corr", &means, config)?,
        write_table(&config.out, "net_terminal", &terminal, config)?,
    ])
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub checks: Vec<OracleCheck>,
    pub files: Vec<PathBuf>,
}

impl OracleReport {
    pub fn failures(&self) -> Vec<&OracleCheck> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }
}

/// The Monte Carlo oracle suite at width `n` with `samples` draws per check.
pub fn run_oracles(config: &RunConfig) -> anyhow::Result<OracleReport> {
    let settings = SuiteSettings {
        n: config.n,
        samples: config.samples,
        seed: config.seed,
        threads: threads()?,
        ..SuiteSettings::default()
    };
    let checks = run_oracle_suite(&settings).context("oracle suite")?;
    let mut table = Table::new(&["name", "mean", "std_error", "samples", "target", "z", "passed"]);
    for c in &checks {
        table.push(vec![
            c.name.clone().into(),
            c.estimate.mean.into(),
            c.estimate.std_error.into(),
            c.estimate.samples.into(),
            c.target.into(),
            c.estimate.z_score(c.target).into(),
            (if c.passed() { "true" } else { "false" }).into(),
        ]);
    }
    let files = vec![write_table(&config.out, "oracle_report", &table, config)?];
    Ok(OracleReport { checks, files })
}
