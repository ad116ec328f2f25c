//! Acceptance suite: one PASS/FAIL line per criterion, in order.
//!
//! Runs without the libtest harness so that every line is printed even when
//! a criterion fails. Numeric arguments select criteria (`cargo test --test
//! acceptance -- 2 6`); the exit status is nonzero if any selected criterion
//! fails.

use std::path::Path;
use std::process::{Command as Process, ExitCode};
use std::time::{Duration, Instant};

use covsde::coeffs::{CoeffKind, CoeffParams};
use covsde::ensemble::SeedTree;
use covsde::finitenet::{sample_block, shaped_attention_matrix, Ablation, NetConfig, Variant};
use covsde::sdesim::{sde_ensemble, simulate_sde, SdeConfig};
use covsde::stats::{flat_rho, ks_statistic};
use covsde::symmat::{flatten, psd_clip, psd_sqrt, symmetrize, unflatten, FlatIndexMap, DEFAULT_PSD_TOL};
use covsde::TokenCovariance;
use covsde_cli::config::{Command, Overrides, RunConfig};
use covsde_cli::experiments::{run_fig1, run_fig2, run_fig3, run_fig4, run_oracles};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> anyhow::Result<Outcome> {
    Ok(Outcome { passed, detail })
}

fn config(command: Command, out: &Path) -> anyhow::Result<RunConfig> {
    let flags = Overrides {
        out: Some(out.join(command.name())),
        ..Overrides::default()
    };
    RunConfig::resolve(command, flags, None)
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

/// Every closed-form moment against its oracle, within 4 SE, in 10 minutes.
fn oracle_suite(out: &Path) -> anyhow::Result<Outcome> {
    let start = Instant::now();
    let report = run_oracles(&config(Command::Oracle, out)?)?;
    let elapsed = start.elapsed();
    let failures = report.failures();
    let worst = report
        .checks
        .iter()
        .map(|c| c.estimate.z_score(c.target))
        .fold(0.0, f64::max);
    let names: Vec<&str> = failures.iter().map(|c| c.name.as_str()).collect();
    outcome(
        failures.is_empty() && within(elapsed, 600),
        format!(
            "{} checks, {} outside 4 SE {:?}, max z {:.2}, {:.0}s (limit 600s)",
            report.checks.len(),
            failures.len(),
            names,
            worst,
            elapsed.as_secs_f64()
        ),
    )
}

/// Rank collapse of vanilla softmax, bounded shaped attention, and the
/// shaped network against its SDE.
fn fig1(out: &Path) -> anyhow::Result<Outcome> {
    let start = Instant::now();
    let r = run_fig1(&config(Command::Fig1, out)?)?;
    let elapsed = start.elapsed();
    let vanilla = r.variant("vanilla_softmax").map_or(f64::NAN, |v| v.mean_rho);
    let shaped = r.variant("shaped_attention").map_or(f64::NAN, |v| v.mean_abs_rho);
    let pre_ln = r.variant("pre_ln").map_or(f64::NAN, |v| v.mean_rho);
    outcome(
        vanilla >= 0.99 && shaped <= 0.8 && r.ks < 0.1 && within(elapsed, 900),
        format!(
            "vanilla mean rho {vanilla:.4} (>= 0.99), shaped mean |rho| {shaped:.4} (<= 0.8), KS {:.4} (< 0.1), \
             pre-LN mean rho {pre_ln:.4}, {:.0}s (limit 900s)",
            r.ks,
            elapsed.as_secs_f64()
        ),
    )
}

/// p95 of |rho| strictly increasing in gamma; finite network matches the
/// resnet SDE at every gamma.
fn fig2(out: &Path) -> anyhow::Result<Outcome> {
    let r = run_fig2(&config(Command::Fig2, out)?)?;
    let trend: Vec<_> = r.rows.iter().filter(|g| g.gamma >= 0.25).collect();
    let increasing = |f: fn(&&covsde_cli::experiments::GammaSummary) -> f64| {
        trend.len() == 4 && trend.windows(2).all(|w| f(&w[1]) > f(&w[0]))
    };
    let net_up = increasing(|g| g.p95_net);
    let sde_up = increasing(|g| g.p95_sde);
    let ks_ok = r.rows.iter().all(|g| g.ks < 0.1);
    let rows: Vec<String> = r
        .rows
        .iter()
        .map(|g| format!("gamma {:.3}: p95 {:.4}/{:.4} KS {:.4}", g.gamma, g.p95_net, g.p95_sde, g.ks))
        .collect();
    outcome(
        net_up && sde_up && ks_ok,
        format!(
            "net p95 increasing {net_up}, SDE p95 increasing {sde_up}, all KS < 0.1 {ks_ok}; {}",
            rows.join("; ")
        ),
    )
}

/// Ablations: full shaped attention bounded, "only id" covariance blows up,
/// removing the identity collapses correlations.
fn fig3(out: &Path) -> anyhow::Result<Outcome> {
    let r = run_fig3(&config(Command::Fig3, out)?)?;
    let full = r.get("full").map_or(f64::NAN, |i| i.final_mean_abs_rho);
    let (growth, only_id_diverged) = r
        .get("only_identity")
        .map_or((f64::NAN, 0), |i| (i.final_mean_abs_cov / i.initial_mean_abs_cov, i.diverged));
    let no_id = r.get("no_identity").map_or(f64::NAN, |i| i.final_mean_rho);
    let no_id_cov = r.get("no_identity").map_or(f64::NAN, |i| i.final_mean_abs_cov);
    outcome(
        full <= 0.8 && growth > 10.0 && no_id >= 0.95,
        format!(
            "full mean |rho| {full:.4} (<= 0.8), only-id |V| growth {growth:.3e} (> 10, {only_id_diverged} overflowed), \
             no-identity mean rho {no_id:.4} (>= 0.95; its mean |V| is {no_id_cov:.3e})"
        ),
    )
}

/// Stopping times of the shaped attention network from an adversarial V0.
fn fig4(out: &Path) -> anyhow::Result<Outcome> {
    let r = run_fig4(&config(Command::Fig4, out)?)?;
    let net = r.medians("net");
    let sde = r.medians("sde");
    let gammas: Vec<f64> = r.rows.iter().filter(|s| s.source == "net").map(|s| s.gamma).collect();
    let non_increasing = net.len() == 4 && net.windows(2).all(|w| w[1] <= w[0]);
    let capped = net.first() == Some(&1.0);
    outcome(
        non_increasing && capped,
        format!(
            "gammas {gammas:?}: network median t* {net:?} (non-increasing {non_increasing}, first = 1 {capped}); \
             SDE median t* {sde:?}"
        ),
    )
}

/// The resnet SDE at (gamma, T) and at (1, gamma^2 T) have the same law.
fn time_change() -> anyhow::Result<Outcome> {
    let v0 = TokenCovariance::equicorrelated(2, 0.2, 1.0)?;
    let seeds = SeedTree::new(20230601);
    let samples = 1 << 13;
    let (gamma, horizon) = (0.5, 1.0);
    let terminal = |g: f64, t: f64, label: &str| -> anyhow::Result<Vec<f64>> {
        let params = CoeffParams::new(g, 1.0, 0.0, -1.0)?;
        let cfg = SdeConfig::new(CoeffKind::Resnet, t);
        let map = FlatIndexMap::new(2);
        Ok(sde_ensemble(&cfg, &params, &v0, &seeds, label, samples, None)?
            .iter()
            .filter(|p| p.stop.is_none())
            .filter_map(|p| flat_rho(p.terminal(), &map, 0, 1))
            .collect())
    };
    let a = terminal(gamma, horizon, "time-change/a")?;
    let b = terminal(1.0, gamma * gamma * horizon, "time-change/b")?;
    let ks = ks_statistic(&a, &b)?;
    outcome(
        ks < 0.05 && a.len() == samples && b.len() == samples,
        format!(
            "KS {ks:.4} (< 0.05) between gamma {gamma}, T {horizon} and gamma 1, T {} ({} vs {} paths)",
            gamma * gamma * horizon,
            a.len(),
            b.len()
        ),
    )
}

fn run_binary(args: &[&str], threads: &str, out: &Path) -> anyhow::Result<()> {
    let status = Process::new(env!("CARGO_BIN_EXE_covsde"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("COVSDE_THREADS", threads)
        .stdout(std::process::Stdio::null())
        .status()?;
    anyhow::ensure!(status.success(), "covsde {args:?} failed");
    Ok(())
}

fn same_files(a: &Path, b: &Path) -> anyhow::Result<(usize, bool)> {
    let mut names: Vec<_> = std::fs::read_dir(a)?.map(|e| e.map(|e| e.file_name())).collect::<Result<_, _>>()?;
    names.sort();
    let mut same = !names.is_empty();
    for name in &names {
        same &= std::fs::read(a.join(name))? == std::fs::read(b.join(name))?;
    }
    Ok((names.len(), same))
}

/// psd_sqrt reconstruction, flatten round trips, and thread-count
/// independence of the written output.
fn kernels(out: &Path) -> anyhow::Result<Outcome> {
    let mut rng = SeedTree::new(7).rng("psd", 0);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let dim = 1 + i % 36;
        let rank = rng.random_range(1..=dim);
        let b = DMatrix::from_fn(dim, rank, |_, _| rng.sample::<f64, _>(StandardNormal));
        let a = symmetrize(&(&b * b.transpose()));
        let s = psd_sqrt(&a, DEFAULT_PSD_TOL)?;
        let err = (&s * &s - psd_clip(&a)?).norm() / (1.0 + a.norm());
        worst = worst.max(err);
    }
    let mut roundtrip = true;
    for m in 1..=8 {
        let len = FlatIndexMap::new(m).len();
        for _ in 0..100 {
            let flat: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
            roundtrip &= flatten(&unflatten(&flat, m)?) == flat;
        }
    }
    let mut files = 0;
    let mut identical = true;
    for args in [
        &["net", "--n", "64", "--d", "16", "--samples", "64"][..],
        &["sde", "--samples", "256", "--kind", "transformer"][..],
        &["fig1", "--n", "64", "--d", "16", "--samples", "64"][..],
    ] {
        let (one, four) = (out.join(format!("{}-1", args[0])), out.join(format!("{}-4", args[0])));
        run_binary(args, "1", &one)?;
        run_binary(args, "4", &four)?;
        let (count, same) = same_files(&one, &four)?;
        files += count;
        identical &= same;
    }
    outcome(
        worst <= 1e-9 && roundtrip && identical,
        format!(
            "psd_sqrt worst relative error {worst:.2e} over 1000 matrices (<= 1e-9), flatten round trip exact {roundtrip}, \
             {files} output files byte-identical across COVSDE_THREADS=1/4 {identical}"
        ),
    )
}

/// gamma = 0 freezes the SDE and reduces every block to its skip branch;
/// zero logits give the identity attention matrix.
fn trivial_limits() -> anyhow::Result<Outcome> {
    let v0 = TokenCovariance::from_row_slice(3, &[1.2, 0.3, -0.2, 0.3, 0.9, 0.4, -0.2, 0.4, 1.1])?;
    let seeds = SeedTree::new(3);
    let mut sde_frozen = true;
    for kind in [CoeffKind::Resnet, CoeffKind::Attention, CoeffKind::Transformer] {
        let params = CoeffParams::new(0.0, 1.0, 0.0, -1.0)?;
        let traj = simulate_sde(&SdeConfig::new(kind, 1.0), &params, &v0, &mut seeds.rng("sde", 0))?;
        sde_frozen &= traj.stop.is_none() && traj.terminal() == flatten(&v0).as_slice();
    }
    let mut skip_only = true;
    let mut xr = seeds.rng("x", 0);
    let x = DMatrix::from_fn(3, 32, |_, _| xr.sample::<f64, _>(StandardNormal));
    for variant in Variant::ALL {
        let mut cfg = NetConfig::new(variant, 32, 1, 3, 0.0);
        cfg.enforce_branch_norm = false;
        cfg.lambda = 0.7;
        let next = sample_block(&x, &cfg, &mut seeds.rng("block", 0))?;
        let expected = if variant == Variant::ShapedTransformer { &x * 0.7 * 0.7 } else { &x * 0.7 };
        skip_only &= next == expected;
    }
    let mut identity = true;
    for m in 1..=8 {
        for tau0 in [0.1, 1.0, 10.0] {
            let mut cfg = NetConfig::new(Variant::ShapedAttention, 16, 1, m, 0.5);
            cfg.tau0 = tau0;
            cfg.ablation = Ablation::default();
            identity &= shaped_attention_matrix(&DMatrix::zeros(m, m), &cfg) == DMatrix::identity(m, m);
        }
    }
    outcome(
        sde_frozen && skip_only && identity,
        format!(
            "SDE V_T = V_0 exactly for all kinds {sde_frozen}, X' = lambda X in all variants {skip_only}, \
             zero-logit shaped attention = I exactly {identity}"
        ),
    )
}

type Criterion = (&'static str, Box<dyn Fn(&Path) -> anyhow::Result<Outcome>>);

fn main() -> ExitCode {
    let criteria: Vec<Criterion> = vec![
        ("oracle suite", Box::new(oracle_suite)),
        ("rank collapse and shaped attention vs SDE", Box::new(fig1)),
        ("residual gamma sweep", Box::new(fig2)),
        ("shaped attention ablations", Box::new(fig3)),
        ("stopping times", Box::new(fig4)),
        ("resnet SDE time change", Box::new(|_: &Path| time_change())),
        ("numerical kernels and determinism", Box::new(kernels)),
        ("trivial limits", Box::new(|_: &Path| trivial_limits())),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let dir = tempfile::tempdir().expect("temporary directory");
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let number = k + 1;
        if !selected.is_empty() && !selected.contains(&number) {
            continue;
        }
        let start = Instant::now();
        let (verdict, detail) = match check(dir.path()) {
            Ok(o) => (if o.passed { "PASS" } else { "FAIL" }, o.detail),
            Err(e) => ("FAIL", format!("error: {e:#}")),
        };
        if verdict == "FAIL" {
            failed += 1;
        }
        println!(
            "criterion {number} [{verdict}] {name}: {detail} ({:.1}s)",
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {failed} criteria failed");
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
