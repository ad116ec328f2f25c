//! Experiment configuration: per-command defaults, overridden by a TOML file,
//! overridden in turn by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use covsde::coeffs::{CoeffKind, CoeffParams};
use covsde::finitenet::{NetConfig, Variant};
use covsde::sdesim::SdeConfig;
use covsde::TokenCovariance;
use serde::{Deserialize, Serialize};

pub const DEFAULT_SEED: u64 = 20230601;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Fig1,
    Fig2,
    Fig3,
    Fig4,
    Sde,
    Net,
    Oracle,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::Fig1 => "fig1",
            Self::Fig2 => "fig2",
            Self::Fig3 => "fig3",
            Self::Fig4 => "fig4",
            Self::Sde => "sde",
            Self::Net => "net",
            Self::Oracle => "oracle",
        }
    }
}

/// Settings that may come from the config file or from flags. Every field is
/// optional; unset fields fall back to the command's defaults.
#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    /// Width.
    #[arg(long)]
    pub n: Option<usize>,
    /// Depth (number of blocks).
    #[arg(long)]
    pub d: Option<usize>,
    /// Number of tokens.
    #[arg(long)]
    pub m: Option<usize>,
    /// Key/query width; defaults to n.
    #[arg(long)]
    pub nk: Option<usize>,
    /// Residual branch weight; the skip weight is sqrt(1 - gamma^2).
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Comma-separated gamma grid (fig2, fig4).
    #[arg(long, value_delimiter = ',')]
    pub gammas: Option<Vec<f64>>,
    /// Attention temperature scale; shaped attention uses tau0 * sqrt(n * nk).
    #[arg(long)]
    pub tau0: Option<f64>,
    /// Shaped-ReLU slope offsets: slopes are 1 + c/sqrt(n) on each side of 0.
    #[arg(long, allow_negative_numbers = true)]
    pub cplus: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub cminus: Option<f64>,
    /// Initial correlation between every pair of tokens.
    #[arg(long, allow_negative_numbers = true)]
    pub rho0: Option<f64>,
    /// Initial token variance.
    #[arg(long)]
    pub scale: Option<f64>,
    /// Monte Carlo samples or trajectories.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Euler-Maruyama step.
    #[arg(long)]
    pub step: Option<f64>,
    /// SDE horizon; defaults to d/n.
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Network variant (net): shaped_attention, vanilla_softmax, pre_ln,
    /// resnet_relu, shaped_transformer.
    #[arg(long)]
    pub variant: Option<String>,
    /// SDE coefficients (sde): resnet, attention, transformer.
    #[arg(long)]
    pub kind: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

macro_rules! merge_fields {
    ($first:expr, $second:expr, $($f:ident),*) => {
        Overrides { $($f: $first.$f.or($second.$f)),* }
    };
}

impl Overrides {
    /// Field-wise `self` if set, else `fallback`.
    pub fn or(self, fallback: Overrides) -> Overrides {
        merge_fields!(
            self, fallback, n, d, m, nk, gamma, gammas, tau0, cplus, cminus, rho0, scale, samples, seed, step,
            horizon, variant, kind, out, format
        )
    }

    pub fn from_toml_file(path: &Path) -> anyhow::Result<Overrides> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Fully resolved settings of one run. Serialized into every output file,
/// without the output directory so that runs written to different places
/// can be compared byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: Command,
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub nk: usize,
    pub gamma: f64,
    pub gammas: Vec<f64>,
    pub tau0: f64,
    pub cplus: f64,
    pub cminus: f64,
    pub rho0: f64,
    pub scale: f64,
    pub samples: usize,
    pub seed: u64,
    pub step: f64,
    pub horizon: f64,
    pub variant: String,
    pub kind: String,
    pub format: Format,
    #[serde(skip)]
    pub out: PathBuf,
}

/// The command's built-in settings; figure commands use the published
/// experiment settings.
pub fn defaults(command: Command) -> Overrides {
    let base = Overrides {
        m: Some(2),
        tau0: Some(1.0),
        cplus: Some(0.0),
        cminus: Some(-1.0),
        rho0: Some(0.2),
        scale: Some(1.0),
        seed: Some(DEFAULT_SEED),
        step: Some(0.01),
        format: Some(Format::Csv),
        ..Overrides::default()
    };
    let specific = match command {
        Command::Fig1 => Overrides {
            n: Some(200),
            d: Some(150),
            gamma: Some(1.0 / 8f64.sqrt()),
            samples: Some(1 << 12),
            variant: Some("shaped_attention".into()),
            kind: Some("attention".into()),
            ..Overrides::default()
        },
        Command::Fig2 => Overrides {
            n: Some(300),
            d: Some(100),
            samples: Some(1 << 13),
            variant: Some("resnet_relu".into()),
            kind: Some("resnet".into()),
            ..Overrides::default()
        },
        Command::Fig3 => Overrides {
            n: Some(300),
            d: Some(150),
            gamma: Some(std::f64::consts::FRAC_1_SQRT_2),
            samples: Some(1 << 13),
            variant: Some("shaped_attention".into()),
            kind: Some("attention".into()),
            ..Overrides::default()
        },
        Command::Fig4 => Overrides {
            n: Some(200),
            d: Some(200),
            gammas: Some(FIG4_GAMMAS.to_vec()),
            scale: Some(FIG4_SCALE),
            samples: Some(100),
            variant: Some("shaped_attention".into()),
            kind: Some("attention".into()),
            ..Overrides::default()
        },
        Command::Sde => Overrides {
            n: Some(100),
            d: Some(100),
            gamma: Some(0.5),
            samples: Some(1024),
            kind: Some("attention".into()),
            ..Overrides::default()
        },
        Command::Net => Overrides {
            n: Some(100),
            d: Some(100),
            gamma: Some(0.5),
            samples: Some(256),
            variant: Some("shaped_attention".into()),
            ..Overrides::default()
        },
        Command::Oracle => Overrides {
            n: Some(400),
            samples: Some(100_000),
            ..Overrides::default()
        },
    };
    specific.or(base)
}

/// Adversarial initial variance for the stopping-time experiment: token
/// norms of about `10 √n`, so eigenvalues of `V₀` of order 100.
pub const FIG4_SCALE: f64 = 100.0;
pub const FIG4_GAMMAS: [f64; 4] = [0.1, 0.2, 0.3, 0.4];

impl RunConfig {
    /// Resolves flags over the optional config file over the defaults.
    pub fn resolve(command: Command, flags: Overrides, file: Option<&Path>) -> anyhow::Result<RunConfig> {
        let from_file = match file {
            Some(p) => Overrides::from_toml_file(p)?,
            None => Overrides::default(),
        };
        let o = flags.or(from_file).or(defaults(command));
        let n = o.n.context("n is required")?;
        let d = o.d.unwrap_or(0);
        let gammas = match (o.gammas, command) {
            (Some(g), _) => g,
            (None, Command::Fig2) => vec![1.0 / (d.max(1) as f64).sqrt(), 0.25, 0.5, 0.75, 1.0],
            (None, _) => Vec::new(),
        };
        let gamma = o.gamma.or(gammas.first().copied()).unwrap_or(0.5);
        let cfg = RunConfig {
            command,
            n,
            d,
            m: o.m.unwrap_or(2),
            nk: o.nk.unwrap_or(n),
            gamma,
            gammas,
            tau0: o.tau0.unwrap_or(1.0),
            cplus: o.cplus.unwrap_or(0.0),
            cminus: o.cminus.unwrap_or(-1.0),
            rho0: o.rho0.unwrap_or(0.2),
            scale: o.scale.unwrap_or(1.0),
            samples: o.samples.context("samples is required")?,
            seed: o.seed.unwrap_or(DEFAULT_SEED),
            step: o.step.unwrap_or(0.01),
            horizon: o.horizon.unwrap_or(d as f64 / n as f64),
            variant: o.variant.unwrap_or_else(|| "shaped_attention".into()),
            kind: o.kind.unwrap_or_else(|| "attention".into()),
            format: o.format.unwrap_or_default(),
            out: o.out.unwrap_or_else(|| PathBuf::from("covsde-out").join(command.name())),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> anyhow::Result<()> {
        if self.samples == 0 {
            bail!("samples must be positive");
        }
        if self.m < 2 && self.command != Command::Oracle {
            bail!("experiments need at least two tokens");
        }
        if !(-1.0..=1.0).contains(&self.rho0) {
            bail!("rho0 = {} must lie in [-1, 1]", self.rho0);
        }
        if self.scale.is_nan() || self.scale <= 0.0 {
            bail!("scale must be positive");
        }
        if let Some(g) = std::iter::once(&self.gamma).chain(&self.gammas).find(|g| !(0.0..=1.0).contains(*g)) {
            bail!("gamma = {g} must lie in [0, 1]");
        }
        self.variant()?;
        self.kind()?;
        Ok(())
    }

    pub fn variant(&self) -> anyhow::Result<Variant> {
        Ok(self.variant.parse()?)
    }

    pub fn kind(&self) -> anyhow::Result<CoeffKind> {
        Ok(self.kind.parse()?)
    }

    /// `V₀ = scale · ((1-ρ₀) I + ρ₀ 11ᵀ)`.
    pub fn initial_covariance(&self) -> anyhow::Result<TokenCovariance> {
        Ok(TokenCovariance::equicorrelated(self.m, self.rho0, self.scale)?)
    }

    pub fn net(&self, variant: Variant, gamma: f64) -> NetConfig {
        let mut c = NetConfig::new(variant, self.n, self.d, self.m, gamma);
        c.nk = self.nk;
        c.tau0 = self.tau0;
        c.c_plus = self.cplus;
        c.c_minus = self.cminus;
        c
    }

    pub fn coeff_params(&self, gamma: f64) -> anyhow::Result<CoeffParams> {
        Ok(CoeffParams::new(gamma, self.tau0, self.cplus, self.cminus)?)
    }

    pub fn sde(&self, kind: CoeffKind) -> SdeConfig {
        let mut c = SdeConfig::new(kind, self.horizon);
        c.step = self.step;
        c
    }

    /// Canonical JSON of the resolved settings.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
