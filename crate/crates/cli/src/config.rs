use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, ValueEnum};
use coupled_harmonics::jointdiag::{Mu, Penalty, SolveOptions, Weights};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyArg {
    DiagDifference,
    OffSquares,
}

impl From<PenaltyArg> for Penalty {
    fn from(p: PenaltyArg) -> Self {
        match p {
            PenaltyArg::DiagDifference => Penalty::DiagDifference,
            PenaltyArg::OffSquares => Penalty::OffSquares,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum WeightsArg {
    Uniform,
    Decay,
}

impl From<WeightsArg> for Weights {
    fn from(w: WeightsArg) -> Self {
        match w {
            WeightsArg::Uniform => Weights::Uniform,
            WeightsArg::Decay => Weights::Decay,
        }
    }
}

/// Coupling strength: `adaptive` or a nonnegative number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MuArg {
    Adaptive,
    Fixed(f64),
}

impl FromStr for MuArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("adaptive") {
            return Ok(MuArg::Adaptive);
        }
        let v: f64 = s
            .parse()
            .map_err(|_| format!("expected 'adaptive' or a number, got '{s}'"))?;
        if !(v.is_finite() && v >= 0.0) {
            return Err(format!("mu must be finite and nonnegative, got {v}"));
        }
        Ok(MuArg::Fixed(v))
    }
}

impl Serialize for MuArg {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            MuArg::Adaptive => s.serialize_str("adaptive"),
            MuArg::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for MuArg {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(v) => MuArg::from_str(&v.to_string()),
            Raw::Text(t) => MuArg::from_str(&t),
        }
        .map_err(serde::de::Error::custom)
    }
}

impl From<MuArg> for Mu {
    fn from(m: MuArg) -> Self {
        match m {
            MuArg::Adaptive => Mu::Adaptive,
            MuArg::Fixed(v) => Mu::Fixed(v),
        }
    }
}

/// Every key a JSON config file may set. Flags given on the command line win.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub k: Option<usize>,
    pub k_prime: Option<usize>,
    pub mu: Option<MuArg>,
    pub weights: Option<WeightsArg>,
    pub penalty: Option<PenaltyArg>,
    pub band: Option<usize>,
    pub max_iters: Option<usize>,
    pub tol: Option<f64>,
    pub seed: Option<u64>,
    pub n_low: Option<usize>,
    pub iters: Option<usize>,
    pub trials: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = coupled_harmonics::io::read_text(path)?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

/// Solver flags shared by every command that couples two shapes.
#[derive(Debug, Clone, Default, Args)]
pub struct JdFlags {
    /// Number of coupled functions [default: 20]
    #[arg(long)]
    pub k: Option<usize>,
    /// Number of Laplacian eigenvectors each coupled function mixes [default: 30]
    #[arg(long)]
    pub k_prime: Option<usize>,
    /// Coupling strength: 'adaptive' or a nonnegative number [default: adaptive]
    #[arg(long)]
    pub mu: Option<MuArg>,
    /// Per-function coupling weights [default: uniform]
    #[arg(long, value_enum)]
    pub weights: Option<WeightsArg>,
    /// Diagonalization penalty [default: diag-difference]
    #[arg(long, value_enum)]
    pub penalty: Option<PenaltyArg>,
    /// Solve in independent bands of this many functions
    #[arg(long)]
    pub band: Option<usize>,
    /// Iteration budget of the optimizer [default: 1000]
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Relative objective decrease that stops the optimizer [default: 1e-9]
    #[arg(long)]
    pub tol: Option<f64>,
    /// Seed for the iterative eigensolver [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON file with defaults for any of these options
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Resolved solver settings, echoed into summaries.
#[derive(Debug, Clone, Serialize)]
pub struct JdSettings {
    pub k: usize,
    pub k_prime: usize,
    pub mu: MuArg,
    pub weights: WeightsArg,
    pub penalty: PenaltyArg,
    pub band: Option<usize>,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl JdSettings {
    pub fn resolve(flags: &JdFlags, file: &FileConfig) -> Result<Self, CliError> {
        let s = JdSettings {
            k: flags.k.or(file.k).unwrap_or(20),
            k_prime: flags.k_prime.or(file.k_prime).unwrap_or(30),
            mu: flags.mu.or(file.mu).unwrap_or(MuArg::Adaptive),
            weights: flags.weights.or(file.weights).unwrap_or(WeightsArg::Uniform),
            penalty: flags.penalty.or(file.penalty).unwrap_or(PenaltyArg::DiagDifference),
            band: flags.band.or(file.band),
            max_iters: flags.max_iters.or(file.max_iters).unwrap_or(1000),
            tol: flags.tol.or(file.tol).unwrap_or(1e-9),
            seed: flags.seed.or(file.seed).unwrap_or(0),
        };
        if s.k == 0 || s.k > s.k_prime {
            return Err(CliError::Usage(format!(
                "need 0 < k <= k-prime, got k = {} and k-prime = {}",
                s.k, s.k_prime
            )));
        }
        if !(s.tol.is_finite() && s.tol >= 0.0) {
            return Err(CliError::Usage(format!("tol must be finite and nonnegative, got {}", s.tol)));
        }
        if let Some(band) = s.band {
            if band == 0 || s.k % band != 0 {
                return Err(CliError::Usage(format!("band {band} does not divide k = {}", s.k)));
            }
        }
        Ok(s)
    }

    pub fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            max_iters: self.max_iters,
            tol: self.tol,
            ..Default::default()
        }
    }
}
