use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use coupled_harmonics::Error;

mod commands;
mod config;
mod verify;

use config::JdFlags;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    CheckFailed(String),
}

impl From<coupled_harmonics::mesh::MeshError> for CliError {
    fn from(e: coupled_harmonics::mesh::MeshError) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(Error::NoConvergence { .. })
            | CliError::Core(Error::NearDegenerateSpectrum { .. })
            | CliError::Core(Error::SingularSystem(_))
            | CliError::CheckFailed(_) => 1,
            CliError::Core(_) | CliError::Usage(_) => 2,
        }
    }
}

#[derive(Parser)]
#[command(name = "coupled-harmonics", version, about = "Coupled quasi-harmonic bases for triangle meshes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Meshes are OFF or OBJ paths, or built-in shapes: `@icosphere:LEVEL`,
/// `@ellipsoid:LEVEL:A,B,C`, `@grid:NX:NY:WIDTH:HEIGHT`.
#[derive(Subcommand)]
enum Command {
    /// Laplacian eigenbasis of one mesh
    Eigens {
        #[arg(long)]
        mesh: String,
        /// Number of eigenpairs [default: 30]
        #[arg(long)]
        k_prime: Option<usize>,
        /// Seed for the iterative eigensolver [default: 0]
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Coupled bases of two meshes from corresponding points
    Jd {
        #[arg(long)]
        mesh_x: String,
        #[arg(long)]
        mesh_y: String,
        /// Text file of "i j" pairs (vertex on X, vertex on Y)
        #[arg(long)]
        corr: PathBuf,
        #[command(flatten)]
        jd: JdFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Functional map between two meshes fitted to corresponding functions
    Fmap(commands::FmapArgs),
    /// Low frequencies of one shape combined with the details of another
    Pose(commands::PoseArgs),
    /// Anchored elastic deformation in a spectral basis
    Edit(commands::EditArgs),
    /// Pairwise dissimilarity of a shape collection
    Similarity(commands::SimilarityArgs),
    /// Numerical self-checks
    Verify(verify::VerifyArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let result = match Cli::parse().command {
        Command::Eigens {
            mesh,
            k_prime,
            seed,
            config,
            out,
        } => commands::eigens(&mesh, k_prime, seed, config.as_deref(), &out),
        Command::Jd {
            mesh_x,
            mesh_y,
            corr,
            jd,
            out,
        } => commands::jd(&mesh_x, &mesh_y, &corr, &jd, &out),
        Command::Fmap(args) => commands::fmap(&args),
        Command::Pose(args) => commands::pose(&args),
        Command::Edit(args) => commands::edit(&args),
        Command::Similarity(args) => commands::similarity(&args),
        Command::Verify(args) => verify::run(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
