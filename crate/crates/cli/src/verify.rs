use std::path::PathBuf;

use clap::{Args, ValueEnum};
use coupled_harmonics::analysis::{
    gradient_check, laplacian_diff_bound, perturbation_convergence, AlphaForm, PerturbationParams,
};
use coupled_harmonics::io::write_atomic;
use coupled_harmonics::jointdiag::{CouplingSpec, JdProblem, Mu, Penalty, Weights};
use coupled_harmonics::mesh::shapes;
use coupled_harmonics::spectrum::{eigenbasis_with, EigenOptions};
use coupled_harmonics::{EigenBasis, LaplacianPair};
use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::FileConfig;
use crate::CliError;

pub const GRADIENT_TOL: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    /// Analytic objective gradient against central finite differences
    Gradients,
    /// Laplacian-difference bound and first-order eigenvector convergence
    Perturbation,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum)]
    suite: Suite,
    /// Base seed of the random instances [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Number of random instances [default: 20]
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write the JSON report to this file
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Report {
    suite: Suite,
    seed: u64,
    trials: usize,
    passed: bool,
    #[serde(flatten)]
    details: Details,
}

#[derive(Serialize)]
#[serde(untagged)]
enum Details {
    Gradients {
        step: f64,
        tolerance: f64,
        max_relative_error: f64,
        per_trial: Vec<f64>,
    },
    Perturbation {
        max_norm_to_bound: f64,
        orders: Vec<f64>,
        orders_halved_coefficients: Vec<f64>,
    },
}

pub fn run(args: &VerifyArgs) -> Result<(), CliError> {
    let file = FileConfig::load(args.config.as_deref())?;
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let trials = args.trials.or(file.trials).unwrap_or(20);
    if trials == 0 {
        return Err(CliError::Usage("trials must be positive".into()));
    }
    let (passed, details) = match args.suite {
        Suite::Gradients => gradients(seed, trials)?,
        Suite::Perturbation => perturbation(seed, trials)?,
    };
    let report = Report {
        suite: args.suite,
        seed,
        trials,
        passed,
        details,
    };
    let mut text = serde_json::to_string_pretty(&report).expect("reports serialize");
    text.push('\n');
    print!("{text}");
    if let Some(path) = &args.out {
        write_atomic(path, &text)?;
    }
    if passed {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!("{:?} suite failed", args.suite)))
    }
}

fn random_basis(rng: &mut ChaCha8Rng, n: usize, kp: usize) -> Result<EigenBasis, CliError> {
    let phi = DMatrix::from_fn(n, kp, |_, _| rng.random_range(-1.0..1.0));
    let mut lambda: Vec<f64> = (0..kp).map(|_| rng.random_range(0.0..40.0)).collect();
    lambda.sort_by(f64::total_cmp);
    let mass = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    Ok(EigenBasis::from_parts(phi, DVector::from_vec(lambda), mass)?)
}

fn random_stiefel(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0)).qr().q()
}

/// Random problems with `k′ ∈ [6, 30]`, `k ∈ [4, min(k′, 20)]`, both penalties.
fn gradients(seed: u64, trials: usize) -> Result<(bool, Details), CliError> {
    let n = 60;
    let mut per_trial = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
        let kp = rng.random_range(6..=30);
        let k = rng.random_range(4..=kp.min(20));
        let bx = random_basis(&mut rng, n, kp)?;
        let by = random_basis(&mut rng, n, kp)?;
        let l = rng.random_range(5..=15);
        let pairs = (0..l).map(|_| (rng.random_range(0..n), rng.random_range(0..n))).collect();
        let weights = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        let spec = CouplingSpec::new(pairs)
            .with_mu(Mu::Fixed(rng.random_range(0.1..10.0)))
            .with_weights(Weights::Custom(weights));
        let penalty = if t % 2 == 0 { Penalty::DiagDifference } else { Penalty::OffSquares };
        let prob = JdProblem::new(&bx, &by, &spec, k, penalty)?;
        let a = random_stiefel(&mut rng, kp, k);
        let b = random_stiefel(&mut rng, kp, k);
        per_trial.push(gradient_check(&prob, &a, &b, FD_STEP)?);
    }
    let worst = per_trial.iter().copied().fold(0.0, f64::max);
    Ok((
        worst <= GRADIENT_TOL,
        Details::Gradients {
            step: FD_STEP,
            tolerance: GRADIENT_TOL,
            max_relative_error: worst,
            per_trial,
        },
    ))
}

fn perturbation(seed: u64, trials: usize) -> Result<(bool, Details), CliError> {
    let mesh = shapes::icosphere(2);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
        let amount = rng.random_range(0.001..0.03);
        let verts = mesh
            .vertices()
            .iter()
            .map(|p| p + Vector3::from_fn(|_, _| rng.random_range(-amount..amount)))
            .collect();
        let moved = mesh.with_vertices(verts)?;
        let p = PerturbationParams::from_meshes(&mesh, &moved)?;
        worst = worst.max(p.r_norm / laplacian_diff_bound(&p));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = shapes::grid(7, 6, 1.0, 0.73);
    let verts = grid
        .vertices()
        .iter()
        .map(|p| p + Vector3::from_fn(|_, _| rng.random_range(-0.02..0.02)))
        .collect();
    let lap = LaplacianPair::assemble(&grid.with_vertices(verts)?)?;
    let n = lap.n();
    let full = eigenbasis_with(&lap, n, &EigenOptions::default())?;
    let lambda = full.lambda();
    let gap = (1..n).map(|i| lambda[i] - lambda[i - 1]).fold(f64::INFINITY, f64::min);
    let noise = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let r = (&noise + noise.transpose()) * 0.5;
    let eps0 = 1e-3 * gap;
    let eps = [eps0, eps0 / 2.0, eps0 / 4.0, eps0 / 8.0];
    let indices = [1, 2, 3, 6];
    let classical = perturbation_convergence(&lap, &r, &eps, &indices, gap, AlphaForm::Classical)?;
    let halved = perturbation_convergence(&lap, &r, &eps, &indices, gap, AlphaForm::Halved)?;
    let orders_ok = classical.orders.iter().all(|o| (o - 2.0).abs() <= 0.5);
    Ok((
        worst <= 1.0 && orders_ok,
        Details::Perturbation {
            max_norm_to_bound: worst,
            orders: classical.orders,
            orders_halved_coefficients: halved.orders,
        },
    ))
}
