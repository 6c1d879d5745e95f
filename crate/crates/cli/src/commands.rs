use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use coupled_harmonics::apps::{
    coordinates, edit_solve, edit_transfer, pose_transfer, similarity_matrix, with_coordinates, EditSpec,
    SimilarityOptions,
};
use coupled_harmonics::funcmap::{fit_diag, fit_full, pointwise_recover, FunctionConstraints, FunctionalMap};
use coupled_harmonics::io::{
    matrix_to_text, pairs_to_text, parse_matrix, parse_pairs, parse_regions, read_text, vector_to_text, write_atomic,
};
use coupled_harmonics::jointdiag::{solve_jd, solve_jd_banded, CoupledBases, CouplingSpec, JdProblem};
use coupled_harmonics::mesh::{io::load_mesh, io::to_off, shapes};
use coupled_harmonics::spectrum::{eigenbasis_with, off_norms, EigenOptions};
use coupled_harmonics::{Basis, EigenBasis, LaplacianPair, TriMesh};
use log::{info, warn};
use serde::Serialize;

use crate::config::{FileConfig, JdFlags, JdSettings, MuArg};
use crate::CliError;

pub fn load_mesh_arg(arg: &str) -> Result<TriMesh, CliError> {
    let Some(shape) = arg.strip_prefix('@') else {
        return Ok(load_mesh(arg)?);
    };
    let bad = || CliError::Usage(format!("cannot read built-in shape '{arg}'"));
    let parts: Vec<&str> = shape.split(':').collect();
    let num = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite() && *v > 0.0);
    match parts.as_slice() {
        ["icosphere", level] => Ok(shapes::icosphere(level.parse().map_err(|_| bad())?)),
        ["ellipsoid", level, axes] => {
            let axes: Vec<f64> = axes.split(',').map(num).collect::<Option<_>>().ok_or_else(bad)?;
            let axes: [f64; 3] = axes.try_into().map_err(|_| bad())?;
            Ok(shapes::ellipsoid(level.parse().map_err(|_| bad())?, axes))
        }
        ["grid", nx, ny, w, h] => {
            let (nx, ny): (usize, usize) = (nx.parse().map_err(|_| bad())?, ny.parse().map_err(|_| bad())?);
            if nx < 2 || ny < 2 {
                return Err(bad());
            }
            Ok(shapes::grid(nx, ny, num(w).ok_or_else(bad)?, num(h).ok_or_else(bad)?))
        }
        _ => Err(bad()),
    }
}

fn prepare_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))
}

fn write(dir: &Path, name: &str, text: &str) -> Result<(), CliError> {
    Ok(write_atomic(dir.join(name), text)?)
}

fn write_summary(dir: &Path, summary: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(summary).expect("summaries serialize");
    text.push('\n');
    write(dir, "summary.json", &text)
}

fn basis_of(mesh: &TriMesh, k_prime: usize, seed: u64) -> Result<EigenBasis, CliError> {
    let lap = LaplacianPair::assemble(mesh)?;
    let opts = EigenOptions {
        seed,
        ..Default::default()
    };
    Ok(eigenbasis_with(&lap, k_prime, &opts)?)
}

fn couple(x: &TriMesh, y: &TriMesh, pairs: Vec<(usize, usize)>, s: &JdSettings) -> Result<CoupledBases, CliError> {
    let bx = basis_of(x, s.k_prime, s.seed)?;
    let by = basis_of(y, s.k_prime, s.seed)?;
    let spec = CouplingSpec::new(pairs).with_mu(s.mu.into()).with_weights(s.weights.into());
    let prob = JdProblem::new(&bx, &by, &spec, s.k, s.penalty.into())?;
    let out = match s.band {
        Some(band) => solve_jd_banded(&prob, band, &s.solve_options())?,
        None => solve_jd(&prob, &s.solve_options())?,
    };
    for w in &out.warnings {
        warn!("{w}");
    }
    info!(
        "coupled in {} iterations, objective {:.6e}, ratios {:.3e} / {:.3e}",
        out.iterations,
        out.objective(),
        out.ratio_x,
        out.ratio_y
    );
    Ok(out)
}

fn read_pairs(path: &Path) -> Result<Vec<(usize, usize)>, CliError> {
    Ok(parse_pairs(&read_text(path)?)?)
}

#[derive(Serialize)]
struct EigensSummary<'a> {
    command: &'static str,
    mesh: &'a str,
    k_prime: usize,
    seed: u64,
    n_vertices: usize,
    eigenvalues: Vec<f64>,
}

pub fn eigens(
    mesh_arg: &str,
    k_prime: Option<usize>,
    seed: Option<u64>,
    config: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let file = FileConfig::load(config)?;
    let k_prime = k_prime.or(file.k_prime).unwrap_or(30);
    let seed = seed.or(file.seed).unwrap_or(0);
    let mesh = load_mesh_arg(mesh_arg)?;
    let basis = basis_of(&mesh, k_prime, seed)?;
    prepare_out(out)?;
    write(out, "phi.txt", &matrix_to_text(basis.phi()))?;
    write(out, "lambda.txt", &vector_to_text(basis.lambda()))?;
    write_summary(
        out,
        &EigensSummary {
            command: "eigens",
            mesh: mesh_arg,
            k_prime,
            seed,
            n_vertices: mesh.n_vertices(),
            eigenvalues: basis.lambda().iter().copied().collect(),
        },
    )
}

#[derive(Serialize)]
struct JdSummary<'a> {
    command: &'static str,
    mesh_x: &'a str,
    mesh_y: &'a str,
    correspondence: String,
    config: &'a JdSettings,
    mode: &'static str,
    mu: f64,
    objective: f64,
    iterations: usize,
    converged: bool,
    coupling_residual: f64,
    ratio_x: f64,
    ratio_y: f64,
    warnings: &'a [String],
}

pub fn jd(mesh_x: &str, mesh_y: &str, corr: &Path, flags: &JdFlags, out: &Path) -> Result<(), CliError> {
    let settings = JdSettings::resolve(flags, &FileConfig::load(flags.config.as_deref())?)?;
    let x = load_mesh_arg(mesh_x)?;
    let y = load_mesh_arg(mesh_y)?;
    let pairs = read_pairs(corr)?;
    let coupled = couple(&x, &y, pairs, &settings)?;

    prepare_out(out)?;
    write(out, "A.txt", &matrix_to_text(&coupled.a))?;
    write(out, "B.txt", &matrix_to_text(&coupled.b))?;
    write(out, "phi_hat.txt", &matrix_to_text(&coupled.phi_hat))?;
    write(out, "psi_hat.txt", &matrix_to_text(&coupled.psi_hat))?;
    let mut trace = String::from("iter,objective\n");
    for (i, f) in coupled.objective_trace.iter().enumerate() {
        trace.push_str(&format!("{i},{f:e}\n"));
    }
    write(out, "trace.csv", &trace)?;
    write_summary(
        out,
        &JdSummary {
            command: "jd",
            mesh_x,
            mesh_y,
            correspondence: corr.display().to_string(),
            config: &settings,
            mode: if settings.mu == MuArg::Fixed(0.0) { "decoupled" } else { "coupled" },
            mu: coupled.mu,
            objective: coupled.objective(),
            iterations: coupled.iterations,
            converged: coupled.converged,
            coupling_residual: coupled.coupling_residual,
            ratio_x: coupled.ratio_x,
            ratio_y: coupled.ratio_y,
            warnings: &coupled.warnings,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum BasisArg {
    Laplacian,
    Coupled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum MapArg {
    Full,
    Diagonal,
}

#[derive(Debug, Args)]
pub struct FmapArgs {
    #[arg(long)]
    mesh_x: String,
    #[arg(long)]
    mesh_y: String,
    /// Vertex-index regions on X, one region per line
    #[arg(long, requires = "regions_y", conflicts_with = "functions_x")]
    regions_x: Option<PathBuf>,
    #[arg(long, requires = "regions_x")]
    regions_y: Option<PathBuf>,
    /// Constraint functions on X as a text matrix (n_X x p)
    #[arg(long, requires = "functions_y")]
    functions_x: Option<PathBuf>,
    #[arg(long, requires = "functions_x")]
    functions_y: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "laplacian")]
    basis: BasisArg,
    /// Map structure [default: full for Laplacian bases, diagonal for coupled]
    #[arg(long, value_enum)]
    map: Option<MapArg>,
    /// Correspondence pairs used to couple the bases
    #[arg(long)]
    corr: Option<PathBuf>,
    /// Refinement rounds of the pointwise recovery [default: 5]
    #[arg(long)]
    iters: Option<usize>,
    #[command(flatten)]
    jd: JdFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct FmapSummary<'a> {
    command: &'static str,
    mesh_x: &'a str,
    mesh_y: &'a str,
    basis: BasisArg,
    map: MapArg,
    iters: usize,
    config: &'a JdSettings,
    constraints: usize,
    fit_residual: f64,
    off_diag_ratio: f64,
    mean_match_distance: f64,
    warnings: Vec<String>,
}

pub fn fmap(args: &FmapArgs) -> Result<(), CliError> {
    let file = FileConfig::load(args.jd.config.as_deref())?;
    let settings = JdSettings::resolve(&args.jd, &file)?;
    let iters = args.iters.or(file.iters).unwrap_or(5);
    let x = load_mesh_arg(&args.mesh_x)?;
    let y = load_mesh_arg(&args.mesh_y)?;
    let (nx, ny) = (x.n_vertices(), y.n_vertices());
    let cons = match (&args.regions_x, &args.regions_y, &args.functions_x, &args.functions_y) {
        (Some(rx), Some(ry), _, _) => FunctionConstraints::from_regions(
            &parse_regions(&read_text(rx)?)?,
            &parse_regions(&read_text(ry)?)?,
            nx,
            ny,
        )?,
        (_, _, Some(fx), Some(fy)) => {
            FunctionConstraints::new(parse_matrix(&read_text(fx)?)?, parse_matrix(&read_text(fy)?)?)?
        }
        _ => {
            return Err(CliError::Usage(
                "give either --regions-x/--regions-y or --functions-x/--functions-y".into(),
            ))
        }
    };
    let map_kind = args.map.unwrap_or(match args.basis {
        BasisArg::Laplacian => MapArg::Full,
        BasisArg::Coupled => MapArg::Diagonal,
    });
    let k = settings.k;
    let (map, matches) = match args.basis {
        BasisArg::Laplacian => {
            let bx = basis_of(&x, settings.k_prime, settings.seed)?;
            let by = basis_of(&y, settings.k_prime, settings.seed)?;
            let map = fit_map(map_kind, &cons, &bx, &by, k)?;
            let matches = pointwise_recover(&map, &bx, &by, iters)?;
            (map, matches)
        }
        BasisArg::Coupled => {
            let corr = args
                .corr
                .as_deref()
                .ok_or_else(|| CliError::Usage("--basis coupled needs --corr".into()))?;
            let coupled = couple(&x, &y, read_pairs(corr)?, &settings)?;
            let (bx, by) = (coupled.basis_x(), coupled.basis_y());
            let map = fit_map(map_kind, &cons, &bx, &by, k)?;
            let matches = pointwise_recover(&map, &bx, &by, iters)?;
            (map, matches)
        }
    };
    for w in &map.warnings {
        warn!("{w}");
    }
    let c = map.to_dense();
    let pairs: Vec<(usize, usize)> = matches.matches.iter().enumerate().map(|(j, &i)| (i, j)).collect();
    prepare_out(&args.out)?;
    write(&args.out, "C.txt", &matrix_to_text(&c))?;
    write(&args.out, "matches.txt", &pairs_to_text(&pairs))?;
    write_summary(
        &args.out,
        &FmapSummary {
            command: "fmap",
            mesh_x: &args.mesh_x,
            mesh_y: &args.mesh_y,
            basis: args.basis,
            map: map_kind,
            iters,
            config: &settings,
            constraints: cons.p(),
            fit_residual: map.residual,
            off_diag_ratio: off_norms(&c)?.ratio,
            mean_match_distance: matches.distances.iter().sum::<f64>() / matches.distances.len() as f64,
            warnings: map.warnings.clone(),
        },
    )
}

fn fit_map(
    kind: MapArg,
    cons: &FunctionConstraints,
    bx: &impl Basis,
    by: &impl Basis,
    k: usize,
) -> Result<FunctionalMap, CliError> {
    Ok(match kind {
        MapArg::Full => fit_full(cons, bx, by, k)?,
        MapArg::Diagonal => fit_diag(cons, bx, by, k)?,
    })
}

#[derive(Debug, Args)]
pub struct PoseArgs {
    /// Shape whose low frequencies (pose) are transferred
    #[arg(long)]
    source: String,
    /// Shape whose high frequencies (details) are kept
    #[arg(long)]
    target: String,
    /// Number of low-frequency functions taken from the source [default: 6]
    #[arg(long)]
    n_low: Option<usize>,
    /// Correspondence pairs (source vertex, target vertex); couples the bases when given
    #[arg(long)]
    corr: Option<PathBuf>,
    #[command(flatten)]
    jd: JdFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct PoseSummary<'a> {
    command: &'static str,
    source: &'a str,
    target: &'a str,
    n_low: usize,
    basis: BasisArg,
    config: &'a JdSettings,
    max_offset_from_target: f64,
}

pub fn pose(args: &PoseArgs) -> Result<(), CliError> {
    let file = FileConfig::load(args.jd.config.as_deref())?;
    let settings = JdSettings::resolve(&args.jd, &file)?;
    let n_low = args.n_low.or(file.n_low).unwrap_or(6);
    let x = load_mesh_arg(&args.source)?;
    let y = load_mesh_arg(&args.target)?;
    let (cx, cy) = (coordinates(&x), coordinates(&y));
    let (z, basis) = match &args.corr {
        Some(corr) => {
            let coupled = couple(&x, &y, read_pairs(corr)?, &settings)?;
            let z = pose_transfer(&coupled.basis_x(), &cx, &coupled.basis_y(), &cy, n_low)?;
            (z, BasisArg::Coupled)
        }
        None => {
            let bx = basis_of(&x, settings.k, settings.seed)?;
            let by = basis_of(&y, settings.k, settings.seed)?;
            (pose_transfer(&bx, &cx, &by, &cy, n_low)?, BasisArg::Laplacian)
        }
    };
    let posed = with_coordinates(&y, &z)?;
    prepare_out(&args.out)?;
    write(&args.out, "posed.off", &to_off(&posed))?;
    write_summary(
        &args.out,
        &PoseSummary {
            command: "pose",
            source: &args.source,
            target: &args.target,
            n_low,
            basis,
            config: &settings,
            max_offset_from_target: (&z - &cy).amax(),
        },
    )
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    mesh: String,
    /// JSON edit request: anchors, displacements, k_b, k_c, k
    #[arg(long)]
    spec: PathBuf,
    /// Second shape that receives the same edit through coupled bases
    #[arg(long, requires = "corr")]
    transfer_to: Option<String>,
    /// Correspondence pairs (mesh vertex, transfer-to vertex)
    #[arg(long, requires = "transfer_to")]
    corr: Option<PathBuf>,
    #[command(flatten)]
    jd: JdFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct EditSummary<'a> {
    command: &'static str,
    mesh: &'a str,
    edit: &'a EditSpec,
    transfer_to: Option<&'a str>,
    config: Option<&'a JdSettings>,
    anchor_residual: f64,
    max_displacement: f64,
    max_transferred_displacement: Option<f64>,
}

pub fn edit(args: &EditArgs) -> Result<(), CliError> {
    let spec: EditSpec = serde_json::from_str(&read_text(&args.spec)?)
        .map_err(|e| CliError::Usage(format!("{}: {e}", args.spec.display())))?;
    let x = load_mesh_arg(&args.mesh)?;
    let lap = LaplacianPair::assemble(&x)?;
    prepare_out(&args.out)?;

    let (result, transferred, settings) = match (&args.transfer_to, &args.corr) {
        (Some(target), Some(corr)) => {
            let settings = JdSettings::resolve(&args.jd, &FileConfig::load(args.jd.config.as_deref())?)?;
            let y = load_mesh_arg(target)?;
            let coupled = couple(&x, &y, read_pairs(corr)?, &settings)?;
            let result = edit_solve(&lap, &coupled.basis_x(), &spec)?;
            let (d_y, moved) = edit_transfer(&coupled, &result.alpha, &y)?;
            write(&args.out, "transferred.off", &to_off(&moved))?;
            (result, Some(d_y.amax()), Some(settings))
        }
        _ => {
            let seed = args.jd.seed.unwrap_or(0);
            let basis = basis_of(&x, spec.k.min(x.n_vertices()).max(1), seed)?;
            (edit_solve(&lap, &basis, &spec)?, None, None)
        }
    };
    let edited = with_coordinates(&x, &(coordinates(&x) + &result.d))?;
    write(&args.out, "edited.off", &to_off(&edited))?;
    write(&args.out, "displacement.txt", &matrix_to_text(&result.d))?;
    write(&args.out, "alpha.txt", &matrix_to_text(&result.alpha))?;
    write_summary(
        &args.out,
        &EditSummary {
            command: "edit",
            mesh: &args.mesh,
            edit: &spec,
            transfer_to: args.transfer_to.as_deref(),
            config: settings.as_ref(),
            anchor_residual: result.anchor_residual,
            max_displacement: result.d.amax(),
            max_transferred_displacement: transferred,
        },
    )
}

#[derive(Debug, Args)]
pub struct SimilarityArgs {
    /// Shapes of the collection, in order (repeat the flag)
    #[arg(long = "mesh", required = true, num_args = 1)]
    meshes: Vec<String>,
    /// Directory holding "I-J.txt" pair files for every I < J
    #[arg(long)]
    corr_dir: PathBuf,
    #[command(flatten)]
    jd: JdFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct SimilaritySummary<'a> {
    command: &'static str,
    meshes: &'a [String],
    config: &'a JdSettings,
    dissimilarity: Vec<Vec<f64>>,
}

pub fn similarity(args: &SimilarityArgs) -> Result<(), CliError> {
    let settings = JdSettings::resolve(&args.jd, &FileConfig::load(args.jd.config.as_deref())?)?;
    if args.meshes.len() < 2 {
        return Err(CliError::Usage("similarity needs at least two meshes".into()));
    }
    if settings.band.is_some() {
        return Err(CliError::Usage("similarity does not support banded solves".into()));
    }
    let bases = args
        .meshes
        .iter()
        .map(|m| basis_of(&load_mesh_arg(m)?, settings.k_prime, settings.seed))
        .collect::<Result<Vec<_>, _>>()?;
    let mut couplings = BTreeMap::new();
    for i in 0..bases.len() {
        for j in i + 1..bases.len() {
            let pairs = read_pairs(&args.corr_dir.join(format!("{i}-{j}.txt")))?;
            let spec = CouplingSpec::new(pairs)
                .with_mu(settings.mu.into())
                .with_weights(settings.weights.into());
            couplings.insert((i, j), spec);
        }
    }
    let opts = SimilarityOptions {
        k: settings.k,
        k_prime: settings.k_prime,
        penalty: settings.penalty.into(),
        solve: settings.solve_options(),
    };
    let s = similarity_matrix(&bases, &couplings, &opts)?;
    prepare_out(&args.out)?;
    write(&args.out, "similarity.txt", &matrix_to_text(&s))?;
    write_summary(
        &args.out,
        &SimilaritySummary {
            command: "similarity",
            meshes: &args.meshes,
            config: &settings,
            dissimilarity: s.row_iter().map(|r| r.iter().copied().collect()).collect(),
        },
    )
}
