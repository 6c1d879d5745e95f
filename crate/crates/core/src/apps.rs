//! Pose transfer, simultaneous spectral editing and shape similarity.
//!
//! Embeddings are handled as three scalar functions, one column per
//! coordinate axis.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Point3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jointdiag::{solve_jd, CoupledBases, CouplingSpec, JdProblem, Penalty, SolveOptions};
use crate::laplacian::LaplacianPair;
use crate::mesh::TriMesh;
use crate::spectrum::{Basis, EigenBasis};

/// Vertex coordinates as an n × 3 matrix.
pub fn coordinates(mesh: &TriMesh) -> DMatrix<f64> {
    let v = mesh.vertices();
    DMatrix::from_fn(v.len(), 3, |i, j| v[i][j])
}

/// `mesh` with vertex positions replaced by the rows of `coords`.
pub fn with_coordinates(mesh: &TriMesh, coords: &DMatrix<f64>) -> Result<TriMesh> {
    Error::check_dim("with_coordinates (rows)", mesh.n_vertices(), coords.nrows())?;
    Error::check_dim("with_coordinates (columns)", 3, coords.ncols())?;
    let verts = coords
        .row_iter()
        .map(|r| Point3::new(r[0], r[1], r[2]))
        .collect();
    Ok(mesh.with_vertices(verts)?)
}

/// Low frequencies of X's embedding with high frequencies of Y's:
/// `Z = Ψ_n a + (Y − Ψ_n b)` with `a`, `b` the first `n_low` coefficients of
/// X and Y in their respective bases.
pub fn pose_transfer(
    basis_x: &impl Basis,
    coords_x: &DMatrix<f64>,
    basis_y: &impl Basis,
    coords_y: &DMatrix<f64>,
    n_low: usize,
) -> Result<DMatrix<f64>> {
    for (which, basis) in [("source", basis_x.dim()), ("target", basis_y.dim())] {
        if n_low > basis {
            return Err(Error::Precondition(format!(
                "n_low = {n_low} exceeds the {which} basis size {basis}"
            )));
        }
    }
    if n_low == 0 {
        return Ok(coords_y.clone());
    }
    let a = basis_x.analyze(coords_x)?.rows(0, n_low).into_owned();
    let b = basis_y.analyze(coords_y)?.rows(0, n_low).into_owned();
    let psi = basis_y.phi().columns(0, n_low);
    Ok(coords_y + psi * (a - b))
}

fn default_k_b() -> f64 {
    1.0
}

fn default_k_c() -> f64 {
    0.1
}

/// Anchored deformation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSpec {
    pub anchors: Vec<usize>,
    pub displacements: Vec<[f64; 3]>,
    #[serde(default = "default_k_b")]
    pub k_b: f64,
    #[serde(default = "default_k_c")]
    pub k_c: f64,
    /// Number of basis functions used.
    pub k: usize,
}

impl EditSpec {
    pub fn validate(&self, n: usize, available: usize) -> Result<()> {
        Error::check_dim("EditSpec (displacements)", self.anchors.len(), self.displacements.len())?;
        if self.anchors.is_empty() {
            return Err(Error::InvalidInput("an edit needs at least one anchor".into()));
        }
        let mut seen = vec![false; n];
        for &a in &self.anchors {
            if a >= n {
                return Err(Error::InvalidInput(format!("anchor {a} is outside a mesh of {n} vertices")));
            }
            if std::mem::replace(&mut seen[a], true) {
                return Err(Error::InvalidInput(format!("anchor {a} is listed twice")));
            }
        }
        if !(self.k_b >= 0.0 && self.k_c >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "k_b and k_c must be nonnegative, got {} and {}",
                self.k_b, self.k_c
            )));
        }
        if self.k == 0 || self.k > available {
            return Err(Error::Precondition(format!(
                "edit uses k = {} basis functions but {available} are available",
                self.k
            )));
        }
        if self.displacements.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite displacement".into()));
        }
        Ok(())
    }

    fn targets(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.anchors.len(), 3, |i, j| self.displacements[i][j])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditResult {
    /// Spectral coefficients of the displacement, k × 3.
    pub alpha: DMatrix<f64>,
    /// Displacement field, n × 3.
    pub d: DMatrix<f64>,
    /// Largest anchor mismatch `max |d_anchor − d′|`.
    pub anchor_residual: f64,
}

/// `k_b L² + k_c L` applied to the columns of `x`.
fn elastic_operator(lap: &LaplacianPair, x: &DMatrix<f64>, k_b: f64, k_c: f64) -> Result<DMatrix<f64>> {
    let lx = lap.apply_l_dense(x)?;
    let llx = lap.apply_l_dense(&lx)?;
    Ok(llx * k_b + lx * k_c)
}

fn solve_saddle(top_left: DMatrix<f64>, constraint: DMatrix<f64>, targets: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (m, c) = (top_left.nrows(), constraint.ncols());
    let mut sys = DMatrix::zeros(m + c, m + c);
    sys.view_mut((0, 0), (m, m)).copy_from(&top_left);
    sys.view_mut((0, m), (m, c)).copy_from(&constraint);
    sys.view_mut((m, 0), (c, m)).copy_from(&constraint.transpose());
    let mut rhs = DMatrix::zeros(m + c, 3);
    rhs.view_mut((m, 0), (c, 3)).copy_from(targets);

    let lu = sys.full_piv_lu();
    let u = lu.u();
    let pivots: Vec<f64> = u.diagonal().iter().map(|v| v.abs()).collect();
    let largest = pivots.iter().copied().fold(0.0, f64::max);
    let smallest = pivots.iter().copied().fold(f64::INFINITY, f64::min);
    if !(smallest > 1e-13 * largest) {
        return Err(Error::SingularSystem(format!(
            "edit system of size {} is singular (pivot ratio {:.1e}); add anchors or raise k_b / k_c",
            m + c,
            smallest / largest
        )));
    }
    let sol = lu
        .solve(&rhs)
        .ok_or_else(|| Error::SingularSystem("edit system could not be solved".into()))?;
    Ok(sol.rows(0, m).into_owned())
}

/// Spectral-domain elastic edit in the first `spec.k` columns of `basis`.
pub fn edit_solve(lap: &LaplacianPair, basis: &impl Basis, spec: &EditSpec) -> Result<EditResult> {
    Error::check_dim("edit_solve (basis size)", lap.n(), basis.n())?;
    spec.validate(lap.n(), basis.dim())?;
    let phi = basis.phi().columns(0, spec.k).into_owned();
    let top_left = phi.tr_mul(&elastic_operator(lap, &phi, spec.k_b, spec.k_c)?);
    // Φᵀ M: anchor rows of Φ, transposed
    let constraint = DMatrix::from_fn(spec.k, spec.anchors.len(), |i, j| phi[(spec.anchors[j], i)]);
    let targets = spec.targets();
    let alpha = solve_saddle(top_left, constraint, &targets)?;
    let d = &phi * &alpha;
    let anchor_residual = anchor_mismatch(&d, spec, &targets);
    Ok(EditResult {
        alpha,
        d,
        anchor_residual,
    })
}

/// The same elastic edit solved over all vertices (dense, small meshes).
pub fn edit_solve_spatial(lap: &LaplacianPair, spec: &EditSpec) -> Result<DMatrix<f64>> {
    let n = lap.n();
    spec.validate(n, n)?;
    let top_left = elastic_operator(lap, &DMatrix::identity(n, n), spec.k_b, spec.k_c)?;
    let constraint = DMatrix::from_fn(n, spec.anchors.len(), |i, j| if spec.anchors[j] == i { 1.0 } else { 0.0 });
    solve_saddle(top_left, constraint, &spec.targets())
}

fn anchor_mismatch(d: &DMatrix<f64>, spec: &EditSpec, targets: &DMatrix<f64>) -> f64 {
    spec.anchors
        .iter()
        .enumerate()
        .map(|(i, &a)| (d.row(a) - targets.row(i)).amax())
        .fold(0.0, f64::max)
}

/// Applies coefficients computed in the first coupled basis to the second
/// shape: `d_Y = Ψ̂α`. Returns the displacement and the deformed mesh.
pub fn edit_transfer(coupled: &CoupledBases, alpha: &DMatrix<f64>, mesh_y: &TriMesh) -> Result<(DMatrix<f64>, TriMesh)> {
    Error::check_dim("edit_transfer (mesh)", coupled.psi_hat.nrows(), mesh_y.n_vertices())?;
    if alpha.nrows() > coupled.k() || alpha.ncols() != 3 {
        return Err(Error::InvalidInput(format!(
            "coefficients must be at most {} x 3, got {}x{}",
            coupled.k(),
            alpha.nrows(),
            alpha.ncols()
        )));
    }
    let d = coupled.psi_hat.columns(0, alpha.nrows()) * alpha;
    let moved = with_coordinates(mesh_y, &(coordinates(mesh_y) + &d))?;
    Ok((d, moved))
}

/// Options shared by all pairwise solves of a similarity matrix.
#[derive(Debug, Clone)]
pub struct SimilarityOptions {
    pub k: usize,
    pub k_prime: usize,
    pub penalty: Penalty,
    pub solve: SolveOptions,
}

/// Symmetric dissimilarity matrix: entry `(i, j)` is the mean off/diag ratio
/// of the two coupled bases of shapes `i` and `j`. `couplings` must hold
/// every pair `(i, j)` with `i < j`, pairs given as (vertex on i, vertex on j).
pub fn similarity_matrix(
    bases: &[EigenBasis],
    couplings: &BTreeMap<(usize, usize), CouplingSpec>,
    opts: &SimilarityOptions,
) -> Result<DMatrix<f64>> {
    let m = bases.len();
    let truncated: Vec<EigenBasis> = bases
        .iter()
        .map(|b| b.truncated(opts.k_prime))
        .collect::<Result<_>>()?;
    let mut jobs = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            let spec = couplings
                .get(&(i, j))
                .ok_or_else(|| Error::InvalidInput(format!("no coupling given for shapes {i} and {j}")))?;
            jobs.push((i, j, spec));
        }
    }
    let ratios: Vec<(usize, usize, f64)> = jobs
        .par_iter()
        .map(|&(i, j, spec)| -> Result<(usize, usize, f64)> {
            let prob = JdProblem::new(&truncated[i], &truncated[j], spec, opts.k, opts.penalty)?;
            let out = solve_jd(&prob, &opts.solve)?;
            Ok((i, j, out.mean_ratio()))
        })
        .collect::<Result<_>>()?;
    let mut s = DMatrix::zeros(m, m);
    for (i, j, r) in ratios {
        s[(i, j)] = r;
        s[(j, i)] = r;
    }
    Ok(s)
}
