//! Generalized eigenbases of `W φ = λ D φ`, analysis/synthesis in a basis,
//! and off-diagonality measures.
//!
//! The generalized problem is reduced to the symmetric matrix
//! `S = D^{-1/2} W D^{-1/2}` (with `φ = D^{-1/2} u`), solved densely for
//! small meshes and with block shift-invert Lanczos otherwise.

pub mod lanczos;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::laplacian::LaplacianPair;

/// Functions on a mesh expressed as columns, with the mass matrix that
/// defines their inner product.
pub trait Basis {
    fn phi(&self) -> &DMatrix<f64>;
    fn mass(&self) -> &[f64];

    fn n(&self) -> usize {
        self.phi().nrows()
    }

    fn dim(&self) -> usize {
        self.phi().ncols()
    }

    /// Coefficients `Φᵀ D F` of the columns of `f` (n × c), as dim × c.
    fn analyze(&self, f: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Error::check_dim("analyze", self.n(), f.nrows())?;
        let mut df = f.clone();
        for (i, d) in self.mass().iter().enumerate() {
            df.row_mut(i).scale_mut(*d);
        }
        Ok(self.phi().tr_mul(&df))
    }

    /// `Φ a` for coefficient columns `a` (dim × c).
    fn synthesize(&self, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Error::check_dim("synthesize", self.dim(), a.nrows())?;
        Ok(self.phi() * a)
    }
}

/// Borrowed basis: any column set plus its mass diagonal.
#[derive(Debug, Clone, Copy)]
pub struct BasisRef<'a> {
    pub phi: &'a DMatrix<f64>,
    pub mass: &'a [f64],
}

impl Basis for BasisRef<'_> {
    fn phi(&self) -> &DMatrix<f64> {
        self.phi
    }
    fn mass(&self) -> &[f64] {
        self.mass
    }
}

/// First `k′` generalized eigenpairs, D-orthonormal, eigenvalues ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenBasis {
    phi: DMatrix<f64>,
    lambda: DVector<f64>,
    mass: Vec<f64>,
}

impl Basis for EigenBasis {
    fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }
    fn mass(&self) -> &[f64] {
        &self.mass
    }
}

impl EigenBasis {
    /// Wraps precomputed eigenpairs. Columns are sign-normalized.
    pub fn from_parts(mut phi: DMatrix<f64>, lambda: DVector<f64>, mass: Vec<f64>) -> Result<Self> {
        Error::check_dim("EigenBasis::from_parts (eigenvalues)", phi.ncols(), lambda.len())?;
        Error::check_dim("EigenBasis::from_parts (mass)", phi.nrows(), mass.len())?;
        normalize_signs(&mut phi);
        Ok(EigenBasis { phi, lambda, mass })
    }

    pub fn lambda(&self) -> &DVector<f64> {
        &self.lambda
    }

    pub fn k_prime(&self) -> usize {
        self.phi.ncols()
    }

    /// The first `k` pairs.
    pub fn truncated(&self, k: usize) -> Result<EigenBasis> {
        self.columns(0, k)
    }

    /// Pairs `start .. start + len`.
    pub fn columns(&self, start: usize, len: usize) -> Result<EigenBasis> {
        if start + len > self.k_prime() || len == 0 {
            return Err(Error::Precondition(format!(
                "requested eigenpairs {start}..{} of a basis with {}",
                start + len,
                self.k_prime()
            )));
        }
        Ok(EigenBasis {
            phi: self.phi.columns(start, len).into_owned(),
            lambda: self.lambda.rows(start, len).into_owned(),
            mass: self.mass.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EigenOptions {
    /// Largest vertex count solved with the dense symmetric solver.
    pub dense_max_n: usize,
    /// Lanczos residual tolerance (relative).
    pub tol: f64,
    pub block: usize,
    pub seed: u64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        EigenOptions {
            dense_max_n: 800,
            tol: 1e-10,
            block: 8,
            seed: 0x5eed,
        }
    }
}

pub fn eigenbasis(lap: &LaplacianPair, k_prime: usize) -> Result<EigenBasis> {
    eigenbasis_with(lap, k_prime, &EigenOptions::default())
}

pub fn eigenbasis_with(lap: &LaplacianPair, k_prime: usize, opts: &EigenOptions) -> Result<EigenBasis> {
    let n = lap.n();
    if k_prime == 0 || k_prime > n {
        return Err(Error::Precondition(format!("k' must be in 1..={n}, got {k_prime}")));
    }
    let inv_sqrt: Vec<f64> = lap.mass().iter().map(|d| 1.0 / d.sqrt()).collect();

    let (lambda, u) = if n <= opts.dense_max_n {
        let mut s = lap.dense_w();
        for i in 0..n {
            for j in 0..n {
                s[(i, j)] *= inv_sqrt[i] * inv_sqrt[j];
            }
        }
        let eig = SymmetricEigen::new(s);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let lambda = DVector::from_fn(k_prime, |i, _| eig.eigenvalues[idx[i]]);
        let u = DMatrix::from_fn(n, k_prime, |r, c| eig.eigenvectors[(r, idx[c])]);
        (lambda, u)
    } else {
        let s = lap.stiffness().scaled(&inv_sqrt, &inv_sqrt, &vec![0.0; n]);
        let area: f64 = lap.mass().iter().sum::<f64>();
        let lopts = lanczos::LanczosOptions {
            block: opts.block,
            tol: opts.tol,
            seed: opts.seed,
            // roughly the scale of the first nonzero eigenvalue
            shift: 1.0 / area,
        };
        lanczos::lowest_eigenpairs(&s, k_prime, &lopts)?
    };

    let mut phi = u;
    for (i, w) in inv_sqrt.iter().enumerate() {
        phi.row_mut(i).scale_mut(*w);
    }
    // the kernel eigenvalue may come out as -1e-16
    let lambda = lambda.map(|l| if l < 0.0 && l > -1e-12 * lambda_scale(lap) { 0.0 } else { l });
    EigenBasis::from_parts(phi, lambda, lap.mass().to_vec())
}

fn lambda_scale(lap: &LaplacianPair) -> f64 {
    (0..lap.n())
        .map(|i| lap.stiffness().get(i, i) / lap.mass()[i])
        .fold(0.0, f64::max)
}

/// Relative tolerance under which two entry magnitudes count as tied.
pub const SIGN_TIE_TOL: f64 = 1e-8;

/// Flips each column so its largest-magnitude entry is positive. Entries
/// within `SIGN_TIE_TOL` of the maximum are ties; the first one decides.
pub fn normalize_signs(phi: &mut DMatrix<f64>) {
    for mut col in phi.column_iter_mut() {
        let max = col.amax();
        let Some(best) = col.iter().position(|v| v.abs() >= max * (1.0 - SIGN_TIE_TOL)) else {
            continue;
        };
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

/// Fourier coefficients `aᵢ = φᵢᵀ D f`.
pub fn fourier_coeffs(basis: &impl Basis, f: &[f64]) -> Result<DVector<f64>> {
    let a = basis.analyze(&DMatrix::from_column_slice(f.len(), 1, f))?;
    Ok(a.column(0).into_owned())
}

/// `Σ aᵢ φᵢ`.
pub fn synthesize(basis: &impl Basis, coeffs: &[f64]) -> Result<DVector<f64>> {
    let f = basis.synthesize(&DMatrix::from_column_slice(coeffs.len(), 1, coeffs))?;
    Ok(f.column(0).into_owned())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffNorms {
    pub diag_norm: f64,
    pub offdiag_norm: f64,
    /// `offdiag_norm / diag_norm`; 0 when there is no off-diagonal mass,
    /// `+∞` when the diagonal is zero but the off-diagonal is not.
    pub ratio: f64,
}

pub fn off_norms(m: &DMatrix<f64>) -> Result<OffNorms> {
    if !m.is_square() {
        return Err(Error::InvalidInput(format!(
            "off_norms needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let mut diag2 = 0.0;
    let mut off2 = 0.0;
    for ((i, j), v) in m.iter().enumerate().map(|(p, v)| ((p % m.nrows(), p / m.nrows()), v)) {
        if i == j {
            diag2 += v * v;
        } else {
            off2 += v * v;
        }
    }
    let (diag_norm, offdiag_norm) = (diag2.sqrt(), off2.sqrt());
    let ratio = if offdiag_norm == 0.0 {
        0.0
    } else if diag_norm == 0.0 {
        f64::INFINITY
    } else {
        offdiag_norm / diag_norm
    };
    Ok(OffNorms {
        diag_norm,
        offdiag_norm,
        ratio,
    })
}

/// `ΦᵀWΦ` for any basis, using the assembled stiffness matrix.
pub fn stiffness_in_basis(lap: &LaplacianPair, phi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Error::check_dim("stiffness_in_basis", lap.n(), phi.nrows())?;
    Ok(phi.tr_mul(&lap.stiffness().mul_dense(phi)))
}
