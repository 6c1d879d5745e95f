//! Cotangent stiffness matrix `W`, lumped mass matrix `D` and `L = D⁻¹W`.
//!
//! The edge weight of `(i, j)` is `w_ij = (cot α_ij + cot β_ij) / 2`, summed
//! over the one or two faces that share the edge. `W` stores `-w_ij` off the
//! diagonal and `Σ_k w_ik` on it, so `W·1 = 0` and `fᵀWf` is the Dirichlet
//! energy; eigenvalues of `(W, D)` are nonnegative. `D = diag(s_i) / 3`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::mesh::TriMesh;
use crate::sparse::CsrMatrix;

/// Bound applied to each cotangent when clamping is enabled.
pub const COT_CLAMP: f64 = 1e6;

#[derive(Debug, Clone, Copy, Default)]
pub struct AssembleOptions {
    /// Clamp each corner cotangent to `[-COT_CLAMP, COT_CLAMP]`.
    pub clamp_cotangents: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianPair {
    stiffness: CsrMatrix,
    mass: Vec<f64>,
}

impl LaplacianPair {
    pub fn assemble(mesh: &TriMesh) -> Result<Self> {
        Self::assemble_with(mesh, AssembleOptions::default())
    }

    pub fn assemble_with(mesh: &TriMesh, opts: AssembleOptions) -> Result<Self> {
        let n = mesh.n_vertices();
        let cots = mesh.corner_cotangents()?;
        let mut weights: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        for (f, c) in mesh.faces().iter().zip(&cots) {
            for corner in 0..3 {
                let mut cot = c[corner];
                if opts.clamp_cotangents {
                    cot = cot.clamp(-COT_CLAMP, COT_CLAMP);
                }
                let (i, j) = (f[(corner + 1) % 3], f[(corner + 2) % 3]);
                *weights[i].entry(j).or_insert(0.0) += 0.5 * cot;
                *weights[j].entry(i).or_insert(0.0) += 0.5 * cot;
            }
        }
        let rows = weights
            .into_iter()
            .enumerate()
            .map(|(i, row)| {
                let diag: f64 = row.values().sum();
                let mut out: BTreeMap<usize, f64> = row.into_iter().map(|(j, w)| (j, -w)).collect();
                out.insert(i, diag);
                out
            })
            .collect();
        let mass = mesh.vertex_areas().0.into_iter().map(|s| s / 3.0).collect();
        Ok(LaplacianPair {
            stiffness: CsrMatrix::from_rows(rows),
            mass,
        })
    }

    pub fn n(&self) -> usize {
        self.mass.len()
    }

    pub fn stiffness(&self) -> &CsrMatrix {
        &self.stiffness
    }

    /// Diagonal of `D`.
    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    /// Cotangent weight `w_ij = (cot α + cot β)/2` of edge `(i, j)`; 0 if not an edge.
    pub fn edge_weight(&self, i: usize, j: usize) -> f64 {
        -self.stiffness.get(i, j)
    }

    /// `W f`.
    pub fn apply_w(&self, f: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim("apply_w", self.n(), f.len())?;
        Ok(self.stiffness.mul_vec(f))
    }

    /// `L f = D⁻¹ W f`.
    pub fn apply_l(&self, f: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.apply_w(f)?;
        for (o, d) in out.iter_mut().zip(&self.mass) {
            *o /= d;
        }
        Ok(out)
    }

    /// `L X` for a dense block of column functions.
    pub fn apply_l_dense(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Error::check_dim("apply_l_dense", self.n(), x.nrows())?;
        let mut out = self.stiffness.mul_dense(x);
        for (i, d) in self.mass.iter().enumerate() {
            out.row_mut(i).scale_mut(1.0 / d);
        }
        Ok(out)
    }

    pub fn dense_w(&self) -> DMatrix<f64> {
        self.stiffness.to_dense()
    }

    pub fn dense_l(&self) -> DMatrix<f64> {
        let mut l = self.stiffness.to_dense();
        for (i, d) in self.mass.iter().enumerate() {
            l.row_mut(i).scale_mut(1.0 / d);
        }
        l
    }

    /// Triplet dump: `n n nnz`, then `i j value` lines (0-based).
    pub fn to_triplet_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{} {} {}", self.n(), self.n(), self.stiffness.nnz()).unwrap();
        for (i, j, v) in self.stiffness.triplets() {
            writeln!(s, "{i} {j} {v:?}").unwrap();
        }
        s
    }
}
