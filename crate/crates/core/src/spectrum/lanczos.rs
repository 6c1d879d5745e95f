//! Block shift-invert Lanczos for the lowest eigenpairs of a sparse
//! symmetric matrix, with full reorthogonalization.
//!
//! The Krylov space is grown with `(S + σI)⁻¹`; Ritz pairs are extracted
//! from `S` itself (Rayleigh-Ritz on `VᵀSV`), so eigenvalues come out
//! unshifted. Blocks handle repeated eigenvalues up to the block size.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::sparse::{CsrMatrix, EnvelopeCholesky};

#[derive(Debug, Clone, Copy)]
pub struct LanczosOptions {
    pub block: usize,
    /// Residual tolerance relative to `|θ_k| + σ`.
    pub tol: f64,
    pub seed: u64,
    /// Positive shift σ; the operator is `(S + σI)⁻¹`.
    pub shift: f64,
}

/// Lowest `k` eigenpairs of symmetric `s`, ascending, as `(values, n × k vectors)`.
pub fn lowest_eigenpairs(s: &CsrMatrix, k: usize, opts: &LanczosOptions) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = s.n();
    assert!(k >= 1 && k <= n);
    let shifted = s.scaled(&vec![1.0; n], &vec![1.0; n], &vec![opts.shift; n]);
    let chol = EnvelopeCholesky::factor(&shifted)?;

    let block = opts.block.clamp(1, n);
    let max_dim = n.min((12 * k).max(k + 10 * block).max(240));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut s_basis: Vec<DVector<f64>> = Vec::new();
    let mut h: Vec<Vec<f64>> = Vec::new();

    let mut pending: Vec<DVector<f64>> = (0..block)
        .map(|_| DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng)))
        .collect();
    let mut last_residual = f64::INFINITY;
    let mut checks = 0;

    loop {
        let mut added = Vec::new();
        for mut x in pending.drain(..) {
            if basis.len() >= max_dim {
                break;
            }
            let before = x.norm();
            for _ in 0..2 {
                for v in &basis {
                    let c = v.dot(&x);
                    x.axpy(-c, v, 1.0);
                }
            }
            let after = x.norm();
            if after <= 1e-8 * before || after == 0.0 {
                continue;
            }
            x /= after;
            let sx = s.mul_dvec(&x);
            let col: Vec<f64> = basis.iter().map(|v| v.dot(&sx)).collect();
            for (row, &c) in h.iter_mut().zip(&col) {
                row.push(c);
            }
            let mut new_row = col;
            new_row.push(x.dot(&sx));
            h.push(new_row);
            basis.push(x);
            s_basis.push(sx);
            added.push(basis.len() - 1);
        }

        let m = basis.len();
        if m >= k + block || m == max_dim {
            checks += 1;
            let hm = DMatrix::from_fn(m, m, |i, j| if j >= i { h[i][j] } else { h[j][i] });
            let eig = SymmetricEigen::new(hm);
            let mut idx: Vec<usize> = (0..m).collect();
            idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
            let scale = eig.eigenvalues[idx[k - 1]].abs() + opts.shift;

            let mut values = DVector::zeros(k);
            let mut vectors = DMatrix::zeros(n, k);
            let mut worst: f64 = 0.0;
            for (c, &i) in idx.iter().take(k).enumerate() {
                let theta = eig.eigenvalues[i];
                let y = eig.eigenvectors.column(i);
                let mut ritz = DVector::zeros(n);
                let mut sritz = DVector::zeros(n);
                for (j, (v, sv)) in basis.iter().zip(&s_basis).enumerate() {
                    ritz.axpy(y[j], v, 1.0);
                    sritz.axpy(y[j], sv, 1.0);
                }
                let r = (sritz - &ritz * theta).norm();
                worst = worst.max(r / scale);
                values[c] = theta;
                vectors.set_column(c, &ritz);
            }
            last_residual = worst;
            if worst <= opts.tol || m == n {
                return Ok((values, vectors));
            }
            if m == max_dim {
                return Err(Error::NoConvergence {
                    residual: last_residual,
                    iterations: checks,
                });
            }
        }

        if added.is_empty() {
            // invariant subspace: restart with fresh random directions
            pending = (0..block)
                .map(|_| DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng)))
                .collect();
            if basis.len() >= max_dim {
                return Err(Error::NoConvergence {
                    residual: last_residual,
                    iterations: checks,
                });
            }
        } else {
            pending = added
                .iter()
                .map(|&i| DVector::from_vec(chol.solve(basis[i].as_slice())))
                .collect();
        }
    }
}
