//! Verification oracles: finite-difference gradients, deformation
//! measurements, the geometric bound on Laplacian differences and
//! first-order eigenvector perturbation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::jointdiag::JdProblem;
use crate::laplacian::LaplacianPair;
use crate::mesh::{MeshError, TriMesh};
use crate::spectrum::{Basis, EigenBasis};

/// Central differences `(f(x + h) − f(x − h)) / 2h` for every entry of `a` and `b`.
pub fn finite_diff_gradient(
    f: impl Fn(&DMatrix<f64>, &DMatrix<f64>) -> f64,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    h: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut ga = DMatrix::zeros(a.nrows(), a.ncols());
    let mut gb = DMatrix::zeros(b.nrows(), b.ncols());
    let mut ap = a.clone();
    for i in 0..a.len() {
        let x = ap[i];
        ap[i] = x + h;
        let up = f(&ap, b);
        ap[i] = x - h;
        let down = f(&ap, b);
        ap[i] = x;
        ga[i] = (up - down) / (2.0 * h);
    }
    let mut bp = b.clone();
    for i in 0..b.len() {
        let x = bp[i];
        bp[i] = x + h;
        let up = f(a, &bp);
        bp[i] = x - h;
        let down = f(a, &bp);
        bp[i] = x;
        gb[i] = (up - down) / (2.0 * h);
    }
    (ga, gb)
}

/// Largest componentwise difference, relative to the largest analytic component.
pub fn max_relative_error(analytic: (&DMatrix<f64>, &DMatrix<f64>), numeric: (&DMatrix<f64>, &DMatrix<f64>)) -> f64 {
    let scale = analytic.0.amax().max(analytic.1.amax());
    let diff = (analytic.0 - numeric.0).amax().max((analytic.1 - numeric.1).amax());
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Analytic JD gradient against central differences with step `h`.
pub fn gradient_check(prob: &JdProblem, a: &DMatrix<f64>, b: &DMatrix<f64>, h: f64) -> Result<f64> {
    let (ga, gb) = prob.gradient(a, b)?;
    let (na, nb) = finite_diff_gradient(|a, b| prob.objective(a, b).unwrap_or(f64::NAN), a, b, h);
    Ok(max_relative_error((&ga, &gb), (&na, &nb)))
}

/// `(Δθ, δ)`: the largest corner-angle change and the largest relative
/// vertex-area change between two meshes with the same faces.
pub fn measure_deformation(x: &TriMesh, y: &TriMesh) -> Result<(f64, f64)> {
    if x.faces() != y.faces() || x.n_vertices() != y.n_vertices() {
        return Err(MeshError::ConnectivityMismatch(format!(
            "{} vertices / {} faces against {} / {}",
            x.n_vertices(),
            x.n_faces(),
            y.n_vertices(),
            y.n_faces()
        ))
        .into());
    }
    let delta_theta = x
        .corner_angles()
        .iter()
        .zip(y.corner_angles())
        .flat_map(|(p, q)| (0..3).map(move |c| (p[c] - q[c]).abs()))
        .fold(0.0, f64::max);
    let delta = x
        .vertex_areas()
        .as_slice()
        .iter()
        .zip(y.vertex_areas().as_slice())
        .map(|(s, t)| (t / s - 1.0).abs())
        .fold(0.0, f64::max);
    Ok((delta_theta, delta))
}

/// Quantities entering the perturbation bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PerturbationParams {
    /// Smallest corner angle over both meshes (radians).
    pub theta0: f64,
    /// Smallest vertex area (sum of incident triangle areas) over both meshes.
    pub s0: f64,
    /// Largest vertex degree.
    pub nu: usize,
    pub delta_theta: f64,
    pub delta: f64,
    pub n_x: usize,
    /// Smallest eigenvalue gap; 0 when not measured.
    pub tau: f64,
    pub epsilon: f64,
    /// Spectral norm of the perturbation.
    pub r_norm: f64,
}

impl PerturbationParams {
    /// Geometric parameters of a same-connectivity pair, with `ε = 1` and
    /// `R = L_X − L_Y`.
    pub fn from_meshes(x: &TriMesh, y: &TriMesh) -> Result<Self> {
        let (delta_theta, delta) = measure_deformation(x, y)?;
        let min_angle = |m: &TriMesh| m.corner_angles().iter().flatten().copied().fold(f64::INFINITY, f64::min);
        let r_norm = laplacian_difference_norm(&LaplacianPair::assemble(x)?, &LaplacianPair::assemble(y)?, 0)?;
        Ok(PerturbationParams {
            theta0: min_angle(x).min(min_angle(y)).min(std::f64::consts::FRAC_PI_2),
            s0: x.vertex_areas().min().min(y.vertex_areas().min()),
            nu: x.max_degree(),
            delta_theta,
            delta,
            n_x: x.n_vertices(),
            tau: 0.0,
            epsilon: 1.0,
            r_norm,
        })
    }
}

/// `6 ν n^{3/2} / (s₀ sin²θ₀) · (Δθ + δ)`.
pub fn laplacian_diff_bound(p: &PerturbationParams) -> f64 {
    let sin = p.theta0.sin();
    6.0 * p.nu as f64 * (p.n_x as f64).powf(1.5) / (p.s0 * sin * sin) * (p.delta_theta + p.delta)
}

/// Largest singular value of a linear map from its action and the action
/// of its transpose, by power iteration on `MᵀM`.
pub fn spectral_norm(
    n: usize,
    apply: impl Fn(&DVector<f64>) -> DVector<f64>,
    apply_t: impl Fn(&DVector<f64>) -> DVector<f64>,
    seed: u64,
) -> f64 {
    const MAX_ITERS: usize = 200;
    const TOL: f64 = 1e-10;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    v /= v.norm();
    let mut sigma2 = 0.0;
    for _ in 0..MAX_ITERS {
        let w = apply_t(&apply(&v));
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let done = (norm - sigma2).abs() <= TOL * norm;
        sigma2 = norm;
        v = w / norm;
        if done {
            break;
        }
    }
    sigma2.sqrt()
}

/// `‖L_X − L_Y‖₂` for two Laplacians on the same vertex set.
pub fn laplacian_difference_norm(x: &LaplacianPair, y: &LaplacianPair, seed: u64) -> Result<f64> {
    Error::check_dim("laplacian_difference_norm", x.n(), y.n())?;
    let apply = |v: &DVector<f64>| {
        let a = x.apply_l(v.as_slice()).expect("sizes checked");
        let b = y.apply_l(v.as_slice()).expect("sizes checked");
        DVector::from_iterator(v.len(), a.iter().zip(&b).map(|(p, q)| p - q))
    };
    // Lᵀv = W D⁻¹ v
    let apply_t = |v: &DVector<f64>| {
        let scaled = |lap: &LaplacianPair| -> Vec<f64> {
            let dv: Vec<f64> = v.iter().zip(lap.mass()).map(|(a, d)| a / d).collect();
            lap.apply_w(&dv).expect("sizes checked")
        };
        let (a, b) = (scaled(x), scaled(y));
        DVector::from_iterator(v.len(), a.iter().zip(&b).map(|(p, q)| p - q))
    };
    Ok(spectral_norm(x.n(), apply, apply_t, seed))
}

/// Which first-order coefficient to use for the predicted vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AlphaForm {
    /// `αᵢⱼ = uᵢᵀRuⱼ / 2(λⱼ − λᵢ)`.
    Halved,
    /// `αᵢⱼ = uⱼᵀRuᵢ / (λᵢ − λⱼ)`, the eigenvector perturbation of `S + εR`.
    Classical,
}

#[derive(Debug, Clone)]
pub struct EigPerturbation {
    /// Predicted perturbed vectors in the symmetric form `u = D^{1/2}φ`, one column per requested index.
    pub vectors: DMatrix<f64>,
    pub alpha_halved: DMatrix<f64>,
    pub alpha_classical: DMatrix<f64>,
    /// `‖R‖₂ / 2τ`.
    pub alpha_max: f64,
    /// `ε (n − k′ − 1) α_max`.
    pub truncation_bound: f64,
    pub min_gap: f64,
}

/// Orthonormal eigenvectors `u = D^{1/2}φ` of `S = D^{-1/2} W D^{-1/2}`.
pub fn symmetric_vectors(basis: &EigenBasis) -> DMatrix<f64> {
    let mut u = basis.phi().clone();
    for (i, d) in basis.mass().iter().enumerate() {
        u.row_mut(i).scale_mut(d.sqrt());
    }
    u
}

/// First-order prediction of the eigenvectors of `S + εR`, `R` symmetric
/// n × n, from the pairs held in `basis`. Requires every gap between
/// consecutive eigenvalues of the basis to be at least `tau`.
pub fn first_order_eig_perturbation(
    basis: &EigenBasis,
    r: &DMatrix<f64>,
    eps: f64,
    indices: &[usize],
    tau: f64,
    form: AlphaForm,
) -> Result<EigPerturbation> {
    let n = basis.n();
    let kp = basis.k_prime();
    Error::check_dim("first_order_eig_perturbation (R)", n, r.nrows())?;
    Error::check_dim("first_order_eig_perturbation (R)", n, r.ncols())?;
    if !(tau > 0.0) {
        return Err(Error::InvalidInput(format!("tau must be positive, got {tau}")));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= kp) {
        return Err(Error::Precondition(format!("index {bad} is outside a basis of {kp} pairs")));
    }
    let lambda = basis.lambda();
    let min_gap = (1..kp)
        .map(|i| lambda[i] - lambda[i - 1])
        .fold(f64::INFINITY, f64::min);
    if min_gap < tau {
        return Err(Error::NearDegenerateSpectrum { gap: min_gap, tau });
    }

    let u = symmetric_vectors(basis);
    let ru = r * &u;
    let proj = u.tr_mul(&ru);
    let mut halved = DMatrix::zeros(kp, kp);
    let mut classical = DMatrix::zeros(kp, kp);
    for i in 0..kp {
        for j in 0..kp {
            if i != j {
                halved[(i, j)] = proj[(i, j)] / (2.0 * (lambda[j] - lambda[i]));
                classical[(i, j)] = proj[(j, i)] / (lambda[i] - lambda[j]);
            }
        }
    }
    let alpha = match form {
        AlphaForm::Halved => &halved,
        AlphaForm::Classical => &classical,
    };
    let mut vectors = DMatrix::zeros(n, indices.len());
    for (c, &i) in indices.iter().enumerate() {
        let mut v = u.column(i).into_owned();
        for j in 0..kp {
            if j != i {
                v.axpy(eps * alpha[(i, j)], &u.column(j), 1.0);
            }
        }
        vectors.set_column(c, &v);
    }
    let r_norm = spectral_norm(n, |v| r * v, |v| r.tr_mul(v), 0);
    let alpha_max = r_norm / (2.0 * tau);
    Ok(EigPerturbation {
        vectors,
        alpha_halved: halved,
        alpha_classical: classical,
        alpha_max,
        truncation_bound: eps * (n as f64 - kp as f64 - 1.0).max(0.0) * alpha_max,
        min_gap,
    })
}

/// Greedy matching of candidate columns to reference columns by largest
/// `|⟨ref, cand⟩|`, sign-corrected. Returns the reordered candidates.
pub fn align_columns(reference: &DMatrix<f64>, candidates: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Error::check_dim("align_columns", reference.nrows(), candidates.nrows())?;
    if candidates.ncols() < reference.ncols() {
        return Err(Error::InvalidInput(format!(
            "{} candidates cannot cover {} reference columns",
            candidates.ncols(),
            reference.ncols()
        )));
    }
    let inner = reference.tr_mul(candidates);
    let mut entries: Vec<(usize, usize)> = (0..inner.nrows())
        .flat_map(|i| (0..inner.ncols()).map(move |j| (i, j)))
        .collect();
    entries.sort_by(|&(a, b), &(c, d)| inner[(c, d)].abs().total_cmp(&inner[(a, b)].abs()).then((a, b).cmp(&(c, d))));
    let mut ref_used = vec![false; inner.nrows()];
    let mut cand_used = vec![false; inner.ncols()];
    let mut out = DMatrix::zeros(reference.nrows(), reference.ncols());
    for (i, j) in entries {
        if ref_used[i] || cand_used[j] {
            continue;
        }
        ref_used[i] = true;
        cand_used[j] = true;
        let sign = if inner[(i, j)] < 0.0 { -1.0 } else { 1.0 };
        out.set_column(i, &(candidates.column(j) * sign));
    }
    Ok(out)
}

/// Prediction error of first-order perturbation at a sequence of ε.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceStudy {
    pub eps: Vec<f64>,
    pub residuals: Vec<f64>,
    /// `residual(εᵢ) / residual(εᵢ₊₁)`.
    pub ratios: Vec<f64>,
    /// `log(ratio) / log(εᵢ / εᵢ₊₁)`.
    pub orders: Vec<f64>,
}

/// Compares predicted vectors with exact eigenvectors of `S + εR` (dense)
/// for each ε in `eps`. Uses the complete basis of `lap`.
pub fn perturbation_convergence(
    lap: &LaplacianPair,
    r: &DMatrix<f64>,
    eps: &[f64],
    indices: &[usize],
    tau: f64,
    form: AlphaForm,
) -> Result<ConvergenceStudy> {
    let n = lap.n();
    let inv_sqrt: Vec<f64> = lap.mass().iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut s = lap.dense_w();
    for i in 0..n {
        for j in 0..n {
            s[(i, j)] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    let basis = crate::spectrum::eigenbasis_with(
        lap,
        n,
        &crate::spectrum::EigenOptions {
            dense_max_n: n,
            ..Default::default()
        },
    )?;
    let mut residuals = Vec::with_capacity(eps.len());
    for &e in eps {
        let pred = first_order_eig_perturbation(&basis, r, e, indices, tau, form)?;
        let eig = SymmetricEigen::new(&s + r * e);
        let aligned = align_columns(&pred.vectors, &eig.eigenvectors)?;
        residuals.push((aligned - &pred.vectors).norm());
    }
    let ratios: Vec<f64> = residuals.windows(2).map(|w| w[0] / w[1]).collect();
    let orders = ratios
        .iter()
        .zip(eps.windows(2))
        .map(|(q, e)| q.ln() / (e[0] / e[1]).ln())
        .collect();
    Ok(ConvergenceStudy {
        eps: eps.to_vec(),
        residuals,
        ratios,
        orders,
    })
}
