//! Coupled quasi-harmonic bases by approximate joint diagonalization.
//!
//! The joint bases are parametrized as `Φ̂ = Φ̄A`, `Ψ̂ = Ψ̄B` with `A`, `B`
//! on the Stiefel manifold of `k′ × k` matrices with orthonormal columns.
//! The objective is
//!
//! ```text
//! penalty(A; Λ̄_X) + penalty(B; Λ̄_Y) + μ ‖(PΦ̄A − QΨ̄B) V‖²_F
//! ```
//!
//! where `P`, `Q` select the `l` corresponding vertices and `V` weights the
//! coupled functions. It is minimized by Riemannian gradient descent with a
//! QR retraction, Barzilai-Borwein step lengths and Armijo backtracking.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::spectrum::{off_norms, Basis, BasisRef, EigenBasis};

/// Off-diagonality penalty applied to `AᵀΛ̄A`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Penalty {
    /// `Σ_{i≠j} (AᵀΛ̄A)²_ij`.
    OffSquares,
    /// `‖AᵀΛ̄A − Λ̄_{1:k}‖²_F`; also orders the columns by frequency.
    #[default]
    DiagDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Mu {
    /// Balance the coupling term against the penalties by their scales.
    #[default]
    Adaptive,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum Weights {
    #[default]
    Uniform,
    /// `vᵢ = 1 / (1 + (λᵢ^X + λᵢ^Y) / 2)`.
    Decay,
    Custom(Vec<f64>),
}

/// Corresponding vertex pairs `(on X, on Y)` and how strongly to couple them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CouplingSpec {
    pub pairs: Vec<(usize, usize)>,
    pub mu: Mu,
    pub weights: Weights,
}

impl CouplingSpec {
    pub fn new(pairs: Vec<(usize, usize)>) -> Self {
        CouplingSpec {
            pairs,
            ..Default::default()
        }
    }

    pub fn with_mu(mut self, mu: Mu) -> Self {
        self.mu = mu;
        self
    }

    pub fn with_weights(mut self, weights: Weights) -> Self {
        self.weights = weights;
        self
    }

    fn validate(&self, nx: usize, ny: usize) -> Result<()> {
        for (i, &(a, b)) in self.pairs.iter().enumerate() {
            if a >= nx || b >= ny {
                return Err(Error::InvalidInput(format!(
                    "coupling pair {i} = ({a}, {b}) is out of range for meshes with {nx} and {ny} vertices"
                )));
            }
        }
        match self.mu {
            Mu::Fixed(mu) if !(mu >= 0.0 && mu.is_finite()) => {
                return Err(Error::InvalidInput(format!("mu must be finite and nonnegative, got {mu}")));
            }
            Mu::Fixed(mu) if mu > 0.0 && self.pairs.is_empty() => {
                return Err(Error::InvalidInput("mu > 0 needs at least one coupling pair".into()));
            }
            _ => {}
        }
        if let Weights::Custom(w) = &self.weights {
            if let Some(bad) = w.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
                return Err(Error::InvalidInput(format!("weights must be positive, got {bad}")));
            }
        }
        Ok(())
    }
}

/// Selector matrices `P` (l × n_X) and `Q` (l × n_Y).
pub fn coupling_matrices(spec: &CouplingSpec, nx: usize, ny: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    spec.validate(nx, ny)?;
    let l = spec.pairs.len();
    let mut p = DMatrix::zeros(l, nx);
    let mut q = DMatrix::zeros(l, ny);
    for (i, &(a, b)) in spec.pairs.iter().enumerate() {
        p[(i, a)] = 1.0;
        q[(i, b)] = 1.0;
    }
    Ok((p, q))
}

fn select_rows(phi: &DMatrix<f64>, rows: impl Iterator<Item = usize>) -> DMatrix<f64> {
    let rows: Vec<usize> = rows.collect();
    DMatrix::from_fn(rows.len(), phi.ncols(), |i, j| phi[(rows[i], j)])
}

/// Values of the three objective terms at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveTerms {
    pub penalty_x: f64,
    pub penalty_y: f64,
    /// Weighted coupling term, already multiplied by `μ`.
    pub coupling: f64,
}

impl ObjectiveTerms {
    pub fn total(&self) -> f64 {
        self.penalty_x + self.penalty_y + self.coupling
    }
}

/// One coupled diagonalization instance.
#[derive(Debug, Clone)]
pub struct JdProblem {
    phi_x: DMatrix<f64>,
    phi_y: DMatrix<f64>,
    lambda_x: DVector<f64>,
    lambda_y: DVector<f64>,
    mass_x: Vec<f64>,
    mass_y: Vec<f64>,
    /// `PΦ̄` and `QΨ̄`, l × k′.
    sel_x: DMatrix<f64>,
    sel_y: DMatrix<f64>,
    pairs: Vec<(usize, usize)>,
    weights: DVector<f64>,
    mu: f64,
    adaptive_mu: bool,
    k: usize,
    penalty: Penalty,
    warnings: Vec<String>,
}

impl JdProblem {
    /// Couples the full bases `basis_x`, `basis_y` (both with `k′` columns)
    /// and asks for `k ≤ k′` joint functions.
    pub fn new(
        basis_x: &EigenBasis,
        basis_y: &EigenBasis,
        coupling: &CouplingSpec,
        k: usize,
        penalty: Penalty,
    ) -> Result<Self> {
        let kp = basis_x.k_prime();
        Error::check_dim("JdProblem (k′ of the second basis)", kp, basis_y.k_prime())?;
        if k == 0 || k > kp {
            return Err(Error::Precondition(format!("k must be in 1..={kp}, got {k}")));
        }
        coupling.validate(basis_x.n(), basis_y.n())?;
        let l = coupling.pairs.len();
        let mut warnings = Vec::new();
        if 2 * kp <= l {
            warnings.push(format!(
                "over-determined coupling: 2k' = {} does not exceed l = {l}; expect 2k' > l",
                2 * kp
            ));
        }
        let sel_x = select_rows(basis_x.phi(), coupling.pairs.iter().map(|p| p.0));
        let sel_y = select_rows(basis_y.phi(), coupling.pairs.iter().map(|p| p.1));
        let weights = match &coupling.weights {
            Weights::Uniform => DVector::from_element(k, 1.0),
            Weights::Decay => DVector::from_fn(k, |i, _| {
                1.0 / (1.0 + 0.5 * (basis_x.lambda()[i] + basis_y.lambda()[i]))
            }),
            Weights::Custom(w) => {
                Error::check_dim("JdProblem (weights)", k, w.len())?;
                DVector::from_column_slice(w)
            }
        };
        let mut prob = JdProblem {
            phi_x: basis_x.phi().clone(),
            phi_y: basis_y.phi().clone(),
            lambda_x: basis_x.lambda().clone(),
            lambda_y: basis_y.lambda().clone(),
            mass_x: basis_x.mass().to_vec(),
            mass_y: basis_y.mass().to_vec(),
            sel_x,
            sel_y,
            pairs: coupling.pairs.clone(),
            weights,
            mu: 0.0,
            adaptive_mu: false,
            k,
            penalty,
            warnings,
        };
        match coupling.mu {
            Mu::Fixed(mu) => prob.mu = mu,
            Mu::Adaptive => {
                prob.adaptive_mu = true;
                prob.mu = prob.scale_balanced_mu();
            }
        }
        Ok(prob)
    }

    /// `(‖Λ̄_X,k‖² + ‖Λ̄_Y,k‖²) / (‖PΦ̄_k V‖² + ‖QΨ̄_k V‖²)`, or 1 without coupling data.
    fn scale_balanced_mu(&self) -> f64 {
        let k = self.k;
        let lam = self.lambda_x.rows(0, k).norm_squared() + self.lambda_y.rows(0, k).norm_squared();
        let mut coup = 0.0;
        for sel in [&self.sel_x, &self.sel_y] {
            for j in 0..k {
                coup += self.weights[j].powi(2) * sel.column(j).norm_squared();
            }
        }
        if coup > 0.0 && lam > 0.0 {
            lam / coup
        } else {
            1.0
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn k_prime(&self) -> usize {
        self.lambda_x.len()
    }

    pub fn l(&self) -> usize {
        self.pairs.len()
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn penalty(&self) -> Penalty {
        self.penalty
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn lambda_x(&self) -> &DVector<f64> {
        &self.lambda_x
    }

    pub fn lambda_y(&self) -> &DVector<f64> {
        &self.lambda_y
    }

    /// `PΦ̄` (l × k′).
    pub fn selected_x(&self) -> &DMatrix<f64> {
        &self.sel_x
    }

    /// `QΨ̄` (l × k′).
    pub fn selected_y(&self) -> &DMatrix<f64> {
        &self.sel_y
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    fn check_point(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
        for m in [a, b] {
            Error::check_dim("JD point (rows)", self.k_prime(), m.nrows())?;
            Error::check_dim("JD point (columns)", self.k, m.ncols())?;
        }
        Ok(())
    }

    fn penalty_value(&self, a: &DMatrix<f64>, lambda: &DVector<f64>) -> f64 {
        let la = scale_rows(a, lambda);
        let m = a.tr_mul(&la);
        match self.penalty {
            Penalty::OffSquares => {
                let diag2: f64 = m.diagonal().norm_squared();
                m.norm_squared() - diag2
            }
            Penalty::DiagDifference => {
                let mut d = m;
                for i in 0..self.k {
                    d[(i, i)] -= lambda[i];
                }
                d.norm_squared()
            }
        }
    }

    fn penalty_gradient(&self, a: &DMatrix<f64>, lambda: &DVector<f64>) -> DMatrix<f64> {
        let la = scale_rows(a, lambda);
        let mut m = a.tr_mul(&la);
        match self.penalty {
            Penalty::OffSquares => m.fill_diagonal(0.0),
            Penalty::DiagDifference => {
                for i in 0..self.k {
                    m[(i, i)] -= lambda[i];
                }
            }
        }
        la * m * 4.0
    }

    /// `(PΦ̄A − QΨ̄B) V`.
    fn coupling_residual_matrix(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut r = &self.sel_x * a - &self.sel_y * b;
        for (j, w) in self.weights.iter().enumerate() {
            r.column_mut(j).scale_mut(*w);
        }
        r
    }

    pub fn objective_terms(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<ObjectiveTerms> {
        self.check_point(a, b)?;
        let coupling = if self.mu == 0.0 {
            0.0
        } else {
            self.mu * self.coupling_residual_matrix(a, b).norm_squared()
        };
        Ok(ObjectiveTerms {
            penalty_x: self.penalty_value(a, &self.lambda_x),
            penalty_y: self.penalty_value(b, &self.lambda_y),
            coupling,
        })
    }

    pub fn objective(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
        Ok(self.objective_terms(a, b)?.total())
    }

    /// Euclidean gradient with respect to `A` and `B`.
    pub fn gradient(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check_point(a, b)?;
        let mut ga = self.penalty_gradient(a, &self.lambda_x);
        let mut gb = self.penalty_gradient(b, &self.lambda_y);
        if self.mu != 0.0 {
            let mut rv = self.coupling_residual_matrix(a, b);
            for (j, w) in self.weights.iter().enumerate() {
                rv.column_mut(j).scale_mut(*w);
            }
            ga += self.sel_x.tr_mul(&rv) * (2.0 * self.mu);
            gb -= self.sel_y.tr_mul(&rv) * (2.0 * self.mu);
        }
        Ok((ga, gb))
    }

    /// `A₀ = [I; 0]` and `B₀` with `±1` on the diagonal, chosen per column
    /// so the selected values of `φᵢ` and `±ψᵢ` are closest (`+1` on ties).
    pub fn init_sign_flip(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let (kp, k) = (self.k_prime(), self.k);
        let a = DMatrix::identity(kp, k);
        let mut b = DMatrix::zeros(kp, k);
        for i in 0..k {
            let x = self.sel_x.column(i);
            let y = self.sel_y.column(i);
            let minus = (x - y).norm();
            let plus = (x + y).norm();
            b[(i, i)] = if minus <= plus { 1.0 } else { -1.0 };
        }
        (a, b)
    }

    /// Generalized sign flip: eigenpairs whose eigenvalues agree within
    /// `rel_gap` (in either spectrum) form a cluster, and each cluster of Y
    /// is rotated onto the same cluster of X by orthogonal Procrustes on the
    /// coupled point values. Singleton clusters reduce to `init_sign_flip`.
    pub fn init_aligned(&self, rel_gap: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let (kp, k) = (self.k_prime(), self.k);
        let a = DMatrix::identity(kp, k);
        let mut full = DMatrix::identity(kp, kp);
        let close = |l: &DVector<f64>, i: usize| l[i + 1] - l[i] <= rel_gap * l[i + 1].abs();
        let mut start = 0;
        for end in 1..=kp {
            if end < kp && (close(&self.lambda_x, end - 1) || close(&self.lambda_y, end - 1)) {
                continue;
            }
            let len = end - start;
            if len == 1 {
                let (x, y) = (self.sel_x.column(start), self.sel_y.column(start));
                full[(start, start)] = if (x - y).norm() <= (x + y).norm() { 1.0 } else { -1.0 };
            } else {
                let m = self.sel_y.columns(start, len).tr_mul(&self.sel_x.columns(start, len));
                let svd = m.svd(true, true);
                let rot = svd.u.expect("requested U") * svd.v_t.expect("requested Vᵀ");
                full.view_mut((start, start), (len, len)).copy_from(&rot);
            }
            start = end;
        }
        (a, full.columns(0, k).into_owned())
    }

    /// Same coupling restricted to eigenpairs `start .. start + len`, with `k = k′ = len`.
    fn band(&self, start: usize, len: usize) -> JdProblem {
        let mut prob = JdProblem {
            phi_x: self.phi_x.columns(start, len).into_owned(),
            phi_y: self.phi_y.columns(start, len).into_owned(),
            lambda_x: self.lambda_x.rows(start, len).into_owned(),
            lambda_y: self.lambda_y.rows(start, len).into_owned(),
            mass_x: self.mass_x.clone(),
            mass_y: self.mass_y.clone(),
            sel_x: self.sel_x.columns(start, len).into_owned(),
            sel_y: self.sel_y.columns(start, len).into_owned(),
            pairs: self.pairs.clone(),
            weights: self.weights.rows(start, len).into_owned(),
            mu: self.mu,
            adaptive_mu: self.adaptive_mu,
            k: len,
            penalty: self.penalty,
            warnings: Vec::new(),
        };
        if prob.adaptive_mu {
            prob.mu = prob.scale_balanced_mu();
        }
        prob
    }
}

fn scale_rows(a: &DMatrix<f64>, s: &DVector<f64>) -> DMatrix<f64> {
    let mut out = a.clone();
    for (i, v) in s.iter().enumerate().take(a.nrows()) {
        out.row_mut(i).scale_mut(*v);
    }
    out
}

/// Projection of `g` onto the tangent space of the Stiefel manifold at `a`.
fn tangent(a: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
    let s = a.tr_mul(g);
    let sym = (&s + s.transpose()) * 0.5;
    g - a * sym
}

/// Q factor with a nonnegative diagonal in R.
fn retract(m: DMatrix<f64>) -> DMatrix<f64> {
    let qr = m.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..q.ncols() {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// `‖AᵀA − I‖_F`.
pub fn stiefel_defect(a: &DMatrix<f64>) -> f64 {
    (a.tr_mul(a) - DMatrix::identity(a.ncols(), a.ncols())).norm()
}

/// Relative eigenvalue gap below which eigenpairs share a cluster in [`Init::Aligned`].
pub const CLUSTER_GAP: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    /// Cluster-wise Procrustes start, see [`JdProblem::init_aligned`].
    Aligned,
    SignFlip,
    Given(DMatrix<f64>, DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOptions {
    pub max_iters: usize,
    /// Stop once an accepted step lowers the objective by less than this fraction.
    pub tol: f64,
    pub init: Init,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            max_iters: 1000,
            tol: 1e-9,
            init: Init::Aligned,
        }
    }
}

/// Solution of a coupled diagonalization.
#[derive(Debug, Clone)]
pub struct CoupledBases {
    /// k′ × k
    pub a: DMatrix<f64>,
    /// k′ × k
    pub b: DMatrix<f64>,
    /// `Φ̄A`, n_X × k
    pub phi_hat: DMatrix<f64>,
    /// `Ψ̄B`, n_Y × k
    pub psi_hat: DMatrix<f64>,
    pub mass_x: Vec<f64>,
    pub mass_y: Vec<f64>,
    /// Objective before the first step and after every accepted step.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub mu: f64,
    /// `‖PΦ̂ − QΨ̂‖_F / ‖PΦ̂‖_F`.
    pub coupling_residual: f64,
    /// Off/diag ratio of `AᵀΛ̄_X A`.
    pub ratio_x: f64,
    /// Off/diag ratio of `BᵀΛ̄_Y B`.
    pub ratio_y: f64,
    /// Final objective of each band, in order (one entry when not banded).
    pub band_objectives: Vec<f64>,
    pub warnings: Vec<String>,
}

impl CoupledBases {
    pub fn basis_x(&self) -> BasisRef<'_> {
        BasisRef {
            phi: &self.phi_hat,
            mass: &self.mass_x,
        }
    }

    pub fn basis_y(&self) -> BasisRef<'_> {
        BasisRef {
            phi: &self.psi_hat,
            mass: &self.mass_y,
        }
    }

    pub fn k(&self) -> usize {
        self.a.ncols()
    }

    pub fn objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(f64::NAN)
    }

    pub fn mean_ratio(&self) -> f64 {
        0.5 * (self.ratio_x + self.ratio_y)
    }
}

struct Descent {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    trace: Vec<f64>,
    converged: bool,
    iterations: usize,
}

fn descend(prob: &JdProblem, a: DMatrix<f64>, b: DMatrix<f64>, opts: &SolveOptions) -> Result<Descent> {
    const ARMIJO: f64 = 1e-4;
    const MAX_HALVINGS: usize = 60;
    const MEMORY: usize = 30;

    let k = prob.k;
    let fscale = prob.lambda_x.rows(0, k).norm_squared() + prob.lambda_y.rows(0, k).norm_squared();
    let fscale = if fscale > 0.0 { fscale } else { 1.0 };

    let (mut a, mut b) = (a, b);
    let mut f = prob.objective(&a, &b)?;
    let mut trace = vec![f];
    let riemannian = |a: &DMatrix<f64>, b: &DMatrix<f64>| -> Result<Pair> {
        let (ga, gb) = prob.gradient(a, b)?;
        Ok(Pair(tangent(a, &ga), tangent(b, &gb)))
    };
    let mut g = riemannian(&a, &b)?;
    let gtol = 1e-12 * g.norm().max(fscale.sqrt());
    let mut scale = if g.norm() > 0.0 { 0.1 / g.norm() } else { 1.0 };
    let mut history: VecDeque<(Pair, Pair, f64)> = VecDeque::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iters {
        if g.norm() <= gtol || f <= 1e-30 * fscale {
            converged = true;
            break;
        }
        let mut accepted = None;
        for attempt in 0..2 {
            let mut d = lbfgs_direction(&g, &history, scale);
            d = Pair(tangent(&a, &d.0), tangent(&b, &d.1)).scaled(-1.0);
            let mut slope = g.dot(&d);
            if attempt == 1 || slope >= -1e-12 * g.norm() * d.norm() {
                history.clear();
                d = g.scaled(-scale);
                slope = g.dot(&d);
            }
            let mut step = 1.0;
            for _ in 0..MAX_HALVINGS {
                let na = retract(&a + &d.0 * step);
                let nb = retract(&b + &d.1 * step);
                let nf = prob.objective(&na, &nb)?;
                if nf <= f + ARMIJO * step * slope {
                    accepted = Some((na, nb, nf, d.scaled(step)));
                    break;
                }
                step *= 0.5;
            }
            if accepted.is_some() || history.is_empty() {
                break;
            }
        }
        let Some((na, nb, nf, moved)) = accepted else {
            // no representable decrease along the gradient
            converged = true;
            break;
        };
        iterations += 1;
        let ng = riemannian(&na, &nb)?;
        // carry the step and the old gradient into the new tangent space
        let s = Pair(tangent(&na, &moved.0), tangent(&nb, &moved.1));
        let y = Pair(&ng.0 - tangent(&na, &g.0), &ng.1 - tangent(&nb, &g.1));
        let sy = s.dot(&y);
        if sy > 1e-10 * s.norm() * y.norm() {
            scale = sy / y.dot(&y);
            if history.len() == MEMORY {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }

        let rel = (f - nf) / f.abs().max(f64::MIN_POSITIVE);
        a = na;
        b = nb;
        f = nf;
        g = ng;
        trace.push(f);
        if rel < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(Descent {
        a,
        b,
        trace,
        converged,
        iterations,
    })
}

/// A point of the product tangent space.
#[derive(Clone)]
struct Pair(DMatrix<f64>, DMatrix<f64>);

impl Pair {
    fn dot(&self, o: &Pair) -> f64 {
        self.0.dot(&o.0) + self.1.dot(&o.1)
    }

    fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    fn scaled(&self, s: f64) -> Pair {
        Pair(&self.0 * s, &self.1 * s)
    }

    fn add_scaled(&mut self, o: &Pair, s: f64) {
        self.0 += &o.0 * s;
        self.1 += &o.1 * s;
    }
}

/// Two-loop recursion: approximate inverse Hessian applied to `g`.
fn lbfgs_direction(g: &Pair, history: &VecDeque<(Pair, Pair, f64)>, scale: f64) -> Pair {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let alpha = rho * s.dot(&q);
        q.add_scaled(y, -alpha);
        alphas.push(alpha);
    }
    let mut r = q.scaled(scale);
    for ((s, y, rho), alpha) in history.iter().zip(alphas.iter().rev()) {
        let beta = rho * y.dot(&r);
        r.add_scaled(s, alpha - beta);
    }
    r
}

/// Reorders columns of both factors by ascending `diag(AᵀΛ̄_X A)`.
fn sort_columns(a: &DMatrix<f64>, b: &DMatrix<f64>, lambda_x: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let la = scale_rows(a, lambda_x);
    let rq: Vec<f64> = (0..a.ncols()).map(|j| a.column(j).dot(&la.column(j))).collect();
    let mut order: Vec<usize> = (0..a.ncols()).collect();
    order.sort_by(|&i, &j| rq[i].total_cmp(&rq[j]));
    let pick = |m: &DMatrix<f64>| DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, order[c])]);
    (pick(a), pick(b))
}

fn finish(prob: &JdProblem, a: DMatrix<f64>, b: DMatrix<f64>) -> CoupledBases {
    let xa = &prob.sel_x * &a;
    let yb = &prob.sel_y * &b;
    let denom = xa.norm();
    let coupling_residual = if denom > 0.0 { (&xa - &yb).norm() / denom } else { 0.0 };
    let ratio = |m: &DMatrix<f64>, lambda: &DVector<f64>| {
        let proj = m.tr_mul(&scale_rows(m, lambda));
        off_norms(&proj).map(|o| o.ratio).unwrap_or(f64::NAN)
    };
    CoupledBases {
        phi_hat: &prob.phi_x * &a,
        psi_hat: &prob.phi_y * &b,
        ratio_x: ratio(&a, &prob.lambda_x),
        ratio_y: ratio(&b, &prob.lambda_y),
        a,
        b,
        mass_x: prob.mass_x.clone(),
        mass_y: prob.mass_y.clone(),
        objective_trace: Vec::new(),
        converged: false,
        iterations: 0,
        mu: prob.mu,
        coupling_residual,
        band_objectives: Vec::new(),
        warnings: prob.warnings.clone(),
    }
}

pub fn solve_jd(prob: &JdProblem, opts: &SolveOptions) -> Result<CoupledBases> {
    let (a0, b0) = match &opts.init {
        Init::Aligned => prob.init_aligned(CLUSTER_GAP),
        Init::SignFlip => prob.init_sign_flip(),
        Init::Given(a, b) => {
            prob.check_point(a, b)?;
            (retract(a.clone()), retract(b.clone()))
        }
    };
    let run = descend(prob, a0, b0, opts)?;
    let (a, b) = sort_columns(&run.a, &run.b, &prob.lambda_x);
    let mut out = finish(prob, a, b);
    out.band_objectives = vec![*run.trace.last().unwrap()];
    out.objective_trace = run.trace;
    out.converged = run.converged;
    out.iterations = run.iterations;
    if !run.converged {
        let msg = format!("no convergence after {} iterations; returning the last iterate", run.iterations);
        log::warn!("{msg}");
        out.warnings.push(msg);
    }
    Ok(out)
}

/// Solves independent bands of `band` consecutive eigenpairs, each with
/// `k = k′ = band`, and assembles them block-diagonally.
pub fn solve_jd_banded(prob: &JdProblem, band: usize, opts: &SolveOptions) -> Result<CoupledBases> {
    let k = prob.k;
    if band == 0 || k % band != 0 {
        return Err(Error::Precondition(format!("band size {band} must divide k = {k}")));
    }
    if band <= prob.l() {
        return Err(Error::Precondition(format!(
            "band size {band} must exceed the number of coupling pairs l = {}",
            prob.l()
        )));
    }
    if let Init::Given(..) = opts.init {
        return Err(Error::Precondition("banded solves use a built-in initialization".into()));
    }
    let runs: Vec<Result<CoupledBases>> = (0..k / band)
        .into_par_iter()
        .map(|i| solve_jd(&prob.band(i * band, band), opts))
        .collect();
    let runs: Vec<CoupledBases> = runs.into_iter().collect::<Result<_>>()?;

    let kp = prob.k_prime();
    let mut a = DMatrix::zeros(kp, k);
    let mut b = DMatrix::zeros(kp, k);
    for (i, r) in runs.iter().enumerate() {
        a.view_mut((i * band, i * band), (band, band)).copy_from(&r.a);
        b.view_mut((i * band, i * band), (band, band)).copy_from(&r.b);
    }
    let longest = runs.iter().map(|r| r.objective_trace.len()).max().unwrap_or(0);
    let trace = (0..longest)
        .map(|it| {
            runs.iter()
                .map(|r| r.objective_trace[it.min(r.objective_trace.len() - 1)])
                .sum()
        })
        .collect();

    let mut out = finish(prob, a, b);
    out.objective_trace = trace;
    out.converged = runs.iter().all(|r| r.converged);
    out.iterations = runs.iter().map(|r| r.iterations).max().unwrap_or(0);
    out.mu = runs.iter().map(|r| r.mu).sum::<f64>() / runs.len() as f64;
    out.band_objectives = runs.iter().map(|r| r.objective()).collect();
    for (i, r) in runs.iter().enumerate() {
        out.warnings.extend(r.warnings.iter().map(|w| format!("band {i}: {w}")));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ProcrustesCoupling {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// `ABᵀ`, the rotation with `QΨ̄ ≈ PΦ̄Ω`.
    pub omega: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub warnings: Vec<String>,
}

/// Orthogonal `A`, `B` minimizing the unweighted coupling term alone.
pub fn procrustes_couple(prob: &JdProblem) -> Result<ProcrustesCoupling> {
    if prob.k != prob.k_prime() {
        return Err(Error::Precondition(format!(
            "Procrustes coupling needs k = k', got k = {} and k' = {}",
            prob.k,
            prob.k_prime()
        )));
    }
    let cross = prob.sel_x.tr_mul(&prob.sel_y);
    let svd = cross.svd(true, true);
    let s = svd.u.expect("requested U");
    let r = svd.v_t.expect("requested Vᵀ").transpose();
    let sv = svd.singular_values;
    let mut warnings = Vec::new();
    let top = sv.max();
    let tiny = sv.iter().filter(|v| **v <= 1e-10 * top.max(f64::MIN_POSITIVE)).count();
    if tiny > 0 {
        let msg = format!("{tiny} tiny singular values in the cross matrix; the rotation is not unique");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(ProcrustesCoupling {
        omega: &s * r.transpose(),
        a: s,
        b: r,
        singular_values: sv,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::laplacian::LaplacianPair;
    use crate::mesh::shapes;
    use crate::spectrum::eigenbasis;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_basis(rng: &mut ChaCha8Rng, n: usize, kp: usize) -> EigenBasis {
        let phi = DMatrix::from_fn(n, kp, |_, _| rng.random_range(-1.0..1.0));
        let mut lambda: Vec<f64> = (0..kp).map(|_| rng.random_range(0.0..10.0)).collect();
        lambda.sort_by(f64::total_cmp);
        let mass = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
        EigenBasis::from_parts(phi, DVector::from_vec(lambda), mass).unwrap()
    }

    fn random_stiefel(rng: &mut ChaCha8Rng, kp: usize, k: usize) -> DMatrix<f64> {
        retract(DMatrix::from_fn(kp, k, |_, _| rng.random_range(-1.0..1.0)))
    }

    fn random_problem(seed: u64, kp: usize, k: usize, l: usize, penalty: Penalty) -> JdProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 40;
        let bx = random_basis(&mut rng, n, kp);
        let by = random_basis(&mut rng, n, kp);
        let pairs = (0..l).map(|_| (rng.random_range(0..n), rng.random_range(0..n))).collect();
        let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..2.0)).collect();
        let spec = CouplingSpec::new(pairs)
            .with_mu(Mu::Fixed(rng.random_range(0.1..3.0)))
            .with_weights(Weights::Custom(weights));
        JdProblem::new(&bx, &by, &spec, k, penalty).unwrap()
    }

    /// Termwise evaluation with explicit loops.
    fn scalar_objective(prob: &JdProblem, a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let (kp, k, l) = (prob.k_prime(), prob.k(), prob.l());
        let mut total = 0.0;
        for (m, lam) in [(a, prob.lambda_x()), (b, prob.lambda_y())] {
            for i in 0..k {
                for j in 0..k {
                    let mut v = 0.0;
                    for r in 0..kp {
                        v += m[(r, i)] * lam[r] * m[(r, j)];
                    }
                    match prob.penalty() {
                        Penalty::OffSquares if i != j => total += v * v,
                        Penalty::OffSquares => {}
                        Penalty::DiagDifference => {
                            let target = if i == j { lam[i] } else { 0.0 };
                            total += (v - target).powi(2);
                        }
                    }
                }
            }
        }
        for p in 0..l {
            for j in 0..k {
                let mut r = 0.0;
                for q in 0..kp {
                    r += prob.selected_x()[(p, q)] * a[(q, j)] - prob.selected_y()[(p, q)] * b[(q, j)];
                }
                total += prob.mu() * (r * prob.weights()[j]).powi(2);
            }
        }
        total
    }

    #[test]
    fn selectors() {
        let spec = CouplingSpec::new(vec![(0, 0)]);
        let (p, q) = coupling_matrices(&spec, 3, 3).unwrap();
        assert_eq!(p, DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]));
        assert_eq!(q, p);
        let spec = CouplingSpec::new(vec![(0, 5)]);
        assert!(coupling_matrices(&spec, 3, 3).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bx = random_basis(&mut rng, 30, 8);
        let by = random_basis(&mut rng, 30, 8);
        let pairs: Vec<_> = (0..15).map(|i| (2 * i, 29 - i)).collect();
        let spec = CouplingSpec::new(pairs.clone());
        let prob = JdProblem::new(&bx, &by, &spec, 5, Penalty::default()).unwrap();
        let (p, _) = coupling_matrices(&spec, 30, 30).unwrap();
        let px = &p * bx.phi();
        assert_eq!(px.shape(), (15, 8));
        assert_eq!(&px, prob.selected_x());
        for (i, (a, _)) in pairs.iter().enumerate() {
            assert_eq!(px.row(i), bx.phi().row(*a));
        }
    }

    #[test]
    fn objective_vanishes_at_identity_without_coupling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bx = random_basis(&mut rng, 20, 6);
        let spec = CouplingSpec::new(vec![(1, 2)]).with_mu(Mu::Fixed(0.0));
        let id = DMatrix::identity(6, 6);
        for penalty in [Penalty::OffSquares, Penalty::DiagDifference] {
            let prob = JdProblem::new(&bx, &bx, &spec, 6, penalty).unwrap();
            assert_eq!(prob.objective(&id, &id).unwrap(), 0.0);
        }
    }

    #[test]
    fn objective_matches_scalar_loops() {
        for (seed, penalty) in [(3, Penalty::OffSquares), (4, Penalty::DiagDifference)] {
            let prob = random_problem(seed, 3, 2, 4, penalty);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let a = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
            let b = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
            let fast = prob.objective(&a, &b).unwrap();
            let slow = scalar_objective(&prob, &a, &b);
            assert!((fast - slow).abs() <= 1e-12 * slow.abs().max(1.0), "{fast} vs {slow}");
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let h = 1e-5;
        for seed in 0..6 {
            let penalty = if seed % 2 == 0 { Penalty::OffSquares } else { Penalty::DiagDifference };
            let prob = random_problem(seed, 6, 4, 5, penalty);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
            let a = random_stiefel(&mut rng, 6, 4);
            let b = random_stiefel(&mut rng, 6, 4);
            let (ga, gb) = prob.gradient(&a, &b).unwrap();
            let scale = ga.amax().max(gb.amax());
            for which in 0..2 {
                let g = if which == 0 { &ga } else { &gb };
                for idx in 0..a.len() {
                    let (mut ap, mut am, mut bp, mut bm) = (a.clone(), a.clone(), b.clone(), b.clone());
                    if which == 0 {
                        ap[idx] += h;
                        am[idx] -= h;
                    } else {
                        bp[idx] += h;
                        bm[idx] -= h;
                    }
                    let fd = (prob.objective(&ap, &bp).unwrap() - prob.objective(&am, &bm).unwrap()) / (2.0 * h);
                    assert!((fd - g[idx]).abs() <= 1e-5 * scale, "seed {seed}: {fd} vs {}", g[idx]);
                }
            }
        }
    }

    #[test]
    fn gradient_vanishes_at_diagonalizing_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bx = random_basis(&mut rng, 20, 6);
        let spec = CouplingSpec::new(vec![(0, 0), (3, 3)]).with_mu(Mu::Fixed(0.0));
        let prob = JdProblem::new(&bx, &bx, &spec, 4, Penalty::DiagDifference).unwrap();
        let a = DMatrix::identity(6, 4);
        let (ga, gb) = prob.gradient(&a, &a).unwrap();
        assert!(ga.amax() < 1e-12 && gb.amax() < 1e-12);

        // coupling only, zero residual
        let spec = CouplingSpec::new(vec![(0, 0), (3, 3)]).with_mu(Mu::Fixed(2.0));
        let prob = JdProblem::new(&bx, &bx, &spec, 4, Penalty::DiagDifference).unwrap();
        let (ga, _) = prob.gradient(&a, &a).unwrap();
        assert!(ga.amax() < 1e-12);
    }

    #[test]
    fn sign_flip_initialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bx = random_basis(&mut rng, 25, 6);
        let pairs: Vec<_> = (0..10).map(|i| (i, i)).collect();
        let spec = CouplingSpec::new(pairs);
        let mut prob = JdProblem::new(&bx, &bx, &spec, 4, Penalty::default()).unwrap();
        let (a0, b0) = prob.init_sign_flip();
        assert_eq!(a0, DMatrix::identity(6, 4));
        assert_eq!(b0, DMatrix::identity(6, 4));

        // sign normalization would undo a flipped column, so flip the selection
        prob.sel_y.column_mut(2).neg_mut();
        let (_, b0) = prob.init_sign_flip();
        assert_eq!(b0[(2, 2)], -1.0);
        assert_eq!(b0[(1, 1)], 1.0);

        // tie: all selected values of the column vanish
        prob.sel_x.column_mut(3).fill(0.0);
        prob.sel_y.column_mut(3).fill(0.0);
        assert_eq!(prob.init_sign_flip().1[(3, 3)], 1.0);
    }

    #[test]
    fn aligned_start_matches_sign_flip_on_simple_spectra() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let bx = EigenBasis::from_parts(
            DMatrix::from_fn(25, 6, |_, _| rng.random_range(-1.0..1.0)),
            DVector::from_vec(vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]),
            vec![1.0; 25],
        )
        .unwrap();
        let pairs: Vec<_> = (0..10).map(|i| (i, i)).collect();
        let mut prob = JdProblem::new(&bx, &bx, &CouplingSpec::new(pairs), 4, Penalty::default()).unwrap();
        prob.sel_y.column_mut(1).neg_mut();
        assert_eq!(prob.init_aligned(CLUSTER_GAP), prob.init_sign_flip());
    }

    #[test]
    fn aligned_start_undoes_a_rotated_eigenspace() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 30;
        let phi = DMatrix::from_fn(n, 6, |_, _| rng.random_range(-1.0..1.0));
        let lambda = DVector::from_vec(vec![0.0, 2.0, 2.0, 2.0, 6.0, 7.0]);
        let bx = EigenBasis::from_parts(phi.clone(), lambda.clone(), vec![1.0; n]).unwrap();
        let (c, s) = (0.6f64, 0.8f64);
        let mut rot = DMatrix::identity(6, 6);
        rot[(1, 1)] = c;
        rot[(1, 2)] = -s;
        rot[(2, 1)] = s;
        rot[(2, 2)] = c;
        let by = EigenBasis::from_parts(bx.phi() * &rot, lambda, vec![1.0; n]).unwrap();
        let pairs: Vec<_> = (0..12).map(|i| (i * 2, i * 2)).collect();
        let spec = CouplingSpec::new(pairs).with_mu(Mu::Fixed(1.0));
        let prob = JdProblem::new(&bx, &by, &spec, 5, Penalty::default()).unwrap();
        let (a, b) = prob.init_aligned(CLUSTER_GAP);
        assert!(stiefel_defect(&b) < 1e-12);
        assert!(prob.objective_terms(&a, &b).unwrap().coupling < 1e-20);
        let (a, b) = prob.init_sign_flip();
        assert!(prob.objective_terms(&a, &b).unwrap().coupling > 1e-3);
    }

    #[test]
    fn identical_meshes_couple_exactly() {
        let lap = LaplacianPair::assemble(&shapes::ellipsoid(2, [1.0, 0.8, 0.6])).unwrap();
        let basis = eigenbasis(&lap, 12).unwrap();
        let pairs: Vec<_> = (0..15).map(|i| (i * 9, i * 9)).collect();
        let spec = CouplingSpec::new(pairs).with_mu(Mu::Fixed(1.0));
        let prob = JdProblem::new(&basis, &basis, &spec, 8, Penalty::default()).unwrap();
        let out = solve_jd(&prob, &SolveOptions::default()).unwrap();
        assert!(out.objective() <= 1e-8);
        assert!((&out.phi_hat - &out.psi_hat).amax() <= 1e-4);
        assert!(out.converged);
    }

    #[test]
    fn descent_is_monotone_and_feasible() {
        let prob = random_problem(11, 10, 6, 6, Penalty::DiagDifference);
        let out = solve_jd(&prob, &SolveOptions::default()).unwrap();
        for w in out.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        assert!(out.objective() < out.objective_trace[0]);
        assert!(stiefel_defect(&out.a) <= 1e-6 && stiefel_defect(&out.b) <= 1e-6);
        let rq: Vec<f64> = (0..6)
            .map(|j| out.a.column(j).dot(&scale_rows(&out.a, prob.lambda_x()).column(j)))
            .collect();
        assert!(rq.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn uncoupled_solution_is_diagonal() {
        let mut prob = random_problem(12, 8, 5, 4, Penalty::DiagDifference);
        prob.mu = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let start = SolveOptions {
            init: Init::Given(random_stiefel(&mut rng, 8, 5), random_stiefel(&mut rng, 8, 5)),
            max_iters: 5000,
            ..Default::default()
        };
        let out = solve_jd(&prob, &start).unwrap();
        let m = out.a.tr_mul(&scale_rows(&out.a, prob.lambda_x()));
        let mut off = m.clone();
        off.fill_diagonal(0.0);
        assert!(off.amax() < 1e-6, "{}", off.amax());
    }

    #[test]
    fn single_band_matches_full_solve() {
        let prob = random_problem(13, 6, 6, 4, Penalty::DiagDifference);
        let full = solve_jd(&prob, &SolveOptions::default()).unwrap();
        let banded = solve_jd_banded(&prob, 6, &SolveOptions::default()).unwrap();
        assert_eq!(full.a, banded.a);
        assert_eq!(full.objective_trace, banded.objective_trace);
        assert!(solve_jd_banded(&prob, 4, &SolveOptions::default()).is_err());
        assert!(solve_jd_banded(&prob, 3, &SolveOptions::default()).is_err());
    }

    #[test]
    fn procrustes_recovers_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let bx = random_basis(&mut rng, 40, 6);
        let spec = CouplingSpec::new((0..20).map(|i| (i, i)).collect());
        let mut prob = JdProblem::new(&bx, &bx, &spec, 6, Penalty::default()).unwrap();
        let omega0 = random_stiefel(&mut rng, 6, 6);
        prob.sel_y = &prob.sel_x * &omega0;
        let out = procrustes_couple(&prob).unwrap();
        assert!((&out.omega - &omega0).norm() <= 1e-8);

        let same = JdProblem::new(&bx, &bx, &spec, 6, Penalty::default()).unwrap();
        let out = procrustes_couple(&same).unwrap();
        assert!((&out.omega - DMatrix::identity(6, 6)).norm() <= 1e-10);
        assert!(procrustes_couple(&JdProblem::new(&bx, &bx, &spec, 4, Penalty::default()).unwrap()).is_err());
    }

    #[test]
    fn over_determined_coupling_warns() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bx = random_basis(&mut rng, 30, 5);
        let spec = CouplingSpec::new((0..10).map(|i| (i, i)).collect());
        let prob = JdProblem::new(&bx, &bx, &spec, 3, Penalty::default()).unwrap();
        assert_eq!(prob.warnings().len(), 1);
    }

    proptest! {
        #[test]
        fn pair_order_does_not_change_objective(seed in any::<u64>(), rot in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bx = random_basis(&mut rng, 20, 5);
            let by = random_basis(&mut rng, 20, 5);
            let pairs: Vec<_> = (0..7).map(|_| (rng.random_range(0..20), rng.random_range(0..20))).collect();
            let mut shuffled = pairs.clone();
            shuffled.rotate_left(rot);
            shuffled.swap(0, 6);
            let a = random_stiefel(&mut rng, 5, 3);
            let b = random_stiefel(&mut rng, 5, 3);
            let f = |p: Vec<(usize, usize)>| {
                let spec = CouplingSpec::new(p).with_mu(Mu::Fixed(1.5));
                JdProblem::new(&bx, &by, &spec, 3, Penalty::default()).unwrap().objective(&a, &b).unwrap()
            };
            let (f1, f2) = (f(pairs), f(shuffled));
            prop_assert!((f1 - f2).abs() <= 1e-12 * f1.abs().max(1.0));
        }
    }
}
