//! Functional maps between two shapes in spectral bases.
//!
//! A map `C` (k × k) sends the coefficients `a` of a function on X to the
//! coefficients `b = Cᵀa` of its image on Y, so `T(Σ aᵢφᵢ) = Σ aᵢ cᵢⱼ ψⱼ`.
//! Coefficients are mass-weighted projections `Φᵀ D F`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mesh::TriMesh;
use crate::spectrum::Basis;

/// Paired functions: column `i` of `f` on X corresponds to column `i` of `g` on Y.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionConstraints {
    f: DMatrix<f64>,
    g: DMatrix<f64>,
}

impl FunctionConstraints {
    pub fn new(f: DMatrix<f64>, g: DMatrix<f64>) -> Result<Self> {
        Error::check_dim("FunctionConstraints (paired columns)", f.ncols(), g.ncols())?;
        if f.ncols() == 0 {
            return Err(Error::InvalidInput("no constraint functions".into()));
        }
        for (name, m) in [("first", &f), ("second", &g)] {
            if let Some(c) = (0..m.ncols()).find(|&c| m.column(c).amax() == 0.0) {
                return Err(Error::InvalidInput(format!("constraint {c} is identically zero on the {name} shape")));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("non-finite constraint value on the {name} shape")));
            }
        }
        Ok(FunctionConstraints { f, g })
    }

    /// One 0/1 indicator column per region, regions paired by position.
    pub fn from_regions(regions_x: &[Vec<usize>], regions_y: &[Vec<usize>], nx: usize, ny: usize) -> Result<Self> {
        Error::check_dim("FunctionConstraints (region count)", regions_x.len(), regions_y.len())?;
        let indicator = |regions: &[Vec<usize>], n: usize| -> Result<DMatrix<f64>> {
            let mut m = DMatrix::zeros(n, regions.len());
            for (c, region) in regions.iter().enumerate() {
                for &v in region {
                    if v >= n {
                        return Err(Error::InvalidInput(format!(
                            "region {c} names vertex {v}, but the mesh has {n} vertices"
                        )));
                    }
                    m[(v, c)] = 1.0;
                }
            }
            Ok(m)
        };
        Self::new(indicator(regions_x, nx)?, indicator(regions_y, ny)?)
    }

    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn p(&self) -> usize {
        self.f.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    Laplacian,
    Coupled,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MapMatrix {
    Full(DMatrix<f64>),
    Diagonal(DVector<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalMap {
    pub c: MapMatrix,
    pub basis: BasisKind,
    /// Frobenius residual of the fitted system (0 for maps built directly).
    pub residual: f64,
    pub warnings: Vec<String>,
}

impl FunctionalMap {
    pub fn full(c: DMatrix<f64>, basis: BasisKind) -> Result<Self> {
        if !c.is_square() {
            return Err(Error::InvalidInput(format!("map must be square, got {}x{}", c.nrows(), c.ncols())));
        }
        Ok(FunctionalMap {
            c: MapMatrix::Full(c),
            basis,
            residual: 0.0,
            warnings: Vec::new(),
        })
    }

    pub fn diagonal(c: DVector<f64>, basis: BasisKind) -> Self {
        FunctionalMap {
            c: MapMatrix::Diagonal(c),
            basis,
            residual: 0.0,
            warnings: Vec::new(),
        }
    }

    pub fn k(&self) -> usize {
        match &self.c {
            MapMatrix::Full(c) => c.nrows(),
            MapMatrix::Diagonal(d) => d.len(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match &self.c {
            MapMatrix::Full(c) => c.clone(),
            MapMatrix::Diagonal(d) => DMatrix::from_diagonal(d),
        }
    }
}

/// Coefficients on Y of the image of a function with coefficients `a` on X: `Cᵀa`.
pub fn apply_map(map: &FunctionalMap, a: &DVector<f64>) -> Result<DVector<f64>> {
    Error::check_dim("apply_map", map.k(), a.len())?;
    Ok(match &map.c {
        MapMatrix::Full(c) => c.tr_mul(a),
        MapMatrix::Diagonal(d) => d.component_mul(a),
    })
}

/// The map applying `first` and then `then`.
pub fn compose(first: &FunctionalMap, then: &FunctionalMap) -> Result<FunctionalMap> {
    Error::check_dim("compose", first.k(), then.k())?;
    let c = match (&first.c, &then.c) {
        (MapMatrix::Diagonal(a), MapMatrix::Diagonal(b)) => {
            return Ok(FunctionalMap::diagonal(a.component_mul(b), then.basis));
        }
        _ => first.to_dense() * then.to_dense(),
    };
    FunctionalMap::full(c, then.basis)
}

fn check_k(basis: &impl Basis, k: usize, which: &str) -> Result<()> {
    if k == 0 || basis.dim() < k {
        return Err(Error::Precondition(format!(
            "k = {k} needs at least k columns in the {which} basis, which has {}",
            basis.dim()
        )));
    }
    Ok(())
}

/// `Φ_kᵀ D F` for the first `k` basis columns.
fn coefficients(basis: &impl Basis, f: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
    Ok(basis.analyze(f)?.rows(0, k).into_owned())
}

/// Least-squares fit of a full k × k map to the paired constraints.
pub fn fit_full(cons: &FunctionConstraints, basis_x: &impl Basis, basis_y: &impl Basis, k: usize) -> Result<FunctionalMap> {
    check_k(basis_x, k, "first")?;
    check_k(basis_y, k, "second")?;
    let a = coefficients(basis_x, cons.f(), k)?;
    let b = coefficients(basis_y, cons.g(), k)?;
    let (at, bt) = (a.transpose(), b.transpose());
    let mut warnings = Vec::new();
    if cons.p() < k {
        warnings.push(format!(
            "{} equations for {} unknowns; returning the minimum-norm solution",
            cons.p() * k,
            k * k
        ));
    }
    let svd = at.clone().svd(true, true);
    let eps = 1e-12 * svd.singular_values.max();
    let rank = svd.rank(eps);
    if rank < k && cons.p() >= k {
        warnings.push(format!("constraint coefficients have rank {rank} < k = {k}"));
    }
    let c = svd.solve(&bt, eps).map_err(|e| Error::SingularSystem(e.to_string()))?;
    let residual = (&at * &c - &bt).norm();
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(FunctionalMap {
        c: MapMatrix::Full(c),
        basis: BasisKind::Laplacian,
        residual,
        warnings,
    })
}

/// Least-squares fit of a diagonal map, one coefficient per basis function.
pub fn fit_diag(cons: &FunctionConstraints, basis_x: &impl Basis, basis_y: &impl Basis, k: usize) -> Result<FunctionalMap> {
    check_k(basis_x, k, "first")?;
    check_k(basis_y, k, "second")?;
    let a = coefficients(basis_x, cons.f(), k)?;
    let b = coefficients(basis_y, cons.g(), k)?;
    let mut warnings = Vec::new();
    let mut c = DVector::zeros(k);
    for j in 0..k {
        let den = a.row(j).norm_squared();
        if den == 0.0 {
            warnings.push(format!("coefficient {j} is undetermined by the constraints; set to 0"));
            continue;
        }
        c[j] = a.row(j).dot(&b.row(j)) / den;
    }
    let mut fitted = a.clone();
    for j in 0..k {
        fitted.row_mut(j).scale_mut(c[j]);
    }
    let residual = (fitted - b).norm();
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(FunctionalMap {
        c: MapMatrix::Diagonal(c),
        basis: BasisKind::Coupled,
        residual,
        warnings,
    })
}

/// The map induced by a known vertex correspondence (`corr[y]` is the X
/// vertex of Y vertex `y`): `C = Φ_k[corr]ᵀ D_Y Ψ_k`.
pub fn ground_truth_map(basis_x: &impl Basis, basis_y: &impl Basis, corr: &[usize], k: usize) -> Result<FunctionalMap> {
    check_k(basis_x, k, "first")?;
    check_k(basis_y, k, "second")?;
    Error::check_dim("ground_truth_map (correspondence)", basis_y.n(), corr.len())?;
    if let Some(&bad) = corr.iter().find(|&&x| x >= basis_x.n()) {
        return Err(Error::InvalidInput(format!("correspondence names vertex {bad} outside the first shape")));
    }
    let phi = basis_x.phi();
    let pulled = DMatrix::from_fn(corr.len(), k, |y, j| phi[(corr[y], j)]);
    let psi = basis_y.phi().columns(0, k);
    let mut dpsi = psi.into_owned();
    for (i, d) in basis_y.mass().iter().enumerate() {
        dpsi.row_mut(i).scale_mut(*d);
    }
    FunctionalMap::full(pulled.tr_mul(&dpsi), BasisKind::Laplacian)
}

/// Result of point-wise recovery.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMatches {
    /// For each Y vertex, its matched X vertex.
    pub matches: Vec<usize>,
    /// Spectral distance of each match.
    pub distances: Vec<f64>,
    /// The map after the last refinement.
    pub map: DMatrix<f64>,
}

fn nearest_rows(source: &DMatrix<f64>, queries: &DMatrix<f64>) -> (Vec<usize>, Vec<f64>) {
    let k = source.ncols();
    let rows: Vec<f64> = source.transpose().as_slice().to_vec();
    let qs: Vec<f64> = queries.transpose().as_slice().to_vec();
    let found: Vec<(usize, f64)> = qs
        .par_chunks(k)
        .map(|q| {
            let mut best = (0, f64::INFINITY);
            for (i, r) in rows.chunks(k).enumerate() {
                let d: f64 = r.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.1 {
                    best = (i, d);
                }
            }
            (best.0, best.1.sqrt())
        })
        .collect();
    found.into_iter().unzip()
}

/// Nearest-neighbour matching of spectral coordinates under the map,
/// alternated `iters` times with an orthogonal Procrustes refit of the map.
pub fn pointwise_recover(map: &FunctionalMap, basis_x: &impl Basis, basis_y: &impl Basis, iters: usize) -> Result<PointMatches> {
    let k = map.k();
    if k == 0 || basis_x.n() == 0 || basis_y.n() == 0 {
        return Err(Error::InvalidInput("empty basis or map".into()));
    }
    check_k(basis_x, k, "first")?;
    check_k(basis_y, k, "second")?;
    let phi = basis_x.phi().columns(0, k).into_owned();
    let psi = basis_y.phi().columns(0, k).into_owned();
    let mut c = map.to_dense();
    let (mut matches, mut distances) = nearest_rows(&(&phi * &c), &psi);
    for _ in 0..iters {
        let matched = DMatrix::from_fn(psi.nrows(), k, |y, j| phi[(matches[y], j)]);
        let svd = matched.tr_mul(&psi).svd(true, true);
        c = svd.u.expect("requested U") * svd.v_t.expect("requested Vᵀ");
        (matches, distances) = nearest_rows(&(&phi * &c), &psi);
    }
    Ok(PointMatches {
        matches,
        distances,
        map: c,
    })
}

/// Mean graph-geodesic distance on X between predicted and true matches.
pub fn mean_geodesic_error(mesh_x: &TriMesh, predicted: &[usize], truth: &[usize]) -> Result<f64> {
    Error::check_dim("mean_geodesic_error", truth.len(), predicted.len())?;
    if truth.is_empty() {
        return Ok(0.0);
    }
    let mut by_truth: Vec<Vec<usize>> = vec![Vec::new(); mesh_x.n_vertices()];
    for (p, &t) in predicted.iter().zip(truth) {
        if t >= mesh_x.n_vertices() || *p >= mesh_x.n_vertices() {
            return Err(Error::InvalidInput(format!("match ({p}, {t}) is outside the mesh")));
        }
        by_truth[t].push(*p);
    }
    let total: f64 = by_truth
        .par_iter()
        .enumerate()
        .filter(|(_, preds)| !preds.is_empty())
        .map(|(t, preds)| -> Result<f64> {
            let dist = mesh_x.graph_geodesics(t)?;
            Ok(preds.iter().map(|&p| dist[p]).sum())
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .sum();
    Ok(total / truth.len() as f64)
}
