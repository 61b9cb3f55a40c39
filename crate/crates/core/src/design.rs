//! Locally optimal approximate designs for GLMs over a candidate grid.
//!
//! The solver runs multiplicative weight updates on a fixed grid inside the
//! observed exposure region. For D-optimality each sweep is followed by a
//! vertex-exchange step, which keeps the criterion monotone and sharpens the
//! weights around the support. Optimality of D-designs is certified with the
//! Kiefer-Wolfowitz equivalence theorem: `max_x d(x) = |Phi|` at the optimum.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{Family, FeatureMap, information_matrix};
use crate::linalg;

/// Approximate design: support points with probability weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub support: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

pub const WEIGHT_SUM_TOL: f64 = 1e-12;

impl Design {
    pub fn new(support: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let d = Design { support, weights };
        d.validate()?;
        Ok(d)
    }

    /// Builds a design after renormalizing the weights to sum to one.
    pub fn normalized(support: Vec<Vec<f64>>, mut weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::EmptyDesign);
        }
        weights.iter_mut().for_each(|w| *w /= total);
        Self::new(support, weights)
    }

    pub fn validate(&self) -> Result<()> {
        if self.support.is_empty() {
            return Err(Error::EmptyDesign);
        }
        if self.support.len() != self.weights.len() {
            return Err(Error::DimensionMismatch {
                expected: self.support.len(),
                got: self.weights.len(),
                context: "design weights",
            });
        }
        let p = self.support[0].len();
        if self.support.iter().any(|x| x.len() != p) {
            return Err(Error::InvalidArgument("support points differ in dimension".into()));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument("design weights must be non-negative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidArgument(format!("design weights sum to {total}, not 1")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn exposure_dim(&self) -> usize {
        self.support.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum DesignCriterion {
    #[default]
    D,
    A,
    E,
}

impl std::str::FromStr for DesignCriterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "D" => Ok(DesignCriterion::D),
            "A" => Ok(DesignCriterion::A),
            "E" => Ok(DesignCriterion::E),
            other => Err(Error::InvalidArgument(format!("unknown criterion {other:?}"))),
        }
    }
}

impl std::fmt::Display for DesignCriterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DesignCriterion::D => "D",
            DesignCriterion::A => "A",
            DesignCriterion::E => "E",
        };
        f.write_str(s)
    }
}

impl DesignCriterion {
    /// Criterion value to maximize: log det, minus trace of the inverse, or the
    /// smallest eigenvalue. `None` when the matrix is singular.
    pub fn value(&self, info: &DMatrix<f64>) -> Option<f64> {
        if !linalg::is_full_rank(info) {
            return None;
        }
        match self {
            DesignCriterion::D => {
                let chol = info.clone().cholesky()?;
                Some(2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
            }
            DesignCriterion::A => linalg::spd_inverse(info).map(|inv| -inv.trace()),
            DesignCriterion::E => Some(info.symmetric_eigenvalues().min()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateGrid {
    pub points: Vec<Vec<f64>>,
    pub bounds: Vec<(f64, f64)>,
}

impl CandidateGrid {
    /// Full tensor grid over explicit bounds, without hull filtering.
    pub fn from_bounds(bounds: &[(f64, f64)], resolution: usize) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::InvalidArgument("grid resolution must be at least 2".into()));
        }
        if bounds.is_empty() || bounds.len() > 2 {
            return Err(Error::InvalidArgument(format!(
                "grid supports 1 or 2 exposure dimensions, got {}",
                bounds.len()
            )));
        }
        if bounds
            .iter()
            .any(|&(lo, hi)| !(hi > lo) || !lo.is_finite() || !hi.is_finite())
        {
            return Err(Error::DegenerateRange);
        }
        let axes: Vec<Vec<f64>> = bounds.iter().map(|&(lo, hi)| linspace(lo, hi, resolution)).collect();
        let points = match axes.len() {
            1 => axes[0].iter().map(|&v| vec![v]).collect(),
            _ => axes[0]
                .iter()
                .flat_map(|&a| axes[1].iter().map(move |&b| vec![a, b]))
                .collect(),
        };
        Ok(CandidateGrid {
            points,
            bounds: bounds.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn range_width(&self) -> f64 {
        self.bounds.iter().map(|&(lo, hi)| hi - lo).fold(0.0, f64::max)
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let step = (hi - lo) / (n - 1) as f64;
    (0..n)
        .map(|i| if i == n - 1 { hi } else { lo + step * i as f64 })
        .collect()
}

/// Equally spaced grid over the range of the imputed exposures (rows are points).
///
/// For two exposure dimensions the tensor grid is clipped to the convex hull of
/// the exposures.
pub fn build_candidate_grid(exposures: &DMatrix<f64>, resolution: usize) -> Result<CandidateGrid> {
    let (n, p) = exposures.shape();
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two exposures for a grid".into()));
    }
    if p == 0 || p > 2 {
        return Err(Error::InvalidArgument(format!(
            "grid supports 1 or 2 exposure dimensions, got {p}"
        )));
    }
    let bounds: Vec<(f64, f64)> = (0..p)
        .map(|j| {
            let col = exposures.column(j);
            (col.min(), col.max())
        })
        .collect();
    let mut grid = CandidateGrid::from_bounds(&bounds, resolution)?;
    if p == 2 {
        let pts: Vec<[f64; 2]> = (0..n).map(|i| [exposures[(i, 0)], exposures[(i, 1)]]).collect();
        let hull = convex_hull(&pts);
        if hull.len() < 3 {
            return Err(Error::DegenerateRange);
        }
        let scale = grid.range_width();
        grid.points
            .retain(|x| in_convex_polygon(&hull, [x[0], x[1]], 1e-9 * scale * scale));
    }
    Ok(grid)
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Andrew's monotone chain; counter-clockwise, without collinear points.
fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for &p in pts.iter().chain(pts.iter().rev().skip(1)) {
        // Lower chain on the forward pass, upper chain on the way back.
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

fn in_convex_polygon(hull: &[[f64; 2]], q: [f64; 2], tol: f64) -> bool {
    (0..hull.len()).all(|i| cross(hull[i], hull[(i + 1) % hull.len()], q) >= -tol)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub criterion: DesignCriterion,
    /// Certificate tolerance: stop once `max d(x) <= |Phi| + tol`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            criterion: DesignCriterion::D,
            tol: 1e-6,
            max_iter: 5000,
        }
    }
}

/// Solver output: the converged grid design plus diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalDesign {
    /// Weights on grid points (points whose weight underflowed are dropped).
    pub design: Design,
    pub criterion: DesignCriterion,
    /// Criterion value of `design`.
    pub value: f64,
    /// Max over the grid of the standardized directional derivative; equals
    /// `|Phi|` at the optimum (the D sensitivity for D-optimality).
    pub certificate: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Sensitivity is nearly constant over the grid, so the criterion does not
    /// discriminate between designs.
    pub near_flat: bool,
    /// Criterion value after every iteration.
    #[serde(skip)]
    pub history: Vec<f64>,
}

struct GridModel {
    /// Rows are `sqrt(u_j) Phi(x_j)'`.
    f: DMatrix<f64>,
    k: usize,
}

impl GridModel {
    fn new(points: &[Vec<f64>], beta: &DVector<f64>, family: &Family, map: &FeatureMap) -> Result<Self> {
        if beta.len() != map.dim() {
            return Err(Error::DimensionMismatch {
                expected: map.dim(),
                got: beta.len(),
                context: "coefficient vector",
            });
        }
        let k = map.dim();
        let mut f = DMatrix::zeros(points.len(), k);
        for (j, x) in points.iter().enumerate() {
            let phi = map.eval(x, &[])?;
            let u = family.weight_at(phi.dot(beta));
            let s = u.sqrt();
            for a in 0..k {
                f[(j, a)] = s * phi[a];
            }
        }
        Ok(GridModel { f, k })
    }

    fn info(&self, w: &[f64]) -> DMatrix<f64> {
        let k = self.k;
        let mut m = DMatrix::zeros(k, k);
        // Fixed summation order keeps results reproducible.
        for (j, &wj) in w.iter().enumerate() {
            if wj == 0.0 {
                continue;
            }
            for a in 0..k {
                let fa = self.f[(j, a)] * wj;
                for b in a..k {
                    m[(a, b)] += fa * self.f[(j, b)];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                m[(a, b)] = m[(b, a)];
            }
        }
        m
    }

    fn quad(&self, j: usize, a: &DMatrix<f64>) -> f64 {
        let row = self.f.row(j);
        let mut s = 0.0;
        for p in 0..self.k {
            for q in 0..self.k {
                s += row[p] * a[(p, q)] * row[q];
            }
        }
        s
    }

    fn bilinear(&self, i: usize, j: usize, a: &DMatrix<f64>) -> f64 {
        let (ri, rj) = (self.f.row(i), self.f.row(j));
        let mut s = 0.0;
        for p in 0..self.k {
            for q in 0..self.k {
                s += ri[p] * a[(p, q)] * rj[q];
            }
        }
        s
    }

    /// Directional derivatives and the value they are compared against at optimality.
    fn gains(&self, crit: DesignCriterion, info: &DMatrix<f64>) -> Option<(Vec<f64>, f64)> {
        let n = self.f.nrows();
        match crit {
            DesignCriterion::D => {
                let inv = linalg::spd_inverse(info)?;
                Some(((0..n).map(|j| self.quad(j, &inv)).collect(), self.k as f64))
            }
            DesignCriterion::A => {
                let inv = linalg::spd_inverse(info)?;
                let inv2 = &inv * &inv;
                Some(((0..n).map(|j| self.quad(j, &inv2)).collect(), inv.trace()))
            }
            DesignCriterion::E => {
                let eig = info.clone().symmetric_eigen();
                let (imin, &lmin) = eig.eigenvalues.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1))?;
                let v = eig.eigenvectors.column(imin);
                let g = (0..n)
                    .map(|j| {
                        let d = self.f.row(j).transpose().dot(&v);
                        d * d
                    })
                    .collect();
                Some((g, lmin))
            }
        }
    }
}

/// Locally optimal design on `grid` for the exposure-only model `feature_map` at `beta`.
pub fn solve_optimal_design(
    grid: &CandidateGrid,
    beta: &DVector<f64>,
    family: &Family,
    feature_map: &FeatureMap,
    opts: &SolverOptions,
) -> Result<OptimalDesign> {
    if grid.points.len() < 2 {
        return Err(Error::SingularInformation);
    }
    let model = GridModel::new(&grid.points, beta, family, feature_map)?;
    let n = grid.points.len();
    let k = model.k as f64;
    let crit = opts.criterion;
    let mut w = vec![1.0 / n as f64; n];
    let mut info = model.info(&w);
    let mut value = crit.value(&info).ok_or(Error::SingularInformation)?;
    let mut history = vec![value];
    let power = match crit {
        DesignCriterion::D => 1.0,
        DesignCriterion::A => 0.5,
        DesignCriterion::E => 1.0,
    };

    let mut iterations = 0;
    let mut converged = false;
    let mut near_flat = false;
    let mut certificate;
    loop {
        let (gains, target) = model.gains(crit, &info).ok_or(Error::SingularInformation)?;
        let (gmax, gmin) = gains
            .iter()
            .fold((f64::NEG_INFINITY, f64::INFINITY), |(a, b), &g| (a.max(g), b.min(g)));
        certificate = k * gmax / target;
        if iterations == 0 && k * (gmax - gmin) / target < opts.tol {
            near_flat = true;
        }
        if certificate <= k + opts.tol {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        iterations += 1;

        // Multiplicative sweep.
        let mut cand: Vec<f64> = w
            .iter()
            .zip(&gains)
            .map(|(&wj, &g)| wj * (g / target).max(0.0).powf(power))
            .collect();
        let total: f64 = cand.iter().sum();
        cand.iter_mut().for_each(|v| *v /= total);
        let (next_w, next_info, next_value) = accept_monotone(&model, crit, &w, cand, value);
        w = next_w;
        info = next_info;
        value = next_value;

        if crit == DesignCriterion::D {
            if let Some(inv) = linalg::spd_inverse(&info)
                && let Some((nw, ninfo, nval)) = vertex_exchange(&model, &w, &inv, value)
            {
                w = nw;
                info = ninfo;
                value = nval;
            }
            if let Some((ninfo, nval)) = neighbor_exchange(&model, &mut w, info.clone(), value) {
                info = ninfo;
                value = nval;
            }
        }
        debug_assert!(
            value >= history[history.len() - 1] - 1e-9 * value.abs().max(1.0),
            "criterion decreased"
        );
        history.push(value);
    }

    let (support, weights): (Vec<_>, Vec<_>) = grid
        .points
        .iter()
        .zip(&w)
        .filter(|(_, wj)| **wj > 0.0)
        .map(|(x, wj)| (x.clone(), *wj))
        .unzip();
    let design = Design::normalized(support, weights)?;
    Ok(OptimalDesign {
        design,
        criterion: crit,
        value,
        certificate,
        iterations,
        converged,
        near_flat,
        history,
    })
}

/// Accepts `cand` if it does not lower the criterion, otherwise backtracks along
/// the segment from `w` to `cand`.
fn accept_monotone(
    model: &GridModel,
    crit: DesignCriterion,
    w: &[f64],
    cand: Vec<f64>,
    value: f64,
) -> (Vec<f64>, DMatrix<f64>, f64) {
    let mut t = 1.0;
    for _ in 0..30 {
        let trial: Vec<f64> = if t == 1.0 {
            cand.clone()
        } else {
            w.iter().zip(&cand).map(|(&a, &b)| (1.0 - t) * a + t * b).collect()
        };
        let info = model.info(&trial);
        if let Some(v) = crit.value(&info)
            && v >= value
        {
            return (trial, info, v);
        }
        t *= 0.5;
    }
    let info = model.info(w);
    (w.to_vec(), info, value)
}

/// Moves mass from the least to the most sensitive support point with the exact
/// D-optimal step length.
fn vertex_exchange(
    model: &GridModel,
    w: &[f64],
    inv: &DMatrix<f64>,
    value: f64,
) -> Option<(Vec<f64>, DMatrix<f64>, f64)> {
    let n = w.len();
    let d: Vec<f64> = (0..n).map(|j| model.quad(j, inv)).collect();
    let jmax = (0..n).max_by(|&a, &b| d[a].total_cmp(&d[b]))?;
    let jmin = (0..n)
        .filter(|&j| w[j] > 0.0 && j != jmax)
        .min_by(|&a, &b| d[a].total_cmp(&d[b]))?;
    let dab = model.bilinear(jmax, jmin, inv);
    let denom = 2.0 * (d[jmax] * d[jmin] - dab * dab);
    if !(denom > 0.0) {
        return None;
    }
    let delta = ((d[jmax] - d[jmin]) / denom).clamp(0.0, w[jmin]);
    if delta <= 0.0 {
        return None;
    }
    let mut nw = w.to_vec();
    nw[jmax] += delta;
    nw[jmin] -= delta;
    if nw[jmin] < 1e-300 {
        nw[jmin] = 0.0;
    }
    let info = model.info(&nw);
    let v = DesignCriterion::D.value(&info)?;
    (v >= value).then_some((nw, info, v))
}

/// Sweeps over consecutive support points (grid order), moving mass between each
/// pair with the exact D-optimal step. Collapses the spread of weight over
/// neighbouring grid points that plain multiplicative updates leave behind.
fn neighbor_exchange(
    model: &GridModel,
    w: &mut [f64],
    mut info: DMatrix<f64>,
    value: f64,
) -> Option<(DMatrix<f64>, f64)> {
    let start = w.to_vec();
    let support: Vec<usize> = (0..w.len()).filter(|&j| w[j] > 0.0).collect();
    let k = model.k;
    for pair in support.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if w[a] == 0.0 && w[b] == 0.0 {
            continue;
        }
        let inv = linalg::spd_inverse(&info)?;
        let da = model.quad(a, &inv);
        let db = model.quad(b, &inv);
        let dab = model.bilinear(a, b, &inv);
        let denom = 2.0 * (da * db - dab * dab);
        if !(denom > 0.0) {
            continue;
        }
        // Positive delta moves mass from b to a.
        let delta = ((da - db) / denom).clamp(-w[a], w[b]);
        if delta == 0.0 {
            continue;
        }
        w[a] += delta;
        w[b] -= delta;
        if w[a] < 1e-300 {
            w[a] = 0.0;
        }
        if w[b] < 1e-300 {
            w[b] = 0.0;
        }
        for p in 0..k {
            for q in 0..k {
                info[(p, q)] += delta * (model.f[(a, p)] * model.f[(a, q)] - model.f[(b, p)] * model.f[(b, q)]);
            }
        }
    }
    // Rebuild from scratch to avoid drift from the incremental updates.
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    let info = model.info(w);
    match DesignCriterion::D.value(&info) {
        Some(v) if v >= value => Some((info, v)),
        _ => {
            w.copy_from_slice(&start);
            None
        }
    }
}

/// D-sensitivity `d(x) = u(x) Phi(x)' I(xi, beta)^{-1} Phi(x)`.
pub fn sensitivity(
    x: &[f64],
    design: &Design,
    beta: &DVector<f64>,
    family: &Family,
    feature_map: &FeatureMap,
) -> Result<f64> {
    let info = information_matrix(design, beta, family, feature_map)?;
    if !linalg::is_full_rank(&info) {
        return Err(Error::SingularInformation);
    }
    let inv = linalg::spd_inverse(&info).ok_or(Error::SingularInformation)?;
    let phi = feature_map.eval(x, &[])?;
    let u = family.weight_at(phi.dot(beta));
    Ok(u * (phi.transpose() * inv * &phi)[(0, 0)])
}

/// Maximum D-sensitivity of `design` over the grid points.
pub fn max_sensitivity(
    grid: &CandidateGrid,
    design: &Design,
    beta: &DVector<f64>,
    family: &Family,
    feature_map: &FeatureMap,
) -> Result<f64> {
    let info = information_matrix(design, beta, family, feature_map)?;
    if !linalg::is_full_rank(&info) {
        return Err(Error::SingularInformation);
    }
    let inv = linalg::spd_inverse(&info).ok_or(Error::SingularInformation)?;
    let model = GridModel::new(&grid.points, beta, family, feature_map)?;
    Ok((0..grid.points.len())
        .map(|j| model.quad(j, &inv))
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Merges nearby support points, drops light ones, and caps the support size at
/// `|Phi|(|Phi|+1)/2`.
///
/// Points are visited from heaviest to lightest; each joins the first cluster
/// whose seed lies within `merge_radius`, so clusters cannot chain.
pub fn prune_design(design: &Design, merge_radius: f64, min_weight: f64, param_dim: usize) -> Result<Design> {
    design.validate()?;
    let mut order: Vec<usize> = (0..design.len()).collect();
    order.sort_by(|&a, &b| design.weights[b].total_cmp(&design.weights[a]).then(a.cmp(&b)));

    struct Cluster {
        seed: Vec<f64>,
        sum: Vec<f64>,
        weight: f64,
    }
    let mut clusters: Vec<Cluster> = Vec::new();
    for &i in &order {
        let x = &design.support[i];
        let w = design.weights[i];
        let hit = clusters.iter_mut().find(|c| dist(&c.seed, x) <= merge_radius);
        match hit {
            Some(c) => {
                c.weight += w;
                c.sum.iter_mut().zip(x).for_each(|(s, v)| *s += w * v);
            }
            None => clusters.push(Cluster {
                seed: x.clone(),
                sum: x.iter().map(|v| w * v).collect(),
                weight: w,
            }),
        }
    }
    clusters.retain(|c| c.weight >= min_weight && c.weight > 0.0);
    if clusters.is_empty() {
        return Err(Error::EmptyAfterPrune);
    }
    clusters.sort_by(|a, b| b.weight.total_cmp(&a.weight));
    clusters.truncate((param_dim * (param_dim + 1) / 2).max(1));
    // Report support in ascending order of the first coordinate.
    clusters.sort_by(|a, b| {
        let ca = a.sum[0] / a.weight;
        let cb = b.sum[0] / b.weight;
        ca.total_cmp(&cb)
    });
    let support = clusters
        .iter()
        .map(|c| c.sum.iter().map(|s| s / c.weight).collect())
        .collect();
    let weights = clusters.iter().map(|c| c.weight).collect();
    Design::normalized(support, weights)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
