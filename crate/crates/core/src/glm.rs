//! Generalized linear models for the second (health-outcome) stage.
//!
//! Two families are supported: Bernoulli with the logit link and Gaussian with
//! the identity link. Fitting uses iteratively reweighted least squares
//! (Newton-Raphson for the canonical links) with step halving whenever the
//! log-likelihood would decrease.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::Design;
use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    BernoulliLogit,
    GaussianIdentity,
}

impl std::str::FromStr for FamilyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "logit" | "logistic" | "bernoulli" | "bernoulli_logit" | "binomial" => Ok(FamilyKind::BernoulliLogit),
            "gaussian" | "normal" | "identity" | "gaussian_identity" | "linear" => Ok(FamilyKind::GaussianIdentity),
            other => Err(Error::InvalidArgument(format!("unknown family {other:?}"))),
        }
    }
}

/// Outcome distribution together with its dispersion `phi`.
///
/// For the Bernoulli family `phi` is fixed at 1. For the Gaussian family it is the
/// residual variance, estimated by [`fit_glm`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Family {
    pub kind: FamilyKind,
    pub dispersion: f64,
}

impl Family {
    pub fn bernoulli_logit() -> Self {
        Family {
            kind: FamilyKind::BernoulliLogit,
            dispersion: 1.0,
        }
    }

    pub fn gaussian(sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "gaussian dispersion must be positive, got {sigma2}"
            )));
        }
        Ok(Family {
            kind: FamilyKind::GaussianIdentity,
            dispersion: sigma2,
        })
    }

    pub fn from_kind(kind: FamilyKind) -> Self {
        match kind {
            FamilyKind::BernoulliLogit => Self::bernoulli_logit(),
            FamilyKind::GaussianIdentity => Family { kind, dispersion: 1.0 },
        }
    }

    /// Inverse link.
    pub fn mean(&self, eta: f64) -> f64 {
        match self.kind {
            FamilyKind::BernoulliLogit => expit(eta),
            FamilyKind::GaussianIdentity => eta,
        }
    }

    /// Variance function `V(mu)`.
    pub fn variance(&self, mu: f64) -> f64 {
        match self.kind {
            FamilyKind::BernoulliLogit => mu * (1.0 - mu),
            FamilyKind::GaussianIdentity => 1.0,
        }
    }

    /// `d mu / d eta` at the given linear predictor.
    pub fn dmu_deta(&self, eta: f64) -> f64 {
        match self.kind {
            FamilyKind::BernoulliLogit => {
                let mu = expit(eta);
                mu * (1.0 - mu)
            }
            FamilyKind::GaussianIdentity => 1.0,
        }
    }

    /// Model weight `u = (dmu/deta)^2 / (phi V(mu))` at a linear predictor value.
    pub fn weight_at(&self, eta: f64) -> f64 {
        match self.kind {
            // Written out directly: the general formula loses precision in the tails.
            FamilyKind::BernoulliLogit => {
                let mu = expit(eta);
                mu * (1.0 - mu)
            }
            FamilyKind::GaussianIdentity => 1.0 / self.dispersion,
        }
    }

    pub fn in_support(&self, y: f64) -> bool {
        match self.kind {
            FamilyKind::BernoulliLogit => y == 0.0 || y == 1.0,
            FamilyKind::GaussianIdentity => y.is_finite(),
        }
    }
}

pub fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `log(1 + exp(eta))` without overflow.
fn log1pexp(eta: f64) -> f64 {
    if eta > 35.0 {
        eta
    } else if eta < -35.0 {
        eta.exp()
    } else {
        eta.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "term", content = "index", rename_all = "snake_case")]
pub enum Term {
    Intercept,
    Exposure(usize),
    Covariate(usize),
    ExposureSquared(usize),
}

/// Ordered list of model terms mapping `(x, z)` to the feature vector `Phi(x, z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    terms: Vec<Term>,
    exposure_dim: usize,
    covariate_dim: usize,
}

impl FeatureMap {
    pub fn new(terms: Vec<Term>, exposure_dim: usize, covariate_dim: usize) -> Result<Self> {
        if terms.first() != Some(&Term::Intercept) {
            return Err(Error::InvalidArgument(
                "feature map must start with the intercept".into(),
            ));
        }
        for t in &terms[1..] {
            let ok = match *t {
                Term::Intercept => false,
                Term::Exposure(i) | Term::ExposureSquared(i) => i < exposure_dim,
                Term::Covariate(j) => j < covariate_dim,
            };
            if !ok {
                return Err(Error::InvalidArgument(format!("invalid feature term {t:?}")));
            }
        }
        Ok(FeatureMap {
            terms,
            exposure_dim,
            covariate_dim,
        })
    }

    /// `Phi(x, z) = (1, x, z)`.
    pub fn standard(exposure_dim: usize, covariate_dim: usize) -> Self {
        let mut terms = vec![Term::Intercept];
        terms.extend((0..exposure_dim).map(Term::Exposure));
        terms.extend((0..covariate_dim).map(Term::Covariate));
        FeatureMap {
            terms,
            exposure_dim,
            covariate_dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn exposure_dim(&self) -> usize {
        self.exposure_dim
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariate_dim
    }

    /// Coefficient position of the linear term for exposure component `i`.
    pub fn exposure_index(&self, i: usize) -> Option<usize> {
        self.terms.iter().position(|t| *t == Term::Exposure(i))
    }

    pub fn term_names(&self) -> Vec<String> {
        self.terms
            .iter()
            .map(|t| match *t {
                Term::Intercept => "intercept".to_string(),
                Term::Exposure(i) if self.exposure_dim == 1 => {
                    let _ = i;
                    "x".to_string()
                }
                Term::Exposure(i) => format!("x{}", i + 1),
                Term::ExposureSquared(i) if self.exposure_dim == 1 => {
                    let _ = i;
                    "x^2".to_string()
                }
                Term::ExposureSquared(i) => format!("x{}^2", i + 1),
                Term::Covariate(j) => format!("z{}", j + 1),
            })
            .collect()
    }

    pub fn eval(&self, x: &[f64], z: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.exposure_dim {
            return Err(Error::DimensionMismatch {
                expected: self.exposure_dim,
                got: x.len(),
                context: "exposure point",
            });
        }
        if z.len() != self.covariate_dim {
            return Err(Error::DimensionMismatch {
                expected: self.covariate_dim,
                got: z.len(),
                context: "covariate vector",
            });
        }
        Ok(DVector::from_iterator(
            self.terms.len(),
            self.terms.iter().map(|t| match *t {
                Term::Intercept => 1.0,
                Term::Exposure(i) => x[i],
                Term::ExposureSquared(i) => x[i] * x[i],
                Term::Covariate(j) => z[j],
            }),
        ))
    }

    /// Stacks `Phi(x_i, z_i)` row by row. `z` may have zero columns.
    pub fn design_matrix(&self, x: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != z.nrows() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                got: z.nrows(),
                context: "covariate rows",
            });
        }
        if x.ncols() != self.exposure_dim || z.ncols() != self.covariate_dim {
            return Err(Error::DimensionMismatch {
                expected: self.exposure_dim + self.covariate_dim,
                got: x.ncols() + z.ncols(),
                context: "feature map input columns",
            });
        }
        let n = x.nrows();
        let mut out = DMatrix::zeros(n, self.terms.len());
        for i in 0..n {
            for (c, t) in self.terms.iter().enumerate() {
                out[(i, c)] = match *t {
                    Term::Intercept => 1.0,
                    Term::Exposure(a) => x[(i, a)],
                    Term::ExposureSquared(a) => x[(i, a)] * x[(i, a)],
                    Term::Covariate(j) => z[(i, j)],
                };
            }
        }
        Ok(out)
    }

    /// Drops covariate terms, returning the exposure-only map and matching coefficients.
    ///
    /// With `z_fixed = None` covariate coefficients are ignored. Otherwise their
    /// contribution at `z_fixed` is absorbed into the intercept.
    pub fn exposure_only(&self, beta: &DVector<f64>, z_fixed: Option<&[f64]>) -> Result<(FeatureMap, DVector<f64>)> {
        check_beta(self, beta)?;
        if let Some(z) = z_fixed
            && z.len() != self.covariate_dim
        {
            return Err(Error::DimensionMismatch {
                expected: self.covariate_dim,
                got: z.len(),
                context: "fixed covariate vector",
            });
        }
        let mut terms = Vec::new();
        let mut coefs = Vec::new();
        let mut shift = 0.0;
        for (t, &b) in self.terms.iter().zip(beta.iter()) {
            match *t {
                Term::Covariate(j) => {
                    if let Some(z) = z_fixed {
                        shift += b * z[j];
                    }
                }
                other => {
                    terms.push(other);
                    coefs.push(b);
                }
            }
        }
        coefs[0] += shift;
        Ok((
            FeatureMap {
                terms,
                exposure_dim: self.exposure_dim,
                covariate_dim: 0,
            },
            DVector::from_vec(coefs),
        ))
    }
}

fn check_beta(map: &FeatureMap, beta: &DVector<f64>) -> Result<()> {
    if beta.len() != map.dim() {
        return Err(Error::DimensionMismatch {
            expected: map.dim(),
            got: beta.len(),
            context: "coefficient vector",
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmFit {
    pub beta: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub score_norm: f64,
    /// Family with the fitted dispersion filled in.
    pub family: Family,
}

impl GlmFit {
    pub fn std_errors(&self) -> DVector<f64> {
        self.cov.diagonal().map(|v| v.max(0.0).sqrt())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IrlsOptions {
    pub max_iter: usize,
    /// Convergence threshold on the Euclidean norm of the score vector.
    pub tol: f64,
    /// Coefficient magnitude treated as evidence of separation.
    pub beta_cap: f64,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        IrlsOptions {
            max_iter: 100,
            tol: 1e-8,
            beta_cap: 30.0,
        }
    }
}

fn linear_predictor(x: &DMatrix<f64>, beta: &DVector<f64>, offset: Option<&DVector<f64>>) -> DVector<f64> {
    let mut eta = x * beta;
    if let Some(o) = offset {
        eta += o;
    }
    eta
}

/// Log-likelihood at `beta`. For the Gaussian family `family.dispersion` is used as
/// the variance.
pub fn log_likelihood(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    family: &Family,
    beta: &DVector<f64>,
    offset: Option<&DVector<f64>>,
) -> f64 {
    let eta = linear_predictor(x, beta, offset);
    match family.kind {
        FamilyKind::BernoulliLogit => eta.iter().zip(y.iter()).map(|(&e, &yi)| yi * e - log1pexp(e)).sum(),
        FamilyKind::GaussianIdentity => {
            let s2 = family.dispersion;
            let rss: f64 = eta.iter().zip(y.iter()).map(|(&e, &yi)| (yi - e).powi(2)).sum();
            -0.5 * (y.len() as f64) * (2.0 * std::f64::consts::PI * s2).ln() - rss / (2.0 * s2)
        }
    }
}

/// Gradient of [`log_likelihood`] with respect to `beta`.
pub fn score(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    family: &Family,
    beta: &DVector<f64>,
    offset: Option<&DVector<f64>>,
) -> DVector<f64> {
    let eta = linear_predictor(x, beta, offset);
    let resid = DVector::from_iterator(y.len(), eta.iter().zip(y.iter()).map(|(&e, &yi)| yi - family.mean(e)));
    let mut g = x.transpose() * resid;
    if family.kind == FamilyKind::GaussianIdentity {
        g /= family.dispersion;
    }
    g
}

fn validate_inputs(x: &DMatrix<f64>, y: &DVector<f64>, family: &Family, offset: Option<&DVector<f64>>) -> Result<()> {
    let (n, k) = x.shape();
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: y.len(),
            context: "outcome length",
        });
    }
    if let Some(o) = offset
        && o.len() != n
    {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: o.len(),
            context: "offset length",
        });
    }
    if n <= k {
        return Err(Error::RankDeficient(format!(
            "need more rows than coefficients ({n} <= {k})"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("design matrix has non-finite entries".into()));
    }
    if let Some(i) = y.iter().position(|&v| !family.in_support(v)) {
        return Err(Error::InvalidArgument(format!(
            "outcome {} at row {i} is outside the family support",
            y[i]
        )));
    }
    let gram = x.transpose() * x;
    if !linalg::is_full_rank(&gram) {
        return Err(Error::RankDeficient("collinear design columns".into()));
    }
    Ok(())
}

pub fn fit_glm(x: &DMatrix<f64>, y: &DVector<f64>, family: &Family, offset: Option<&DVector<f64>>) -> Result<GlmFit> {
    fit_glm_with(x, y, family, offset, &IrlsOptions::default())
}

pub fn fit_glm_with(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    family: &Family,
    offset: Option<&DVector<f64>>,
    opts: &IrlsOptions,
) -> Result<GlmFit> {
    validate_inputs(x, y, family, offset)?;
    match family.kind {
        FamilyKind::GaussianIdentity => fit_gaussian(x, y, offset),
        FamilyKind::BernoulliLogit => fit_logistic(x, y, offset, opts),
    }
}

fn fit_gaussian(x: &DMatrix<f64>, y: &DVector<f64>, offset: Option<&DVector<f64>>) -> Result<GlmFit> {
    let (n, k) = x.shape();
    let target = match offset {
        Some(o) => y - o,
        None => y.clone(),
    };
    let qr = x.clone().qr();
    let qty = qr.q().transpose() * &target;
    let beta = qr
        .r()
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::RankDeficient("triangular solve failed".into()))?;
    let resid = &target - x * &beta;
    let rss = resid.norm_squared();
    let sigma2 = rss / (n - k) as f64;
    if !(sigma2 > 0.0) {
        return Err(Error::DegenerateSample(
            "gaussian fit has zero residual variance".into(),
        ));
    }
    let family = Family::gaussian(sigma2)?;
    let gram = x.transpose() * x;
    let cov =
        linalg::spd_inverse(&gram).ok_or_else(|| Error::RankDeficient("X'X not positive definite".into()))? * sigma2;
    let loglik = log_likelihood(x, y, &family, &beta, offset);
    let score_norm = score(x, y, &family, &beta, offset).norm();
    Ok(GlmFit {
        beta,
        cov,
        loglik,
        iterations: 1,
        converged: true,
        score_norm,
        family,
    })
}

fn fit_logistic(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    offset: Option<&DVector<f64>>,
    opts: &IrlsOptions,
) -> Result<GlmFit> {
    let family = Family::bernoulli_logit();
    let n = y.len();
    let ones = y.iter().filter(|&&v| v == 1.0).count();
    if ones == 0 || ones == n {
        return Err(Error::Separation(format!("outcome is constant ({ones} of {n} ones)")));
    }
    let k = x.ncols();
    let mut beta = DVector::zeros(k);
    let mut ll = log_likelihood(x, y, &family, &beta, offset);
    let mut iterations = 0;
    loop {
        let eta = linear_predictor(x, &beta, offset);
        let w = eta.map(|e| family.weight_at(e));
        let g = score(x, y, &family, &beta, offset);
        let gnorm = g.norm();
        if gnorm <= opts.tol {
            let info = linalg::weighted_gram(x, &w);
            let cov = linalg::spd_inverse(&info)
                .ok_or_else(|| Error::Separation("information matrix is singular at the optimum".into()))?;
            return Ok(GlmFit {
                beta,
                cov,
                loglik: ll,
                iterations,
                converged: true,
                score_norm: gnorm,
                family,
            });
        }
        if iterations >= opts.max_iter {
            return Err(Error::NoConvergence {
                iterations,
                context: "irls",
            });
        }
        iterations += 1;
        let info = linalg::weighted_gram(x, &w);
        let step =
            linalg::spd_solve(&info, &g).ok_or_else(|| Error::Separation("weighted information lost rank".into()))?;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand = &beta + &step * t;
            let cand_ll = log_likelihood(x, y, &family, &cand, offset);
            if cand_ll.is_finite() && cand_ll >= ll - 1e-12 * ll.abs() {
                accepted = Some((cand, cand_ll));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, cand_ll)) = accepted else {
            return Err(Error::NoConvergence {
                iterations,
                context: "irls step halving",
            });
        };
        beta = cand;
        ll = cand_ll;
        if beta.amax() > opts.beta_cap {
            return Err(Error::Separation(format!(
                "coefficient magnitude {:.1} exceeds cap {}",
                beta.amax(),
                opts.beta_cap
            )));
        }
    }
}

/// Model weight `u(x)` of an exposure point under an exposure-only feature map.
pub fn model_weight(x_point: &[f64], beta: &DVector<f64>, family: &Family, feature_map: &FeatureMap) -> Result<f64> {
    check_beta(feature_map, beta)?;
    let phi = feature_map.eval(x_point, &[])?;
    Ok(family.weight_at(phi.dot(beta)))
}

/// `I(xi, beta) = sum_j w_j u(x_j) Phi(x_j) Phi(x_j)'`.
pub fn information_matrix(
    design: &Design,
    beta: &DVector<f64>,
    family: &Family,
    feature_map: &FeatureMap,
) -> Result<DMatrix<f64>> {
    check_beta(feature_map, beta)?;
    if design.support.is_empty() {
        return Err(Error::EmptyDesign);
    }
    design.validate()?;
    let k = feature_map.dim();
    let mut m = DMatrix::zeros(k, k);
    for (x, &w) in design.support.iter().zip(&design.weights) {
        let phi = feature_map.eval(x, &[])?;
        let u = family.weight_at(phi.dot(beta));
        m.ger(w * u, &phi, &phi, 1.0);
    }
    linalg::symmetrize(&mut m);
    Ok(m)
}
