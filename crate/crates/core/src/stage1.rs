//! First-stage exposure model: importance-weighted ridge regression of the
//! measured exposures on geographic covariates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::adapt::ImportanceWeights;
use crate::error::{Error, Result};
use crate::linalg;

/// Monitoring-site data: measured exposures `x*` and geographic covariates `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstStageData {
    pub ids: Vec<String>,
    /// `n* x p`.
    pub exposures: DMatrix<f64>,
    /// `n* x d`.
    pub covariates: DMatrix<f64>,
}

impl FirstStageData {
    pub fn new(ids: Vec<String>, exposures: DMatrix<f64>, covariates: DMatrix<f64>) -> Result<Self> {
        let n = exposures.nrows();
        if covariates.nrows() != n || ids.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: covariates.nrows().min(ids.len()),
                context: "first-stage rows",
            });
        }
        if exposures.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "first stage needs at least one exposure column".into(),
            ));
        }
        if n <= covariates.ncols() {
            return Err(Error::InvalidArgument(format!(
                "first stage needs more rows than covariates ({n} <= {})",
                covariates.ncols()
            )));
        }
        if exposures.iter().chain(covariates.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "first-stage data contains non-finite values".into(),
            ));
        }
        Ok(FirstStageData {
            ids,
            exposures,
            covariates,
        })
    }

    /// Numbered ids `0..n`.
    pub fn from_matrices(exposures: DMatrix<f64>, covariates: DMatrix<f64>) -> Result<Self> {
        let ids = (0..exposures.nrows()).map(|i| i.to_string()).collect();
        Self::new(ids, exposures, covariates)
    }

    pub fn len(&self) -> usize {
        self.exposures.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.exposures.nrows() == 0
    }

    pub fn exposure_dim(&self) -> usize {
        self.exposures.ncols()
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariates.ncols()
    }

    /// Rows selected by index, with repetition.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        FirstStageData {
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
            exposures: self.exposures.select_rows(rows),
            covariates: self.covariates.select_rows(rows),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPredictor {
    /// `(d + 1) x p`; row 0 is the intercept.
    pub coefficients: DMatrix<f64>,
    pub ridge: f64,
    /// FNV-1a hash of the training weights, for provenance.
    pub weight_checksum: u64,
    pub n_train: usize,
}

pub const DEFAULT_RIDGE: f64 = 1e-8;

fn with_intercept(r: &DMatrix<f64>) -> DMatrix<f64> {
    r.clone().insert_column(0, 1.0)
}

fn checksum(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Minimizes `(1/n*) sum_i w_i |h(r_i) - x*_i|^2 + ridge * |slopes|^2`.
///
/// Weights are rescaled to mean one first, so the solution does not depend on
/// their overall scale. The intercept is not penalized.
pub fn fit_weighted_linear(data: &FirstStageData, weights: &ImportanceWeights, ridge: f64) -> Result<LinearPredictor> {
    let n = data.len();
    if weights.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: weights.len(),
            context: "importance weights",
        });
    }
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "ridge must be non-negative, got {ridge}"
        )));
    }
    let total: f64 = weights.values.iter().sum();
    if !(total > 0.0) {
        return Err(Error::AllZeroWeights);
    }
    let w = DVector::from_iterator(n, weights.values.iter().map(|v| v * n as f64 / total));
    let design = with_intercept(&data.covariates);
    let k = design.ncols();
    let mut gram = linalg::weighted_gram(&design, &w) / n as f64;
    for j in 1..k {
        gram[(j, j)] += ridge;
    }
    if ridge == 0.0 && !linalg::is_full_rank(&gram) {
        return Err(Error::RankDeficient("weighted covariates are collinear".into()));
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("weighted normal equations are singular".into()))?;
    let p = data.exposure_dim();
    let mut coefficients = DMatrix::zeros(k, p);
    for c in 0..p {
        let target = data.exposures.column(c).into_owned();
        let rhs = linalg::weighted_xty(&design, &w, &target) / n as f64;
        coefficients.set_column(c, &chol.solve(&rhs));
    }
    if coefficients.iter().any(|v| !v.is_finite()) {
        return Err(Error::RankDeficient("non-finite coefficients".into()));
    }
    Ok(LinearPredictor {
        coefficients,
        ridge,
        weight_checksum: checksum(&weights.values),
        n_train: n,
    })
}

/// `x_hat_i = intercept + r_i . slopes` for every row of `covariates`.
pub fn predict_exposure(predictor: &LinearPredictor, covariates: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = predictor.coefficients.nrows() - 1;
    if covariates.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: covariates.ncols(),
            context: "prediction covariates",
        });
    }
    Ok(with_intercept(covariates) * &predictor.coefficients)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> FirstStageData {
        let r = DMatrix::from_row_slice(
            8,
            2,
            &[
                0.1, 1.0, 0.5, -0.3, 1.2, 0.7, -0.8, 0.2, 0.0, -1.1, 2.0, 0.4, -0.5, -0.6, 0.9, 1.5,
            ],
        );
        let x = DMatrix::from_fn(8, 1, |i, _| {
            0.5 + 1.5 * r[(i, 0)] - 0.7 * r[(i, 1)] + 0.1 * ((i * 5 % 3) as f64 - 1.0)
        });
        FirstStageData::from_matrices(x, r).unwrap()
    }

    fn ols(data: &FirstStageData) -> DVector<f64> {
        let x = with_intercept(&data.covariates);
        (x.transpose() * &x)
            .cholesky()
            .unwrap()
            .solve(&(x.transpose() * data.exposures.column(0)))
    }

    #[test]
    fn uniform_weights_reduce_to_ols() {
        let data = toy();
        let p = fit_weighted_linear(&data, &ImportanceWeights::uniform(8), 0.0).unwrap();
        assert!((p.coefficients.column(0) - ols(&data)).amax() < 1e-10);
    }

    #[test]
    fn zero_weight_rows_drop_out() {
        let data = toy();
        let keep = [0usize, 1, 2, 4, 5, 7];
        let mut w = vec![0.0; 8];
        keep.iter().for_each(|&i| w[i] = 1.0);
        let p = fit_weighted_linear(&data, &ImportanceWeights::from_values(w).unwrap(), 0.0).unwrap();
        let sub = ols(&data.select_rows(&keep));
        assert!((p.coefficients.column(0) - sub).amax() < 1e-10);
    }

    #[test]
    fn collinear_covariates_without_ridge() {
        let r = DMatrix::from_fn(6, 2, |i, j| (i as f64) * (j as f64 + 1.0));
        let x = DMatrix::from_fn(6, 1, |i, _| i as f64);
        let data = FirstStageData::from_matrices(x, r).unwrap();
        let w = ImportanceWeights::uniform(6);
        assert!(matches!(
            fit_weighted_linear(&data, &w, 0.0),
            Err(Error::RankDeficient(_))
        ));
        assert!(fit_weighted_linear(&data, &w, 1e-3).is_ok());
    }

    #[test]
    fn prediction_examples() {
        let pred = LinearPredictor {
            coefficients: DMatrix::from_column_slice(3, 1, &[1.0, 2.0, -1.0]),
            ridge: 0.0,
            weight_checksum: 0,
            n_train: 0,
        };
        let out = predict_exposure(&pred, &DMatrix::from_row_slice(1, 2, &[3.0, 4.0])).unwrap();
        assert_eq!(out[(0, 0)], 3.0);
        let zeros = predict_exposure(&pred, &DMatrix::zeros(4, 2)).unwrap();
        assert!(zeros.iter().all(|&v| v == 1.0));
        assert!(predict_exposure(&pred, &DMatrix::zeros(4, 3)).is_err());
    }

    #[test]
    fn residuals_orthogonal_to_covariates() {
        let data = toy();
        let p = fit_weighted_linear(&data, &ImportanceWeights::uniform(8), 0.0).unwrap();
        let fitted = predict_exposure(&p, &data.covariates).unwrap();
        let resid = &data.exposures - fitted;
        let x = with_intercept(&data.covariates);
        assert!((x.transpose() * resid).amax() < 1e-12);
    }
}
