//! Simulation harness: Gaussian geographic covariates, a linear exposure
//! surface with Gaussian noise, and a logistic health outcome.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::quantile_sorted;
use crate::error::{Error, Result};
use crate::estimator::{OdiwiConfig, SecondStageData, naive_estimate, odiwi_estimate};
use crate::glm::{FamilyKind, expit};
use crate::rng;
use crate::stage1::FirstStageData;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n_first: usize,
    pub n_second: usize,
    pub covariate_dim: usize,
    /// Defaults to `(1, ..., 1) / sqrt(d)`.
    pub gamma: Option<Vec<f64>>,
    /// Exposure noise sd. When absent it is set from `snr` and the drawn covariance.
    pub sigma_eps: Option<f64>,
    /// Target `Var(gamma' r) / sigma_eps^2`.
    pub snr: f64,
    pub beta0: f64,
    pub beta_x: f64,
    pub replications: usize,
    /// Second-stage covariate mean shift, in covariate standard deviations.
    pub shift: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_first: 500,
            n_second: 2000,
            covariate_dim: 3,
            gamma: None,
            sigma_eps: None,
            snr: 4.0,
            beta0: 0.0,
            beta_x: 1.5,
            replications: 100,
            shift: 0.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_first == 0 || self.n_second == 0 || self.covariate_dim == 0 || self.replications == 0 {
            return bad("sizes must be positive".into());
        }
        if let Some(g) = &self.gamma
            && g.len() != self.covariate_dim
        {
            return bad(format!(
                "gamma has {} entries, expected {}",
                g.len(),
                self.covariate_dim
            ));
        }
        match self.sigma_eps {
            Some(s) if !(s > 0.0) => return bad("sigma_eps must be positive".into()),
            None if !(self.snr > 0.0) => return bad("snr must be positive".into()),
            _ => {}
        }
        if !self.shift.is_finite() {
            return bad("shift must be finite".into());
        }
        Ok(())
    }

    pub fn gamma(&self) -> Vec<f64> {
        self.gamma
            .clone()
            .unwrap_or_else(|| vec![1.0 / (self.covariate_dim as f64).sqrt(); self.covariate_dim])
    }
}

/// Population quantities drawn once per replication.
#[derive(Debug, Clone, PartialEq)]
pub struct DgpTruth {
    pub sigma: DMatrix<f64>,
    chol: DMatrix<f64>,
    pub gamma: DVector<f64>,
    pub sigma_eps: f64,
}

impl DgpTruth {
    /// `Var(gamma' r)`.
    pub fn signal_variance(&self) -> f64 {
        (self.gamma.transpose() * &self.sigma * &self.gamma)[(0, 0)]
    }
}

/// `Sigma = U'U` with `U_ij ~ Unif[0, 1]`.
pub fn draw_truth(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Result<DgpTruth> {
    cfg.validate()?;
    let d = cfg.covariate_dim;
    loop {
        let u = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>());
        let sigma = u.transpose() * &u;
        // A singular draw has probability zero; redraw rather than fail.
        let Some(chol) = sigma.clone().cholesky() else { continue };
        let gamma = DVector::from_vec(cfg.gamma());
        let signal = (gamma.transpose() * &sigma * &gamma)[(0, 0)];
        let sigma_eps = cfg.sigma_eps.unwrap_or_else(|| (signal / cfg.snr).sqrt());
        return Ok(DgpTruth {
            chol: chol.l(),
            sigma,
            gamma,
            sigma_eps,
        });
    }
}

fn draw_covariates(truth: &DgpTruth, n: usize, mean: &DVector<f64>, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let d = truth.gamma.len();
    let z = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut r = z * truth.chol.transpose();
    for mut row in r.row_iter_mut() {
        row += mean.transpose();
    }
    r
}

fn draw_exposures(truth: &DgpTruth, r: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut x = r * &truth.gamma;
    for v in x.iter_mut() {
        *v += truth.sigma_eps * rng.sample::<f64, _>(StandardNormal);
    }
    DMatrix::from_column_slice(x.len(), 1, x.as_slice())
}

pub fn gen_first_stage(cfg: &SimConfig, truth: &DgpTruth, rng: &mut ChaCha8Rng) -> Result<FirstStageData> {
    let mean = DVector::zeros(cfg.covariate_dim);
    let r = draw_covariates(truth, cfg.n_first, &mean, rng);
    let x = draw_exposures(truth, &r, rng);
    FirstStageData::from_matrices(x, r)
}

/// Second-stage data together with the true exposures, which estimators never see.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSecondStage {
    pub data: SecondStageData,
    pub true_exposure: DMatrix<f64>,
}

pub fn gen_second_stage(cfg: &SimConfig, truth: &DgpTruth, rng: &mut ChaCha8Rng) -> Result<SimulatedSecondStage> {
    let mean = truth.sigma.diagonal().map(|v| cfg.shift * v.sqrt());
    let r = draw_covariates(truth, cfg.n_second, &mean, rng);
    let x = draw_exposures(truth, &r, rng);
    let y = DVector::from_fn(cfg.n_second, |i, _| {
        let p = expit(cfg.beta0 + cfg.beta_x * x[(i, 0)]);
        if rng.random::<f64>() < p { 1.0 } else { 0.0 }
    });
    let data = SecondStageData::from_matrices(y, DMatrix::zeros(cfg.n_second, 0), r)?;
    Ok(SimulatedSecondStage { data, true_exposure: x })
}

/// One full replication's data.
#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    pub truth: DgpTruth,
    pub first: FirstStageData,
    pub second: SimulatedSecondStage,
}

const DGP_STREAM: u64 = 0xd6e8_feb8_6659_fd93;

/// Data for replication `rep`; the stream depends only on `(cfg.seed, rep)`.
pub fn simulate_replication(cfg: &SimConfig, rep: usize) -> Result<Replication> {
    let mut rng = rng::stream(cfg.seed, DGP_STREAM, rep as u64);
    let truth = draw_truth(cfg, &mut rng)?;
    let first = gen_first_stage(cfg, &truth, &mut rng)?;
    let second = gen_second_stage(cfg, &truth, &mut rng)?;
    Ok(Replication { truth, first, second })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub estimator: String,
    pub beta_x_true: f64,
    pub rep: usize,
    pub beta_hat: f64,
    pub error: f64,
    pub stage1_rmse: f64,
    pub flags: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub beta_x_true: f64,
    pub rep: usize,
    pub iteration: usize,
    pub beta_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentOutput {
    pub rows: Vec<MetricsRow>,
    /// ODIWI exposure-effect trajectory per replication.
    pub traces: Vec<TraceRow>,
}

pub const NAIVE: &str = "naive";
pub const ODIWI: &str = "odiwi";

fn rmse(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    ((a - b).norm_squared() / a.len() as f64).sqrt()
}

fn failed_row(estimator: &str, beta_x: f64, rep: usize, err: &Error) -> MetricsRow {
    MetricsRow {
        estimator: estimator.into(),
        beta_x_true: beta_x,
        rep,
        beta_hat: f64::NAN,
        error: f64::NAN,
        stage1_rmse: f64::NAN,
        flags: format!("failed: {}", err.to_string().replace(',', ";")),
    }
}

fn run_cell_rep(cfg: &SimConfig, beta_x: f64, rep: usize, odiwi: &OdiwiConfig) -> (Vec<MetricsRow>, Vec<TraceRow>) {
    let cell = SimConfig { beta_x, ..cfg.clone() };
    let data = match simulate_replication(&cell, rep) {
        Ok(d) => d,
        Err(e) => {
            return (
                vec![failed_row(NAIVE, beta_x, rep, &e), failed_row(ODIWI, beta_x, rep, &e)],
                vec![],
            );
        }
    };
    let truth_x = &data.second.true_exposure;
    let mut rows = Vec::with_capacity(2);
    match naive_estimate(&data.first, &data.second.data, FamilyKind::BernoulliLogit) {
        Ok(n) => rows.push(MetricsRow {
            estimator: NAIVE.into(),
            beta_x_true: beta_x,
            rep,
            beta_hat: n.fit.beta[1],
            error: n.fit.beta[1] - beta_x,
            stage1_rmse: rmse(&n.imputed, truth_x),
            flags: String::new(),
        }),
        Err(e) => rows.push(failed_row(NAIVE, beta_x, rep, &e)),
    }
    let mut traces = Vec::new();
    let chain_cfg = OdiwiConfig {
        seed: rng::derive_seed(odiwi.seed, rep as u64),
        ..odiwi.clone()
    };
    match odiwi_estimate(&data.first, &data.second.data, FamilyKind::BernoulliLogit, &chain_cfg) {
        Ok(res) => {
            let b = res.exposure_effect();
            let mut flags = Vec::new();
            if !res.diagnostics.all_certified {
                flags.push("uncertified_design");
            }
            if res.diagnostics.near_flat_designs > 0 {
                flags.push("near_flat_design");
            }
            rows.push(MetricsRow {
                estimator: ODIWI.into(),
                beta_x_true: beta_x,
                rep,
                beta_hat: b,
                error: b - beta_x,
                stage1_rmse: rmse(&res.final_exposures, truth_x),
                flags: flags.join(";"),
            });
            for (l, beta) in res.mean_trajectory().iter().enumerate() {
                traces.push(TraceRow {
                    beta_x_true: beta_x,
                    rep,
                    iteration: l,
                    beta_hat: beta[res.exposure_index],
                });
            }
        }
        Err(e) => rows.push(failed_row(ODIWI, beta_x, rep, &e)),
    }
    (rows, traces)
}

/// Both estimators on fresh data for every `(beta_x, replication)` pair.
///
/// Replication `rep` uses the same covariate and noise streams in every cell.
/// Output order is fixed, so serial and parallel runs agree exactly.
pub fn run_experiment(
    cfg: &SimConfig,
    beta_grid: &[f64],
    odiwi: &OdiwiConfig,
    parallel: bool,
) -> Result<ExperimentOutput> {
    cfg.validate()?;
    odiwi.validate()?;
    let tasks: Vec<(f64, usize)> = beta_grid
        .iter()
        .flat_map(|&b| (0..cfg.replications).map(move |r| (b, r)))
        .collect();
    let results: Vec<(Vec<MetricsRow>, Vec<TraceRow>)> = if parallel {
        tasks.par_iter().map(|&(b, r)| run_cell_rep(cfg, b, r, odiwi)).collect()
    } else {
        tasks.iter().map(|&(b, r)| run_cell_rep(cfg, b, r, odiwi)).collect()
    };
    let mut out = ExperimentOutput::default();
    for (rows, traces) in results {
        out.rows.extend(rows);
        out.traces.extend(traces);
    }
    // Group rows by estimator, then cell, then replication.
    out.rows.sort_by(|a, b| {
        (a.estimator.as_str(), a.beta_x_true, a.rep)
            .partial_cmp(&(b.estimator.as_str(), b.beta_x_true, b.rep))
            .expect("finite grid values")
    });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub estimator: String,
    pub beta_x_true: f64,
    pub n_ok: usize,
    pub n_failed: usize,
    pub mean_error: f64,
    pub sd_error: f64,
    pub q025: f64,
    pub q975: f64,
    pub mean_abs_error: f64,
    pub mean_stage1_rmse: f64,
}

impl SummaryRow {
    /// Monte-Carlo standard error of `mean_error`.
    pub fn mc_se(&self) -> f64 {
        self.sd_error / (self.n_ok as f64).sqrt()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

/// Per-cell mean, sd and 2.5% / 97.5% quantiles of the error.
pub fn summarize(rows: &[MetricsRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|(e, b)| *e == r.estimator && *b == r.beta_x_true) {
            keys.push((r.estimator.clone(), r.beta_x_true));
        }
    }
    keys.into_iter()
        .map(|(est, b)| {
            let cell: Vec<&MetricsRow> = rows
                .iter()
                .filter(|r| r.estimator == est && r.beta_x_true == b)
                .collect();
            let ok: Vec<&MetricsRow> = cell.iter().copied().filter(|r| r.error.is_finite()).collect();
            let errors: Vec<f64> = ok.iter().map(|r| r.error).collect();
            let mut sorted = errors.clone();
            sorted.sort_by(f64::total_cmp);
            let abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
            let rm: Vec<f64> = ok.iter().map(|r| r.stage1_rmse).collect();
            SummaryRow {
                estimator: est,
                beta_x_true: b,
                n_ok: ok.len(),
                n_failed: cell.len() - ok.len(),
                mean_error: mean(&errors),
                sd_error: sd(&errors),
                q025: quantile_sorted(&sorted, 0.025),
                q975: quantile_sorted(&sorted, 0.975),
                mean_abs_error: mean(&abs),
                mean_stage1_rmse: mean(&rm),
            }
        })
        .collect()
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    let (n, m) = (xa.len(), xb.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let v = xa[i].min(xb[j]);
        while i < n && xa[i] <= v {
            i += 1;
        }
        while j < m && xb[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let en = ((n * m) as f64 / (n + m) as f64).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    (d, kolmogorov_q(lambda))
}

/// Survival function of the Kolmogorov distribution.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = 2.0 * (-1f64).powi(k - 1) * (-2.0 * (k as f64 * lambda).powi(2)).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}
