//! The iterative optimal-design importance-weighted (ODIWI) estimator and the
//! naive two-stage baseline.
//!
//! Each iteration fits the second-stage GLM on the current imputed exposures,
//! computes a locally optimal design at the (momentum-smoothed) coefficients,
//! smooths the design into a target exposure density, reweights the
//! first-stage rows by target/source density ratios and refits the exposure
//! model with those weights.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{
    Bandwidth, DensityEstimate, ImportanceWeights, KernelShape, KernelSpec, WeightOptions, design_density,
    importance_weights, kde_fit,
};
use crate::design::{Design, DesignCriterion, SolverOptions, build_candidate_grid, prune_design, solve_optimal_design};
use crate::error::{Error, Result};
use crate::glm::{Family, FamilyKind, FeatureMap, GlmFit, fit_glm};
use crate::rng;
use crate::stage1::{DEFAULT_RIDGE, FirstStageData, LinearPredictor, fit_weighted_linear, predict_exposure};

/// Subject-level data: outcomes, personal covariates `z` and geographic covariates `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondStageData {
    pub ids: Vec<String>,
    pub outcomes: DVector<f64>,
    /// `n x q`, possibly with zero columns.
    pub covariates: DMatrix<f64>,
    /// `n x d`.
    pub geo: DMatrix<f64>,
}

impl SecondStageData {
    pub fn new(ids: Vec<String>, outcomes: DVector<f64>, covariates: DMatrix<f64>, geo: DMatrix<f64>) -> Result<Self> {
        let n = outcomes.len();
        if covariates.nrows() != n || geo.nrows() != n || ids.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: covariates.nrows().min(geo.nrows()).min(ids.len()),
                context: "second-stage rows",
            });
        }
        if outcomes
            .iter()
            .chain(covariates.iter())
            .chain(geo.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidArgument(
                "second-stage data contains non-finite values".into(),
            ));
        }
        Ok(SecondStageData {
            ids,
            outcomes,
            covariates,
            geo,
        })
    }

    pub fn from_matrices(outcomes: DVector<f64>, covariates: DMatrix<f64>, geo: DMatrix<f64>) -> Result<Self> {
        let ids = (0..outcomes.len()).map(|i| i.to_string()).collect();
        Self::new(ids, outcomes, covariates, geo)
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        SecondStageData {
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
            outcomes: self.outcomes.select_rows(rows),
            covariates: self.covariates.select_rows(rows),
            geo: self.geo.select_rows(rows),
        }
    }

    pub fn check_family(&self, family: FamilyKind) -> Result<()> {
        let f = Family::from_kind(family);
        match self.outcomes.iter().position(|&y| !f.in_support(y)) {
            Some(i) => Err(Error::Schema {
                row: i + 1,
                column: "y".into(),
                message: format!("outcome {} is outside the {family:?} support", self.outcomes[i]),
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Uniform,
    #[default]
    DirichletRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    AfterFirstIteration,
    #[default]
    AfterLastIteration,
}

/// How second-stage covariates enter the design problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CovariateMode {
    #[default]
    Ignore,
    /// Covariates fixed at their componentwise median.
    Median,
}

/// Target exposure density used for reweighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetDensity {
    #[default]
    OptimalDesign,
    /// Target equals the source estimate, which switches adaptation off.
    Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OdiwiConfig {
    pub iterations: usize,
    pub momentum: f64,
    pub num_inits: usize,
    pub init_mode: InitMode,
    pub aggregation: Aggregation,
    pub criterion: DesignCriterion,
    pub kernel: KernelShape,
    /// Target-density bandwidth as a fraction of the imputed exposure range.
    pub bandwidth_fraction: f64,
    pub clip_quantile: Option<f64>,
    pub floor_fraction: f64,
    pub grid_resolution: usize,
    /// Design merge radius as a fraction of the imputed exposure range.
    pub merge_fraction: f64,
    pub min_design_weight: f64,
    pub design_tol: f64,
    pub design_max_iter: usize,
    pub covariate_mode: CovariateMode,
    pub target: TargetDensity,
    pub ridge: f64,
    pub seed: u64,
}

impl Default for OdiwiConfig {
    fn default() -> Self {
        OdiwiConfig {
            iterations: 10,
            momentum: 0.5,
            num_inits: 5,
            init_mode: InitMode::DirichletRandom,
            aggregation: Aggregation::AfterLastIteration,
            criterion: DesignCriterion::D,
            kernel: KernelShape::Gaussian,
            bandwidth_fraction: 0.1,
            clip_quantile: Some(0.99),
            floor_fraction: 1e-8,
            grid_resolution: 201,
            merge_fraction: 0.01,
            min_design_weight: 1e-4,
            design_tol: 1e-6,
            design_max_iter: 5000,
            covariate_mode: CovariateMode::Ignore,
            target: TargetDensity::OptimalDesign,
            ridge: DEFAULT_RIDGE,
            seed: 0,
        }
    }
}

impl OdiwiConfig {
    /// One chain from uniform weights, so iteration 0 is the naive estimate.
    pub fn single_chain(iterations: usize) -> Self {
        OdiwiConfig {
            iterations,
            num_inits: 1,
            init_mode: InitMode::Uniform,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.iterations < 1 {
            return bad("iterations must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1]");
        }
        if self.num_inits < 1 {
            return bad("num_inits must be at least 1");
        }
        if !(self.bandwidth_fraction > 0.0) {
            return bad("bandwidth_fraction must be positive");
        }
        if let Some(q) = self.clip_quantile
            && !(q > 0.0 && q <= 1.0)
        {
            return bad("clip_quantile must lie in (0, 1]");
        }
        if !(self.floor_fraction > 0.0) {
            return bad("floor_fraction must be positive");
        }
        if self.grid_resolution < 2 {
            return bad("grid_resolution must be at least 2");
        }
        if !(self.merge_fraction >= 0.0) || !(self.min_design_weight >= 0.0) {
            return bad("pruning thresholds must be non-negative");
        }
        if !(self.design_tol > 0.0) {
            return bad("design_tol must be positive");
        }
        if !(self.ridge >= 0.0) {
            return bad("ridge must be non-negative");
        }
        Ok(())
    }
}

/// `alpha * prev + (1 - alpha) * new`, componentwise.
pub fn momentum_update(prev: &[f64], new: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if prev.len() != new.len() {
        return Err(Error::DimensionMismatch {
            expected: prev.len(),
            got: new.len(),
            context: "momentum vectors",
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("momentum {alpha} outside [0, 1]")));
    }
    Ok(prev
        .iter()
        .zip(new)
        .map(|(&p, &n)| alpha * p + (1.0 - alpha) * n)
        .collect())
}

/// Componentwise mean in the given order.
pub fn aggregate_inits(per_init: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = per_init
        .first()
        .ok_or_else(|| Error::InvalidArgument("no initializations to aggregate".into()))?;
    let k = first.len();
    let mut out = vec![0.0; k];
    for b in per_init {
        if b.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: b.len(),
                context: "aggregated coefficient vector",
            });
        }
        out.iter_mut().zip(b).for_each(|(o, v)| *o += v);
    }
    let m = per_init.len() as f64;
    out.iter_mut().for_each(|o| *o /= m);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaiveEstimate {
    pub fit: GlmFit,
    pub predictor: LinearPredictor,
    #[serde(skip)]
    pub imputed: DMatrix<f64>,
}

fn check_inputs(dstar: &FirstStageData, d: &SecondStageData, family: FamilyKind) -> Result<()> {
    if dstar.covariate_dim() != d.geo.ncols() {
        return Err(Error::DimensionMismatch {
            expected: dstar.covariate_dim(),
            got: d.geo.ncols(),
            context: "geographic covariates in the second stage",
        });
    }
    d.check_family(family)
}

fn second_stage_fit(
    map: &FeatureMap,
    exposures: &DMatrix<f64>,
    d: &SecondStageData,
    family: FamilyKind,
) -> Result<GlmFit> {
    let x = map.design_matrix(exposures, &d.covariates)?;
    fit_glm(&x, &d.outcomes, &Family::from_kind(family), None)
}

/// Uniform-weight first stage, imputation, and second-stage GLM on `(1, x_hat, z)`.
pub fn naive_estimate(dstar: &FirstStageData, d: &SecondStageData, family: FamilyKind) -> Result<NaiveEstimate> {
    check_inputs(dstar, d, family)?;
    let predictor = fit_weighted_linear(dstar, &ImportanceWeights::uniform(dstar.len()), DEFAULT_RIDGE)?;
    let imputed = predict_exposure(&predictor, &d.geo)?;
    let map = FeatureMap::standard(dstar.exposure_dim(), d.covariates.ncols());
    let fit = second_stage_fit(&map, &imputed, d, family)?;
    Ok(NaiveEstimate {
        fit,
        predictor,
        imputed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub min: f64,
    pub max: f64,
    pub effective_sample_size: f64,
    pub clip_bound: Option<f64>,
}

impl WeightSummary {
    fn of(w: &ImportanceWeights) -> Self {
        WeightSummary {
            min: w.values.iter().copied().fold(f64::INFINITY, f64::min),
            max: w.max(),
            effective_sample_size: w.effective_sample_size(),
            clip_bound: w.clip_bound,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub iteration: usize,
    /// Second-stage fit on the current imputations.
    pub beta_hat: Vec<f64>,
    /// Momentum-smoothed coefficients fed to the design.
    pub beta_check: Vec<f64>,
    /// Design, certificate and weights used to produce the next imputations;
    /// absent on the final iteration.
    pub design: Option<Design>,
    pub certificate: Option<f64>,
    pub design_converged: Option<bool>,
    pub near_flat: bool,
    pub weights: Option<WeightSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    /// Initialization index, or `"serial"` for the chain continued from the
    /// averaged first iteration.
    pub label: String,
    pub entries: Vec<TrajectoryEntry>,
}

impl Chain {
    pub fn last_beta(&self) -> &[f64] {
        &self.entries.last().expect("chains are never empty").beta_hat
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Diagnostics {
    /// Every D-design in the trajectories passed its equivalence certificate.
    pub all_certified: bool,
    pub near_flat_designs: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdiwiResult {
    pub coefficient_names: Vec<String>,
    pub chains: Vec<Chain>,
    pub final_beta: Vec<f64>,
    /// Index of the exposure effect in `final_beta`.
    pub exposure_index: usize,
    pub diagnostics: Diagnostics,
    /// Final imputed second-stage exposures (mean over chains).
    #[serde(skip)]
    pub final_exposures: DMatrix<f64>,
}

impl OdiwiResult {
    pub fn exposure_effect(&self) -> f64 {
        self.final_beta[self.exposure_index]
    }

    /// Per-iteration mean of `beta_hat` across chains of full length.
    pub fn mean_trajectory(&self) -> Vec<Vec<f64>> {
        let longest = self.chains.iter().map(|c| c.entries.len()).max().unwrap_or(0);
        let full: Vec<&Chain> = self.chains.iter().filter(|c| c.entries.len() == longest).collect();
        (0..longest)
            .map(|l| {
                let betas: Vec<Vec<f64>> = full.iter().map(|c| c.entries[l].beta_hat.clone()).collect();
                aggregate_inits(&betas).expect("non-empty")
            })
            .collect()
    }
}

/// Quantities fixed for the whole run.
struct Context<'a> {
    dstar: &'a FirstStageData,
    d: &'a SecondStageData,
    family: FamilyKind,
    cfg: &'a OdiwiConfig,
    map: FeatureMap,
    source: DensityEstimate,
    z_median: Option<Vec<f64>>,
}

struct ChainState {
    exposures: DMatrix<f64>,
    beta_hat: Vec<f64>,
    beta_check: Vec<f64>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    crate::adapt::quantile_sorted(&v, 0.5)
}

impl<'a> Context<'a> {
    fn new(
        dstar: &'a FirstStageData,
        d: &'a SecondStageData,
        family: FamilyKind,
        cfg: &'a OdiwiConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        check_inputs(dstar, d, family)?;
        let map = FeatureMap::standard(dstar.exposure_dim(), d.covariates.ncols());
        let source = kde_fit(&dstar.exposures, cfg.kernel, Bandwidth::Silverman)?;
        let z_median = match cfg.covariate_mode {
            CovariateMode::Ignore => None,
            CovariateMode::Median => Some(
                (0..d.covariates.ncols())
                    .map(|j| median(d.covariates.column(j).iter().copied().collect()))
                    .collect(),
            ),
        };
        Ok(Context {
            dstar,
            d,
            family,
            cfg,
            map,
            source,
            z_median,
        })
    }

    fn initial_weights(&self, init: usize) -> ImportanceWeights {
        let n = self.dstar.len();
        match self.cfg.init_mode {
            InitMode::Uniform => ImportanceWeights::uniform(n),
            InitMode::DirichletRandom => {
                // Normalized Exp(1) draws are Dirichlet(1, ..., 1).
                let mut rng = rng::stream(self.cfg.seed, 0x1717, init as u64);
                let draws: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
                ImportanceWeights::from_values(draws).expect("exponential draws are positive")
            }
        }
    }

    fn impute(&self, weights: &ImportanceWeights) -> Result<DMatrix<f64>> {
        let predictor = fit_weighted_linear(self.dstar, weights, self.cfg.ridge)?;
        predict_exposure(&predictor, &self.d.geo)
    }

    fn fit(&self, exposures: &DMatrix<f64>) -> Result<GlmFit> {
        second_stage_fit(&self.map, exposures, self.d, self.family)
    }

    /// Design at `beta_check`, reweighting, and refit. Fills the design fields of `entry`.
    fn adapt(
        &self,
        exposures: &DMatrix<f64>,
        fit_family: &Family,
        beta_check: &[f64],
        entry: &mut TrajectoryEntry,
    ) -> Result<DMatrix<f64>> {
        let cfg = self.cfg;
        let grid = build_candidate_grid(exposures, cfg.grid_resolution)?;
        let width = grid.range_width();
        let weights = match cfg.target {
            TargetDensity::Source => {
                importance_weights(&self.dstar.exposures, &self.source, &self.source, &self.weight_opts())?
            }
            TargetDensity::OptimalDesign => {
                let beta = DVector::from_column_slice(beta_check);
                let (dmap, dbeta) = self.map.exposure_only(&beta, self.z_median.as_deref())?;
                let opts = SolverOptions {
                    criterion: cfg.criterion,
                    tol: cfg.design_tol,
                    max_iter: cfg.design_max_iter,
                };
                let opt = solve_optimal_design(&grid, &dbeta, fit_family, &dmap, &opts)?;
                let design = prune_design(
                    &opt.design,
                    cfg.merge_fraction * width,
                    cfg.min_design_weight,
                    dmap.dim(),
                )?;
                let kernel = KernelSpec::new(cfg.kernel, cfg.bandwidth_fraction * width)?;
                let target = design_density(&design, kernel)?;
                entry.certificate = Some(opt.certificate);
                entry.design_converged = Some(opt.converged);
                entry.near_flat = opt.near_flat;
                entry.design = Some(design);
                importance_weights(&self.dstar.exposures, &target, &self.source, &self.weight_opts())?
            }
        };
        entry.weights = Some(WeightSummary::of(&weights));
        self.impute(&weights)
    }

    fn weight_opts(&self) -> WeightOptions {
        WeightOptions {
            clip_quantile: self.cfg.clip_quantile,
            floor_fraction: self.cfg.floor_fraction,
        }
    }

    /// Runs iterations `start..=last`, where `state` holds the fit for `start`.
    fn run_from(
        &self,
        mut state: ChainState,
        start: usize,
        last: usize,
        fit_family: Family,
    ) -> Result<(Vec<TrajectoryEntry>, DMatrix<f64>)> {
        let mut entries = Vec::with_capacity(last - start + 1);
        let mut family = fit_family;
        for l in start..=last {
            let mut entry = TrajectoryEntry {
                iteration: l,
                beta_hat: state.beta_hat.clone(),
                beta_check: state.beta_check.clone(),
                design: None,
                certificate: None,
                design_converged: None,
                near_flat: false,
                weights: None,
            };
            if l == last {
                entries.push(entry);
                break;
            }
            let next = self.adapt(&state.exposures, &family, &state.beta_check, &mut entry)?;
            entries.push(entry);
            let fit = self.fit(&next)?;
            family = fit.family;
            let beta_hat: Vec<f64> = fit.beta.iter().copied().collect();
            let beta_check = momentum_update(&state.beta_check, &beta_hat, self.cfg.momentum)?;
            state = ChainState {
                exposures: next,
                beta_hat,
                beta_check,
            };
        }
        Ok((entries, state.exposures))
    }

    fn run_chain(&self, init: usize, last: usize) -> Result<(Chain, DMatrix<f64>)> {
        let w0 = self.initial_weights(init);
        let exposures = self.impute(&w0)?;
        let fit = self.fit(&exposures)?;
        let beta_hat: Vec<f64> = fit.beta.iter().copied().collect();
        let state = ChainState {
            exposures,
            beta_check: beta_hat.clone(),
            beta_hat,
        };
        let (entries, exposures) = self.run_from(state, 0, last, fit.family)?;
        Ok((
            Chain {
                label: init.to_string(),
                entries,
            },
            exposures,
        ))
    }
}

fn mean_matrix(ms: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(ms[0].nrows(), ms[0].ncols());
    for m in ms {
        out += m;
    }
    out / ms.len() as f64
}

pub fn odiwi_estimate(
    dstar: &FirstStageData,
    d: &SecondStageData,
    family: FamilyKind,
    cfg: &OdiwiConfig,
) -> Result<OdiwiResult> {
    let ctx = Context::new(dstar, d, family, cfg)?;
    let last = cfg.iterations;
    let first_leg = match cfg.aggregation {
        Aggregation::AfterLastIteration => last,
        Aggregation::AfterFirstIteration => 1,
    };
    let runs: Vec<(Chain, DMatrix<f64>)> = (0..cfg.num_inits)
        .into_par_iter()
        .map(|m| ctx.run_chain(m, first_leg))
        .collect::<Result<_>>()?;
    let (mut chains, exposures): (Vec<Chain>, Vec<DMatrix<f64>>) = runs.into_iter().unzip();
    let ends: Vec<Vec<f64>> = chains.iter().map(|c| c.last_beta().to_vec()).collect();
    let mut final_beta = aggregate_inits(&ends)?;
    let mut final_exposures = mean_matrix(&exposures);

    if cfg.aggregation == Aggregation::AfterFirstIteration && last > 1 {
        let checks: Vec<Vec<f64>> = chains
            .iter()
            .map(|c| c.entries.last().expect("non-empty").beta_check.clone())
            .collect();
        let fit_family = match family {
            FamilyKind::BernoulliLogit => Family::bernoulli_logit(),
            // Only the scale of the design problem depends on the dispersion.
            FamilyKind::GaussianIdentity => ctx.fit(&final_exposures)?.family,
        };
        let state = ChainState {
            exposures: final_exposures,
            beta_hat: final_beta.clone(),
            beta_check: aggregate_inits(&checks)?,
        };
        let (entries, exposures) = ctx.run_from(state, 1, last, fit_family)?;
        let serial = Chain {
            label: "serial".into(),
            entries,
        };
        final_beta = serial.last_beta().to_vec();
        final_exposures = exposures;
        chains.push(serial);
    }

    let mut diagnostics = Diagnostics {
        all_certified: true,
        ..Default::default()
    };
    let k = ctx
        .map
        .exposure_only(&DVector::from_column_slice(&final_beta), None)?
        .0
        .dim() as f64;
    for c in &chains {
        for e in &c.entries {
            if e.near_flat {
                diagnostics.near_flat_designs += 1;
                diagnostics
                    .warnings
                    .push(format!("NearFlatDesign: chain {} iteration {}", c.label, e.iteration));
            }
            if let Some(cert) = e.certificate
                && cfg.criterion == DesignCriterion::D
                && cert > k + 1e-4
                && !e.near_flat
            {
                diagnostics.all_certified = false;
                diagnostics.warnings.push(format!(
                    "design certificate {cert:.6} above {k} in chain {} iteration {}",
                    c.label, e.iteration
                ));
            }
        }
    }

    Ok(OdiwiResult {
        coefficient_names: ctx.map.term_names(),
        exposure_index: ctx.map.exposure_index(0).expect("standard map has an exposure term"),
        chains,
        final_beta,
        diagnostics,
        final_exposures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_examples() {
        assert_eq!(momentum_update(&[1.0, 2.0], &[3.0, 4.0], 0.0).unwrap(), vec![3.0, 4.0]);
        assert_eq!(momentum_update(&[1.0, 2.0], &[3.0, 4.0], 1.0).unwrap(), vec![1.0, 2.0]);
        assert_eq!(momentum_update(&[0.0, 2.0], &[2.0, 0.0], 0.5).unwrap(), vec![1.0, 1.0]);
        assert!(momentum_update(&[0.0], &[1.0, 2.0], 0.5).is_err());
        assert!(momentum_update(&[0.0], &[1.0], 1.5).is_err());
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate_inits(&[vec![1.5, -2.0]]).unwrap(), vec![1.5, -2.0]);
        assert_eq!(
            aggregate_inits(&[vec![1.0, 1.0], vec![3.0, 3.0]]).unwrap(),
            vec![2.0, 2.0]
        );
        assert!(aggregate_inits(&[]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(OdiwiConfig::default().validate().is_ok());
        let bad = OdiwiConfig {
            iterations: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = OdiwiConfig {
            momentum: 1.2,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = serde_json::from_str::<OdiwiConfig>(r#"{"iterations": 3, "bogus": 1}"#);
        assert!(err.is_err());
        let ok: OdiwiConfig = serde_json::from_str(r#"{"iterations": 3}"#).unwrap();
        assert_eq!(ok.iterations, 3);
        assert_eq!(ok.momentum, 0.5);
    }
}
