//! Nonparametric bootstrap for the exposure effect.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::quantile_sorted;
use crate::error::{Error, Result};
use crate::estimator::{OdiwiConfig, OdiwiResult, SecondStageData, odiwi_estimate};
use crate::glm::FamilyKind;
use crate::rng;
use crate::stage1::FirstStageData;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resample {
    /// Resample monitoring sites and subjects independently.
    #[default]
    BothStages,
    SecondStageOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOptions {
    pub replicates: usize,
    pub level: f64,
    pub seed: u64,
    pub resample: Resample,
    /// Largest tolerated share of failed replicates.
    pub max_failure_rate: f64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions {
            replicates: 200,
            level: 0.95,
            seed: 0,
            resample: Resample::BothStages,
            max_failure_rate: 0.1,
        }
    }
}

pub const MIN_REPLICATES: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub std_error: f64,
    /// Successful replicate estimates, in replicate order.
    pub replicates: Vec<f64>,
    pub failures: usize,
    pub point: OdiwiResult,
}

const BOOT_STREAM: u64 = 0xb007_57a9;

fn resample(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Percentile interval for the exposure effect.
///
/// Replicates that fail are dropped and counted; more than
/// `max_failure_rate` of them failing is an error.
pub fn bootstrap_ci(
    dstar: &FirstStageData,
    d: &SecondStageData,
    family: FamilyKind,
    cfg: &OdiwiConfig,
    opts: &BootstrapOptions,
) -> Result<BootstrapResult> {
    if opts.replicates < MIN_REPLICATES {
        return Err(Error::InvalidArgument(format!(
            "at least {MIN_REPLICATES} bootstrap replicates are required, got {}",
            opts.replicates
        )));
    }
    if !(opts.level > 0.0 && opts.level < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "level must lie in (0, 1), got {}",
            opts.level
        )));
    }
    cfg.validate()?;
    let draws: Vec<Option<f64>> = (0..opts.replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng::stream(opts.seed, BOOT_STREAM, b as u64);
            let first = match opts.resample {
                Resample::BothStages => dstar.select_rows(&resample(dstar.len(), &mut rng)),
                Resample::SecondStageOnly => dstar.clone(),
            };
            let second = d.select_rows(&resample(d.len(), &mut rng));
            let rep_cfg = OdiwiConfig {
                seed: rng::derive_seed(cfg.seed, b as u64 + 1),
                ..cfg.clone()
            };
            odiwi_estimate(&first, &second, family, &rep_cfg)
                .ok()
                .map(|r| r.exposure_effect())
                .filter(|v| v.is_finite())
        })
        .collect();
    let replicates: Vec<f64> = draws.iter().flatten().copied().collect();
    let failures = opts.replicates - replicates.len();
    if failures as f64 > opts.max_failure_rate * opts.replicates as f64 {
        return Err(Error::TooManyFailures {
            failed: failures,
            total: opts.replicates,
        });
    }
    let point = odiwi_estimate(dstar, d, family, cfg)?;
    let mut sorted = replicates.clone();
    sorted.sort_by(f64::total_cmp);
    let alpha = 1.0 - opts.level;
    let m = replicates.iter().sum::<f64>() / replicates.len() as f64;
    let var = replicates.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (replicates.len() as f64 - 1.0);
    Ok(BootstrapResult {
        estimate: point.exposure_effect(),
        lower: quantile_sorted(&sorted, alpha / 2.0),
        upper: quantile_sorted(&sorted, 1.0 - alpha / 2.0),
        level: opts.level,
        std_error: var.sqrt(),
        replicates,
        failures,
        point,
    })
}
