//! Density estimates and importance weights for adapting the first stage to a
//! target exposure distribution.
//!
//! The source density is a kernel density estimate of the first-stage exposures.
//! The target density smooths an optimal design with a kernel, giving a finite
//! mixture. Importance weights are the ratio of the two at each source exposure.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::design::Design;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelShape {
    #[default]
    Gaussian,
    Uniform,
    Triangle,
}

impl std::str::FromStr for KernelShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(KernelShape::Gaussian),
            "uniform" | "box" => Ok(KernelShape::Uniform),
            "triangle" | "triangular" => Ok(KernelShape::Triangle),
            other => Err(Error::InvalidArgument(format!("unknown kernel {other:?}"))),
        }
    }
}

impl KernelShape {
    /// Unit-bandwidth kernel density at standardized distance `t`.
    pub fn density(&self, t: f64) -> f64 {
        match self {
            KernelShape::Gaussian => (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt(),
            KernelShape::Uniform => {
                if t.abs() <= 1.0 {
                    0.5
                } else {
                    0.0
                }
            }
            KernelShape::Triangle => (1.0 - t.abs()).max(0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub shape: KernelShape,
    pub bandwidth: f64,
}

impl KernelSpec {
    pub fn new(shape: KernelShape, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "bandwidth must be positive, got {bandwidth}"
            )));
        }
        Ok(KernelSpec { shape, bandwidth })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Bandwidth {
    Fixed(f64),
    /// `1.06 * sd * m^(-1/5)` per dimension.
    Silverman,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityKind {
    Kde,
    DesignMixture,
}

/// Finite kernel mixture `sum_j w_j K_h(x - c_j)` with a product kernel in
/// higher dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub kind: DensityKind,
    pub centers: Vec<Vec<f64>>,
    pub mixture_weights: Vec<f64>,
    pub shape: KernelShape,
    /// One bandwidth per dimension.
    pub bandwidths: Vec<f64>,
}

impl DensityEstimate {
    pub fn dim(&self) -> usize {
        self.bandwidths.len()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        let norm: f64 = self.bandwidths.iter().product();
        let mut total = 0.0;
        for (c, &w) in self.centers.iter().zip(&self.mixture_weights) {
            let mut k = w;
            for ((xi, ci), h) in x.iter().zip(c).zip(&self.bandwidths) {
                k *= self.shape.density((xi - ci) / h);
                if k == 0.0 {
                    break;
                }
            }
            total += k;
        }
        total / norm
    }

    /// Evaluates at every row of `points`.
    pub fn eval_rows(&self, points: &DMatrix<f64>) -> Vec<f64> {
        let mut buf = vec![0.0; points.ncols()];
        (0..points.nrows())
            .map(|i| {
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = points[(i, j)];
                }
                self.eval(&buf)
            })
            .collect()
    }
}

fn sample_sd(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    (values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Kernel density estimate of the rows of `samples`.
pub fn kde_fit(samples: &DMatrix<f64>, shape: KernelShape, bandwidth: Bandwidth) -> Result<DensityEstimate> {
    let (m, p) = samples.shape();
    if m == 0 || p == 0 {
        return Err(Error::DegenerateSample("no samples".into()));
    }
    let bandwidths = match bandwidth {
        Bandwidth::Fixed(h) => {
            KernelSpec::new(shape, h)?;
            vec![h; p]
        }
        Bandwidth::Silverman => {
            if m < 2 {
                return Err(Error::DegenerateSample(
                    "automatic bandwidth needs at least two samples".into(),
                ));
            }
            (0..p)
                .map(|j| {
                    let sd = sample_sd(samples.column(j).iter().copied());
                    if !(sd > 0.0) || !sd.is_finite() {
                        Err(Error::DegenerateSample(format!("dimension {j} has zero spread")))
                    } else {
                        Ok(1.06 * sd * (m as f64).powf(-0.2))
                    }
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let centers = (0..m).map(|i| samples.row(i).iter().copied().collect()).collect();
    Ok(DensityEstimate {
        kind: DensityKind::Kde,
        centers,
        mixture_weights: vec![1.0 / m as f64; m],
        shape,
        bandwidths,
    })
}

/// Smooths a design into the mixture density `sum_j w_j K(x, x_j)`.
pub fn design_density(design: &Design, kernel: KernelSpec) -> Result<DensityEstimate> {
    design.validate()?;
    KernelSpec::new(kernel.shape, kernel.bandwidth)?;
    Ok(DensityEstimate {
        kind: DensityKind::DesignMixture,
        centers: design.support.clone(),
        mixture_weights: design.weights.clone(),
        shape: kernel.shape,
        bandwidths: vec![kernel.bandwidth; design.exposure_dim()],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightOptions {
    /// Raw ratios above this empirical quantile are clipped to it.
    pub clip_quantile: Option<f64>,
    /// Source densities are floored at this fraction of their maximum over the
    /// source points.
    pub floor_fraction: f64,
}

impl Default for WeightOptions {
    fn default() -> Self {
        WeightOptions {
            clip_quantile: Some(0.99),
            floor_fraction: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceWeights {
    pub values: Vec<f64>,
    /// Ratios before clipping and normalization.
    pub raw: Vec<f64>,
    pub clip_bound: Option<f64>,
    pub normalized: bool,
}

impl ImportanceWeights {
    /// Every row weighted 1.
    pub fn uniform(n: usize) -> Self {
        ImportanceWeights {
            values: vec![1.0; n],
            raw: vec![1.0; n],
            clip_bound: None,
            normalized: true,
        }
    }

    /// Wraps arbitrary non-negative weights, rescaled to mean one.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument("weights must be finite and non-negative".into()));
        }
        let raw = values.clone();
        let values = normalize_mean_one(values)?;
        Ok(ImportanceWeights {
            values,
            raw,
            clip_bound: None,
            normalized: true,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Kish effective sample size.
    pub fn effective_sample_size(&self) -> f64 {
        let s: f64 = self.values.iter().sum();
        let s2: f64 = self.values.iter().map(|v| v * v).sum();
        if s2 > 0.0 { s * s / s2 } else { 0.0 }
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

fn normalize_mean_one(mut values: Vec<f64>) -> Result<Vec<f64>> {
    let total: f64 = values.iter().sum();
    if !(total > 0.0) {
        return Err(Error::AllZeroWeights);
    }
    let scale = values.len() as f64 / total;
    values.iter_mut().for_each(|v| *v *= scale);
    Ok(values)
}

/// Type-7 (linear interpolation) empirical quantile of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, q)
}

pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `omega_i = P_T(x_i) / max(P_S(x_i), floor)`, optionally clipped, then scaled to mean one.
pub fn importance_weights(
    source_exposures: &DMatrix<f64>,
    p_target: &DensityEstimate,
    p_source: &DensityEstimate,
    opts: &WeightOptions,
) -> Result<ImportanceWeights> {
    if source_exposures.ncols() != p_source.dim() || source_exposures.ncols() != p_target.dim() {
        return Err(Error::DimensionMismatch {
            expected: p_source.dim(),
            got: source_exposures.ncols(),
            context: "source exposure columns",
        });
    }
    if let Some(q) = opts.clip_quantile
        && !(0.0..=1.0).contains(&q)
    {
        return Err(Error::InvalidArgument(format!("clip quantile {q} outside [0, 1]")));
    }
    let target = p_target.eval_rows(source_exposures);
    let source = p_source.eval_rows(source_exposures);
    let peak = source.iter().copied().fold(0.0, f64::max);
    let floor = (opts.floor_fraction * peak).max(f64::MIN_POSITIVE);
    let raw: Vec<f64> = target.iter().zip(&source).map(|(&t, &s)| t / s.max(floor)).collect();
    weights_from_ratios(raw, opts.clip_quantile)
}

/// Clips and normalizes precomputed density ratios.
pub fn weights_from_ratios(raw: Vec<f64>, clip_quantile: Option<f64>) -> Result<ImportanceWeights> {
    if raw.iter().all(|&v| v == 0.0) {
        return Err(Error::AllZeroWeights);
    }
    let clip_bound = clip_quantile.map(|q| quantile(&raw, q));
    let clipped: Vec<f64> = match clip_bound {
        Some(b) => raw.iter().map(|&v| v.min(b)).collect(),
        None => raw.clone(),
    };
    let values = normalize_mean_one(clipped)?;
    Ok(ImportanceWeights {
        values,
        raw,
        clip_bound,
        normalized: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn single_kernel_density() {
        let d = kde_fit(&col(&[0.0]), KernelShape::Gaussian, Bandwidth::Fixed(1.0)).unwrap();
        assert!((d.eval(&[0.0]) - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn uniform_kernel_outside_support_is_zero() {
        let d = kde_fit(&col(&[-1.0, 1.0]), KernelShape::Uniform, Bandwidth::Fixed(0.5)).unwrap();
        assert_eq!(d.eval(&[0.0]), 0.0);
        assert_eq!(d.eval(&[1.0]), 0.5 * 0.5 / 0.5);
    }

    #[test]
    fn silverman_kde_of_normal_sample() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let d = kde_fit(&col(&xs), KernelShape::Gaussian, Bandwidth::Silverman).unwrap();
        assert!((d.eval(&[0.0]) - 0.398_942_28).abs() < 0.02);
    }

    #[test]
    fn degenerate_sample_rejected() {
        let err = kde_fit(&col(&[2.0, 2.0, 2.0]), KernelShape::Gaussian, Bandwidth::Silverman).unwrap_err();
        assert!(matches!(err, Error::DegenerateSample(_)));
    }

    #[test]
    fn design_density_examples() {
        let k = KernelSpec::new(KernelShape::Gaussian, 1.0).unwrap();
        let one = Design::new(vec![vec![2.0]], vec![1.0]).unwrap();
        let d = design_density(&one, k).unwrap();
        let npdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        for x in [-1.0, 2.0, 3.3] {
            assert!((d.eval(&[x]) - npdf(x - 2.0)).abs() < 1e-15);
        }

        let sym = Design::new(vec![vec![-1.2], vec![1.2]], vec![0.5, 0.5]).unwrap();
        let d = design_density(&sym, k).unwrap();
        for x in [0.3, 1.0, 2.5] {
            assert!((d.eval(&[x]) - d.eval(&[-x])).abs() < 1e-15);
        }

        // Direct two-term evaluation with h = 0.5 at x = 4.
        let two = Design::new(vec![vec![0.0], vec![4.0]], vec![0.25, 0.75]).unwrap();
        let d = design_density(&two, KernelSpec::new(KernelShape::Gaussian, 0.5).unwrap()).unwrap();
        let expected = 0.75 * npdf(0.0) / 0.5 + 0.25 * npdf(8.0) / 0.5;
        assert!((d.eval(&[4.0]) - expected).abs() < 1e-15);
        assert!((d.eval(&[4.0]) - 0.75 * 0.7979).abs() < 1e-4);
    }

    #[test]
    fn design_density_integrates_to_one() {
        let design = Design::new(vec![vec![-1.5], vec![0.2], vec![1.5]], vec![0.45, 0.1, 0.45]).unwrap();
        for shape in [KernelShape::Gaussian, KernelShape::Uniform, KernelShape::Triangle] {
            let h = 0.4;
            let d = design_density(&design, KernelSpec::new(shape, h).unwrap()).unwrap();
            let (lo, hi) = (-1.5 - 6.0 * h, 1.5 + 6.0 * h);
            let n = 200_000;
            let dx = (hi - lo) / n as f64;
            // Midpoint rule.
            let integral: f64 = (0..n).map(|i| d.eval(&[lo + (i as f64 + 0.5) * dx]) * dx).sum();
            assert!((integral - 1.0).abs() < 1e-3, "{shape:?}: {integral}");
        }
    }

    #[test]
    fn identical_densities_give_unit_weights() {
        let xs = col(&[0.1, -0.7, 1.9, 2.2, 0.0, -1.4, 0.8]);
        let ps = kde_fit(&xs, KernelShape::Gaussian, Bandwidth::Silverman).unwrap();
        let w = importance_weights(&xs, &ps, &ps, &WeightOptions::default()).unwrap();
        assert!(w.values.iter().all(|&v| (v - 1.0).abs() <= 1e-12));
    }

    #[test]
    fn raw_ratio_is_plain_division() {
        let w = weights_from_ratios(vec![0.2 / 0.1, 1.0], None).unwrap();
        assert_eq!(w.raw[0], 2.0);
        assert!((w.values[0] - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn weights_peak_near_target_center() {
        let xs: Vec<f64> = (0..41).map(|i| -2.0 + 0.2 * i as f64).collect();
        let m = col(&xs);
        let ps = kde_fit(&m, KernelShape::Gaussian, Bandwidth::Fixed(5.0)).unwrap();
        let pt = design_density(
            &Design::new(vec![vec![2.0]], vec![1.0]).unwrap(),
            KernelSpec::new(KernelShape::Gaussian, 0.5).unwrap(),
        )
        .unwrap();
        let opts = WeightOptions {
            clip_quantile: None,
            ..Default::default()
        };
        let w = importance_weights(&m, &pt, &ps, &opts).unwrap();
        // Non-increasing in distance from the target center.
        let mut by_dist: Vec<(f64, f64)> = xs
            .iter()
            .map(|x| (x - 2.0).abs())
            .zip(w.values.iter().copied())
            .collect();
        by_dist.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!(by_dist.windows(2).all(|p| p[1].1 <= p[0].1 * (1.0 + 1e-12)));
        assert!(w.values[20] > 1.0);
    }

    #[test]
    fn target_outside_support_is_all_zero() {
        let m = col(&[0.0, 0.5, 1.0]);
        let ps = kde_fit(&m, KernelShape::Uniform, Bandwidth::Fixed(1.0)).unwrap();
        let pt = design_density(
            &Design::new(vec![vec![50.0]], vec![1.0]).unwrap(),
            KernelSpec::new(KernelShape::Uniform, 1.0).unwrap(),
        )
        .unwrap();
        let err = importance_weights(&m, &pt, &ps, &WeightOptions::default()).unwrap_err();
        assert_eq!(err, Error::AllZeroWeights);
    }

    #[test]
    fn quantile_matches_linear_interpolation() {
        let v = [5.0, 1.0, 3.0, 2.0, 4.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 5.0);
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert!((quantile(&v, 0.1) - 1.4).abs() < 1e-15);
    }

    #[test]
    fn product_kernel_in_two_dimensions() {
        let s = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        let d = kde_fit(&s, KernelShape::Gaussian, Bandwidth::Fixed(1.0)).unwrap();
        let expected = 1.0 / (2.0 * std::f64::consts::PI);
        assert!((d.eval(&[0.0, 0.0]) - expected).abs() < 1e-15);
    }
}
