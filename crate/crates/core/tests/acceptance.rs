//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use odiwi::adapt::{Bandwidth, KernelShape, KernelSpec, WeightOptions, design_density, importance_weights, kde_fit};
use odiwi::design::{CandidateGrid, Design, SolverOptions, max_sensitivity, prune_design, solve_optimal_design};
use odiwi::estimator::{OdiwiConfig, TargetDensity, naive_estimate, odiwi_estimate};
use odiwi::glm::{Family, FeatureMap, fit_glm, information_matrix, log_likelihood, logit, score};
use odiwi::inference::{BootstrapOptions, bootstrap_ci};
use odiwi::rng;
use odiwi::sim::{ExperimentOutput, MetricsRow, NAIVE, ODIWI, SimConfig, run_experiment, simulate_replication};

const SEED: u64 = 20240101;
const SWEEP: [f64; 5] = [0.0, 0.5, 1.0, 1.5, 2.0];

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &str, o: &Outcome) {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    println!("criterion {id:>2} [{tag}] {name}: {}", o.detail);
}

fn paired(rows: &[MetricsRow], beta: f64) -> (Vec<&MetricsRow>, Vec<&MetricsRow>) {
    let pick = |e: &str| -> Vec<&MetricsRow> {
        let mut v: Vec<&MetricsRow> = rows
            .iter()
            .filter(|r| r.estimator == e && r.beta_x_true == beta)
            .collect();
        v.sort_by_key(|r| r.rep);
        v
    };
    (pick(NAIVE), pick(ODIWI))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Standard error of the mean of `v`.
fn se(v: &[f64]) -> f64 {
    let m = mean(v);
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0);
    (var / v.len() as f64).sqrt()
}

fn sim_cfg() -> SimConfig {
    SimConfig {
        seed: SEED,
        replications: 100,
        ..Default::default()
    }
}

fn both_ok(n: &[&MetricsRow], o: &[&MetricsRow]) -> bool {
    n.len() == o.len() && n.iter().chain(o).all(|r| r.error.is_finite())
}

fn criterion_1(rows: &[MetricsRow], serial_secs: f64) -> Outcome {
    let (n, o) = paired(rows, 1.5);
    if !both_ok(&n, &o) || n.is_empty() {
        return Outcome {
            pass: false,
            detail: "missing or failed replications".into(),
        };
    }
    let mae_n = mean(&n.iter().map(|r| r.error.abs()).collect::<Vec<_>>());
    let mae_o = mean(&o.iter().map(|r| r.error.abs()).collect::<Vec<_>>());
    let wins = n.iter().zip(&o).filter(|(a, b)| b.error.abs() < a.error.abs()).count();
    let share = wins as f64 / n.len() as f64;
    Outcome {
        pass: mae_o < mae_n && share >= 0.6 && serial_secs < 600.0,
        detail: format!(
            "mean |error| odiwi {mae_o:.4} vs naive {mae_n:.4}; odiwi wins {wins}/{} ({:.0}%); single-threaded {serial_secs:.1}s",
            n.len(),
            100.0 * share
        ),
    }
}

fn criterion_2(rows: &[MetricsRow]) -> Outcome {
    let diffs = |b: f64| -> Option<(f64, f64, f64)> {
        let (n, o) = paired(rows, b);
        if !both_ok(&n, &o) || n.is_empty() {
            return None;
        }
        let en: Vec<f64> = n.iter().map(|r| r.error).collect();
        let eo: Vec<f64> = o.iter().map(|r| r.error).collect();
        let d: Vec<f64> = eo.iter().zip(&en).map(|(a, b)| a - b).collect();
        Some((mean(&en), mean(&eo), se(&d)))
    };
    let (Some((n0, o0, s0)), Some((n2, o2, s2))) = (diffs(0.0), diffs(2.0)) else {
        return Outcome {
            pass: false,
            detail: "missing or failed replications".into(),
        };
    };
    let null_ok = (o0 - n0).abs() < 2.0 * s0;
    let strong_ok = n2.abs() - o2.abs() > 2.0 * s2;
    Outcome {
        pass: null_ok && strong_ok,
        detail: format!(
            "beta_x=0: mean error naive {n0:.4}, odiwi {o0:.4}, |diff| {:.4} < 2 SE {:.4}; beta_x=2: |mean error| naive {:.4}, odiwi {:.4}, gap {:.4} > 2 SE {:.4}",
            (o0 - n0).abs(),
            2.0 * s0,
            n2.abs(),
            o2.abs(),
            n2.abs() - o2.abs(),
            2.0 * s2
        ),
    }
}

fn criterion_3(rows: &[MetricsRow], c1: &Outcome) -> Outcome {
    let (n, o) = paired(rows, 1.5);
    let rn = mean(&n.iter().map(|r| r.stage1_rmse).collect::<Vec<_>>());
    let ro = mean(&o.iter().map(|r| r.stage1_rmse).collect::<Vec<_>>());
    Outcome {
        pass: ro > rn && c1.pass,
        detail: format!(
            "mean first-stage RMSE odiwi {ro:.4} > naive {rn:.4}; second-stage inequality {}",
            if c1.pass { "holds" } else { "fails" }
        ),
    }
}

fn criterion_4() -> Outcome {
    let grid = CandidateGrid::from_bounds(&[(-5.0, 5.0)], 2001).unwrap();
    let map = FeatureMap::standard(1, 0);
    let fam = Family::bernoulli_logit();
    let beta = DVector::from_vec(vec![0.0, 1.0]);
    let start = Instant::now();
    let opt = solve_optimal_design(&grid, &beta, &fam, &map, &SolverOptions::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();

    // Exhaustive search over equally weighted two-point designs on the grid.
    let u: Vec<f64> = grid.points.iter().map(|p| fam.weight_at(p[0])).collect();
    let (mut best, mut arg) = (f64::NEG_INFINITY, (0, 0));
    for i in 0..grid.len() {
        for j in i + 1..grid.len() {
            let dx = grid.points[i][0] - grid.points[j][0];
            let ld = (0.25 * u[i] * u[j] * dx * dx).ln();
            if ld > best {
                best = ld;
                arg = (i, j);
            }
        }
    }
    let oracle = [grid.points[arg.0][0], grid.points[arg.1][0]];
    let got = information_matrix(&opt.design, &beta, &fam, &map)
        .unwrap()
        .determinant()
        .ln();
    let rel = ((got - best) / best).abs();
    let pruned = prune_design(&opt.design, 0.01 * grid.range_width(), 1e-4, 2).unwrap();
    let pts: Vec<f64> = pruned.support.iter().map(|p| p[0]).collect();
    let support_ok = pts.len() == 2 && pts.iter().zip(&oracle).all(|(a, b)| (a - b).abs() <= 0.02);
    let weights_ok = pruned.weights.iter().all(|w| (w - 0.5).abs() <= 0.01);
    Outcome {
        pass: support_ok && weights_ok && rel <= 1e-6 && secs < 5.0,
        detail: format!(
            "support {pts:.4?} vs oracle {oracle:.4?}, weights {:.4?}, log-det {got:.9} vs {best:.9} (rel {rel:.1e}), {secs:.3}s",
            pruned.weights
        ),
    }
}

fn criterion_5() -> Outcome {
    let mut worst: f64 = f64::NEG_INFINITY;
    let mut count = 0;
    let mut rng = rng::stream(SEED, 5, 0);
    let mut check = |grid: &CandidateGrid, beta: DVector<f64>, fam: &Family, map: &FeatureMap| {
        let opt = solve_optimal_design(grid, &beta, fam, map, &SolverOptions::default()).unwrap();
        let cert = max_sensitivity(grid, &opt.design, &beta, fam, map).unwrap();
        worst = worst
            .max(cert - map.dim() as f64)
            .max(opt.certificate - map.dim() as f64);
        count += 1;
    };
    let map1 = FeatureMap::standard(1, 0);
    for _ in 0..20 {
        let lo = rng.random_range(-6.0..-1.0);
        let hi = rng.random_range(1.0..6.0);
        let grid = CandidateGrid::from_bounds(&[(lo, hi)], rng.random_range(51..1001)).unwrap();
        let beta = DVector::from_vec(vec![rng.random_range(-2.0..2.0), rng.random_range(-3.0..3.0)]);
        check(&grid, beta, &Family::bernoulli_logit(), &map1);
    }
    let grid = CandidateGrid::from_bounds(&[(-1.0, 2.0)], 301).unwrap();
    check(
        &grid,
        DVector::from_vec(vec![0.3, -1.0]),
        &Family::gaussian(2.0).unwrap(),
        &map1,
    );
    let map2 = FeatureMap::standard(2, 0);
    for _ in 0..3 {
        let grid = CandidateGrid::from_bounds(&[(-2.0, 2.0), (-1.0, 3.0)], 41).unwrap();
        let beta = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        check(&grid, beta, &Family::bernoulli_logit(), &map2);
    }
    // Designs produced inside the estimator on simulated data.
    let rep = simulate_replication(&sim_cfg(), 0).unwrap();
    let res = odiwi_estimate(
        &rep.first,
        &rep.second.data,
        odiwi::glm::FamilyKind::BernoulliLogit,
        &OdiwiConfig::single_chain(10),
    )
    .unwrap();
    for e in res.chains.iter().flat_map(|c| &c.entries) {
        if let Some(c) = e.certificate {
            worst = worst.max(c - 2.0);
            count += 1;
        }
    }
    Outcome {
        pass: worst <= 1e-4,
        detail: format!("{count} designs, max(certificate - |Phi|) = {worst:.2e}"),
    }
}

fn criterion_6() -> Outcome {
    // 3 of 10 successes at x = 0, 7 of 10 at x = 1, as a weighted expansion.
    let mut rows = Vec::new();
    let mut ys = Vec::new();
    for (xv, succ) in [(0.0, 3), (1.0, 7)] {
        for k in 0..10 {
            rows.push([1.0, xv]);
            ys.push(if k < succ { 1.0 } else { 0.0 });
        }
    }
    let xm = DMatrix::from_fn(rows.len(), 2, |i, j| rows[i][j]);
    let fit = fit_glm(&xm, &DVector::from_vec(ys), &Family::bernoulli_logit(), None).unwrap();
    let b0 = logit(0.3);
    let b1 = logit(0.7) - logit(0.3);
    let closed = (fit.beta[0] - b0).abs().max((fit.beta[1] - b1).abs());

    let mut rng = rng::stream(SEED, 6, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(8..40);
        let k = rng.random_range(2..5);
        let xs = DMatrix::from_fn(n, k, |_, j| if j == 0 { 1.0 } else { rng.random_range(-2.0..2.0) });
        let y = DVector::from_fn(n, |_, _| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 });
        let beta = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
        let fam = Family::bernoulli_logit();
        let g = score(&xs, &y, &fam, &beta, None);
        let h = 1e-6;
        for j in 0..k {
            let (mut up, mut dn) = (beta.clone(), beta.clone());
            up[j] += h;
            dn[j] -= h;
            let fd = (log_likelihood(&xs, &y, &fam, &up, None) - log_likelihood(&xs, &y, &fam, &dn, None)) / (2.0 * h);
            worst = worst.max((fd - g[j]).abs() / g[j].abs().max(1.0));
        }
    }
    Outcome {
        pass: closed <= 1e-8 && worst <= 1e-5,
        detail: format!(
            "saturated fit error {closed:.1e}; worst relative gradient error {worst:.1e} over 20 instances"
        ),
    }
}

fn criterion_7() -> Outcome {
    let rep = simulate_replication(&sim_cfg(), 0).unwrap();
    let source = kde_fit(&rep.first.exposures, KernelShape::Gaussian, Bandwidth::Silverman).unwrap();
    let w = importance_weights(&rep.first.exposures, &source, &source, &WeightOptions::default()).unwrap();
    let wdev = w.values.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);

    let fam = odiwi::glm::FamilyKind::BernoulliLogit;
    let naive = naive_estimate(&rep.first, &rep.second.data, fam).unwrap();
    let cfg = OdiwiConfig {
        target: TargetDensity::Source,
        ..OdiwiConfig::single_chain(10)
    };
    let res = odiwi_estimate(&rep.first, &rep.second.data, fam, &cfg).unwrap();
    let edev = res
        .chains
        .iter()
        .flat_map(|c| &c.entries)
        .flat_map(|e| e.beta_hat.iter().zip(naive.fit.beta.iter()).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);

    let mut idev: f64 = 0.0;
    let designs = [
        Design::new(vec![vec![-1.5434], vec![1.5434]], vec![0.5, 0.5]).unwrap(),
        Design::new(vec![vec![0.0], vec![0.3], vec![4.0]], vec![0.2, 0.5, 0.3]).unwrap(),
    ];
    for d in &designs {
        for shape in [KernelShape::Gaussian, KernelShape::Uniform, KernelShape::Triangle] {
            for h in [0.1, 0.5, 1.0] {
                let dens = design_density(d, KernelSpec::new(shape, h).unwrap()).unwrap();
                let (lo, hi, m) = (-15.0, 15.0, 300_000);
                let step: f64 = (hi - lo) / m as f64;
                let total: f64 = (0..m).map(|i| dens.eval(&[lo + (i as f64 + 0.5) * step]) * step).sum();
                idev = idev.max((total - 1.0).abs());
            }
        }
    }
    Outcome {
        pass: wdev <= 1e-12 && edev == 0.0 && idev <= 1e-3,
        detail: format!(
            "max |w - 1| = {wdev:.1e}; max |odiwi - naive| over trajectory = {edev:.1e}; max |integral - 1| = {idev:.1e}"
        ),
    }
}

fn criterion_8() -> Outcome {
    let rep = simulate_replication(&sim_cfg(), 0).unwrap();
    let cfg = OdiwiConfig::single_chain(5);
    let opts = BootstrapOptions {
        replicates: 200,
        seed: SEED,
        ..Default::default()
    };
    let start = Instant::now();
    let r = match bootstrap_ci(
        &rep.first,
        &rep.second.data,
        odiwi::glm::FamilyKind::BernoulliLogit,
        &cfg,
        &opts,
    ) {
        Ok(r) => r,
        Err(e) => {
            return Outcome {
                pass: false,
                detail: format!("bootstrap failed: {e}"),
            };
        }
    };
    let traj: Vec<f64> = r
        .point
        .mean_trajectory()
        .iter()
        .map(|b| b[r.point.exposure_index])
        .collect();
    let change = (traj[5] - traj[3]).abs();
    Outcome {
        pass: change < 0.5 * r.std_error,
        detail: format!(
            "|b5 - b3| = {change:.4} < 0.5 x bootstrap SE {:.4}; trajectory {traj:.4?}; {} failures; {:.1}s",
            0.5 * r.std_error,
            r.failures,
            start.elapsed().as_secs_f64()
        ),
    }
}

fn criterion_9() -> Outcome {
    let cfg = SimConfig {
        shift: 0.5,
        ..sim_cfg()
    };
    let out = run_experiment(&cfg, &[1.5], &OdiwiConfig::single_chain(10), true).unwrap();
    let (n, o) = paired(&out.rows, 1.5);
    if !both_ok(&n, &o) {
        return Outcome {
            pass: false,
            detail: "missing or failed replications".into(),
        };
    }
    let an: Vec<f64> = n.iter().map(|r| r.error.abs()).collect();
    let ao: Vec<f64> = o.iter().map(|r| r.error.abs()).collect();
    let d: Vec<f64> = ao.iter().zip(&an).map(|(a, b)| a - b).collect();
    let (gap, s) = (mean(&d), se(&d));
    Outcome {
        pass: gap <= 2.0 * s,
        detail: format!(
            "mean |error| odiwi {:.4} vs naive {:.4}; difference {gap:.4} <= 2 SE {:.4}",
            mean(&ao),
            mean(&an),
            2.0 * s
        ),
    }
}

fn identical(a: &ExperimentOutput, b: &ExperimentOutput) -> bool {
    let key = |o: &ExperimentOutput| -> Vec<(String, u64, usize, u64, u64, u64, String)> {
        o.rows
            .iter()
            .map(|r| {
                (
                    r.estimator.clone(),
                    r.beta_x_true.to_bits(),
                    r.rep,
                    r.beta_hat.to_bits(),
                    r.error.to_bits(),
                    r.stage1_rmse.to_bits(),
                    r.flags.clone(),
                )
            })
            .collect()
    };
    key(a) == key(b)
}

fn main() {
    let est = OdiwiConfig::single_chain(10);
    let cfg = sim_cfg();

    let start = Instant::now();
    let serial_c1 = run_experiment(&cfg, &[1.5], &est, false).unwrap();
    let c1_secs = start.elapsed().as_secs_f64();
    let sweep_a = run_experiment(&cfg, &SWEEP, &est, true).unwrap();
    let sweep_b = run_experiment(&cfg, &SWEEP, &est, true).unwrap();
    let sweep_serial = run_experiment(&cfg, &SWEEP, &est, false).unwrap();

    let mut results = Vec::new();
    let c1 = criterion_1(&sweep_a.rows, c1_secs);
    report(1, "iterating improves the exposure effect", &c1);
    results.push(c1.pass);
    let c2 = criterion_2(&sweep_a.rows);
    report(2, "sweep over exposure effects", &c2);
    results.push(c2.pass);
    let c3 = criterion_3(&sweep_a.rows, &c1);
    report(3, "worse predictions, better effect", &c3);
    results.push(c3.pass);
    let c4 = criterion_4();
    report(4, "D-optimal oracle agreement", &c4);
    results.push(c4.pass);
    let c5 = criterion_5();
    report(5, "equivalence certificate", &c5);
    results.push(c5.pass);
    let c6 = criterion_6();
    report(6, "GLM oracle agreement", &c6);
    results.push(c6.pass);
    let c7 = criterion_7();
    report(7, "adaptation identities", &c7);
    results.push(c7.pass);
    let c8 = criterion_8();
    report(8, "trajectory stabilization", &c8);
    results.push(c8.pass);
    let c9 = criterion_9();
    report(9, "robustness to covariate shift", &c9);
    results.push(c9.pass);

    let c1_rows: Vec<MetricsRow> = sweep_a.rows.iter().filter(|r| r.beta_x_true == 1.5).cloned().collect();
    let c1_parallel = ExperimentOutput {
        rows: c1_rows,
        traces: vec![],
    };
    let serial_only = ExperimentOutput {
        rows: serial_c1.rows.clone(),
        traces: vec![],
    };
    let repeat_ok = identical(&sweep_a, &sweep_b);
    let thread_ok = identical(&sweep_a, &sweep_serial) && identical(&c1_parallel, &serial_only);
    let c10 = Outcome {
        pass: repeat_ok && thread_ok && sweep_a.traces == sweep_serial.traces,
        detail: format!(
            "{} rows; repeated runs identical: {repeat_ok}; serial and parallel identical: {thread_ok}",
            sweep_a.rows.len()
        ),
    };
    report(10, "determinism", &c10);
    results.push(c10.pass);

    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
