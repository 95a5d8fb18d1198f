//! End-to-end acceptance checks, one per shipped guarantee, run sequentially
//! (the heavier ones share hundreds of megabytes of tables; sequencing keeps
//! the peak footprint bounded). Each criterion prints exactly one pass/fail
//! line; the test fails if any criterion does.

// `ensure!` negates its comparison so that a NaN statistic fails the
// criterion instead of slipping through a flipped inequality.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::cell::RefCell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use bsvie::diagnostics::{
    bsvie_residual, lower_triangle_energy_check, m_identity_residual, verify_per_time_bound,
    verify_weighted_energy_bound,
};
use bsvie::lipschitz::{solve_lipschitz, SolutionMode, SolverConfig};
use bsvie::model::{
    build_weight_profile, standard_moduli, Driver, FreeTerm, PathEnsemble, Process1P, Process2P,
    WeightMode,
};
use bsvie::paths::generate_paths;
use bsvie::picard::{
    concavity_lemma_check, gronwall_bound_check, picard_solve, picard_solve_from,
    value_gap_squared, value_mass,
};
use bsvie::regression::{build_slice_bases, RegressionConfig, SliceBases};
use bsvie::simple_bsvie::{m_extend, solve_simple, AffineBrownianField, ZeroField};
use rand_core::{RngCore, SeedableRng};

type Rng = rand_chacha::ChaCha12Rng;

fn u01(rng: &mut Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * u01(rng)
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        if !$cond {
            return Err(format!($($msg)*));
        }
    };
}

/// Tables shared between the first two criteria (one expensive solve).
struct ClosedFormRun {
    ens: PathEnsemble,
    bases: SliceBases,
    y: Process1P,
    z: Process2P,
}

fn run_criterion(
    number: usize,
    label: &str,
    body: impl FnOnce() -> Result<String, String>,
) -> bool {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(detail)) => {
            println!("criterion {number:02} pass — {label} ({detail})");
            true
        }
        Ok(Err(msg)) => {
            println!("criterion {number:02} FAIL — {label}: {msg}");
            false
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .map(String::as_str)
                .or_else(|| payload.downcast_ref::<&str>().copied())
                .unwrap_or("panic");
            println!("criterion {number:02} FAIL — {label}: panic: {msg}");
            false
        }
    }
}

#[test]
fn acceptance() {
    let shared: RefCell<Option<ClosedFormRun>> = RefCell::new(None);
    let mut all = true;

    all &= run_criterion(1, "closed-form value and integrand recovery", || {
        let start = Instant::now();
        let grid = bsvie::model::TimeGrid::uniform(1.0, 32).map_err(|e| e.to_string())?;
        let ens = generate_paths(&grid, 50_000, 1, 101).map_err(|e| e.to_string())?;
        let bases =
            build_slice_bases(&ens, &RegressionConfig::default()).map_err(|e| e.to_string())?;
        let psi = FreeTerm::t_times_terminal();
        let field = ZeroField { dim_m: 1 };
        let (y, z) = solve_simple(&psi, &field, &ens, &bases).map_err(|e| e.to_string())?;
        let elapsed = start.elapsed().as_secs_f64();

        // Value: free term t W(T) has the closed form Y(t) = t W(t).
        let n = grid.n_steps();
        let mp = ens.n_paths();
        let mut max_value_gap = 0.0f64;
        for i in 0..=n {
            let t = grid.node(i);
            let w = ens.w_slice(i);
            let ys = y.slice(i);
            let mse = ys
                .iter()
                .zip(w)
                .map(|(a, b)| (a - t * b) * (a - t * b))
                .sum::<f64>()
                / mp as f64;
            max_value_gap = max_value_gap.max(mse);
        }
        ensure!(
            max_value_gap <= 1e-3,
            "max value mean-square gap {max_value_gap:.3e} > 1e-3"
        );

        // Integrand: Z(t_i, s_j) = t_i. The final column has no increment
        // beyond the horizon to identify it from and is excluded.
        let mut max_z_gap = 0.0f64;
        for i in 0..=n {
            let t = grid.node(i);
            for j in i..n {
                let blk = z.block(i, j);
                let gap = blk.iter().map(|v| (v - t).abs()).sum::<f64>() / mp as f64;
                max_z_gap = max_z_gap.max(gap);
            }
        }
        ensure!(max_z_gap <= 0.05, "max integrand gap {max_z_gap:.3} > 0.05");
        ensure!(elapsed < 120.0, "solve took {elapsed:.1}s >= 120s");

        *shared.borrow_mut() = Some(ClosedFormRun { ens, bases, y, z });
        Ok(format!(
            "value mse {max_value_gap:.2e}, integrand gap {max_z_gap:.3}, {elapsed:.1}s"
        ))
    });

    all &= run_criterion(2, "kernel extension and representation identity", || {
        let run = shared
            .borrow_mut()
            .take()
            .ok_or("criterion 1 did not leave its tables behind")?;
        let ClosedFormRun {
            ens,
            bases,
            y,
            mut z,
        } = run;
        m_extend(&y, &ens, &bases, &mut z).map_err(|e| e.to_string())?;

        let grid = ens.grid();
        let n = grid.n_steps();
        let mp = ens.n_paths();
        // Lower triangle: the representation of t W(t) also has integrand t.
        let mut max_z_gap = 0.0f64;
        for i in 1..=n {
            let t = grid.node(i);
            for j in 0..i {
                let blk = z.block(i, j);
                let gap = blk.iter().map(|v| (v - t).abs()).sum::<f64>() / mp as f64;
                max_z_gap = max_z_gap.max(gap);
            }
        }
        ensure!(
            max_z_gap <= 0.05,
            "max lower-triangle integrand gap {max_z_gap:.3} > 0.05"
        );

        let defects = m_identity_residual(&y, &z, &ens).map_err(|e| e.to_string())?;
        let max_defect = defects.iter().cloned().fold(0.0f64, f64::max);
        ensure!(
            max_defect <= 1e-3,
            "representation defect {max_defect:.3e} > 1e-3"
        );
        Ok(format!(
            "lower integrand gap {max_z_gap:.3}, representation defect {max_defect:.2e}"
        ))
    });

    all &= run_criterion(3, "deterministic integral-equation solve", || {
        let grid = bsvie::model::TimeGrid::uniform(1.0, 32).map_err(|e| e.to_string())?;
        let ens = generate_paths(&grid, 2_000, 1, 103).map_err(|e| e.to_string())?;
        let bases =
            build_slice_bases(&ens, &RegressionConfig::default()).map_err(|e| e.to_string())?;
        let psi = FreeTerm::constant(1.0);
        let g = Driver::linear_scalar(1.0, 1.0, 0.0, 0.0, 0.0);
        let cfg = SolverConfig {
            tol: 1e-9,
            ..SolverConfig::default()
        };
        let (y, z, report) =
            solve_lipschitz(&g, &psi, &ens, &bases, &cfg).map_err(|e| e.to_string())?;
        ensure!(report.converged, "fixed point did not converge");

        // Y(t) = 1 + INT_t^T Y(s) ds has the solution e^{T-t}.
        let n = grid.n_steps();
        let mut sup_gap = 0.0f64;
        for i in 0..=n {
            let truth = (1.0 - grid.node(i)).exp();
            sup_gap = sup_gap.max((y.path_mean(i, 0) - truth).abs());
        }
        let bound = 0.02 * 1.0f64.exp();
        ensure!(sup_gap <= bound, "sup value gap {sup_gap:.3e} > {bound:.3e}");

        // The solution is deterministic, so the integrand vanishes; with
        // per-slice-deterministic targets the regression error is pure
        // floating-point dust, far below any statistical spread.
        let mut max_z = 0.0f64;
        for i in 0..=n {
            for j in 0..=n {
                max_z = max_z.max(z.path_mean_abs(i, j));
            }
        }
        ensure!(max_z <= 1e-9, "integrand magnitude {max_z:.3e} > 1e-9");
        Ok(format!(
            "sup value gap {sup_gap:.2e} (bound {bound:.2e}), integrand {max_z:.1e}, {} iterations",
            report.iterations
        ))
    });

    all &= run_criterion(4, "agreement with an independent backward-Euler solver", || {
        let grid = bsvie::model::TimeGrid::uniform(1.0, 32).map_err(|e| e.to_string())?;
        let ens = generate_paths(&grid, 50_000, 1, 104).map_err(|e| e.to_string())?;
        let bases =
            build_slice_bases(&ens, &RegressionConfig::default()).map_err(|e| e.to_string())?;
        let psi = FreeTerm::terminal_state();
        let g = Driver::linear_scalar(1.0, 0.0, -1.0, 0.0, 0.0);
        let cfg = SolverConfig {
            mode: SolutionMode::Adapted,
            ..SolverConfig::default()
        };
        let (y, _z, report) =
            solve_lipschitz(&g, &psi, &ens, &bases, &cfg).map_err(|e| e.to_string())?;
        ensure!(report.converged, "fixed point did not converge");

        // The driver reads only the kernel argument, so the equation collapses
        // to a one-parameter backward equation solved here by an independent
        // backward-Euler scheme on the same paths.
        let n = grid.n_steps();
        let mp = ens.n_paths();
        let terminal: Vec<f64> = (0..mp).map(|p| ens.w_at(n, p, 0)).collect();
        let oracle = common::backward_euler_bsde(&ens, &terminal, |_y, z| -z);

        let dt = grid.step(0);
        let mut max_gap = 0.0f64;
        for (i, orow) in oracle.iter().enumerate() {
            let ys = y.slice(i);
            let diffs: Vec<f64> = ys.iter().zip(orow).map(|(a, b)| a - b).collect();
            let (mean, sd) = common::mean_sd(&diffs);
            let allowance = 3.0 * sd / (mp as f64).sqrt() + dt;
            ensure!(
                mean.abs() <= allowance,
                "node {i}: mean gap {:.3e} exceeds 3 SE + step = {allowance:.3e}",
                mean.abs()
            );
            max_gap = max_gap.max(mean.abs());
        }
        Ok(format!(
            "max |mean gap| {max_gap:.2e} within 3 SE + step ({dt:.3} dominant)"
        ))
    });

    all &= run_criterion(5, "weighted contraction at default and doubled exponents", || {
        let grid = bsvie::model::TimeGrid::uniform(1.0, 16).map_err(|e| e.to_string())?;
        let ens = generate_paths(&grid, 8_000, 1, 23).map_err(|e| e.to_string())?;
        let bases =
            build_slice_bases(&ens, &RegressionConfig::default()).map_err(|e| e.to_string())?;
        let psi = FreeTerm::terminal_state();
        let g = Driver::linear_scalar(0.8, 1.0, 0.5, 0.0, 0.2);

        let cfg = SolverConfig::default();
        let (_, _, report) =
            solve_lipschitz(&g, &psi, &ens, &bases, &cfg).map_err(|e| e.to_string())?;
        ensure!(report.converged, "default run did not converge");
        let sup1 = report
            .contraction_factors
            .iter()
            .flatten()
            .cloned()
            .fold(0.0f64, f64::max);
        ensure!(
            report.contraction_factors.iter().flatten().all(|f| *f < 1.0),
            "a contraction factor reached 1 at the default exponent (sup {sup1:.3})"
        );

        let doubled = SolverConfig {
            beta: Some(2.0 * report.beta_used),
            ..SolverConfig::default()
        };
        let (_, _, report2) =
            solve_lipschitz(&g, &psi, &ens, &bases, &doubled).map_err(|e| e.to_string())?;
        ensure!(report2.converged, "doubled-exponent run did not converge");
        let sup2 = report2
            .contraction_factors
            .iter()
            .flatten()
            .cloned()
            .fold(0.0f64, f64::max);
        ensure!(
            sup2 <= sup1 + 1e-12,
            "doubling the exponent raised the sup factor: {sup1:.4} -> {sup2:.4}"
        );
        Ok(format!(
            "sup factor {sup1:.3} at exponent {}, {sup2:.3} at doubled",
            report.beta_used
        ))
    });

    all &= run_criterion(6, "energy estimates on randomized data", || {
        let mut rng = Rng::seed_from_u64(106);
        let grid = bsvie::model::TimeGrid::uniform(1.0, 16).map_err(|e| e.to_string())?;
        let alpha2 = vec![1.0; grid.n_nodes()];
        let mut runs = 0usize;
        for k in 0..10 {
            let psi = FreeTerm::brownian_poly(
                uniform(&mut rng, -1.0, 1.0),
                uniform(&mut rng, -1.0, 1.0),
                uniform(&mut rng, -1.0, 1.0),
                uniform(&mut rng, -1.0, 1.0),
                uniform(&mut rng, -1.0, 1.0),
            );
            let field = AffineBrownianField {
                constant: uniform(&mut rng, -1.0, 1.0),
                t_coeff: uniform(&mut rng, -1.0, 1.0),
                s_coeff: uniform(&mut rng, -1.0, 1.0),
                w_coeff: uniform(&mut rng, -1.0, 1.0),
            };
            let beta = uniform(&mut rng, 1.0, 4.0);
            let w = build_weight_profile(&grid, &alpha2, beta, 1.5, WeightMode::Plain)
                .map_err(|e| e.to_string())?;
            for s in 0..3 {
                let seed = 600 + 10 * k + s;
                let ens = generate_paths(&grid, 4_000, 1, seed).map_err(|e| e.to_string())?;
                let bases = build_slice_bases(&ens, &RegressionConfig::default())
                    .map_err(|e| e.to_string())?;
                let (y, mut z) =
                    solve_simple(&psi, &field, &ens, &bases).map_err(|e| e.to_string())?;
                m_extend(&y, &ens, &bases, &mut z).map_err(|e| e.to_string())?;
                let psi_tab = psi.tabulate(&ens).map_err(|e| e.to_string())?;

                let we = verify_weighted_energy_bound(&y, &z, &psi_tab, &field, &ens, &w)
                    .map_err(|e| e.to_string())?;
                ensure!(
                    we.pass,
                    "weighted energy failed on data set {k} seed {seed}: ratio {:.3}",
                    we.ratio
                );
                let pt = verify_per_time_bound(&y, &z, &psi_tab, &field, &ens, &w, 64.0)
                    .map_err(|e| e.to_string())?;
                ensure!(
                    pt.pass,
                    "per-time bound failed on data set {k} seed {seed}: max ratio {:.3}",
                    pt.max_ratio
                );
                let le =
                    lower_triangle_energy_check(&y, &z, &ens, &w).map_err(|e| e.to_string())?;
                ensure!(
                    le.pass,
                    "lower-triangle energy failed on data set {k} seed {seed}: ratio {:.3}",
                    le.ratio
                );
                runs += 1;
            }
        }
        Ok(format!("3 estimates passed on {runs} randomized runs"))
    });

    all &= run_criterion(7, "averaged concavity inequality on random inputs", || {
        let mut rng = Rng::seed_from_u64(107);
        let grid = bsvie::model::TimeGrid::uniform(1.0, 16).map_err(|e| e.to_string())?;
        let n_nodes = grid.n_nodes();

        // Random concave piecewise-linear maps: minima of a few affine lines.
        for trial in 0..1000 {
            let lines: Vec<(f64, f64)> = (0..4)
                .map(|_| (uniform(&mut rng, -2.0, 3.0), uniform(&mut rng, 0.0, 2.0)))
                .collect();
            let c = move |x: f64| {
                lines
                    .iter()
                    .map(|(a, b)| a * x + b)
                    .fold(f64::INFINITY, f64::min)
            };
            let f: Vec<f64> = (0..n_nodes).map(|_| uniform(&mut rng, 0.0, 4.0)).collect();
            let t_index = (rng.next_u64() % 16) as usize;
            let (lhs, rhs) =
                concavity_lemma_check(&c, &f, t_index, &grid).map_err(|e| e.to_string())?;
            ensure!(
                lhs <= rhs + 1e-8,
                "piecewise-linear trial {trial}: lhs {lhs} > rhs {rhs} + 1e-8"
            );
        }

        // The three standard moduli as the concave map.
        let moduli = standard_moduli(0.1).map_err(|e| e.to_string())?;
        for modulus in &moduli {
            for trial in 0..100 {
                let f: Vec<f64> = (0..n_nodes).map(|_| uniform(&mut rng, 0.0, 4.0)).collect();
                let t_index = (rng.next_u64() % 16) as usize;
                let (lhs, rhs) = concavity_lemma_check(&|x| modulus.rho(x), &f, t_index, &grid)
                    .map_err(|e| e.to_string())?;
                ensure!(
                    lhs <= rhs + 1e-8,
                    "{} trial {trial}: lhs {lhs} > rhs {rhs} + 1e-8",
                    modulus.name()
                );
            }
        }
        Ok("1000 piecewise-linear + 300 modulus trials within 1e-8".to_string())
    });

    all &= run_criterion(8, "outer recursion on a non-Lipschitz driver", || {
        let grid = bsvie::model::TimeGrid::uniform(1.0, 16).map_err(|e| e.to_string())?;
        let ens = generate_paths(&grid, 16_000, 1, 19).map_err(|e| e.to_string())?;
        let bases =
            build_slice_bases(&ens, &RegressionConfig::default()).map_err(|e| e.to_string())?;
        let psi = FreeTerm::t_times_terminal();
        let g = Driver::capped_log_mix(0.5, 0.3).map_err(|e| e.to_string())?;
        let tol = 1e-5;
        let cfg = SolverConfig {
            tol,
            max_iter: 40,
            ..SolverConfig::default()
        };
        let (y, z, report) =
            picard_solve(&g, &psi, &ens, &bases, &cfg).map_err(|e| e.to_string())?;
        ensure!(report.converged, "outer recursion did not converge");

        let d = &report.distances;
        for k in 2..d.len() {
            ensure!(
                d[k] < d[k - 1],
                "distances not strictly decreasing after burn-in: d[{}]={:.3e} >= d[{}]={:.3e}",
                k,
                d[k],
                k - 1,
                d[k - 1]
            );
        }
        let final_gap = *d.last().ok_or("no recorded distances")?;
        ensure!(final_gap <= 1e-4, "final gap {final_gap:.3e} > 1e-4");

        let residuals = bsvie_residual(&y, &z, &g, &psi, &ens).map_err(|e| e.to_string())?;
        let max_residual = residuals.iter().cloned().fold(0.0f64, f64::max);
        ensure!(max_residual <= 1e-3, "residual {max_residual:.3e} > 1e-3");

        let psi_tab = psi.tabulate(&ens).map_err(|e| e.to_string())?;
        let data_mass = value_mass(&psi_tab, &grid);
        let modulus = g.modulus.as_ref().ok_or("driver lost its modulus")?;
        let gw = gronwall_bound_check(
            &report.value_masses,
            modulus.linear_bound,
            0.5,
            grid.horizon(),
            data_mass,
            16.0,
        );
        ensure!(
            gw.consistent,
            "iterate masses exceeded the growth bound: sup {:.3e} vs {:.3e}",
            gw.sup_mass,
            gw.bound
        );

        // Uniqueness probe: a second, distinct initial iterate must land on
        // the same solution.
        let (y0, _) = solve_simple(&psi, &ZeroField { dim_m: 1 }, &ens, &bases)
            .map_err(|e| e.to_string())?;
        let (y_alt, _, report_alt) =
            picard_solve_from(&g, &psi, &ens, &bases, &cfg, Some(&y0)).map_err(|e| e.to_string())?;
        ensure!(report_alt.converged, "warm-started recursion did not converge");
        let gap = value_gap_squared(&y, &y_alt, &grid).map_err(|e| e.to_string())?;
        ensure!(
            gap <= 4.0 * tol,
            "two starts disagree: gap {gap:.3e} > {:.1e}",
            4.0 * tol
        );
        Ok(format!(
            "{} outer steps, final gap {final_gap:.1e}, residual {max_residual:.1e}, start gap {gap:.1e}",
            report.iterations
        ))
    });

    all &= run_criterion(9, "thread-count determinism of the command-line runner", || {
        let exe = env!("CARGO_BIN_EXE_bsvie");
        let dir1 = tempfile::tempdir().map_err(|e| e.to_string())?;
        let dir8 = tempfile::tempdir().map_err(|e| e.to_string())?;
        for (threads, dir) in [("1", dir1.path()), ("8", dir8.path())] {
            let out = std::process::Command::new(exe)
                .args([
                    "run",
                    "--config",
                    "linear_lipschitz",
                    "--seed",
                    "5",
                    "--threads",
                    threads,
                    "--out",
                ])
                .arg(dir)
                .output()
                .map_err(|e| e.to_string())?;
            ensure!(
                out.status.success(),
                "runner with {threads} thread(s) exited {:?}: {}",
                out.status.code(),
                String::from_utf8_lossy(&out.stderr)
            );
        }
        for name in ["solution_Y.csv", "solution_Z.csv", "iterates.csv"] {
            let a = std::fs::read(dir1.path().join(name)).map_err(|e| e.to_string())?;
            let b = std::fs::read(dir8.path().join(name)).map_err(|e| e.to_string())?;
            ensure!(!a.is_empty(), "{name} is empty");
            ensure!(a == b, "{name} differs between 1 and 8 worker threads");
        }
        Ok("three CSV tables byte-identical across 1 and 8 worker threads".to_string())
    });

    all &= run_criterion(10, "residual stability under grid refinement", || {
        // On exactly representable data the residual is a pure regression-noise
        // floor driven by a handful of shared coefficient errors per slice, so
        // a single run of the max has a sampling spread of tens of percent.
        // Measure that spread honestly: replicate each resolution over three
        // seeds and compare seed-means with a pooled empirical standard error.
        let m_paths = 50_000usize;
        let seeds = [110u64, 210, 310];
        let data_sets: [(&str, FreeTerm); 2] = [
            ("t*terminal", FreeTerm::t_times_terminal()),
            ("terminal", FreeTerm::terminal_state()),
        ];
        let mut details = Vec::new();
        for (label, psi) in &data_sets {
            let mut means = Vec::new();
            let mut vars = Vec::new();
            for n in [16usize, 32, 64] {
                let mut maxima = Vec::new();
                for &seed in &seeds {
                    let grid =
                        bsvie::model::TimeGrid::uniform(1.0, n).map_err(|e| e.to_string())?;
                    let ens = generate_paths(&grid, m_paths, 1, seed).map_err(|e| e.to_string())?;
                    let bases = build_slice_bases(&ens, &RegressionConfig::default())
                        .map_err(|e| e.to_string())?;
                    let (y, z) = solve_simple(psi, &ZeroField { dim_m: 1 }, &ens, &bases)
                        .map_err(|e| e.to_string())?;
                    let residuals = bsvie_residual(&y, &z, &Driver::zero(1, 1), psi, &ens)
                        .map_err(|e| e.to_string())?;
                    maxima.push(residuals.iter().cloned().fold(0.0f64, f64::max));
                    // Tables for this run drop here before the next one builds.
                }
                let k = maxima.len() as f64;
                let mean = maxima.iter().sum::<f64>() / k;
                let var = maxima.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (k - 1.0);
                means.push((n, mean));
                vars.push(var);
            }
            // Pooled across resolutions (levels are comparable), giving the
            // difference-of-means slack 3 * sqrt(2 * pooled_var / k).
            let pooled = vars.iter().sum::<f64>() / vars.len() as f64;
            let slack = 3.0 * (2.0 * pooled / seeds.len() as f64).sqrt();
            for w in means.windows(2) {
                let (n_prev, r_prev) = w[0];
                let (n, r) = w[1];
                ensure!(
                    r <= r_prev + slack,
                    "{label}: mean max residual grew from {r_prev:.3e} (N={n_prev}) to {r:.3e} (N={n}) beyond slack {slack:.3e}"
                );
            }
            details.push(format!(
                "{label}: {} (slack {slack:.1e})",
                means
                    .iter()
                    .map(|(n, r)| format!("N={n}: {r:.2e}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            ));
        }
        Ok(details.join("; "))
    });

    assert!(all, "one or more acceptance criteria failed");
}
