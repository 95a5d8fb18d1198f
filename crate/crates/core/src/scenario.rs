//! Declarative scenario configs, the bundled scenario corpus, and the run
//! pipeline: build the ensemble, run the selected solver, run the enabled
//! checks, and emit `report.json` plus plot-ready CSV tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    bsvie_residual, frozen_equation_residual, lower_triangle_energy_check,
    m_identity_residual, verify_per_time_bound, verify_weighted_energy_bound,
    VerificationReport,
};
use crate::error::{Error, Result};
use crate::lipschitz::{solve_lipschitz, SolverConfig, SolverReport};
use crate::model::{
    build_weight_profile, Driver, FreeTerm, PathEnsemble, Process1P, Process2P, TimeGrid,
    WeightMode, WeightProfile,
};
use crate::paths::generate_paths;
use crate::picard::{bihari_monitor, gronwall_bound_check, picard_solve, value_mass};
use crate::regression::{build_slice_bases, RegressionConfig, SliceBases};
use crate::simple_bsvie::{
    m_extend, solve_simple, AffineBrownianField, FrozenDriverField, FrozenField,
};

/// Uniform time grid description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    pub horizon: f64,
    pub steps: usize,
}

/// Path-ensemble description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub paths: usize,
    /// Brownian dimension.
    #[serde(default = "one_usize")]
    pub dim: usize,
    pub seed: u64,
}

fn one_usize() -> usize {
    1
}

/// Free-term (terminal data) description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FreeTermSpec {
    /// `psi(t) = value`.
    Constant { value: f64 },
    /// `psi(t) = c0 + c1 t + c2 W(T) + c3 t W(T) + c4 W(T)^2`.
    BrownianPoly {
        #[serde(default)]
        constant: f64,
        #[serde(default)]
        t_coeff: f64,
        #[serde(default)]
        w_terminal: f64,
        #[serde(default)]
        t_times_w_terminal: f64,
        #[serde(default)]
        w_terminal_sq: f64,
    },
}

impl FreeTermSpec {
    fn build(&self) -> FreeTerm {
        match *self {
            FreeTermSpec::Constant { value } => FreeTerm::constant(value),
            FreeTermSpec::BrownianPoly {
                constant,
                t_coeff,
                w_terminal,
                t_times_w_terminal,
                w_terminal_sq,
            } => FreeTerm::brownian_poly(
                constant,
                t_coeff,
                w_terminal,
                t_times_w_terminal,
                w_terminal_sq,
            ),
        }
    }
}

/// Driver description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriverSpec {
    /// `g = l (a_y y + a_z z + a_zeta zeta + a_const)`.
    Linear {
        #[serde(default)]
        l: f64,
        #[serde(default)]
        a_y: f64,
        #[serde(default)]
        a_z: f64,
        #[serde(default)]
        a_zeta: f64,
        #[serde(default)]
        a_const: f64,
    },
    /// The capped `u log(1/u)`-response driver with a declared concave modulus.
    CappedLogMix { l: f64, f_cap: f64 },
}

impl Default for DriverSpec {
    fn default() -> Self {
        DriverSpec::Linear {
            l: 0.0,
            a_y: 0.0,
            a_z: 0.0,
            a_zeta: 0.0,
            a_const: 0.0,
        }
    }
}

impl DriverSpec {
    fn build(&self) -> Result<Driver> {
        match *self {
            DriverSpec::Linear {
                l,
                a_y,
                a_z,
                a_zeta,
                a_const,
            } => Ok(Driver::linear_scalar(l, a_y, a_z, a_zeta, a_const)),
            DriverSpec::CappedLogMix { l, f_cap } => Driver::capped_log_mix(l, f_cap),
        }
    }
}

/// Deterministic-plus-Brownian data field for driver-frozen runs.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct FieldSpec {
    pub constant: f64,
    pub t_coeff: f64,
    pub s_coeff: f64,
    pub w_coeff: f64,
}

impl FieldSpec {
    fn build(&self) -> AffineBrownianField {
        AffineBrownianField {
            constant: self.constant,
            t_coeff: self.t_coeff,
            s_coeff: self.s_coeff,
            w_coeff: self.w_coeff,
        }
    }
}

/// Which solver drives the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SolverSpec {
    /// One driver-frozen solve against an explicit data field (the driver is
    /// ignored as an equation and only used for check metadata).
    Simple {
        #[serde(default)]
        field: FieldSpec,
        /// Extend the kernel table to the lower triangle afterwards.
        #[serde(default)]
        extend: bool,
    },
    /// Fixed-point iteration for Lipschitz drivers.
    FixedPoint {
        #[serde(flatten)]
        config: SolverConfig,
    },
    /// Outer recursion for concave-modulus drivers.
    Outer {
        #[serde(flatten)]
        config: SolverConfig,
    },
}

impl SolverSpec {
    fn kind_name(&self) -> &'static str {
        match self {
            SolverSpec::Simple { .. } => "simple",
            SolverSpec::FixedPoint { .. } => "fixed_point",
            SolverSpec::Outer { .. } => "outer",
        }
    }
}

/// Which checks run after the solve, and with what constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ChecksSpec {
    /// Equation-residual tolerance; absent disables the check.
    pub residual_tol: Option<f64>,
    /// Representation-identity tolerance; absent disables the check.
    pub m_identity_tol: Option<f64>,
    pub weighted_energy: bool,
    pub per_time: bool,
    pub lower_energy: bool,
    pub gronwall: bool,
    pub monitor: bool,
    /// Generic constant of the per-node bound.
    pub c_generic: f64,
    /// Constant of the iterate-mass bound.
    pub c_gronwall: f64,
    /// One-step domination constant of the convergence monitor.
    pub c_monitor: f64,
    /// Final-gap tolerance of the monitor; default ten times the solver tol.
    pub monitor_tol: Option<f64>,
    /// Weight exponent for the estimate profile; default: the solver's.
    pub estimate_beta: Option<f64>,
    /// Constant `alpha^2` override for the estimate profile; default: derived
    /// from the driver's declared coefficients.
    pub estimate_alpha2: Option<f64>,
}

impl Default for ChecksSpec {
    fn default() -> Self {
        ChecksSpec {
            residual_tol: None,
            m_identity_tol: None,
            weighted_energy: false,
            per_time: false,
            lower_energy: false,
            gronwall: false,
            monitor: false,
            c_generic: 64.0,
            c_gronwall: 16.0,
            c_monitor: 1.0,
            monitor_tol: None,
            estimate_beta: None,
            estimate_alpha2: None,
        }
    }
}

/// One fully-described run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub grid: GridSpec,
    pub ensemble: EnsembleSpec,
    pub free_term: FreeTermSpec,
    #[serde(default)]
    pub driver: DriverSpec,
    pub solver: SolverSpec,
    #[serde(default)]
    pub regression: RegressionConfig,
    #[serde(default)]
    pub checks: ChecksSpec,
}

/// Top-level contents of `report.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub description: String,
    pub seed: u64,
    pub solver_kind: String,
    /// Iteration report; absent for single-pass runs.
    pub solver: Option<SolverReport>,
    pub checks: VerificationReport,
    pub all_passed: bool,
}

const BUILTIN_SOURCES: &[(&str, &str)] = &[
    ("zero", include_str!("../scenarios/zero.json")),
    ("exp_volterra", include_str!("../scenarios/exp_volterra.json")),
    (
        "bsde_reduction",
        include_str!("../scenarios/bsde_reduction.json"),
    ),
    ("m_extension", include_str!("../scenarios/m_extension.json")),
    ("capped_log", include_str!("../scenarios/capped_log.json")),
    (
        "linear_lipschitz",
        include_str!("../scenarios/linear_lipschitz.json"),
    ),
];

/// Names of the bundled scenarios, in catalog order.
pub fn builtin_names() -> Vec<&'static str> {
    BUILTIN_SOURCES.iter().map(|(n, _)| *n).collect()
}

/// Parse a scenario from JSON text; malformed input is a configuration error.
pub fn parse_scenario(json: &str) -> Result<Scenario> {
    serde_json::from_str(json)
        .map_err(|e| Error::Config(format!("scenario config does not parse: {e}")))
}

/// Load a bundled scenario by name.
pub fn builtin(name: &str) -> Result<Scenario> {
    for (n, src) in BUILTIN_SOURCES {
        if *n == name {
            return parse_scenario(src);
        }
    }
    Err(Error::Config(format!(
        "unknown scenario name '{name}'; bundled scenarios: {}",
        builtin_names().join(", ")
    )))
}

/// Load a scenario from a file path.
pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    parse_scenario(&text)
}

/// Resolve a `--config` argument: an existing file path wins, otherwise the
/// name is looked up among the bundled scenarios.
pub fn resolve_scenario(config: &str) -> Result<Scenario> {
    let path = Path::new(config);
    if path.exists() {
        load_scenario(path)
    } else {
        builtin(config)
    }
}

/// One row of the scenario catalog.
#[derive(Debug, Clone, Serialize)]
pub struct ScenarioEntry {
    pub name: String,
    pub description: String,
    /// `"builtin"` or the file path it was read from.
    pub origin: String,
    /// Present when the file did not parse; the entry is still listed.
    pub parse_error: Option<String>,
}

/// Catalog of bundled scenarios plus, optionally, `*.json` files in a
/// directory. Files that fail to parse are listed with the error rather than
/// dropped.
pub fn catalog(custom_dir: Option<&Path>) -> Result<Vec<ScenarioEntry>> {
    let mut entries = Vec::new();
    for (name, src) in BUILTIN_SOURCES {
        let sc = parse_scenario(src)?;
        entries.push(ScenarioEntry {
            name: name.to_string(),
            description: sc.description,
            origin: "builtin".to_string(),
            parse_error: None,
        });
    }
    if let Some(dir) = custom_dir {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        for file in files {
            let origin = file.display().to_string();
            match std::fs::read_to_string(&file)
                .map_err(Error::from)
                .and_then(|text| parse_scenario(&text))
            {
                Ok(sc) => entries.push(ScenarioEntry {
                    name: sc.name,
                    description: sc.description,
                    origin,
                    parse_error: None,
                }),
                Err(e) => entries.push(ScenarioEntry {
                    name: file
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| origin.clone()),
                    description: String::new(),
                    origin,
                    parse_error: Some(e.to_string()),
                }),
            }
        }
    }
    Ok(entries)
}

const CHECK_NAMES: &[&str] = &[
    "residual",
    "m_identity",
    "weighted_energy",
    "per_time",
    "lower_energy",
    "gronwall",
    "monitor",
];

/// Restrict the enabled checks to `keep` (a `--checks` list). Names not in
/// the list are disabled; a name outside the known set is a config error.
/// Filtering can only disable checks, so it never flips a passing run to
/// failing.
pub fn filter_checks(checks: &mut ChecksSpec, keep: &[String]) -> Result<()> {
    for name in keep {
        if !CHECK_NAMES.contains(&name.as_str()) {
            return Err(Error::Config(format!(
                "unknown check '{name}'; known checks: {}",
                CHECK_NAMES.join(", ")
            )));
        }
    }
    let on = |n: &str| keep.iter().any(|k| k == n);
    if !on("residual") {
        checks.residual_tol = None;
    }
    if !on("m_identity") {
        checks.m_identity_tol = None;
    }
    checks.weighted_energy &= on("weighted_energy");
    checks.per_time &= on("per_time");
    checks.lower_energy &= on("lower_energy");
    checks.gronwall &= on("gronwall");
    checks.monitor &= on("monitor");
    Ok(())
}

fn estimate_profile(
    sc: &Scenario,
    g: &Driver,
    grid: &TimeGrid,
    solver_beta: Option<f64>,
) -> Result<WeightProfile> {
    let alpha2: Vec<f64> = match sc.checks.estimate_alpha2 {
        Some(a) => vec![a; grid.n_nodes()],
        None => {
            if g.has_stochastic_coeff() {
                let h = grid.horizon();
                let sup = g.r1.sup_bound(h).powi(2)
                    + g.r2.sup_bound(h).powi(2)
                    + g.r3.sup_bound(h).powi(2);
                vec![sup.max(1e-9); grid.n_nodes()]
            } else {
                g.alpha2_nodes(grid)?
                    .into_iter()
                    .map(|a| a.max(1e-9))
                    .collect()
            }
        }
    };
    let beta = sc
        .checks
        .estimate_beta
        .or(solver_beta)
        .unwrap_or_else(|| g.default_beta(grid.horizon()));
    build_weight_profile(grid, &alpha2, beta, 1.5, WeightMode::Plain)
}

fn format_field(out: &mut String, v: f64) {
    let _ = write!(out, "{v:.16e}");
}

fn write_solution_csv(out_dir: &Path, y: &Process1P, z: &Process2P, grid: &TimeGrid) -> Result<()> {
    let m = y.dim_m();
    let mut text = String::new();
    if m == 1 {
        text.push_str("t,mean,sd\n");
    } else {
        text.push('t');
        for c in 0..m {
            let _ = write!(text, ",mean_{c},sd_{c}");
        }
        text.push('\n');
    }
    for i in 0..grid.n_nodes() {
        format_field(&mut text, grid.node(i));
        for c in 0..m {
            text.push(',');
            format_field(&mut text, y.path_mean(i, c));
            text.push(',');
            format_field(&mut text, y.path_sd(i, c));
        }
        text.push('\n');
    }
    std::fs::write(out_dir.join("solution_Y.csv"), text)?;

    let mut ztext = String::from("t,s,mean_abs\n");
    for i in 0..grid.n_nodes() {
        let j_lo = match z.domain() {
            crate::model::DomainMode::FullSquare => 0,
            crate::model::DomainMode::UpperTriangle => i,
        };
        for j in j_lo..grid.n_nodes() {
            format_field(&mut ztext, grid.node(i));
            ztext.push(',');
            format_field(&mut ztext, grid.node(j));
            ztext.push(',');
            format_field(&mut ztext, z.path_mean_abs(i, j));
            ztext.push('\n');
        }
    }
    std::fs::write(out_dir.join("solution_Z.csv"), ztext)?;
    Ok(())
}

fn write_iterates_csv(out_dir: &Path, report: Option<&SolverReport>) -> Result<()> {
    let mut text = String::from("iteration,distance,factor\n");
    if let Some(rep) = report {
        for (k, dist) in rep.distances.iter().enumerate() {
            let _ = write!(text, "{k},");
            format_field(&mut text, *dist);
            text.push(',');
            if let Some(Some(f)) = rep.contraction_factors.get(k) {
                format_field(&mut text, *f);
            }
            text.push('\n');
        }
    }
    std::fs::write(out_dir.join("iterates.csv"), text)?;
    Ok(())
}

fn write_report_json(out_dir: &Path, report: &RunReport) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    std::fs::write(out_dir.join("report.json"), text)?;
    Ok(())
}

struct Solved {
    y: Process1P,
    z: Process2P,
    report: Option<SolverReport>,
}

fn dispatch_solver(
    sc: &Scenario,
    g: &Driver,
    psi: &FreeTerm,
    ens: &PathEnsemble,
    bases: &SliceBases,
) -> Result<Solved> {
    match &sc.solver {
        SolverSpec::Simple { field, extend } => {
            let f = field.build();
            let (y, mut z) = solve_simple(psi, &f, ens, bases)?;
            if *extend {
                m_extend(&y, ens, bases, &mut z)?;
            }
            Ok(Solved { y, z, report: None })
        }
        SolverSpec::FixedPoint { config } => {
            let (y, z, report) = solve_lipschitz(g, psi, ens, bases, config)?;
            Ok(Solved {
                y,
                z,
                report: Some(report),
            })
        }
        SolverSpec::Outer { config } => {
            let (y, z, report) = picard_solve(g, psi, ens, bases, config)?;
            Ok(Solved {
                y,
                z,
                report: Some(report),
            })
        }
    }
}

fn run_checks(
    sc: &Scenario,
    g: &Driver,
    psi: &FreeTerm,
    ens: &PathEnsemble,
    solved: &Solved,
) -> Result<VerificationReport> {
    let checks = &sc.checks;
    let mut out = VerificationReport::default();
    let grid = ens.grid();

    if let Some(tol) = checks.residual_tol {
        let residuals = match &sc.solver {
            SolverSpec::Simple { field, .. } => {
                let f = field.build();
                frozen_equation_residual(&solved.y, &solved.z, &f, psi, ens)?
            }
            _ => bsvie_residual(&solved.y, &solved.z, g, psi, ens)?,
        };
        out.residual_max = residuals.iter().cloned().reduce(f64::max);
        out.residual_tol = Some(tol);
    }
    if let Some(tol) = checks.m_identity_tol {
        let residuals = m_identity_residual(&solved.y, &solved.z, ens)?;
        out.m_identity_max = residuals.iter().cloned().reduce(f64::max);
        out.m_identity_tol = Some(tol);
    }

    let needs_profile = checks.weighted_energy || checks.per_time || checks.lower_energy;
    if needs_profile {
        let solver_beta = solved.report.as_ref().map(|r| r.beta_used);
        let w = estimate_profile(sc, g, grid, solver_beta)?;
        let psi_tab = psi.tabulate(ens)?;
        // The data field of the equation the solution actually solves: the
        // explicit field for driver-frozen runs, the driver frozen at the
        // final tables otherwise.
        let simple_field = match &sc.solver {
            SolverSpec::Simple { field, .. } => Some(field.build()),
            _ => None,
        };
        let frozen = match simple_field {
            None => Some(FrozenDriverField::new(g, &solved.y, Some(&solved.z))?),
            Some(_) => None,
        };
        let f: &dyn FrozenField = match (&simple_field, &frozen) {
            (Some(f), _) => f,
            (None, Some(f)) => f,
            _ => unreachable!(),
        };
        if checks.weighted_energy {
            out.weighted_energy = Some(verify_weighted_energy_bound(
                &solved.y, &solved.z, &psi_tab, f, ens, &w,
            )?);
        }
        if checks.per_time {
            out.per_time = Some(verify_per_time_bound(
                &solved.y,
                &solved.z,
                &psi_tab,
                f,
                ens,
                &w,
                checks.c_generic,
            )?);
        }
        if checks.lower_energy {
            out.lower_energy = Some(lower_triangle_energy_check(
                &solved.y, &solved.z, ens, &w,
            )?);
        }
    }

    if checks.gronwall || checks.monitor {
        let report = solved.report.as_ref().ok_or_else(|| {
            Error::Config(
                "iteration checks need an iterating solver (fixed_point or outer)".into(),
            )
        })?;
        if checks.gronwall {
            let psi_tab = psi.tabulate(ens)?;
            let data_mass = value_mass(&psi_tab, grid);
            let (a, b) = g
                .modulus
                .as_ref()
                .map(|m| m.linear_bound)
                .unwrap_or((0.0, 1.0));
            out.gronwall = Some(gronwall_bound_check(
                &report.value_masses,
                (a, b),
                g.kernel.sup_abs(grid.horizon()),
                grid.horizon(),
                data_mass,
                checks.c_gronwall,
            ));
        }
        if checks.monitor {
            let modulus = g.modulus.as_ref().ok_or_else(|| {
                Error::Config("the convergence monitor needs a driver modulus".into())
            })?;
            let tol = checks.monitor_tol.unwrap_or_else(|| {
                let base = match &sc.solver {
                    SolverSpec::FixedPoint { config } | SolverSpec::Outer { config } => {
                        config.tol
                    }
                    SolverSpec::Simple { .. } => 1e-8,
                };
                base * 10.0
            });
            out.monitor = Some(bihari_monitor(
                &report.distances,
                modulus,
                checks.c_monitor,
                tol,
            ));
        }
    }

    out.finalize();
    Ok(out)
}

/// Run one scenario end to end, writing `report.json`, `solution_Y.csv`,
/// `solution_Z.csv`, and `iterates.csv` into `out_dir`.
///
/// `keep_checks` restricts the enabled checks (`None` keeps the scenario's
/// own selection). The returned report's `all_passed` decides the process
/// exit status; a diverging solver still writes `report.json` and
/// `iterates.csv` before the divergence error is returned.
pub fn run_scenario(
    sc: &Scenario,
    out_dir: &Path,
    keep_checks: Option<&[String]>,
) -> Result<RunReport> {
    let mut sc = sc.clone();
    if let Some(keep) = keep_checks {
        filter_checks(&mut sc.checks, keep)?;
    }
    std::fs::create_dir_all(out_dir)?;
    let grid = TimeGrid::uniform(sc.grid.horizon, sc.grid.steps)?;
    let ens = generate_paths(
        &grid,
        sc.ensemble.paths,
        sc.ensemble.dim,
        sc.ensemble.seed,
    )?;
    let bases = build_slice_bases(&ens, &sc.regression)?;
    let psi = sc.free_term.build();
    let g = sc.driver.build()?;

    let solved = match dispatch_solver(&sc, &g, &psi, &ens, &bases) {
        Ok(s) => s,
        Err(Error::Divergence { message, report }) => {
            write_iterates_csv(out_dir, Some(&report))?;
            let run = RunReport {
                scenario: sc.name.clone(),
                description: sc.description.clone(),
                seed: sc.ensemble.seed,
                solver_kind: sc.solver.kind_name().to_string(),
                solver: Some((*report).clone()),
                checks: VerificationReport::default(),
                all_passed: false,
            };
            write_report_json(out_dir, &run)?;
            return Err(Error::Divergence { message, report });
        }
        Err(e) => return Err(e),
    };

    let checks = run_checks(&sc, &g, &psi, &ens, &solved)?;
    let all_passed = checks.all_passed;
    let run = RunReport {
        scenario: sc.name.clone(),
        description: sc.description.clone(),
        seed: sc.ensemble.seed,
        solver_kind: sc.solver.kind_name().to_string(),
        solver: solved.report.clone(),
        checks,
        all_passed,
    };
    write_solution_csv(out_dir, &solved.y, &solved.z, &grid)?;
    write_iterates_csv(out_dir, solved.report.as_ref())?;
    write_report_json(out_dir, &run)?;
    Ok(run)
}
