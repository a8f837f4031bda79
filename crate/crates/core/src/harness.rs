//! Experiment runner: configuration files, measure reports, epsilon sweeps,
//! inequality suites and tensor tables.
//!
//! Every runner returns its outputs as in-memory files so callers decide
//! where (and whether) to write them. Outputs depend only on the
//! configuration; wall-clock time is left out of the CSVs unless
//! `record_wall_time = true`.

use crate::field::ScalarField;
use crate::functions::{Cutoff, Factor, SmoothTestFunction, Term};
use crate::geometry::{
    measures, monte_carlo_all, ControlRule, GeometryError, LatticeParams, Mode, Region, ThicknessLaw, MIN_MC_SAMPLES,
};
use crate::homogenized::{analytic_solution, effective_tensor, solve_homogenized, EffectiveTensor, HomogenizedError};
use crate::mesh::{build_grid, GridSpec, MeshConfig, MeshError};
use crate::operators::{
    energy_diagnostics, reports_csv, trace_ratios, verify_capacitary_bounds, verify_slice_properties, verify_trace_bounds,
    EnergyDiagnostics, InequalityReport, OperatorError,
};
use crate::pde::{
    assemble, conductivity_field, directional_energies, h1_error, h1_seminorm, l2_error, l2_norm, solution_csv,
    solve_cg, stats_csv, PdeError, Reference, SolveStats, SourceSpec,
};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("config line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("invalid `{key}`: {message}")]
    Invalid { key: &'static str, message: String },
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Homogenized(#[from] HomogenizedError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
}

/// How the layer conductivity parameter `b` is chosen at each sweep point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BScaling {
    /// `b` as configured.
    Fixed,
    /// `b = a |T|`, so the layers carry the ambient conductivity and the
    /// reference is the uniform-`a` problem.
    UnitContrast,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SourceChoice {
    /// `pi^2 (A_1 + A_2 + A_3) prod cos(pi x_i)`, for which the homogenized
    /// solution is `prod cos(pi x_i)`.
    Matched,
    Cosine(f64),
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub n: Vec<u32>,
    pub law: ThicknessLaw,
    pub a: f64,
    pub b: f64,
    pub b_scaling: BScaling,
    pub source: SourceChoice,
    /// Explicit volume fractions for `effective`; the limit fractions of the
    /// thickness law otherwise.
    pub fractions: Option<[f64; 3]>,
    pub mesh: MeshConfig,
    pub rel_tol: f64,
    pub max_iter: usize,
    pub control: ControlRule,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub mc_samples: u64,
    pub record_wall_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Reticulated,
            n: vec![1, 2, 3],
            law: ThicknessLaw { c: [1.0; 3], p: 2.0 },
            a: 1.0,
            b: 1.0,
            b_scaling: BScaling::Fixed,
            source: SourceChoice::Matched,
            fractions: None,
            mesh: MeshConfig { include_control: true, ..MeshConfig::default() },
            rel_tol: 1e-10,
            max_iter: 20_000,
            control: ControlRule::GeometricMean,
            out: None,
            seed: 20_240_917,
            mc_samples: 1_000_000,
            record_wall_time: false,
        }
    }
}

/// Parses a number, accepting `p/q` fractions.
pub fn parse_number(s: &str) -> Result<f64, String> {
    let s = s.trim();
    let parse = |t: &str| t.trim().parse::<f64>().map_err(|_| format!("`{t}` is not a number"));
    match s.split_once('/') {
        Some((p, q)) => {
            let q = parse(q)?;
            if q == 0.0 {
                return Err(format!("zero denominator in `{s}`"));
            }
            Ok(parse(p)? / q)
        }
        None => parse(s),
    }
}

fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',').map(parse_number).collect()
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(format!("`{other}` is not a boolean")),
    }
}

fn parse_source(s: &str) -> Result<SourceChoice, String> {
    let s = s.trim();
    if s == "matched" {
        return Ok(SourceChoice::Matched);
    }
    if let Some(v) = s.strip_prefix("cosine:") {
        return Ok(SourceChoice::Cosine(parse_number(v)?));
    }
    if let Some(v) = s.strip_prefix("constant:") {
        return Ok(SourceChoice::Constant(parse_number(v)?));
    }
    Err(format!("unknown source `{s}` (matched, cosine:<A>, constant:<c>)"))
}

fn triple(v: Vec<f64>) -> Result<[f64; 3], String> {
    v.try_into().map_err(|v: Vec<f64>| format!("expected 3 values, got {}", v.len()))
}

fn integer<T: std::str::FromStr>(s: &str) -> Result<T, String> {
    s.trim().parse().map_err(|_| format!("`{}` is not a non-negative integer", s.trim()))
}

impl ExperimentConfig {
    /// Parses `key = value` lines; `#` starts a comment, lists are
    /// comma-separated, unspecified keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| HarnessError::Syntax { line, message: format!("expected `key = value`, got `{content}`") })?;
            let (key, value) = (key.trim(), value.trim());
            let syntax = |message: String| HarnessError::Syntax { line, message: format!("{key}: {message}") };
            match key {
                "mode" => cfg.mode = value.parse().map_err(syntax)?,
                "n" => {
                    cfg.n = if value.is_empty() {
                        Vec::new()
                    } else {
                        value.split(',').map(integer).collect::<Result<_, _>>().map_err(syntax)?
                    }
                }
                "c" => cfg.law.c = parse_list(value).and_then(triple).map_err(syntax)?,
                "p" => cfg.law.p = parse_number(value).map_err(syntax)?,
                "a" => cfg.a = parse_number(value).map_err(syntax)?,
                "b" => cfg.b = parse_number(value).map_err(syntax)?,
                "b_scaling" => {
                    cfg.b_scaling = match value {
                        "fixed" => BScaling::Fixed,
                        "unit_contrast" => BScaling::UnitContrast,
                        other => return Err(syntax(format!("unknown scaling `{other}`"))),
                    }
                }
                "source" => cfg.source = parse_source(value).map_err(syntax)?,
                "m" => cfg.fractions = Some(parse_list(value).and_then(triple).map_err(syntax)?),
                "h_ambient" => cfg.mesh.h_ambient = parse_number(value).map_err(syntax)?,
                "min_cells_per_layer" => cfg.mesh.min_cells_per_layer = integer(value).map_err(syntax)?,
                "axis_node_budget" => cfg.mesh.axis_node_budget = integer(value).map_err(syntax)?,
                "total_node_budget" => cfg.mesh.total_node_budget = integer(value).map_err(syntax)?,
                "include_control" => cfg.mesh.include_control = parse_bool(value).map_err(syntax)?,
                "rel_tol" => cfg.rel_tol = parse_number(value).map_err(syntax)?,
                "max_iter" => cfg.max_iter = integer(value).map_err(syntax)?,
                "control" => cfg.control = value.parse().map_err(syntax)?,
                "out" => cfg.out = Some(PathBuf::from(value)),
                "seed" => cfg.seed = integer(value).map_err(syntax)?,
                "mc_samples" => cfg.mc_samples = integer(value).map_err(syntax)?,
                "record_wall_time" => cfg.record_wall_time = parse_bool(value).map_err(syntax)?,
                _ => return Err(HarnessError::UnknownKey { line, key: key.to_string() }),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let invalid = |key, message: String| Err(HarnessError::Invalid { key, message });
        if self.n.is_empty() {
            return invalid("n", "empty sweep".into());
        }
        if self.n[0] == 0 || self.n.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("n", format!("{:?} must be positive and strictly increasing", self.n));
        }
        if !(self.law.p > 1.0) {
            return invalid("p", format!("exponent {} must exceed 1", self.law.p));
        }
        for &i in self.mode.active_axes() {
            if !(self.law.c[i] > 0.0 && self.law.c[i].is_finite()) {
                return invalid("c", format!("c_{} = {} must be positive", i + 1, self.law.c[i]));
            }
        }
        if self.mode == Mode::Gridwork && self.law.c[2] != 0.0 {
            return invalid("c", "gridwork needs c_3 = 0".into());
        }
        if !(self.a > 0.0 && self.a.is_finite()) {
            return invalid("a", format!("{} must be positive", self.a));
        }
        if !(self.b >= 0.0 && self.b.is_finite()) {
            return invalid("b", format!("{} must be non-negative", self.b));
        }
        if !(self.mesh.h_ambient > 0.0) {
            return invalid("h_ambient", format!("{} must be positive", self.mesh.h_ambient));
        }
        if self.mesh.min_cells_per_layer < 2 {
            return invalid("min_cells_per_layer", "at least 2 cells are needed".into());
        }
        if !(self.rel_tol > 0.0 && self.rel_tol < 1.0) {
            return invalid("rel_tol", format!("{} outside (0, 1)", self.rel_tol));
        }
        if self.max_iter == 0 {
            return invalid("max_iter", "must be positive".into());
        }
        if self.mc_samples < MIN_MC_SAMPLES {
            return invalid("mc_samples", format!("at least {MIN_MC_SAMPLES} samples"));
        }
        if let Some(m) = self.fractions {
            if m.iter().any(|&x| !(x >= 0.0)) || (m.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return invalid("m", format!("{m:?} must be non-negative and sum to 1"));
            }
        }
        Ok(())
    }

    pub fn lattice(&self, n: u32) -> Result<LatticeParams, HarnessError> {
        Ok(LatticeParams::from_law(n, &self.law, self.control, self.mode)?)
    }

    /// The fractions used for the effective tensor.
    pub fn fractions(&self) -> [f64; 3] {
        self.fractions.unwrap_or_else(|| self.law.limit_fractions(self.mode))
    }

    /// Effective tensor of the limit problem that a sweep is compared with.
    pub fn reference_tensor(&self) -> Result<EffectiveTensor, HarnessError> {
        let b = match self.b_scaling {
            BScaling::Fixed => self.b,
            BScaling::UnitContrast => 0.0,
        };
        Ok(effective_tensor(self.a, b, self.fractions(), self.mode)?)
    }

    pub fn source_spec(&self, tensor: &EffectiveTensor) -> SourceSpec {
        match self.source {
            SourceChoice::Matched => SourceSpec::Cosine { amplitude: PI * PI * tensor.trace() },
            SourceChoice::Cosine(amplitude) => SourceSpec::Cosine { amplitude },
            SourceChoice::Constant(c) => SourceSpec::Constant(c),
        }
    }

    fn grid_config(&self) -> MeshConfig {
        MeshConfig { include_control: true, ..self.mesh.clone() }
    }
}

/// A named output file and its contents.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputFile {
    pub name: String,
    pub contents: String,
}

/// Result of a harness command.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub files: Vec<OutputFile>,
    /// Human-readable lines for the terminal.
    pub summary: Vec<String>,
    /// True iff every internal check of the command passed.
    pub passed: bool,
}

impl RunOutput {
    pub fn file(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|f| f.name == name).map(|f| f.contents.as_str())
    }

    pub fn write_to(&self, dir: &Path) -> Result<(), HarnessError> {
        let io = |source| HarnessError::Io { path: dir.to_path_buf(), source };
        std::fs::create_dir_all(dir).map_err(io)?;
        for f in &self.files {
            let path = dir.join(&f.name);
            std::fs::write(&path, &f.contents).map_err(|source| HarnessError::Io { path, source })?;
        }
        Ok(())
    }
}

fn push(files: &mut Vec<OutputFile>, name: &str, contents: String) {
    files.push(OutputFile { name: name.to_string(), contents });
}

/// Exact and Monte Carlo region measures at every sweep point.
pub fn run_measures(cfg: &ExperimentConfig) -> Result<RunOutput, HarnessError> {
    let mut measures_csv = String::from("n,eps,region,exact,mc,std_err,agree\n");
    let mut fractions_csv = String::from("n,eps,r1,r2,r3,union,f1,f2,f3,m1,m2,m3\n");
    let mut dat = String::from("# n eps union_exact union_mc union_std_err m1 m2 m3\n");
    let mut passed = true;
    let mut summary = Vec::new();
    for &n in &cfg.n {
        let lat = cfg.lattice(n)?;
        let eps = lat.epsilon();
        let m = measures(&lat);
        let mc = monte_carlo_all(&lat, cfg.mc_samples, cfg.seed);
        let mut failures = 0;
        for region in Region::all() {
            let exact = region.measure(&m);
            let est = mc.get(region);
            let agree = est.agrees(exact, 3.0);
            failures += !agree as usize;
            writeln!(measures_csv, "{n},{eps:e},{region},{exact:e},{:e},{:e},{agree}", est.estimate, est.std_error).unwrap();
        }
        let r = lat.r();
        let (f, l) = (m.finite_fractions, m.limit_fractions);
        writeln!(
            fractions_csv,
            "{n},{eps:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            r[0], r[1], r[2], m.union, f[0], f[1], f[2], l[0], l[1], l[2]
        )
        .unwrap();
        let u = mc.get(Region::Union);
        writeln!(dat, "{n} {eps:e} {:e} {:e} {:e} {:e} {:e} {:e}", m.union, u.estimate, u.std_error, l[0], l[1], l[2]).unwrap();
        summary.push(format!("n={n} eps={eps:.6} |T|={:.6e} mc_disagreements={failures}", m.union));
        passed &= failures == 0;
    }
    let mut files = Vec::new();
    push(&mut files, "measures.csv", measures_csv);
    push(&mut files, "fractions.csv", fractions_csv);
    push(&mut files, "measures.dat", dat);
    Ok(RunOutput { files, summary, passed })
}

/// Effective tensor for the configured `(a, b, m, mode)` with its isotropy
/// flag.
pub fn run_effective(cfg: &ExperimentConfig) -> Result<RunOutput, HarnessError> {
    let t = effective_tensor(cfg.a, cfg.b, cfg.fractions(), cfg.mode)?;
    let csv = format!("{}\n{}\n", EffectiveTensor::CSV_HEADER, t.csv_row());
    let iso = format!("isotropic\n{}\n", t.is_isotropic());
    let summary = vec![t.csv_row(), format!("isotropic={}", t.is_isotropic())];
    Ok(RunOutput {
        files: vec![
            OutputFile { name: "effective.csv".into(), contents: csv },
            OutputFile { name: "isotropy.csv".into(), contents: iso },
        ],
        summary,
        passed: true,
    })
}

/// Fine-scale solution at one sweep point.
pub struct PointSolution {
    pub lattice: LatticeParams,
    pub grid: GridSpec,
    pub values: Vec<f64>,
    pub stats: SolveStats,
    pub contrast: f64,
    pub b: f64,
    pub source: SourceSpec,
    pub conductivity: crate::pde::ConductivityField,
}

impl PointSolution {
    pub fn field(&self) -> ScalarField<'_> {
        ScalarField::new(&self.grid, self.values.clone(), true)
    }
}

/// Builds the lattice, grid and conductivity for sweep point `n` and solves
/// the fine-scale problem.
pub fn solve_point(cfg: &ExperimentConfig, n: u32) -> Result<PointSolution, HarnessError> {
    let lattice = cfg.lattice(n)?;
    let grid = build_grid(&lattice, &cfg.grid_config())?;
    let b = match cfg.b_scaling {
        BScaling::Fixed => cfg.b,
        BScaling::UnitContrast => cfg.a * measures(&lattice).union,
    };
    let conductivity = conductivity_field(&lattice, cfg.a, b, &grid)?;
    let source = cfg.source_spec(&cfg.reference_tensor()?);
    let system = assemble(&grid, &conductivity, &source);
    let (u, stats) = solve_cg(&grid, &system, cfg.rel_tol, cfg.max_iter)?;
    let values = u.into_values();
    let contrast = conductivity.contrast();
    Ok(PointSolution { lattice, grid, values, stats, contrast, b, source, conductivity })
}

/// The smooth test function used for the weak-form diagnostics.
pub fn diagnostic_test_function() -> SmoothTestFunction {
    SmoothTestFunction::separable_cosine(1.0).with_cutoff(Cutoff::DEFAULT).named("cos_bump")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRecord {
    pub n: u32,
    pub eps: f64,
    pub dofs: usize,
    pub contrast: f64,
    pub iters: usize,
    pub final_residual: f64,
    /// Relative L^2 error against the homogenized reference.
    pub l2_err: f64,
    /// Relative H^1-seminorm error against the homogenized reference.
    pub h1_err: f64,
    pub diagnostics: EnergyDiagnostics,
    /// `int sigma (d u / d x_i)^2` for each axis.
    pub energies: [f64; 3],
    pub finite_fractions: [f64; 3],
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepFailure {
    pub n: u32,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub tensor: EffectiveTensor,
    pub records: Vec<ConvergenceRecord>,
    /// Set when a sweep point failed; `records` then holds the points before it.
    pub failure: Option<SweepFailure>,
}

impl SweepOutcome {
    pub fn l2_errors(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.l2_err).collect()
    }
}

fn sweep_point(cfg: &ExperimentConfig, tensor: &EffectiveTensor, n: u32) -> Result<ConvergenceRecord, HarnessError> {
    let start = Instant::now();
    let sol = solve_point(cfg, n)?;
    let u = sol.field();
    let grid = &sol.grid;
    let (l2_abs, l2_ref, h1_abs, h1_ref) = match analytic_solution(tensor, &sol.source) {
        Ok(exact) => {
            let zero = ScalarField::zeros(grid);
            (
                l2_error(&u, Reference::Analytic(&exact))?,
                l2_error(&zero, Reference::Analytic(&exact))?,
                h1_error(&u, &exact),
                h1_error(&zero, &exact),
            )
        }
        Err(HomogenizedError::NonSeparableSource) => {
            let (v, _) = solve_homogenized(tensor, &sol.source, grid, cfg.rel_tol, cfg.max_iter)?;
            let diff: Vec<f64> = u.values().iter().zip(v.values()).map(|(a, b)| a - b).collect();
            let diff = ScalarField::new(grid, diff, true);
            (l2_error(&u, Reference::Field(&v))?, l2_norm(&v), h1_seminorm(&diff), h1_seminorm(&v))
        }
        Err(e) => return Err(e.into()),
    };
    let relative = |e: f64, r: f64| if r == 0.0 { e } else { e / r };
    let phi = diagnostic_test_function();
    let diagnostics = energy_diagnostics(&u, &phi, &sol.lattice, cfg.a, sol.b, &sol.source)?;
    let energies = directional_energies(&u, &sol.conductivity);
    Ok(ConvergenceRecord {
        n,
        eps: sol.lattice.epsilon(),
        dofs: sol.stats.dofs,
        contrast: sol.contrast,
        iters: sol.stats.iterations,
        final_residual: sol.stats.final_residual,
        l2_err: relative(l2_abs, l2_ref),
        h1_err: relative(h1_abs, h1_ref),
        diagnostics,
        energies,
        finite_fractions: measures(&sol.lattice).finite_fractions,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Solves the fine-scale problem at every sweep point and compares it with
/// the homogenized reference. Stops at the first failing point.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome, HarnessError> {
    let tensor = cfg.reference_tensor()?;
    let mut records = Vec::new();
    let mut failure = None;
    for &n in &cfg.n {
        match sweep_point(cfg, &tensor, n) {
            Ok(rec) => records.push(rec),
            Err(e @ (HarnessError::Pde(_) | HarnessError::Homogenized(_))) => {
                failure = Some(SweepFailure { n, message: e.to_string() });
                break;
            }
            Err(e) => return Err(e),
        }
    }
    records.sort_by_key(|r| r.n);
    Ok(SweepOutcome { tensor, records, failure })
}

pub const SWEEP_HEADER: &str = "n,eps,dofs,contrast,iters,l2_err,h1_err,grad_v_norm,intersection_diag,seconds";
pub const DIAGNOSTICS_HEADER: &str = "n,eps,final_residual,outer,control,layer_steps,layer,load,load_phi,pairing_defect,\
grad_v_norm,intersection,intersection_scale,weak_form_residual,energy1,energy2,energy3,f1,f2,f3";

/// CSV and plot files of a sweep.
pub fn sweep_output(cfg: &ExperimentConfig, outcome: &SweepOutcome) -> RunOutput {
    let mut sweep = format!("{SWEEP_HEADER}\n");
    let mut diag = format!("{DIAGNOSTICS_HEADER}\n");
    let mut dat = String::from("# n eps l2_err h1_err grad_v_norm intersection_diag pairing_defect\n");
    let mut summary = Vec::new();
    for r in &outcome.records {
        let d = &r.diagnostics;
        let seconds = if cfg.record_wall_time { r.seconds } else { 0.0 };
        writeln!(
            sweep,
            "{},{:e},{},{:e},{},{:e},{:e},{:e},{:e},{:e}",
            r.n, r.eps, r.dofs, r.contrast, r.iters, r.l2_err, r.h1_err, d.grad_v_norm, d.intersection, seconds
        )
        .unwrap();
        write!(diag, "{},{:e},{:e}", r.n, r.eps, r.final_residual).unwrap();
        for v in [
            d.outer,
            d.control,
            d.layer_steps,
            d.layer,
            d.load,
            d.load_phi,
            d.pairing_defect,
            d.grad_v_norm,
            d.intersection,
            d.intersection_scale,
            d.weak_form_residual(),
        ]
        .iter()
        .chain(&r.energies)
        .chain(&r.finite_fractions)
        {
            write!(diag, ",{v:e}").unwrap();
        }
        diag.push('\n');
        writeln!(
            dat,
            "{} {:e} {:e} {:e} {:e} {:e} {:e}",
            r.n, r.eps, r.l2_err, r.h1_err, d.grad_v_norm, d.intersection, d.pairing_defect
        )
        .unwrap();
        summary.push(format!(
            "n={} dofs={} iters={} l2_err={:.6e} h1_err={:.6e} time={:.1}s",
            r.n, r.dofs, r.iters, r.l2_err, r.h1_err, r.seconds
        ));
    }
    if let Some(f) = &outcome.failure {
        summary.push(format!("sweep aborted at n={}: {}", f.n, f.message));
        writeln!(sweep, "# aborted at n={}: {}", f.n, f.message).unwrap();
    }
    let tensor = format!("{}\n{}\n", EffectiveTensor::CSV_HEADER, outcome.tensor.csv_row());
    RunOutput {
        files: vec![
            OutputFile { name: "sweep.csv".into(), contents: sweep },
            OutputFile { name: "diagnostics.csv".into(), contents: diag },
            OutputFile { name: "tensor.csv".into(), contents: tensor },
            OutputFile { name: "sweep.dat".into(), contents: dat },
        ],
        summary,
        passed: outcome.failure.is_none(),
    }
}

/// Fine-scale solve at a single sweep point with nodal dump.
pub fn run_solve(cfg: &ExperimentConfig, n: u32) -> Result<RunOutput, HarnessError> {
    let sol = solve_point(cfg, n)?;
    let u = sol.field();
    Ok(RunOutput {
        files: vec![
            OutputFile { name: "solution.csv".into(), contents: solution_csv(&u) },
            OutputFile { name: "stats.csv".into(), contents: stats_csv(&sol.stats, sol.contrast) },
            OutputFile { name: "grid.csv".into(), contents: sol.grid.to_csv() },
        ],
        summary: vec![format!(
            "n={n} dofs={} iters={} final_residual={:e} contrast={:e}",
            sol.stats.dofs, sol.stats.iterations, sol.stats.final_residual, sol.contrast
        )],
        passed: true,
    })
}

/// Smooth fields used for the slice-average checks.
pub fn field_battery() -> Vec<SmoothTestFunction> {
    let cos = Factor::Cos(1);
    vec![
        SmoothTestFunction::constant(1.0).named("one"),
        SmoothTestFunction::coordinate(0),
        SmoothTestFunction::coordinate(1),
        SmoothTestFunction::coordinate(2),
        SmoothTestFunction::coordinate_squared(0),
        SmoothTestFunction::separable_cosine(1.0).named("cos_cos_cos"),
        SmoothTestFunction::new("sin2_cos_cos", vec![Term { coef: 1.0, factors: [Factor::Sin2(1), cos, cos] }], None),
        SmoothTestFunction::new(
            "mixed",
            vec![
                Term { coef: 1.0, factors: [Factor::Cos(3), Factor::Poly([0.2, 1.0, -0.5, 0.7]), Factor::Sin2(2)] },
                Term { coef: 0.5, factors: [Factor::X, Factor::X, Factor::X] },
            ],
            None,
        ),
        SmoothTestFunction::coordinate(1).with_cutoff(Cutoff::DEFAULT).named("x2_bump"),
    ]
}

/// Compactly supported test functions for the capacitary and step checks.
pub fn test_function_battery() -> Vec<SmoothTestFunction> {
    vec![
        SmoothTestFunction::constant(1.0).with_cutoff(Cutoff::DEFAULT).named("one_bump"),
        SmoothTestFunction::coordinate(1).with_cutoff(Cutoff::DEFAULT).named("x2_bump"),
        diagnostic_test_function(),
        SmoothTestFunction::new(
            "sin2_poly_bump",
            vec![Term { coef: 1.0, factors: [Factor::Sin2(1), Factor::Poly([1.0, 0.0, 2.0, 0.0]), Factor::Cos(2)] }],
            Some(Cutoff::DEFAULT),
        ),
    ]
}

/// Interpolates a battery member; members vanishing on the boundary get
/// Dirichlet interpolants.
fn battery_field<'g>(grid: &'g GridSpec, f: &SmoothTestFunction) -> ScalarField<'g> {
    use crate::functions::Analytic;
    if f.vanishes_on_boundary() {
        ScalarField::interpolate_dirichlet(grid, |x| f.value(x))
    } else {
        ScalarField::interpolate(grid, |x| f.value(x))
    }
}

/// Largest allowed relative spread of the union trace ratio of the cosine
/// field across a sweep.
pub const TRACE_RATIO_SPREAD: f64 = 0.5;

/// Runs the inequality suite over the battery at every sweep point, plus the
/// sweep-level checks: spread of the union trace ratio and decay of the
/// intersection term.
pub fn run_verify(cfg: &ExperimentConfig) -> Result<RunOutput, HarnessError> {
    let mut reports: Vec<InequalityReport> = Vec::new();
    let mut cosine_ratios = Vec::new();
    let mut intersections: Vec<(u32, f64)> = Vec::new();
    let fields = field_battery();
    let tests = test_function_battery();
    for &n in &cfg.n {
        let lat = cfg.lattice(n)?;
        let grid = build_grid(&lat, &cfg.grid_config())?;
        for f in &fields {
            let u = battery_field(&grid, f);
            let prefix = format!("n{n}/{}/", f.name());
            for &axis in lat.active_axes() {
                reports.extend(verify_slice_properties(&u, &lat, axis)?.into_iter().map(|r| r.with_prefix(&prefix)));
            }
            if u.dirichlet() {
                reports.extend(verify_trace_bounds(&u, &lat)?.into_iter().map(|r| r.with_prefix(&prefix)));
                if f.name() == "cos_cos_cos" {
                    cosine_ratios.push(trace_ratios(&u, &lat)?[0].1);
                }
            }
        }
        for phi in &tests {
            let prefix = format!("n{n}/{}/", phi.name());
            reports.extend(verify_capacitary_bounds(&grid, &lat, phi)?.into_iter().map(|r| r.with_prefix(&prefix)));
        }
        let sol = solve_point(cfg, n)?;
        let u = sol.field();
        let d = energy_diagnostics(&u, &diagnostic_test_function(), &sol.lattice, cfg.a, sol.b, &sol.source)?;
        intersections.push((n, d.intersection));
    }
    if cosine_ratios.len() > 1 {
        let max = cosine_ratios.iter().cloned().fold(f64::MIN, f64::max);
        let min = cosine_ratios.iter().cloned().fold(f64::MAX, f64::min);
        reports.push(InequalityReport::upper("sweep/cos_cos_cos/trace_union_spread", (max - min) / max, TRACE_RATIO_SPREAD, 1.0));
    }
    for w in intersections.windows(2) {
        let ((n0, i0), (n1, i1)) = (w[0], w[1]);
        reports.push(InequalityReport::upper(format!("sweep/intersection_decay[n{n0}->n{n1}]"), i1, i0, 1.0));
    }
    let failed: Vec<&InequalityReport> = reports.iter().filter(|r| !r.pass()).collect();
    let mut summary = vec![format!("{} checks, {} failed", reports.len(), failed.len())];
    summary.extend(failed.iter().map(|r| format!("FAIL {}", r.csv_row())));
    let mut dat = String::from("# index slack pass\n");
    for (i, r) in reports.iter().enumerate() {
        writeln!(dat, "{i} {:e} {}", r.slack(), r.pass() as u8).unwrap();
    }
    Ok(RunOutput {
        passed: failed.is_empty(),
        files: vec![
            OutputFile { name: "inequalities.csv".into(), contents: reports_csv(&reports) },
            OutputFile { name: "inequalities.dat".into(), contents: dat },
        ],
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_config() {
        let text = "\
# sweep
mode = gridwork
n = 1, 2,4
c = 1, 2, 0   # third family absent
p = 3/2
a = 2
b = 1/2
b_scaling = unit_contrast
source = cosine:3.5
h_ambient = 0.05
min_cells_per_layer = 3
control = fraction:0.3
seed = 7
mc_samples = 20000
record_wall_time = true
out = results
";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.mode, Mode::Gridwork);
        assert_eq!(cfg.n, vec![1, 2, 4]);
        assert_eq!(cfg.law, ThicknessLaw { c: [1.0, 2.0, 0.0], p: 1.5 });
        assert_eq!((cfg.a, cfg.b), (2.0, 0.5));
        assert_eq!(cfg.b_scaling, BScaling::UnitContrast);
        assert_eq!(cfg.source, SourceChoice::Cosine(3.5));
        assert_eq!(cfg.mesh.h_ambient, 0.05);
        assert_eq!(cfg.mesh.min_cells_per_layer, 3);
        assert_eq!(cfg.control, ControlRule::FractionOfPeriod(0.3));
        assert_eq!(cfg.seed, 7);
        assert!(cfg.record_wall_time);
        assert_eq!(cfg.out, Some(PathBuf::from("results")));
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(matches!(ExperimentConfig::parse("n ="), Err(HarnessError::Invalid { key: "n", .. })));
        assert!(matches!(ExperimentConfig::parse("n = 2, 1"), Err(HarnessError::Invalid { key: "n", .. })));
        assert!(matches!(ExperimentConfig::parse("p = 1"), Err(HarnessError::Invalid { key: "p", .. })));
        assert!(matches!(ExperimentConfig::parse("colour = red"), Err(HarnessError::UnknownKey { line: 1, .. })));
        assert!(matches!(ExperimentConfig::parse("\nmode"), Err(HarnessError::Syntax { line: 2, .. })));
        assert!(matches!(ExperimentConfig::parse("a = x"), Err(HarnessError::Syntax { .. })));
        assert!(matches!(ExperimentConfig::parse("mode = gridwork"), Err(HarnessError::Invalid { key: "c", .. })));
        assert!(ExperimentConfig::parse("m = 0.5, 0.5, 0.5").is_err());
    }

    #[test]
    fn number_parsing() {
        assert_eq!(parse_number("3/2").unwrap(), 1.5);
        assert_eq!(parse_number(" -0.25 ").unwrap(), -0.25);
        assert!(parse_number("1/0").is_err());
        assert!(parse_number("abc").is_err());
    }

    #[test]
    fn effective_outputs() {
        let cfg = ExperimentConfig::parse("mode = gridwork\nc = 1,1,0\na = 1\nb = 2").unwrap();
        let out = run_effective(&cfg).unwrap();
        let csv = out.file("effective.csv").unwrap();
        assert!(csv.lines().nth(1).unwrap().ends_with(",1.5,1.5,2.0"), "{csv}");
        assert_eq!(out.file("isotropy.csv").unwrap(), "isotropic\nfalse\n");
        let cfg = ExperimentConfig::parse("m = 1/3, 1/3, 1/3").unwrap();
        assert_eq!(run_effective(&cfg).unwrap().file("isotropy.csv").unwrap(), "isotropic\ntrue\n");
        let cfg = ExperimentConfig::parse("m = 0.5, 0.3, 0.2").unwrap();
        assert_eq!(run_effective(&cfg).unwrap().file("isotropy.csv").unwrap(), "isotropic\nfalse\n");
    }

    #[test]
    fn measures_outputs() {
        let cfg = ExperimentConfig::parse("n = 1, 2\nmc_samples = 200000").unwrap();
        let out = run_measures(&cfg).unwrap();
        assert!(out.passed, "{:?}", out.summary);
        let fractions = out.file("fractions.csv").unwrap();
        let row: Vec<f64> = fractions.lines().nth(1).unwrap().split(',').skip(9).map(|v| v.parse().unwrap()).collect();
        for m in row {
            assert!((m - 1.0 / 3.0).abs() < 1e-15);
        }
        let cfg = ExperimentConfig::parse("n = 1\nmode = gridwork\nc = 1,1,0\nmc_samples = 200000").unwrap();
        let out = run_measures(&cfg).unwrap();
        let row = out.file("fractions.csv").unwrap().lines().nth(1).unwrap().to_string();
        assert_eq!(row.rsplit(',').next().unwrap().parse::<f64>().unwrap(), 0.0);
        assert_eq!(out.file("measures.csv").unwrap().lines().count(), 9);
    }
}
