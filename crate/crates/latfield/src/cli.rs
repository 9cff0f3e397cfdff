//! Config-driven command-line driver: one command per process, JSON config in,
//! manifest.json + summary.json + CSV tables out.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::analysis::{power_fit, ShellFit};
use crate::correctors::{assemble_predictor, check_branch_cut, screw_force_identity, DefectKind, PredictorStack, ScrewSpec};
use crate::error::{Error, Result};
use crate::fourier::{inverse, MultiplierSeries};
use crate::greens::{green_decay_report, Calibration, LatticeGreens, RICHARDSON_TOLERANCE};
use crate::kernels::{expansion_error_table, KernelSet};
use crate::lattice::{LatticeField, Site};
use crate::multipole::{compute_moments, default_basis, fit_coefficients, MomentTensor, MultipoleCoeffs};
use crate::potentials::{
    build_model, cauchy_born, make_defect_model, stability_constant, validate_symmetry, DefectModel, DefectSpec, Params,
    SitePotential,
};
use crate::solver::{decay_report, linearised_forces, CellProblem, GreenTable, Scheme, SolverOptions, StudyContext, table_radius};

#[derive(Debug, Parser)]
#[command(name = "latfield", version, about = "Lattice Green's functions, multipoles and defect cell problems")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides `output` in the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (overrides `threads` in the config).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Validate,
    Greens,
    Kernels,
    Moments,
    Predictor,
    Solve,
    Study,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Greens => "greens",
            Command::Kernels => "kernels",
            Command::Moments => "moments",
            Command::Predictor => "predictor",
            Command::Solve => "solve",
            Command::Study => "study",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Optional; must agree with the command line when present.
    #[serde(default)]
    pub command: Option<Command>,
    pub model: ModelConfig,
    #[serde(default)]
    pub defect: DefectConfig,
    #[serde(default)]
    pub greens: GreensConfig,
    #[serde(default)]
    pub kernels: KernelsConfig,
    #[serde(default)]
    pub moments: MomentsConfig,
    #[serde(default)]
    pub predictor: PredictorConfig,
    #[serde(default)]
    pub solve: SolveConfig,
    #[serde(default)]
    pub study: StudyConfig,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub threads: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    #[serde(default)]
    pub params: Params,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefectKindName {
    None,
    Vacancy,
    Screw,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefectConfig {
    #[serde(default = "defect_kind")]
    pub kind: DefectKindName,
    /// Removed sites for `vacancy` (default: the origin).
    #[serde(default)]
    pub removed: Option<Vec<Vec<i64>>>,
    /// Radius enclosing the defect core (default: smallest covering the removed sites, at least 1).
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default = "one_f")]
    pub burgers: f64,
    #[serde(default = "screw_core")]
    pub core: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GreensConfig {
    #[serde(default = "supercell")]
    pub supercell: usize,
    #[serde(default = "greens_radius")]
    pub radius: f64,
    /// Shell range of the decay fits (default [radius/8, radius]).
    #[serde(default)]
    pub decay_range: Option<[f64; 2]>,
    /// Directory holding cached window tables.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelsConfig {
    #[serde(default = "one")]
    pub p_max: usize,
    #[serde(default = "one")]
    pub j_max: usize,
    /// Shell range of the expansion-error fits (default [radius/8, radius]).
    #[serde(default)]
    pub range: Option<[f64; 2]>,
    /// |k| range on the rays of the inverse-multiplier series check.
    #[serde(default = "series_range")]
    pub series_range: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentsConfig {
    /// Radius of the clamped solve whose residual forces are integrated.
    #[serde(default = "moments_solve_radius")]
    pub solve_radius: f64,
    /// Radius of the moment sums.
    #[serde(default = "moments_radius")]
    pub radius: f64,
    /// Number of moments ℐ₀..ℐ_{orders−1}.
    #[serde(default = "two")]
    pub orders: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    #[serde(default)]
    pub p: usize,
    /// Inner radius of the far-field corrector solves.
    #[serde(default = "one_f")]
    pub r0: f64,
    #[serde(default = "samples")]
    pub samples: usize,
    #[serde(default = "sample_radius")]
    pub sample_radius: f64,
    /// Net-force coefficient and radius of the screw force identity.
    #[serde(default = "one_f")]
    pub identity_coefficient: f64,
    #[serde(default = "identity_radius")]
    pub identity_radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeName {
    Clamped,
    Augmented,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveConfig {
    #[serde(default = "scheme")]
    pub scheme: SchemeName,
    /// Multipole orders of the augmented scheme.
    #[serde(default = "one")]
    pub p: usize,
    #[serde(default = "solve_radius")]
    pub radius: f64,
    #[serde(default)]
    pub r_out: Option<f64>,
    #[serde(default = "gradient_tolerance")]
    pub gradient_tolerance: f64,
    #[serde(default = "max_newton")]
    pub max_newton: usize,
    /// Shell range of the |Dv| decay fit (default [4, radius]).
    #[serde(default)]
    pub decay_range: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    #[serde(default = "scheme")]
    pub scheme: SchemeName,
    #[serde(default = "one")]
    pub p: usize,
    #[serde(default = "radii")]
    pub radii: Vec<f64>,
    #[serde(default = "reference_radius")]
    pub reference_radius: f64,
    /// Power of log R divided out before the slope fit.
    #[serde(default)]
    pub log_power: f64,
}

fn one() -> usize {
    1
}
fn two() -> usize {
    2
}
fn one_f() -> f64 {
    1.0
}
fn defect_kind() -> DefectKindName {
    DefectKindName::None
}
fn screw_core() -> [f64; 2] {
    ScrewSpec::default().core
}
fn supercell() -> usize {
    1024
}
fn greens_radius() -> f64 {
    64.0
}
fn series_range() -> [f64; 2] {
    [0.02, 0.2]
}
fn moments_solve_radius() -> f64 {
    48.0
}
fn moments_radius() -> f64 {
    24.0
}
fn samples() -> usize {
    64
}
fn sample_radius() -> f64 {
    16.0
}
fn identity_radius() -> f64 {
    64.0
}
fn scheme() -> SchemeName {
    SchemeName::Clamped
}
fn solve_radius() -> f64 {
    32.0
}
fn gradient_tolerance() -> f64 {
    1e-9
}
fn max_newton() -> usize {
    60
}
fn radii() -> Vec<f64> {
    vec![8.0, 16.0, 24.0, 32.0, 48.0, 64.0]
}
fn reference_radius() -> f64 {
    192.0
}

macro_rules! impl_default_from_json {
    ($($t:ty),*) => {$(
        impl Default for $t {
            fn default() -> Self {
                serde_json::from_value(json!({})).expect("all fields have defaults")
            }
        }
    )*};
}
impl_default_from_json!(DefectConfig, GreensConfig, KernelsConfig, MomentsConfig, PredictorConfig, SolveConfig, StudyConfig);

fn invalid(path: &str, msg: impl std::fmt::Display) -> Error {
    Error::ConfigInvalid(format!("{path}: {msg}"))
}

fn check_range(path: &str, x: f64, lo: f64, hi: f64) -> Result<()> {
    if !(x.is_finite() && x >= lo && x <= hi) {
        return Err(invalid(path, format!("{x} is outside [{lo}, {hi}]")));
    }
    Ok(())
}

fn check_interval(path: &str, r: [f64; 2], hi: f64) -> Result<()> {
    if !(r[0] > 0.0 && r[0] < r[1] && r[1] <= hi) {
        return Err(invalid(path, format!("need 0 < {} < {} <= {hi}", r[0], r[1])));
    }
    Ok(())
}

impl RunConfig {
    /// Parses JSON; type errors and unknown keys are reported with their path.
    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::ConfigInvalid(format!("{path}: {}", e.into_inner()))
        })
    }

    /// Range checks for every knob, independent of the command.
    pub fn validate(&self) -> Result<()> {
        if !crate::potentials::MODEL_NAMES.contains(&self.model.name.as_str()) {
            return Err(invalid("model.name", format!("unknown model '{}'", self.model.name)));
        }
        for (k, v) in &self.model.params {
            check_range(&format!("model.params.{k}"), *v, -1e6, 1e6)?;
        }
        let d = &self.defect;
        if let Some(r) = d.radius {
            check_range("defect.radius", r, 0.5, 64.0)?;
        }
        if let Some(rem) = &d.removed {
            if d.kind != DefectKindName::Vacancy {
                return Err(invalid("defect.removed", "only allowed for kind 'vacancy'"));
            }
            if rem.is_empty() {
                return Err(invalid("defect.removed", "must list at least one site"));
            }
        }
        check_range("defect.burgers", d.burgers, -100.0, 100.0)?;
        if d.burgers == 0.0 {
            return Err(invalid("defect.burgers", "must be nonzero"));
        }
        let g = &self.greens;
        check_range("greens.radius", g.radius, 4.0, 512.0)?;
        if !g.supercell.is_power_of_two() || !(16..=8192).contains(&g.supercell) {
            return Err(invalid("greens.supercell", format!("{} must be a power of two in [16, 8192]", g.supercell)));
        }
        if (g.supercell as f64) < 8.0 * g.radius {
            return Err(invalid("greens.supercell", format!("{} must be at least 8 x greens.radius", g.supercell)));
        }
        if let Some(r) = g.decay_range {
            check_interval("greens.decay_range", r, g.radius)?;
        }
        let k = &self.kernels;
        if k.p_max > 2 {
            return Err(invalid("kernels.p_max", format!("{} exceeds 2", k.p_max)));
        }
        if k.j_max > 3 {
            return Err(invalid("kernels.j_max", format!("{} exceeds 3", k.j_max)));
        }
        if let Some(r) = k.range {
            check_interval("kernels.range", r, g.radius)?;
        }
        check_interval("kernels.series_range", k.series_range, 1.0)?;
        let m = &self.moments;
        check_range("moments.solve_radius", m.solve_radius, 4.0, 512.0)?;
        check_range("moments.radius", m.radius, 2.0, m.solve_radius)?;
        if !(1..=4).contains(&m.orders) {
            return Err(invalid("moments.orders", format!("{} is outside [1, 4]", m.orders)));
        }
        let p = &self.predictor;
        if p.p > 2 {
            return Err(invalid("predictor.p", format!("{} exceeds 2", p.p)));
        }
        check_range("predictor.r0", p.r0, 1e-3, 1e3)?;
        if !(1..=1_000_000).contains(&p.samples) {
            return Err(invalid("predictor.samples", format!("{} is outside [1, 1000000]", p.samples)));
        }
        check_range("predictor.sample_radius", p.sample_radius, 1e-3, 1e6)?;
        check_range("predictor.identity_coefficient", p.identity_coefficient, -1e3, 1e3)?;
        check_range("predictor.identity_radius", p.identity_radius, 2.0, 512.0)?;
        let s = &self.solve;
        check_scheme("solve", s.scheme, s.p)?;
        check_range("solve.radius", s.radius, 2.0, 1024.0)?;
        if let Some(r) = s.r_out {
            check_range("solve.r_out", r, s.radius, 4096.0)?;
        }
        check_range("solve.gradient_tolerance", s.gradient_tolerance, 1e-14, 1e-2)?;
        if !(1..=1000).contains(&s.max_newton) {
            return Err(invalid("solve.max_newton", format!("{} is outside [1, 1000]", s.max_newton)));
        }
        if let Some(r) = s.decay_range {
            check_interval("solve.decay_range", r, s.r_out.unwrap_or(4096.0))?;
        }
        let st = &self.study;
        check_scheme("study", st.scheme, st.p)?;
        if st.radii.is_empty() || st.radii.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("study.radii", "must be nonempty and strictly increasing"));
        }
        for (i, r) in st.radii.iter().enumerate() {
            check_range(&format!("study.radii[{i}]"), *r, 2.0, 1024.0)?;
        }
        let rmax = *st.radii.last().unwrap();
        check_range("study.reference_radius", st.reference_radius, 3.0 * rmax, 2048.0)?;
        check_range("study.log_power", st.log_power, 0.0, 4.0)?;
        if !(1..=256).contains(&self.threads) {
            return Err(invalid("threads", format!("{} is outside [1, 256]", self.threads)));
        }
        Ok(())
    }
}

fn check_scheme(path: &str, scheme: SchemeName, p: usize) -> Result<()> {
    if scheme == SchemeName::Augmented && !(1..=3).contains(&p) {
        return Err(invalid(&format!("{path}.p"), format!("{p} is outside [1, 3]")));
    }
    Ok(())
}

fn to_scheme(name: SchemeName, p: usize) -> Scheme {
    match name {
        SchemeName::Clamped => Scheme::Clamped,
        SchemeName::Augmented => Scheme::Augmented { p },
    }
}

/// Process exit code for an error: 3 for numerical failures, 2 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_numerical() {
        3
    } else {
        2
    }
}

/// A CSV table with its tolerance metadata.
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub metadata: Value,
}

impl Table {
    fn new(name: &str, header: &[&str], metadata: Value) -> Self {
        Table { name: name.into(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new(), metadata }
    }

    fn render(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }
}

/// Shortest round-trip decimal form.
fn num(x: f64) -> String {
    format!("{x}")
}

/// What a command produced, before it is written to disk.
pub struct CommandOutput {
    pub summary: Value,
    pub tables: Vec<Table>,
    /// Set when the command ran but its checks failed (exit 2).
    pub validation_failure: Option<String>,
}

/// Result of a completed run.
#[derive(Debug)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub exit_code: i32,
    pub message: Option<String>,
}

struct Timer {
    phases: BTreeMap<String, f64>,
}

impl Timer {
    fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let r = f();
        self.phases.insert(phase.to_string(), t.elapsed().as_secs_f64());
        r
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Parses the command line, runs it, and writes artifacts.
pub fn run(cli: &Cli) -> Result<RunOutcome> {
    let text = std::fs::read_to_string(&cli.config)
        .map_err(|e| Error::ConfigInvalid(format!("cannot read {}: {e}", cli.config.display())))?;
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(c) = cfg.command {
        if c != cli.command {
            return Err(invalid("command", format!("config says '{}' but '{}' was requested", c.name(), cli.command.name())));
        }
    }
    cfg.command = Some(cli.command);
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    let out_dir = cli.out.clone().or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("latfield-out"));
    execute(&cfg, cli.command, &out_dir, &text)
}

/// Runs `command` on an already validated config and writes its artifacts.
pub fn execute(cfg: &RunConfig, command: Command, out_dir: &Path, config_text: &str) -> Result<RunOutcome> {
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let mut timer = Timer { phases: BTreeMap::new() };
    let t0 = Instant::now();
    let result = match command {
        Command::Validate => cmd_validate(cfg, &mut timer),
        Command::Greens => cmd_greens(cfg, &mut timer),
        Command::Kernels => cmd_kernels(cfg, &mut timer),
        Command::Moments => cmd_moments(cfg, &mut timer),
        Command::Predictor => cmd_predictor(cfg, &mut timer),
        Command::Solve => cmd_solve(cfg, &mut timer),
        Command::Study => cmd_study(cfg, &mut timer),
    };
    let output = result?;
    timer.phases.insert("total".into(), t0.elapsed().as_secs_f64());
    std::fs::create_dir_all(out_dir)?;
    let mut tables = serde_json::Map::new();
    for t in &output.tables {
        let file = format!("{}.csv", t.name);
        let body = t.render();
        std::fs::write(out_dir.join(&file), &body)?;
        tables.insert(
            t.name.clone(),
            json!({
                "file": file,
                "header": t.header,
                "rows": t.rows.len(),
                "sha256": hex(&Sha256::digest(body.as_bytes())),
                "metadata": t.metadata,
            }),
        );
    }
    let summary = serde_json::to_string_pretty(&output.summary)?;
    std::fs::write(out_dir.join("summary.json"), summary + "\n")?;
    let manifest = json!({
        "tool": "latfield",
        "version": env!("CARGO_PKG_VERSION"),
        "manifest_format": 1,
        "command": command.name(),
        "config": cfg,
        "config_sha256": hex(&Sha256::digest(config_text.as_bytes())),
        "threads_requested": cfg.threads,
        "threads_used": 1,
        "seed": cfg.seed,
        "started_unix_s": started,
        "timings_s": timer.phases,
        "tables": tables,
        "summary": "summary.json",
        "status": if output.validation_failure.is_some() { "validation_failed" } else { "ok" },
    });
    std::fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    let code = if output.validation_failure.is_some() { 2 } else { 0 };
    Ok(RunOutcome { out_dir: out_dir.to_path_buf(), exit_code: code, message: output.validation_failure })
}

fn host_model(cfg: &RunConfig) -> Result<Arc<dyn SitePotential>> {
    build_model(&cfg.model.name, &cfg.model.params)
}

fn parse_site(path: &str, v: &[i64], dim: usize) -> Result<Site> {
    if v.len() != dim {
        return Err(invalid(path, format!("expected {dim} coordinates, got {}", v.len())));
    }
    let mut s = [0i64; 3];
    s[..dim].copy_from_slice(v);
    Ok(s)
}

/// Host, defect model and predictor kind described by the config.
struct Setup {
    host: Arc<dyn SitePotential>,
    model: Arc<DefectModel>,
    kind: DefectKind,
}

fn setup(cfg: &RunConfig) -> Result<Setup> {
    let host = host_model(cfg)?;
    let lat = host.lattice().clone();
    let d = &cfg.defect;
    let (model, kind) = match d.kind {
        DefectKindName::None => (DefectModel::homogeneous(host.clone()), DefectKind::Point),
        DefectKindName::Vacancy => {
            let removed = match &d.removed {
                Some(list) => list
                    .iter()
                    .enumerate()
                    .map(|(i, v)| parse_site(&format!("defect.removed[{i}]"), v, lat.dim()))
                    .collect::<Result<Vec<_>>>()?,
                None => vec![[0, 0, 0]],
            };
            let cover = removed.iter().map(|s| lat.norm(s)).fold(1.0, f64::max);
            let spec = DefectSpec { radius: d.radius.unwrap_or(cover), removed, overrides: Vec::new() };
            let model = make_defect_model(host.clone(), &spec).map_err(|e| match e {
                Error::DefectOutsideRadius(_) => invalid("defect.radius", e),
                other => other,
            })?;
            (model, DefectKind::Point)
        }
        DefectKindName::Screw => {
            if lat.dim() != 2 || lat.ncomp() != 1 {
                return Err(invalid("defect.kind", "screw dislocations need a scalar two-dimensional model"));
            }
            let spec = ScrewSpec { burgers: d.burgers, core: d.core };
            check_branch_cut(&lat, &spec).map_err(|e| invalid("defect.core", e))?;
            (DefectModel::homogeneous(host.clone()), DefectKind::Screw(spec))
        }
    };
    Ok(Setup { host, model: Arc::new(model), kind })
}

fn predictor(cfg: &RunConfig, s: &Setup) -> Result<PredictorStack> {
    let p = match s.kind {
        DefectKind::Point => 0,
        DefectKind::Screw(_) => cfg.predictor.p,
    };
    assemble_predictor(s.host.as_ref(), s.kind, p, vec![None; p + 1], cfg.predictor.r0)
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    calibration: Calibration,
    extrapolation_error: f64,
    extrapolation_error_inner: f64,
}

fn cache_key(cfg: &RunConfig) -> String {
    let id = serde_json::to_string(&cfg.model).unwrap_or_default();
    let h = hex(&Sha256::digest(id.as_bytes()));
    format!("gf-{}-L{}-R{}", &h[..16], cfg.greens.supercell, cfg.greens.radius)
}

/// Window table of 𝒢, reused from the cache directory when one is configured.
fn greens(cfg: &RunConfig, host: &dyn SitePotential, timer: &mut Timer) -> Result<(LatticeGreens, bool)> {
    let g = &cfg.greens;
    if let Some(dir) = &g.cache_dir {
        let key = cache_key(cfg);
        let csv = dir.join(format!("{key}.csv"));
        let meta = dir.join(format!("{key}.json"));
        if csv.exists() && meta.exists() {
            let table = timer.time("greens_cache_read", || {
                let mut t = LatticeGreens::read_csv(host, &csv, g.supercell, g.radius)?;
                let m: CacheMeta = serde_json::from_str(&std::fs::read_to_string(&meta)?)?;
                t.calibration = m.calibration;
                t.extrapolation_error = m.extrapolation_error;
                t.extrapolation_error_inner = m.extrapolation_error_inner;
                Ok(t)
            })?;
            return Ok((table, true));
        }
        let table = timer.time("greens", || LatticeGreens::compute(host, g.radius, g.supercell))?;
        std::fs::create_dir_all(dir)?;
        table.write_csv(&csv)?;
        let m = CacheMeta {
            calibration: table.calibration.clone(),
            extrapolation_error: table.extrapolation_error,
            extrapolation_error_inner: table.extrapolation_error_inner,
        };
        std::fs::write(&meta, serde_json::to_string_pretty(&m)?)?;
        return Ok((table, false));
    }
    let table = timer.time("greens", || LatticeGreens::compute(host, g.radius, g.supercell))?;
    Ok((table, false))
}

fn greens_metadata(g: &LatticeGreens) -> Value {
    json!({
        "supercell": g.supercell,
        "radius": g.radius(),
        "richardson_tolerance": RICHARDSON_TOLERANCE,
        "extrapolation_error": g.extrapolation_error,
        "extrapolation_error_inner": g.extrapolation_error_inner,
        "second_step_correction": g.second_step_correction,
        "calibration_residual": g.calibration.residual,
    })
}

fn fit_or_error(r: Result<ShellFit>) -> Result<Value> {
    match r {
        Ok(f) => Ok(serde_json::to_value(f)?),
        Err(e) if e.is_numerical() => Err(e),
        Err(e) => Ok(json!({ "error": e.to_string() })),
    }
}

fn cmd_validate(cfg: &RunConfig, timer: &mut Timer) -> Result<CommandOutput> {
    let s = setup(cfg)?;
    let host = s.host.as_ref();
    let lat = host.lattice();
    let sym = timer.time("symmetry", || Ok(validate_symmetry(host, 64, cfg.seed)))?;
    let stab = timer.time("stability", || Ok(stability_constant(host, 64)))?;
    let cb = cauchy_born(host);
    let lh = cb.legendre_hadamard_min(64);
    let nd = cb.n * cb.d;
    let mut elastic = Table::new("elastic", &["row", "col", "C"], json!({ "slot": "component * d + direction" }));
    for i in 0..nd {
        for j in 0..nd {
            elastic.rows.push(vec![i.to_string(), j.to_string(), num(cb.c[i * nd + j])]);
        }
    }
    let mut failure = None;
    if !sym.pass {
        failure = Some(format!("point symmetry fails (max residual {:e})", sym.max_residual));
    } else if stab.c0 <= 0.0 {
        failure = Some(format!("model is not lattice stable (c0 {})", stab.c0));
    }
    let summary = json!({
        "command": "validate",
        "model": host.name(),
        "dim": lat.dim(),
        "ncomp": lat.ncomp(),
        "stencil": lat.stencil().iter().map(|s| s[..lat.dim()].to_vec()).collect::<Vec<_>>(),
        "even": host.is_even(),
        "symmetry_pass": sym.pass,
        "symmetry_max_residual": sym.max_residual,
        "symmetry_trials": sym.trials,
        "c0": stab.c0,
        "c0_grid": stab.grid,
        "c0_argmin": stab.argmin,
        "legendre_hadamard_min": lh,
        "defect": {
            "kind": cfg.defect.kind,
            "removed": s.model.removed().map(|x| x[..lat.dim()].to_vec()).collect::<Vec<_>>(),
            "radius": s.model.radius,
        },
    });
    Ok(CommandOutput { summary, tables: vec![elastic], validation_failure: failure })
}

fn cmd_greens(cfg: &RunConfig, timer: &mut Timer) -> Result<CommandOutput> {
    let host = host_model(cfg)?;
    let (g, cached) = greens(cfg, host.as_ref(), timer)?;
    let lat = g.lattice().clone();
    let d = lat.dim();
    let n = lat.ncomp();
    let coords = ["n1", "n2", "n3"];
    let mut header: Vec<String> = coords[..d].iter().map(|s| s.to_string()).collect();
    for i in 0..n {
        for j in 0..n {
            header.push(format!("G{}{}", i + 1, j + 1));
        }
    }
    let mut table = Table {
        name: "greens".into(),
        header,
        rows: Vec::new(),
        metadata: greens_metadata(&g),
    };
    for s in g.window().sites() {
        let mut row: Vec<String> = s[..d].iter().map(|c| c.to_string()).collect();
        row.extend(g.value(s)?.iter().map(|v| num(*v)));
        table.rows.push(row);
    }
    let ms = MultiplierSeries::new(host.as_ref());
    let r_def = (g.radius() / 2.0).min(32.0);
    let defining: Vec<f64> = timer.time("defining_residual", || (0..n).map(|k| g.defining_residual(&ms, k, r_def)).collect())?;
    let [r_min, r_max] = cfg.greens.decay_range.unwrap_or([g.radius() / 8.0, g.radius()]);
    let mut decay = serde_json::Map::new();
    for j in 0..=2usize {
        if j == 0 && d != 2 {
            continue;
        }
        let rep = match green_decay_report(&g, j, r_min, r_max) {
            Ok(r) => serde_json::to_value(r)?,
            Err(e) if e.is_numerical() => return Err(e),
            Err(e) => json!({ "error": e.to_string() }),
        };
        decay.insert(format!("j{j}"), rep);
    }
    let origin = g.value(&[0, 0, 0])?.to_vec();
    let mut differences = serde_json::Map::new();
    for c in 0..d {
        let e = lat.generator(c);
        let v: Vec<f64> = g.value(&e)?.iter().zip(&origin).map(|(a, b)| a - b).collect();
        differences.insert(format!("e{}", c + 1), json!(v));
    }
    let summary = json!({
        "command": "greens",
        "model": host.name(),
        "supercell": g.supercell,
        "radius": g.radius(),
        "sites": g.window().len(),
        "from_cache": cached,
        "calibration": g.calibration,
        "extrapolation_error": g.extrapolation_error,
        "extrapolation_error_inner": g.extrapolation_error_inner,
        "symmetry_residual": g.symmetry_residual(),
        "defining_residual": { "radius": r_def, "max_by_column": defining },
        "difference_from_origin": differences,
        "decay": decay,
    });
    Ok(CommandOutput { summary, tables: vec![table], validation_failure: None })
}

/// Max over rays of ‖Ĥ⁻¹(k) − Σ_{n≤p} 𝒜₂ₙ(k)‖ at |k| = t.
pub fn inverse_series_error(ms: &MultiplierSeries, p: i32, t: f64) -> Result<f64> {
    let d = ms.dim();
    let n = ms.ncomp();
    let dirs: Vec<Vec<f64>> = if d == 2 {
        [0.3f64, 0.9, 1.7].iter().map(|a| vec![a.cos(), a.sin()]).collect()
    } else {
        vec![vec![0.6, 0.48, 0.64], vec![0.0, 0.6, 0.8], vec![0.48, -0.6, 0.64]]
    };
    let mut worst: f64 = 0.0;
    for dir in dirs {
        let k: Vec<f64> = dir.iter().map(|c| c * t).collect();
        let h = ms.multiplier(&k);
        let hinv = inverse(&h, n).ok_or_else(|| Error::SingularH2(k.clone()))?;
        let series = ms.inverse_series_sum(p, &k)?;
        let e: f64 = hinv.iter().zip(&series).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(e);
    }
    Ok(worst)
}

fn cmd_kernels(cfg: &RunConfig, timer: &mut Timer) -> Result<CommandOutput> {
    let host = host_model(cfg)?;
    let kc = &cfg.kernels;
    let (g, _) = greens(cfg, host.as_ref(), timer)?;
    let lat = g.lattice().clone();
    let ms = MultiplierSeries::new(host.as_ref());
    let kernels = timer.time("kernels", || KernelSet::build(&ms, lat.c_vol(), kc.p_max))?;
    let [r_min, r_max] = kc.range.unwrap_or([g.radius() / 8.0, g.radius()]);
    let mut fits = Table::new("expansion_fits", &["p", "j", "slope", "ci95", "r_squared"], greens_metadata(&g));
    let mut shells = Table::new("expansion_shells", &["p", "j", "r", "error"], json!({ "shell_ratio": 2f64.powf(0.25) }));
    let mut summary_fits = Vec::new();
    timer.time("expansion_tables", || {
        for p in 0..=kc.p_max {
            for j in 0..=kc.j_max {
                let t = match expansion_error_table(&g, &kernels, p, j, r_min, r_max) {
                    Ok(t) => t,
                    Err(e) if e.is_numerical() => return Err(e),
                    Err(e) => {
                        summary_fits.push(json!({ "p": p, "j": j, "error": e.to_string() }));
                        continue;
                    }
                };
                fits.rows.push(vec![p.to_string(), j.to_string(), num(t.fit.slope), num(t.fit.ci95), num(t.fit.r_squared)]);
                for (r, v) in &t.fit.shells {
                    shells.rows.push(vec![p.to_string(), j.to_string(), num(*r), num(*v)]);
                }
                summary_fits.push(serde_json::to_value(&t)?);
            }
        }
        Ok(())
    })?;
    let [t_lo, t_hi] = kc.series_range;
    let ts: Vec<f64> = (0..9).map(|i| t_hi * (t_lo / t_hi).powf(i as f64 / 8.0)).collect();
    let mut series = Table::new("inverse_series", &["p", "k", "error"], json!({ "rays": 3, "norm": "frobenius" }));
    let mut series_fits = Vec::new();
    for p in 0..=kc.p_max as i32 {
        let errs = ts.iter().map(|&t| inverse_series_error(&ms, p, t)).collect::<Result<Vec<_>>>()?;
        for (t, e) in ts.iter().zip(&errs) {
            series.rows.push(vec![p.to_string(), num(*t), num(*e)]);
        }
        series_fits.push(json!({ "p": p, "fit": power_fit(&ts, &errs, 0.0) }));
    }
    let summary = json!({
        "command": "kernels",
        "model": host.name(),
        "p_max": kc.p_max,
        "j_max": kc.j_max,
        "range": [r_min, r_max],
        "expansion": summary_fits,
        "inverse_series": series_fits,
        "modes": (0..=kc.p_max).map(|n| kernels.get(n).map(|k| k.degree())).collect::<Result<Vec<_>>>()?,
    });
    Ok(CommandOutput { summary, tables: vec![fits, shells, series], validation_failure: None })
}

fn solver_options(cfg: &RunConfig) -> SolverOptions {
    SolverOptions {
        gradient_tolerance: cfg.solve.gradient_tolerance,
        max_newton: cfg.solve.max_newton,
        ..SolverOptions::default()
    }
}

fn moment_rows(moments: &[MomentTensor]) -> Table {
    let mut t = Table::new(
        "moments",
        &["order", "component", "flat", "value", "extrapolated", "tail"],
        json!({ "layout": "component * d^order + flattened direction multi-index" }),
    );
    for m in moments {
        let w = m.dim.pow(m.order as u32);
        for k in 0..m.ncomp {
            for f in 0..w {
                t.rows.push(vec![
                    m.order.to_string(),
                    k.to_string(),
                    f.to_string(),
                    num(m.data[k * w + f]),
                    num(m.extrapolated[k * w + f]),
                    num(m.tail),
                ]);
            }
        }
    }
    t
}

fn coefficient_rows(b: &MultipoleCoeffs) -> Table {
    let mut t = Table::new(
        "coefficients",
        &["order", "component", "flat", "value"],
        json!({ "basis": b.basis, "condition": b.condition, "layout": "full tensor over basis slots, row-major" }),
    );
    for (i, per) in b.coeffs.iter().enumerate() {
        for (k, tensor) in per.iter().enumerate() {
            for (f, v) in tensor.to_full().iter().enumerate() {
                t.rows.push(vec![i.to_string(), k.to_string(), f.to_string(), num(*v)]);
            }
        }
    }
    t
}

fn cmd_moments(cfg: &RunConfig, timer: &mut Timer) -> Result<CommandOutput> {
    let s = setup(cfg)?;
    let mc = &cfg.moments;
    let pred = predictor(cfg, &s)?;
    let opts = solver_options(cfg);
    let problem = Arc::new(CellProblem::new(s.model.clone(), &pred, mc.solve_radius, Scheme::Clamped, None, None)?);
    let sol = timer.time("solve", || problem.solve(&opts, None))?;
    let lat = s.model.lattice().clone();
    let field = sol.field();
    let forces = linearised_forces(&s.model, &field, mc.radius)?;
    let moments = timer.time("moments", || compute_moments(&forces, &lat, mc.orders - 1, mc.radius))?;
    let b = fit_coefficients(&moments, &lat, &default_basis(&lat))?;
    let mut mt = moment_rows(&moments);
    mt.metadata["radius"] = json!(mc.radius);
    mt.metadata["solve_gradient_norm"] = json!(sol.report.gradient_norm);
    let summary = json!({
        "command": "moments",
        "model": s.host.name(),
        "defect": cfg.defect.kind,
        "solve": sol.report,
        "radius": mc.radius,
        "moments": moments,
        "symmetry_defects": moments.iter().map(|m| m.symmetry_defect()).collect::<Vec<_>>(),
        "coefficients": b,
    });
    Ok(CommandOutput { summary, tables: vec![mt, coefficient_rows(&b)], validation_failure: None })
}

fn cmd_predictor(cfg: &RunConfig, timer: &mut Timer) -> Result<CommandOutput> {
    let s = setup(cfg)?;
    let pc = &cfg.predictor;
    let pred = timer.time("assemble", || predictor(cfg, &s))?;
    let center = match s.kind {
        DefectKind::Screw(spec) => spec.core,
        DefectKind::Point => [0.0, 0.0],
    };
    let dim = pred.dim;
    let mut header = vec!["theta".to_string(), "x1".into(), "x2".into(), "u".into()];
    header.extend((0..pred.correctors.len()).map(|i| format!("u{i}")));
    let mut table = Table {
        name: "predictor".into(),
        header,
        rows: Vec::new(),
        metadata: json!({ "sample_radius": pc.sample_radius, "center": center, "r0": pc.r0 }),
    };
    for i in 0..pc.samples {
        let th = 2.0 * std::f64::consts::PI * i as f64 / pc.samples as f64;
        let mut x = vec![0.0; dim];
        x[0] = center[0] + pc.sample_radius * th.cos();
        x[1] = center[1] + pc.sample_radius * th.sin();
        let mut row = vec![num(th), num(x[0]), num(x[1]), num(pred.value(&x)?)];
        for f in &pred.correctors {
            let v = match f.value(&x) {
                Ok(v) => v,
                Err(Error::EvaluationDomainExceeded(_)) => f64::NAN,
                Err(e) => return Err(e),
            };
            row.push(num(v));
        }
        table.rows.push(row);
    }
    let identity = match s.kind {
        DefectKind::Screw(spec) => Some(timer.time("force_identity", || {
            screw_force_identity(s.host.as_ref(), &spec, pc.identity_coefficient, pc.identity_radius)
        })?),
        DefectKind::Point => None,
    };
    let summary = json!({
        "command": "predictor",
        "model": s.host.name(),
        "predictor": pred.describe(),
        "force_identity": identity,
    });
    Ok(CommandOutput { summary, tables: vec![table], validation_failure: None })
}

fn cmd_solve(cfg: &RunConfig, timer: &mut Timer) -> Result<CommandOutput> {
    let s = setup(cfg)?;
    let sc = &cfg.solve;
    let pred = predictor(cfg, &s)?;
    let opts = solver_options(cfg);
    let scheme = to_scheme(sc.scheme, sc.p);
    let lat = s.model.lattice().clone();
    let r_out = sc.r_out.or(match scheme {
        Scheme::Clamped => None,
        Scheme::Augmented { .. } => Some(opts.buffer_factor * sc.radius),
    });
    let table = match scheme {
        Scheme::Clamped => None,
        Scheme::Augmented { p } => {
            let (g, _) = greens(cfg, s.host.as_ref(), timer)?;
            let rt = table_radius(&lat, r_out.unwrap_or(sc.radius), p);
            Some(timer.time("green_table", || GreenTable::build(&g, rt))?)
        }
    };
    let problem = Arc::new(CellProblem::new(s.model.clone(), &pred, sc.radius, scheme, r_out, table.as_ref())?);
    let sol = timer.time("solve", || problem.solve(&opts, None))?;
    let field: LatticeField = sol.field();
    let d = lat.dim();
    let n = lat.ncomp();
    let coords = ["n1", "n2", "n3"];
    let mut header: Vec<String> = coords[..d].iter().map(|c| c.to_string()).collect();
    header.extend((0..n).map(|i| format!("v{}", i + 1)));
    let mut out = Table {
        name: "solution".into(),
        header,
        rows: Vec::new(),
        metadata: json!({ "gradient_tolerance": sc.gradient_tolerance, "gradient_norm": sol.report.gradient_norm }),
    };
    for (i, site) in sol.window.sites().iter().enumerate() {
        let mut row: Vec<String> = site[..d].iter().map(|c| c.to_string()).collect();
        row.extend(sol.v[i * n..(i + 1) * n].iter().map(|v| num(*v)));
        out.rows.push(row);
    }
    let [r_min, r_max] = sc.decay_range.unwrap_or([4.0, sc.radius]);
    let decay = fit_or_error(decay_report(&s.model, &field, r_min, r_max, 0.0))?;
    let mut tables = vec![out];
    if let Some(b) = &sol.coeffs {
        tables.push(coefficient_rows(b));
    }
    let summary = json!({
        "command": "solve",
        "model": s.host.name(),
        "defect": cfg.defect.kind,
        "report": sol.report,
        "coefficients": sol.coeffs,
        "decay": decay,
    });
    Ok(CommandOutput { summary, tables, validation_failure: None })
}

fn cmd_study(cfg: &RunConfig, timer: &mut Timer) -> Result<CommandOutput> {
    let s = setup(cfg)?;
    let st = &cfg.study;
    let pred = Arc::new(predictor(cfg, &s)?);
    let opts = solver_options(cfg);
    let (g, _) = greens(cfg, s.host.as_ref(), timer)?;
    let ctx = timer.time("reference", || StudyContext::new(s.model.clone(), pred.clone(), Some(&g), st.reference_radius, &opts))?;
    let scheme = to_scheme(st.scheme, st.p);
    let study = timer.time("study", || ctx.study(scheme, &st.radii, st.log_power, &opts))?;
    let mut table = Table::new(
        "study",
        &["R", "error", "energy"],
        json!({
            "reference_radius": st.reference_radius,
            "reference_gradient_norm": study.reference.gradient_norm,
            "gradient_tolerance": opts.gradient_tolerance,
            "error_domain_radius": study.error_domain_radius,
        }),
    );
    for i in 0..study.radii.len() {
        table.rows.push(vec![num(study.radii[i]), num(study.errors[i]), num(study.energies[i])]);
    }
    let summary = json!({
        "command": "study",
        "model": s.host.name(),
        "defect": cfg.defect.kind,
        "scheme": study.scheme,
        "fitted_slope": study.fit.slope,
        "slope_ci95": study.fit.ci95,
        "fit": study.fit,
        "radii": study.radii,
        "errors": study.errors,
        "energies": study.energies,
        "log_power": study.log_power,
        "reference": study.reference,
        "error_domain_radius": study.error_domain_radius,
    });
    Ok(CommandOutput { summary, tables: vec![table], validation_failure: None })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> RunConfig {
        RunConfig::parse(r#"{"model":{"name":"antiplane-sine"}}"#).unwrap()
    }

    #[test]
    fn defaults_validate() {
        let c = minimal();
        c.validate().unwrap();
        assert_eq!(c.study.radii, vec![8.0, 16.0, 24.0, 32.0, 48.0, 64.0]);
        assert_eq!(c.defect.kind, DefectKindName::None);
    }

    #[test]
    fn unknown_keys_are_rejected_with_path() {
        let e = RunConfig::parse(r#"{"model":{"name":"antiplane-sine"},"greens":{"supercel":512}}"#).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("greens") && msg.contains("supercel"), "{msg}");
        assert_eq!(exit_code(&e), 2);
    }

    #[test]
    fn ranges_are_enforced() {
        let mut c = minimal();
        c.greens.supercell = 500;
        assert!(c.validate().unwrap_err().to_string().contains("greens.supercell"));
        let mut c = minimal();
        c.study.reference_radius = 100.0;
        assert!(c.validate().unwrap_err().to_string().contains("study.reference_radius"));
        let mut c = minimal();
        c.study.radii = vec![8.0, 8.0];
        assert!(c.validate().is_err());
    }

    #[test]
    fn shortest_round_trip_numbers() {
        for x in [0.1, -0.25, 1.0 / 3.0, 1e-300, 123456789.123] {
            assert_eq!(num(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(num(0.1), "0.1");
    }

    #[test]
    fn inverse_series_error_shrinks_with_order() {
        let m = build_model("antiplane-sine", &Params::new()).unwrap();
        let ms = MultiplierSeries::new(m.as_ref());
        let e0 = inverse_series_error(&ms, 0, 0.05).unwrap();
        let e1 = inverse_series_error(&ms, 1, 0.05).unwrap();
        assert!(e1 < e0 && e0 < 1e-2, "{e0} {e1}");
    }
}
