//! Command-line front end: reads an experiment config, runs it and writes
//! CSV/JSON artifacts into the output directory.
//!
//! Exit codes: 0 on success, 1 for invalid input or configuration, 2 for
//! numerical failures (non-finite iterates, scan caps, degenerate windows).

use std::fs;
use std::io::Write;
use std::path::{Component, Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use ttsa_core::analysis::{self, fmt_real, ErrorPanel};
use ttsa_core::gtd::{self, GtdInstance, GtdVariant, MdpSpec};
use ttsa_core::ledger::{build_ledger, LedgerConfig};
use ttsa_core::sa::default_radius;
use ttsa_core::{
    derive_system, DerivedSystem, MatrixSpec, NoiseModel, ProjectionConfig, RunOptions, SphereNoise, StepSchedule,
    ZeroNoise,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] ttsa_core::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 2,
            _ => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Run,
    Constants,
    Rates,
    LowerBound,
    Decompose,
    MdpGen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    Zero,
    Sphere { c: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSource {
    Inline {
        spec: MatrixSpec,
        noise: NoiseSpec,
    },
    Gtd {
        variant: GtdVariant,
        /// Relative paths are resolved against the config file's directory.
        mdp_file: String,
    },
    RandomMdp {
        variant: GtdVariant,
        num_states: usize,
        dim: usize,
        seed: u64,
        #[serde(default = "default_discount")]
        gamma: f64,
    },
}

fn default_discount() -> f64 {
    gtd::DEFAULT_DISCOUNT
}

/// Exponents are kept raw so that invalid pairs are reported by validation
/// rather than by the JSON parser.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionSpec {
    pub enabled: bool,
    /// Defaults to 10·(1+‖θ*‖+‖w*‖).
    pub r_theta: Option<f64>,
    pub r_w: Option<f64>,
}

impl Default for ProjectionSpec {
    fn default() -> Self {
        ProjectionSpec { enabled: true, r_theta: None, r_w: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerSpec {
    pub delta: f64,
    pub p: f64,
    pub r_theta: Option<f64>,
    pub r_w: Option<f64>,
}

impl Default for LedgerSpec {
    fn default() -> Self {
        LedgerSpec { delta: 0.05, p: 2.0, r_theta: None, r_w: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CheckpointSpec {
    /// `count` log-uniform indices between 10² and the horizon.
    LogUniform { count: usize },
    Explicit(Vec<u64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSpec {
    pub count: u64,
    pub base: u64,
}

/// File names inside the output directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: Option<String>,
    pub csv: Option<String>,
    pub json: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// When present it must match the subcommand.
    #[serde(default)]
    pub mode: Option<Mode>,
    pub system: SystemSource,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub projection: ProjectionSpec,
    #[serde(default)]
    pub ledger: LedgerSpec,
    pub horizon: u64,
    #[serde(default = "default_checkpoints")]
    pub checkpoints: CheckpointSpec,
    #[serde(default = "default_seeds")]
    pub seeds: SeedSpec,
    /// Threshold of the scaled-error fractions.
    #[serde(default = "default_c")]
    pub c: f64,
    /// Fit window of `rates`; the last two decades when absent.
    #[serde(default)]
    pub window: Option<(u64, u64)>,
    /// Start index of `decompose`.
    #[serde(default)]
    pub n0: u64,
    #[serde(default)]
    pub outputs: OutputSpec,
}

fn default_checkpoints() -> CheckpointSpec {
    CheckpointSpec::LogUniform { count: 40 }
}

fn default_seeds() -> SeedSpec {
    SeedSpec { count: 1, base: 0 }
}

fn default_c() -> f64 {
    1e-3
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: None,
            system: SystemSource::RandomMdp { variant: GtdVariant::Gtd0, num_states: 5, dim: 2, seed: 85, gamma: default_discount() },
            schedule: ScheduleSpec { alpha: 0.8, beta: 0.5 },
            projection: ProjectionSpec::default(),
            ledger: LedgerSpec::default(),
            horizon: 10_000,
            checkpoints: default_checkpoints(),
            seeds: default_seeds(),
            c: default_c(),
            window: None,
            n0: 0,
            outputs: OutputSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| config_err(format!("config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn schedule(&self) -> CliResult<StepSchedule> {
        StepSchedule::new(self.schedule.alpha, self.schedule.beta)
            .map_err(|e| config_err(format!("schedule: {e}")))
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds.count).map(|i| self.seeds.base.wrapping_add(i)).collect()
    }

    pub fn checkpoint_list(&self) -> CliResult<Vec<u64>> {
        match &self.checkpoints {
            CheckpointSpec::LogUniform { count } => {
                Ok(analysis::log_uniform_checkpoints(100.min(self.horizon), self.horizon, *count))
            }
            CheckpointSpec::Explicit(list) => {
                if let Some(bad) = list.iter().find(|&&n| n > self.horizon) {
                    return Err(config_err(format!("checkpoints: {bad} exceeds horizon {}", self.horizon)));
                }
                let mut v = list.clone();
                v.sort_unstable();
                v.dedup();
                Ok(v)
            }
        }
    }

    fn validate(&self, mode: Mode) -> CliResult<()> {
        if let Some(m) = self.mode {
            if m != mode {
                return Err(config_err(format!("mode: config says {m:?} but the subcommand is {mode:?}")));
            }
        }
        self.schedule()?;
        if self.seeds.count == 0 {
            return Err(config_err("seeds.count must be at least 1"));
        }
        if !(self.c >= 0.0) {
            return Err(config_err("c must be non-negative"));
        }
        if mode == Mode::MdpGen && !matches!(self.system, SystemSource::RandomMdp { .. }) {
            return Err(config_err("system: mdp-gen needs a random_mdp source"));
        }
        for (field, r) in [("projection.r_theta", self.projection.r_theta), ("projection.r_w", self.projection.r_w)] {
            if r.is_some_and(|r| !(r > 0.0)) {
                return Err(config_err(format!("{field} must be positive")));
            }
        }
        if mode == Mode::Decompose && self.n0 > self.horizon {
            return Err(config_err(format!("n0 = {} exceeds horizon {}", self.n0, self.horizon)));
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "ttsa", about = "Two-timescale stochastic approximation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Checkpoint errors of each seed as CSV.
    Run(Overrides),
    /// Finite-time constants as JSON.
    Constants(Overrides),
    /// Multi-seed rate fit (CSV table and JSON report).
    Rates(Overrides),
    /// Scaled-error fractions as CSV.
    LowerBound(Overrides),
    /// Error decomposition residuals as JSON.
    Decompose(Overrides),
    /// Random MDP as JSON.
    MdpGen(Overrides),
}

#[derive(Debug, Args)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    horizon: Option<u64>,
    #[arg(long, requires = "beta")]
    alpha: Option<f64>,
    #[arg(long, requires = "alpha")]
    beta: Option<f64>,
    #[arg(long)]
    variant: Option<GtdVariant>,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the exit code. Errors go to stderr.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> CliResult<()> {
    let (mode, ov) = match cli.command {
        Command::Run(o) => (Mode::Run, o),
        Command::Constants(o) => (Mode::Constants, o),
        Command::Rates(o) => (Mode::Rates, o),
        Command::LowerBound(o) => (Mode::LowerBound, o),
        Command::Decompose(o) => (Mode::Decompose, o),
        Command::MdpGen(o) => (Mode::MdpGen, o),
    };
    let (mut cfg, base_dir) = match &ov.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| CliError::Io { path: path.display().to_string(), source })?;
            (ExperimentConfig::from_json(&text)?, path.parent().map(Path::to_path_buf).unwrap_or_default())
        }
        None => (ExperimentConfig::default(), PathBuf::new()),
    };
    apply_overrides(&mut cfg, &ov)?;
    cfg.validate(mode)?;
    let out_dir = ov.out.clone().or_else(|| cfg.outputs.dir.as_ref().map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("."));

    let threads = match std::env::var("TTSA_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| config_err(format!("TTSA_THREADS must be a positive integer, got {v:?}")))?,
        Err(_) => 0,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| config_err(format!("TTSA_THREADS: {e}")))?;
    pool.install(|| dispatch(mode, &cfg, &base_dir, &out_dir))
}

fn apply_overrides(cfg: &mut ExperimentConfig, ov: &Overrides) -> CliResult<()> {
    if let Some(s) = ov.seeds {
        cfg.seeds.count = s;
    }
    if let Some(h) = ov.horizon {
        cfg.horizon = h;
    }
    if let (Some(a), Some(b)) = (ov.alpha, ov.beta) {
        cfg.schedule = ScheduleSpec { alpha: a, beta: b };
    }
    if let Some(v) = ov.variant {
        match &mut cfg.system {
            SystemSource::Gtd { variant, .. } | SystemSource::RandomMdp { variant, .. } => *variant = v,
            SystemSource::Inline { .. } => return Err(config_err("--variant needs a gtd or random_mdp system source")),
        }
    }
    Ok(())
}

/// A system with its noise model and domination parameters.
enum Loaded {
    Inline { system: DerivedSystem, noise: Box<dyn NoiseModel> },
    Gtd { system: DerivedSystem, instance: Box<GtdInstance> },
}

impl Loaded {
    fn system(&self) -> &DerivedSystem {
        match self {
            Loaded::Inline { system, .. } | Loaded::Gtd { system, .. } => system,
        }
    }

    fn noise(&self) -> &dyn NoiseModel {
        match self {
            Loaded::Inline { noise, .. } => noise.as_ref(),
            Loaded::Gtd { instance, .. } => instance.as_ref(),
        }
    }

    fn bounds(&self) -> (f64, f64) {
        self.noise().bounds().unwrap_or((0.0, 0.0))
    }
}

fn load_mdp(cfg: &ExperimentConfig, base_dir: &Path) -> CliResult<Option<(GtdVariant, MdpSpec)>> {
    match &cfg.system {
        SystemSource::Inline { .. } => Ok(None),
        SystemSource::Gtd { variant, mdp_file } => {
            let path = base_dir.join(mdp_file);
            let text = fs::read_to_string(&path).map_err(|source| CliError::Io { path: path.display().to_string(), source })?;
            let mdp: MdpSpec =
                serde_json::from_str(&text).map_err(|e| config_err(format!("system.gtd.mdp_file ({}): {e}", path.display())))?;
            Ok(Some((*variant, mdp)))
        }
        SystemSource::RandomMdp { variant, num_states, dim, seed, gamma } => {
            Ok(Some((*variant, gtd::random_mdp_with_discount(*num_states, *dim, *gamma, *seed, true)?)))
        }
    }
}

fn load_system(cfg: &ExperimentConfig, base_dir: &Path) -> CliResult<Loaded> {
    if let SystemSource::Inline { spec, noise } = &cfg.system {
        let noise: Box<dyn NoiseModel> = match noise {
            NoiseSpec::Zero => Box::new(ZeroNoise),
            NoiseSpec::Sphere { c } if *c >= 0.0 && c.is_finite() => Box::new(SphereNoise { c: *c }),
            NoiseSpec::Sphere { .. } => return Err(config_err("system.inline.noise.sphere.c must be non-negative")),
        };
        return Ok(Loaded::Inline { system: derive_system(spec)?, noise });
    }
    let (variant, mdp) = load_mdp(cfg, base_dir)?.expect("GTD source");
    let instance = gtd::build_gtd(variant, &mdp)?;
    let system = derive_system(&instance.spec)?;
    Ok(Loaded::Gtd { system, instance: Box::new(instance) })
}

fn projection(cfg: &ExperimentConfig, system: &DerivedSystem) -> ProjectionConfig {
    if !cfg.projection.enabled {
        return ProjectionConfig::disabled();
    }
    let r = default_radius(system);
    ProjectionConfig::radii(cfg.projection.r_theta.unwrap_or(r), cfg.projection.r_w.unwrap_or(r))
}

/// Rejects absolute names and any `..`, so every artifact stays under the
/// output directory.
fn output_path(out_dir: &Path, name: &Option<String>, default: &str, field: &str) -> CliResult<PathBuf> {
    let name = name.as_deref().unwrap_or(default);
    let rel = Path::new(name);
    let clean = !name.is_empty() && rel.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir));
    if !clean {
        return Err(config_err(format!("{field}: {name:?} must be a relative path inside the output directory")));
    }
    Ok(out_dir.join(rel))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let io = |source| CliError::Io { path: path.display().to_string(), source };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(bytes).map_err(io)
}

fn json_bytes(value: &impl Serialize) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s.into_bytes()
}

fn dispatch(mode: Mode, cfg: &ExperimentConfig, base_dir: &Path, out_dir: &Path) -> CliResult<()> {
    let csv_path = |default: &str| output_path(out_dir, &cfg.outputs.csv, default, "outputs.csv");
    let json_path = |default: &str| output_path(out_dir, &cfg.outputs.json, default, "outputs.json");

    if mode == Mode::MdpGen {
        let (_, mdp) = load_mdp(cfg, base_dir)?.expect("random_mdp source");
        return write_file(&json_path("mdp.json")?, &json_bytes(&mdp));
    }

    let schedule = cfg.schedule()?;
    let loaded = load_system(cfg, base_dir)?;
    let system = loaded.system();
    let proj = projection(cfg, system);

    match mode {
        Mode::Constants => {
            let (m1, m2) = loaded.bounds();
            let mut lc = LedgerConfig::defaults(system, schedule, m1, m2);
            lc.delta = cfg.ledger.delta;
            lc.p = cfg.ledger.p;
            lc.r_theta = cfg.ledger.r_theta.unwrap_or(lc.r_theta);
            lc.r_w = cfg.ledger.r_w.unwrap_or(lc.r_w);
            let ledger = build_ledger(system, &lc)?;
            write_file(&json_path("constants.json")?, &json_bytes(&ledger.to_json()))
        }
        Mode::Run => {
            let template = RunOptions::new(cfg.horizon, 0, cfg.checkpoint_list()?);
            let trajs = analysis::monte_carlo(system, &schedule, &proj, loaded.noise(), &cfg.seed_list(), &template)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            let csv_err = |e: csv::Error| config_err(format!("csv: {e}"));
            w.write_record(["seed", "n", "err_theta", "err_w"]).map_err(csv_err)?;
            for t in &trajs {
                for (i, s) in t.states.iter().enumerate() {
                    w.write_record([t.seed.to_string(), s.n.to_string(), fmt_real(t.errors_theta[i]), fmt_real(t.errors_w[i])])
                        .map_err(csv_err)?;
                }
            }
            let bytes = w.into_inner().map_err(|e| config_err(format!("csv: {e}")))?;
            write_file(&csv_path("run.csv")?, &bytes)?;
            if let Some(t) = trajs.iter().find(|t| t.diverged()) {
                return Err(ttsa_core::Error::NonFinite { index: t.diverged_at.unwrap_or_default() }.into());
            }
            Ok(())
        }
        Mode::Rates | Mode::LowerBound => {
            let template = RunOptions::new(cfg.horizon, 0, cfg.checkpoint_list()?);
            let seeds = cfg.seed_list();
            let trajs = analysis::monte_carlo(system, &schedule, &proj, loaded.noise(), &seeds, &template)?;
            let panel = ErrorPanel::from_trajectories(&trajs)?;
            if panel.seeds.is_empty() {
                return Err(ttsa_core::Error::NonFinite { index: trajs[0].diverged_at.unwrap_or_default() }.into());
            }
            let rows = analysis::summarize(&panel, cfg.c);
            let mut csv_bytes = Vec::new();
            analysis::write_summary_csv(&rows, &mut csv_bytes).map_err(|e| config_err(format!("csv: {e}")))?;
            if mode == Mode::Rates {
                let window = cfg.window.unwrap_or(((cfg.horizon / 100).max(1), cfg.horizon));
                let report = analysis::fit_rate(&panel, window)?;
                write_file(&csv_path("rates.csv")?, &csv_bytes)?;
                write_file(&json_path("rates.json")?, &json_bytes(&serde_json::json!({ "report": report, "rows": rows })))
            } else {
                if seeds.len() < 30 {
                    return Err(config_err(format!("seeds.count: the lower-bound check needs at least 30 seeds, got {}", seeds.len())));
                }
                write_file(&csv_path("lower_bound.csv")?, &csv_bytes)?;
                write_file(
                    &json_path("lower_bound.json")?,
                    &json_bytes(&serde_json::json!({ "c": cfg.c, "divergent_fraction": panel.divergent_fraction(), "rows": rows })),
                )
            }
        }
        Mode::Decompose => {
            let opts = RunOptions::full(cfg.horizon, cfg.seeds.base);
            let traj = ttsa_core::run_with_system(system, &schedule, &proj, loaded.noise(), &opts)?;
            if let Some(k) = traj.diverged_at {
                return Err(ttsa_core::Error::NonFinite { index: k }.into());
            }
            let d = analysis::decompose(&traj, system, cfg.n0)?;
            let last = |v: &Vec<nalgebra::DVector<f64>>| v.last().map_or(0.0, |x| x.norm());
            let report = serde_json::json!({
                "seed": cfg.seeds.base,
                "n0": d.n0,
                "horizon": cfg.horizon,
                "residual_theta": d.residual_theta,
                "residual_w": d.residual_w,
                "residual_telescoping": d.residual_telescoping,
                "max_iterate_norm": d.max_iterate_norm,
                "final_norms": {
                    "delta_theta": last(&d.delta_theta),
                    "l_theta": last(&d.l_theta),
                    "r_theta": last(&d.r_theta_term),
                    "t": last(&d.t_term),
                    "delta_w": last(&d.delta_w),
                    "l_w": last(&d.l_w),
                    "r_w": last(&d.r_w_term),
                },
            });
            write_file(&json_path("decompose.json")?, &json_bytes(&report))
        }
        Mode::MdpGen => unreachable!("handled above"),
    }
}
