use std::path::{Path, PathBuf};

use clap::Args;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use diffnea::actuators::ActuatorKind;
use diffnea::data::{generate_trajectory, generate_uniform, DataError, Dataset, Ranges, Regime, TrajectoryConfig};
use diffnea::eval::{self, energy_scale, EvalConfig, EvalRow, Protocol};
use diffnea::gradcheck::{check_case, GradcheckConfig};
use diffnea::ident::{self, FitResult, IdentError, Init, ModelKind, TrainConfig, FIT_FORMAT};
use diffnea::model::tree_from_config;
use diffnea::sim::{self, compare, Comparison, Trajectory};
use diffnea::systems::{PlantParams, SwingUp, System};

use crate::manifest::{manifest_path, sha256_hex, ConfigSource, RunManifest};
use crate::Ctx;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io { .. } | CliError::Input(_) => 4,
        }
    }
}

impl From<IdentError> for CliError {
    fn from(e: IdentError) -> Self {
        match e {
            IdentError::NumericAbort(_) => CliError::Numeric(e.to_string()),
            IdentError::Empty => CliError::Input(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    Dataset::load(path).map_err(|e| match e {
        DataError::Io(source) => CliError::io(path, source),
        other => CliError::Input(format!("{}: {other}", path.display())),
    })
}

/// Built-in defaults overridden by the config file, if any.
fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<(T, Option<ConfigSource>), CliError> {
    let Some(path) = path else { return Ok((T::default(), None)) };
    let bytes = read(path)?;
    let cfg = serde_json::from_slice(&bytes).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    Ok((cfg, Some(ConfigSource { path: path.to_path_buf(), sha256: sha256_hex(&bytes) })))
}

fn parse_system(s: &str) -> Result<System, String> {
    System::parse(s).map_err(|e| e.to_string())
}

fn parse_regime(s: &str) -> Result<Regime, String> {
    Regime::parse(s).ok_or_else(|| format!("unknown regime `{s}` (uniform, trajectory)"))
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    ModelKind::parse(s).ok_or_else(|| format!("unknown model `{s}` (no_kin_diffnea, diffnea, nea, ffnn)"))
}

fn parse_actuator(s: &str) -> Result<ActuatorKind, String> {
    ActuatorKind::parse(s).ok_or_else(|| {
        let names: Vec<&str> = ActuatorKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown actuator `{s}` ({})", names.join(", "))
    })
}

fn parse_init(s: &str) -> Result<Init, String> {
    Init::parse(s).ok_or_else(|| format!("unknown initialization `{s}` (with_prior, without_prior)"))
}

fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    let v: Vec<f64> = s.split(',').map(|x| x.trim().parse::<f64>().map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected two comma-separated numbers, got `{s}`"))
}

fn to_pretty(v: &impl Serialize) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("outputs serialize");
    s.push('\n');
    s.into_bytes()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub system: Option<System>,
    pub regime: Regime,
    /// Samples of the uniform regime.
    pub n: usize,
    pub seed: u64,
    pub episodes: usize,
    pub duration: f64,
    pub state_noise: f64,
    pub action_noise: f64,
    pub plant: Option<PlantParams>,
    pub ranges: Option<Ranges>,
    pub output: Option<PathBuf>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        let t = TrajectoryConfig::default();
        Self {
            system: None,
            regime: Regime::Uniform,
            n: 10_000,
            seed: 0,
            episodes: t.episodes,
            duration: t.duration,
            state_noise: t.state_noise,
            action_noise: t.action_noise,
            plant: None,
            ranges: None,
            output: None,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// cartpole | furuta
    #[arg(long, value_parser = parse_system)]
    system: Option<System>,
    /// uniform | trajectory
    #[arg(long, value_parser = parse_regime)]
    regime: Option<Regime>,
    /// Number of uniform samples
    #[arg(long)]
    n: Option<usize>,
    /// Episodes of the trajectory regime
    #[arg(long)]
    episodes: Option<usize>,
    /// Recorded seconds per episode
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    state_noise: Option<f64>,
    #[arg(long)]
    action_noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Plant constants (JSON); defaults to the documented system
    #[arg(long)]
    plant: Option<PathBuf>,
    /// JSON config; flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset path (default: <out-dir>/<system>-<regime>-seed<seed>.jsonl)
    #[arg(long, short)]
    output: Option<PathBuf>,
}

pub fn generate(ctx: &Ctx, a: GenerateArgs) -> Result<(), CliError> {
    let (mut cfg, source): (GenerateConfig, _) = load_config(a.config.as_deref())?;
    cfg.system = a.system.or(cfg.system);
    cfg.regime = a.regime.unwrap_or(cfg.regime);
    cfg.n = a.n.unwrap_or(cfg.n);
    cfg.episodes = a.episodes.unwrap_or(cfg.episodes);
    cfg.duration = a.duration.unwrap_or(cfg.duration);
    cfg.state_noise = a.state_noise.unwrap_or(cfg.state_noise);
    cfg.action_noise = a.action_noise.unwrap_or(cfg.action_noise);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    if let Some(p) = &a.plant {
        let json = String::from_utf8_lossy(&read(p)?).into_owned();
        cfg.plant = Some(PlantParams::from_json(&json).map_err(|e| CliError::Usage(format!("plant {}: {e}", p.display())))?);
    }
    cfg.output = a.output.or(cfg.output);

    let system = cfg.system.ok_or_else(|| CliError::Usage("--system is required (flag or config)".into()))?;
    let plant = cfg.plant.unwrap_or_else(|| system.default_params());
    if plant.system() != system {
        return Err(CliError::Usage(format!("plant constants describe `{}`, not `{system}`", plant.system())));
    }
    plant.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.plant = Some(plant);
    let dataset = match cfg.regime {
        Regime::Uniform => {
            if cfg.n == 0 {
                return Err(CliError::Usage("--n must be positive".into()));
            }
            let ranges = cfg.ranges.clone().unwrap_or_else(|| Ranges::default_for(system));
            cfg.ranges = Some(ranges.clone());
            generate_uniform(&plant, cfg.n, &ranges, cfg.seed)
        }
        Regime::Trajectory => {
            if cfg.episodes == 0 || !(cfg.duration > 0.0) || cfg.state_noise < 0.0 || cfg.action_noise < 0.0 {
                return Err(CliError::Usage("episodes and duration must be positive, noise levels non-negative".into()));
            }
            let tc = TrajectoryConfig {
                episodes: cfg.episodes,
                duration: cfg.duration,
                state_noise: cfg.state_noise,
                action_noise: cfg.action_noise,
            };
            generate_trajectory(&plant, &tc, cfg.seed, ctx.exec).map_err(|e| CliError::Numeric(e.to_string()))?
        }
    };
    let path = cfg
        .output
        .clone()
        .unwrap_or_else(|| ctx.out_dir.join(format!("{system}-{}-seed{}.jsonl", cfg.regime.name(), cfg.seed)));
    let mut manifest = RunManifest::start("generate", source, &cfg);
    manifest.write(&path, &dataset.to_bytes())?;
    manifest.finish(&manifest_path(&path))?;
    println!("wrote {} samples to {}", dataset.len(), path.display());
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainFile {
    pub data: Option<PathBuf>,
    /// Tree config used as structure and prior.
    pub prior: Option<PathBuf>,
    pub output: Option<PathBuf>,
    #[serde(flatten)]
    pub train: TrainConfig,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset (.jsonl or .jsonl.gz)
    #[arg(long)]
    data: Option<PathBuf>,
    /// no_kin_diffnea | diffnea | nea | ffnn
    #[arg(long, value_parser = parse_model)]
    model: Option<ModelKind>,
    /// none | viscous | stribeck | nn_friction | nn_residual | ffnn
    #[arg(long, value_parser = parse_actuator)]
    actuator: Option<ActuatorKind>,
    /// with_prior | without_prior
    #[arg(long, value_parser = parse_init)]
    init: Option<Init>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// ADAM step size
    #[arg(long)]
    lr: Option<f64>,
    /// Step size at the last step (geometric decay)
    #[arg(long)]
    lr_final: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    validation_fraction: Option<f64>,
    /// Hidden layer sizes, e.g. 32,32
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    /// Tree config (JSON) giving structure and prior; defaults to the dataset's plant
    #[arg(long)]
    prior: Option<PathBuf>,
    /// JSON config; flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fit result path (default: <out-dir>/fit-<label>-<system>-<regime>-seed<seed>.json)
    #[arg(long, short)]
    output: Option<PathBuf>,
}

pub fn train(ctx: &Ctx, a: TrainArgs) -> Result<(), CliError> {
    let (mut file, source): (TrainFile, _) = load_config(a.config.as_deref())?;
    let c = &mut file.train;
    c.kind = a.model.unwrap_or(c.kind);
    c.actuator = a.actuator.unwrap_or(c.actuator);
    c.init = a.init.unwrap_or(c.init);
    c.epochs = a.epochs.unwrap_or(c.epochs);
    c.batch_size = a.batch_size.unwrap_or(c.batch_size);
    c.adam.lr = a.lr.unwrap_or(c.adam.lr);
    c.adam.lr_final = a.lr_final.or(c.adam.lr_final);
    c.adam.beta1 = a.beta1.unwrap_or(c.adam.beta1);
    c.adam.beta2 = a.beta2.unwrap_or(c.adam.beta2);
    c.adam.eps = a.eps.unwrap_or(c.adam.eps);
    c.seed = a.seed.unwrap_or(c.seed);
    c.restarts = a.restarts.or(c.restarts);
    c.validation_fraction = a.validation_fraction.unwrap_or(c.validation_fraction);
    if let Some(h) = a.hidden {
        c.hidden = h;
    }
    c.validate()?;
    file.data = a.data.or(file.data);
    file.prior = a.prior.or(file.prior);
    file.output = a.output.or(file.output);

    let data_path = file.data.clone().ok_or_else(|| CliError::Usage("--data is required (flag or config)".into()))?;
    let dataset = load_dataset(&data_path)?;
    let tree = match &file.prior {
        Some(p) => {
            let json = String::from_utf8_lossy(&read(p)?).into_owned();
            tree_from_config(&json).map_err(|e| CliError::Usage(format!("prior {}: {e}", p.display())))?
        }
        None => dataset.meta.plant.tree(),
    };
    let cfg = file.train.clone();
    let path = file.output.clone().unwrap_or_else(|| {
        ctx.out_dir.join(format!(
            "fit-{}-{}-{}-seed{}.json",
            cfg.label(),
            dataset.meta.system,
            dataset.meta.regime.name(),
            dataset.meta.seed
        ))
    });
    let mut manifest = RunManifest::start("train", source, &file);
    let fit = match ident::fit(&tree, &dataset, &cfg, ctx.exec) {
        Ok(f) => f,
        Err(IdentError::NumericAbort(abort)) => {
            let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
            name.push(".abort.json");
            manifest.write(&path.with_file_name(name), &to_pretty(&abort))?;
            manifest.finish(&manifest_path(&path))?;
            return Err(CliError::Numeric(abort.to_string()));
        }
        Err(e) => return Err(e.into()),
    };
    manifest.fit_wall_clock_s = Some(fit.wall_clock_s);
    let mut json = fit.to_json();
    json.push('\n');
    manifest.write(&path, json.as_bytes())?;
    manifest.finish(&manifest_path(&path))?;
    for w in &fit.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "{}: validation MSE {:.3e} (epoch {}), train MSE {:.3e}, {:.1}s -> {}",
        fit.label,
        fit.val_mse,
        fit.best_epoch,
        fit.train_mse,
        fit.wall_clock_s,
        path.display()
    );
    Ok(())
}

fn load_fit(path: &Path) -> Result<FitResult, CliError> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Input(format!("{}: not a fit result: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Zero,
    Swingup,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    /// Fit result (JSON)
    #[arg(long)]
    fit: PathBuf,
    /// Named start state: rest | swing (default rest, or custom with --q0)
    #[arg(long)]
    protocol: Option<String>,
    /// Start position, e.g. 0,1.57 (overrides the protocol)
    #[arg(long, value_parser = parse_pair, allow_hyphen_values = true)]
    q0: Option<[f64; 2]>,
    /// Start velocity
    #[arg(long, value_parser = parse_pair, allow_hyphen_values = true)]
    qd0: Option<[f64; 2]>,
    /// Seconds
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    #[arg(long, value_enum, default_value_t = PolicyKind::Zero)]
    policy: PolicyKind,
    /// File stem (default: <out-dir>/rollout-<label>-<protocol>)
    #[arg(long)]
    prefix: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct RolloutMetrics<'a> {
    label: &'a str,
    system: System,
    protocol: &'a Protocol,
    policy: PolicyKind,
    duration: f64,
    comparison: Comparison,
    diverged_at: Option<f64>,
    energy_class: ident::EnergyClass,
    energy_rise: Option<f64>,
    energy_drift: Option<f64>,
}

pub fn rollout(ctx: &Ctx, a: RolloutArgs) -> Result<(), CliError> {
    if !(a.duration > 0.0) {
        return Err(CliError::Usage("--duration must be positive".into()));
    }
    let fit = load_fit(&a.fit)?;
    let mut protocol = match (&a.protocol, a.q0) {
        (Some(name), _) => Protocol::defaults()
            .into_iter()
            .find(|p| &p.name == name)
            .ok_or_else(|| CliError::Usage(format!("unknown protocol `{name}` (rest, swing)")))?,
        (None, Some(q)) => Protocol::new("custom", q, [0.0, 0.0]),
        (None, None) => Protocol::defaults().remove(0),
    };
    if let Some(q) = a.q0 {
        protocol.q0 = q.to_vec();
    }
    if let Some(v) = a.qd0 {
        protocol.qd0 = v.to_vec();
    }
    let plant = fit.dataset.reference_plant();
    let (model_traj, reference): (Trajectory, Trajectory) = match a.policy {
        PolicyKind::Zero => {
            let cfg = EvalConfig { duration: a.duration, ..EvalConfig::default() };
            let run = eval::run_cell(&fit, &protocol, &cfg)?;
            (run.model, run.reference)
        }
        PolicyKind::Swingup => {
            let model = fit.model.compile()?;
            let controller = || SwingUp::new(plant, plant.swingup_gains());
            let mut m = rollout_sim(&model, &mut controller(), &protocol, a.duration);
            m.fill_energy(&plant);
            (m, rollout_sim(&plant, &mut controller(), &protocol, a.duration))
        }
    };
    let comparison = compare(&model_traj, &reference, EvalConfig::default().horizon_threshold).expect("same step");
    let scale = energy_scale(&plant);
    let metrics = RolloutMetrics {
        label: &fit.label,
        system: fit.dataset.system,
        protocol: &protocol,
        policy: a.policy,
        duration: a.duration,
        comparison,
        diverged_at: model_traj.diverged_at.map(|k| k as f64 * model_traj.dt),
        energy_class: fit.model.energy_class(),
        energy_rise: model_traj.max_energy_rise().map(|r| r / scale),
        energy_drift: model_traj.energy_drift(scale),
    };
    let stem = a.prefix.unwrap_or_else(|| ctx.out_dir.join(format!("rollout-{}-{}", fit.label, protocol.name)));
    let with_suffix = |s: &str| {
        let mut name = stem.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(s);
        stem.with_file_name(name)
    };
    let mut manifest = RunManifest::start("rollout", None, &(&a.fit, &protocol, a.policy, a.duration));
    for (suffix, traj) in [("-model.csv", &model_traj), ("-reference.csv", &reference)] {
        let mut csv = Vec::new();
        traj.write_csv(&mut csv).map_err(|e| CliError::io(&with_suffix(suffix), e))?;
        manifest.write(&with_suffix(suffix), &csv)?;
    }
    let title = format!("{} on {} ({}, {:?} torque)", fit.label, fit.dataset.system, protocol.name, a.policy);
    manifest.write(&with_suffix("-model.svg"), model_traj.to_svg(&title).as_bytes())?;
    manifest.write(&with_suffix("-reference.svg"), reference.to_svg(&format!("reference {}", fit.dataset.system)).as_bytes())?;
    let metrics_path = with_suffix("-metrics.json");
    manifest.write(&metrics_path, &to_pretty(&metrics))?;
    manifest.finish(&manifest_path(&metrics_path))?;
    println!(
        "{}: RMSE q {:?}, diverged {}, energy rise {} -> {}",
        fit.label,
        metrics.comparison.rmse_q,
        metrics.diverged_at.map_or("no".into(), |t| format!("at {t:.2}s")),
        metrics.energy_rise.map_or("-".into(), |r| format!("{r:.2e}")),
        metrics_path.display()
    );
    Ok(())
}

fn rollout_sim<D: diffnea::sim::Dynamics + ?Sized>(model: &D, policy: &mut SwingUp, p: &Protocol, duration: f64) -> Trajectory {
    sim::rollout(model, policy, &p.q0, &p.qd0, duration)
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of fit results (default: the output directory)
    #[arg(long)]
    results: Option<PathBuf>,
    /// Rollout length in seconds
    #[arg(long)]
    duration: Option<f64>,
    /// JSON config (duration, protocols, horizon_threshold); flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report stem (default: <results>/report)
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Report<'a> {
    config: &'a EvalConfig,
    fits: Vec<PathBuf>,
    rows: &'a [EvalRow],
}

/// Fit results in `dir`, sorted by file name. Other JSON files (manifests,
/// reports) are skipped.
fn scan_fits(dir: &Path) -> Result<Vec<(PathBuf, FitResult)>, CliError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let bytes = read(&p)?;
        let Ok(value) = serde_json::from_slice::<serde_json::Value>(&bytes) else { continue };
        if value.get("format").and_then(|f| f.as_str()) != Some(FIT_FORMAT) {
            continue;
        }
        match serde_json::from_value::<FitResult>(value) {
            Ok(f) => out.push((p, f)),
            Err(e) => eprintln!("warning: skipping {}: {e}", p.display()),
        }
    }
    Ok(out)
}

pub fn eval(ctx: &Ctx, a: EvalArgs) -> Result<(), CliError> {
    let (mut cfg, source): (EvalConfig, _) = load_config(a.config.as_deref())?;
    cfg.duration = a.duration.unwrap_or(cfg.duration);
    if !(cfg.duration > 0.0) {
        return Err(CliError::Usage("duration must be positive".into()));
    }
    let dir = a.results.unwrap_or_else(|| ctx.out_dir.clone());
    let fits = scan_fits(&dir)?;
    if fits.is_empty() {
        eprintln!("warning: no fit results in {}", dir.display());
    }
    let (paths, fits): (Vec<PathBuf>, Vec<FitResult>) = fits.into_iter().unzip();
    let rows = eval::evaluate(&fits, &cfg, ctx.exec)?;
    let table = eval::render_markdown(&rows);
    let stem = a.output.unwrap_or_else(|| dir.join("report"));
    let mut manifest = RunManifest::start("eval", source, &cfg);
    manifest.write(&stem.with_extension("json"), &to_pretty(&Report { config: &cfg, fits: paths, rows: &rows }))?;
    manifest.write(&stem.with_extension("md"), table.as_bytes())?;
    manifest.finish(&manifest_path(&stem.with_extension("json")))?;
    print!("{table}");
    Ok(())
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random states per (system, actuator) case
    #[arg(long, default_value_t = 100)]
    states: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Restrict to one system
    #[arg(long, value_parser = parse_system)]
    system: Option<System>,
    /// Restrict to one actuator variant
    #[arg(long, value_parser = parse_actuator)]
    actuator: Option<ActuatorKind>,
    /// Report path (default: <out-dir>/gradcheck.json)
    #[arg(long, short)]
    output: Option<PathBuf>,
}

pub fn gradcheck(ctx: &Ctx, a: GradcheckArgs) -> Result<(), CliError> {
    if a.states == 0 || !(a.tolerance > 0.0) {
        return Err(CliError::Usage("--states and --tolerance must be positive".into()));
    }
    let cfg = GradcheckConfig { states: a.states, seed: a.seed, tolerance: a.tolerance, ..Default::default() };
    let systems: Vec<System> = a.system.map_or(System::ALL.to_vec(), |s| vec![s]);
    let kinds: Vec<ActuatorKind> = a.actuator.map_or(ActuatorKind::ALL.to_vec(), |k| vec![k]);
    let mut reports = Vec::new();
    for s in &systems {
        for k in &kinds {
            let r = check_case(*s, *k, &cfg, ctx.exec);
            println!(
                "{:<9} {:<12} params {:>5}  states {:>4}  max rel err {:.2e}  {}",
                s.name(),
                k.name(),
                r.n_params,
                r.n_states,
                r.max_rel_err,
                if r.passed() { "PASS" } else { "FAIL" }
            );
            reports.push(r);
        }
    }
    let path = a.output.unwrap_or_else(|| ctx.out_dir.join("gradcheck.json"));
    let mut manifest = RunManifest::start("gradcheck", None, &cfg);
    manifest.write(&path, &to_pretty(&reports))?;
    manifest.finish(&manifest_path(&path))?;
    let failed = reports.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} of {} gradient cases failed", reports.len())));
    }
    Ok(())
}
