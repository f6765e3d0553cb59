//! `eqa` command-line driver.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use eqa_core::confidence::{CalibrationModel, OnEmpty};
use eqa_core::harness::{
    self, Dataset, ExploreConfig, OracleMode, Policy, RunConfig, StopRule, StoppingConfig, StoppingKind,
};
use eqa_core::oracle::{HttpOracle, SyntheticOracleConfig, ORACLE_URL_ENV};
use eqa_core::scenario::{generate_dataset, save_scenarios, save_scene, GeneratorConfig};

#[derive(Parser)]
#[command(name = "eqa", version, about = "Semantic exploration with calibrated stopping for embodied QA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate procedural scenes and scenarios.
    Generate(GenerateArgs),
    /// Run episodes and write JSON-lines logs.
    Run(RunArgs),
    /// Calibrate the conformal stopping rule.
    Calibrate(CalibrateArgs),
    /// Evaluate stopping rules over a test split and emit metrics.
    Eval(EvalArgs),
    /// Lint a dataset.
    Validate(DataArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    num_scenes: usize,
    #[arg(long, default_value_t = 5)]
    questions_per_scene: u32,
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct DataArgs {
    #[arg(long, default_value = "data/scenes")]
    scenes: PathBuf,
    #[arg(long, default_value = "data/scenarios.jsonl")]
    scenarios: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    SemanticFbe,
    Fbe,
}

#[derive(Clone, Copy, ValueEnum)]
enum StoppingArg {
    Cp,
    Entropy,
    Relevance,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleArg {
    Synthetic,
    Http,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnEmptyArg {
    Stop,
    Continue,
}

#[derive(Args)]
struct ExploreArgs {
    #[arg(long, value_enum, default_value = "semantic-fbe")]
    policy: PolicyArg,
    #[arg(long, value_enum, default_value = "synthetic")]
    oracle: OracleArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, env = ORACLE_URL_ENV)]
    oracle_url: Option<String>,
    /// Per-request timeout for the HTTP oracle, in seconds.
    #[arg(long, default_value_t = 30.0)]
    timeout: f64,
    #[arg(long, default_value_t = 3)]
    retries: u32,
    /// JSON file overriding synthetic oracle parameters.
    #[arg(long)]
    oracle_config: Option<PathBuf>,
}

impl ExploreArgs {
    fn config(&self) -> Result<ExploreConfig> {
        let synthetic = match &self.oracle_config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => SyntheticOracleConfig::default(),
        };
        Ok(ExploreConfig {
            policy: match self.policy {
                PolicyArg::SemanticFbe => Policy::SemanticFbe,
                PolicyArg::Fbe => Policy::Fbe,
            },
            oracle_mode: match self.oracle {
                OracleArg::Synthetic => OracleMode::Synthetic,
                OracleArg::Http => OracleMode::Http,
            },
            seed: self.seed,
            synthetic,
            ..ExploreConfig::default()
        })
    }

    fn http(&self) -> Result<Option<HttpOracle>> {
        if !matches!(self.oracle, OracleArg::Http) {
            return Ok(None);
        }
        let Some(url) = &self.oracle_url else {
            bail!("--oracle http needs --oracle-url or {ORACLE_URL_ENV}");
        };
        Ok(Some(HttpOracle::new(url.clone(), Duration::from_secs_f64(self.timeout), self.retries)?))
    }
}

#[derive(Args)]
struct StopArgs {
    #[arg(long, value_enum, default_value = "cp")]
    stopping: StoppingArg,
    #[arg(long, default_value_t = 0.2)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.1)]
    entropy_thresh: f64,
    #[arg(long, default_value_t = 0.4)]
    rel_thresh: f64,
    #[arg(long, value_enum, default_value = "stop")]
    on_empty: OnEmptyArg,
}

impl StopArgs {
    fn config(&self) -> StoppingConfig {
        StoppingConfig {
            kind: match self.stopping {
                StoppingArg::Cp => StoppingKind::Cp,
                StoppingArg::Entropy => StoppingKind::Entropy,
                StoppingArg::Relevance => StoppingKind::Relevance,
                StoppingArg::None => StoppingKind::None,
            },
            epsilon: self.epsilon,
            entropy_thresh: self.entropy_thresh,
            rel_thresh: self.rel_thresh,
            on_empty: match self.on_empty {
                OnEmptyArg::Stop => OnEmpty::Stop,
                OnEmptyArg::Continue => OnEmpty::Continue,
            },
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    explore: ExploreArgs,
    #[command(flatten)]
    stop: StopArgs,
    /// Calibration model JSON (required for --stopping cp).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Scenario indices to run; all when omitted.
    #[arg(long, value_delimiter = ',')]
    index: Vec<usize>,
    #[arg(long, default_value = "episodes.jsonl")]
    log: PathBuf,
    /// Write per-step map snapshots to this directory.
    #[arg(long)]
    dump_maps: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    explore: ExploreArgs,
    #[arg(long, default_value_t = 0.2)]
    epsilon: f64,
    #[arg(long, default_value_t = 300)]
    cal_size: usize,
    #[arg(long, default_value_t = 200)]
    test_size: usize,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, default_value = "model.json")]
    out: PathBuf,
    /// Also write the calibration episode logs.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    explore: ExploreArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [0.2])]
    epsilons: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.1])]
    entropy_threshs: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.4])]
    rel_threshs: Vec<f64>,
    #[arg(long, value_enum, default_value = "stop")]
    on_empty: OnEmptyArg,
    #[arg(long, default_value_t = 300)]
    cal_size: usize,
    #[arg(long, default_value_t = 200)]
    test_size: usize,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, default_value = "metrics.csv")]
    csv: PathBuf,
    #[arg(long)]
    svg: Option<PathBuf>,
    /// Directory for per-config test logs.
    #[arg(long)]
    logs: Option<PathBuf>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Generate(a) => generate(a),
        Command::Run(a) => run(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Eval(a) => eval(a),
        Command::Validate(a) => validate(a),
    }
}

fn load(data: &DataArgs) -> Result<Dataset> {
    let ds = Dataset::load(&data.scenes, &data.scenarios)
        .with_context(|| format!("loading {} and {}", data.scenes.display(), data.scenarios.display()))?;
    log::info!("loaded {} scenes, {} scenarios", ds.scenes.len(), ds.len());
    Ok(ds)
}

fn generate(a: GenerateArgs) -> Result<()> {
    let cfg = GeneratorConfig {
        questions_per_scene: a.questions_per_scene,
        ..GeneratorConfig::default()
    };
    let (scenes, scenarios) = generate_dataset(a.seed, a.num_scenes, &cfg)?;
    let scene_dir = a.out.join("scenes");
    fs::create_dir_all(&scene_dir).with_context(|| format!("creating {}", scene_dir.display()))?;
    for scene in &scenes {
        save_scene(&scene_dir.join(format!("{}.json", scene.id)), scene)?;
    }
    save_scenarios(&a.out.join("scenarios.jsonl"), &scenarios)?;
    log::info!("wrote {} scenes and {} scenarios to {}", scenes.len(), scenarios.len(), a.out.display());
    Ok(())
}

fn read_model(path: &Path) -> Result<CalibrationModel> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn run(a: RunArgs) -> Result<()> {
    let ds = load(&a.data)?;
    let explore = a.explore.config()?;
    let http = a.explore.http()?;
    let model = a.model.as_deref().map(read_model).transpose()?;
    let rule = StopRule::from_config(&a.stop.config(), model.as_ref())?;
    let indices: Vec<usize> = if a.index.is_empty() { (0..ds.len()).collect() } else { a.index.clone() };
    if let Some(&bad) = indices.iter().find(|&&i| i >= ds.len()) {
        bail!("index {bad} out of range (dataset has {} scenarios)", ds.len());
    }
    if let Some(dir) = &a.dump_maps {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut logs = Vec::with_capacity(indices.len());
    for i in indices {
        let log = harness::run_episode_with_rule(&ds, i, &explore, &rule, "run", http.as_ref(), a.dump_maps.as_deref())?;
        log::info!(
            "{}: answer {} (truth {}), stopped at {}/{} ({:?})",
            log.scenario_id,
            log.final_answer,
            log.truth,
            log.stop_step,
            log.max_steps,
            log.stop_reason
        );
        logs.push(log);
    }
    let successes = logs.iter().filter(|l| l.success).count();
    println!("success {successes}/{}", logs.len());
    harness::write_logs(&a.log, &logs)?;
    Ok(())
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let ds = load(&a.data)?;
    let (cal, _) = harness::split_indices(ds.len(), a.cal_size, a.test_size, a.split_seed)?;
    let config = RunConfig {
        config_id: "calibration".into(),
        explore: a.explore.config()?,
        stopping: StoppingConfig {
            epsilon: a.epsilon,
            ..StoppingConfig::default()
        },
        cal_size: a.cal_size,
        test_size: a.test_size,
        split_seed: a.split_seed,
    };
    let http = a.explore.http()?;
    let (model, logs) = harness::run_calibration(&ds, &cal, &config, http.as_ref())?;
    fs::write(&a.out, serde_json::to_string_pretty(&model)?).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(path) = &a.log {
        harness::write_logs(path, &logs)?;
    }
    println!(
        "n_cal={} epsilon={} q_hat={}",
        model.n_cal,
        model.epsilon,
        model.q_hat.map_or("inf".to_string(), |q| format!("{q:.6}"))
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ds = load(&a.data)?;
    let explore = a.explore.config()?;
    let http = a.explore.http()?;
    let on_empty = match a.on_empty {
        OnEmptyArg::Stop => OnEmpty::Stop,
        OnEmptyArg::Continue => OnEmpty::Continue,
    };
    let base = RunConfig {
        config_id: String::new(),
        explore,
        stopping: StoppingConfig {
            on_empty,
            ..StoppingConfig::default()
        },
        cal_size: a.cal_size,
        test_size: a.test_size,
        split_seed: a.split_seed,
    };
    let with = |id: String, kind: StoppingKind, f: &dyn Fn(&mut StoppingConfig)| {
        let mut c = base.clone();
        c.config_id = id;
        c.stopping.kind = kind;
        f(&mut c.stopping);
        c
    };
    let mut configs = Vec::new();
    for &e in &a.epsilons {
        configs.push(with(format!("cp_eps{e}"), StoppingKind::Cp, &|s| s.epsilon = e));
    }
    for &t in &a.entropy_threshs {
        configs.push(with(format!("entropy_{t}"), StoppingKind::Entropy, &|s| s.entropy_thresh = t));
    }
    for &t in &a.rel_threshs {
        configs.push(with(format!("relevance_{t}"), StoppingKind::Relevance, &|s| s.rel_thresh = t));
    }
    configs.push(with("no_stop".into(), StoppingKind::None, &|_| {}));

    let result = harness::evaluate(&ds, &configs, http.as_ref())?;
    let file = fs::File::create(&a.csv).with_context(|| format!("creating {}", a.csv.display()))?;
    harness::write_metrics_csv(file, &result.rows)?;
    if let Some(svg) = &a.svg {
        fs::write(svg, harness::metrics_svg(&result.rows)).with_context(|| format!("writing {}", svg.display()))?;
    }
    if let Some(dir) = &a.logs {
        fs::create_dir_all(dir)?;
        for (id, logs) in &result.test_logs {
            harness::write_logs(&dir.join(format!("{id}.jsonl")), logs)?;
        }
    }
    for row in result.rows.iter().filter(|r| r.budget == 1.0) {
        println!(
            "{:<20} success {:.3}  mean stop {:.3}  coverage {}",
            row.config_id,
            row.success_rate,
            row.mean_norm_stop,
            row.coverage.map_or("-".into(), |c| format!("{c:.3}"))
        );
    }
    Ok(())
}

fn validate(a: DataArgs) -> Result<()> {
    let ds = load(&a)?;
    let issues = harness::lint_dataset(&ds);
    for issue in &issues {
        println!("{issue}");
    }
    if !issues.is_empty() {
        bail!("{} issue(s) found", issues.len());
    }
    println!("ok: {} scenes, {} scenarios", ds.scenes.len(), ds.len());
    Ok(())
}
