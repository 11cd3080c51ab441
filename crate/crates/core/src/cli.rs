//! Command-line front end: one TOML run config drives scene generation,
//! season downscaling, evaluation and the iteration study.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::ClusterConfig;
use crate::error::{Error, Result};
use crate::evaluation::{emit_report, evaluate_season, rmse_sd, DayComparison};
use crate::grid::{NoiseSpec, TB};
use crate::pipeline::{exit_code, iteration_study, run_season, stream_seed, DayInput, DownscaleResult, PipelineConfig};
use crate::regression::{KernelKind, RegressionParams};
use crate::scene::{generate_scene, most_heterogeneous_day, CropSeason, RainEvent, Scene, SceneConfig, TauOmegaParams};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const OUT_ENV: &str = "SRRM_OUT";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ITERATION_STUDY_FILE: &str = "iteration_study.csv";
/// Clustering iterations between iteration-study checkpoints.
pub const CHECKPOINT_EVERY: usize = 10;
const CONFIDENCE: f64 = 0.95;

const NOISE_STREAM: u64 = 1;
const PIPELINE_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSection {
    pub rows: usize,
    pub cols: usize,
    pub season_days: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell_size: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subpixel_factor: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_fields: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_lst: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lst_amplitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lst_noise: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_sm: Option<f64>,
    /// Replaces the default three-crop calendar.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_calendar: Option<Vec<CropSeason>>,
    /// Replaces the seeded rain schedule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rain_events: Option<Vec<RainEvent>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forward: Option<TauOmegaParams>,
}

impl SceneSection {
    pub fn resolve(&self, seed: u64) -> SceneConfig {
        let mut s = SceneConfig::three_crop(self.rows, self.cols, self.season_days, seed);
        if let Some(v) = self.cell_size {
            s.cell_size = v;
        }
        if let Some(v) = self.subpixel_factor {
            s.subpixel_factor = v;
        }
        if let Some(v) = self.n_fields {
            s.n_fields = v;
        }
        if let Some(v) = self.base_lst {
            s.base_lst = v;
        }
        if let Some(v) = self.lst_amplitude {
            s.lst_amplitude = v;
        }
        if let Some(v) = self.lst_noise {
            s.lst_noise = v;
        }
        if let Some(v) = self.initial_sm {
            s.initial_sm = v;
        }
        if let Some(v) = &self.crop_calendar {
            s.crop_calendar = v.clone();
        }
        if let Some(v) = &self.rain_events {
            s.rain_events = v.clone();
        }
        if let Some(v) = self.forward {
            s.forward = v;
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub sd_lst: f64,
    pub sd_ppt: f64,
    pub sd_lai: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        let d = NoiseSpec::default();
        Self {
            sd_lst: d.sd_lst,
            sd_ppt: d.sd_ppt,
            sd_lai: d.sd_lai,
        }
    }
}

/// Optimizer settings; K and the entropy weight come from the pipeline's
/// candidate lists.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel_width: Option<f64>,
    pub max_iterations: usize,
    pub step_size: f64,
    pub step_decay: f64,
    pub batch_size: usize,
    pub tol: f64,
    pub patience: usize,
    pub membership_floor: f64,
    pub init_concentration: f64,
}

impl Default for ClusterSection {
    fn default() -> Self {
        let d = ClusterConfig::default();
        Self {
            kernel_width: d.kernel_width,
            max_iterations: d.max_iterations,
            step_size: d.step_size,
            step_decay: d.step_decay,
            batch_size: d.batch_size,
            tol: d.tol,
            patience: d.patience,
            membership_floor: d.membership_floor,
            init_concentration: d.init_concentration,
        }
    }
}

/// Kernel settings; the ridge weight comes from the candidate list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionSection {
    pub kernel: KernelKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel_width: Option<f64>,
    pub standardize: bool,
}

impl Default for RegressionSection {
    fn default() -> Self {
        let d = RegressionParams::default();
        Self {
            kernel: d.kernel,
            kernel_width: d.kernel_width,
            standardize: d.standardize,
        }
    }
}

/// Contents of a run config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub scene: SceneSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub cluster: ClusterSection,
    #[serde(default)]
    pub regression: RegressionSection,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub cadence: Option<usize>,
}

/// Fully resolved settings of a run; every seed is derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub seed: u64,
    pub scene: SceneConfig,
    pub noise: NoiseSpec,
    pub pipeline: PipelineConfig,
    pub cluster: ClusterConfig,
    pub regression: RegressionParams,
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(one_line(e.message())))
    }

    pub fn resolve(&self, overrides: Overrides) -> Result<Resolved> {
        let seed = overrides.seed.unwrap_or(self.seed);
        let scene = self.scene.resolve(seed);
        scene.validate().map_err(|e| Error::Config(format!("scene: {e}")))?;
        let noise = NoiseSpec {
            sd_lst: self.noise.sd_lst,
            sd_ppt: self.noise.sd_ppt,
            sd_lai: self.noise.sd_lai,
            seed: stream_seed(seed, NOISE_STREAM),
        };
        noise.validate().map_err(|e| Error::Config(format!("noise: {e}")))?;
        let c = &self.cluster;
        let cluster = ClusterConfig {
            kernel_width: c.kernel_width,
            max_iterations: c.max_iterations,
            step_size: c.step_size,
            step_decay: c.step_decay,
            batch_size: c.batch_size,
            tol: c.tol,
            patience: c.patience,
            membership_floor: c.membership_floor,
            init_concentration: c.init_concentration,
            ..ClusterConfig::default()
        };
        let regression = RegressionParams {
            kernel: self.regression.kernel,
            kernel_width: self.regression.kernel_width,
            standardize: self.regression.standardize,
            ..RegressionParams::default()
        };
        if let Some(w) = regression.kernel_width {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("regression: kernel_width must be > 0, got {w}")));
            }
        }
        let mut pipeline = self.pipeline.clone();
        pipeline.seed = stream_seed(seed, PIPELINE_STREAM);
        if let Some(c) = overrides.cadence {
            pipeline.cadence = c;
        }
        pipeline.cluster = cluster.clone();
        pipeline.regression = regression;
        pipeline.validate()?;
        if pipeline.scale_factor > scene.rows.min(scene.cols) {
            return Err(Error::Config(format!(
                "pipeline: scale_factor {} exceeds the {}x{} grid",
                pipeline.scale_factor, scene.rows, scene.cols
            )));
        }
        Ok(Resolved {
            seed,
            scene,
            noise,
            pipeline,
            cluster,
            regression,
        })
    }
}

/// Reads a config file and returns its text and parsed contents.
pub fn load_config(path: &Path) -> Result<(String, RunConfig)> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let config = RunConfig::parse(&text)?;
    Ok((text, config))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayStatus {
    pub day: usize,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Record of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_path: String,
    pub config_sha256: String,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub stages: BTreeMap<String, String>,
    #[serde(default)]
    pub parameters: BTreeMap<String, String>,
    /// Emitted artifacts relative to the output directory.
    pub outputs: Vec<String>,
    #[serde(default)]
    pub days: Vec<DayStatus>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    fn new(command: &str, config_path: &Path, config_text: &str, seed: u64) -> Self {
        let stages = ["scene", "grid", "clustering", "regression", "pipeline", "evaluation"]
            .iter()
            .map(|s| (s.to_string(), VERSION.to_string()))
            .collect();
        Self {
            command: command.into(),
            version: VERSION.into(),
            config_path: config_path.display().to_string(),
            config_sha256: sha256_hex(config_text.as_bytes()),
            seed,
            started_unix: unix_now(),
            finished_unix: 0,
            stages,
            parameters: BTreeMap::new(),
            outputs: Vec::new(),
            days: Vec::new(),
        }
    }

    fn add_outputs(&mut self, root: &Path, paths: &[PathBuf]) {
        for p in paths {
            let rel = p.strip_prefix(root).unwrap_or(p);
            self.outputs.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }

    fn write(mut self, root: &Path) -> Result<PathBuf> {
        self.finished_unix = unix_now();
        self.outputs.push(MANIFEST_FILE.into());
        self.outputs.sort();
        let path = root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self).map_err(|e| Error::Domain(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[derive(Debug, Parser)]
#[command(name = "srrm", version, about = "Downscale coarse brightness-temperature grids with fine-scale auxiliary fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Run config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct OutArgs {
    /// Output directory.
    #[arg(long, env = OUT_ENV)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SceneArgs {
    /// Read the scene series from this directory instead of generating it.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Worker threads for day-level parallelism.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic scene series.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Downscale every processed day and write the evaluation report.
    Downscale {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        #[command(flatten)]
        scene: SceneArgs,
        /// Process every n-th day.
        #[arg(long)]
        cadence: Option<usize>,
    },
    /// RMSE of the fused estimate at clustering-iterate checkpoints on one day.
    Iterstudy {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        #[command(flatten)]
        scene: SceneArgs,
        /// Day to study; defaults to the most heterogeneous day.
        #[arg(long)]
        day: Option<usize>,
    },
    /// Check a config and print it with all defaults resolved.
    Validate {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", one_line(&e.to_string()));
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Generate { config, out } => cmd_generate(&config.config, &out.out, config.seed),
        Command::Downscale {
            config,
            out,
            scene,
            cadence,
        } => cmd_downscale(
            &config.config,
            scene.scene.as_deref(),
            &out.out,
            Overrides { seed: config.seed, cadence },
            scene.jobs,
        ),
        Command::Iterstudy { config, out, scene, day } => cmd_iterstudy(
            &config.config,
            scene.scene.as_deref(),
            day,
            &out.out,
            Overrides { seed: config.seed, cadence: None },
            scene.jobs,
        ),
        Command::Validate { config } => {
            let text = cmd_validate(&config.config, Overrides { seed: config.seed, cadence: None })?;
            print!("{text}");
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    if jobs == 0 {
        return Err(Error::Config("--jobs must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} worker threads: {e}")))
}

fn load_scene(resolved: &Resolved, scene_dir: Option<&Path>) -> Result<Scene> {
    match scene_dir {
        Some(dir) => Scene::read_dir(dir),
        None => generate_scene(&resolved.scene),
    }
}

/// Parses and resolves a config; returns it as TOML with every default
/// filled in.
pub fn cmd_validate(config_path: &Path, overrides: Overrides) -> Result<String> {
    let (_, config) = load_config(config_path)?;
    let resolved = config.resolve(overrides)?;
    toml::to_string_pretty(&resolved).map_err(|e| Error::Config(one_line(&e.to_string())))
}

pub fn cmd_generate(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let (text, config) = load_config(config_path)?;
    let resolved = config.resolve(Overrides { seed, cadence: None })?;
    let scene = generate_scene(&resolved.scene)?;
    create_dir(out)?;
    let written = scene.write_dir(out.join("scene"))?;
    let mut manifest = RunManifest::new("generate", config_path, &text, resolved.seed);
    manifest.add_outputs(out, &written);
    manifest.days = (1..=scene.len())
        .map(|day| DayStatus {
            day,
            status: "ok".into(),
            error: None,
        })
        .collect();
    manifest.write(out)?;
    Ok(())
}

pub fn cmd_downscale(
    config_path: &Path,
    scene_dir: Option<&Path>,
    out: &Path,
    overrides: Overrides,
    jobs: usize,
) -> Result<()> {
    let (text, config) = load_config(config_path)?;
    let resolved = config.resolve(overrides)?;
    let pool = thread_pool(jobs)?;
    let scene = load_scene(&resolved, scene_dir)?;
    let season = pool.install(|| run_season(&scene, &resolved.pipeline, &resolved.noise))?;

    create_dir(out)?;
    let mut manifest = RunManifest::new("downscale", config_path, &text, resolved.seed);
    manifest.parameters.insert("jobs".into(), jobs.to_string());
    manifest.parameters.insert("cadence".into(), resolved.pipeline.cadence.to_string());
    if let Some(dir) = scene_dir {
        manifest.parameters.insert("scene".into(), dir.display().to_string());
    }
    let days_dir = out.join("days");
    for r in &season.results {
        let written = r.write_dir(days_dir.join(DownscaleResult::dir_name(r.day)))?;
        manifest.add_outputs(out, &written);
        manifest.days.push(DayStatus {
            day: r.day,
            status: "ok".into(),
            error: None,
        });
    }
    for f in &season.failures {
        eprintln!("warning: day {} failed: {}", f.day, one_line(&f.message));
        manifest.days.push(DayStatus {
            day: f.day,
            status: "failed".into(),
            error: Some(one_line(&f.message)),
        });
    }
    manifest.days.sort_by_key(|d| d.day);

    if season.results.is_empty() {
        manifest.write(out)?;
        let first = &season.failures[0];
        let message = format!("every processed day failed; day {}: {}", first.day, first.message);
        return Err(match first.exit_code {
            2 => Error::Config(message),
            3 => Error::Domain(message),
            _ => Error::Selection(message),
        });
    }

    let vegetated = scene.vegetated_days()?;
    let last_vegetated = scene.last_vegetated_day()?;
    let comparisons: Vec<DayComparison> = season
        .results
        .iter()
        .map(|r| {
            Ok(DayComparison {
                day: r.day,
                truth: scene.day(r.day).ok_or_else(|| Error::Domain(format!("day {} missing", r.day)))?,
                estimate: &r.estimate,
                vegetated: vegetated[r.day - 1],
                after_harvest: r.day > last_vegetated,
            })
        })
        .collect::<Result<_>>()?;
    let report = evaluate_season(&comparisons, CONFIDENCE)?;
    let written = emit_report(&report, out.join("report"))?;
    manifest.add_outputs(out, &written);
    manifest.write(out)?;
    Ok(())
}

pub fn cmd_iterstudy(
    config_path: &Path,
    scene_dir: Option<&Path>,
    day: Option<usize>,
    out: &Path,
    overrides: Overrides,
    jobs: usize,
) -> Result<()> {
    let (text, config) = load_config(config_path)?;
    let resolved = config.resolve(overrides)?;
    let pool = thread_pool(jobs)?;
    let scene = load_scene(&resolved, scene_dir)?;
    let day = match day {
        Some(d) => d,
        None => most_heterogeneous_day(&scene)?,
    };
    let truth = scene
        .day(day)
        .ok_or_else(|| Error::Config(format!("--day {day} outside the scene's 1..={} days", scene.len())))?;
    let input = DayInput::from_truth(day, truth, &resolved.pipeline, &resolved.noise)?;
    let (selection, points) = pool.install(|| iteration_study(&input, &resolved.pipeline, CHECKPOINT_EVERY))?;
    let truth_tb = truth.require(TB)?;

    create_dir(out)?;
    let path = out.join(ITERATION_STUDY_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Domain(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| Error::Domain(format!("{}: {e}", path.display()));
    w.write_record(["iteration", "cost", "rmse", "sd", "bias", "mae"]).map_err(csv_err)?;
    for p in &points {
        let s = rmse_sd(truth_tb, &p.estimate, None)?;
        w.write_record([
            p.iteration.to_string(),
            p.cost.to_string(),
            s.rmse.to_string(),
            s.sd.to_string(),
            s.bias.to_string(),
            s.mae.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let mut manifest = RunManifest::new("iterstudy", config_path, &text, resolved.seed);
    manifest.parameters.insert("day".into(), day.to_string());
    manifest.parameters.insert("k".into(), selection.k.to_string());
    manifest.parameters.insert("entropy_weight".into(), selection.entropy_weight.to_string());
    manifest.parameters.insert("ridge".into(), selection.ridge.to_string());
    manifest.parameters.insert("checkpoint_every".into(), CHECKPOINT_EVERY.to_string());
    manifest.add_outputs(out, &[path]);
    manifest.days.push(DayStatus {
        day,
        status: "ok".into(),
        error: None,
    });
    manifest.write(out)?;
    Ok(())
}
