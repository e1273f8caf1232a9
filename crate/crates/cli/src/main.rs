//! `mvalign`: generate synthetic data, extract features, train the
//! cross-view refinement, score, evaluate and run ablation sweeps.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mvalign_core::features::{read_features_meta, ExtractorKind, ExtractorSpec};
use mvalign_core::pipeline::{
    self, export_features, guard_output, load_data, read_categories, read_config, read_scores, run_and_write,
    run_sweep, write_curves, write_reports, write_scores, write_snapshot, write_training, ExperimentConfig,
    PipelineError, SweepAxis, CONFIG_FILE, EVAL_FILE, PARAMS_DIR,
};
use mvalign_core::refine::ProjectionParams;
use mvalign_core::scoring::FusionMode;
use mvalign_core::synth::{generate_dataset, DatasetPlan, DefectKind, DefectPlan, SceneSpec, Shape};
use mvalign_core::training::OptimizerKind;
use mvalign_core::{load_split, ViewSet};

#[derive(Parser)]
#[command(name = "mvalign", version, about = "Multi-view multimodal anomaly detection")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log verbosity; repeat for more.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-view dataset.
    Generate(GenerateArgs),
    /// Write features of every sample in the precomputed layout.
    Extract(ExtractArgs),
    /// Train projections on the normal training split.
    Train(RunArgs),
    /// Build the memory bank and score the test split of a trained run.
    Score(ScoreArgs),
    /// Evaluate scores written by `score`.
    Eval(EvalArgs),
    /// Train, score and evaluate in one go.
    Run(RunArgs),
    /// Ablation table over k, N or the loss terms.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SceneKind {
    Sphere,
    Cylinder,
    Box,
}

#[derive(Clone, Copy, ValueEnum)]
enum DefectArg {
    TextureBlotch,
    GeometricDent,
    GeometricBump,
}

impl From<DefectArg> for DefectKind {
    fn from(d: DefectArg) -> Self {
        match d {
            DefectArg::TextureBlotch => DefectKind::TextureBlotch,
            DefectArg::GeometricDent => DefectKind::GeometricDent,
            DefectArg::GeometricBump => DefectKind::GeometricBump,
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "sphere")]
    scene: SceneKind,
    #[arg(long, default_value_t = 12)]
    views: usize,
    /// Image height and width in pixels.
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    /// Normal training samples.
    #[arg(long, default_value_t = 1)]
    normal: usize,
    /// Normal test samples (defaults to the anomalous count).
    #[arg(long)]
    test_normal: Option<usize>,
    #[arg(long, default_value_t = 6)]
    anomalous: usize,
    #[arg(long, value_enum, value_delimiter = ',')]
    defects: Vec<DefectArg>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ExtractArgs {
    /// Dataset directory with `train/` and `test/`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    patch_px: usize,
    #[arg(long, default_value_t = 0)]
    extractor_seed: u64,
    #[arg(long)]
    force: bool,
}

/// Config file plus flag overrides shared by the experiment commands.
#[derive(Args, Clone, Default)]
struct Overrides {
    /// Experiment config (JSON); flags below take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Precomputed feature root; dims and grid come from its features_meta.json.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Toy extractor output dim for both modalities.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    patch_px: Option<usize>,
    #[arg(long)]
    extractor_seed: Option<u64>,
    /// Candidates kept per adjacent view.
    #[arg(long)]
    k: Option<usize>,
    /// Neighboring views on each side used for geometric alignment (N).
    #[arg(long = "n-views", alias = "neighbors")]
    n_views: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lambda_sspa: Option<f64>,
    #[arg(long)]
    lambda_mvga: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_parser = ["adam", "gd"])]
    optimizer: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Drop the per-view alignment term.
    #[arg(long)]
    no_view: bool,
    /// Drop the differential alignment term.
    #[arg(long)]
    no_diff: bool,
    #[arg(long)]
    shared_params: bool,
    #[arg(long)]
    residual: bool,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    coreset_ratio: Option<f64>,
    /// Descriptor layouts to score: fused, 2d, 3d.
    #[arg(long, value_delimiter = ',', value_parser = parse_mode)]
    modes: Vec<FusionMode>,
    /// Also write PGM heatmaps.
    #[arg(long)]
    heatmaps: bool,
    /// Score with identity projections (no training).
    #[arg(long)]
    identity: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// k, n or losses.
    #[arg(long, value_parser = |s: &str| s.parse::<SweepAxis>())]
    axis: SweepAxis,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

fn parse_mode(s: &str) -> Result<FusionMode, String> {
    FusionMode::ALL
        .into_iter()
        .find(|m| m.tag() == s)
        .ok_or_else(|| format!("unknown mode {s:?}; expected fused, 2d or 3d"))
}

/// Bad invocation that clap cannot catch.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn resolve(base: ExperimentConfig, o: &Overrides) -> Result<ExperimentConfig> {
    let mut c = match &o.config {
        Some(path) => read_config(path).map_err(|e| Usage(format!("config {}: {e}", path.display())))?,
        None => base,
    };
    if let Some(d) = &o.data {
        c.dataset = d.clone();
    }
    if let Some(root) = &o.features {
        let meta = read_features_meta(root)?;
        c.extractor = ExtractorSpec {
            kind: ExtractorKind::Precomputed { root: root.clone() },
            d_2d: meta.d_2d,
            d_3d: meta.d_3d,
            patch_px: meta.patch_px,
        };
    }
    if let Some(d) = o.dim {
        c.extractor.d_2d = d;
        c.extractor.d_3d = d;
    }
    if let Some(p) = o.patch_px {
        c.extractor.patch_px = p;
    }
    if let Some(s) = o.extractor_seed {
        match &mut c.extractor.kind {
            ExtractorKind::Toy { seed } => *seed = s,
            ExtractorKind::Precomputed { .. } => {
                return Err(Usage("--extractor-seed only applies to the toy extractor".into()).into())
            }
        }
    }
    let t = &mut c.train;
    if let Some(v) = o.k {
        t.k = v;
    }
    if let Some(v) = o.n_views {
        t.neighbors = v;
    }
    if let Some(v) = o.alpha {
        t.alpha = v;
    }
    if let Some(v) = o.lambda_sspa {
        t.lambda_sspa = v;
    }
    if let Some(v) = o.lambda_mvga {
        t.lambda_mvga = v;
    }
    if let Some(v) = o.steps {
        t.steps = v;
    }
    if let Some(v) = o.lr {
        t.lr = v;
    }
    if let Some(v) = &o.optimizer {
        t.optimizer = if v == "gd" { OptimizerKind::Gd } else { OptimizerKind::Adam };
    }
    if let Some(v) = o.seed {
        t.seed = v;
    }
    if o.no_view {
        t.terms.view = false;
    }
    if o.no_diff {
        t.terms.diff = false;
    }
    t.shared_params |= o.shared_params;
    t.residual |= o.residual;
    let s = &mut c.scoring;
    if let Some(v) = o.sigma {
        s.sigma = v;
    }
    if let Some(v) = o.coreset_ratio {
        s.coreset_ratio = v;
    }
    if !o.modes.is_empty() {
        s.modes = o.modes.clone();
    }
    s.heatmaps |= o.heatmaps;
    s.identity_params |= o.identity;
    c.validate()?;
    if c.train.lambda_sspa == 0.0 && c.train.lambda_mvga == 0.0 && !c.scoring.identity_params {
        log::warn!("both loss weights are zero; training leaves the initial parameters unchanged");
    }
    Ok(c)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    guard_output(&a.out, a.force)?;
    let mut scene = SceneSpec::sphere(a.views, a.resolution);
    scene.shape = match a.scene {
        SceneKind::Sphere => Shape::Sphere { radius: 1.0 },
        SceneKind::Cylinder => Shape::Cylinder { radius: 0.7, height: 1.4 },
        SceneKind::Box => Shape::Box {
            half_extents: [0.6, 0.6, 0.6],
        },
    };
    let plan = DatasetPlan {
        n_train: a.normal,
        n_test_normal: a.test_normal.unwrap_or(a.anomalous),
        n_anomalous: a.anomalous,
    };
    let mut defects = DefectPlan::default();
    if !a.defects.is_empty() {
        defects.kinds = a.defects.iter().map(|&d| d.into()).collect();
    }
    for stale in ["train", "test"] {
        let p = a.out.join(stale);
        if p.exists() {
            std::fs::remove_dir_all(&p).with_context(|| format!("clearing {}", p.display()))?;
        }
    }
    generate_dataset(&scene, &plan, &defects, &a.out, a.seed).map_err(PipelineError::from)?;
    log::info!(
        "wrote {} training and {} test samples to {}",
        plan.n_train,
        plan.n_test_normal + plan.n_anomalous,
        a.out.display()
    );
    Ok(())
}

fn cmd_extract(a: ExtractArgs) -> Result<()> {
    guard_output(&a.out, a.force)?;
    let spec = ExtractorSpec::toy(a.dim, a.patch_px, a.extractor_seed);
    let n = export_features(&a.data, &spec, &a.out)?;
    log::info!("wrote features for {n} samples to {}", a.out.display());
    Ok(())
}

fn cmd_train(a: RunArgs) -> Result<()> {
    guard_output(&a.out, a.force)?;
    let mut config = resolve(ExperimentConfig::default(), &a.overrides)?;
    config.output = a.out.clone();
    let data = load_data(&config.dataset, &config.extractor)?;
    write_snapshot(&a.out, CONFIG_FILE, &config)?;
    let (_, summary) = write_training(&a.out, &data, &config.train)?;
    print_json(&summary)
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    let snapshot = a.run.join(CONFIG_FILE);
    let base: ExperimentConfig = if snapshot.exists() {
        read_config(&snapshot)?
    } else {
        ExperimentConfig::default()
    };
    let mut config = resolve(base, &a.overrides)?;
    config.output = a.run.clone();
    for mode in &config.scoring.modes {
        guard_output(&a.run.join(format!("scores_{}", mode.tag())), a.force)?;
    }
    let data = load_data(&config.dataset, &config.extractor)?;
    let params = if config.scoring.identity_params {
        pipeline::identity_params(&data.train[0].features, &config.train)?
    } else {
        let dir = a.run.join(PARAMS_DIR);
        if !dir.exists() {
            return Err(Usage(format!("{} has no trained parameters; run `train` first or pass --identity", a.run.display())).into());
        }
        ProjectionParams::load(&dir).map_err(PipelineError::from)?
    };
    let mut results = Vec::new();
    for &mode in &config.scoring.modes {
        let (bank, scored) = pipeline::score_all(&data, &params, &config, mode)?;
        results.push((mode, bank, scored));
    }
    write_scores(&a.run, &results, config.scoring.heatmaps)?;
    write_snapshot(&a.run, CONFIG_FILE, &config)?;
    let summary: Vec<_> = results
        .iter()
        .map(|(m, _, r)| (m.tag(), r.iter().map(|x| x.summary()).collect::<Vec<_>>()))
        .collect();
    print_json(&summary)
}

fn load_test(dataset: &Path) -> Result<Vec<ViewSet>> {
    Ok(load_split(dataset.join("test")).map_err(PipelineError::from)?)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let snapshot = a.run.join(CONFIG_FILE);
    if !snapshot.exists() {
        return Err(Usage(format!("{} is not a run directory (no {CONFIG_FILE})", a.run.display())).into());
    }
    guard_output(&a.run.join(EVAL_FILE), a.force)?;
    let config: ExperimentConfig = read_config(&snapshot)?;
    let test = load_test(&config.dataset)?;
    let categories = read_categories(&config.dataset)?;
    let mut reports = std::collections::BTreeMap::new();
    let mut scored = Vec::new();
    for &mode in &config.scoring.modes {
        if !a.run.join(format!("scores_{}", mode.tag())).exists() {
            return Err(Usage(format!("no {} scores in {}; run `score` first", mode.tag(), a.run.display())).into());
        }
        let results = read_scores(&a.run, mode)?;
        let report = pipeline::evaluate(&results, &test, &categories, &config.eval)?;
        reports.insert(mode.tag().to_string(), report);
        scored.push((mode, results));
    }
    write_reports(&a.run, &reports)?;
    let views: Vec<_> = scored.iter().map(|(m, r)| (*m, r.as_slice())).collect();
    write_curves(&a.run, &views, &test)?;
    print_json(&reports)
}

fn cmd_run(a: RunArgs) -> Result<()> {
    guard_output(&a.out, a.force)?;
    let mut config = resolve(ExperimentConfig::default(), &a.overrides)?;
    config.output = a.out.clone();
    let data = load_data(&config.dataset, &config.extractor)?;
    let outcome = run_and_write(&config, &data, &a.out)?;
    print_json(&outcome.reports)
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let stem = match a.axis {
        SweepAxis::K => "sweep_k",
        SweepAxis::N => "sweep_n",
        SweepAxis::Losses => "sweep_losses",
    };
    guard_output(&a.out.join(format!("{stem}.json")), a.force)?;
    let mut config = resolve(ExperimentConfig::default(), &a.overrides)?;
    config.output = a.out.clone();
    let data = load_data(&config.dataset, &config.extractor)?;
    let table = run_sweep(&config, &data, a.axis)?;
    write_snapshot(&a.out, &format!("{stem}_config.json"), &config)?;
    table.write(&a.out)?;
    print!("{}", table.to_csv());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(p) = cause.downcast_ref::<PipelineError>() {
            if p.is_numeric() {
                return 4;
            }
            if p.is_config() || matches!(p, PipelineError::Exists(_)) {
                return 2;
            }
            return 3;
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Extract(a) => cmd_extract(a),
        Command::Train(a) => cmd_train(a),
        Command::Score(a) => cmd_score(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
