//! `ditracker` command line: corpus generation, generative pretraining, the
//! layer/head sweep, tracker training, inference, evaluation, and the
//! ablation matrix.
//!
//! Every run resolves its settings as flags > config file > defaults, writes
//! the resolved settings into its output directory, and is deterministic
//! given `--seed`. Exit codes: 0 success, 2 configuration error, 1 runtime
//! failure.

use clap::{Args, Parser, Subcommand};
use ditracker_core::checkpoint;
use ditracker_core::datagen::{self, CorruptionKind, GeneratorConfig, SyntheticClip};
use ditracker_core::dit::{pretrain_flow_matching, DiTConfig, PretrainSettings, VideoDiT};
use ditracker_core::evalkit::{self, EvalOptions};
use ditracker_core::matching::{self, FusionMode};
use ditracker_core::numerics::Point2D;
use ditracker_core::refiner::{self, TrackOutput, TrackQuery, Tracker, TrackerConfig};
use ditracker_core::training::{self, TrainConfig};
use ditracker_core::viz;
use ditracker_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 1;

#[derive(Parser)]
#[command(
    name = "ditracker",
    version,
    about = "Point tracking with video-transformer attention costs",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clip corpus with ground-truth tracks.
    GenData(GenDataArgs),
    /// Pretrain the video model generatively on a corpus.
    PretrainDit(PretrainArgs),
    /// Score every (layer, head) extraction point by zero-shot tracking.
    Sweep(SweepArgs),
    /// Train the full tracker on a corpus.
    Train(TrainArgs),
    /// Run a trained tracker on one clip directory.
    Track(TrackArgs),
    /// Evaluate a tracker (or a predictions file) and emit a report.
    Eval(EvalArgs),
    /// Train and evaluate the four ablation arms and tabulate them.
    ReproAblation(AblationArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help { ExitCode::SUCCESS } else { ExitCode::from(EXIT_CONFIG) };
        }
    };
    let result = match cli.command {
        Command::GenData(args) => run_gen_data(args),
        Command::PretrainDit(args) => run_pretrain(args),
        Command::Sweep(args) => run_sweep(args),
        Command::Train(args) => run_train(args),
        Command::Track(args) => run_track(args),
        Command::Eval(args) => run_eval(args),
        Command::ReproAblation(args) => run_ablation(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::InvalidArgument(_) => EXIT_CONFIG,
                _ => EXIT_RUNTIME,
            })
        }
    }
}

#[derive(Args)]
struct CommonArgs {
    /// JSON settings file; explicit flags override its values.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for every RNG stream of the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory. Defaults to <cache>/<command> where <cache> is
    /// $DITRACKER_CACHE or ./ditracker_cache.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Compute device; only "cpu" is available.
    #[arg(long)]
    device: Option<String>,
}

fn cache_root() -> PathBuf {
    std::env::var_os("DITRACKER_CACHE")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("ditracker_cache"))
}

fn validate_device(common: &CommonArgs) -> Result<()> {
    match common.device.as_deref() {
        None | Some("cpu") => Ok(()),
        Some(other) => Err(Error::invalid(format!("unsupported device '{other}' (only cpu)"))),
    }
}

fn resolve_out(common: &CommonArgs, command: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| cache_root().join(command))
}

/// Settings layering: defaults, then the optional JSON config file.
/// A missing or malformed file is a configuration error.
fn load_settings<T: DeserializeOwned + Default>(config: Option<&Path>) -> Result<T> {
    let Some(path) = config else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::invalid(format!("config {}: {e}", path.display())))
}

#[derive(Serialize)]
struct ResolvedRun<'a, T: Serialize> {
    command: &'a str,
    seed: u64,
    settings: &'a T,
}

fn emit_resolved<T: Serialize>(out: &Path, command: &str, seed: u64, settings: &T) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("resolved_config.json");
    let body = serde_json::to_string_pretty(&ResolvedRun { command, seed, settings })
        .expect("settings are serializable");
    std::fs::write(&path, body).map_err(|e| Error::io(&path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value).expect("value is serializable");
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn require_file(path: &Path, hint: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite(format!("{} not found ({hint})", path.display())))
    }
}

/// Loads every `clip_*`-style subdirectory (anything with a `meta.json`) of a
/// corpus directory, sorted by name.
fn load_corpus(dir: &Path) -> Result<Vec<SyntheticClip>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join("meta.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::MissingPrerequisite(format!(
            "no clip directories under {} (run gen-data first)",
            dir.display()
        )));
    }
    dirs.iter().map(|d| datagen::load_clip(d)).collect()
}

// ---------------------------------------------------------------------------
// gen-data

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of clips to generate.
    #[arg(long)]
    clips: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    occluders: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct GenDataSettings {
    clips: usize,
    seed: u64,
    generator: GeneratorConfig,
}

impl Default for GenDataSettings {
    fn default() -> Self {
        GenDataSettings { clips: 32, seed: 0, generator: GeneratorConfig::default() }
    }
}

fn run_gen_data(args: GenDataArgs) -> Result<()> {
    validate_device(&args.common)?;
    let mut s: GenDataSettings = load_settings(args.common.config.as_deref())?;
    if let Some(v) = args.clips {
        s.clips = v;
    }
    if let Some(v) = args.frames {
        s.generator.frames = v;
    }
    if let Some(v) = args.height {
        s.generator.height = v;
    }
    if let Some(v) = args.width {
        s.generator.width = v;
    }
    if let Some(v) = args.occluders {
        s.generator.occluders = v;
    }
    if let Some(v) = args.common.seed {
        s.seed = v;
    }
    if s.clips == 0 {
        return Err(Error::invalid("clips must be at least 1"));
    }
    let out = resolve_out(&args.common, "corpus");
    emit_resolved(&out, "gen-data", s.seed, &s)?;
    for i in 0..s.clips {
        let clip = datagen::generate_clip(&s.generator, s.seed.wrapping_add(i as u64))?;
        datagen::save_clip(&clip, &out.join(format!("clip_{i:04}")))?;
    }
    let hash = checkpoint::dir_hash(&out)?;
    println!("wrote {} clips to {} (hash {hash})", s.clips, out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// pretrain-dit

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Corpus directory from gen-data.
    #[arg(long, value_name = "DIR")]
    corpus: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
struct PretrainCliSettings {
    dit: DiTConfig,
    schedule: PretrainSettings,
}

fn run_pretrain(args: PretrainArgs) -> Result<()> {
    validate_device(&args.common)?;
    let mut s: PretrainCliSettings = load_settings(args.common.config.as_deref())?;
    if let Some(v) = args.steps {
        s.schedule.steps = v;
    }
    if let Some(v) = args.lr {
        s.schedule.lr = v;
    }
    if let Some(v) = args.common.seed {
        s.schedule.seed = v;
    }
    let corpus_dir = args.corpus.unwrap_or_else(|| cache_root().join("corpus"));
    let clips = load_corpus(&corpus_dir)?;
    let hash = checkpoint::dir_hash(&corpus_dir)?;
    let out = resolve_out(&args.common, "pretrain");
    emit_resolved(&out, "pretrain-dit", s.schedule.seed, &s)?;

    let mut model = VideoDiT::new(s.dit.clone(), s.schedule.seed)?;
    let report = pretrain_flow_matching(&mut model, &clips, &s.schedule)?;
    let ckpt = out.join("dit.dtck");
    model.save(&ckpt, s.schedule.seed, s.schedule.steps as u64, Some(hash))?;
    write_json(&out.join("pretrain_report.json"), &report)?;
    println!(
        "pretrained {} steps on {} clips; held-out velocity mse {:.6} -> {:.6}; saved {}",
        s.schedule.steps,
        clips.len(),
        report.untrained_holdout_mse,
        report.final_holdout_mse,
        ckpt.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Pretrained video-model checkpoint.
    #[arg(long, value_name = "PATH")]
    dit: Option<PathBuf>,
    /// Corpus directory to sweep on.
    #[arg(long, value_name = "DIR")]
    corpus: Option<PathBuf>,
}

#[derive(Serialize)]
struct SweepSummary {
    best_layer: usize,
    best_head: usize,
    best_delta_avg: f64,
}

fn run_sweep(args: SweepArgs) -> Result<()> {
    validate_device(&args.common)?;
    let seed = args.common.seed.unwrap_or(0);
    let dit_path = args.dit.unwrap_or_else(|| cache_root().join("pretrain").join("dit.dtck"));
    require_file(&dit_path, "run pretrain-dit first")?;
    let corpus_dir = args.corpus.unwrap_or_else(|| cache_root().join("corpus"));
    let model = VideoDiT::load(&dit_path)?;
    let clips = load_corpus(&corpus_dir)?;
    let out = resolve_out(&args.common, "sweep");

    #[derive(Serialize)]
    struct Settings {
        dit: String,
        corpus: String,
    }
    emit_resolved(
        &out,
        "sweep",
        seed,
        &Settings { dit: dit_path.display().to_string(), corpus: corpus_dir.display().to_string() },
    )?;

    let result = matching::sweep_layers_heads(&model, &clips)?;
    matching::write_sweep_csv(&result, &out.join("sweep.csv"))?;
    viz::sweep_heatmap(&result.delta_avg, &out.join("sweep.png"))?;
    let summary = SweepSummary {
        best_layer: result.best_layer,
        best_head: result.best_head,
        best_delta_avg: result.delta_avg[(result.best_layer - 1, result.best_head)],
    };
    write_json(&out.join("sweep_summary.json"), &summary)?;
    println!(
        "swept {} cells; best layer {} head {} (delta_avg {:.2})",
        result.delta_avg.len(),
        summary.best_layer,
        summary.best_head,
        summary.best_delta_avg
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Pretrained video-model checkpoint.
    #[arg(long, value_name = "PATH")]
    dit: Option<PathBuf>,
    /// Training corpus directory.
    #[arg(long, value_name = "DIR")]
    corpus: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Queries sampled per clip per step.
    #[arg(long)]
    queries: Option<usize>,
    /// Fusion mode: none | feature_concat | cost_sum | cost_concat.
    #[arg(long)]
    fusion: Option<String>,
    /// Attach low-rank adapters to the video model: true | false.
    #[arg(long)]
    lora: Option<bool>,
    /// Extraction layer (1-based), e.g. the sweep's best cell.
    #[arg(long)]
    layer: Option<usize>,
    /// Extraction head (0-based).
    #[arg(long)]
    head: Option<usize>,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
struct TrainCliSettings {
    tracker: TrackerConfig,
    train: TrainConfig,
}

fn apply_train_overrides(s: &mut TrainCliSettings, args: &TrainArgs) -> Result<()> {
    if let Some(v) = args.steps {
        s.train.steps = v;
    }
    if let Some(v) = args.lr {
        s.train.lr = v;
    }
    if let Some(v) = args.queries {
        s.train.queries_per_clip = v;
    }
    if let Some(v) = args.checkpoint_every {
        s.train.checkpoint_every = v;
    }
    if let Some(v) = &args.fusion {
        s.tracker.fusion = FusionMode::parse(v)?;
    }
    if let Some(v) = args.lora {
        s.tracker.use_lora = v;
    }
    if let Some(v) = args.common.seed {
        s.train.seed = v;
    }
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    validate_device(&args.common)?;
    let mut s: TrainCliSettings = load_settings(args.common.config.as_deref())?;
    apply_train_overrides(&mut s, &args)?;
    let dit_path = args.dit.unwrap_or_else(|| cache_root().join("pretrain").join("dit.dtck"));
    require_file(&dit_path, "run pretrain-dit first")?;
    let mut model = VideoDiT::load(&dit_path)?;
    if let Some(l) = args.layer {
        model.config.extract_layer = l;
    }
    if let Some(h) = args.head {
        model.config.extract_head = h;
    }
    s.tracker.dit = model.config.clone();

    let corpus_dir = args.corpus.unwrap_or_else(|| cache_root().join("corpus"));
    let clips = load_corpus(&corpus_dir)?;
    let hash = checkpoint::dir_hash(&corpus_dir)?;
    let out = resolve_out(&args.common, "train");
    emit_resolved(&out, "train", s.train.seed, &s)?;

    let mut tracker = Tracker::with_dit(model, s.tracker.clone(), s.train.seed)?;
    let ckpt_dir = out.join("checkpoints");
    let report = training::train(
        &mut tracker,
        &clips,
        &s.train,
        Some(&ckpt_dir),
        Some(&hash),
        |step, loss| {
            if step == 0 || (step + 1) % 100 == 0 {
                println!(
                    "step {:>6}: total {:.5} (track {:.5} vis {:.5} conf {:.5})",
                    step + 1,
                    loss.total,
                    loss.track,
                    loss.vis,
                    loss.conf
                );
            }
        },
    )?;
    let ckpt = out.join("tracker.dtck");
    training::save_tracker(&tracker, s.train.steps as u64, s.train.seed, Some(&hash), &ckpt)?;
    write_json(&out.join("loss_curve.json"), &report)?;
    let (first, last) = (report.losses.first(), report.losses.last());
    println!(
        "trained {} steps; total loss {:.5} -> {:.5}; saved {}",
        report.steps,
        first.map_or(f64::NAN, |l| l.total),
        last.map_or(f64::NAN, |l| l.total),
        ckpt.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// track

#[derive(Args)]
struct TrackArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trained tracker checkpoint.
    #[arg(long, value_name = "PATH")]
    ckpt: Option<PathBuf>,
    /// Clip directory (frames/, meta.json, tracks.jsonl).
    #[arg(long, value_name = "DIR")]
    clip: PathBuf,
    /// Overlay upscale factor.
    #[arg(long)]
    scale: Option<usize>,
}

fn run_track(args: TrackArgs) -> Result<()> {
    validate_device(&args.common)?;
    let seed = args.common.seed.unwrap_or(0);
    let ckpt = args.ckpt.unwrap_or_else(|| cache_root().join("train").join("tracker.dtck"));
    require_file(&ckpt, "run train first")?;
    let (tracker, _manifest) = training::load_tracker(&ckpt)?;
    let clip = datagen::load_clip(&args.clip)?;
    let queries = evalkit::first_visible_queries(&clip)?;
    let outputs = tracker.track(&clip.video, &queries)?;
    let out = resolve_out(&args.common, "track");

    #[derive(Serialize)]
    struct Settings {
        ckpt: String,
        clip: String,
        scale: usize,
    }
    let scale = args.scale.unwrap_or(4);
    emit_resolved(
        &out,
        "track",
        seed,
        &Settings { ckpt: ckpt.display().to_string(), clip: args.clip.display().to_string(), scale },
    )?;
    refiner::save_predictions(&out.join("tracks_pred.jsonl"), &outputs)?;
    viz::overlay_tracks(&clip.video, &outputs, scale, &out.join("overlay"))?;
    println!(
        "tracked {} points over {} frames; wrote {}",
        outputs.len(),
        clip.frames(),
        out.join("tracks_pred.jsonl").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trained tracker checkpoint (model mode).
    #[arg(long, value_name = "PATH")]
    ckpt: Option<PathBuf>,
    /// Directory of clip directories to evaluate (model mode).
    #[arg(long, value_name = "DIR")]
    clips: Option<PathBuf>,
    /// Predictions file from `track` (file mode; needs --gt).
    #[arg(long, value_name = "PATH")]
    pred: Option<PathBuf>,
    /// Ground-truth tracks file (file mode).
    #[arg(long, value_name = "PATH")]
    gt: Option<PathBuf>,
    /// Emit per-difficulty-bin tables.
    #[arg(long)]
    stratify: bool,
    /// Corruption cell as kind:severity (repeatable).
    #[arg(long = "corrupt", value_name = "KIND:SEV")]
    corrupt: Vec<String>,
}

fn parse_corruptions(cells: &[String]) -> Result<Vec<(CorruptionKind, u8)>> {
    cells
        .iter()
        .map(|cell| {
            let (kind, sev) = cell
                .split_once(':')
                .ok_or_else(|| Error::invalid(format!("--corrupt '{cell}' is not kind:severity")))?;
            let kind = CorruptionKind::parse(kind)?;
            let severity: u8 = sev
                .parse()
                .map_err(|_| Error::invalid(format!("--corrupt '{cell}' has a non-numeric severity")))?;
            if !(1..=5).contains(&severity) {
                return Err(Error::invalid(format!("--corrupt '{cell}' severity must be in 1..=5")));
            }
            Ok((kind, severity))
        })
        .collect()
}

fn run_eval(args: EvalArgs) -> Result<()> {
    validate_device(&args.common)?;
    let seed = args.common.seed.unwrap_or(0);
    let file_mode = args.pred.is_some() || args.gt.is_some();
    if file_mode {
        if args.ckpt.is_some() || args.clips.is_some() {
            return Err(Error::invalid("--pred/--gt cannot be combined with --ckpt/--clips"));
        }
        if !args.corrupt.is_empty() {
            return Err(Error::invalid("a corruption sweep needs a model; use --ckpt and --clips"));
        }
        let (Some(pred), Some(gt)) = (&args.pred, &args.gt) else {
            return Err(Error::invalid("file mode needs both --pred and --gt"));
        };
        return eval_files(pred, gt, args.stratify, &resolve_out(&args.common, "eval"), seed);
    }

    let ckpt = args.ckpt.unwrap_or_else(|| cache_root().join("train").join("tracker.dtck"));
    require_file(&ckpt, "run train first")?;
    let clips_dir = args.clips.unwrap_or_else(|| cache_root().join("corpus"));
    let (tracker, _manifest) = training::load_tracker(&ckpt)?;
    let clips = load_corpus(&clips_dir)?;
    let opts = EvalOptions {
        stratify: args.stratify,
        corruptions: parse_corruptions(&args.corrupt)?,
        corruption_seed: seed,
    };
    let out = resolve_out(&args.common, "eval");

    #[derive(Serialize)]
    struct Settings<'a> {
        ckpt: String,
        clips: String,
        options: &'a EvalOptions,
    }
    emit_resolved(
        &out,
        "eval",
        seed,
        &Settings {
            ckpt: ckpt.display().to_string(),
            clips: clips_dir.display().to_string(),
            options: &opts,
        },
    )?;

    let report = evalkit::evaluate(&tracker, &clips, &opts)?;
    evalkit::write_reports(&report, &out)?;
    if !report.corruption_curves.is_empty() {
        viz::corruption_chart(&report.corruption_curves, &out.join("corruption.png"))?;
    }
    println!(
        "evaluated {} tracks over {} clips: AJ {:.2} delta_avg {:.2} OA {:.2}; wrote {}",
        report.tracks,
        report.clips,
        report.aj,
        report.delta_avg,
        report.oa,
        out.join("report.json").display()
    );
    Ok(())
}

/// Metric-only evaluation of a predictions file against a ground-truth file.
/// When a `meta.json` sits next to the ground truth, its native resolution
/// drives the coordinate mapping; otherwise coordinates are taken as already
/// being in the evaluation frame.
fn eval_files(pred: &Path, gt: &Path, stratify: bool, out: &Path, seed: u64) -> Result<()> {
    let records = refiner::load_predictions(pred)?;
    let gts = datagen::load_tracks(gt)?;
    let outputs: Vec<TrackOutput<f32>> = records
        .into_iter()
        .map(|r| TrackOutput {
            query: TrackQuery { id: r.id, frame: r.query.0, pos: Point2D::new(r.query.1, r.query.2) },
            positions: r.xy.into_iter().map(|(x, y)| Point2D::new(x, y)).collect(),
            vis: r.vis,
            conf: r.conf,
        })
        .collect();

    #[derive(Deserialize)]
    struct MetaDims {
        height: usize,
        width: usize,
    }
    let meta_path = gt.parent().map(|d| d.join("meta.json"));
    let dims = match &meta_path {
        Some(p) if p.is_file() => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let meta: MetaDims = serde_json::from_str(&text)
                .map_err(|e| Error::CorruptArtifact { path: p.clone(), reason: e.to_string() })?;
            (meta.height, meta.width)
        }
        _ => (evalkit::EVAL_RESOLUTION, evalkit::EVAL_RESOLUTION),
    };

    #[derive(Serialize)]
    struct Settings {
        pred: String,
        gt: String,
        stratify: bool,
        native: String,
    }
    emit_resolved(
        out,
        "eval",
        seed,
        &Settings {
            pred: pred.display().to_string(),
            gt: gt.display().to_string(),
            stratify,
            native: format!("{}x{}", dims.0, dims.1),
        },
    )?;

    let evals = evalkit::pair_predictions(&outputs, &gts, dims.0, dims.1)?;
    let labels = if stratify {
        let diag = ((dims.0 * dims.0 + dims.1 * dims.1) as f32).sqrt();
        let by_id: BTreeMap<i64, &datagen::GroundTruthTrack> =
            gts.iter().map(|t| (t.id as i64, t)).collect();
        Some(
            outputs
                .iter()
                .map(|o| datagen::stratify(by_id[&o.query.id], diag))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let scale = evalkit::eval_scale(dims.0, dims.1);
    let scales: BTreeMap<String, [f64; 2]> =
        [(format!("{}x{}", dims.0, dims.1), [scale.0 as f64, scale.1 as f64])].into_iter().collect();
    let report =
        evalkit::assemble_report(&evals, labels.as_deref(), BTreeMap::new(), scales, 1)?;
    evalkit::write_reports(&report, out)?;
    println!(
        "evaluated {} tracks: AJ {:.2} delta_avg {:.2} OA {:.2}; wrote {}",
        report.tracks,
        report.aj,
        report.delta_avg,
        report.oa,
        out.join("report.json").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// repro-ablation

#[derive(Args)]
struct AblationArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Pretrained video-model checkpoint.
    #[arg(long, value_name = "PATH")]
    dit: Option<PathBuf>,
    /// Training corpus directory.
    #[arg(long, value_name = "DIR")]
    corpus: Option<PathBuf>,
    /// Held-out evaluation corpus directory.
    #[arg(long, value_name = "DIR")]
    eval_corpus: Option<PathBuf>,
    /// Training steps per arm.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Queries sampled per clip per step.
    #[arg(long)]
    queries: Option<usize>,
    /// Extraction layer (1-based), e.g. the sweep's best cell.
    #[arg(long)]
    layer: Option<usize>,
    /// Extraction head (0-based).
    #[arg(long)]
    head: Option<usize>,
}

/// The four ablation arms: adapter switch and fusion mode.
const ARMS: [(&str, bool, FusionMode); 4] = [
    ("I", false, FusionMode::None),
    ("II", true, FusionMode::FeatureConcat),
    ("III", true, FusionMode::None),
    ("IV", true, FusionMode::CostConcat),
];

#[derive(Debug, Clone, Serialize)]
struct ArmResult {
    arm: String,
    lora: bool,
    fusion: String,
    delta_avg: f64,
    aj: f64,
    oa: f64,
}

fn ablation_markdown(rows: &[ArmResult]) -> String {
    use std::fmt::Write;
    let mut md = String::from("# Ablation arms\n\n| arm | adapters | fusion | delta_avg | AJ | OA |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {:.2} | {:.2} | {:.2} |",
            r.arm,
            if r.lora { "lora" } else { "frozen" },
            r.fusion,
            r.delta_avg,
            r.aj,
            r.oa
        );
    }
    if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
        let _ = writeln!(md, "\nArm IV - arm I delta_avg: {:.2}", last.delta_avg - first.delta_avg);
    }
    md
}

fn run_ablation(args: AblationArgs) -> Result<()> {
    validate_device(&args.common)?;
    let mut s: TrainCliSettings = load_settings(args.common.config.as_deref())?;
    if let Some(v) = args.steps {
        s.train.steps = v;
    }
    if let Some(v) = args.lr {
        s.train.lr = v;
    }
    if let Some(v) = args.queries {
        s.train.queries_per_clip = v;
    }
    if let Some(v) = args.common.seed {
        s.train.seed = v;
    }
    let dit_path = args.dit.unwrap_or_else(|| cache_root().join("pretrain").join("dit.dtck"));
    require_file(&dit_path, "run pretrain-dit first")?;
    let corpus_dir = args.corpus.unwrap_or_else(|| cache_root().join("corpus"));
    let eval_dir = args.eval_corpus.unwrap_or_else(|| cache_root().join("eval_corpus"));
    let clips = load_corpus(&corpus_dir)?;
    let eval_clips = load_corpus(&eval_dir)?;
    let hash = checkpoint::dir_hash(&corpus_dir)?;
    let out = resolve_out(&args.common, "ablation");
    let mut base_dit = VideoDiT::load(&dit_path)?.config;
    if let Some(l) = args.layer {
        base_dit.extract_layer = l;
    }
    if let Some(h) = args.head {
        base_dit.extract_head = h;
    }
    s.tracker.dit = base_dit.clone();
    emit_resolved(&out, "repro-ablation", s.train.seed, &s)?;

    let mut rows = Vec::with_capacity(ARMS.len());
    for (label, lora, fusion) in ARMS {
        let mut model = VideoDiT::load(&dit_path)?;
        model.config = base_dit.clone();
        let mut config = s.tracker.clone();
        config.dit = base_dit.clone();
        config.use_lora = lora;
        config.fusion = fusion;
        let mut tracker = Tracker::with_dit(model, config, s.train.seed)?;
        println!("arm {label}: training ({} steps, lora {lora}, fusion {})", s.train.steps, fusion.name());
        let report = training::train(&mut tracker, &clips, &s.train, None, Some(&hash), |_, _| {})?;
        let arm_dir = out.join(format!("arm_{label}"));
        std::fs::create_dir_all(&arm_dir).map_err(|e| Error::io(&arm_dir, e))?;
        training::save_tracker(
            &tracker,
            s.train.steps as u64,
            s.train.seed,
            Some(&hash),
            &arm_dir.join("tracker.dtck"),
        )?;
        write_json(&arm_dir.join("loss_curve.json"), &report)?;
        let eval = evalkit::evaluate(
            &tracker,
            &eval_clips,
            &EvalOptions { stratify: false, corruptions: Vec::new(), corruption_seed: s.train.seed },
        )?;
        println!("arm {label}: delta_avg {:.2} AJ {:.2} OA {:.2}", eval.delta_avg, eval.aj, eval.oa);
        rows.push(ArmResult {
            arm: label.to_string(),
            lora,
            fusion: fusion.name().to_string(),
            delta_avg: eval.delta_avg,
            aj: eval.aj,
            oa: eval.oa,
        });
    }

    let mut csv = String::from("arm,lora,fusion,delta_avg,aj,oa\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6}\n",
            r.arm, r.lora, r.fusion, r.delta_avg, r.aj, r.oa
        ));
    }
    let csv_path = out.join("ablation.csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    write_json(&out.join("ablation.json"), &rows)?;
    let md = ablation_markdown(&rows);
    let md_path = out.join("ablation.md");
    std::fs::write(&md_path, &md).map_err(|e| Error::io(&md_path, e))?;
    print!("{md}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn settings_layering_is_flags_over_file_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"train": {"steps": 77, "lr": 0.01}}"#).unwrap();
        let mut s: TrainCliSettings = load_settings(Some(&path)).unwrap();
        assert_eq!(s.train.steps, 77);
        assert_eq!(s.train.lr, 0.01);
        assert_eq!(s.train.clip_norm, TrainConfig::default().clip_norm);

        let args = TrainArgs {
            common: CommonArgs { config: None, seed: Some(9), out: None, device: None },
            dit: None,
            corpus: None,
            steps: Some(5),
            lr: None,
            queries: None,
            fusion: Some("cost_sum".to_string()),
            lora: Some(false),
            layer: None,
            head: None,
            checkpoint_every: None,
        };
        apply_train_overrides(&mut s, &args).unwrap();
        assert_eq!(s.train.steps, 5);
        assert_eq!(s.train.lr, 0.01);
        assert_eq!(s.train.seed, 9);
        assert_eq!(s.tracker.fusion, FusionMode::CostSum);
        assert!(!s.tracker.use_lora);
    }

    #[test]
    fn malformed_or_missing_config_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, "{nope").unwrap();
        let err = load_settings::<TrainCliSettings>(Some(&bad)).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
        let missing = dir.path().join("absent.json");
        let err = load_settings::<TrainCliSettings>(Some(&missing)).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn corruption_cells_parse_and_reject() {
        let cells = parse_corruptions(&["motion_blur:3".to_string(), "gaussian_noise:1".to_string()])
            .unwrap();
        assert_eq!(cells.len(), 2);
        assert_eq!(cells[0], (CorruptionKind::MotionBlur, 3));
        assert!(parse_corruptions(&["blur".to_string()]).is_err());
        assert!(parse_corruptions(&["motion_blur:9".to_string()]).is_err());
        assert!(parse_corruptions(&["sepia:1".to_string()]).is_err());
    }

    #[test]
    fn ablation_table_lists_all_four_arms_in_order() {
        let rows: Vec<ArmResult> = ARMS
            .iter()
            .enumerate()
            .map(|(i, (label, lora, fusion))| ArmResult {
                arm: label.to_string(),
                lora: *lora,
                fusion: fusion.name().to_string(),
                delta_avg: 50.0 + i as f64,
                aj: 40.0,
                oa: 60.0,
            })
            .collect();
        let md = ablation_markdown(&rows);
        let pos: Vec<usize> = ["| I |", "| II |", "| III |", "| IV |"]
            .iter()
            .map(|m| md.find(m).unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(md.contains("Arm IV - arm I delta_avg: 3.00"));
    }

    #[test]
    fn cli_declares_all_subcommands() {
        use clap::CommandFactory;
        let cmd = Cli::command();
        let names: Vec<&str> = cmd.get_subcommands().map(|c| c.get_name()).collect();
        for expected in
            ["gen-data", "pretrain-dit", "sweep", "train", "track", "eval", "repro-ablation"]
        {
            assert!(names.contains(&expected), "missing subcommand {expected}");
        }
    }
}
