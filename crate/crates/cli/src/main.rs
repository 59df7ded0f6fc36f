//! `tcal`: synthetic dataset generation, temporal-coherence error estimation,
//! frame selection, detection evaluation, and closed-loop active-learning
//! simulation from one binary.
//!
//! Every command is a pure function of (inputs on disk, flags, seed):
//! repeated invocation writes byte-identical outputs. Commands take an
//! optional JSON config document (`--config`); flags override config values.
//! Exit codes: 0 success, 2 validation error, 3 I/O error; failures print one
//! machine-readable JSON line to stderr. `TCAL_LOG` sets log verbosity.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use tcal_core::acquisition::{
    oracle_frame_scores, random_frame_scores, tc_frame_scores, uncertainty_frame_scores,
    write_selection_csv, Allocation, FrameScore, OracleKind, TcVariant, UncertaintyKind,
    ALL_METHODS,
};
use tcal_core::dataset::load_frame_map;
use tcal_core::energy::{aggregate_frame_errors, read_errors_jsonl, write_errors_jsonl};
use tcal_core::evaluation::{filter_frame, write_curve_csv, write_eval_json, Interpolation};
use tcal_core::simulator::{RunResult, World};
use tcal_core::{
    build_graphs, evaluate, generate_world, load_dataset, load_detections_dir, run_loop,
    save_dataset, select_batch, solve, Dataset, Detection, EnergyModel, Error, EvalConfig,
    FrameSet, GroundTruthObject, LoopConfig, Method, Result, SelectionBatch, SelectionConfig,
    WorldConfig,
};

#[derive(Parser)]
#[command(
    name = "tcal",
    version,
    about = "Temporal-coherence error estimation and active learning for video object detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (ground truth, motion fields, empty detections)
    Gen(GenArgs),
    /// Estimate per-frame detection errors from temporal coherence
    Estimate(EstimateArgs),
    /// Select a batch of frames to label
    Select(SelectArgs),
    /// Evaluate detections against ground truth (mAP)
    Eval(EvalArgs),
    /// Run closed-loop active-learning simulations and write mAP curves
    Simulate(SimulateArgs),
}

/// One config document shared by every subcommand; each command reads the
/// sections it needs and its flags override the corresponding values.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    world: WorldConfig,
    run: LoopConfig,
    /// Methods `simulate` compares when `--methods` is absent.
    methods: Vec<Method>,
    /// Seeds `simulate` runs when `--seeds` is absent.
    seeds: Vec<u64>,
}

impl Default for FileConfig {
    fn default() -> Self {
        FileConfig {
            world: WorldConfig::default(),
            run: LoopConfig::default(),
            methods: ALL_METHODS.to_vec(),
            seeds: vec![0],
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TCAL_LOG", "warn"))
        .format_timestamp(None)
        .init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = if e.is_validation() { "validation" } else { "io" };
            eprintln!(
                "{}",
                serde_json::json!({ "error": kind, "message": e.to_string() })
            );
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Estimate(args) => cmd_estimate(args),
        Command::Select(args) => cmd_select(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Simulate(args) => cmd_simulate(args),
    }
}

// ---------------------------------------------------------------- gen

#[derive(Args)]
struct GenArgs {
    /// JSON config file; the `world` section describes the dataset
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// World seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset directory to create
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

/// Companion metadata written next to the dataset: the exact generator
/// inputs plus the stratum of every video.
#[derive(Serialize)]
struct WorldMeta<'a> {
    seed: u64,
    config: &'a WorldConfig,
    strata: BTreeMap<&'a str, &'a str>,
}

fn write_world_meta(world: &World, seed: u64, path: &Path) -> Result<()> {
    let strata = world
        .dataset
        .manifest
        .videos
        .iter()
        .enumerate()
        .map(|(vi, meta)| (meta.id.as_str(), world.stratum_name(vi)))
        .collect();
    let meta = WorldMeta {
        seed,
        config: &world.config,
        strata,
    };
    let mut text =
        serde_json::to_string_pretty(&meta).map_err(|e| Error::validation(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    let world = generate_world(&config.world, args.seed)?;
    save_dataset(&world.dataset, &args.out)?;
    write_world_meta(&world, args.seed, &args.out.join("world.json"))?;
    log::info!("dataset written to {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------- estimate

#[derive(Args)]
struct EstimateArgs {
    /// Dataset directory (dataset.json, gt/, det/, motion/)
    #[arg(long, value_name = "DIR")]
    dataset: PathBuf,
    /// Directory of per-video `<video_id>.jsonl` files replacing the
    /// dataset's own det/
    #[arg(long, value_name = "DIR")]
    det: Option<PathBuf>,
    /// JSON config file; the `run.tc` section seeds the flags below
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Link IoU threshold theta (default 0.5)
    #[arg(long, value_name = "IOU")]
    theta: Option<f64>,
    /// Candidate clustering IoU threshold (default 0.5)
    #[arg(long, value_name = "IOU")]
    theta_c: Option<f64>,
    /// Temporal window in frames, each direction (default 3)
    #[arg(long, value_name = "FRAMES")]
    window: Option<usize>,
    /// Detection score threshold tau_det (default 0.5)
    #[arg(long, value_name = "SCORE")]
    tau_det: Option<f64>,
    /// Per-frame, per-class NMS IoU threshold (default 0.5)
    #[arg(long, value_name = "IOU")]
    nms: Option<f64>,
    /// Output directory for per-video error files (default <dataset>/errors)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn override_detections(dataset: &mut Dataset, dir: &Path) -> Result<()> {
    let videos = load_detections_dir(dir, &dataset.manifest)?;
    for (video, dets) in dataset.videos.iter_mut().zip(videos) {
        video.detections = dets;
    }
    Ok(())
}

fn cmd_estimate(args: EstimateArgs) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    let mut tc = config.run.tc;
    if let Some(v) = args.theta {
        tc.link_threshold = v;
    }
    if let Some(v) = args.theta_c {
        tc.cluster_threshold = v;
    }
    if let Some(v) = args.window {
        tc.window = v;
    }
    if let Some(v) = args.tau_det {
        tc.det_score_threshold = v;
    }
    if let Some(v) = args.nms {
        tc.nms_threshold = v;
    }
    tc.validate()?;

    let mut dataset = load_dataset(&args.dataset)?;
    if let Some(dir) = &args.det {
        override_detections(&mut dataset, dir)?;
    }

    let num_classes = dataset.manifest.num_classes();
    let graphs = build_graphs(&dataset, &tc)?;
    let model = EnergyModel::default();
    let solutions: Vec<_> = graphs.par_iter().map(|g| solve(g, &model)).collect();

    let out_dir = args.out.unwrap_or_else(|| args.dataset.join("errors"));
    fs::create_dir_all(&out_dir)?;
    // build_graphs orders by manifest video then class, so chunking by class
    // count recovers each video's solutions.
    for (vi, meta) in dataset.manifest.videos.iter().enumerate() {
        let per_video = &solutions[vi * num_classes..(vi + 1) * num_classes];
        let frames = aggregate_frame_errors(meta.num_frames, per_video);
        let mut buf = Vec::new();
        write_errors_jsonl(&frames, &mut buf)?;
        fs::write(out_dir.join(format!("{}.jsonl", meta.id)), buf)?;
    }
    log::info!("error estimates written to {}", out_dir.display());
    Ok(())
}

// ---------------------------------------------------------------- select

#[derive(Args)]
struct SelectArgs {
    /// Dataset directory (video lengths; detections and ground truth for
    /// detection-driven methods)
    #[arg(long, value_name = "DIR")]
    dataset: PathBuf,
    /// Error directory from `estimate`; required for method tc
    #[arg(long, value_name = "DIR")]
    errors: Option<PathBuf>,
    /// Detection directory override (see `estimate --det`)
    #[arg(long, value_name = "DIR")]
    det: Option<PathBuf>,
    /// JSON config file; `run.tc_variant`, `run.radius` and `run.eval` seed
    /// the defaults below
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Acquisition method: tc, oracle_fp, oracle_fn, least_confidence,
    /// entropy, margin, random, random_r
    #[arg(long, value_name = "NAME")]
    method: String,
    /// Number of frames to select
    #[arg(long, value_name = "N")]
    batch: usize,
    /// Representativeness radius k (default 3; method random uses 0)
    #[arg(long, short = 'k', value_name = "FRAMES")]
    radius: Option<usize>,
    /// Quota allocation: proportional or global (default proportional;
    /// method random uses global)
    #[arg(long, value_name = "MODE")]
    allocation: Option<String>,
    /// Error counts feeding the tc score: fp, fn, or fp_fn (default fp)
    #[arg(long, value_name = "KIND")]
    tc_variant: Option<String>,
    /// Already-labeled frames as a `{video_id: [frame, ..]}` JSON file
    #[arg(long, value_name = "FILE")]
    labeled: Option<PathBuf>,
    /// RNG seed for random scores and tie-breaking
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Detection score threshold before scoring (default 0.5)
    #[arg(long, value_name = "SCORE")]
    score_threshold: Option<f64>,
    /// Per-frame, per-class NMS IoU threshold before scoring (default 0.5)
    #[arg(long, value_name = "IOU")]
    nms: Option<f64>,
    /// Oracle matching IoU threshold (default 0.5)
    #[arg(long, value_name = "IOU")]
    iou: Option<f64>,
    /// Output CSV path (default selection.csv)
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

fn parse_tc_variant(s: &str) -> Result<TcVariant> {
    match s {
        "fp" => Ok(TcVariant::Fp),
        "fn" => Ok(TcVariant::Fn),
        "fp_fn" => Ok(TcVariant::FpFn),
        _ => Err(Error::validation(format!(
            "unknown tc variant {s:?}; expected fp, fn, or fp_fn"
        ))),
    }
}

fn parse_allocation(s: &str) -> Result<Allocation> {
    match s {
        "proportional" => Ok(Allocation::Proportional),
        "global" => Ok(Allocation::Global),
        _ => Err(Error::validation(format!(
            "unknown allocation {s:?}; expected proportional or global"
        ))),
    }
}

fn parse_interpolation(s: &str) -> Result<Interpolation> {
    match s {
        "all_points" => Ok(Interpolation::AllPoints),
        "eleven_point" => Ok(Interpolation::ElevenPoint),
        _ => Err(Error::validation(format!(
            "unknown interpolation {s:?}; expected all_points or eleven_point"
        ))),
    }
}

/// Per-frame references to the detections surviving the score threshold and
/// NMS, mirroring what evaluation sees.
fn filtered<'a>(frames: &'a [Vec<Detection>], eval: &EvalConfig) -> Vec<Vec<&'a Detection>> {
    frames
        .iter()
        .map(|dets| {
            filter_frame(dets, eval.score_threshold, eval.nms_threshold)
                .into_iter()
                .map(|i| &dets[i])
                .collect()
        })
        .collect()
}

fn frame_scores(
    dataset: &Dataset,
    method: Method,
    variant: TcVariant,
    errors_dir: Option<&Path>,
    eval: &EvalConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<FrameScore>> {
    let mut scores = Vec::new();
    match method {
        Method::Tc => {
            let dir = errors_dir.ok_or_else(|| {
                Error::validation("method tc needs --errors (output of `tcal estimate`)")
            })?;
            for meta in &dataset.manifest.videos {
                let path = dir.join(format!("{}.jsonl", meta.id));
                let file = fs::File::open(&path).map_err(|e| Error::io_at(&path, e))?;
                let frames = read_errors_jsonl(&path, BufReader::new(file))?;
                if frames.len() != meta.num_frames {
                    return Err(Error::validation(format!(
                        "error file for video {:?} covers {} frames, expected {}",
                        meta.id,
                        frames.len(),
                        meta.num_frames
                    )));
                }
                scores.extend(tc_frame_scores(&meta.id, &frames, variant));
            }
        }
        Method::OracleFp | Method::OracleFn => {
            let kind = if method == Method::OracleFp {
                OracleKind::Fp
            } else {
                OracleKind::Fn
            };
            for (meta, data) in dataset.manifest.videos.iter().zip(&dataset.videos) {
                let dets = filtered(&data.detections, eval);
                let gt: Vec<&[GroundTruthObject]> =
                    data.ground_truth.iter().map(|frame| frame.as_slice()).collect();
                scores.extend(oracle_frame_scores(
                    &meta.id,
                    &gt,
                    &dets,
                    kind,
                    eval.iou_threshold,
                ));
            }
        }
        Method::LeastConfidence | Method::Entropy | Method::Margin => {
            let kind = match method {
                Method::LeastConfidence => UncertaintyKind::LeastConfidence,
                Method::Entropy => UncertaintyKind::Entropy,
                _ => UncertaintyKind::Margin,
            };
            for (meta, data) in dataset.manifest.videos.iter().zip(&dataset.videos) {
                let dets = filtered(&data.detections, eval);
                scores.extend(uncertainty_frame_scores(&meta.id, &dets, kind));
            }
        }
        Method::Random | Method::RandomR => {
            for meta in &dataset.manifest.videos {
                scores.extend(random_frame_scores(&meta.id, meta.num_frames, rng));
            }
        }
    }
    Ok(scores)
}

fn cmd_select(args: SelectArgs) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    let method: Method = args.method.parse()?;
    if args.batch == 0 {
        return Err(Error::validation("batch must be positive"));
    }
    let mut eval = config.run.eval;
    if let Some(v) = args.score_threshold {
        eval.score_threshold = v;
    }
    if let Some(v) = args.nms {
        eval.nms_threshold = v;
    }
    if let Some(v) = args.iou {
        eval.iou_threshold = v;
    }
    eval.validate()?;
    let variant = match &args.tc_variant {
        Some(s) => parse_tc_variant(s)?,
        None => config.run.tc_variant,
    };
    let radius = args
        .radius
        .unwrap_or(if method == Method::Random { 0 } else { config.run.radius });
    let allocation = match &args.allocation {
        Some(s) => parse_allocation(s)?,
        None if method == Method::Random => Allocation::Global,
        None => Allocation::Proportional,
    };

    let mut dataset = load_dataset(&args.dataset)?;
    if let Some(dir) = &args.det {
        override_detections(&mut dataset, dir)?;
    }
    let labeled = match &args.labeled {
        Some(path) => FrameSet::from_map(load_frame_map(path)?),
        None => FrameSet::new(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let scores = frame_scores(&dataset, method, variant, args.errors.as_deref(), &eval, &mut rng)?;
    let video_lengths: BTreeMap<String, usize> = dataset
        .manifest
        .videos
        .iter()
        .map(|v| (v.id.clone(), v.num_frames))
        .collect();
    let selection = SelectionConfig {
        batch_size: args.batch,
        radius,
        allocation,
    };
    let batch = select_batch(&scores, &labeled, &video_lengths, &selection, &mut rng)?;

    let out = args.out.unwrap_or_else(|| PathBuf::from("selection.csv"));
    let mut buf = Vec::new();
    write_selection_csv(&[(method.name(), 1, &batch)], &mut buf)?;
    fs::write(&out, buf)?;
    log::info!("selection written to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory
    #[arg(long, value_name = "DIR")]
    dataset: PathBuf,
    /// Detection directory override (see `estimate --det`)
    #[arg(long, value_name = "DIR")]
    det: Option<PathBuf>,
    /// JSON config file; the `run.eval` section seeds the flags below
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Detection score threshold (default 0.5)
    #[arg(long, value_name = "SCORE")]
    score_threshold: Option<f64>,
    /// Per-frame, per-class NMS IoU threshold (default 0.5)
    #[arg(long, value_name = "IOU")]
    nms: Option<f64>,
    /// Matching IoU threshold (default 0.5)
    #[arg(long, value_name = "IOU")]
    iou: Option<f64>,
    /// AP interpolation: all_points or eleven_point (default all_points)
    #[arg(long, value_name = "MODE")]
    interpolation: Option<String>,
    /// Output JSON path (default eval.json)
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    let mut eval = config.run.eval;
    if let Some(v) = args.score_threshold {
        eval.score_threshold = v;
    }
    if let Some(v) = args.nms {
        eval.nms_threshold = v;
    }
    if let Some(v) = args.iou {
        eval.iou_threshold = v;
    }
    if let Some(s) = &args.interpolation {
        eval.interpolation = parse_interpolation(s)?;
    }
    eval.validate()?;

    let mut dataset = load_dataset(&args.dataset)?;
    if let Some(dir) = &args.det {
        override_detections(&mut dataset, dir)?;
    }
    let frames: Vec<(&[GroundTruthObject], &[Detection])> = dataset
        .videos
        .iter()
        .flat_map(|v| v.ground_truth.iter().zip(&v.detections))
        .map(|(gt, dets)| (gt.as_slice(), dets.as_slice()))
        .collect();
    let report = evaluate(&frames, dataset.manifest.num_classes(), &eval);

    let out = args.out.unwrap_or_else(|| PathBuf::from("eval.json"));
    let mut buf = Vec::new();
    write_eval_json(&report, &dataset.manifest.classes, &mut buf)?;
    fs::write(&out, buf)?;
    log::info!("report written to {} (mAP {:.6})", out.display(), report.mean_ap);
    Ok(())
}

// ---------------------------------------------------------------- simulate

#[derive(Args)]
struct SimulateArgs {
    /// JSON config file with world, run, methods, and seeds sections
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Comma-separated methods to compare (default: all eight)
    #[arg(long, value_name = "LIST")]
    methods: Option<String>,
    /// Comma-separated run seeds (default: 0)
    #[arg(long, value_name = "LIST")]
    seeds: Option<String>,
    /// Labeling cycles override
    #[arg(long, value_name = "N")]
    cycles: Option<usize>,
    /// Worker threads for parallel runs
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn parse_methods(list: &str) -> Result<Vec<Method>> {
    list.split(',').map(|s| s.trim().parse()).collect()
}

fn parse_seeds(list: &str) -> Result<Vec<u64>> {
    list.split(',')
        .map(|s| {
            let s = s.trim();
            s.parse::<u64>()
                .map_err(|e| Error::validation(format!("bad seed {s:?}: {e}")))
        })
        .collect()
}

fn reject_duplicates<T: Ord + std::fmt::Display>(items: &[T], what: &str) -> Result<()> {
    let mut seen = BTreeSet::new();
    for item in items {
        if !seen.insert(item) {
            return Err(Error::validation(format!("duplicate {what} {item}")));
        }
    }
    Ok(())
}

/// Full provenance of one run, enough to regenerate its world and curve.
#[derive(Serialize)]
struct RunManifest<'a> {
    method: &'a str,
    seed: u64,
    world: &'a WorldConfig,
    run: &'a LoopConfig,
}

/// Merged curve file: every run's points prefixed with (method, seed), rows
/// ordered by method name, then seed, then cycle.
fn write_merged_csv(results: &[RunResult], classes: &[String], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    let mut w = csv::Writer::from_writer(&mut buf);
    let mut header = vec![
        "method".to_string(),
        "seed".to_string(),
        "cycle".to_string(),
        "labeled_frames".to_string(),
        "labeled_fraction".to_string(),
        "mAP".to_string(),
    ];
    header.extend(classes.iter().map(|c| format!("ap_{c}")));
    w.write_record(&header).map_err(|e| Error::validation(e.to_string()))?;
    for result in results {
        for p in &result.curve {
            let mut row = vec![
                result.method.name().to_string(),
                result.seed.to_string(),
                p.cycle.to_string(),
                p.labeled_frames.to_string(),
                format!("{:.6}", p.labeled_fraction),
                format!("{:.6}", p.report.mean_ap),
            ];
            row.extend(p.report.per_class_ap.iter().map(|ap| match ap {
                Some(v) => format!("{v:.6}"),
                None => String::new(),
            }));
            w.write_record(&row).map_err(|e| Error::validation(e.to_string()))?;
        }
    }
    w.flush()?;
    drop(w);
    fs::write(path, buf)?;
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(list) = &args.methods {
        config.methods = parse_methods(list)?;
    }
    if let Some(list) = &args.seeds {
        config.seeds = parse_seeds(list)?;
    }
    if let Some(c) = args.cycles {
        config.run.cycles = c;
    }
    if args.jobs == 0 {
        return Err(Error::validation("jobs must be positive"));
    }
    if config.methods.is_empty() {
        return Err(Error::validation("simulate needs at least one method"));
    }
    if config.seeds.is_empty() {
        return Err(Error::validation("simulate needs at least one seed"));
    }
    let names: Vec<&str> = config.methods.iter().map(|m| m.name()).collect();
    reject_duplicates(&names, "method")?;
    reject_duplicates(&config.seeds, "seed")?;
    config.world.validate()?;
    config.run.validate()?;

    // One world per seed, shared across methods, exactly as a fixed labeling
    // campaign would be re-run with different acquisition functions.
    let mut pairs: Vec<(Method, u64)> = config
        .methods
        .iter()
        .flat_map(|&m| config.seeds.iter().map(move |&s| (m, s)))
        .collect();
    pairs.sort_by(|a, b| a.0.name().cmp(b.0.name()).then(a.1.cmp(&b.1)));

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(|e| Error::validation(e.to_string()))?;
    let results: Vec<RunResult> = pool.install(|| -> Result<_> {
        let worlds: BTreeMap<u64, World> = config
            .seeds
            .par_iter()
            .map(|&s| generate_world(&config.world, s).map(|w| (s, w)))
            .collect::<Result<_>>()?;
        pairs
            .par_iter()
            .map(|&(m, s)| run_loop(&worlds[&s], m, &config.run, s))
            .collect()
    })?;

    fs::create_dir_all(&args.out)?;
    let classes = &config.world.classes;
    for result in &results {
        let dir = args
            .out
            .join(format!("{}_seed{}", result.method.name(), result.seed));
        fs::create_dir_all(&dir)?;

        let mut buf = Vec::new();
        write_curve_csv(&result.curve, classes, &mut buf)?;
        fs::write(dir.join("curve.csv"), buf)?;

        let rows: Vec<(&str, usize, &SelectionBatch)> = result
            .selections
            .iter()
            .map(|s| (result.method.name(), s.cycle, &s.batch))
            .collect();
        let mut buf = Vec::new();
        write_selection_csv(&rows, &mut buf)?;
        fs::write(dir.join("selection.csv"), buf)?;

        let manifest = RunManifest {
            method: result.method.name(),
            seed: result.seed,
            world: &config.world,
            run: &config.run,
        };
        let mut text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::validation(e.to_string()))?;
        text.push('\n');
        fs::write(dir.join("manifest.json"), text)?;

        log::info!(
            "{} seed {}: mAP {:.4} -> {:.4}",
            result.method.name(),
            result.seed,
            result.curve.first().map_or(0.0, |p| p.report.mean_ap),
            result.curve.last().map_or(0.0, |p| p.report.mean_ap),
        );
    }
    write_merged_csv(&results, classes, &args.out.join("merged.csv"))?;
    log::info!("curves written to {}", args.out.display());
    Ok(())
}
