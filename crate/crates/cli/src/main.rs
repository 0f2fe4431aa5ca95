use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use segvggt::eval::{
    attention_entropy, depth_metrics, map_suite, scene_instances, DepthSummary, MetricsReport,
    ProtocolOptions, REPORT_SCHEMA_VERSION,
};
use segvggt::fada::marginalize_frames;
use segvggt::model::{load_checkpoint, Model, ModelOutputs};
use segvggt::numerics::Tape;
use segvggt::recon::{
    assemble_instances, predictions_from_outputs, read_predictions, write_predictions, DepthBlock,
    PredictionFile,
};
use segvggt::scenegen::{
    build_scene, generate_dataset, generate_scene, read_dataset, read_scene_dir, write_dataset,
    write_f64_raster, CameraParams, DatasetConfig, LayoutBounds, RenderedScene,
};
use segvggt::train::{infer, FadaMode, TrainConfig, Trainer};

const ATTENTION_MAGIC: &[u8; 4] = b"SVAT";

#[derive(Parser)]
#[command(
    name = "segvggt",
    version,
    about = "Multi-view 3D instance segmentation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset split
    Gen(GenArgs),
    /// Train a model from a JSON config
    Train(TrainArgs),
    /// Predict instances for one scene
    Infer(InferArgs),
    /// Score a prediction file against a ground-truth scene
    Eval(EvalArgs),
    /// Dump query attention for one layer
    Attn(AttnArgs),
    /// Time the inference stages
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    scenes: usize,
    #[arg(long, default_value_t = 4)]
    views: usize,
    #[arg(long, default_value = "64x64", value_parser = parse_res)]
    res: (usize, usize),
    #[arg(long, default_value = "3..6", value_parser = parse_range)]
    objects: (usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    fada: Option<FadaMode>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    class_agnostic: bool,
    #[arg(long)]
    superpoints: bool,
    /// Voxel size of the superpoint grid
    #[arg(long, default_value_t = 0.25)]
    superpoint_cell: f64,
}

#[derive(Args)]
struct AttnArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    query: usize,
    #[arg(long)]
    layer: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
    frames: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
}

fn parse_res(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once('x')
        .ok_or_else(|| format!("expected HxW, got '{s}'"))?;
    let h: usize = h.parse().map_err(|e| format!("height: {e}"))?;
    let w: usize = w.parse().map_err(|e| format!("width: {e}"))?;
    if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
        return Err(format!(
            "resolution {h}x{w} must be positive multiples of 4"
        ));
    }
    Ok((h, w))
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (lo, hi) = s
        .split_once("..")
        .ok_or_else(|| format!("expected LO..HI, got '{s}'"))?;
    let lo: usize = lo.parse().map_err(|e| format!("low end: {e}"))?;
    let hi: usize = hi.parse().map_err(|e| format!("high end: {e}"))?;
    if lo == 0 || lo > hi {
        return Err(format!("object range {lo}..{hi} is empty"));
    }
    Ok((lo, hi))
}

/// Worker cap from `SEGVGGT_THREADS`, defaulting to the core count.
fn threads() -> Result<usize> {
    match std::env::var("SEGVGGT_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => bail!("SEGVGGT_THREADS must be a positive integer, got '{v}'"),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn emit(v: &Value) {
    println!("{v}");
}

fn load_model(path: &Path) -> Result<Model> {
    let (config, params) =
        load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Model::from_parts(config, params)?)
}

fn load_scene(dir: &Path, model: &Model) -> Result<RenderedScene> {
    let scene = read_scene_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
    let c = &model.config;
    if (scene.height(), scene.width()) != (c.height, c.width) {
        bail!(
            "scene is {}x{} but the model expects {}x{}",
            scene.height(),
            scene.width(),
            c.height,
            c.width
        );
    }
    Ok(scene)
}

fn scene_images(scene: &RenderedScene) -> Vec<&[f64]> {
    scene.views.iter().map(|v| v.rgb.as_slice()).collect()
}

fn gen(a: GenArgs) -> Result<()> {
    let cfg = DatasetConfig {
        scenes: a.scenes,
        views: a.views,
        height: a.res.0,
        width: a.res.1,
        min_objects: a.objects.0,
        max_objects: a.objects.1,
        seed: a.seed,
        layout: LayoutBounds::default(),
    };
    emit(&json!({ "command": "gen", "out": a.out, "config": cfg }));
    if cfg.scenes == 0 || cfg.views < 2 {
        bail!("need at least one scene and two views per scene");
    }
    let scenes = generate_dataset(&cfg, threads()?)?;
    write_dataset(&scenes, &a.out)?;
    let instances: usize = scenes.iter().map(|s| s.instances.len()).sum();
    emit(&json!({
        "scenes": scenes.len(),
        "views": cfg.views,
        "resolution": [cfg.height, cfg.width],
        "instances": instances,
        "names": scenes.iter().map(|s| s.name.clone()).collect::<Vec<_>>(),
    }));
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let text =
        fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let mut cfg: TrainConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", a.config.display()))?;
    if let Some(mode) = a.fada {
        cfg.fada = mode;
    }
    cfg.validate()?;
    emit(&json!({ "command": "train", "out": a.out, "config": cfg }));
    let (_, scenes) = read_dataset(&cfg.dataset)
        .with_context(|| format!("reading dataset {}", cfg.dataset.display()))?;
    let log_path = a.out.with_extension("log.jsonl");
    let mut log = std::io::BufWriter::new(
        fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    let mut trainer = Trainer::new(cfg, scenes)?;
    let started = Instant::now();
    let mut last = None;
    let mut write_err = None;
    trainer.run(Some(&a.out), |l| {
        if let Err(e) = writeln!(log, "{}", serde_json::to_string(l).expect("log serializes")) {
            write_err.get_or_insert(e);
        }
        last = Some(l.loss);
    })?;
    log.flush()?;
    if let Some(e) = write_err {
        return Err(e).context(format!("writing {}", log_path.display()));
    }
    emit(&json!({
        "steps": trainer.steps_done(),
        "final_loss": last,
        "seconds": started.elapsed().as_secs_f64(),
        "checkpoint": a.out,
        "log": log_path,
    }));
    Ok(())
}

fn infer_cmd(a: InferArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    emit(
        &json!({ "command": "infer", "ckpt": a.ckpt, "scene": a.scene, "out": a.out, "model": model.config }),
    );
    let scene = load_scene(&a.scene, &model)?;
    let res = (model.config.height, model.config.width);
    let r = infer(&model, &scene_images(&scene))?;
    let file = PredictionFile::from_parts(
        &r.cloud,
        &r.predictions,
        scene.views.len(),
        Some(DepthBlock {
            res,
            depths: r.outputs.depths.clone(),
        }),
    );
    write_predictions(&a.out, &file)?;
    emit(&json!({
        "instances": file.instances.len(),
        "points": r.cloud.points.len(),
        "views": scene.views.len(),
    }));
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let opts = ProtocolOptions {
        superpoint_cell: a.superpoints.then_some(a.superpoint_cell),
        ..ProtocolOptions::default()
    };
    emit(&json!({
        "command": "eval",
        "pred": a.pred,
        "gt": a.gt,
        "class_agnostic": a.class_agnostic,
        "visibility_eps": opts.visibility_eps,
        "superpoint_cell": opts.superpoint_cell,
    }));
    if !(a.superpoint_cell > 0.0) {
        bail!("superpoint cell must be positive");
    }
    let file = read_predictions(&a.pred)?;
    let scene = read_scene_dir(&a.gt).with_context(|| format!("reading {}", a.gt.display()))?;
    let preds = match file.predictions() {
        Some(p) => p,
        None if file.instances.is_empty() => vec![],
        None => bail!("{} carries no per-view masks", a.pred.display()),
    };
    let (p, g) = scene_instances(0, &scene, &preds, &opts)?;
    let depth = match &file.depths {
        Some(block) => {
            if block.res != (scene.height(), scene.width())
                || block.depths.len() != scene.views.len()
            {
                bail!("depth block does not match the ground-truth views");
            }
            let pred: Vec<f64> = block.depths.iter().flatten().copied().collect();
            let gt: Vec<f64> = scene
                .views
                .iter()
                .flat_map(|v| v.depth.iter().copied())
                .collect();
            DepthSummary::from_scenes(vec![depth_metrics(&pred, &gt)?])
        }
        None => None,
    };
    let report = MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        instance: map_suite(&p, &g, a.class_agnostic),
        depth,
        entropy: None,
        scenes: 1,
    };
    emit(&serde_json::to_value(&report)?);
    Ok(())
}

fn attn(a: AttnArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let c = model.config;
    emit(&json!({
        "command": "attn", "ckpt": a.ckpt, "scene": a.scene, "query": a.query,
        "layer": a.layer, "out": a.out, "model": c,
    }));
    if a.layer >= c.layers {
        bail!("layer {} out of range, the model has {}", a.layer, c.layers);
    }
    if a.query >= c.queries {
        bail!(
            "query {} out of range, the model has {}",
            a.query,
            c.queries
        );
    }
    let scene = load_scene(&a.scene, &model)?;
    let out = model.predict(&scene_images(&scene))?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let bounds = &out.view_bounds;
    let row = &out.attention[a.layer][a.query];
    let marginal = marginalize_frames(row, bounds)?;
    let (ph, pw) = (c.height / c.patch, c.width / c.patch);
    let special = segvggt::model::SPECIAL_TOKENS;
    let mut frames = Vec::new();
    for i in 0..out.views {
        let seg = &row[bounds[i]..bounds[i + 1]];
        let patches = a.out.join(format!("frame_{i}.svat"));
        let tokens = a.out.join(format!("frame_{i}_special.svat"));
        write_f64_raster(&patches, ATTENTION_MAGIC, ph, pw, &seg[special..])?;
        write_f64_raster(&tokens, ATTENTION_MAGIC, 1, special, &seg[..special])?;
        frames.push(json!({
            "frame": i,
            "marginal": marginal[i],
            "patch_mass": seg[special..].iter().sum::<f64>(),
            "special_mass": seg[..special].iter().sum::<f64>(),
        }));
    }
    let table = entropy_table(&out)?;
    let summary = json!({
        "layer": a.layer,
        "query": a.query,
        "marginal": marginal,
        "entropy": attention_entropy(&marginal),
        "token_entropy": attention_entropy(row),
        "frames": frames,
        "entropy_table": table,
    });
    let path = a.out.join("entropy.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?)
        .with_context(|| format!("writing {}", path.display()))?;
    emit(&summary);
    Ok(())
}

/// `[layer][query]` entropy of the frame marginal.
fn entropy_table(out: &ModelOutputs) -> Result<Vec<Vec<f64>>> {
    out.attention
        .iter()
        .map(|layer| {
            layer
                .iter()
                .map(|row| {
                    Ok(attention_entropy(&marginalize_frames(
                        row,
                        &out.view_bounds,
                    )?))
                })
                .collect()
        })
        .collect()
}

/// Peak resident set size in KiB, where the platform exposes it.
fn peak_rss_kib() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find_map(|l| l.strip_prefix("VmHWM:"))
        .and_then(|v| v.trim().trim_end_matches("kB").trim().parse().ok())
}

fn bench(a: BenchArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let c = model.config;
    emit(&json!({
        "command": "bench", "ckpt": a.ckpt, "frames": a.frames, "repeats": a.repeats, "model": c,
    }));
    if a.repeats == 0 || a.frames.is_empty() || a.frames.iter().any(|&n| n < 2) {
        bail!("need at least one repeat and frame counts of at least 2");
    }
    let workers = threads()?;
    let mut runs = Vec::new();
    for &n in &a.frames {
        let spec = generate_scene(0, 4, n, &LayoutBounds::default())?;
        let scene = build_scene(&spec, "bench", (c.height, c.width), workers)?;
        let images = scene_images(&scene);
        let mut totals = [0.0f64; 4];
        // one untimed warmup run, then the timed repeats
        for r in 0..=a.repeats {
            let t = stage_times(&model, &images)?;
            if r > 0 {
                totals.iter_mut().zip(t).for_each(|(s, v)| *s += v);
            }
        }
        let mean = totals.map(|s| s / a.repeats as f64);
        runs.push(json!({
            "frames": n,
            "repeats": a.repeats,
            "embed_ms": mean[0],
            "aggregator_ms": mean[1],
            "heads_ms": mean[2],
            "assembly_ms": mean[3],
            "total_ms": mean.iter().sum::<f64>(),
        }));
    }
    emit(
        &json!({ "runs": runs, "peak_rss_kib": peak_rss_kib(), "parameters": model.params.numel() }),
    );
    Ok(())
}

fn stage_times(model: &Model, images: &[&[f64]]) -> Result<[f64; 4]> {
    let c = &model.config;
    let ms = |t: Instant| t.elapsed().as_secs_f64() * 1e3;
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false);
    let t = Instant::now();
    let t0 = model.embed(&mut tape, &b, images)?;
    let embed = ms(t);
    let t = Instant::now();
    let agg = model.aggregate(&mut tape, &b, t0, images.len())?;
    let aggregator = ms(t);
    let t = Instant::now();
    let fwd = model.decode(&mut tape, &b, agg)?;
    let outputs = ModelOutputs::extract(&tape, &fwd, c);
    let heads = ms(t);
    let t = Instant::now();
    let preds = predictions_from_outputs(&outputs, c);
    let cams: Vec<CameraParams> = outputs
        .cameras
        .iter()
        .map(|v| CameraParams::from_vector(v))
        .collect();
    assemble_instances(&preds, &outputs.depths, &cams, (c.height, c.width))?;
    Ok([embed, aggregator, heads, ms(t)])
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Attn(a) => attn(a),
        Command::Bench(a) => bench(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // help and version exit 0, usage errors exit 2
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
