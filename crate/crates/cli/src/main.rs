use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;

use vistask_core::aligner::{forward, load_checkpoint, save_checkpoint, train, AlignerModel, TrainConfig};
use vistask_core::data::{load_annotations, parse_results, read_grids, results_to_json, write_grids, Dataset, GridStack};
use vistask_core::decode::{decode_output, decode_task, DecodeConfig, DecodeInput, TaskResult};
use vistask_core::encode::{encode_category, encode_keypoints, encode_segmentation, EncodeConfig};
use vistask_core::eval::{cumulative_iou, detection_map, keypoint_map, segmentation_map, ImagePair, OksParams};
use vistask_core::grid::{BBox, BinaryMask, Grid, Heatmap, Instance, Keypoint, TaskKind, Visibility};
use vistask_core::pipeline::{run_demo, DemoConfig, SyntheticTask};

#[derive(Parser)]
#[command(name = "vistask", version, about = "Heatmap alignment toolkit for synthetic vision tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene set with embeddings.
    Synth(SynthArgs),
    /// Turn annotations into target heatmaps.
    Encode(EncodeArgs),
    /// Fit an aligner on a synthetic scene set.
    Train(TrainArgs),
    /// Decode heatmaps (from a file or a checkpoint) into task outputs.
    Decode(DecodeArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Count objects in a heatmap file.
    Count(CountArgs),
    /// Synthesize, train, decode and evaluate in one run.
    Demo(DemoArgs),
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    images: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    grid: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum EncodeTask {
    Detect,
    Segment,
    Pose,
}

#[derive(clap::Args)]
struct EncodeArgs {
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    grid: usize,
    #[arg(long, value_enum, default_value_t = EncodeTask::Detect)]
    task: EncodeTask,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Directory written by `synth`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Defaults to the grid of the scene set.
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long, default_value_t = 8)]
    batch: usize,
}

#[derive(clap::Args)]
struct DecodeArgs {
    #[arg(long, value_parser = parse_task)]
    task: TaskKind,
    /// LUMH file: [heatmap, h, w] for box tasks, one channel per keypoint
    /// for pose, a heatmap for counting.
    #[arg(long, conflicts_with_all = ["checkpoint", "data", "query"])]
    heatmap: Option<PathBuf>,
    #[arg(long, requires_all = ["data", "query"])]
    checkpoint: Option<PathBuf>,
    /// Directory written by `synth`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Category name to query.
    #[arg(long)]
    query: Option<String>,
    #[arg(long, default_value_t = 0)]
    image_id: u64,
    /// Category recorded on heatmap-file outputs.
    #[arg(long, default_value_t = 0)]
    category: u64,
    #[arg(long, default_value_t = 448.0)]
    width: f64,
    #[arg(long, default_value_t = 448.0)]
    height: f64,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    nms_iou: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Box,
    Mask,
    Oks,
    Ciou,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    gt: PathBuf,
    /// JSON array of scored annotation records.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, value_enum)]
    metric: Metric,
    #[arg(long)]
    json: bool,
}

#[derive(clap::Args)]
struct CountArgs {
    #[arg(long)]
    heatmap: PathBuf,
    #[arg(long, default_value_t = 0.3)]
    threshold: f64,
}

#[derive(clap::Args)]
struct DemoArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 500)]
    train_images: usize,
    #[arg(long, default_value_t = 100)]
    test_images: usize,
    #[arg(long)]
    json: bool,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

/// Bad flag combinations found after parsing; exits like a parse error.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn parse_task(s: &str) -> std::result::Result<TaskKind, String> {
    TaskKind::parse(s).ok_or_else(|| format!("unknown task {s:?} (detect, ground, segment, refsegment, pose, count)"))
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = DemoConfig {
        seed: a.seed,
        train_images: a.images,
        ..DemoConfig::default()
    };
    cfg.aligner.grid = a.grid;
    cfg.aligner.dim = a.dim;
    cfg.synth.classes = a.classes;
    cfg.synth.noise_sigma = a.noise;
    let task = cfg.train_task()?;
    task.save(&a.out)?;
    println!("images={} instances={}", task.dataset.images.len(), task.dataset.num_instances());
    Ok(())
}

fn encode(a: EncodeArgs) -> Result<()> {
    let dataset = load_annotations(&a.annotations)?;
    let cfg = EncodeConfig {
        grid: a.grid,
        ..EncodeConfig::default()
    };
    fs::create_dir_all(&a.out)?;
    let g = a.grid;
    let mut files = 0;
    for im in &dataset.images {
        let insts = dataset.instances(im.id);
        match a.task {
            EncodeTask::Detect | EncodeTask::Segment => {
                let by_cat = match a.task {
                    EncodeTask::Segment => Some(encode_segmentation(insts, im.width, im.height, &cfg)?),
                    _ => None,
                };
                for cat in &dataset.categories {
                    let t = match &by_cat {
                        Some(s) => s.per_category.get(&cat.id).cloned(),
                        None => Some(encode_category(insts, cat.id, im.width, im.height, &cfg)?),
                    };
                    let (heat, h, w) = match &t {
                        Some(t) => (t.heatmap.data().to_vec(), t.sizes.h_map.clone(), t.sizes.w_map.clone()),
                        None => (vec![0.0; g * g], vec![0.0; g * g], vec![0.0; g * g]),
                    };
                    let stack = GridStack::from_channels(g, g, &[&heat, &h, &w])?;
                    let path = a.out.join(format!("{}_{}.lumh", im.id, cat.id));
                    write_grids(fs::File::create(path)?, &stack)?;
                    files += 1;
                }
            }
            EncodeTask::Pose => {
                let Some(schema) = &dataset.keypoints else {
                    bail!("annotations have no keypoint schema");
                };
                let maps = (0..schema.names.len())
                    .map(|k| encode_keypoints(insts, k, im.width, im.height, &cfg))
                    .collect::<vistask_core::Result<Vec<_>>>()?;
                let stack = GridStack::from_heatmaps(&maps)?;
                write_grids(fs::File::create(a.out.join(format!("{}_pose.lumh", im.id)))?, &stack)?;
                files += 1;
            }
        }
    }
    println!("files={files}");
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let task = SyntheticTask::load(&a.data)?;
    let grid = a.grid.unwrap_or(task.encode.grid);
    if grid != task.encode.grid {
        return Err(usage(format!("--grid {grid} does not match the scene grid {}", task.encode.grid)));
    }
    if a.dim != task.protos.dim() {
        return Err(usage(format!("--dim {} does not match the embedding dim {}", a.dim, task.protos.dim())));
    }
    let cfg = DemoConfig {
        seed: a.seed,
        ..DemoConfig::default()
    };
    let mut aligner = cfg.aligner;
    aligner.dim = a.dim;
    aligner.grid = grid;
    let mut model = AlignerModel::new(aligner, vistask_core::math::mix_seed(a.seed, 4))?;
    let tcfg = TrainConfig {
        steps: a.steps,
        lr: a.lr,
        batch_size: a.batch,
        ..cfg.train_config()
    };
    let report = train(&mut model, &task.training_set(), &tcfg)?;
    save_checkpoint(&model, &a.checkpoint)?;
    let smooth = report.smoothed(10);
    println!(
        "steps={}\nloss.initial={:.6}\nloss.final={:.6}",
        report.losses.len(),
        smooth.first().copied().unwrap_or(f64::NAN),
        smooth.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn grid_channel(stack: &GridStack, ch: usize) -> Result<Grid> {
    Ok(Grid::new(stack.rows, stack.cols, stack.channel(ch))?)
}

fn heatmap_channel(stack: &GridStack, ch: usize) -> Result<Heatmap> {
    Ok(Heatmap::new(stack.rows, stack.cols, stack.channel(ch))?)
}

fn decode_config(a: &DecodeArgs) -> DecodeConfig {
    let mut cfg = DecodeConfig::for_task(a.task);
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(v) = a.nms_iou {
        cfg.nms_iou = v;
    }
    if let Some(v) = a.threshold {
        cfg.score_threshold = v;
    }
    cfg
}

fn results_to_records(result: TaskResult, image_id: u64, category: u64, w: f64, h: f64) -> Result<Value> {
    let records: Vec<(u64, Instance)> = match result {
        TaskResult::Count(n) => return Ok(serde_json::json!({ "count": n })),
        TaskResult::Boxes(dets) => dets
            .into_iter()
            .map(|d| (image_id, Instance::new(category, d.bbox).with_score(d.score)))
            .collect(),
        TaskResult::Masks(segs) => segs
            .into_iter()
            .map(|s| {
                (
                    image_id,
                    Instance::new(category, s.prompt.bbox)
                        .with_score(s.prompt.score)
                        .with_mask(s.mask),
                )
            })
            .collect(),
        TaskResult::Keypoints(points) => {
            let score = points.iter().map(|p| p.score).sum::<f64>() / points.len().max(1) as f64;
            let kps = points
                .iter()
                .map(|p| Keypoint {
                    x: p.x,
                    y: p.y,
                    visibility: Visibility::Visible,
                })
                .collect();
            let inst = Instance::new(category, BBox::new(0.0, 0.0, w, h)?)
                .with_keypoints(kps)
                .with_score(score.clamp(0.0, 1.0));
            vec![(image_id, inst)]
        }
    };
    Ok(results_to_json(&records)?)
}

fn decode_from_file(a: &DecodeArgs, path: &Path, cfg: &DecodeConfig) -> Result<TaskResult> {
    let stack = read_grids(fs::File::open(path).with_context(|| format!("opening {}", path.display()))?)?;
    let result = match a.task {
        TaskKind::Pose => {
            let maps = (0..stack.channels)
                .map(|ch| heatmap_channel(&stack, ch))
                .collect::<Result<Vec<_>>>()?;
            decode_task(DecodeInput::Keypoints(&maps), a.task, cfg, a.width, a.height)?
        }
        TaskKind::Count => {
            let hm = heatmap_channel(&stack, 0)?;
            decode_task(DecodeInput::Heatmap(&hm), a.task, cfg, a.width, a.height)?
        }
        _ => {
            if stack.channels != 3 {
                bail!("{} has {} channels; box tasks need [heatmap, h, w]", path.display(), stack.channels);
            }
            let hm = heatmap_channel(&stack, 0)?;
            let (h, w) = (grid_channel(&stack, 1)?, grid_channel(&stack, 2)?);
            let input = DecodeInput::Dense {
                heatmap: &hm,
                h_map: &h,
                w_map: &w,
            };
            decode_task(input, a.task, cfg, a.width, a.height)?
        }
    };
    Ok(result)
}

fn decode(a: DecodeArgs) -> Result<()> {
    let cfg = decode_config(&a);
    let (result, category, w, h) = match (&a.heatmap, &a.checkpoint) {
        (Some(path), None) => (decode_from_file(&a, path, &cfg)?, a.category, a.width, a.height),
        (None, Some(ck)) => {
            let (dir, query) = (a.data.as_ref().unwrap(), a.query.as_ref().unwrap());
            let model = load_checkpoint(ck)?;
            let task = SyntheticTask::load(dir)?;
            let image = task
                .dataset
                .image(a.image_id)
                .with_context(|| format!("no image {} in {}", a.image_id, dir.display()))?;
            let (w, h) = (image.width, image.height);
            let category = task
                .dataset
                .categories
                .iter()
                .find(|c| &c.name == query)
                .with_context(|| format!("no category named {query:?}"))?
                .id;
            let emb = SyntheticTask::load_embeddings(dir, a.image_id)?;
            let result = if a.task == TaskKind::Pose {
                let maps = task
                    .protos
                    .keypoints
                    .iter()
                    .map(|p| Ok(forward(&model, &emb, p)?.0.heatmap()))
                    .collect::<Result<Vec<_>>>()?;
                decode_task(DecodeInput::Keypoints(&maps), a.task, &cfg, w, h)?
            } else {
                let (out, _) = forward(&model, &emb, task.protos.class(category)?)?;
                decode_output(&out, a.task, &cfg, w, h)?
            };
            (result, category, w, h)
        }
        _ => return Err(usage("give either --heatmap or --checkpoint with --data and --query")),
    };
    let records = results_to_records(result, a.image_id, category, w, h)?;
    emit(&(serde_json::to_string_pretty(&records)? + "\n"), a.out.as_deref())
}

fn union_mask(dataset: &Dataset, image_id: u64, rows: usize, cols: usize) -> Result<BinaryMask> {
    let mut bits = vec![false; rows * cols];
    for inst in dataset.instances(image_id) {
        let Some(m) = &inst.mask else {
            bail!("image {image_id} has an instance without a mask");
        };
        if (m.rows(), m.cols()) != (rows, cols) {
            bail!("image {image_id} has a {}x{} mask, expected {rows}x{cols}", m.rows(), m.cols());
        }
        for (b, &v) in bits.iter_mut().zip(m.bits()) {
            *b |= v;
        }
    }
    Ok(BinaryMask::new(rows, cols, bits)?)
}

fn eval(a: EvalArgs) -> Result<()> {
    let gt = load_annotations(&a.gt)?;
    let pred = parse_results(&fs::read_to_string(&a.pred)?, &gt)?;
    let pairs: Vec<ImagePair> = gt
        .images
        .iter()
        .map(|im| ImagePair {
            gt: gt.instances(im.id),
            pred: pred.instances(im.id),
        })
        .collect();
    let report = match a.metric {
        Metric::Box => detection_map(&pairs)?,
        Metric::Mask => segmentation_map(&pairs)?,
        Metric::Oks => {
            let params = match &gt.keypoints {
                Some(s) => OksParams {
                    kappas: s.kappas.clone(),
                    area_floor: 1.0,
                },
                None => bail!("ground truth has no keypoint schema"),
            };
            keypoint_map(&pairs, &params)?
        }
        Metric::Ciou => {
            let (mut p, mut g) = (Vec::new(), Vec::new());
            for im in &gt.images {
                let (rows, cols) = (im.height.round() as usize, im.width.round() as usize);
                p.push(union_mask(&pred, im.id, rows, cols)?);
                g.push(union_mask(&gt, im.id, rows, cols)?);
            }
            let ciou = cumulative_iou(&p, &g)?;
            if a.json {
                println!("{}", serde_json::json!({ "metric": "ciou", "ciou": ciou }));
            } else {
                println!("metric=ciou\nciou={ciou:.6}");
            }
            return Ok(());
        }
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn count(a: CountArgs) -> Result<()> {
    let stack = read_grids(fs::File::open(&a.heatmap).with_context(|| format!("opening {}", a.heatmap.display()))?)?;
    let hm = heatmap_channel(&stack, 0)?;
    let cfg = DecodeConfig {
        score_threshold: a.threshold,
        ..DecodeConfig::for_task(TaskKind::Count)
    };
    let TaskResult::Count(n) = decode_task(DecodeInput::Heatmap(&hm), TaskKind::Count, &cfg, 1.0, 1.0)? else {
        unreachable!("count decodes to a number")
    };
    println!("{n}");
    Ok(())
}

fn demo(a: DemoArgs) -> Result<()> {
    let mut cfg = DemoConfig {
        seed: a.seed,
        train_images: a.train_images,
        test_images: a.test_images,
        ..DemoConfig::default()
    };
    cfg.train.steps = a.steps;
    let (model, report) = run_demo(&cfg)?;
    if let Some(p) = &a.checkpoint {
        save_checkpoint(&model, p)?;
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Encode(a) => encode(a),
        Command::Train(a) => train_cmd(a),
        Command::Decode(a) => decode(a),
        Command::Eval(a) => eval(a),
        Command::Count(a) => count(a),
        Command::Demo(a) => demo(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
