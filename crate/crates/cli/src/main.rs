use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand};
use image::GrayImage;

use pdanet::checkpoint::load_checkpoint;
use pdanet::config::SigmaMode;
use pdanet::data_io::{load_annotations, load_manifest_scenes, save_density_map, AnnotatedScene};
use pdanet::density_gt::{downsample_preserving_count, scene_density};
use pdanet::evaluation::{count_from_density, evaluate_checkpoint, report, report_json};
use pdanet::synthetic::{generate_dataset, SynthSpec};
use pdanet::training::{to_legal_size, train};
use pdanet::{DensityMap, PdaNet, PdaNetConfig};

#[derive(Parser, Debug)]
#[command(name = "pdanet", version, about = "Crowd density estimation toolkit")]
struct Cli {
    /// key=value config file; explicit flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.beta2=0.99`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic annotated dataset and its manifest.
    Synth(SynthArgs),
    /// Render ground-truth density maps.
    Gt(GtArgs),
    /// Train a model and write a checkpoint plus a loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Count people in one image and write a heatmap.
    Infer(InferArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 256)]
    height: u32,
    #[arg(long, default_value_t = 256)]
    width: u32,
    #[arg(long, default_value_t = 0)]
    min_people: usize,
    #[arg(long, default_value_t = 100)]
    max_people: usize,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("input").required(true).args(["manifest", "annotation"])))]
struct GtArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    annotation: Option<PathBuf>,
    #[arg(long, value_parser = ["knn", "fixed"])]
    sigma_mode: Option<String>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Block-sum factor applied after rendering.
    #[arg(long, default_value_t = 1)]
    stride: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
}

fn resolve_config(cli: &Cli) -> Result<PdaNetConfig> {
    let mut config = match &cli.config {
        Some(path) => PdaNetConfig::from_file(path).with_context(|| format!("reading config {}", path.display()))?,
        None => PdaNetConfig::default(),
    };
    for kv in &cli.set {
        let (key, value) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        config.set(key, value)?;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn out_dir(cli: &Cli, default: &str) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn cmd_synth(cli: &Cli, args: &SynthArgs) -> Result<()> {
    if args.min_people > args.max_people {
        bail!("--min-people must not exceed --max-people");
    }
    let config = resolve_config(cli)?;
    let specs: Vec<_> = (0..args.count)
        .map(|i| SynthSpec::varied(config.seed, i, args.height, args.width, (args.min_people, args.max_people)))
        .collect();
    let manifest = generate_dataset(&specs, out_dir(cli, "synth")?)?;
    println!("{} scenes, manifest {}", specs.len(), manifest.display());
    Ok(())
}

fn cmd_gt(cli: &Cli, args: &GtArgs) -> Result<()> {
    let mut config = resolve_config(cli)?;
    if let Some(mode) = &args.sigma_mode {
        config.sigma_mode = mode.parse::<SigmaMode>()?;
    }
    if let Some(sigma) = args.sigma {
        config.sigma_fixed = sigma;
    }
    config.validate()?;
    if args.stride == 0 {
        bail!("--stride must be at least 1");
    }
    let scenes = match (&args.manifest, &args.annotation) {
        (Some(m), _) => load_manifest_scenes(m)?,
        (None, Some(a)) => vec![load_annotations(a)?],
        (None, None) => unreachable!("clap requires one input"),
    };
    let dir = out_dir(cli, "gt")?;
    for scene in &scenes {
        let full = scene_density(&scene.points, scene.height() as usize, scene.width() as usize, &config)?;
        let map = if args.stride > 1 {
            downsample_preserving_count(&full, args.stride)?
        } else {
            full
        };
        let path = dir.join(format!("{}.pdm", scene.id));
        save_density_map(&map, &path)?;
        println!("{}\t{}\t{:.4}\t{}", scene.id, scene.count(), map.sum(), path.display());
    }
    Ok(())
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let mut config = resolve_config(cli)?;
    if let Some(n) = args.iterations {
        config.train.iterations = n;
    }
    if let Some(lr) = args.lr {
        config.train.lr = lr;
    }
    config.validate()?;
    let dir = out_dir(cli, "run")?;
    let run = train(&config, &args.manifest, &dir)?;
    if let Some(last) = run.history.last() {
        println!("final loss {:.6} train_mae {:.4}", last.loss.total, last.train_mae);
    }
    if let Some(path) = &run.checkpoint {
        println!("checkpoint {}", path.display());
    }
    if let Some(path) = &run.log {
        println!("log {}", path.display());
    }
    Ok(())
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let result = evaluate_checkpoint(&args.checkpoint, &args.manifest)?;
    let name = args
        .manifest
        .parent()
        .and_then(Path::file_name)
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    let results = vec![(name, result)];
    let text = report(&results);
    print!("{text}");
    let dir = out_dir(cli, "eval")?;
    fs::write(dir.join("eval.csv"), results[0].1.to_csv())?;
    fs::write(dir.join("report.txt"), &text)?;
    fs::write(dir.join("report.json"), format!("{:#}\n", report_json(&results)))?;
    log::info!("wrote report files to {}", dir.display());
    Ok(())
}

/// 8-bit map scaled so the densest cell is 255.
fn heatmap(map: &DensityMap) -> GrayImage {
    let max = map.max();
    GrayImage::from_fn(map.width() as u32, map.height() as u32, |x, y| {
        let v = map.values[[y as usize, x as usize]];
        let scaled = if max > 0.0 { (v / max * 255.0).round().clamp(0.0, 255.0) } else { 0.0 };
        image::Luma([scaled as u8])
    })
}

fn cmd_infer(cli: &Cli, args: &InferArgs) -> Result<()> {
    let model: PdaNet<f32> = load_checkpoint(&args.checkpoint)?;
    let image = image::open(&args.image)
        .with_context(|| format!("reading {}", args.image.display()))?
        .to_rgb8();
    let scene = to_legal_size(&AnnotatedScene::new("infer", image, Vec::new())?, model.config())?;
    let output = model.predict(&scene.image)?;
    let map = &output.dm_final;
    let count = count_from_density(map);
    let max = map.max();
    let dir = out_dir(cli, ".")?;
    let stem = args.image.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy());
    let path = dir.join(format!("{stem}_heatmap.png"));
    heatmap(map).save(&path)?;
    println!("count {count:.4}");
    println!("max {max:.6}");
    println!("heatmap {}", path.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Synth(a) => cmd_synth(&cli, a),
        Command::Gt(a) => cmd_gt(&cli, a),
        Command::Train(a) => cmd_train(&cli, a),
        Command::Eval(a) => cmd_eval(&cli, a),
        Command::Infer(a) => cmd_infer(&cli, a),
    }
}
