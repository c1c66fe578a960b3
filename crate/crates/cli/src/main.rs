//! `partdiscover`: train, predict, evaluate, visualize, generate synthetic
//! data and swap parts from the command line.
//!
//! Any `--section.key value` (or `--section.key=value`) flag overrides that
//! dot path of the run configuration.

mod render;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use partdiscover_core::data::io::{load_dataset, read_image, save_dataset, write_image, write_part_mask, write_soft_map};
use partdiscover_core::data::synth::SyntheticSpec;
use partdiscover_core::data::Dataset;
use partdiscover_core::eval::{evaluate_dataset, Protocol};
use partdiscover_core::par::Exec;
use partdiscover_core::partformer::attention_map;
use partdiscover_core::pipeline::infer::attention;
use partdiscover_core::pipeline::{discover_parts, open_checkpoint, registry_for, save_checkpoint, swap_reconstruct, Model, Trainer};
use partdiscover_core::types::Image;
use partdiscover_core::{Error, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "partdiscover", version, about = "Unsupervised part discovery")]
struct Cli {
    /// Run configuration (JSON). May name a preset with {"preset": "..."}.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset used when no --config is given.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model, writing checkpoints and a JSON-lines loss log.
    Train(TrainArgs),
    /// Write part masks for images.
    Predict(PredictArgs),
    /// Score a checkpoint on an annotated dataset.
    Eval(EvalArgs),
    /// Mask overlay and per-part attention heatmaps for one image.
    Visualize(VisualizeArgs),
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Exchange foreground parts between two images and reconstruct both.
    Swap(SwapArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Total optimizer steps (overrides train.steps).
    #[arg(long)]
    steps: Option<u64>,
    /// Output directory for checkpoints and the loss log.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Continue from a checkpoint; its stored configuration is used and
    /// override flags are ignored.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image files or directories.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value = "masks")]
    out: PathBuf,
    /// Keep masks at feature-map resolution.
    #[arg(long)]
    no_interpolate: bool,
    /// Also write raw soft maps (`.pdsm`).
    #[arg(long)]
    soft: bool,
    #[arg(long, default_value_t = 0)]
    class: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; defaults to the checkpoint's data section.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_parser = parse_protocol)]
    protocol: Option<Protocol>,
    #[arg(long)]
    no_interpolate: bool,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VisualizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    image: PathBuf,
    #[arg(long, default_value = "vis")]
    out: PathBuf,
    /// Also write one attention heatmap per part token.
    #[arg(long)]
    attention: bool,
    #[arg(long, default_value_t = 0)]
    class: usize,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// SyntheticSpec JSON; defaults to the configuration's data.synthetic.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Args, Debug)]
struct SwapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    image_a: PathBuf,
    image_b: PathBuf,
    #[arg(long, default_value = "swap")]
    out: PathBuf,
    /// Also write a side-by-side contact sheet.
    #[arg(long)]
    sheet: bool,
    #[arg(long, default_value_t = 0)]
    class: usize,
}

fn parse_protocol(s: &str) -> std::result::Result<Protocol, String> {
    match s {
        "masks" => Ok(Protocol::Masks),
        "landmarks" => Ok(Protocol::Landmarks),
        other => Err(format!("unknown protocol '{other}' (masks or landmarks)")),
    }
}

/// Splits dotted `--a.b value` flags out of the argument list.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<String>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        match a.strip_prefix("--") {
            Some(flag) if flag.split('=').next().is_some_and(|k| k.contains('.')) => {
                if flag.contains('=') {
                    overrides.push(flag.to_string());
                } else {
                    let v = it.next().ok_or_else(|| anyhow!(Error::Config(format!("{flag}: missing value"))))?;
                    overrides.push(format!("{flag}={v}"));
                }
            }
            _ => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

struct Ctx {
    cli: Cli,
    overrides: Vec<String>,
}

impl Ctx {
    fn apply(&self, base: RunConfig) -> Result<RunConfig> {
        let mut o = self.overrides.clone();
        if let Some(s) = self.cli.seed {
            o.insert(0, format!("seed={s}"));
        }
        Ok(base.with_overrides(&o)?)
    }

    fn config(&self) -> Result<RunConfig> {
        let base = match &self.cli.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::preset(&self.cli.preset)?,
        };
        self.apply(base)
    }
}

fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    if let Some(root) = &cfg.data.root {
        return Ok(load_dataset(root)?);
    }
    match &cfg.data.synthetic {
        Some(spec) => Ok(spec.generate(Exec::default())?),
        None => Err(Error::Config("data: set data.root or data.synthetic".into()).into()),
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn train(ctx: &Ctx, args: &TrainArgs) -> Result<()> {
    let (cfg, mut trainer) = match &args.resume {
        Some(ck) => {
            let tr = open_checkpoint(ck)?;
            (tr.config().clone(), tr)
        }
        None => {
            let cfg = ctx.config()?;
            let tr = Trainer::new(cfg.clone(), &mut registry_for(&cfg)?)?;
            (cfg, tr)
        }
    };
    let steps = args.steps.unwrap_or(cfg.train.steps);
    let [h, w] = cfg.model.image_size;
    let ds = dataset(&cfg)?.resized(h, w)?;
    let idx = ds.splits.get("train")?;
    if idx.is_empty() {
        bail!(Error::Config("data: the train split is empty".into()));
    }
    let images: Vec<Image> = idx.iter().map(|&i| ds.images[i].clone()).collect();
    let classes: Vec<usize> = idx.iter().map(|&i| ds.classes[i]).collect();
    if let Some(&c) = classes.iter().find(|&&c| c >= cfg.model.n_classes) {
        bail!(Error::Config(format!("model.n_classes: dataset has class {c}")));
    }

    create_dir(&args.out)?;
    fs::write(args.out.join("config.json"), cfg.to_json_pretty())?;
    let log_path = args.out.join("train_log.jsonl");
    let mut log = BufWriter::new(
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .with_context(|| format!("opening {}", log_path.display()))?,
    );
    let every = cfg.train.checkpoint_every;
    let stdout = std::io::stdout();
    let io_err = |p: &Path| {
        let p = p.to_path_buf();
        move |e: std::io::Error| Error::Io { path: p.clone(), source: e }
    };
    trainer.fit(&images, &classes, steps, |t, r| {
        let mut line = serde_json::to_value(r.loss).expect("breakdown serializes");
        line["step"] = r.step.into();
        line["class"] = r.class_id.into();
        let text = line.to_string();
        writeln!(log, "{text}").map_err(io_err(&log_path))?;
        writeln!(stdout.lock(), "{text}").map_err(io_err(Path::new("<stdout>")))?;
        if every > 0 && r.step % every == 0 {
            log.flush().map_err(io_err(&log_path))?;
            save_checkpoint(t, &args.out.join(format!("step{:06}.pdck", r.step)))?;
        }
        Ok(true)
    })?;
    log.flush()?;
    let last = args.out.join("final.pdck");
    save_checkpoint(&trainer, &last)?;
    eprintln!("checkpoint: {}", last.display());
    Ok(())
}

fn load(ck: &Path) -> Result<(RunConfig, Model)> {
    let tr = open_checkpoint(ck)?;
    Ok((tr.config().clone(), tr.into_model()))
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

fn expand_inputs(inputs: &[PathBuf]) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)
                .into_iter()
                .flatten()
                .flatten()
                .map(|e| e.path())
                .filter(|f| {
                    f.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                })
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    out
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

fn predict(args: &PredictArgs) -> Result<()> {
    let (cfg, model) = load(&args.checkpoint)?;
    let tau = cfg.transfer.temperature;
    create_dir(&args.out)?;
    let files = expand_inputs(&args.inputs);
    let mut written = 0;
    for f in &files {
        let res = (|| -> Result<()> {
            let img = read_image(f)?;
            let mask = discover_parts(&model, &img, args.class, tau, !args.no_interpolate)?;
            write_part_mask(&args.out.join(format!("{}.png", stem(f))), &mask)?;
            if args.soft {
                write_soft_map(&args.out.join(format!("{}.pdsm", stem(f))), &mask)?;
            }
            Ok(())
        })();
        match res {
            Ok(()) => written += 1,
            Err(e) => log::warn!("skipping {}: {e:#}", f.display()),
        }
    }
    eprintln!("wrote {written} of {} masks to {}", files.len(), args.out.display());
    if written == 0 {
        bail!("no image could be processed");
    }
    Ok(())
}

fn eval(ctx: &Ctx, args: &EvalArgs) -> Result<()> {
    let (stored, model) = load(&args.checkpoint)?;
    let hash = stored.config_hash();
    let mut cfg = ctx.apply(stored)?;
    if let Some(root) = &args.data {
        cfg.data.root = Some(root.clone());
    }
    if let Some(p) = args.protocol {
        cfg.eval.protocol = p;
    }
    if args.no_interpolate {
        cfg.eval.interpolate = false;
    }
    let ds = dataset(&cfg)?;
    let report = evaluate_dataset(&model, &ds, &cfg.eval, cfg.transfer.temperature, &hash, Exec::default())?;
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(out) = &args.out {
        fs::write(out, format!("{text}\n")).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn visualize(args: &VisualizeArgs) -> Result<()> {
    let (cfg, model) = load(&args.checkpoint)?;
    let img = read_image(&args.image)?;
    let mask = discover_parts(&model, &img, args.class, cfg.transfer.temperature, true)?;
    create_dir(&args.out)?;
    let name = stem(&args.image);
    let overlay = render::overlay(&img, mask.labels(), (mask.height(), mask.width()), 0.5);
    write_image(&args.out.join(format!("{name}_overlay.png")), &overlay)?;
    if args.attention {
        let rec = attention(&model, &img, args.class)?;
        let k = model.config().k_parts;
        for part in 0..rec.parts() {
            let map = attention_map(&rec, part)?;
            let heat = render::heatmap(&map, rec.grid(), img.size())?;
            let label = if part == k { "background".to_string() } else { format!("part{}", part + 1) };
            write_image(&args.out.join(format!("{name}_attn_{label}.png")), &heat)?;
        }
    }
    eprintln!("wrote visualizations to {}", args.out.display());
    Ok(())
}

fn synth(ctx: &Ctx, args: &SynthArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<SyntheticSpec>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => ctx
            .config()?
            .data
            .synthetic
            .unwrap_or_default(),
    };
    if let Some(n) = args.count {
        spec.count = n;
    }
    if let Some(s) = ctx.cli.seed {
        spec.seed = s;
    }
    spec.validate().map_err(|e| Error::Config(format!("synthetic spec: {e}")))?;
    let ds = spec.generate(Exec::default())?;
    save_dataset(&ds, &args.out)?;
    eprintln!("wrote {} images to {}", ds.len(), args.out.display());
    Ok(())
}

fn swap(args: &SwapArgs) -> Result<()> {
    let (cfg, model) = load(&args.checkpoint)?;
    let a = read_image(&args.image_a)?;
    let b = read_image(&args.image_b)?;
    let (ra, rb) = swap_reconstruct(&model, &a, &b, args.class, cfg.transfer.temperature)?;
    create_dir(&args.out)?;
    write_image(&args.out.join("swap_a.png"), &ra)?;
    write_image(&args.out.join("swap_b.png"), &rb)?;
    if args.sheet {
        let size = ra.size();
        let sheet = render::sheet(&[a.resized(size.0, size.1)?, b.resized(size.0, size.1)?, ra, rb]);
        write_image(&args.out.join("sheet.png"), &sheet)?;
    }
    eprintln!("wrote swapped reconstructions to {}", args.out.display());
    Ok(())
}

/// 2 for configuration or annotation problems, 3 for numeric failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => 2,
        Some(Error::Numeric(_)) => 3,
        _ => 1,
    }
}

fn run(ctx: &Ctx) -> Result<()> {
    match &ctx.cli.command {
        Command::Train(a) => train(ctx, a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(ctx, a),
        Command::Visualize(a) => visualize(a),
        Command::Synth(a) => synth(ctx, a),
        Command::Swap(a) => swap(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let ctx = Ctx {
        cli: Cli::parse_from(args),
        overrides,
    };
    match run(&ctx) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
