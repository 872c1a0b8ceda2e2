//! `normfill`: synthetic data, augmentation, masks, training, evaluation and
//! inference for normal-map inpainting.
//!
//! Exit codes: 0 success, 1 invalid arguments or inputs, 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use log::info;

use normfill::augment::{expand_dataset, AugmentParams};
use normfill::data_io::{load_dataset, load_mask_png, load_normal_map, save_mask_png, save_normal_map, save_rgb_png};
use normfill::losses::CSV_HEADER;
use normfill::masking::{apply_mask, generate_mask};
use normfill::rng::derive_seed;
use normfill::synth::{generate_dataset, SceneSpec};
use normfill::trainer::{composite_map, emit_panel, prepare_data, run_training, DataSource, PANEL_IMAGES};
use normfill::{Error, LossWeights, MaskSpec, MaskStyle, ReconstructionVariant, TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(name = "normfill", version, about = "Inpainting of occluded surface normal maps with a GAN")]
struct Cli {
    /// Flat `key = value` file; keys are long flag names of the subcommand. Flags given on the command line win.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Info)]
    log: LogLevel,

    /// Worker threads for per-sample parallel work. Results do not depend on this value.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LogLevel {
    Quiet,
    Info,
    Debug,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render face-like analytic normal maps into `<out>/train` (and `<out>/test`).
    SynthData(SynthArgs),
    /// Expand `<data>/train` fourfold with flips and rotation/zoom into `<out>/train`.
    Augment(AugmentArgs),
    /// Write seeded occlusion masks (255 known, 0 occluded).
    GenMasks(MaskArgs),
    /// Train the generator and discriminator.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset and write panels.
    Evaluate(EvaluateArgs),
    /// Inpaint one masked normal map.
    Infer(InferArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    count: usize,
    /// Images written to the test split.
    #[arg(long, default_value_t = 0)]
    test_count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AugmentArgs {
    /// Dataset root containing `train/`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Maximum rotation in degrees.
    #[arg(long, default_value_t = 20.0)]
    rotation: f64,
    /// Maximum relative zoom.
    #[arg(long, default_value_t = 0.10)]
    zoom: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct MaskArgs {
    #[arg(long, value_parser = parse_style, default_value = "lines")]
    mask_style: MaskStyle,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset root with `train/` and optionally `test/`.
    #[arg(long, conflicts_with = "synth", required_unless_present = "synth")]
    data: Option<PathBuf>,
    /// Train on this many synthetic images.
    #[arg(long)]
    synth: Option<usize>,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Stop after this many generator steps.
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long, value_parser = parse_style, default_value = "lines")]
    mask_style: MaskStyle,
    /// Feed only the masked normals, without the mask channel.
    #[arg(long)]
    no_mask_channel: bool,
    #[arg(long, default_value_t = 999.0)]
    lambda_rec: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_adv: f64,
    /// Generator steps per discriminator update.
    #[arg(long, default_value_t = 1)]
    disc_period: usize,
    /// Skip discriminator updates while its recent accuracy exceeds this value.
    #[arg(long)]
    disc_gate: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    base_width: usize,
    #[arg(long, default_value_t = 4)]
    depth: usize,
    /// Encoder-decoder skip connections.
    #[arg(long)]
    skips: bool,
    #[arg(long, value_parser = parse_variant, default_value = "per_pixel")]
    reconstruction: ReconstructionVariant,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1)]
    eval_every: usize,
    #[arg(long, default_value_t = 5)]
    panel_every: usize,
    /// Train on the source images only, without the fourfold expansion.
    #[arg(long)]
    no_augment: bool,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, conflicts_with = "synth", required_unless_present = "synth")]
    data: Option<PathBuf>,
    /// Evaluate on this many held-out synthetic images.
    #[arg(long)]
    synth: Option<usize>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Normal-map PNG; occluded pixels may hold anything.
    #[arg(long)]
    input: PathBuf,
    /// Grayscale PNG, >= 128 marks known pixels.
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_style(s: &str) -> Result<MaskStyle, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_variant(s: &str) -> Result<ReconstructionVariant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::ShapeMismatch { .. } => Failure::Invalid(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

const SUBCOMMANDS: [&str; 6] = ["synth-data", "augment", "gen-masks", "train", "evaluate", "infer"];

/// Turns `key = value` lines into flag tokens. `true`/`false` toggle switches.
fn config_tokens(text: &str) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected `key = value`", n + 1))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || key.starts_with('-') {
            return Err(format!("config line {}: bad key `{key}`", n + 1));
        }
        match value {
            "true" => out.push(format!("--{key}")),
            "false" => {}
            v => {
                out.push(format!("--{key}"));
                out.push(v.trim_matches('"').to_string());
            }
        }
    }
    Ok(out)
}

fn find_config(argv: &[String]) -> Option<PathBuf> {
    argv.iter().enumerate().find_map(|(i, a)| {
        if a == "--config" {
            argv.get(i + 1).map(PathBuf::from)
        } else {
            a.strip_prefix("--config=").map(PathBuf::from)
        }
    })
}

/// Inserts config-file flags right after the subcommand, so later command-line flags override them.
fn merge_config(argv: Vec<String>) -> Result<Vec<String>, String> {
    let Some(path) = find_config(&argv) else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let tokens = config_tokens(&text)?;
    let Some(pos) = argv.iter().position(|a| SUBCOMMANDS.contains(&a.as_str())) else {
        return Ok(argv);
    };
    let mut merged = argv[..=pos].to_vec();
    merged.extend(tokens);
    merged.extend_from_slice(&argv[pos + 1..]);
    Ok(merged)
}

fn parse(argv: Vec<String>) -> Result<Cli, clap::Error> {
    let cmd = Cli::command().args_override_self(true);
    let matches = cmd.try_get_matches_from(argv)?;
    Cli::from_arg_matches(&matches)
}

fn init_logging(level: LogLevel) {
    let filter = match level {
        LogLevel::Quiet => log::LevelFilter::Error,
        LogLevel::Info => log::LevelFilter::Info,
        LogLevel::Debug => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(filter)
        .format_timestamp_secs()
        .init();
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))
}

fn synth_data(a: &SynthArgs) -> Result<(), Failure> {
    for (split, count, tag) in [("train", a.count, 0u64), ("test", a.test_count, 1)] {
        if count == 0 {
            continue;
        }
        let maps = generate_dataset(count, &SceneSpec::face_like(a.size, derive_seed(a.seed, &[tag])))?;
        let dir = a.out.join(split);
        create_dir(&dir)?;
        for (i, m) in maps.iter().enumerate() {
            save_normal_map(m, &dir.join(format!("synth_{i:05}.png")))?;
        }
        info!("wrote {count} maps to {}", dir.display());
    }
    Ok(())
}

fn augment(a: &AugmentArgs) -> Result<(), Failure> {
    let maps = load_dataset(&a.data, "train", a.size)?;
    let params = AugmentParams {
        rotation_limit: a.rotation,
        zoom_limit: a.zoom,
        rng_seed: a.seed,
        ..AugmentParams::default()
    };
    let expanded = expand_dataset(&maps, &params)?;
    let dir = a.out.join("train");
    create_dir(&dir)?;
    for (i, m) in expanded.iter().enumerate() {
        save_normal_map(m, &dir.join(format!("aug_{i:05}.png")))?;
    }
    info!("expanded {} maps to {}", maps.len(), expanded.len());
    Ok(())
}

fn gen_masks(a: &MaskArgs) -> Result<(), Failure> {
    create_dir(&a.out)?;
    for i in 0..a.count {
        let spec = MaskSpec::new(a.mask_style, derive_seed(a.seed, &[i as u64]));
        let mask = generate_mask(&spec, a.size, a.size)?;
        save_mask_png(&mask, &a.out.join(format!("mask_{i:04}.png")))?;
    }
    Ok(())
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        image_size: a.size,
        disc_update_period: a.disc_period,
        disc_accuracy_gate: a.disc_gate,
        use_mask_channel: !a.no_mask_channel,
        loss_weights: LossWeights {
            lambda_reconstruction: a.lambda_rec,
            lambda_adversarial: a.lambda_adv,
        },
        mask_spec: MaskSpec::new(a.mask_style, 0),
        eval_every: a.eval_every,
        panel_every: a.panel_every,
        rng_seed: a.seed,
        max_steps: a.max_steps,
        base_width: a.base_width,
        depth: a.depth,
        skips: a.skips,
        reconstruction: a.reconstruction,
        learning_rate: a.lr,
        augment: !a.no_augment,
        ..TrainConfig::default()
    }
}

fn train(a: &TrainArgs) -> Result<(), Failure> {
    let config = train_config(a);
    config.validate()?;
    let source = match (&a.data, a.synth) {
        (Some(d), None) => DataSource::Directory(d.clone()),
        (None, Some(n)) => DataSource::Synthetic { count: n },
        _ => return Err(Failure::Invalid("exactly one of --data and --synth is required".into())),
    };
    let summary = run_training(&config, &source, &a.out, a.resume.as_deref())?;
    println!("{}", summary.final_checkpoint.display());
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<(), Failure> {
    let mut trainer = Trainer::load(
        &a.checkpoint,
        TrainConfig {
            batch_size: a.batch,
            ..TrainConfig::default()
        },
    )?;
    let config = trainer.config().clone();
    let eval_set = match (&a.data, a.synth) {
        (Some(root), None) => load_dataset(root, &a.split, config.image_size)?,
        (None, Some(n)) => {
            let config = TrainConfig {
                eval_count: n,
                ..config.clone()
            };
            config.validate()?;
            prepare_data(&config, &DataSource::Synthetic { count: 1 })?.1
        }
        _ => return Err(Failure::Invalid("exactly one of --data and --synth is required".into())),
    };
    let ev = trainer.evaluate(&eval_set)?;
    let mut report = ev.report;
    report.epoch = trainer.last_report_epoch();
    report.gen_loss = f64::NAN;
    report.rec_loss = f64::NAN;
    report.adv_loss = f64::NAN;
    report.disc_loss = f64::NAN;
    let panels = a.out.join("panels");
    create_dir(&panels)?;
    let row = report.csv_row();
    normfill::data_io::write_atomic(&a.out.join("metrics.csv"), format!("{CSV_HEADER}\n{row}\n").as_bytes())?;
    for (i, t) in eval_set.iter().enumerate().take(PANEL_IMAGES) {
        let masked = apply_mask(t, &ev.masks[i])?;
        let panel = emit_panel(t, &masked, &ev.predictions[i], &ev.masks[i])?;
        save_rgb_png(&panel, &panels.join(format!("eval_{i}.png")))?;
    }
    println!("{CSV_HEADER}\n{row}");
    info!("baseline (0,0,1) fill angular error {:.4}", ev.baseline_angular_error);
    Ok(())
}

fn infer(a: &InferArgs) -> Result<(), Failure> {
    let mut trainer = Trainer::load(&a.checkpoint, TrainConfig::default())?;
    let input = load_normal_map(&a.input, None)?;
    let mask = load_mask_png(&a.mask)?;
    let size = trainer.config().image_size;
    for (what, dims) in [("input", (input.width(), input.height())), ("mask", (mask.width(), mask.height()))] {
        if dims != (size, size) {
            return Err(Failure::Invalid(format!(
                "{what} is {}x{} but the checkpoint expects {size}x{size}",
                dims.0, dims.1
            )));
        }
    }
    let pred = trainer.inpaint(&[&input], std::slice::from_ref(&mask))?.remove(0);
    create_dir(&a.out)?;
    save_normal_map(&pred, &a.out.join("predicted.png"))?;
    save_normal_map(&composite_map(&input, &pred, &mask)?, &a.out.join("composite.png"))?;
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Invalid("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    match &cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Augment(a) => augment(a),
        Command::GenMasks(a) => gen_masks(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Infer(a) => infer(a),
    }
}

fn main() -> ExitCode {
    let argv = match merge_config(std::env::args().collect()) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    let cli = match parse(argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            eprintln!("{}", text.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(1);
        }
    };
    init_logging(cli.log);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
