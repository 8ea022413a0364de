use clap::{Args, Parser, Subcommand};
use gmae::canvas::Image;
use gmae::gaussian::{ScaleClamp, RAW_DIM};
use gmae::gradcheck::{
    check_model_gradients, check_render_gradients, random_raw_scene, random_weights, sample_trainable_coords,
    summarize, CoordCheck, Tolerance,
};
use gmae::io::{
    boundary_f1, load_image, load_mask, mse, psnr_from_mse, save_bitmap1, save_layer_map, save_mask8, save_png,
    ConfigError, ImageMetrics, IoError, MetricsReport, RunConfig, Scatter,
};
use gmae::render::CameraConfig;
use gmae::train::{
    epoch_means, load_checkpoint, reconstruct, save_checkpoint, shape_corpus, steps_per_epoch, Checkpoint,
    CheckpointError, LossMode, Reconstruction, TrainError, Trainer, LOSS_CSV_HEADER,
};
use gmae::vit::{sample_mask, GmaeModel, MaskSpec, ModelConfig};
use gmae::zeroshot::{
    assign_layers, best_split, cumulative_render, edge_detect, figure_ground, iou, ZeroShotError,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_OTHER: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_MISSING_CKPT: u8 = 4;
const EXIT_IO: u8 = 5;
const EXIT_GRADCHECK: u8 = 6;
const EXIT_BAD_CKPT: u8 = 7;

/// Thread-count override for the rayon pool.
const THREADS_ENV: &str = "GMAE_THREADS";

#[derive(Debug)]
enum CliError {
    Config(String),
    /// `None` when no checkpoint was given at all.
    MissingCheckpoint(Option<PathBuf>),
    Checkpoint(CheckpointError),
    Io(String),
    GradCheck(usize),
    Other(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::MissingCheckpoint(_) => EXIT_MISSING_CKPT,
            CliError::Checkpoint(CheckpointError::Io { .. }) | CliError::Io(_) => EXIT_IO,
            CliError::Checkpoint(_) => EXIT_BAD_CKPT,
            CliError::GradCheck(_) => EXIT_GRADCHECK,
            CliError::Other(_) => EXIT_OTHER,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "invalid configuration: {m}"),
            CliError::MissingCheckpoint(Some(p)) => write!(f, "checkpoint not found: {}", p.display()),
            CliError::MissingCheckpoint(None) => write!(f, "no checkpoint given (--ckpt or checkpoint = ...)"),
            CliError::Checkpoint(e) => write!(f, "{e}"),
            CliError::Io(m) => write!(f, "{m}"),
            CliError::GradCheck(n) => write!(f, "gradient check failed on {n} coordinate(s)"),
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Config(m),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<ZeroShotError> for CliError {
    fn from(e: ZeroShotError) -> Self {
        CliError::Other(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "gmae", version, about = "Gaussian masked autoencoder: training, reconstruction and zero-shot tools")]
struct Cli {
    /// Flat key = value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra `key=value` assignment, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory; defaults to `<output_dir>/<timestamp>-seed<seed>`.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Seed for synthetic inputs and masks.
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint to load.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Image file or directory of images; defaults to synthetic shape scenes.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Number of synthetic scenes when no input is given.
    #[arg(long, default_value_t = 4)]
    synthetic: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train on a directory of images or on the synthetic shape corpus.
    Train {
        #[arg(long)]
        seed: Option<u64>,
        /// Total epochs; 0 writes the initial checkpoint only.
        #[arg(long)]
        epochs: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Base learning rate.
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        mask_ratio: Option<f64>,
        /// masked, all or masked_normalized.
        #[arg(long)]
        loss_mode: Option<String>,
        /// Directory of training images.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Size of the synthetic shape corpus used when no data is given.
        #[arg(long, default_value_t = 2000)]
        synthetic: usize,
        /// Resume from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Save a checkpoint every N epochs (0: only at the end).
        #[arg(long, default_value_t = 0)]
        save_every: u64,
    },
    /// Side-by-side input and render plus PSNR metrics.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// Fraction of patches hidden from the encoder [default: 0].
        #[arg(long)]
        mask_ratio: Option<f64>,
    },
    /// Depth-grouped layer maps and cumulative renders.
    Layers {
        #[command(flatten)]
        common: Common,
        /// Number of depth groups d.
        #[arg(long)]
        layers: Option<usize>,
        /// Max-channel change that assigns a pixel to a layer.
        #[arg(long)]
        threshold: Option<f64>,
        /// equal_count or equal_depth_width.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Layer-index discontinuities at one or more granularities.
    Edges {
        #[command(flatten)]
        common: Common,
        /// Comma-separated layer counts.
        #[arg(long, default_value = "8,16,32")]
        layers: String,
        /// Max-channel change that assigns a pixel to a layer.
        #[arg(long)]
        threshold: Option<f64>,
        /// equal_count or equal_depth_width.
        #[arg(long)]
        mode: Option<String>,
        /// Ground-truth boundary masks (directory, matched by file stem).
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Figure-ground masks from a layer split.
    Segment {
        #[command(flatten)]
        common: Common,
        /// Number of depth groups d.
        #[arg(long)]
        layers: Option<usize>,
        /// Max-channel change that assigns a pixel to a layer.
        #[arg(long)]
        threshold: Option<f64>,
        /// Foreground is layer >= split; swept against the truth when omitted.
        #[arg(long)]
        split: Option<usize>,
        /// Ground-truth foreground masks (file or directory, matched by stem).
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Strips of renders from the depth-nearest K Gaussians.
    PrefixRender {
        #[command(flatten)]
        common: Common,
        /// Comma-separated prefix sizes K.
        #[arg(long, default_value = "32,64,128,256,512")]
        prefixes: String,
    },
    /// Finite-difference check of the analytic gradients.
    Gradcheck {
        /// Seed for the random scenes and sampled coordinates.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Random single-Gaussian scenes.
        #[arg(long, default_value_t = 10)]
        single: usize,
        /// Random 8-Gaussian scenes.
        #[arg(long, default_value_t = 3)]
        multi: usize,
        /// Sampled backbone coordinates.
        #[arg(long, default_value_t = 100)]
        backbone: usize,
    },
    /// Scale-vs-depth and center scatter plots of predicted Gaussians.
    Diag {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(e.code());
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn init_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::Config(format!("{THREADS_ENV}='{v}' is not a thread count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Other(e.to_string()))?;
    }
    Ok(())
}

/// Config file, then `--set`, then subcommand flags.
fn build_config(cli: &Cli, flags: &[(&str, Option<String>)]) -> CliResult<RunConfig> {
    build_config_with(cli, flags, |_| {})
}

fn build_config_with(
    cli: &Cli,
    flags: &[(&str, Option<String>)],
    adjust: impl FnOnce(&mut RunConfig),
) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for s in &cli.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects key=value, got '{s}'")))?;
        cfg.set(k.trim(), v)?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    adjust(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn require_checkpoint(cfg: &RunConfig) -> CliResult<()> {
    match &cfg.paths.checkpoint {
        None => Err(CliError::MissingCheckpoint(None)),
        Some(p) if !p.exists() => Err(CliError::MissingCheckpoint(Some(p.clone()))),
        Some(_) => Ok(()),
    }
}

fn run_dir(cli: &Cli, cfg: &RunConfig) -> CliResult<PathBuf> {
    let dir = match &cli.run_dir {
        Some(d) => d.clone(),
        None => {
            let base = cfg.paths.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs"));
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
            base.join(format!("{stamp}-seed{}", cfg.train.seed))
        }
    };
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    std::fs::write(dir.join("config.txt"), cfg.to_kv_string())?;
    Ok(dir)
}

fn s<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(|x| x.to_string())
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Train {
            seed,
            epochs,
            batch_size,
            lr,
            mask_ratio,
            loss_mode,
            data,
            synthetic,
            resume,
            save_every,
        } => {
            let flags = [
                ("seed", s(seed)),
                ("epochs", s(epochs)),
                ("batch_size", s(batch_size)),
                ("base_lr", s(lr)),
                ("mask_ratio", s(mask_ratio)),
                ("loss_mode", loss_mode.clone()),
                ("data_dir", data.as_ref().map(|p| p.display().to_string())),
            ];
            // A shorter run from the command line shortens the warmup with it.
            let cfg = build_config_with(&cli, &flags, |c| {
                if epochs.is_some() {
                    c.train.warmup_epochs = c.train.warmup_epochs.min(c.train.epochs);
                }
            })?;
            let dir = run_dir(&cli, &cfg)?;
            cmd_train(&cfg, &dir, *synthetic, resume.as_deref(), *save_every)
        }
        Command::Reconstruct { common, mask_ratio } => {
            let cfg = build_config(&cli, &common_flags(common))?;
            let ratio = mask_ratio.unwrap_or(0.0);
            if !(0.0..1.0).contains(&ratio) {
                return Err(CliError::Config(format!("mask_ratio must lie in [0, 1), got {ratio}")));
            }
            let model = load_model(&cfg)?;
            let dir = run_dir(&cli, &cfg)?;
            cmd_reconstruct(&model, &cfg, &dir, common, ratio)
        }
        Command::Layers {
            common,
            layers,
            threshold,
            mode,
        } => {
            let mut flags = common_flags(common);
            flags.extend([("layers", s(layers)), ("threshold", s(threshold)), ("layer_mode", mode.clone())]);
            let cfg = build_config(&cli, &flags)?;
            let model = load_model(&cfg)?;
            let dir = run_dir(&cli, &cfg)?;
            cmd_layers(&model, &cfg, &dir, common)
        }
        Command::Edges {
            common,
            layers,
            threshold,
            mode,
            truth,
        } => {
            let mut flags = common_flags(common);
            flags.extend([("threshold", s(threshold)), ("edge_mode", mode.clone())]);
            let cfg = build_config(&cli, &flags)?;
            let counts = parse_list(layers, "layers")?;
            let model = load_model(&cfg)?;
            let dir = run_dir(&cli, &cfg)?;
            cmd_edges(&model, &cfg, &dir, common, &counts, truth.as_deref())
        }
        Command::Segment {
            common,
            layers,
            threshold,
            split,
            truth,
        } => {
            let mut flags = common_flags(common);
            flags.extend([("layers", s(layers)), ("threshold", s(threshold)), ("split", s(split))]);
            let cfg = build_config(&cli, &flags)?;
            let model = load_model(&cfg)?;
            let dir = run_dir(&cli, &cfg)?;
            cmd_segment(&model, &cfg, &dir, common, truth.as_deref())
        }
        Command::PrefixRender { common, prefixes } => {
            let cfg = build_config(&cli, &common_flags(common))?;
            let list = parse_list(prefixes, "prefixes")?;
            let model = load_model(&cfg)?;
            let dir = run_dir(&cli, &cfg)?;
            cmd_prefix(&model, &cfg, &dir, common, &list)
        }
        Command::Gradcheck {
            seed,
            single,
            multi,
            backbone,
        } => {
            let cfg = build_config(&cli, &[("seed", Some(seed.to_string()))])?;
            let dir = run_dir(&cli, &cfg)?;
            cmd_gradcheck(&dir, *seed, *single, *multi, *backbone)
        }
        Command::Diag { common } => {
            let cfg = build_config(&cli, &common_flags(common))?;
            let model = load_model(&cfg)?;
            let dir = run_dir(&cli, &cfg)?;
            cmd_diag(&model, &cfg, &dir, common)
        }
    }
}

fn common_flags(c: &Common) -> Vec<(&'static str, Option<String>)> {
    vec![
        ("seed", s(&c.seed)),
        ("checkpoint", c.ckpt.as_ref().map(|p| p.display().to_string())),
    ]
}

fn parse_list(text: &str, field: &str) -> CliResult<Vec<usize>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{field}: '{t}' is not a positive integer")))
        })
        .collect()
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn list_images(path: &Path) -> CliResult<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = std::fs::read_dir(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut files: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| is_image(p)).collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Io(format!("no images found in {}", path.display())));
    }
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string()
}

/// Named inputs at the model's resolution, with any known foreground.
fn inputs(model: &ModelConfig, cfg: &RunConfig, common: &Common) -> CliResult<Vec<(String, Image, Option<Vec<bool>>)>> {
    let (h, w) = (model.image_height, model.image_width);
    match &common.input {
        Some(p) => list_images(p)?
            .into_iter()
            .map(|f| Ok((stem(&f), load_image(&f, h, w)?, None)))
            .collect(),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            Ok(shape_corpus(&mut rng, common.synthetic.max(1), h, w)
                .into_iter()
                .enumerate()
                .map(|(i, s)| (format!("synthetic{i:03}"), s.image, s.foreground))
                .collect())
        }
    }
}

fn load_model(cfg: &RunConfig) -> CliResult<GmaeModel> {
    require_checkpoint(cfg)?;
    let path = cfg.paths.checkpoint.clone().expect("checked above");
    let ckpt = load_checkpoint(&path).map_err(CliError::Checkpoint)?;
    if ckpt.model_config != cfg.model {
        eprintln!("note: using the model config stored in {}", path.display());
    }
    ckpt.model().map_err(CliError::Checkpoint)
}

fn camera_for(cfg: &RunConfig, model: &ModelConfig) -> CameraConfig {
    let mut c = cfg.clone();
    c.model = model.clone();
    c.camera()
}

fn full_reconstruction(model: &GmaeModel, cam: &CameraConfig, img: &Image) -> CliResult<Reconstruction> {
    let n = model.grid().num_tokens();
    Ok(reconstruct(model, cam, img, &MaskSpec::full_visibility(n))?)
}

fn cmd_train(cfg: &RunConfig, dir: &Path, synthetic: usize, resume: Option<&Path>, save_every: u64) -> CliResult<()> {
    let (h, w) = (cfg.model.image_height, cfg.model.image_width);
    let data: Vec<Image> = match &cfg.paths.data_dir {
        Some(d) => list_images(d)?
            .iter()
            .map(|f| load_image(f, h, w))
            .collect::<Result<_, _>>()?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            shape_corpus(&mut rng, synthetic.max(1), h, w).into_iter().map(|s| s.image).collect()
        }
    };
    let spe = steps_per_epoch(data.len(), cfg.train.batch_size);
    let mut trainer = match resume {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::MissingCheckpoint(Some(p.to_path_buf())));
            }
            let ckpt = load_checkpoint(p).map_err(CliError::Checkpoint)?;
            ckpt.model_for(&cfg.model).map_err(CliError::Checkpoint)?;
            let cam = camera_for(cfg, &ckpt.model_config);
            let mut t = Trainer::from_checkpoint(&ckpt, cam, spe)?;
            t.config = cfg.train.clone();
            t
        }
        None => {
            let model = GmaeModel::new(cfg.model.clone(), cfg.train.seed).map_err(|e| CliError::Config(e.to_string()))?;
            Trainer::new(model, cfg.train.clone(), cfg.camera(), spe)?
        }
    };
    let ckpt_dir = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    let save = |t: &Trainer, name: &str| -> CliResult<()> {
        let ckpt: Checkpoint = t.checkpoint();
        save_checkpoint(&ckpt_dir.join(name), &ckpt).map_err(CliError::Checkpoint)
    };

    let mut csv = std::io::BufWriter::new(std::fs::File::create(dir.join("loss.csv"))?);
    writeln!(csv, "{LOSS_CSV_HEADER}")?;
    let first_epoch = trainer.global_step / spe + 1;
    eprintln!(
        "training on {} images, {} steps/epoch, epochs {}..={}, run dir {}",
        data.len(),
        spe,
        first_epoch,
        cfg.train.epochs,
        dir.display()
    );
    let mut all = Vec::new();
    for epoch in first_epoch..=cfg.train.epochs {
        let mut write_err = None;
        let records = trainer.train_epoch(&data, epoch, |r| {
            if let Err(e) = writeln!(csv, "{}", r.csv_line()) {
                write_err = Some(e);
            }
        })?;
        if let Some(e) = write_err {
            return Err(e.into());
        }
        let mean = epoch_means(&records).first().map_or(f64::NAN, |m| m.1);
        eprintln!("epoch {epoch}: mean loss {mean:.6}");
        all.extend(records);
        if save_every > 0 && epoch % save_every == 0 {
            save(&trainer, &format!("epoch{epoch:04}.gmae"))?;
        }
    }
    csv.flush()?;
    save(&trainer, "final.gmae")?;
    let summary: Vec<serde_json::Value> = epoch_means(&all)
        .into_iter()
        .map(|(e, l)| serde_json::json!({ "epoch": e, "mean_loss": l }))
        .collect();
    std::fs::write(dir.join("epochs.json"), serde_json::to_string_pretty(&summary).expect("json"))?;
    println!("{}", ckpt_dir.join("final.gmae").display());
    Ok(())
}

/// Gray-fills masked patches, as shown to the encoder.
fn masked_view(img: &Image, model: &GmaeModel, mask: &MaskSpec) -> Image {
    let grid = model.grid();
    let mut out = img.clone();
    for &t in &mask.masked {
        let (y0, y1, x0, x1) = grid.token_rect(t);
        for y in y0..y1 {
            for x in x0..x1 {
                out.set_pixel(y, x, [0.5; 3]);
            }
        }
    }
    out
}

fn cmd_reconstruct(model: &GmaeModel, cfg: &RunConfig, dir: &Path, common: &Common, ratio: f64) -> CliResult<()> {
    let cam = camera_for(cfg, model.config());
    let n = model.grid().num_tokens();
    let mut metrics = Vec::new();
    for (i, (name, img, _)) in inputs(model.config(), cfg, common)?.into_iter().enumerate() {
        let mask = if ratio == 0.0 {
            MaskSpec::full_visibility(n)
        } else {
            sample_mask(n, ratio, cfg.train.seed.wrapping_add(i as u64)).map_err(|e| CliError::Config(e.to_string()))?
        };
        let rec = reconstruct(&model, &cam, &img, &mask)?;
        let strip = if ratio == 0.0 {
            Image::hstack(&[&img, &rec.image], 2, [1.0; 3])
        } else {
            Image::hstack(&[&img, &masked_view(&img, &model, &mask), &rec.image], 2, [1.0; 3])
        };
        save_png(&dir.join(format!("recon_{name}.png")), &strip)?;
        let m = mse(&rec.image, &img)?;
        println!("{name}: mse {m:.6} psnr {:.3} dB", psnr_from_mse(m));
        metrics.push(ImageMetrics {
            name,
            mse: m,
            psnr: psnr_from_mse(m),
            iou: None,
            boundary_f1: None,
        });
    }
    let report = MetricsReport::from_images(metrics);
    std::fs::write(dir.join("metrics.json"), report.to_json())?;
    Ok(())
}

fn colorize_layers(index: &[i32], layers: usize, h: usize, w: usize) -> Image {
    let mut img = Image::new(h, w);
    for (i, &l) in index.iter().enumerate() {
        let rgb = if l < 0 {
            [0.0; 3]
        } else {
            let t = (l as f64 + 0.5) / layers as f64;
            [t, 1.0 - (2.0 * t - 1.0).abs(), 1.0 - t]
        };
        img.set_pixel(i / w, i % w, rgb);
    }
    img
}

fn cmd_layers(model: &GmaeModel, cfg: &RunConfig, dir: &Path, common: &Common) -> CliResult<()> {
    let cam = camera_for(cfg, model.config());
    let z = &cfg.zeroshot;
    for (name, img, _) in inputs(model.config(), cfg, common)? {
        let rec = full_reconstruction(&model, &cam, &img)?;
        let stack = assign_layers(&rec.gaussians, z.layers, z.layer_mode, z.threshold, &cam)?;
        save_layer_map(&dir.join(format!("layers_{name}_d{}.png", z.layers)), cam.height, cam.width, &stack.index)?;
        let preview = colorize_layers(&stack.index, z.layers, cam.height, cam.width);
        save_png(&dir.join(format!("layers_{name}_d{}_color.png", z.layers)), &preview)?;
        let refs: Vec<&Image> = stack.cumulative.iter().collect();
        save_png(&dir.join(format!("layers_{name}_cumulative.png")), &Image::hstack(&refs, 1, [1.0; 3]))?;
        let (counts, none) = stack.histogram();
        println!("{name}: pixels per layer {counts:?}, unassigned {none}");
    }
    Ok(())
}

fn find_truth(truth: Option<&Path>, name: &str) -> Option<PathBuf> {
    let t = truth?;
    if t.is_file() {
        return Some(t.to_path_buf());
    }
    ["png", "jpg", "jpeg"]
        .iter()
        .map(|e| t.join(format!("{name}.{e}")))
        .find(|p| p.exists())
}

fn truth_mask(path: &Path, h: usize, w: usize) -> CliResult<Vec<bool>> {
    let (th, tw, mask) = load_mask(path)?;
    if (th, tw) != (h, w) {
        return Err(CliError::Io(format!(
            "{}: mask is {th}x{tw}, model renders {h}x{w}",
            path.display()
        )));
    }
    Ok(mask)
}

fn cmd_edges(model: &GmaeModel, cfg: &RunConfig, dir: &Path, common: &Common, counts: &[usize], truth: Option<&Path>) -> CliResult<()> {
    let cam = camera_for(cfg, model.config());
    let z = &cfg.zeroshot;
    let mut log = Vec::new();
    for (name, img, _) in inputs(model.config(), cfg, common)? {
        let rec = full_reconstruction(&model, &cam, &img)?;
        let gt = match find_truth(truth, &name) {
            Some(p) => Some(truth_mask(&p, cam.height, cam.width)?),
            None => None,
        };
        for &d in counts {
            let stack = assign_layers(&rec.gaussians, d, z.edge_mode, z.threshold, &cam)?;
            let edges = edge_detect(&stack);
            save_bitmap1(&dir.join(format!("edges_{name}_d{d}.png")), cam.height, cam.width, &edges.edges)?;
            let f1 = gt.as_ref().map(|t| boundary_f1(&edges.edges, t, cam.height, cam.width, 2));
            println!("{name} d={d}: {} edge pixels{}", edges.count(), f1.map(|f| format!(", boundary F1 {f:.3}")).unwrap_or_default());
            log.push(serde_json::json!({ "image": name, "layers": d, "edge_pixels": edges.count(), "boundary_f1": f1 }));
        }
    }
    std::fs::write(dir.join("edges.json"), serde_json::to_string_pretty(&log).expect("json"))?;
    Ok(())
}

fn cmd_segment(model: &GmaeModel, cfg: &RunConfig, dir: &Path, common: &Common, truth: Option<&Path>) -> CliResult<()> {
    let cam = camera_for(cfg, model.config());
    let z = &cfg.zeroshot;
    let mut metrics = Vec::new();
    for (name, img, known) in inputs(model.config(), cfg, common)? {
        let rec = full_reconstruction(&model, &cam, &img)?;
        let stack = assign_layers(&rec.gaussians, z.layers, z.layer_mode, z.threshold, &cam)?;
        let gt = match find_truth(truth, &name) {
            Some(p) => Some(truth_mask(&p, cam.height, cam.width)?),
            None => known,
        };
        let split = match (z.split, &gt) {
            (Some(t), _) => t,
            (None, Some(t)) => best_split(&stack, t).0,
            (None, None) => z.layers / 2,
        };
        let seg = figure_ground(&stack, split);
        save_mask8(&dir.join(format!("segment_{name}_t{split}.png")), cam.height, cam.width, &seg.mask)?;
        let score = gt.as_ref().map(|t| iou(&seg.mask, t));
        println!("{name}: split {split}, {} foreground pixels{}", seg.count(), score.map(|s| format!(", IoU {s:.3}")).unwrap_or_default());
        let m = mse(&rec.image, &img)?;
        metrics.push(ImageMetrics {
            name,
            mse: m,
            psnr: psnr_from_mse(m),
            iou: score,
            boundary_f1: None,
        });
    }
    std::fs::write(dir.join("metrics.json"), MetricsReport::from_images(metrics).to_json())?;
    Ok(())
}

fn cmd_prefix(model: &GmaeModel, cfg: &RunConfig, dir: &Path, common: &Common, prefixes: &[usize]) -> CliResult<()> {
    let cam = camera_for(cfg, model.config());
    let k = model.config().num_queries;
    let mut list: Vec<usize> = prefixes.iter().copied().filter(|&p| p <= k).collect();
    if list.last() != Some(&k) {
        list.push(k);
    }
    let mut csv = String::from("image,prefix,mean_abs_diff\n");
    for (name, img, _) in inputs(model.config(), cfg, common)? {
        let rec = full_reconstruction(&model, &cam, &img)?;
        let renders: Vec<Image> = list
            .iter()
            .map(|&p| cumulative_render(&rec.gaussians, p, &cam))
            .collect::<Result<_, _>>()?;
        for (&p, r) in list.iter().zip(&renders) {
            let diff = r.data().iter().zip(rec.image.data()).map(|(a, b)| (a - b).abs()).sum::<f64>()
                / r.data().len() as f64;
            writeln!(csv, "{name},{p},{diff:e}").expect("string write");
        }
        let mut row: Vec<&Image> = vec![&img];
        row.extend(renders.iter());
        save_png(&dir.join(format!("prefix_{name}.png")), &Image::hstack(&row, 2, [1.0; 3]))?;
    }
    std::fs::write(dir.join("prefix_diff.csv"), csv)?;
    Ok(())
}

/// Small model used for the backbone part of the gradient check.
fn gradcheck_model() -> ModelConfig {
    ModelConfig {
        image_height: 16,
        image_width: 16,
        patch_size: 4,
        enc_dim: 16,
        enc_depth: 1,
        enc_heads: 2,
        dec_dim: 16,
        dec_depth: 1,
        dec_heads: 2,
        mlp_ratio: 2,
        num_queries: 8,
        scale_clamp: 1.0,
    }
}

fn cmd_gradcheck(dir: &Path, seed: u64, single: usize, multi: usize, backbone: usize) -> CliResult<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = CameraConfig::new(16, 16);
    let tol = Tolerance::default();
    let mut checks: Vec<CoordCheck> = Vec::new();
    for (count, k) in [(single, 1), (multi, 8)] {
        for _ in 0..count {
            let raw = random_raw_scene(&mut rng, k);
            let weights = random_weights(&mut rng, 16, 16);
            let c = check_render_gradients(&raw, ScaleClamp::default(), &cam, &weights, tol)
                .map_err(|e| CliError::Other(e.to_string()))?;
            checks.extend(c);
        }
    }
    if backbone > 0 {
        let model = GmaeModel::new(gradcheck_model(), seed).map_err(|e| CliError::Other(e.to_string()))?;
        let img = shape_corpus(&mut rng, 1, 16, 16).remove(0).image;
        let mask = sample_mask(model.grid().num_tokens(), 0.75, seed).map_err(|e| CliError::Other(e.to_string()))?;
        let coords = sample_trainable_coords(&model, backbone, &mut rng);
        let mut c = check_model_gradients(&model, &cam, &img, &mask, LossMode::Masked, &coords, tol)?;
        for x in &mut c {
            x.label = format!("backbone:{}", x.label);
        }
        checks.extend(c);
    }
    let rows = summarize(&checks, tol);
    let mut table = format!(
        "{:<44} {:>7} {:>10} {:>12} {:>12}  {}\n",
        "parameter", "checked", "unresolved", "max_rel_err", "max_abs_err", "result"
    );
    for r in &rows {
        writeln!(
            table,
            "{:<44} {:>7} {:>10} {:>12.3e} {:>12.3e}  {}",
            r.label,
            r.checked,
            r.unresolved,
            r.max_rel_error,
            r.max_abs_error,
            if r.passed { "PASS" } else { "FAIL" }
        )
        .expect("string write");
    }
    print!("{table}");
    std::fs::write(dir.join("gradcheck.txt"), &table)?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    debug_assert!(RAW_DIM == 14);
    if failed > 0 {
        return Err(CliError::GradCheck(failed));
    }
    Ok(())
}

fn cmd_diag(model: &GmaeModel, cfg: &RunConfig, dir: &Path, common: &Common) -> CliResult<()> {
    let cam = camera_for(cfg, model.config());
    let mut depth_scale = Vec::new();
    let mut depth_colors = Vec::new();
    for (name, img, _) in inputs(model.config(), cfg, common)? {
        let rec = full_reconstruction(&model, &cam, &img)?;
        let mut centers = Vec::new();
        let mut colors = Vec::new();
        for g in rec.gaussians.iter() {
            let mean_scale = g.scale.iter().sum::<f64>() / 3.0;
            depth_scale.push((cam.depth_of(g.center[2]), mean_scale));
            depth_colors.push(g.color);
            centers.push((g.center[0], g.center[1]));
            colors.push(g.color);
        }
        let xy = Scatter {
            x_range: Some((-1.0, 1.0)),
            y_range: Some((-1.0, 1.0)),
            y_up: false,
            ..Scatter::default()
        }
        .render(&centers, &colors);
        save_png(&dir.join(format!("diag_{name}_xy.png")), &xy)?;
    }
    let plot = Scatter {
        x_range: Some((cam.depth_range[0], cam.depth_range[1])),
        ..Scatter::default()
    }
    .render(&depth_scale, &depth_colors);
    save_png(&dir.join("diag_scale_vs_depth.png"), &plot)?;
    let mut csv = String::from("depth,mean_scale\n");
    for (d, s) in &depth_scale {
        writeln!(csv, "{d:e},{s:e}").expect("string write");
    }
    std::fs::write(dir.join("diag_scale_vs_depth.csv"), csv)?;
    Ok(())
}
