use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use eoir::deform::{self, Deformation};
use eoir::error::ExitClass;
use eoir::grid::{gaussian_blur, Field, GridSpec, ScalarField};
use eoir::io::{self, ElementType, RunConfig};
use eoir::net::{self, ModelParams};
use eoir::objectives::{dice_metric, hd95_report, tre, LabelMap, LandmarkSet};
use eoir::selfcheck::{self, Suite};
use eoir::synth::{self, PhantomKind, PhantomOptions, DEFAULT_VALIDITY_THRESHOLD};
use eoir::train::{self, TrainMode, TrainingPair, TrainingSet};
use eoir::{Error, Result};

#[derive(Parser)]
#[command(name = "eoir", version, about = "Encoder-only diffeomorphic image registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic benchmark directory.
    Synth(SynthArgs),
    /// Train a model on a benchmark directory.
    Train(TrainArgs),
    /// Register a moving volume onto a fixed volume with a checkpoint.
    Register(RegisterArgs),
    /// Score a deformation against labels and landmarks.
    Eval(EvalArgs),
    /// Horn-Schunck validity heatmaps of a shifted image.
    Heatmap(HeatmapArgs),
    /// Run the built-in self-test suites.
    Check(CheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "blobs")]
    kind: PhantomKind,
    /// Grid size, e.g. 64,64 or 64,64,64.
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    dims: Vec<usize>,
    /// Voxel spacing in mm, one value per axis.
    #[arg(long, value_delimiter = ',')]
    spacing: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Target maximum ground-truth displacement in voxels.
    #[arg(long, default_value_t = 4.0)]
    dmax: f64,
    /// Smoothing of the ground-truth velocity in voxels.
    #[arg(long, default_value_t = 8.0)]
    sigma: f64,
    #[arg(long, default_value_t = 4)]
    labels: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0.0)]
    bias: f64,
    /// Blob semi-axis range as fractions of the grid size.
    #[arg(long, value_delimiter = ',')]
    blob_radius: Option<Vec<f64>>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Config override KEY=VALUE, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Also write a checkpoint every N steps.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Restrict training to one pair directory (required for instance mode
    /// on multi-pair benchmarks).
    #[arg(long)]
    pair: Option<String>,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    moving_labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Deformation volume; the identity when omitted.
    #[arg(long)]
    phi: Option<PathBuf>,
    #[arg(long)]
    moving_labels: PathBuf,
    #[arg(long)]
    fixed_labels: PathBuf,
    #[arg(long, requires = "moving_landmarks")]
    fixed_landmarks: Option<PathBuf>,
    #[arg(long, requires = "fixed_landmarks")]
    moving_landmarks: Option<PathBuf>,
    /// Report path; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct HeatmapArgs {
    /// Input image; a centred binary square is used when omitted.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Square phantom size when no image is given.
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    dims: Vec<usize>,
    /// Score encoder features (first principal component) of this model too.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    axis: usize,
    #[arg(long, default_value_t = 1.0)]
    shift: f64,
    #[arg(long, default_value_t = DEFAULT_VALIDITY_THRESHOLD)]
    threshold: f64,
    /// Gaussian blur levels applied before shifting.
    #[arg(long, value_delimiter = ',', default_value = "0,1,3")]
    blur: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    /// Suite numbers to run; all when omitted.
    #[arg(long = "suite", value_name = "N")]
    suites: Vec<usize>,
}

fn header(command: &str) -> String {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    format!("# eoir {command} unix_time={secs}\n")
}

fn grid_from(dims: &[usize], spacing: Option<&[f64]>) -> Result<GridSpec> {
    match spacing {
        Some(s) => GridSpec::new(dims, s),
        None => GridSpec::isotropic(dims),
    }
}

fn synth_cmd(a: SynthArgs) -> Result<()> {
    let grid = grid_from(&a.dims, a.spacing.as_deref())?;
    let mut options = PhantomOptions {
        labels: a.labels,
        noise_sigma: a.noise,
        bias_amplitude: a.bias,
        ..PhantomOptions::default()
    };
    if let Some(r) = &a.blob_radius {
        if r.len() != 2 {
            return Err(Error::InvalidArgument("--blob-radius takes LO,HI".into()));
        }
        options.blob_radius = (r[0], r[1]);
    }
    fs::create_dir_all(&a.out)?;
    let mut manifest = String::new();
    writeln!(manifest, "kind={}", kind_name(a.kind)).ok();
    writeln!(manifest, "dims={}", join(&a.dims)).ok();
    writeln!(manifest, "spacing={}", join(grid.spacing())).ok();
    writeln!(manifest, "pairs={}", a.pairs).ok();
    writeln!(manifest, "seed={}", a.seed).ok();
    for i in 0..a.pairs {
        let seed = a.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let phantom = synth::make_phantom_with(a.kind, &grid, seed, &options)?;
        let warp = synth::random_diffeo(&grid, a.dmax, a.sigma, seed ^ 0x5eed)?;
        let (moving, fixed) = synth::make_pair(&phantom, &warp)?;
        let dir = a.out.join(pair_name(i));
        fs::create_dir_all(&dir)?;
        io::write_scalar(dir.join("moving.mha"), &moving.image, ElementType::Float64)?;
        io::write_scalar(dir.join("fixed.mha"), &fixed.image, ElementType::Float64)?;
        io::write_labels(dir.join("moving_labels.mha"), &moving.labels)?;
        io::write_labels(dir.join("fixed_labels.mha"), &fixed.labels)?;
        io::write_landmarks(dir.join("moving_landmarks.csv"), &moving.landmarks)?;
        io::write_landmarks(dir.join("fixed_landmarks.csv"), &fixed.landmarks)?;
        io::write_deformation(dir.join("gt_phi.mha"), &warp.phi, ElementType::Float64)?;
        writeln!(manifest, "{}.d_max={:?}", pair_name(i), warp.d_max_actual).ok();
    }
    fs::write(a.out.join("manifest.txt"), manifest)?;
    println!("wrote {} pair(s) to {}", a.pairs, a.out.display());
    Ok(())
}

fn kind_name(k: PhantomKind) -> &'static str {
    match k {
        PhantomKind::Square => "square",
        PhantomKind::Blobs => "blobs",
        PhantomKind::Rings => "rings",
    }
}

fn pair_name(i: usize) -> String {
    format!("pair_{i:03}")
}

fn join<T: std::fmt::Debug>(v: &[T]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn pair_dirs(data: &Path, only: Option<&str>) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(data)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join("moving.mha").exists() && p.join("fixed.mha").exists())
        .filter(|p| only.is_none_or(|name| p.file_name().is_some_and(|f| f == name)))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no pair directories with moving.mha and fixed.mha under {}",
            data.display()
        )));
    }
    Ok(dirs)
}

fn load_pair(dir: &Path, with_labels: bool) -> Result<TrainingPair> {
    let pair = TrainingPair::new(io::read_scalar(dir.join("moving.mha"))?, io::read_scalar(dir.join("fixed.mha"))?);
    if !with_labels {
        return Ok(pair);
    }
    let (ml, fl) = (dir.join("moving_labels.mha"), dir.join("fixed_labels.mha"));
    if !ml.exists() || !fl.exists() {
        return Err(Error::InvalidArgument(format!(
            "loss.dice_weight > 0 needs label maps in {}",
            dir.display()
        )));
    }
    Ok(pair.with_labels(io::read_labels(ml)?, io::read_labels(fl)?))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&a.overrides)?;
    cfg.validate()?;
    let dirs = pair_dirs(&a.data, a.pair.as_deref())?;
    if cfg.train.mode == TrainMode::Instance && dirs.len() != 1 {
        return Err(Error::Config(format!(
            "instance mode optimizes one pair, found {}; select one with --pair",
            dirs.len()
        )));
    }
    let pairs = dirs
        .iter()
        .map(|d| load_pair(d, cfg.loss.dice_weight > 0.0))
        .collect::<Result<Vec<_>>>()?;
    let ndim = pairs[0].fixed.grid().ndim();
    if ndim != cfg.model.ndim {
        return Err(Error::Config(format!("model.ndim = {} but the data is {ndim}D", cfg.model.ndim)));
    }
    let dataset = TrainingSet::new(pairs)?;
    let params = match &a.init {
        Some(p) => {
            let params = io::load_checkpoint(p)?;
            if params.config() != &cfg.model {
                return Err(Error::Config("--init checkpoint model differs from the run config".into()));
            }
            params
        }
        None => ModelParams::init(&cfg.model, cfg.train.seed)?,
    };
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.txt"), cfg.to_text())?;
    let mut save_error = None;
    let out = a.out.clone();
    let every = a.checkpoint_every.filter(|&n| n > 0);
    let outcome = train::train_from(params, &dataset, &cfg.loss, &cfg.train, |r, p| {
        if let Some(n) = every {
            if (r.step + 1) % n == 0 && save_error.is_none() {
                if let Err(e) = io::save_checkpoint(out.join(format!("step_{:06}.ckpt", r.step + 1)), p) {
                    save_error = Some(e);
                }
            }
        }
    })?;
    if let Some(e) = save_error {
        return Err(e);
    }
    io::save_checkpoint(a.out.join("model.ckpt"), &outcome.params)?;
    let mut csv = Vec::new();
    train::write_history_csv(&outcome.history, &mut csv)?;
    fs::write(a.out.join("loss.csv"), csv)?;
    if let (Some(first), Some(last)) = (outcome.history.first(), outcome.history.last()) {
        println!(
            "trained {} step(s) on {} pair(s): loss {:.6} -> {:.6}",
            outcome.history.len(),
            dataset.len(),
            first.total,
            last.total
        );
    } else {
        println!("trained 0 steps; wrote initial parameters");
    }
    Ok(())
}

fn register_cmd(a: RegisterArgs) -> Result<()> {
    let params = io::load_checkpoint(&a.checkpoint)?;
    let moving = io::read_scalar(&a.moving)?;
    let fixed = io::read_scalar(&a.fixed)?;
    let result = net::register(&moving, &fixed, &params)?;
    fs::create_dir_all(&a.out)?;
    io::write_deformation(a.out.join("phi.mha"), result.phi(), ElementType::Float32)?;
    io::write_scalar(a.out.join("warped.mha"), &result.warped, ElementType::Float64)?;
    if let Some(p) = &a.moving_labels {
        let labels = io::read_labels(p)?;
        io::write_labels(a.out.join("warped_labels.mha"), &labels.warp_nearest(result.phi())?)?;
    }
    println!(
        "max |u| = {:.6} voxels over {} level(s)",
        result.phi().displacement().max_norm(),
        result.levels()
    );
    Ok(())
}

/// `key=value` metric lines for `phi` applied to the moving labels.
fn eval_report(phi: &Deformation, moving: &LabelMap, fixed: &LabelMap, landmarks: Option<(&LandmarkSet, &LandmarkSet)>) -> Result<String> {
    let warped = moving.warp_nearest(phi)?;
    let dice = dice_metric(&warped, fixed)?;
    let (hd, hd_mean) = hd95_report(&warped, fixed)?;
    let mut r = String::new();
    writeln!(r, "dice_mean={:?}", dice.mean).ok();
    for (l, d) in &dice.per_label {
        writeln!(r, "dice_label_{l}={d:?}").ok();
    }
    writeln!(r, "hd95_mean={hd_mean:?}").ok();
    for (l, d) in &hd {
        writeln!(r, "hd95_label_{l}={d:?}").ok();
    }
    if let Some((f, m)) = landmarks {
        writeln!(r, "tre={:?}", tre(phi, f, m)?).ok();
    }
    writeln!(r, "sdlogj={:?}", deform::sdlogj(phi)?).ok();
    writeln!(r, "ndv_percent={:?}", deform::ndv_percent(phi)?).ok();
    Ok(r)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let moving = io::read_labels(&a.moving_labels)?;
    let fixed = io::read_labels(&a.fixed_labels)?;
    let phi = match &a.phi {
        Some(p) => io::read_deformation(p)?,
        None => deform::identity(fixed.grid().clone()),
    };
    let landmarks = match (&a.fixed_landmarks, &a.moving_landmarks) {
        (Some(f), Some(m)) => Some((io::read_landmarks(f)?, io::read_landmarks(m)?)),
        _ => None,
    };
    let body = eval_report(&phi, &moving, &fixed, landmarks.as_ref().map(|(f, m)| (f, m)))?;
    let report = header("eval") + &body;
    match &a.out {
        Some(p) => fs::write(p, report)?,
        None => print!("{report}"),
    }
    Ok(())
}

fn heatmap_cmd(a: HeatmapArgs) -> Result<()> {
    let image = match &a.image {
        Some(p) => io::read_scalar(p)?,
        None => synth::make_phantom(PhantomKind::Square, &GridSpec::isotropic(&a.dims)?, 0)?.image,
    };
    let params = a.checkpoint.as_ref().map(io::load_checkpoint).transpose()?;
    fs::create_dir_all(&a.out)?;
    let mut report = header("heatmap");
    writeln!(report, "axis={}", a.axis).ok();
    writeln!(report, "shift={:?}", a.shift).ok();
    writeln!(report, "threshold={:?}", a.threshold).ok();
    for &sigma in &a.blur {
        let blurred: ScalarField = if sigma > 0.0 { gaussian_blur(&image, sigma)? } else { image.clone() };
        let moving = synth::shifted(&blurred, a.axis, a.shift)?;
        let map = synth::hs_validity_map(&moving, &blurred, a.axis, a.shift, a.threshold)?;
        io::write_scalar(a.out.join(format!("validity_sigma{sigma}.mha")), &map, ElementType::Float64)?;
        writeln!(report, "validity_sigma{sigma}={:?}", map.mean()).ok();
        if let Some(p) = &params {
            let fm = net::encode(&moving, p)?;
            let ff = net::encode(&blurred, p)?;
            let fmap = synth::feature_validity_map(&fm, &ff, a.axis, a.shift, a.threshold)?;
            io::write_scalar(a.out.join(format!("feature_validity_sigma{sigma}.mha")), &fmap, ElementType::Float64)?;
            writeln!(report, "feature_validity_sigma{sigma}={:?}", fmap.mean()).ok();
        }
    }
    fs::write(a.out.join("heatmap.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn check_cmd(a: CheckArgs) -> Result<bool> {
    let suites = if a.suites.is_empty() {
        Suite::ALL.to_vec()
    } else {
        a.suites.iter().map(|&n| Suite::from_number(n)).collect::<Result<_>>()?
    };
    let mut all = true;
    for s in suites {
        let report = selfcheck::run_suite(s)?;
        for line in &report.lines {
            println!("  {line}");
        }
        let verdict = if report.passed() { "PASS" } else { "FAIL" };
        println!("{verdict} suite {} {}", s.number(), s.title());
        all &= report.passed();
    }
    Ok(all)
}

fn exit_code(e: &Error) -> u8 {
    match e.exit_class() {
        ExitClass::Usage => 2,
        ExitClass::Data => 3,
        ExitClass::Divergence => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth_cmd(a).map(|_| true),
        Command::Train(a) => train_cmd(a).map(|_| true),
        Command::Register(a) => register_cmd(a).map(|_| true),
        Command::Eval(a) => eval_cmd(a).map(|_| true),
        Command::Heatmap(a) => heatmap_cmd(a).map(|_| true),
        Command::Check(a) => check_cmd(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
