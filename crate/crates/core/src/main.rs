use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use evart::config::{parse_format, Mode, PipelineConfig, SEED_ENV};
use evart::events::{simulate_events, write_events, EventError, StreamFormat};
use evart::pgm::GrayImage;
use evart::recon::weights::save_weights;
use evart::recon::{ConvLstmNet, ReconConfig};
use evart::pipeline::{self, create_dir, density_report, load_stream, lowest_density, PipelineError};
use evart::trigger::detect_regions;
use evart::viz;
use evart::voxel::{accumulate_voxels, dump_voxels, FrameClock};
use evart::Micros;

#[derive(Parser)]
#[command(name = "evart", version, about = "Event-camera reconstruction and token accounting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize events from a sequence of PGM frames.
    Simulate(SimulateArgs),
    /// Dump fixed-interval voxel grids as raw f32 plus a JSON sidecar.
    Voxelize(VoxelizeArgs),
    /// Full-frame reconstruction and tokenization.
    Frt(RunArgs),
    /// Adaptive patch reconstruction and tokenization.
    Art(RunArgs),
    /// Print recording statistics (one JSON object per input).
    Stats(StatsArgs),
    /// Print the k recordings with the lowest event density.
    Split(SplitArgs),
    /// Render events (and adaptive regions) to PNG.
    Viz(VizArgs),
    /// Write seeded CONVLSTM weights in the weight-file format.
    ExportWeights(ExportArgs),
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    levels: usize,
    #[arg(long, default_value_t = 8)]
    base_channels: usize,
    #[arg(long, default_value_t = 16)]
    global_dim: usize,
    #[arg(long, default_value_t = 5)]
    bins: usize,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Input frames in order.
    #[arg(required = true)]
    frames: Vec<PathBuf>,
    /// Frame rate of the input; ignored when --timestamps is given.
    #[arg(long, default_value_t = 24.0)]
    fps: f64,
    /// Comma-separated frame timestamps in µs.
    #[arg(long, value_delimiter = ',')]
    timestamps: Option<Vec<Micros>>,
    /// Log-intensity contrast threshold.
    #[arg(long, default_value_t = 0.2)]
    threshold: f64,
    #[arg(long, short)]
    out: PathBuf,
    /// binary or csv; defaults from the output extension.
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args)]
struct StreamArgs {
    input: PathBuf,
    /// binary or csv; defaults from the file extension.
    #[arg(long)]
    format: Option<String>,
    /// Recording length in µs, overriding the last event time.
    #[arg(long)]
    duration_us: Option<Micros>,
}

#[derive(Args)]
struct VoxelizeArgs {
    #[command(flatten)]
    stream: StreamArgs,
    #[arg(long, conflicts_with = "fps")]
    interval_us: Option<Micros>,
    #[arg(long)]
    fps: Option<f64>,
    #[arg(long, default_value_t = 5)]
    bins: usize,
    /// Output directory for voxels.f32 and voxels.json.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Event file; may also come from the config file.
    input: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    duration_us: Option<Micros>,
    #[arg(long)]
    fps: Option<f64>,
    #[arg(long)]
    token_fps: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    tpf: Option<usize>,
    #[arg(long)]
    batch_ms: Option<u64>,
    #[arg(long)]
    bins: Option<usize>,
    /// integrator or convlstm
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    n_text: Option<usize>,
    #[arg(long)]
    n_time: Option<usize>,
    #[arg(long, env = SEED_ENV)]
    seed: Option<u64>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    global_dim: Option<usize>,
    #[arg(long)]
    contrast: Option<f64>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(short, long, default_value_t = 1)]
    k: usize,
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args)]
struct VizArgs {
    #[command(flatten)]
    stream: StreamArgs,
    /// Rendering interval in ms.
    #[arg(long, default_value_t = 50)]
    interval_ms: u64,
    /// Overlay adaptive trigger regions.
    #[arg(long)]
    art: bool,
    #[arg(long, default_value_t = evart::trigger::DEFAULT_THETA)]
    theta: f64,
    #[arg(long, default_value_t = evart::trigger::DEFAULT_BATCH_US / 1000)]
    batch_ms: u64,
    #[arg(long, short)]
    out: PathBuf,
}

fn format_opt(raw: Option<&str>) -> Result<Option<StreamFormat>, PipelineError> {
    raw.map(|s| {
        parse_format(s).map_err(|reason| {
            PipelineError::Config(evart::config::ConfigError::BadValue {
                key: "format".into(),
                reason,
            })
        })
    })
    .transpose()
}

fn write_out(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), PipelineError> {
    fs::write(path, bytes).map_err(|source| PipelineError::OutputIo {
        path: path.display().to_string(),
        source,
    })
}

fn read_in(path: &Path) -> Result<Vec<u8>, PipelineError> {
    fs::read(path).map_err(|source| PipelineError::InputIo {
        path: path.display().to_string(),
        source,
    })
}

fn build_config(mode: Mode, a: &RunArgs) -> Result<PipelineConfig, PipelineError> {
    let mut c = PipelineConfig {
        mode,
        ..PipelineConfig::default()
    };
    if let Some(path) = &a.config {
        let text = String::from_utf8(read_in(path)?).map_err(|e| {
            PipelineError::Config(evart::config::ConfigError::Invalid(format!("{}: {e}", path.display())))
        })?;
        c.apply_file(&text)?;
        // mode is fixed by the subcommand
        c.mode = mode;
    }
    let mut flags: Vec<(&str, String)> = Vec::new();
    let mut push = |k: &'static str, v: Option<String>| {
        if let Some(v) = v {
            flags.push((k, v));
        }
    };
    push("format", a.format.clone());
    push("duration_us", a.duration_us.map(|v| v.to_string()));
    push("fps", a.fps.map(|v| v.to_string()));
    push("token_fps", a.token_fps.map(|v| v.to_string()));
    push("theta", a.theta.map(|v| v.to_string()));
    push("tpf", a.tpf.map(|v| v.to_string()));
    push("batch_ms", a.batch_ms.map(|v| v.to_string()));
    push("bins", a.bins.map(|v| v.to_string()));
    push("backend", a.backend.clone());
    push("n_text", a.n_text.map(|v| v.to_string()));
    push("n_time", a.n_time.map(|v| v.to_string()));
    push("seed", a.seed.map(|v| v.to_string()));
    push("levels", a.levels.map(|v| v.to_string()));
    push("base_channels", a.base_channels.map(|v| v.to_string()));
    push("global_dim", a.global_dim.map(|v| v.to_string()));
    push("contrast", a.contrast.map(|v| v.to_string()));
    for (k, v) in flags {
        c.set(k, &v)?;
    }
    if let Some(p) = &a.input {
        c.input = Some(p.clone());
    }
    if let Some(p) = &a.weights {
        c.weights = Some(p.clone());
    }
    if let Some(p) = &a.out {
        c.output = Some(p.clone());
    }
    c.validate()?;
    Ok(c)
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, PipelineError> {
    p.as_deref().ok_or_else(|| {
        PipelineError::Config(evart::config::ConfigError::Invalid(format!(
            "no {what} given (argument or config key)"
        )))
    })
}

fn run(mode: Mode, a: &RunArgs) -> Result<(), PipelineError> {
    let config = build_config(mode, a)?;
    let input = required(&config.input, "input")?;
    let out = required(&config.output, "output directory")?;
    let stream = load_stream(input, config.format, config.duration_us)?;
    info!("{}: {} events on {}x{}", input.display(), stream.len(), stream.geometry().width, stream.geometry().height);
    create_dir(out)?;
    match mode {
        Mode::Frt => {
            let result = pipeline::run_frt(&config, &stream)?;
            pipeline::write_frt(&result, out)?;
            println!("{}", serde_json::to_string(&result.stats.counts).expect("counts"));
        }
        Mode::Art => {
            let result = pipeline::run_art(&config, &stream)?;
            pipeline::write_art(&result, out)?;
            println!("{}", serde_json::to_string(&result.stats.counts).expect("counts"));
        }
    }
    Ok(())
}

fn simulate(a: &SimulateArgs) -> Result<(), PipelineError> {
    let mut frames = Vec::with_capacity(a.frames.len());
    for path in &a.frames {
        let img = GrayImage::from_pgm(&read_in(path)?).map_err(|e| PipelineError::Input {
            path: path.display().to_string(),
            source: EventError::MalformedRecord {
                location: path.display().to_string(),
                reason: e.to_string(),
            },
        })?;
        frames.push(img);
    }
    let timestamps: Vec<Micros> = match &a.timestamps {
        Some(ts) => ts.clone(),
        None => {
            if !(a.fps > 0.0) {
                return Err(PipelineError::Config(evart::config::ConfigError::Invalid("fps must be positive".into())));
            }
            (0..frames.len() as u64).map(|k| (k as f64 * 1e6 / a.fps).floor() as Micros).collect()
        }
    };
    let stream = simulate_events(&frames, &timestamps, a.threshold)?;
    let format = format_opt(a.format.as_deref())?.unwrap_or_else(|| StreamFormat::from_path(&a.out));
    write_out(&a.out, write_events(&stream, format))?;
    info!("wrote {} events to {}", stream.len(), a.out.display());
    Ok(())
}

fn voxelize(a: &VoxelizeArgs) -> Result<(), PipelineError> {
    let stream = load_stream(&a.stream.input, format_opt(a.stream.format.as_deref())?, a.stream.duration_us)?;
    let clock = match (a.interval_us, a.fps) {
        (Some(dt), _) => FrameClock::Interval(dt),
        (None, Some(fps)) => FrameClock::Rate(fps),
        (None, None) => FrameClock::Rate(24.0),
    };
    let grids = accumulate_voxels(&stream, clock, a.bins)?;
    let (bytes, meta) = dump_voxels(&grids);
    create_dir(&a.out)?;
    write_out(&a.out.join("voxels.f32"), bytes)?;
    write_out(
        &a.out.join("voxels.json"),
        serde_json::to_string_pretty(&meta).expect("meta") + "\n",
    )
}

fn stats(a: &StatsArgs) -> Result<(), PipelineError> {
    let format = format_opt(a.format.as_deref())?;
    for path in &a.inputs {
        let stream = load_stream(path, format, None)?;
        let report = density_report(path, &stream)?;
        println!("{}", serde_json::to_string(&report).expect("report"));
    }
    Ok(())
}

fn split(a: &SplitArgs) -> Result<(), PipelineError> {
    let format = format_opt(a.format.as_deref())?;
    let mut reports = Vec::with_capacity(a.inputs.len());
    for path in &a.inputs {
        reports.push(density_report(path, &load_stream(path, format, None)?)?);
    }
    for r in lowest_density(reports, a.k) {
        println!("{}", serde_json::to_string(&r).expect("report"));
    }
    Ok(())
}

fn visualize(a: &VizArgs) -> Result<(), PipelineError> {
    let stream = load_stream(&a.stream.input, format_opt(a.stream.format.as_deref())?, a.stream.duration_us)?;
    if a.interval_ms == 0 {
        return Err(PipelineError::Config(evart::config::ConfigError::Invalid(
            "interval_ms must be positive".into(),
        )));
    }
    let regions = if a.art {
        detect_regions(&stream, a.theta, a.batch_ms * 1000)?
    } else {
        Vec::new()
    };
    let frames = viz::render(&stream, FrameClock::Interval(a.interval_ms * 1000), &regions)?;
    create_dir(&a.out)?;
    for (i, f) in frames.iter().enumerate() {
        let path = a.out.join(format!("viz_{i:06}.png"));
        f.image.save(&path).map_err(|e| PipelineError::OutputIo {
            path: path.display().to_string(),
            source: std::io::Error::other(e),
        })?;
    }
    write_out(&a.out.join("overlay.jsonl"), viz::overlay_jsonl(&frames))
}

fn export_weights(a: &ExportArgs) -> Result<(), PipelineError> {
    let config = ReconConfig {
        levels: a.levels,
        base_channels: a.base_channels,
        global_dim: a.global_dim,
        bins: a.bins,
        ..ReconConfig::default()
    };
    config.validate()?;
    let net = ConvLstmNet::seeded(config.architecture(), a.seed);
    write_out(&a.out, save_weights(&net))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Voxelize(a) => voxelize(a),
        Command::Frt(a) => run(Mode::Frt, a),
        Command::Art(a) => run(Mode::Art, a),
        Command::Stats(a) => stats(a),
        Command::Split(a) => split(a),
        Command::Viz(a) => visualize(a),
        Command::ExportWeights(a) => export_weights(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
