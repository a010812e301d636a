//! End-to-end FRT and ART runs, density statistics and on-disk artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, PipelineConfig};
use crate::events::{parse_events, EventError, EventStream, Micros, SensorGeometry, StreamFormat};
use crate::pgm::GrayImage;
use crate::recon::{BackendKind, PatchFrame, ReconError, Reconstructor, WeightsSource};
use crate::tokenizer::{
    count_tokens_frt, estimate_tokens_art, estimate_tokens_frt, subsample_fps, tokenize_art, tokenize_frt,
    tokens_jsonl, TokenCounts, TokenStream, TokenizerError, SOURCE_FPS,
};
use crate::trigger::{region_trace_jsonl, AdaptiveTrigger, Region, TriggerError};
use crate::voxel::{accumulate_voxels, frame_count_at_rate, FrameClock, Rect, VoxelError};

pub const STATS_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Input { path: String, source: EventError },
    #[error("reading {path}: {source}")]
    InputIo { path: String, source: std::io::Error },
    #[error("writing {path}: {source}")]
    OutputIo { path: String, source: std::io::Error },
    #[error(transparent)]
    Event(#[from] EventError),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
    #[error(transparent)]
    Trigger(#[from] TriggerError),
    #[error(transparent)]
    Recon(#[from] ReconError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl PipelineError {
    /// 1 output I/O, 2 bad config, 3 malformed input, 4 internal invariant violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Recon(ReconError::InvalidConfig(_) | ReconError::ShapeMismatch(_)) => 2,
            PipelineError::Input { .. } | PipelineError::InputIo { .. } | PipelineError::Event(_) => 3,
            PipelineError::Recon(ReconError::CorruptFile(_) | ReconError::Io(_)) => 3,
            PipelineError::Voxel(VoxelError::EmptyDuration) => 3,
            PipelineError::OutputIo { .. } => 1,
            _ => 4,
        }
    }
}

pub fn load_stream(path: &Path, format: Option<StreamFormat>, duration_us: Option<Micros>) -> Result<EventStream, PipelineError> {
    let bytes = fs::read(path).map_err(|source| PipelineError::InputIo {
        path: path.display().to_string(),
        source,
    })?;
    let format = format.unwrap_or_else(|| StreamFormat::from_path(path));
    let stream = parse_events(&bytes, format).map_err(|source| PipelineError::Input {
        path: path.display().to_string(),
        source,
    })?;
    match duration_us {
        Some(d) => stream.with_end(stream.t_start() + d).map_err(|source| PipelineError::Input {
            path: path.display().to_string(),
            source,
        }),
        None => Ok(stream),
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct FrtStats {
    pub schema: u32,
    pub mode: &'static str,
    pub width: u16,
    pub height: u16,
    pub events: usize,
    pub duration_us: Micros,
    pub density: f64,
    pub fps: f64,
    pub token_fps: f64,
    pub frames_reconstructed: usize,
    pub frames_tokenized: usize,
    pub merged_frames: usize,
    pub dropped_trailing_frame: bool,
    pub n_text: usize,
    pub n_time: usize,
    pub counts: TokenCounts,
    pub eq4_estimate: f64,
    pub backend: BackendKind,
    pub weights: WeightsSource,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct FrtReference {
    pub fps: f64,
    pub frames: u64,
    pub n_total: u64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ArtStats {
    pub schema: u32,
    pub mode: &'static str,
    pub width: u16,
    pub height: u16,
    pub events: usize,
    pub duration_us: Micros,
    pub density: Option<f64>,
    pub theta: f64,
    pub tpf: usize,
    pub batch_ms: u64,
    pub regions: usize,
    /// Patch triggers (one per 32x32 patch per trigger).
    pub triggered_patches: u64,
    /// Reconstructed 32x32 patches, two per trigger.
    pub p: u64,
    pub n_text: usize,
    pub n_time: usize,
    pub counts: TokenCounts,
    pub eq9_estimate: f64,
    pub frt_reference: FrtReference,
    pub token_ratio: Option<f64>,
    pub backend: BackendKind,
    pub weights: WeightsSource,
}

pub struct FrtOutput {
    /// `(reconstruction time, image)` for every tokenized frame.
    pub frames: Vec<(Micros, GrayImage)>,
    pub tokens: TokenStream,
    pub stats: FrtStats,
}

pub struct ArtOutput {
    pub regions: Vec<Region>,
    pub patches: Vec<PatchFrame>,
    pub tokens: TokenStream,
    pub stats: ArtStats,
}

fn warn_irrelevant(config: &PipelineConfig) {
    for key in config.irrelevant_keys() {
        warn!("`{key}` has no effect in {:?} mode", config.mode);
    }
}

fn reconstructor(config: &PipelineConfig) -> Result<(Reconstructor, WeightsSource), PipelineError> {
    if let Some(path) = config.weights.as_deref().filter(|p| !p.exists()) {
        if config.backend == BackendKind::Convlstm {
            warn!("weights file {} not found; using seeded weights (seed {})", path.display(), config.seed);
        }
    }
    Ok(Reconstructor::load(config.recon_config(), config.weights.as_deref(), config.seed)?)
}

/// Voxelize at `1/fps`, reconstruct, optionally subsample, tokenize.
pub fn run_frt(config: &PipelineConfig, stream: &EventStream) -> Result<FrtOutput, PipelineError> {
    config.validate()?;
    warn_irrelevant(config);
    let (recon, weights) = reconstructor(config)?;
    let grids = accumulate_voxels(stream, FrameClock::Rate(config.fps), config.bins)?;
    let mut state = recon.initial_state(stream.geometry(), stream.t_start());
    let images = recon.frt_reconstruct(&grids, &mut state)?;
    let mut frames: Vec<(Micros, GrayImage)> = grids.iter().map(|g| g.t_end).zip(images).collect();
    let reconstructed = frames.len();

    let token_fps = config.token_fps.unwrap_or(config.fps);
    if token_fps < config.fps {
        let keep = subsample_fps(frames.len(), config.fps, token_fps)?;
        let mut slots: Vec<Option<(Micros, GrayImage)>> = frames.into_iter().map(Some).collect();
        frames = keep.into_iter().filter_map(|i| slots[i].take()).collect();
    }
    let times: Vec<Micros> = frames.iter().map(|(t, _)| *t).collect();
    let tokens = tokenize_frt(&times, stream.t_start(), stream.geometry(), config.n_text, config.n_time)?;
    if tokens.dropped_trailing_frame {
        warn!("odd frame count {}: trailing frame dropped before pairing", times.len());
    }
    let geometry = stream.geometry();
    let expected = count_tokens_frt(times.len() as u64, geometry, config.n_text as u64, config.n_time as u64);
    if tokens.counts.n_total as u64 != expected || tokens.counts != TokenCounts::of(&tokens.records) {
        return Err(PipelineError::Invariant(format!(
            "FRT token count {} differs from closed form {expected}",
            tokens.counts.n_total
        )));
    }
    let stats = FrtStats {
        schema: STATS_SCHEMA,
        mode: "frt",
        width: geometry.width,
        height: geometry.height,
        events: stream.len(),
        duration_us: stream.duration(),
        density: stream.event_density()?,
        fps: config.fps,
        token_fps,
        frames_reconstructed: reconstructed,
        frames_tokenized: times.len(),
        merged_frames: times.len() / 2,
        dropped_trailing_frame: tokens.dropped_trailing_frame,
        n_text: config.n_text,
        n_time: config.n_time,
        counts: tokens.counts,
        eq4_estimate: estimate_tokens_frt(
            (times.len() / 2 * 2) as u64,
            geometry.height as u32,
            geometry.width as u32,
            config.n_text as u64,
            config.n_time as u64,
        ),
        backend: config.backend,
        weights,
    };
    Ok(FrtOutput { frames, tokens, stats })
}

/// Token count an FRT run at `fps` would produce for this recording, without reconstructing.
pub fn frt_reference(stream: &EventStream, fps: f64, n_text: usize, n_time: usize) -> FrtReference {
    let frames = if stream.duration() == 0 {
        0
    } else {
        frame_count_at_rate(stream.duration(), fps)
    };
    FrtReference {
        fps,
        frames,
        n_total: count_tokens_frt(frames, stream.geometry(), n_text as u64, n_time as u64),
    }
}

/// Batch loop: trigger, merge, split into pairs, reconstruct both halves, tokenize.
pub fn run_art(config: &PipelineConfig, stream: &EventStream) -> Result<ArtOutput, PipelineError> {
    config.validate()?;
    warn_irrelevant(config);
    let (recon, weights) = reconstructor(config)?;
    let geometry = stream.geometry();
    let mut state = recon.initial_state(geometry, stream.t_start());
    let mut trigger = AdaptiveTrigger::new(geometry, config.theta, config.batch_us(), config.bins, stream.t_start())?;

    let mut regions = Vec::new();
    let mut patches = Vec::new();
    for (start, end) in AdaptiveTrigger::batches(stream, config.batch_us()) {
        let batch = trigger.process_batch(stream, start, end)?;
        for (region, (first, second)) in batch.regions.iter().zip(&batch.paired_voxels) {
            patches.push(recon.art_step(&mut state, first, first.t2, 0)?);
            patches.push(recon.art_step(&mut state, second, second.t2, 1)?);
            regions.push(*region);
        }
    }
    check_disjoint_batches(&regions)?;

    let tokens = tokenize_art(&patches, stream.t_start(), config.tpf, config.n_text, config.n_time)?;
    let triggered: u64 = regions.iter().map(|r| r.patch_count as u64).sum();
    if tokens.counts.n_visual as u64 != triggered {
        return Err(PipelineError::Invariant(format!(
            "{} visual tokens for {triggered} triggered patches",
            tokens.counts.n_visual
        )));
    }
    let p = 2 * triggered;
    let reference = frt_reference(stream, SOURCE_FPS, config.n_text, config.n_time);
    let stats = ArtStats {
        schema: STATS_SCHEMA,
        mode: "art",
        width: geometry.width,
        height: geometry.height,
        events: stream.len(),
        duration_us: stream.duration(),
        density: stream.event_density().ok(),
        theta: config.theta,
        tpf: config.tpf,
        batch_ms: config.batch_ms,
        regions: regions.len(),
        triggered_patches: triggered,
        p,
        n_text: config.n_text,
        n_time: config.n_time,
        counts: tokens.counts,
        eq9_estimate: estimate_tokens_art(p, config.tpf as u64, config.n_text as u64, config.n_time as u64),
        token_ratio: (reference.n_total > 0).then(|| tokens.counts.n_total as f64 / reference.n_total as f64),
        frt_reference: reference,
        backend: config.backend,
        weights,
    };
    Ok(ArtOutput {
        regions,
        patches,
        tokens,
        stats,
    })
}

fn check_disjoint_batches(regions: &[Region]) -> Result<(), PipelineError> {
    for group in regions.chunk_by(|a, b| a.t2 == b.t2) {
        for (i, a) in group.iter().enumerate() {
            if let Some(b) = group[i + 1..].iter().find(|b| a.rect.intersects(&b.rect)) {
                return Err(PipelineError::Invariant(format!(
                    "overlapping regions {:?} and {:?} at t={}",
                    a.rect, b.rect, a.t2
                )));
            }
        }
    }
    Ok(())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), PipelineError> {
    fs::write(path, bytes).map_err(|source| PipelineError::OutputIo {
        path: path.display().to_string(),
        source,
    })
}

pub fn create_dir(path: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(path).map_err(|source| PipelineError::OutputIo {
        path: path.display().to_string(),
        source,
    })
}

fn stats_json<T: Serialize>(stats: &T) -> String {
    let mut s = serde_json::to_string_pretty(stats).expect("stats serialize");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct FrameMeta {
    index: usize,
    t: Micros,
}

#[derive(Serialize)]
struct PatchMeta {
    index: usize,
    t: Micros,
    rect: Rect,
    pair_index: u8,
}

/// `frames/frame_NNNNNN.pgm`, `frames.jsonl`, `tokens.jsonl`, `stats.json`.
pub fn write_frt(out: &FrtOutput, dir: &Path) -> Result<(), PipelineError> {
    let frames_dir = dir.join("frames");
    create_dir(&frames_dir)?;
    let mut meta = String::new();
    for (index, (t, img)) in out.frames.iter().enumerate() {
        write_file(&frames_dir.join(format!("frame_{index:06}.pgm")), img.to_pgm())?;
        meta.push_str(&serde_json::to_string(&FrameMeta { index, t: *t }).expect("meta"));
        meta.push('\n');
    }
    write_file(&dir.join("frames.jsonl"), meta)?;
    write_file(&dir.join("tokens.jsonl"), tokens_jsonl(&out.tokens))?;
    write_file(&dir.join("stats.json"), stats_json(&out.stats))
}

/// `patches/patch_NNNNNN.pgm`, `patches.jsonl`, `regions.jsonl`, `tokens.jsonl`, `stats.json`.
pub fn write_art(out: &ArtOutput, dir: &Path) -> Result<(), PipelineError> {
    let patch_dir = dir.join("patches");
    create_dir(&patch_dir)?;
    let mut meta = String::new();
    for (index, p) in out.patches.iter().enumerate() {
        write_file(&patch_dir.join(format!("patch_{index:06}.pgm")), p.pixels.to_pgm())?;
        let line = PatchMeta {
            index,
            t: p.t,
            rect: p.rect,
            pair_index: p.pair_index,
        };
        meta.push_str(&serde_json::to_string(&line).expect("meta"));
        meta.push('\n');
    }
    write_file(&dir.join("patches.jsonl"), meta)?;
    write_file(&dir.join("regions.jsonl"), region_trace_jsonl(&out.regions))?;
    write_file(&dir.join("tokens.jsonl"), tokens_jsonl(&out.tokens))?;
    write_file(&dir.join("stats.json"), stats_json(&out.stats))
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct DensityReport {
    pub path: PathBuf,
    pub width: u16,
    pub height: u16,
    pub events: usize,
    pub duration_us: Micros,
    pub density: f64,
}

pub fn density_report(path: &Path, stream: &EventStream) -> Result<DensityReport, PipelineError> {
    let geometry: SensorGeometry = stream.geometry();
    Ok(DensityReport {
        path: path.to_path_buf(),
        width: geometry.width,
        height: geometry.height,
        events: stream.len(),
        duration_us: stream.duration(),
        density: stream.event_density().map_err(|source| PipelineError::Input {
            path: path.display().to_string(),
            source,
        })?,
    })
}

/// The `k` lowest-density reports, ascending; ties keep input order.
pub fn lowest_density(mut reports: Vec<DensityReport>, k: usize) -> Vec<DensityReport> {
    reports.sort_by(|a, b| a.density.total_cmp(&b.density));
    reports.truncate(k);
    reports
}
