//! Recurrent intensity reconstruction from voxels.
//!
//! Two backends share one state type: a learning-free leaky integrator and a
//! toy ConvLSTM U-Net. The full-frame path steps over the whole padded sensor
//! at every voxel grid; the adaptive path steps over one patch-aligned
//! rectangle at a time and reads and writes only the state inside it.

pub mod network;
pub mod tensor;
pub mod weights;

use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::events::{Micros, SensorGeometry, PATCH_SIZE};
use crate::pgm::GrayImage;
use crate::voxel::{Rect, RegionVoxel, VoxelGrid, VoxelTensor};

pub use network::{global_fuse, Architecture, ConvLstmNet, FuseTrace, LstmState};
pub use tensor::{Conv2d, FeatureMap};

#[derive(Debug, Error, PartialEq)]
pub enum ReconError {
    #[error("voxel geometry or bin count does not match the reconstructor: {0}")]
    GeometryMismatch(String),
    #[error("rect {0:?} is not aligned to the network's {1}-pixel stride")]
    RectMisaligned(Rect, u32),
    #[error("step at t={now} precedes the last reconstruction at t={last} inside {rect:?}")]
    NonChronological { now: Micros, last: Micros, rect: Rect },
    #[error("weight shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("corrupt weight file: {0}")]
    CorruptFile(String),
    #[error("invalid reconstruction config: {0}")]
    InvalidConfig(String),
    #[error("reading weights: {0}")]
    Io(String),
    #[error("global feature vector became non-finite at {0:?}")]
    NonFinite(Rect),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Integrator,
    Convlstm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconConfig {
    pub backend: BackendKind,
    pub bins: usize,
    pub global_dim: usize,
    pub base_channels: usize,
    pub levels: usize,
    /// Integrator gain per unit of polarity sum.
    pub contrast: f64,
    /// Elapsed-time channel saturates at this many seconds.
    pub elapsed_clamp_s: f64,
    /// Integrator decay time constant in seconds.
    pub decay_tau_s: f64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Integrator,
            bins: 5,
            global_dim: 16,
            base_channels: 8,
            levels: 2,
            contrast: 0.1,
            elapsed_clamp_s: 10.0,
            decay_tau_s: 3.0,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<(), ReconError> {
        let bad = |m: &str| Err(ReconError::InvalidConfig(m.into()));
        if self.bins == 0 || self.global_dim == 0 || self.base_channels == 0 {
            return bad("bins, global_dim and base_channels must be positive");
        }
        if self.levels == 0 || !PATCH_SIZE.is_multiple_of(1 << self.levels.min(31)) || self.levels > 5 {
            return bad("levels must be in 1..=5 so that 2^levels divides 32");
        }
        if !(self.contrast > 0.0 && self.elapsed_clamp_s > 0.0 && self.decay_tau_s > 0.0) {
            return bad("contrast, elapsed clamp and decay must be positive");
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            levels: self.levels,
            base_channels: self.base_channels,
            global_dim: self.global_dim,
            bins: self.bins,
        }
    }
}

/// Recurrent state covering the whole padded sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconState {
    geometry: SensorGeometry,
    width: usize,
    height: usize,
    /// Level `l` (index `l - 1`) at `1 / 2^l` resolution.
    hidden: Vec<LstmState>,
    f_g: Vec<f64>,
    /// Per-pixel time of the last reconstruction.
    elapsed: Vec<Micros>,
    integrator_acc: Vec<f64>,
}

impl ReconState {
    pub fn geometry(&self) -> SensorGeometry {
        self.geometry
    }

    pub fn hidden(&self) -> &[LstmState] {
        &self.hidden
    }

    pub fn global_features(&self) -> &[f64] {
        &self.f_g
    }

    pub fn set_global_features(&mut self, f_g: Vec<f64>) {
        assert_eq!(f_g.len(), self.f_g.len(), "global feature length");
        self.f_g = f_g;
    }

    /// Last-reconstruction timestamps, row-major over the padded sensor.
    pub fn elapsed_map(&self) -> &[Micros] {
        &self.elapsed
    }

    pub fn last_reconstruction(&self, x: u32, y: u32) -> Micros {
        self.elapsed[y as usize * self.width + x as usize]
    }

    pub fn integrator_accumulator(&self) -> &[f64] {
        &self.integrator_acc
    }

    pub fn padded_size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn latest_in(&self, rect: &Rect) -> Micros {
        let mut latest = 0;
        for y in rect.y1..rect.y2 {
            let row = y as usize * self.width;
            for x in rect.x1..rect.x2 {
                latest = latest.max(self.elapsed[row + x as usize]);
            }
        }
        latest
    }

    fn mark_reconstructed(&mut self, rect: &Rect, now: Micros) {
        for y in rect.y1..rect.y2 {
            let row = y as usize * self.width;
            self.elapsed[row + rect.x1 as usize..row + rect.x2 as usize].fill(now);
        }
    }
}

/// A reconstructed rectangle from the adaptive path.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFrame {
    pub rect: Rect,
    pub pixels: GrayImage,
    /// End of the half-interval this frame reconstructs.
    pub t: Micros,
    /// 0 or 1 within its trigger pair.
    pub pair_index: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Backend {
    Integrator,
    ConvLstm(Box<ConvLstmNet>),
}

/// Where CONVLSTM weights came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsSource {
    None,
    File(String),
    Seeded(u64),
}

/// Leaky integrator update over `rect` (sensor coordinates, voxel origin at
/// the rect origin). The accumulator first decays by `exp(-dt / tau)` for the
/// time since each pixel's last reconstruction, then adds `contrast` times the
/// bin-summed polarity. Output is `sigmoid(acc)` over the rect.
pub fn integrator_step(
    state: &mut ReconState,
    rect: Rect,
    voxel: &VoxelTensor,
    now: Micros,
    contrast: f64,
    decay_tau_s: f64,
) -> GrayImage {
    let (w, h) = (rect.width() as usize, rect.height() as usize);
    let mut pixels = Vec::with_capacity(w * h);
    for ly in 0..h {
        for lx in 0..w {
            let idx = (rect.y1 as usize + ly) * state.width + rect.x1 as usize + lx;
            let gap_s = now.saturating_sub(state.elapsed[idx]) as f64 * 1e-6;
            let mut acc = state.integrator_acc[idx];
            if gap_s > 0.0 {
                acc *= (-gap_s / decay_tau_s).exp();
            }
            if lx < voxel.width() && ly < voxel.height() {
                acc += contrast * voxel.bin_sum(lx, ly) as f64;
            }
            state.integrator_acc[idx] = acc;
            state.elapsed[idx] = now;
            pixels.push((1.0 / (1.0 + (-acc).exp())) as f32);
        }
    }
    GrayImage::new(w as u32, h as u32, pixels).expect("sized by rect")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstructor {
    config: ReconConfig,
    backend: Backend,
}

impl Reconstructor {
    pub fn integrator(config: ReconConfig) -> Result<Self, ReconError> {
        config.validate()?;
        Ok(Self {
            config: ReconConfig {
                backend: BackendKind::Integrator,
                ..config
            },
            backend: Backend::Integrator,
        })
    }

    pub fn with_network(config: ReconConfig, net: ConvLstmNet) -> Result<Self, ReconError> {
        config.validate()?;
        if net.arch != config.architecture() {
            return Err(ReconError::ShapeMismatch(format!(
                "network {:?} vs config {:?}",
                net.arch,
                config.architecture()
            )));
        }
        Ok(Self {
            config: ReconConfig {
                backend: BackendKind::Convlstm,
                ..config
            },
            backend: Backend::ConvLstm(Box::new(net)),
        })
    }

    /// Builds the configured backend. For CONVLSTM, weights come from
    /// `weights` when that file exists and from `seed` otherwise.
    pub fn load(config: ReconConfig, weights: Option<&Path>, seed: u64) -> Result<(Self, WeightsSource), ReconError> {
        match config.backend {
            BackendKind::Integrator => Ok((Self::integrator(config)?, WeightsSource::None)),
            BackendKind::Convlstm => {
                config.validate()?;
                let arch = config.architecture();
                match weights {
                    Some(path) if path.exists() => {
                        let bytes = std::fs::read(path).map_err(|e| ReconError::Io(format!("{}: {e}", path.display())))?;
                        let net = weights::load_weights(&bytes, arch)?;
                        Ok((Self::with_network(config, net)?, WeightsSource::File(path.display().to_string())))
                    }
                    _ => Ok((
                        Self::with_network(config, ConvLstmNet::seeded(arch, seed))?,
                        WeightsSource::Seeded(seed),
                    )),
                }
            }
        }
    }

    pub fn config(&self) -> &ReconConfig {
        &self.config
    }

    pub fn backend(&self) -> &Backend {
        &self.backend
    }

    /// Zero hidden state and global vector; every pixel last reconstructed at `t_start`.
    pub fn initial_state(&self, geometry: SensorGeometry, t_start: Micros) -> ReconState {
        let (w, h) = (geometry.padded_width() as usize, geometry.padded_height() as usize);
        let hidden = match &self.backend {
            Backend::Integrator => Vec::new(),
            Backend::ConvLstm(net) => (1..=net.arch.levels)
                .map(|l| LstmState::zeros(net.arch.channels(l), h >> l, w >> l))
                .collect(),
        };
        ReconState {
            geometry,
            width: w,
            height: h,
            hidden,
            f_g: vec![0.0; self.config.global_dim],
            elapsed: vec![t_start; w * h],
            integrator_acc: vec![0.0; w * h],
        }
    }

    /// Full-frame recurrence: one image per grid, cropped to the sensor.
    pub fn frt_reconstruct(&self, voxels: &[VoxelGrid], state: &mut ReconState) -> Result<Vec<GrayImage>, ReconError> {
        let geometry = state.geometry;
        let mut frames = Vec::with_capacity(voxels.len());
        for grid in voxels {
            if grid.geometry != geometry || grid.bins() != self.config.bins {
                return Err(ReconError::GeometryMismatch(format!(
                    "grid {}x{} B={} vs state {}x{} B={}",
                    grid.geometry.width,
                    grid.geometry.height,
                    grid.bins(),
                    geometry.width,
                    geometry.height,
                    self.config.bins
                )));
            }
            let rect = Rect::full(geometry);
            let (image, _) = self.step(state, rect, &grid.tensor, grid.t_end)?;
            frames.push(crop_image(&image, geometry.width as u32, geometry.height as u32));
        }
        Ok(frames)
    }

    /// Adaptive step over `rv.rect` at time `now`.
    pub fn art_step(&self, state: &mut ReconState, rv: &RegionVoxel, now: Micros, pair_index: u8) -> Result<PatchFrame, ReconError> {
        Ok(self.art_step_traced(state, rv, now, pair_index)?.0)
    }

    /// Like [`Reconstructor::art_step`], also returning the bottleneck fusion trace (CONVLSTM only).
    pub fn art_step_traced(
        &self,
        state: &mut ReconState,
        rv: &RegionVoxel,
        now: Micros,
        pair_index: u8,
    ) -> Result<(PatchFrame, Option<FuseTrace>), ReconError> {
        rv.rect
            .validate(state.geometry)
            .map_err(|_| ReconError::RectMisaligned(rv.rect, PATCH_SIZE))?;
        if rv.bins() != self.config.bins {
            return Err(ReconError::GeometryMismatch(format!(
                "region voxel has B={}, expected {}",
                rv.bins(),
                self.config.bins
            )));
        }
        let (pixels, trace) = self.step(state, rv.rect, &rv.tensor, now)?;
        Ok((
            PatchFrame {
                rect: rv.rect,
                pixels,
                t: now,
                pair_index,
            },
            trace,
        ))
    }

    fn step(
        &self,
        state: &mut ReconState,
        rect: Rect,
        voxel: &VoxelTensor,
        now: Micros,
    ) -> Result<(GrayImage, Option<FuseTrace>), ReconError> {
        let last = state.latest_in(&rect);
        if now < last {
            return Err(ReconError::NonChronological { now, last, rect });
        }
        match &self.backend {
            Backend::Integrator => Ok((
                integrator_step(state, rect, voxel, now, self.config.contrast, self.config.decay_tau_s),
                None,
            )),
            Backend::ConvLstm(net) => {
                let (image, trace) = self.network_step(net, state, rect, voxel, now)?;
                Ok((image, Some(trace)))
            }
        }
    }

    fn network_step(
        &self,
        net: &ConvLstmNet,
        state: &mut ReconState,
        rect: Rect,
        voxel: &VoxelTensor,
        now: Micros,
    ) -> Result<(GrayImage, FuseTrace), ReconError> {
        let stride = 1u32 << net.arch.levels;
        if [rect.x1, rect.x2, rect.y1, rect.y2].iter().any(|v| v % stride != 0) {
            return Err(ReconError::RectMisaligned(rect, stride));
        }
        let input = self.build_input(state, rect, voxel, now);
        let mut local: Vec<LstmState> = state
            .hidden
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let l = i + 1;
                s.crop(
                    (rect.x1 >> l) as usize,
                    (rect.y1 >> l) as usize,
                    (rect.width() >> l) as usize,
                    (rect.height() >> l) as usize,
                )
            })
            .collect();
        let (out, trace) = net.forward(&input, &mut local, &state.f_g);
        let f_g: Vec<f64> = state.f_g.iter().zip(&trace.delta).map(|(g, d)| g + d).collect();
        if f_g.iter().any(|v| !v.is_finite()) {
            return Err(ReconError::NonFinite(rect));
        }
        for (i, (full, part)) in state.hidden.iter_mut().zip(&local).enumerate() {
            let l = i + 1;
            full.paste(part, (rect.x1 >> l) as usize, (rect.y1 >> l) as usize);
        }
        state.f_g = f_g;
        state.mark_reconstructed(&rect, now);
        let image = GrayImage::new(rect.width(), rect.height(), out.plane(0).to_vec()).expect("sized by rect");
        Ok((image, trace))
    }

    /// `B` voxel planes plus the normalized elapsed-time plane.
    fn build_input(&self, state: &ReconState, rect: Rect, voxel: &VoxelTensor, now: Micros) -> FeatureMap {
        let bins = self.config.bins;
        let (w, h) = (rect.width() as usize, rect.height() as usize);
        let mut input = FeatureMap::zeros(bins + 1, h, w);
        for b in 0..bins {
            let src = voxel.plane(b);
            let dst = input.plane_mut(b);
            for y in 0..h.min(voxel.height()) {
                for x in 0..w.min(voxel.width()) {
                    dst[y * w + x] = src[y * voxel.width() + x];
                }
            }
        }
        let clamp = self.config.elapsed_clamp_s;
        let plane = input.plane_mut(bins);
        for y in 0..h {
            let row = (rect.y1 as usize + y) * state.width + rect.x1 as usize;
            for x in 0..w {
                let secs = (now - state.elapsed[row + x]) as f64 * 1e-6;
                plane[y * w + x] = (secs.min(clamp) / clamp) as f32;
            }
        }
        input
    }
}

fn crop_image(image: &GrayImage, w: u32, h: u32) -> GrayImage {
    if image.width() == w && image.height() == h {
        return image.clone();
    }
    let mut px = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            px.push(image.get(x, y));
        }
    }
    GrayImage::new(w, h, px).expect("crop size")
}
