//! Polarity-sum voxel grids over B temporal bins, either full-frame on a fixed
//! frame clock or confined to a patch-aligned rectangle and interval.

use serde::Serialize;
use thiserror::Error;

use crate::events::{Event, EventStream, Micros, SensorGeometry, PATCH_SIZE};

#[derive(Debug, Error, PartialEq)]
pub enum VoxelError {
    #[error("t={t} outside [{t_start}, {t_end}]")]
    OutOfInterval { t: Micros, t_start: Micros, t_end: Micros },
    #[error("invalid interval [{0}, {1})")]
    InvalidInterval(Micros, Micros),
    #[error("stream duration is zero")]
    EmptyDuration,
    #[error("frame interval and bin count must be positive")]
    InvalidClock,
    #[error("invalid rect {0:?}")]
    InvalidRect(Rect),
}

/// Half-open pixel rectangle `[x1, x2) x [y1, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, serde::Deserialize)]
pub struct Rect {
    pub x1: u32,
    pub x2: u32,
    pub y1: u32,
    pub y2: u32,
}

impl Rect {
    pub fn new(x1: u32, x2: u32, y1: u32, y2: u32) -> Self {
        Self { x1, x2, y1, y2 }
    }

    /// The whole padded sensor.
    pub fn full(geometry: SensorGeometry) -> Self {
        Self::new(0, geometry.padded_width(), 0, geometry.padded_height())
    }

    pub fn width(&self) -> u32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> u32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> u32 {
        self.width() * self.height()
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }

    pub fn patch_count(&self) -> u32 {
        self.area() / (PATCH_SIZE * PATCH_SIZE)
    }

    pub fn is_patch_aligned(&self) -> bool {
        [self.x1, self.x2, self.y1, self.y2]
            .iter()
            .all(|v| v % PATCH_SIZE == 0)
    }

    /// Non-empty, 32-aligned and inside the padded sensor.
    pub fn validate(&self, geometry: SensorGeometry) -> Result<(), VoxelError> {
        if self.x1 < self.x2
            && self.y1 < self.y2
            && self.is_patch_aligned()
            && self.x2 <= geometry.padded_width()
            && self.y2 <= geometry.padded_height()
        {
            Ok(())
        } else {
            Err(VoxelError::InvalidRect(*self))
        }
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x1 < other.x2 && other.x1 < self.x2 && self.y1 < other.y2 && other.y1 < self.y2
    }
}

/// Dense `(bin, row, column)` tensor of polarity sums.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelTensor {
    bins: usize,
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl VoxelTensor {
    pub fn zeros(bins: usize, width: usize, height: usize) -> Self {
        Self {
            bins,
            width,
            height,
            data: vec![0.0; bins * width * height],
        }
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    fn index(&self, bin: usize, x: usize, y: usize) -> usize {
        (bin * self.height + y) * self.width + x
    }

    /// Accessor order is (bin, column, row).
    pub fn get(&self, bin: usize, x: usize, y: usize) -> f32 {
        self.data[self.index(bin, x, y)]
    }

    pub fn add(&mut self, bin: usize, x: usize, y: usize, v: f32) {
        let i = self.index(bin, x, y);
        self.data[i] += v;
    }

    pub fn bin_sum(&self, x: usize, y: usize) -> f32 {
        (0..self.bins).map(|b| self.get(b, x, y)).sum()
    }

    pub fn total(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Bin plane `b` as a row-major slice.
    pub fn plane(&self, bin: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[bin * n..(bin + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub geometry: SensorGeometry,
    pub t_start: Micros,
    pub t_end: Micros,
    pub tensor: VoxelTensor,
}

impl VoxelGrid {
    pub fn bins(&self) -> usize {
        self.tensor.bins
    }

    pub fn get(&self, bin: usize, x: usize, y: usize) -> f32 {
        self.tensor.get(bin, x, y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionVoxel {
    pub rect: Rect,
    pub t1: Micros,
    pub t2: Micros,
    /// Coordinates relative to `rect`'s origin.
    pub tensor: VoxelTensor,
}

impl RegionVoxel {
    pub fn bins(&self) -> usize {
        self.tensor.bins
    }

    pub fn get(&self, bin: usize, x: usize, y: usize) -> f32 {
        self.tensor.get(bin, x, y)
    }
}

/// Zero-based temporal bin of `t` in `[t_start, t_end]`; `t == t_end` lands in the last bin.
pub fn bin_of(t: Micros, t_start: Micros, t_end: Micros, bins: usize) -> Result<usize, VoxelError> {
    if t_end <= t_start {
        return Err(VoxelError::InvalidInterval(t_start, t_end));
    }
    if t < t_start || t > t_end {
        return Err(VoxelError::OutOfInterval { t, t_start, t_end });
    }
    let b = (bins as u128 * (t - t_start) as u128) / (t_end - t_start) as u128;
    Ok((b as usize).min(bins - 1))
}

/// How a recording is cut into consecutive voxel intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FrameClock {
    /// Fixed interval in microseconds.
    Interval(Micros),
    /// Frames per second; boundaries at `floor(k * 1e6 / fps)`, so
    /// non-integral microsecond periods never drift.
    Rate(f64),
}

impl FrameClock {
    /// `[start, end)` of every interval needed to cover `duration`
    /// (a trailing partial interval keeps its full length).
    pub fn intervals(&self, t_start: Micros, duration: Micros) -> Result<Vec<(Micros, Micros)>, VoxelError> {
        match *self {
            FrameClock::Interval(dt) => {
                if dt == 0 {
                    return Err(VoxelError::InvalidClock);
                }
                let count = duration.div_ceil(dt);
                Ok((0..count)
                    .map(|k| (t_start + k * dt, t_start + (k + 1) * dt))
                    .collect())
            }
            FrameClock::Rate(fps) => {
                if !(fps > 0.0) || !fps.is_finite() {
                    return Err(VoxelError::InvalidClock);
                }
                let count = frame_count_at_rate(duration, fps);
                let edge = |k: u64| t_start + ((k as f64 * 1e6) / fps).floor() as u64;
                Ok((0..count).map(|k| (edge(k), edge(k + 1))).collect())
            }
        }
    }
}

/// `ceil(duration * fps)` with `duration` in microseconds.
pub fn frame_count_at_rate(duration: Micros, fps: f64) -> u64 {
    let exact = duration as f64 * fps / 1e6;
    // products like 1e6 * 24 / 1e6 are exact; guard against representation noise
    let rounded = exact.round();
    if (exact - rounded).abs() < 1e-9 {
        rounded as u64
    } else {
        exact.ceil() as u64
    }
}

/// One full-frame voxel grid per clock interval; every event of `stream`
/// lands in exactly one (grid, bin, x, y) cell.
pub fn accumulate_voxels(stream: &EventStream, clock: FrameClock, bins: usize) -> Result<Vec<VoxelGrid>, VoxelError> {
    if bins == 0 {
        return Err(VoxelError::InvalidClock);
    }
    if stream.duration() == 0 {
        return Err(VoxelError::EmptyDuration);
    }
    let geometry = stream.geometry();
    let (w, h) = (geometry.width as usize, geometry.height as usize);
    let intervals = clock.intervals(stream.t_start(), stream.duration())?;
    let mut grids: Vec<VoxelGrid> = intervals
        .iter()
        .map(|&(t_start, t_end)| VoxelGrid {
            geometry,
            t_start,
            t_end,
            tensor: VoxelTensor::zeros(bins, w, h),
        })
        .collect();
    let last = grids.len() - 1;
    for e in stream.events() {
        let k = intervals.partition_point(|&(s, _)| s <= e.t).saturating_sub(1).min(last);
        let grid = &mut grids[k];
        let b = bin_of(e.t, grid.t_start, grid.t_end, bins)?;
        grid.tensor.add(b, e.x as usize, e.y as usize, e.p.sign() as f32);
    }
    Ok(grids)
}

/// Voxel over `rect x [t1, t2)`, binned against its own interval.
pub fn accumulate_region_voxel(
    events: &[Event],
    geometry: SensorGeometry,
    rect: Rect,
    t1: Micros,
    t2: Micros,
    bins: usize,
) -> Result<RegionVoxel, VoxelError> {
    rect.validate(geometry)?;
    if t2 <= t1 || bins == 0 {
        return Err(VoxelError::InvalidInterval(t1, t2));
    }
    let mut tensor = VoxelTensor::zeros(bins, rect.width() as usize, rect.height() as usize);
    for e in events {
        let (x, y) = (e.x as u32, e.y as u32);
        if e.t < t1 || e.t >= t2 || !rect.contains(x, y) {
            continue;
        }
        let b = bin_of(e.t, t1, t2, bins)?;
        tensor.add(b, (x - rect.x1) as usize, (y - rect.y1) as usize, e.p.sign() as f32);
    }
    Ok(RegionVoxel { rect, t1, t2, tensor })
}

/// JSON sidecar describing a flat little-endian f32 voxel dump.
#[derive(Debug, Clone, Serialize)]
pub struct VoxelDumpMeta {
    pub dtype: &'static str,
    pub layout: &'static str,
    /// `[grids, bins, height, width]`
    pub shape: [usize; 4],
    pub intervals: Vec<(Micros, Micros)>,
    pub rect: Rect,
}

/// Serializes grids as `grid, bin, row, column` f32 LE values plus the sidecar.
pub fn dump_voxels(grids: &[VoxelGrid]) -> (Vec<u8>, VoxelDumpMeta) {
    let (bins, w, h, geometry) = grids
        .first()
        .map(|g| (g.tensor.bins, g.tensor.width, g.tensor.height, g.geometry))
        .unwrap_or((0, 0, 0, SensorGeometry { width: 0, height: 0 }));
    let mut bytes = Vec::with_capacity(grids.len() * bins * w * h * 4);
    for g in grids {
        for v in &g.tensor.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = VoxelDumpMeta {
        dtype: "f32le",
        layout: "grid,bin,row,col",
        shape: [grids.len(), bins, h, w],
        intervals: grids.iter().map(|g| (g.t_start, g.t_end)).collect(),
        rect: Rect::new(0, geometry.width as u32, 0, geometry.height as u32),
    };
    (bytes, meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::Polarity;
    use proptest::prelude::*;

    fn geom(w: u16, h: u16) -> SensorGeometry {
        SensorGeometry::new(w, h).unwrap()
    }

    #[test]
    fn bin_of_examples() {
        assert_eq!(bin_of(0, 0, 1_000_000, 5), Ok(0));
        assert_eq!(bin_of(1_000_000, 0, 1_000_000, 5), Ok(4));
        assert_eq!(bin_of(300_000, 0, 1_000_000, 5), Ok(1));
        assert!(matches!(bin_of(5, 10, 20, 5), Err(VoxelError::OutOfInterval { .. })));
        assert!(matches!(bin_of(10, 10, 10, 5), Err(VoxelError::InvalidInterval(..))));
    }

    #[test]
    fn empty_stream_gives_zero_grids() {
        let s = EventStream::empty(geom(8, 8), 0, 1_000_000).unwrap();
        let grids = accumulate_voxels(&s, FrameClock::Interval(500_000), 5).unwrap();
        assert_eq!(grids.len(), 2);
        assert!(grids.iter().all(|g| g.tensor.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn single_event_placement() {
        let s = EventStream::new(geom(8, 8), vec![Event::new(300_000, 2, 1, Polarity::Positive)], 0, 1_000_000)
            .unwrap();
        let grids = accumulate_voxels(&s, FrameClock::Interval(1_000_000), 5).unwrap();
        assert_eq!(grids.len(), 1);
        assert_eq!(grids[0].get(1, 2, 1), 1.0);
        assert_eq!(grids[0].tensor.total(), 1.0);
    }

    #[test]
    fn event_at_recording_end_is_clamped_into_last_grid() {
        let s = EventStream::new(geom(4, 4), vec![Event::new(1_000_000, 0, 0, Polarity::Negative)], 0, 1_000_000)
            .unwrap();
        let grids = accumulate_voxels(&s, FrameClock::Interval(500_000), 5).unwrap();
        assert_eq!(grids[1].get(4, 0, 0), -1.0);
    }

    #[test]
    fn rate_clock_has_exact_frame_counts() {
        let iv = FrameClock::Rate(24.0).intervals(0, 1_000_000).unwrap();
        assert_eq!(iv.len(), 24);
        assert_eq!(iv[0], (0, 41_666));
        assert_eq!(iv[23].1, 1_000_000);
        assert!(iv.windows(2).all(|w| w[0].1 == w[1].0));
        assert_eq!(FrameClock::Rate(24.0).intervals(0, 61_000_000).unwrap().len(), 1464);
    }

    #[test]
    fn zero_duration_rejected() {
        let s = EventStream::empty(geom(4, 4), 7, 7).unwrap();
        assert_eq!(
            accumulate_voxels(&s, FrameClock::Interval(10), 5),
            Err(VoxelError::EmptyDuration)
        );
    }

    #[test]
    fn region_voxel_shifts_origin() {
        let g = geom(64, 64);
        let rect = Rect::new(32, 64, 0, 32);
        let evs = [Event::new(10, 40, 8, Polarity::Positive)];
        let rv = accumulate_region_voxel(&evs, g, rect, 0, 100, 5).unwrap();
        assert_eq!(rv.tensor.bin_sum(8, 8), 1.0);
        assert_eq!(rv.tensor.total(), 1.0);
        let empty = accumulate_region_voxel(&[], g, rect, 0, 100, 5).unwrap();
        assert_eq!(empty.tensor.total(), 0.0);
    }

    #[test]
    fn region_voxel_rejects_bad_rects() {
        let g = geom(64, 64);
        assert!(matches!(
            accumulate_region_voxel(&[], g, Rect::new(0, 16, 0, 32), 0, 10, 5),
            Err(VoxelError::InvalidRect(_))
        ));
        assert!(matches!(
            accumulate_region_voxel(&[], g, Rect::new(0, 96, 0, 32), 0, 10, 5),
            Err(VoxelError::InvalidRect(_))
        ));
        assert!(matches!(
            accumulate_region_voxel(&[], g, Rect::new(0, 32, 0, 32), 10, 10, 5),
            Err(VoxelError::InvalidInterval(..))
        ));
    }

    #[test]
    fn padded_region_is_allowed() {
        let g = geom(40, 20);
        let rv = accumulate_region_voxel(&[], g, Rect::new(32, 64, 0, 32), 0, 10, 2).unwrap();
        assert_eq!(rv.tensor.width(), 32);
    }

    #[test]
    fn dump_layout_matches_accessor() {
        let s = EventStream::new(geom(3, 2), vec![Event::new(0, 2, 1, Polarity::Positive)], 0, 10).unwrap();
        let grids = accumulate_voxels(&s, FrameClock::Interval(10), 2).unwrap();
        let (bytes, meta) = dump_voxels(&grids);
        assert_eq!(meta.shape, [1, 2, 2, 3]);
        assert_eq!(bytes.len(), 12 * 4);
        let idx = 5; // bin 0, row 1, col 2
        assert_eq!(f32::from_le_bytes(bytes[idx * 4..idx * 4 + 4].try_into().unwrap()), 1.0);
    }

    fn arb_stream() -> impl Strategy<Value = EventStream> {
        prop::collection::vec((0u64..1_000_000, 0u16..64, 0u16..64, any::<bool>()), 0..400).prop_map(|raw| {
            let evs = raw
                .into_iter()
                .map(|(t, x, y, p)| Event::new(t, x, y, if p { Polarity::Positive } else { Polarity::Negative }))
                .collect();
            EventStream::new(geom(64, 64), evs, 0, 1_000_000).unwrap()
        })
    }

    proptest! {
        #[test]
        fn voxels_conserve_polarity(s in arb_stream(), dt in 1u64..400_000, bins in 1usize..7) {
            let grids = accumulate_voxels(&s, FrameClock::Interval(dt), bins).unwrap();
            let total: f64 = grids.iter().map(|g| g.tensor.total()).sum();
            let expected: i64 = s.events().iter().map(|e| e.p.sign() as i64).sum();
            prop_assert_eq!(total, expected as f64);
        }

        #[test]
        fn negation_negates_cells(s in arb_stream(), dt in 1u64..400_000) {
            let a = accumulate_voxels(&s, FrameClock::Interval(dt), 5).unwrap();
            let b = accumulate_voxels(&s.negated(), FrameClock::Interval(dt), 5).unwrap();
            for (ga, gb) in a.iter().zip(&b) {
                prop_assert!(ga.tensor.data().iter().zip(gb.tensor.data()).all(|(x, y)| *x == -*y));
            }
        }

        #[test]
        fn time_shift_invariance(s in arb_stream(), offset in 1u64..10_000_000, dt in 1u64..400_000) {
            let shifted_events = s.events().iter().map(|e| Event { t: e.t + offset, ..*e }).collect();
            let shifted = EventStream::new(s.geometry(), shifted_events, offset, s.t_end() + offset).unwrap();
            let a = accumulate_voxels(&s, FrameClock::Interval(dt), 5).unwrap();
            let b = accumulate_voxels(&shifted, FrameClock::Interval(dt), 5).unwrap();
            prop_assert_eq!(a.len(), b.len());
            for (ga, gb) in a.iter().zip(&b) {
                prop_assert_eq!(&ga.tensor, &gb.tensor);
            }
        }

        #[test]
        fn full_rect_region_matches_grid(s in arb_stream(), k in 0u64..3) {
            let grids = accumulate_voxels(&s, FrameClock::Interval(250_000), 5).unwrap();
            let g = &grids[k as usize];
            let rv = accumulate_region_voxel(s.events(), s.geometry(), Rect::full(s.geometry()), g.t_start, g.t_end, 5).unwrap();
            prop_assert_eq!(&rv.tensor, &g.tensor);
        }

        #[test]
        fn region_sum_matches_filter(s in arb_stream(), cx in 0u32..2, cy in 0u32..2, t1 in 0u64..500_000, len in 1u64..500_000) {
            let rect = Rect::new(cx * 32, cx * 32 + 32, cy * 32, cy * 32 + 32);
            let rv = accumulate_region_voxel(s.events(), s.geometry(), rect, t1, t1 + len, 5).unwrap();
            let brute: i64 = s.events().iter()
                .filter(|e| e.t >= t1 && e.t < t1 + len && rect.contains(e.x as u32, e.y as u32))
                .map(|e| e.p.sign() as i64).sum();
            prop_assert_eq!(rv.tensor.total(), brute as f64);
        }
    }
}
