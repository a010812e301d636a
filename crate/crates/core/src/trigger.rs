//! Activity-driven patch triggering over a 32x32 patch grid.
//!
//! Events are consumed in fixed batches. At each batch boundary every patch
//! whose accumulated new-event count reaches `theta * 1024` fires; fired
//! patches that share the same previous trigger time are merged into disjoint
//! rectangles, and each rectangle's interval `[t1, t2)` is split into two
//! temporally adjacent halves.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;
use thiserror::Error;

use crate::events::{Event, EventStream, Micros, SensorGeometry, PATCH_PIXELS, PATCH_SIZE};
use crate::voxel::{accumulate_region_voxel, Rect, RegionVoxel, VoxelError};

pub const DEFAULT_THETA: f64 = 0.5;
pub const DEFAULT_BATCH_US: Micros = 10_000;

#[derive(Debug, Error, PartialEq)]
pub enum TriggerError {
    #[error("event ({x}, {y}) outside the sensor")]
    EventOutOfBounds { x: u16, y: u16 },
    #[error("threshold must be positive and finite, got {0}")]
    InvalidTheta(f64),
    #[error("batch length must be positive")]
    InvalidBatch,
    #[error("batch end {batch_end} precedes previous batch end {previous}")]
    NonMonotonicBatch { batch_end: Micros, previous: Micros },
    #[error("interval [{t1}, {t2}) too short to split into a pair")]
    IntervalTooShort { t1: Micros, t2: Micros },
    #[error(transparent)]
    Voxel(#[from] VoxelError),
}

/// Patch-grid coordinate; ordering is row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatchCoord {
    pub row: u32,
    pub col: u32,
}

impl PatchCoord {
    pub fn new(col: u32, row: u32) -> Self {
        Self { row, col }
    }

    pub fn of_pixel(x: u32, y: u32) -> Self {
        Self::new(x / PATCH_SIZE, y / PATCH_SIZE)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TriggeredPatch {
    pub coord: PatchCoord,
    /// Previous trigger time of this patch.
    pub t1: Micros,
}

/// Per-patch new-event counters and last trigger times.
#[derive(Debug, Clone)]
pub struct PatchActivity {
    geometry: SensorGeometry,
    cols: u32,
    rows: u32,
    counts: Vec<u32>,
    last_trigger: Vec<Micros>,
    theta: f64,
    now: Micros,
}

impl PatchActivity {
    pub fn new(geometry: SensorGeometry, theta: f64, t_start: Micros) -> Result<Self, TriggerError> {
        if !(theta > 0.0) || !theta.is_finite() {
            return Err(TriggerError::InvalidTheta(theta));
        }
        let (cols, rows) = (geometry.patch_cols(), geometry.patch_rows());
        let n = (cols * rows) as usize;
        Ok(Self {
            geometry,
            cols,
            rows,
            counts: vec![0; n],
            last_trigger: vec![t_start; n],
            theta,
            now: t_start,
        })
    }

    pub fn grid_cols(&self) -> u32 {
        self.cols
    }

    pub fn grid_rows(&self) -> u32 {
        self.rows
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    fn index(&self, c: PatchCoord) -> usize {
        (c.row * self.cols + c.col) as usize
    }

    pub fn count(&self, c: PatchCoord) -> u32 {
        self.counts[self.index(c)]
    }

    pub fn last_trigger(&self, c: PatchCoord) -> Micros {
        self.last_trigger[self.index(c)]
    }

    /// Event count at which a patch fires. Always uses 1024 pixels, also for
    /// partial patches at a padded sensor edge.
    pub fn threshold_events(&self) -> f64 {
        self.theta * PATCH_PIXELS as f64
    }

    /// Adds a batch of events, fires every patch at or above threshold and
    /// resets those patches (count to zero, last trigger to `batch_end`).
    /// Returned patches are row-major and carry their previous trigger time.
    pub fn ingest_batch(&mut self, events: &[Event], batch_end: Micros) -> Result<Vec<TriggeredPatch>, TriggerError> {
        if batch_end < self.now {
            return Err(TriggerError::NonMonotonicBatch {
                batch_end,
                previous: self.now,
            });
        }
        for e in events {
            if !self.geometry.contains(e.x as u32, e.y as u32) {
                return Err(TriggerError::EventOutOfBounds { x: e.x, y: e.y });
            }
        }
        for e in events {
            let i = self.index(PatchCoord::of_pixel(e.x as u32, e.y as u32));
            self.counts[i] += 1;
        }
        let threshold = self.threshold_events();
        let mut fired = Vec::new();
        for row in 0..self.rows {
            for col in 0..self.cols {
                let coord = PatchCoord::new(col, row);
                let i = self.index(coord);
                if self.counts[i] as f64 >= threshold {
                    fired.push(TriggeredPatch {
                        coord,
                        t1: self.last_trigger[i],
                    });
                    self.counts[i] = 0;
                    self.last_trigger[i] = batch_end;
                }
            }
        }
        self.now = batch_end;
        Ok(fired)
    }
}

/// Half-open rectangle in patch units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatchRect {
    pub row0: u32,
    pub col0: u32,
    pub row1: u32,
    pub col1: u32,
}

impl PatchRect {
    pub fn contains(&self, c: PatchCoord) -> bool {
        c.row >= self.row0 && c.row < self.row1 && c.col >= self.col0 && c.col < self.col1
    }

    pub fn patch_count(&self) -> u32 {
        (self.row1 - self.row0) * (self.col1 - self.col0)
    }

    pub fn to_pixels(&self) -> Rect {
        Rect::new(
            self.col0 * PATCH_SIZE,
            self.col1 * PATCH_SIZE,
            self.row0 * PATCH_SIZE,
            self.row1 * PATCH_SIZE,
        )
    }
}

/// Greedy rectangle cover of a set of patches.
///
/// Rows are scanned top to bottom and split into maximal horizontal runs.
/// A run extends the rectangle ending directly above it when both span
/// exactly the same columns; otherwise it opens a new rectangle. Output is
/// sorted by origin, row-major.
pub fn merge_patches(triggered: &[PatchCoord]) -> Vec<PatchRect> {
    let mut cells = triggered.to_vec();
    cells.sort();
    cells.dedup();

    let mut rects: Vec<PatchRect> = Vec::new();
    // (col0, col1) -> index of the rectangle whose last row is the previous row
    let mut open: HashMap<(u32, u32), usize> = HashMap::new();
    let mut i = 0;
    while i < cells.len() {
        let row = cells[i].row;
        let mut next_open = HashMap::new();
        while i < cells.len() && cells[i].row == row {
            let col0 = cells[i].col;
            let mut col1 = col0 + 1;
            i += 1;
            while i < cells.len() && cells[i].row == row && cells[i].col == col1 {
                col1 += 1;
                i += 1;
            }
            let idx = match open.get(&(col0, col1)) {
                Some(&idx) if rects[idx].row1 == row => {
                    rects[idx].row1 = row + 1;
                    idx
                }
                _ => {
                    rects.push(PatchRect {
                        row0: row,
                        col0,
                        row1: row + 1,
                        col1,
                    });
                    rects.len() - 1
                }
            };
            next_open.insert((col0, col1), idx);
        }
        open = next_open;
    }
    rects.sort();
    rects
}

/// A merged trigger rectangle with its interval `[t1, t2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Region {
    pub rect: Rect,
    pub t1: Micros,
    pub t2: Micros,
    pub patch_count: u32,
}

/// Merges the patches fired at `t2`. Patches are merged only with patches
/// that share the same previous trigger time, so each region has one
/// well-defined interval. Result is sorted row-major by origin.
pub fn regions_for_batch(fired: &[TriggeredPatch], t2: Micros) -> Vec<Region> {
    let mut by_t1: BTreeMap<Micros, Vec<PatchCoord>> = BTreeMap::new();
    for p in fired {
        by_t1.entry(p.t1).or_default().push(p.coord);
    }
    let mut regions: Vec<Region> = by_t1
        .into_iter()
        .flat_map(|(t1, coords)| {
            merge_patches(&coords).into_iter().map(move |pr| Region {
                rect: pr.to_pixels(),
                t1,
                t2,
                patch_count: pr.patch_count(),
            })
        })
        .collect();
    regions.sort_by_key(|r| (r.t2, r.rect.y1, r.rect.x1));
    regions
}

/// Splits `[t1, t2)` at `tm = t1 + (t2 - t1) / 2` into two region voxels.
pub fn split_pair(
    events: &[Event],
    geometry: SensorGeometry,
    rect: Rect,
    t1: Micros,
    t2: Micros,
    bins: usize,
) -> Result<(RegionVoxel, RegionVoxel), TriggerError> {
    if t2 <= t1 + 1 {
        return Err(TriggerError::IntervalTooShort { t1, t2 });
    }
    let tm = t1 + (t2 - t1) / 2;
    let first = accumulate_region_voxel(events, geometry, rect, t1, tm, bins)?;
    let second = accumulate_region_voxel(events, geometry, rect, tm, t2, bins)?;
    Ok((first, second))
}

#[derive(Debug, Clone)]
pub struct TriggerBatchResult {
    pub regions: Vec<Region>,
    pub paired_voxels: Vec<(RegionVoxel, RegionVoxel)>,
}

/// Batch-by-batch driver over one recording.
#[derive(Debug, Clone)]
pub struct AdaptiveTrigger {
    activity: PatchActivity,
    batch_us: Micros,
    bins: usize,
}

impl AdaptiveTrigger {
    pub fn new(geometry: SensorGeometry, theta: f64, batch_us: Micros, bins: usize, t_start: Micros) -> Result<Self, TriggerError> {
        if batch_us == 0 {
            return Err(TriggerError::InvalidBatch);
        }
        Ok(Self {
            activity: PatchActivity::new(geometry, theta, t_start)?,
            batch_us,
            bins,
        })
    }

    pub fn activity(&self) -> &PatchActivity {
        &self.activity
    }

    /// Half-open batch windows `[start, end)` tiling the recording; the last
    /// window may run past `t_end`.
    pub fn batches(stream: &EventStream, batch_us: Micros) -> impl Iterator<Item = (Micros, Micros)> {
        let (t0, t_end) = (stream.t_start(), stream.t_end());
        (0u64..)
            .map(move |k| (t0 + k * batch_us, t0 + (k + 1) * batch_us))
            .take_while(move |&(s, _)| s <= t_end)
    }

    pub fn process_batch(&mut self, stream: &EventStream, start: Micros, end: Micros) -> Result<TriggerBatchResult, TriggerError> {
        let fired = self.activity.ingest_batch(stream.window(start, end), end)?;
        let regions = regions_for_batch(&fired, end);
        let paired_voxels = regions
            .iter()
            .map(|r| split_pair(stream.window(r.t1, r.t2), stream.geometry(), r.rect, r.t1, r.t2, self.bins))
            .collect::<Result<_, _>>()?;
        Ok(TriggerBatchResult {
            regions,
            paired_voxels,
        })
    }

    pub fn batch_us(&self) -> Micros {
        self.batch_us
    }
}

/// Every region a recording triggers, in processing order, without voxels.
pub fn detect_regions(stream: &EventStream, theta: f64, batch_us: Micros) -> Result<Vec<Region>, TriggerError> {
    if batch_us == 0 {
        return Err(TriggerError::InvalidBatch);
    }
    let mut activity = PatchActivity::new(stream.geometry(), theta, stream.t_start())?;
    let mut out = Vec::new();
    for (start, end) in AdaptiveTrigger::batches(stream, batch_us) {
        let fired = activity.ingest_batch(stream.window(start, end), end)?;
        out.extend(regions_for_batch(&fired, end));
    }
    Ok(out)
}

/// One line of the region trace export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct RegionTraceRecord {
    pub t1: Micros,
    pub t2: Micros,
    pub x1: u32,
    pub x2: u32,
    pub y1: u32,
    pub y2: u32,
    pub patch_count: u32,
}

impl From<&Region> for RegionTraceRecord {
    fn from(r: &Region) -> Self {
        Self {
            t1: r.t1,
            t2: r.t2,
            x1: r.rect.x1,
            x2: r.rect.x2,
            y1: r.rect.y1,
            y2: r.rect.y2,
            patch_count: r.patch_count,
        }
    }
}

/// JSON-lines region trace, one object per region.
pub fn region_trace_jsonl(regions: &[Region]) -> String {
    let mut out = String::new();
    for r in regions {
        out.push_str(&serde_json::to_string(&RegionTraceRecord::from(r)).expect("plain struct"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::Polarity;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn geom(w: u16, h: u16) -> SensorGeometry {
        SensorGeometry::new(w, h).unwrap()
    }

    fn burst(n: usize, x: u16, y: u16, t: Micros) -> Vec<Event> {
        (0..n).map(|_| Event::new(t, x, y, Polarity::Positive)).collect()
    }

    #[test]
    fn threshold_boundary() {
        let mut a = PatchActivity::new(geom(64, 64), 0.5, 0).unwrap();
        assert!(a.ingest_batch(&burst(511, 3, 3, 5), 10).unwrap().is_empty());
        let mut b = PatchActivity::new(geom(64, 64), 0.5, 0).unwrap();
        let fired = b.ingest_batch(&burst(512, 3, 3, 5), 10).unwrap();
        assert_eq!(fired, vec![TriggeredPatch { coord: PatchCoord::new(0, 0), t1: 0 }]);
        assert_eq!(b.count(PatchCoord::new(0, 0)), 0);
        assert_eq!(b.last_trigger(PatchCoord::new(0, 0)), 10);
    }

    #[test]
    fn counts_carry_across_batches() {
        let mut a = PatchActivity::new(geom(64, 64), 0.5, 0).unwrap();
        assert!(a.ingest_batch(&burst(300, 40, 40, 5), 10).unwrap().is_empty());
        assert_eq!(a.count(PatchCoord::new(1, 1)), 300);
        let fired = a.ingest_batch(&burst(300, 40, 40, 15), 20).unwrap();
        assert_eq!(fired.len(), 1);
        assert_eq!(fired[0].t1, 0);
    }

    #[test]
    fn ingest_rejects_out_of_bounds_and_backwards_batches() {
        let mut a = PatchActivity::new(geom(40, 40), 0.5, 0).unwrap();
        assert_eq!(
            a.ingest_batch(&[Event::new(1, 50, 0, Polarity::Positive)], 10),
            Err(TriggerError::EventOutOfBounds { x: 50, y: 0 })
        );
        a.ingest_batch(&[], 10).unwrap();
        assert!(matches!(a.ingest_batch(&[], 5), Err(TriggerError::NonMonotonicBatch { .. })));
        assert!(matches!(PatchActivity::new(geom(4, 4), 0.0, 0), Err(TriggerError::InvalidTheta(_))));
    }

    #[test]
    fn padded_grid_dimensions() {
        let a = PatchActivity::new(geom(240, 180), 0.5, 0).unwrap();
        assert_eq!((a.grid_cols(), a.grid_rows()), (8, 6));
    }

    #[test]
    fn merge_examples() {
        assert!(merge_patches(&[]).is_empty());
        let l_shape = [PatchCoord::new(0, 0), PatchCoord::new(1, 0), PatchCoord::new(0, 1)];
        assert_eq!(
            merge_patches(&l_shape),
            vec![
                PatchRect { row0: 0, col0: 0, row1: 1, col1: 2 },
                PatchRect { row0: 1, col0: 0, row1: 2, col1: 1 },
            ]
        );
        let block: Vec<_> = (0..3).flat_map(|r| (0..3).map(move |c| PatchCoord::new(c + 2, r + 1))).collect();
        assert_eq!(merge_patches(&block), vec![PatchRect { row0: 1, col0: 2, row1: 4, col1: 5 }]);
    }

    #[test]
    fn merge_does_not_jump_gaps() {
        let cells = [PatchCoord::new(0, 0), PatchCoord::new(0, 2)];
        assert_eq!(merge_patches(&cells).len(), 2);
    }

    #[test]
    fn patches_with_different_history_stay_separate() {
        let fired = [
            TriggeredPatch { coord: PatchCoord::new(0, 0), t1: 0 },
            TriggeredPatch { coord: PatchCoord::new(1, 0), t1: 10 },
        ];
        let regions = regions_for_batch(&fired, 20);
        assert_eq!(regions.len(), 2);
        assert_eq!((regions[0].t1, regions[1].t1), (0, 10));
    }

    #[test]
    fn split_pair_midpoint_and_errors() {
        let g = geom(32, 32);
        let rect = Rect::new(0, 32, 0, 32);
        let (a, b) = split_pair(&[], g, rect, 0, 1_000_000, 5).unwrap();
        assert_eq!((a.t1, a.t2, b.t1, b.t2), (0, 500_000, 500_000, 1_000_000));
        assert_eq!(a.tensor.total() + b.tensor.total(), 0.0);
        assert_eq!(split_pair(&[], g, rect, 5, 6, 5).unwrap_err(), TriggerError::IntervalTooShort { t1: 5, t2: 6 });
    }

    #[test]
    fn trace_jsonl_fields() {
        let r = Region { rect: Rect::new(32, 64, 0, 32), t1: 0, t2: 10, patch_count: 1 };
        assert_eq!(
            region_trace_jsonl(&[r]),
            "{\"t1\":0,\"t2\":10,\"x1\":32,\"x2\":64,\"y1\":0,\"y2\":32,\"patch_count\":1}\n"
        );
    }

    fn random_stream(seed: u64, n: usize, w: u16, h: u16, dur: Micros) -> EventStream {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        // clustered activity so that some patches actually fire
        let evs = (0..n)
            .map(|_| {
                let x = rng.gen_range(0..w.min(70));
                let y = rng.gen_range(0..h.min(50));
                Event::new(rng.gen_range(0..dur), x, y, if rng.gen() { Polarity::Positive } else { Polarity::Negative })
            })
            .collect();
        EventStream::new(geom(w, h), evs, 0, dur).unwrap()
    }

    #[test]
    fn determinism_and_per_patch_chaining() {
        let s = random_stream(7, 20_000, 128, 96, 200_000);
        let a = detect_regions(&s, 0.5, 10_000).unwrap();
        let b = detect_regions(&s, 0.5, 10_000).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
        let mut last: HashMap<(u32, u32), Micros> = HashMap::new();
        for r in &a {
            for y in (r.rect.y1..r.rect.y2).step_by(32) {
                for x in (r.rect.x1..r.rect.x2).step_by(32) {
                    let prev = last.insert((x, y), r.t2).unwrap_or(0);
                    assert_eq!(prev, r.t1, "patch ({x},{y}) interval must chain");
                }
            }
        }
    }

    #[test]
    fn batch_regions_are_disjoint() {
        let s = random_stream(11, 30_000, 128, 96, 100_000);
        let regions = detect_regions(&s, 0.3, 10_000).unwrap();
        for (i, a) in regions.iter().enumerate() {
            for b in &regions[i + 1..] {
                if a.t2 == b.t2 {
                    assert!(!a.rect.intersects(&b.rect));
                }
            }
        }
    }

    #[test]
    fn trailing_silence_adds_no_regions() {
        let s = random_stream(3, 10_000, 96, 64, 100_000);
        let base = detect_regions(&s, 0.5, 10_000).unwrap();
        let longer = detect_regions(&s.with_end(s.t_end() + 5_000_000).unwrap(), 0.5, 10_000).unwrap();
        assert_eq!(base, longer);
    }

    #[test]
    fn pair_halves_partition_window() {
        let s = random_stream(5, 5_000, 64, 64, 100_000);
        let rect = Rect::new(0, 64, 0, 64);
        let (a, b) = split_pair(s.events(), s.geometry(), rect, 1_000, 90_001, 5).unwrap();
        let brute: i64 = s
            .events()
            .iter()
            .filter(|e| e.t >= 1_000 && e.t < 90_001)
            .map(|e| e.p.sign() as i64)
            .sum();
        assert_eq!(a.tensor.total() + b.tensor.total(), brute as f64);
    }

    proptest! {
        #[test]
        fn merge_is_exact_partition(mask in prop::collection::vec(any::<bool>(), 256)) {
            let set: Vec<PatchCoord> = mask.iter().enumerate().filter(|(_, &m)| m)
                .map(|(i, _)| PatchCoord::new(i as u32 % 16, i as u32 / 16)).collect();
            let rects = merge_patches(&set);
            let members: HashSet<_> = set.iter().copied().collect();
            for r in 0..16 {
                for c in 0..16 {
                    let p = PatchCoord::new(c, r);
                    let covering = rects.iter().filter(|rc| rc.contains(p)).count();
                    prop_assert_eq!(covering, usize::from(members.contains(&p)));
                }
            }
        }

        #[test]
        fn raising_theta_never_adds_triggers(
            counts in prop::collection::vec(0usize..1200, 4),
            lo in 0.05f64..1.0, bump in 0.0f64..1.0,
        ) {
            let evs: Vec<Event> = counts.iter().enumerate()
                .flat_map(|(i, &n)| burst(n, (i as u16 % 2) * 32, (i as u16 / 2) * 32, 1)).collect();
            let run = |theta| {
                let mut a = PatchActivity::new(geom(64, 64), theta, 0).unwrap();
                a.ingest_batch(&evs, 10).unwrap().into_iter().map(|p| p.coord).collect::<HashSet<_>>()
            };
            let low = run(lo);
            let high = run(lo + bump);
            prop_assert!(high.is_subset(&low));
        }
    }
}
