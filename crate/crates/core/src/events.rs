//! Event records, stream containers, on-disk formats and a contrast-threshold
//! simulator that turns grayscale frame sequences into events.

use std::fmt::Write as _;

use thiserror::Error;

use crate::pgm::GrayImage;

/// Timestamps are integer microseconds.
pub type Micros = u64;

pub const PATCH_SIZE: u32 = 32;
pub const PATCH_PIXELS: u32 = PATCH_SIZE * PATCH_SIZE;

const BINARY_MAGIC: &[u8; 4] = b"EVS1";
const BINARY_HEADER_LEN: usize = 16;
const BINARY_RECORD_LEN: usize = 13;

/// Offset added before taking the log of an intensity in the simulator.
pub const LOG_EPS: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum EventError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("malformed record at {location}: {reason}")]
    MalformedRecord { location: String, reason: String },
    #[error("event ({x}, {y}) outside {width}x{height} sensor")]
    RecordOutOfBounds {
        x: u32,
        y: u32,
        width: u16,
        height: u16,
    },
    #[error("bad polarity value {0}")]
    BadPolarity(i64),
    #[error("event at t={t} outside stream bounds [{t_start}, {t_end}]")]
    OutsideRecording { t: Micros, t_start: Micros, t_end: Micros },
    #[error("invalid interval [{0}, {1})")]
    InvalidInterval(Micros, Micros),
    #[error("stream has zero duration")]
    ZeroDuration,
    #[error("frame {index} is {got:?}, expected {expected:?}")]
    GeometryMismatch {
        index: usize,
        got: (u32, u32),
        expected: (u32, u32),
    },
    #[error("frame timestamps must be strictly increasing")]
    NonIncreasingTimestamps,
    #[error("contrast threshold must be positive, got {0}")]
    NonPositiveThreshold(f64),
    #[error("simulator needs at least two frames with one timestamp each")]
    TooFewFrames,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn sign(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Polarity::Positive => Polarity::Negative,
            Polarity::Negative => Polarity::Positive,
        }
    }

    /// Accepts both the `{0, 1}` and the `{-1, +1}` encodings.
    pub fn from_code(code: i64) -> Result<Self, EventError> {
        match code {
            1 => Ok(Polarity::Positive),
            0 | -1 => Ok(Polarity::Negative),
            other => Err(EventError::BadPolarity(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub t: Micros,
    pub x: u16,
    pub y: u16,
    pub p: Polarity,
}

impl Event {
    pub fn new(t: Micros, x: u16, y: u16, p: Polarity) -> Self {
        Self { t, x, y, p }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct SensorGeometry {
    pub width: u16,
    pub height: u16,
}

impl SensorGeometry {
    pub fn new(width: u16, height: u16) -> Result<Self, EventError> {
        if width == 0 || height == 0 {
            return Err(EventError::MalformedHeader(format!(
                "sensor geometry {width}x{height} must be non-empty"
            )));
        }
        Ok(Self { width, height })
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x < self.width as u32 && y < self.height as u32
    }

    /// Number of 32-pixel patch columns, padding a partial column up.
    pub fn patch_cols(&self) -> u32 {
        (self.width as u32).div_ceil(PATCH_SIZE)
    }

    pub fn patch_rows(&self) -> u32 {
        (self.height as u32).div_ceil(PATCH_SIZE)
    }

    pub fn padded_width(&self) -> u32 {
        self.patch_cols() * PATCH_SIZE
    }

    pub fn padded_height(&self) -> u32 {
        self.patch_rows() * PATCH_SIZE
    }

    pub fn patch_count(&self) -> u32 {
        self.patch_cols() * self.patch_rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamFormat {
    Binary,
    Csv,
}

impl StreamFormat {
    /// `.csv` files are CSV, everything else is the binary format.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => StreamFormat::Csv,
            _ => StreamFormat::Binary,
        }
    }
}

/// A time-sorted, geometry-checked event recording. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    geometry: SensorGeometry,
    events: Vec<Event>,
    t_start: Micros,
    t_end: Micros,
}

impl EventStream {
    /// Validates coordinates and bounds, then stably sorts by timestamp.
    pub fn new(
        geometry: SensorGeometry,
        mut events: Vec<Event>,
        t_start: Micros,
        t_end: Micros,
    ) -> Result<Self, EventError> {
        if t_start > t_end {
            return Err(EventError::InvalidInterval(t_start, t_end));
        }
        for e in &events {
            if !geometry.contains(e.x as u32, e.y as u32) {
                return Err(EventError::RecordOutOfBounds {
                    x: e.x as u32,
                    y: e.y as u32,
                    width: geometry.width,
                    height: geometry.height,
                });
            }
            if e.t < t_start || e.t > t_end {
                return Err(EventError::OutsideRecording {
                    t: e.t,
                    t_start,
                    t_end,
                });
            }
        }
        events.sort_by_key(|e| e.t);
        Ok(Self {
            geometry,
            events,
            t_start,
            t_end,
        })
    }

    /// Stream starting at 0 and ending at the last event timestamp (0 when empty).
    pub fn from_events(geometry: SensorGeometry, events: Vec<Event>) -> Result<Self, EventError> {
        let t_end = events.iter().map(|e| e.t).max().unwrap_or(0);
        Self::new(geometry, events, 0, t_end)
    }

    pub fn empty(geometry: SensorGeometry, t_start: Micros, t_end: Micros) -> Result<Self, EventError> {
        Self::new(geometry, Vec::new(), t_start, t_end)
    }

    pub fn geometry(&self) -> SensorGeometry {
        self.geometry
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn t_start(&self) -> Micros {
        self.t_start
    }

    pub fn t_end(&self) -> Micros {
        self.t_end
    }

    pub fn duration(&self) -> Micros {
        self.t_end - self.t_start
    }

    /// Same events, with the recording end moved later (never earlier than the last event).
    pub fn with_end(&self, t_end: Micros) -> Result<Self, EventError> {
        Self::new(self.geometry, self.events.clone(), self.t_start, t_end)
    }

    /// Borrowed view of events with `t0 <= t < t1`.
    pub fn window(&self, t0: Micros, t1: Micros) -> &[Event] {
        let lo = self.events.partition_point(|e| e.t < t0);
        let hi = self.events.partition_point(|e| e.t < t1);
        &self.events[lo..hi.max(lo)]
    }

    /// Sub-stream `[t0, t1)` with `t_start = t0`, `t_end = t1`.
    pub fn slice(&self, t0: Micros, t1: Micros) -> Result<Self, EventError> {
        if t0 > t1 {
            return Err(EventError::InvalidInterval(t0, t1));
        }
        Ok(Self {
            geometry: self.geometry,
            events: self.window(t0, t1).to_vec(),
            t_start: t0,
            t_end: t1,
        })
    }

    /// Events per second per pixel.
    pub fn event_density(&self) -> Result<f64, EventError> {
        if self.t_end == self.t_start {
            return Err(EventError::ZeroDuration);
        }
        let seconds = self.duration() as f64 * 1e-6;
        Ok(self.events.len() as f64 / (seconds * self.geometry.pixel_count() as f64))
    }

    /// Copy with every polarity flipped.
    pub fn negated(&self) -> Self {
        let events = self
            .events
            .iter()
            .map(|e| Event { p: e.p.flipped(), ..*e })
            .collect();
        Self { events, ..self.clone() }
    }
}

pub fn parse_events(bytes: &[u8], format: StreamFormat) -> Result<EventStream, EventError> {
    match format {
        StreamFormat::Binary => parse_binary(bytes),
        StreamFormat::Csv => parse_csv(bytes),
    }
}

pub fn write_events(stream: &EventStream, format: StreamFormat) -> Vec<u8> {
    match format {
        StreamFormat::Binary => write_binary(stream),
        StreamFormat::Csv => write_csv(stream).into_bytes(),
    }
}

fn parse_binary(bytes: &[u8]) -> Result<EventStream, EventError> {
    if bytes.len() < BINARY_HEADER_LEN {
        return Err(EventError::MalformedHeader(format!(
            "{} bytes is shorter than the {BINARY_HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[..4] != BINARY_MAGIC {
        return Err(EventError::MalformedHeader("bad magic".into()));
    }
    let width = u16::from_le_bytes([bytes[4], bytes[5]]);
    let height = u16::from_le_bytes([bytes[6], bytes[7]]);
    let geometry = SensorGeometry::new(width, height)?;
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let body = &bytes[BINARY_HEADER_LEN..];
    let expected = (count as u128) * BINARY_RECORD_LEN as u128;
    if body.len() as u128 != expected {
        return Err(EventError::MalformedHeader(format!(
            "header declares {count} records but body holds {} bytes",
            body.len()
        )));
    }
    let mut events = Vec::with_capacity(count as usize);
    for rec in body.chunks_exact(BINARY_RECORD_LEN) {
        let t = u64::from_le_bytes(rec[0..8].try_into().unwrap());
        let x = u16::from_le_bytes([rec[8], rec[9]]);
        let y = u16::from_le_bytes([rec[10], rec[11]]);
        let p = Polarity::from_code(rec[12] as i8 as i64)?;
        if !geometry.contains(x as u32, y as u32) {
            return Err(EventError::RecordOutOfBounds {
                x: x as u32,
                y: y as u32,
                width,
                height,
            });
        }
        events.push(Event { t, x, y, p });
    }
    EventStream::from_events(geometry, events)
}

fn write_binary(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(BINARY_HEADER_LEN + stream.len() * BINARY_RECORD_LEN);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&stream.geometry.width.to_le_bytes());
    out.extend_from_slice(&stream.geometry.height.to_le_bytes());
    out.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    for e in &stream.events {
        out.extend_from_slice(&e.t.to_le_bytes());
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.push(e.p.sign() as u8);
    }
    out
}

fn parse_csv(bytes: &[u8]) -> Result<EventStream, EventError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| EventError::MalformedHeader(format!("not UTF-8: {e}")))?;
    let mut lines = text.lines().enumerate();
    let header = lines
        .next()
        .map(|(_, l)| l)
        .ok_or_else(|| EventError::MalformedHeader("missing `# width,height` line".into()))?;
    let dims = header
        .trim()
        .strip_prefix('#')
        .ok_or_else(|| EventError::MalformedHeader(format!("expected `# width,height`, got {header:?}")))?;
    let (w, h) = dims
        .split_once(',')
        .ok_or_else(|| EventError::MalformedHeader(format!("expected `# width,height`, got {header:?}")))?;
    let parse_dim = |s: &str| {
        s.trim()
            .parse::<u16>()
            .map_err(|e| EventError::MalformedHeader(format!("bad dimension {s:?}: {e}")))
    };
    let geometry = SensorGeometry::new(parse_dim(w)?, parse_dim(h)?)?;

    let mut events = Vec::new();
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |reason: String| EventError::MalformedRecord {
            location: format!("line {}", idx + 1),
            reason,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields, got {}", fields.len())));
        }
        let t = fields[0].parse::<u64>().map_err(|e| bad(format!("t: {e}")))?;
        let x = fields[1].parse::<u32>().map_err(|e| bad(format!("x: {e}")))?;
        let y = fields[2].parse::<u32>().map_err(|e| bad(format!("y: {e}")))?;
        let p = fields[3].parse::<i64>().map_err(|e| bad(format!("p: {e}")))?;
        let p = Polarity::from_code(p)?;
        if !geometry.contains(x, y) {
            return Err(EventError::RecordOutOfBounds {
                x,
                y,
                width: geometry.width,
                height: geometry.height,
            });
        }
        events.push(Event {
            t,
            x: x as u16,
            y: y as u16,
            p,
        });
    }
    EventStream::from_events(geometry, events)
}

fn write_csv(stream: &EventStream) -> String {
    let mut out = String::with_capacity(16 + stream.len() * 16);
    let _ = writeln!(out, "# {},{}", stream.geometry.width, stream.geometry.height);
    for e in &stream.events {
        let _ = writeln!(out, "{},{},{},{}", e.t, e.x, e.y, e.p.sign());
    }
    out
}

/// Contrast-threshold event simulation over a grayscale frame sequence.
///
/// Each pixel keeps a reference log intensity. Between two frames a pixel
/// emits one event per full threshold crossing in log space; the sub-threshold
/// remainder stays in the reference and carries into the next frame pair.
/// Event times are linearly interpolated between the two frame timestamps.
pub fn simulate_events(
    frames: &[GrayImage],
    timestamps: &[Micros],
    contrast_threshold: f64,
) -> Result<EventStream, EventError> {
    if frames.len() < 2 || timestamps.len() != frames.len() {
        return Err(EventError::TooFewFrames);
    }
    if !(contrast_threshold > 0.0) {
        return Err(EventError::NonPositiveThreshold(contrast_threshold));
    }
    if timestamps.windows(2).any(|w| w[1] <= w[0]) {
        return Err(EventError::NonIncreasingTimestamps);
    }
    let (w, h) = (frames[0].width(), frames[0].height());
    for (index, f) in frames.iter().enumerate() {
        if (f.width(), f.height()) != (w, h) {
            return Err(EventError::GeometryMismatch {
                index,
                got: (f.width(), f.height()),
                expected: (w, h),
            });
        }
    }
    let geometry = SensorGeometry::new(
        u16::try_from(w).map_err(|_| EventError::MalformedHeader(format!("width {w} exceeds u16")))?,
        u16::try_from(h).map_err(|_| EventError::MalformedHeader(format!("height {h} exceeds u16")))?,
    )?;

    let log_of = |v: f32| (v as f64 + LOG_EPS).ln();
    let mut reference: Vec<f64> = frames[0].pixels().iter().map(|&v| log_of(v)).collect();
    let mut events = Vec::new();

    for (pair, frame) in frames.iter().enumerate().skip(1) {
        let t0 = timestamps[pair - 1];
        let dt = (timestamps[pair] - t0) as f64;
        for (idx, &v) in frame.pixels().iter().enumerate() {
            let target = log_of(v);
            let delta = target - reference[idx];
            let crossings = (delta.abs() / contrast_threshold).floor() as u64;
            if crossings == 0 {
                continue;
            }
            let (p, sign) = if delta > 0.0 {
                (Polarity::Positive, 1.0)
            } else {
                (Polarity::Negative, -1.0)
            };
            let x = (idx % w as usize) as u16;
            let y = (idx / w as usize) as u16;
            for k in 1..=crossings {
                let frac = ((k as f64 * contrast_threshold) / delta.abs()).min(1.0);
                events.push(Event {
                    t: t0 + (frac * dt).floor() as u64,
                    x,
                    y,
                    p,
                });
            }
            reference[idx] += sign * crossings as f64 * contrast_threshold;
        }
    }
    EventStream::new(geometry, events, timestamps[0], *timestamps.last().unwrap())
}
