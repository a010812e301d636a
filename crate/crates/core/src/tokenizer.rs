//! Visual-token streams for a downstream multimodal model, with exact
//! record-level token accounting.
//!
//! Layout is always: `n_text` TEXT records, then repeated groups of
//! `n_time` TIMESTAMP records each followed by the VISUAL records they stamp.
//! Frame-based streams stamp each merged frame pair; adaptive streams stamp
//! every block of `tpf` visual tokens (a pseudo-frame).

use serde::Serialize;
use thiserror::Error;

use crate::events::{Micros, SensorGeometry, PATCH_SIZE};
use crate::recon::PatchFrame;

pub const DEFAULT_TPF: usize = 512;
pub const DEFAULT_N_TIME: usize = 7;
pub const SOURCE_FPS: f64 = 24.0;

#[derive(Debug, Error, PartialEq)]
pub enum TokenizerError {
    #[error("target rate {target} exceeds source rate {from}")]
    UpsampleRequested { from: f64, target: f64 },
    #[error("frame rates must be positive")]
    InvalidRate,
    #[error("no frames to tokenize")]
    EmptyInput,
    #[error("patch frame {index} breaks the (0, 1) pairing sequence")]
    UnpairedPatch { index: usize },
    #[error("tokens-per-frame must be positive")]
    InvalidTpf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenKind {
    Text,
    Timestamp,
    Visual,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenRecord {
    pub kind: TokenKind,
    /// Absolute patch-grid position (VISUAL only).
    pub patch: Option<(u32, u32)>,
    pub t: Micros,
    pub pseudo_frame: Option<usize>,
    /// Source timestamps of the merged temporal pair (VISUAL only).
    pub pair: Option<(Micros, Micros)>,
    /// Rendered timestamp (TIMESTAMP only).
    pub timestamp_text: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TokenCounts {
    pub n_text: usize,
    pub n_time_total: usize,
    pub n_visual: usize,
    pub n_total: usize,
}

impl TokenCounts {
    pub fn of(records: &[TokenRecord]) -> Self {
        let mut c = TokenCounts::default();
        for r in records {
            match r.kind {
                TokenKind::Text => c.n_text += 1,
                TokenKind::Timestamp => c.n_time_total += 1,
                TokenKind::Visual => c.n_visual += 1,
            }
        }
        c.n_total = c.n_text + c.n_time_total + c.n_visual;
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenStream {
    pub records: Vec<TokenRecord>,
    pub counts: TokenCounts,
    /// Set when an odd trailing frame was dropped.
    pub dropped_trailing_frame: bool,
}

impl TokenStream {
    fn from_records(records: Vec<TokenRecord>, dropped_trailing_frame: bool) -> Self {
        let counts = TokenCounts::of(&records);
        Self {
            records,
            counts,
            dropped_trailing_frame,
        }
    }
}

/// `t=SS.mmm`, seconds relative to `origin`, truncated to milliseconds.
pub fn render_timestamp(t: Micros, origin: Micros) -> String {
    let ms = t.saturating_sub(origin) / 1000;
    format!("t={:02}.{:03}", ms / 1000, ms % 1000)
}

/// Indices kept when resampling `n` uniformly spaced frames from `source_fps`
/// down to `target_fps`: `round(k * source / target)` for `k = 0, 1, ...`.
pub fn subsample_fps(n: usize, source_fps: f64, target_fps: f64) -> Result<Vec<usize>, TokenizerError> {
    if !(source_fps > 0.0 && target_fps > 0.0) {
        return Err(TokenizerError::InvalidRate);
    }
    if target_fps > source_fps {
        return Err(TokenizerError::UpsampleRequested {
            from: source_fps,
            target: target_fps,
        });
    }
    let stride = source_fps / target_fps;
    let count = (n as f64 * target_fps / source_fps - 1e-9).ceil().max(0.0) as usize;
    Ok((0..count)
        .map(|k| ((k as f64 * stride).round() as usize).min(n - 1))
        .collect())
}

fn text_records(n_text: usize, origin: Micros) -> impl Iterator<Item = TokenRecord> {
    (0..n_text).map(move |_| TokenRecord {
        kind: TokenKind::Text,
        patch: None,
        t: origin,
        pseudo_frame: None,
        pair: None,
        timestamp_text: None,
    })
}

fn timestamp_records(n_time: usize, t: Micros, origin: Micros, frame: usize) -> impl Iterator<Item = TokenRecord> {
    let text = render_timestamp(t, origin);
    (0..n_time).map(move |_| TokenRecord {
        kind: TokenKind::Timestamp,
        patch: None,
        t,
        pseudo_frame: Some(frame),
        pair: None,
        timestamp_text: Some(text.clone()),
    })
}

/// Frame-based tokenization: consecutive frames are merged in pairs and each
/// merged frame becomes `ceil(H/32) * ceil(W/32)` row-major visual tokens.
/// `frame_times` are the reconstruction timestamps; an odd trailing frame is dropped.
pub fn tokenize_frt(
    frame_times: &[Micros],
    origin: Micros,
    geometry: SensorGeometry,
    n_text: usize,
    n_time: usize,
) -> Result<TokenStream, TokenizerError> {
    if frame_times.is_empty() {
        return Err(TokenizerError::EmptyInput);
    }
    let dropped = frame_times.len() % 2 == 1;
    let (cols, rows) = (geometry.patch_cols(), geometry.patch_rows());
    let mut records: Vec<TokenRecord> = text_records(n_text, origin).collect();
    for (merged, pair) in frame_times.chunks_exact(2).enumerate() {
        let (ta, tb) = (pair[0], pair[1]);
        records.extend(timestamp_records(n_time, ta, origin, merged));
        for row in 0..rows {
            for col in 0..cols {
                records.push(TokenRecord {
                    kind: TokenKind::Visual,
                    patch: Some((col, row)),
                    t: ta,
                    pseudo_frame: Some(merged),
                    pair: Some((ta, tb)),
                    timestamp_text: None,
                });
            }
        }
    }
    Ok(TokenStream::from_records(records, dropped))
}

/// Adaptive tokenization over reconstructed patch pairs.
///
/// `frames` must alternate pair index 0 and 1 with both halves on the same
/// rect. Each pair yields one visual token per 32x32 patch of its rect,
/// stamped with the pair's trigger time (the second frame's time). Tokens are
/// ordered by trigger time, then by the given pair order, then row-major
/// within the rect, and grouped into pseudo-frames of `tpf` tokens, each
/// preceded by the timestamp of its first token.
pub fn tokenize_art(
    frames: &[PatchFrame],
    origin: Micros,
    tpf: usize,
    n_text: usize,
    n_time: usize,
) -> Result<TokenStream, TokenizerError> {
    if tpf == 0 {
        return Err(TokenizerError::InvalidTpf);
    }
    if frames.len() % 2 == 1 {
        return Err(TokenizerError::UnpairedPatch { index: frames.len() - 1 });
    }
    let mut pairs = Vec::with_capacity(frames.len() / 2);
    for (i, pair) in frames.chunks_exact(2).enumerate() {
        let (a, b) = (&pair[0], &pair[1]);
        if a.pair_index != 0 {
            return Err(TokenizerError::UnpairedPatch { index: 2 * i });
        }
        if b.pair_index != 1 || b.rect != a.rect || b.t < a.t {
            return Err(TokenizerError::UnpairedPatch { index: 2 * i + 1 });
        }
        pairs.push((a, b));
    }
    pairs.sort_by_key(|(_, b)| b.t);

    let mut visual = Vec::new();
    for (a, b) in pairs {
        let r = a.rect;
        for row in r.y1 / PATCH_SIZE..r.y2 / PATCH_SIZE {
            for col in r.x1 / PATCH_SIZE..r.x2 / PATCH_SIZE {
                visual.push(TokenRecord {
                    kind: TokenKind::Visual,
                    patch: Some((col, row)),
                    t: b.t,
                    pseudo_frame: None,
                    pair: Some((a.t, b.t)),
                    timestamp_text: None,
                });
            }
        }
    }

    let mut records: Vec<TokenRecord> = text_records(n_text, origin).collect();
    for (block, chunk) in visual.chunks(tpf).enumerate() {
        records.extend(timestamp_records(n_time, chunk[0].t, origin, block));
        records.extend(chunk.iter().cloned().map(|mut r| {
            r.pseudo_frame = Some(block);
            r
        }));
    }
    Ok(TokenStream::from_records(records, false))
}

/// Closed-form frame-based count: `n_text + (T/2) * (H/32 * W/32 + n_time)`.
pub fn estimate_tokens_frt(frames: u64, height: u32, width: u32, n_text: u64, n_time: u64) -> f64 {
    n_text as f64
        + frames as f64 / 2.0 * ((height as f64 / 32.0) * (width as f64 / 32.0) + n_time as f64)
}

/// Closed-form adaptive count: `n_text + (P/2) * (1 + n_time / tpf)`.
pub fn estimate_tokens_art(patches: u64, tpf: u64, n_text: u64, n_time: u64) -> f64 {
    n_text as f64 + patches as f64 / 2.0 * (1.0 + n_time as f64 / tpf as f64)
}

/// Record-level frame-based count for `frames` reconstructed frames,
/// identical to what [`tokenize_frt`] emits.
pub fn count_tokens_frt(frames: u64, geometry: SensorGeometry, n_text: u64, n_time: u64) -> u64 {
    n_text + (frames / 2) * (geometry.patch_count() as u64 + n_time)
}

/// Record-level adaptive count for `n_visual` visual tokens, identical to
/// what [`tokenize_art`] emits.
pub fn count_tokens_art(n_visual: u64, tpf: u64, n_text: u64, n_time: u64) -> u64 {
    n_text + n_visual + n_time * n_visual.div_ceil(tpf)
}

#[derive(Serialize)]
struct TokenLine<'a> {
    kind: TokenKind,
    patch_x: Option<u32>,
    patch_y: Option<u32>,
    t_us: Micros,
    pseudo_frame: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    timestamp_text: Option<&'a str>,
}

#[derive(Serialize)]
struct HeaderLine<'a> {
    counts: &'a TokenCounts,
}

/// JSON-lines token export: a `{"counts": ...}` header, then one line per record.
pub fn tokens_jsonl(stream: &TokenStream) -> String {
    let mut out = serde_json::to_string(&HeaderLine { counts: &stream.counts }).expect("plain struct");
    out.push('\n');
    for r in &stream.records {
        let line = TokenLine {
            kind: r.kind,
            patch_x: r.patch.map(|p| p.0),
            patch_y: r.patch.map(|p| p.1),
            t_us: r.t,
            pseudo_frame: r.pseudo_frame,
            timestamp_text: r.timestamp_text.as_deref(),
        };
        out.push_str(&serde_json::to_string(&line).expect("plain struct"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pgm::GrayImage;
    use crate::voxel::Rect;
    use proptest::prelude::*;

    fn geom(w: u16, h: u16) -> SensorGeometry {
        SensorGeometry::new(w, h).unwrap()
    }

    fn pair(rect: Rect, ta: Micros, tb: Micros) -> [PatchFrame; 2] {
        let img = GrayImage::filled(rect.width(), rect.height(), 0.5);
        [
            PatchFrame { rect, pixels: img.clone(), t: ta, pair_index: 0 },
            PatchFrame { rect, pixels: img, t: tb, pair_index: 1 },
        ]
    }

    #[test]
    fn subsample_examples() {
        assert_eq!(subsample_fps(24, 24.0, 24.0).unwrap(), (0..24).collect::<Vec<_>>());
        assert_eq!(subsample_fps(24, 24.0, 1.0).unwrap(), vec![0]);
        let picked = subsample_fps(48, 24.0, 8.0).unwrap();
        assert_eq!(picked, (0..16).map(|k| 3 * k).collect::<Vec<_>>());
        assert_eq!(subsample_fps(5, 24.0, 10.0).unwrap().len(), 3);
        assert!(matches!(subsample_fps(10, 24.0, 30.0), Err(TokenizerError::UpsampleRequested { .. })));
    }

    #[test]
    fn frt_counts_match_formula() {
        let s = tokenize_frt(&[0, 1, 2, 3], 0, geom(64, 64), 100, 7).unwrap();
        assert_eq!(s.counts.n_total, 122);
        assert_eq!(estimate_tokens_frt(4, 64, 64, 100, 7), 122.0);
        let minimal = tokenize_frt(&[0, 1], 0, geom(32, 32), 0, 0).unwrap();
        assert_eq!(minimal.counts.n_visual, 1);
        assert_eq!(estimate_tokens_frt(48, 64, 64, 100, 7), 364.0);
    }

    #[test]
    fn frt_layout_and_odd_drop() {
        let s = tokenize_frt(&[10, 20, 30], 0, geom(64, 32), 2, 1).unwrap();
        assert!(s.dropped_trailing_frame);
        let kinds: Vec<_> = s.records.iter().map(|r| r.kind).collect();
        use TokenKind::*;
        assert_eq!(kinds, vec![Text, Text, Timestamp, Visual, Visual]);
        assert_eq!(s.records[3].patch, Some((0, 0)));
        assert_eq!(s.records[4].patch, Some((1, 0)));
        assert_eq!(s.records[4].pair, Some((10, 20)));
        assert_eq!(tokenize_frt(&[], 0, geom(32, 32), 1, 1), Err(TokenizerError::EmptyInput));
    }

    #[test]
    fn frt_pads_non_divisible_sensor() {
        let s = tokenize_frt(&[0, 1], 0, geom(240, 180), 0, 0).unwrap();
        assert_eq!(s.counts.n_visual, 8 * 6);
    }

    #[test]
    fn art_divisible_case_matches_formula() {
        let frames: Vec<PatchFrame> = (0..1024u64)
            .flat_map(|i| {
                let c = (i % 8) as u32;
                pair(Rect::new(c * 32, c * 32 + 32, 0, 32), i * 10 + 5, i * 10 + 10)
            })
            .collect();
        let s = tokenize_art(&frames, 0, 512, 100, 7).unwrap();
        assert_eq!(s.counts.n_total, 1138);
        assert_eq!(estimate_tokens_art(2048, 512, 100, 7), 1138.0);
        assert!((estimate_tokens_art(8, 512, 100, 7) - 104.0547).abs() < 1e-4);
    }

    #[test]
    fn art_empty_is_text_only() {
        let s = tokenize_art(&[], 0, 512, 100, 7).unwrap();
        assert_eq!(s.counts.n_total, 100);
    }

    #[test]
    fn art_rejects_broken_pairs() {
        let [a, b] = pair(Rect::new(0, 32, 0, 32), 1, 2);
        assert_eq!(
            tokenize_art(&[a.clone()], 0, 512, 0, 7),
            Err(TokenizerError::UnpairedPatch { index: 0 })
        );
        assert_eq!(
            tokenize_art(&[b.clone(), a.clone()], 0, 512, 0, 7),
            Err(TokenizerError::UnpairedPatch { index: 0 })
        );
        let mut other = b.clone();
        other.rect = Rect::new(32, 64, 0, 32);
        assert_eq!(
            tokenize_art(&[a, other], 0, 512, 0, 7),
            Err(TokenizerError::UnpairedPatch { index: 1 })
        );
    }

    #[test]
    fn art_positions_are_absolute_and_blocks_stamped() {
        let mut frames = pair(Rect::new(32, 96, 64, 96), 1_000, 2_000).to_vec();
        frames.extend(pair(Rect::new(0, 32, 0, 32), 3_000, 4_000));
        let s = tokenize_art(&frames, 0, 2, 0, 1).unwrap();
        let visual: Vec<_> = s.records.iter().filter(|r| r.kind == TokenKind::Visual).map(|r| r.patch.unwrap()).collect();
        assert_eq!(visual, vec![(1, 2), (2, 2), (0, 0)]);
        let stamps: Vec<_> = s.records.iter().filter(|r| r.kind == TokenKind::Timestamp).map(|r| r.t).collect();
        assert_eq!(stamps, vec![2_000, 4_000]);
        assert_eq!(s.counts.n_total, 3 + 2);
    }

    #[test]
    fn timestamp_rendering() {
        assert_eq!(render_timestamp(1_234_567, 0), "t=01.234");
        assert_eq!(render_timestamp(5_000, 5_000), "t=00.000");
        assert_eq!(render_timestamp(125_000_000, 0), "t=125.000");
    }

    #[test]
    fn jsonl_has_header_and_records() {
        let s = tokenize_frt(&[0, 500_000], 0, geom(32, 32), 1, 1).unwrap();
        let text = tokens_jsonl(&s);
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], r#"{"counts":{"n_text":1,"n_time_total":1,"n_visual":1,"n_total":3}}"#);
        assert!(lines[2].contains(r#""timestamp_text":"t=00.000""#));
        assert_eq!(lines[3], r#"{"kind":"visual","patch_x":0,"patch_y":0,"t_us":0,"pseudo_frame":0}"#);
    }

    proptest! {
        #[test]
        fn frt_record_count_matches_closed_form(t in 1usize..40, w in 1u16..300, h in 1u16..300, n_text in 0usize..50, n_time in 0usize..10) {
            let times: Vec<Micros> = (0..t as u64).collect();
            let s = tokenize_frt(&times, 0, geom(w, h), n_text, n_time).unwrap();
            prop_assert_eq!(s.counts, TokenCounts::of(&s.records));
            prop_assert_eq!(s.counts.n_total as u64, count_tokens_frt(t as u64, geom(w, h), n_text as u64, n_time as u64));
        }

        #[test]
        fn art_record_count_and_order(sizes in prop::collection::vec((1u32..4, 1u32..4, 1u64..1000), 0..60), tpf in 1usize..20, n_time in 0usize..9) {
            let mut t = 0;
            let mut frames = Vec::new();
            for (cw, ch, dt) in &sizes {
                t += dt;
                frames.extend(pair(Rect::new(0, cw * 32, 0, ch * 32), t - dt / 2, t));
            }
            let s = tokenize_art(&frames, 0, tpf, 3, n_time).unwrap();
            let n_visual: u64 = sizes.iter().map(|(w, h, _)| (w * h) as u64).sum();
            prop_assert_eq!(s.counts.n_visual as u64, n_visual);
            prop_assert_eq!(s.counts.n_total as u64, count_tokens_art(n_visual, tpf as u64, 3, n_time as u64));
            let estimate = estimate_tokens_art(2 * n_visual, tpf as u64, 3, n_time as u64);
            prop_assert!((s.counts.n_total as f64 - estimate).abs() < n_time.max(1) as f64);
            let times: Vec<_> = s.records.iter().filter(|r| r.kind == TokenKind::Visual).map(|r| r.t).collect();
            prop_assert!(times.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
