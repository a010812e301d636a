//! Event visualization: one RGB image per interval, red for net positive
//! pixels and blue for net negative, with triggered regions outlined in green.

use image::{Rgb, RgbImage};
use serde::Serialize;

use crate::events::{EventStream, Micros};
use crate::trigger::{Region, RegionTraceRecord};
use crate::voxel::{FrameClock, Rect, VoxelError};

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const RED: Rgb<u8> = Rgb([220, 30, 30]);
const BLUE: Rgb<u8> = Rgb([30, 60, 220]);
const GREEN: Rgb<u8> = Rgb([0, 200, 0]);

/// One rendered interval plus the regions drawn onto it.
#[derive(Debug, Clone)]
pub struct VizFrame {
    pub t0: Micros,
    pub t1: Micros,
    pub image: RgbImage,
    pub regions: Vec<RegionTraceRecord>,
}

#[derive(Debug, Serialize)]
struct OverlayLine<'a> {
    frame: usize,
    t0: Micros,
    t1: Micros,
    regions: &'a [RegionTraceRecord],
}

fn outline(img: &mut RgbImage, r: &Rect) {
    let (w, h) = img.dimensions();
    let x2 = r.x2.min(w);
    let y2 = r.y2.min(h);
    if r.x1 >= x2 || r.y1 >= y2 {
        return;
    }
    for x in r.x1..x2 {
        img.put_pixel(x, r.y1, GREEN);
        img.put_pixel(x, y2 - 1, GREEN);
    }
    for y in r.y1..y2 {
        img.put_pixel(r.x1, y, GREEN);
        img.put_pixel(x2 - 1, y, GREEN);
    }
}

/// Renders every interval of `clock`. A region is drawn on the interval that
/// contains its trigger time `t2` (the last interval also takes `t2 == t_end`).
pub fn render(stream: &EventStream, clock: FrameClock, regions: &[Region]) -> Result<Vec<VizFrame>, VoxelError> {
    let g = stream.geometry();
    let (w, h) = (g.width as u32, g.height as u32);
    let intervals = clock.intervals(stream.t_start(), stream.duration())?;
    let last = intervals.len().saturating_sub(1);
    let mut frames = Vec::with_capacity(intervals.len());
    for (i, &(t0, t1)) in intervals.iter().enumerate() {
        let mut net = vec![0i64; (w * h) as usize];
        let upto = if i == last { t1 + 1 } else { t1 };
        for e in stream.window(t0, upto) {
            net[e.y as usize * w as usize + e.x as usize] += e.p.sign() as i64;
        }
        let mut image = RgbImage::from_pixel(w, h, WHITE);
        for (idx, &n) in net.iter().enumerate() {
            let (x, y) = (idx as u32 % w, idx as u32 / w);
            match n.signum() {
                1 => image.put_pixel(x, y, RED),
                -1 => image.put_pixel(x, y, BLUE),
                _ => {}
            }
        }
        let drawn: Vec<RegionTraceRecord> = regions
            .iter()
            .filter(|r| r.t2 >= t0 && (r.t2 < t1 || (i == last && r.t2 == t1)))
            .map(RegionTraceRecord::from)
            .collect();
        for r in &drawn {
            outline(&mut image, &Rect::new(r.x1, r.x2, r.y1, r.y2));
        }
        frames.push(VizFrame {
            t0,
            t1,
            image,
            regions: drawn,
        });
    }
    Ok(frames)
}

/// JSON lines, one per frame, listing the rectangles drawn on it.
pub fn overlay_jsonl(frames: &[VizFrame]) -> String {
    let mut out = String::new();
    for (frame, f) in frames.iter().enumerate() {
        let line = OverlayLine {
            frame,
            t0: f.t0,
            t1: f.t1,
            regions: &f.regions,
        };
        out.push_str(&serde_json::to_string(&line).expect("overlay serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{Event, Polarity, SensorGeometry};

    #[test]
    fn colours_follow_net_polarity() {
        let g = SensorGeometry::new(4, 4).unwrap();
        let evs = vec![
            Event::new(0, 0, 0, Polarity::Positive),
            Event::new(1, 1, 0, Polarity::Negative),
            Event::new(2, 2, 0, Polarity::Positive),
            Event::new(3, 2, 0, Polarity::Negative),
        ];
        let s = EventStream::new(g, evs, 0, 10).unwrap();
        let frames = render(&s, FrameClock::Interval(10), &[]).unwrap();
        assert_eq!(frames.len(), 1);
        let img = &frames[0].image;
        assert_eq!(*img.get_pixel(0, 0), RED);
        assert_eq!(*img.get_pixel(1, 0), BLUE);
        assert_eq!(*img.get_pixel(2, 0), WHITE);
        assert_eq!(*img.get_pixel(3, 3), WHITE);
    }

    #[test]
    fn regions_land_on_interval_holding_trigger_time() {
        let g = SensorGeometry::new(64, 64).unwrap();
        let s = EventStream::empty(g, 0, 100).unwrap();
        let region = Region {
            rect: Rect::new(32, 64, 0, 32),
            t1: 0,
            t2: 60,
            patch_count: 1,
        };
        let frames = render(&s, FrameClock::Interval(50), &[region]).unwrap();
        assert!(frames[0].regions.is_empty());
        assert_eq!(frames[1].regions.len(), 1);
        assert_eq!(*frames[1].image.get_pixel(32, 10), GREEN);
        assert_eq!(*frames[1].image.get_pixel(40, 10), WHITE);
        assert_eq!(overlay_jsonl(&frames).lines().count(), 2);
    }
}
