//! Event-camera reconstruction with two tokenization paths.
//!
//! The frame path bins a recording into voxel grids at a fixed rate,
//! reconstructs full frames and tokenizes every 32x32 patch of every merged
//! frame pair. The adaptive path watches per-patch event counts, reconstructs
//! only rectangles whose activity crosses a threshold and tokenizes those.

pub mod config;
pub mod events;
pub mod pgm;
pub mod pipeline;
pub mod recon;
pub mod tokenizer;
pub mod trigger;
pub mod viz;
pub mod voxel;

pub use events::{Event, EventStream, Micros, Polarity, SensorGeometry, StreamFormat, PATCH_PIXELS, PATCH_SIZE};
pub use voxel::{FrameClock, Rect};
