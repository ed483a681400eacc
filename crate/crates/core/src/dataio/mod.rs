//! Tracking data: CSV ingestion, windowing, augmentation, manifests and a
//! synthetic play generator.

mod manifest;
mod synth;
mod tracking;
mod window;

pub use manifest::{split_by_match, write_dataset, Manifest, ManifestEntry, Split, SPLIT_RATIOS};
pub use synth::{synth_plays, SynthParams};
pub use tracking::{load_tracking, read_tracking, write_tracking, AgentInfo, Team, TrackedExample, AGENTS};
pub use window::{attacking_team, augment_flip, make_windows, window_starts, PredictionWindow};

/// A 2D position in pitch-centred metres.
pub type Point = [f64; 2];
