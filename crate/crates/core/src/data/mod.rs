//! Panels of hourly station load and weather: ingestion, gap filling,
//! normalization, patching, chronological splits and synthetic generation.

pub mod ingest;
mod interp;
mod norm;
mod panel;
mod patch;
mod split;
pub mod synth;

pub use ingest::{ingest, ingest_load_csv, ingest_weather_csv, IngestReport};
pub use interp::interpolate_missing;
pub use norm::{instance_normalize, mean_std, normalize_series, NormStats, STD_FLOOR};
pub use panel::{Station, TimeSeriesPanel, WEATHER_VARIABLES, WEATHER_VARS};
pub use patch::{patch_count, segment_channel, segment_patches, PatchSet};
pub use split::{chronological_split, window_starts, SplitBounds, SplitSpec};
pub use synth::{synth_generate, SynthConfig};
