//! Hourly OHLC series: ingestion, chronological splitting, direction labels,
//! per-split statistics and a seeded synthetic generator.

mod bar;
mod io;
mod label;
mod split;
mod stats;
mod synth;

pub use bar::{OhlcBar, OhlcSeries, TIMESTAMP_FORMAT};
pub use bar::ts_format as ts_serde;
pub use io::{ingest, read_csv, write_csv, InputFormat};
pub use label::{label, LabelScheme, LabeledSample};
pub use split::{split, SplitSpec, Splits};
pub use stats::{statistics, DatasetStatistics};
pub use synth::{generate_synthetic, SyntheticConfig};
