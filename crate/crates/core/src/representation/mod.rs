//! Model inputs derived from OHLC windows: z-scored numeric features, text
//! records and rendered line charts.

mod normalize;
mod render;
mod text;
mod windows;

pub use normalize::{fit_normalizer, NormalizationParams, NormalizationSource, FEATURE_NAMES};
pub use render::{render_chart, ChartImage, LineStyle, RenderConfig, Rgb};
pub use text::{parse_text, serialize_text, TextRecord};
pub use windows::{make_windows, ModelWindow, WindowKind, WindowSet};
