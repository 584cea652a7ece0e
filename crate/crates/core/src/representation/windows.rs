use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::{LabeledSample, OhlcSeries};

/// Input layout of a model. Every window ends at its anchor bar (inclusive).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    /// 24 hourly feature vectors.
    Numeric24,
    /// 48 hourly feature vectors.
    Numeric48,
    /// Five 20-hour charts, each shifted one hour later than the previous.
    Image5x20,
    /// 24 hourly text records.
    Text24,
}

impl WindowKind {
    pub const IMAGE_HOURS: usize = 20;
    pub const IMAGE_COUNT: usize = 5;

    /// Number of items in the sequence handed to the forecaster.
    pub fn sequence_len(self) -> usize {
        match self {
            WindowKind::Numeric24 | WindowKind::Text24 => 24,
            WindowKind::Numeric48 => 48,
            WindowKind::Image5x20 => Self::IMAGE_COUNT,
        }
    }

    /// Bars of history (including the anchor) the window needs.
    pub fn history(self) -> usize {
        match self {
            WindowKind::Image5x20 => Self::IMAGE_HOURS + Self::IMAGE_COUNT - 1,
            other => other.sequence_len(),
        }
    }

    /// Bar ranges making up each sequence item for an anchor at `anchor`.
    /// For numeric and text kinds every item is a single bar.
    pub fn item_spans(self, anchor: usize) -> Option<Vec<Range<usize>>> {
        let start = (anchor + 1).checked_sub(self.history())?;
        Some(match self {
            WindowKind::Image5x20 => (0..Self::IMAGE_COUNT)
                .map(|k| start + k..start + k + Self::IMAGE_HOURS)
                .collect(),
            _ => (start..=anchor).map(|i| i..i + 1).collect(),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            WindowKind::Numeric24 => "numeric24",
            WindowKind::Numeric48 => "numeric48",
            WindowKind::Image5x20 => "image5x20",
            WindowKind::Text24 => "text24",
        }
    }
}

impl fmt::Display for WindowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WindowKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "numeric24" => Ok(WindowKind::Numeric24),
            "numeric48" => Ok(WindowKind::Numeric48),
            "image5x20" => Ok(WindowKind::Image5x20),
            "text24" => Ok(WindowKind::Text24),
            other => Err(Error::Config(format!("unknown window kind `{other}`"))),
        }
    }
}

/// A labeled model input expressed as bar ranges into the source series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWindow {
    pub kind: WindowKind,
    pub anchor_index: usize,
    #[serde(with = "crate::market_data::ts_serde")]
    pub anchor_ts: NaiveDateTime,
    pub label: u8,
    pub delta: f64,
    pub spans: Vec<Range<usize>>,
}

impl ModelWindow {
    /// Position of the last bar covered by the window.
    pub fn last_bar(&self) -> usize {
        self.spans.last().map(|r| r.end - 1).unwrap_or(self.anchor_index)
    }

    pub fn first_bar(&self) -> usize {
        self.spans.first().map(|r| r.start).unwrap_or(self.anchor_index)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WindowSet {
    pub windows: Vec<ModelWindow>,
    /// Anchor positions dropped for lack of history.
    pub dropped: Vec<usize>,
}

pub fn make_windows(series: &OhlcSeries, anchors: &[LabeledSample], kind: WindowKind) -> WindowSet {
    let mut set = WindowSet::default();
    for a in anchors {
        match kind.item_spans(a.anchor_index) {
            Some(spans) if a.anchor_index < series.len() => set.windows.push(ModelWindow {
                kind,
                anchor_index: a.anchor_index,
                anchor_ts: a.anchor_ts,
                label: a.label,
                delta: a.delta,
                spans,
            }),
            _ => set.dropped.push(a.anchor_index),
        }
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::{generate_synthetic, label, LabelScheme, SyntheticConfig};

    fn setup() -> (OhlcSeries, Vec<LabeledSample>) {
        let s = generate_synthetic(&SyntheticConfig {
            seed: 3,
            n_bars: 30,
            volatility: 10.0,
        });
        let l = label(&s, LabelScheme::Standard);
        (s, l)
    }

    #[test]
    fn numeric24_boundary() {
        let (s, l) = setup();
        let set = make_windows(&s, &l[23..24], WindowKind::Numeric24);
        assert_eq!(set.windows[0].first_bar(), 0);
        assert_eq!(set.windows[0].last_bar(), 23);
        assert_eq!(set.windows[0].spans.len(), 24);
    }

    #[test]
    fn image_windows_shift_by_one_hour() {
        let (s, l) = setup();
        let set = make_windows(&s, &l[23..24], WindowKind::Image5x20);
        let expected: Vec<Range<usize>> = vec![0..20, 1..21, 2..22, 3..23, 4..24];
        assert_eq!(set.windows[0].spans, expected);
    }

    #[test]
    fn short_history_dropped() {
        let (s, l) = setup();
        let set = make_windows(&s, &l[5..6], WindowKind::Numeric24);
        assert!(set.windows.is_empty());
        assert_eq!(set.dropped, vec![5]);
        let all = make_windows(&s, &l, WindowKind::Numeric48);
        assert!(all.windows.is_empty());
        assert_eq!(all.dropped.len(), l.len());
    }

    #[test]
    fn window_ends_at_label_anchor() {
        let (s, l) = setup();
        for kind in [WindowKind::Numeric24, WindowKind::Image5x20, WindowKind::Text24] {
            for w in make_windows(&s, &l, kind).windows {
                assert_eq!(w.last_bar(), w.anchor_index);
                assert_eq!(w.spans.len(), kind.sequence_len());
            }
        }
    }
}
