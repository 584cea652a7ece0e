use std::fmt;
use std::str::FromStr;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use super::bar::OhlcSeries;
use crate::error::{Error, Result};

/// Which close prices a direction label compares. Offsets count positions in
/// the series, not wall-clock hours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase", try_from = "String")]
pub enum LabelScheme {
    /// close[t + 6] vs close[t]
    Standard,
    /// close[t + 7] vs close[t + 1]: one hour of execution delay.
    Delayed,
}

impl LabelScheme {
    pub const ALL: [LabelScheme; 2] = [LabelScheme::Standard, LabelScheme::Delayed];

    pub fn entry_offset(self) -> usize {
        match self {
            LabelScheme::Standard => 0,
            LabelScheme::Delayed => 1,
        }
    }

    pub fn exit_offset(self) -> usize {
        match self {
            LabelScheme::Standard => 6,
            LabelScheme::Delayed => 7,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LabelScheme::Standard => "standard",
            LabelScheme::Delayed => "delayed",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            LabelScheme::Standard => "Standard Label",
            LabelScheme::Delayed => "Delayed Label",
        }
    }
}

impl fmt::Display for LabelScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LabelScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "standard" => Ok(LabelScheme::Standard),
            "delayed" => Ok(LabelScheme::Delayed),
            other => Err(crate::error::unknown_choice("label scheme", other, &["standard", "delayed"])),
        }
    }
}

impl TryFrom<String> for LabelScheme {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// An anchor hour with its direction label. `delta` is the close-price move
/// between the scheme's entry and exit positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub anchor_index: usize,
    #[serde(with = "super::bar::ts_format")]
    pub anchor_ts: NaiveDateTime,
    pub scheme: LabelScheme,
    pub delta: f64,
    /// 1 = long, 0 = short. A zero delta is short.
    pub label: u8,
}

/// Labels every anchor whose exit position is inside the series; anchors
/// near the end are dropped rather than padded.
pub fn label(series: &OhlcSeries, scheme: LabelScheme) -> Vec<LabeledSample> {
    let bars = series.bars();
    let entry = scheme.entry_offset();
    let exit = scheme.exit_offset();
    if bars.len() <= exit {
        return Vec::new();
    }
    (0..bars.len() - exit)
        .map(|t| {
            let delta = bars[t + exit].close - bars[t + entry].close;
            LabeledSample {
                anchor_index: t,
                anchor_ts: bars[t].timestamp,
                scheme,
                delta,
                label: u8::from(delta > 0.0),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::{OhlcBar, TIMESTAMP_FORMAT};
    use chrono::Duration;

    pub(crate) fn series_from_closes(closes: &[f64]) -> OhlcSeries {
        let start = NaiveDateTime::parse_from_str("2020-04-21 02:00:00", TIMESTAMP_FORMAT).unwrap();
        let bars = closes
            .iter()
            .enumerate()
            .map(|(i, &c)| OhlcBar::new(start + Duration::hours(i as i64), c, c + 1.0, c - 1.0, c))
            .collect();
        OhlcSeries::new(bars).unwrap()
    }

    #[test]
    fn offsets_differ_by_six() {
        for s in LabelScheme::ALL {
            assert_eq!(s.exit_offset() - s.entry_offset(), 6);
        }
    }

    #[test]
    fn monotone_series_all_long() {
        let closes: Vec<f64> = (100..=107).map(f64::from).collect();
        let samples = label(&series_from_closes(&closes), LabelScheme::Standard);
        assert_eq!(samples.len(), 2);
        assert!(samples.iter().all(|s| s.label == 1));
    }

    #[test]
    fn table_row_labelled_long() {
        let closes = [10298.7, 10316.0, 10310.0, 10300.0, 10305.0, 10302.0, 10320.0];
        let samples = label(&series_from_closes(&closes), LabelScheme::Standard);
        assert_eq!(samples[0].label, 1);
        assert!((samples[0].delta - (10320.0 - 10298.7)).abs() < 1e-9);
    }

    #[test]
    fn delayed_scheme_uses_t_plus_one_and_seven() {
        let closes = [50.0, 60.0, 55.0, 58.0, 61.0, 57.0, 70.0, 52.0, 90.0];
        let samples = label(&series_from_closes(&closes), LabelScheme::Delayed);
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].label, 0);
        assert_eq!(samples[0].delta, 52.0 - 60.0);
        // anchor 1: close[8] - close[2]
        assert_eq!(samples[1].delta, 90.0 - 55.0);
        assert_eq!(samples[1].label, 1);
    }

    #[test]
    fn zero_delta_is_short_and_short_series_is_empty() {
        let samples = label(&series_from_closes(&[5.0; 8]), LabelScheme::Standard);
        assert!(samples.iter().all(|s| s.label == 0 && s.delta == 0.0));
        assert!(label(&series_from_closes(&[5.0; 6]), LabelScheme::Standard).is_empty());
        assert!(label(&series_from_closes(&[5.0; 7]), LabelScheme::Delayed).is_empty());
    }

    #[test]
    fn scheme_parse_suggests() {
        let err = "delayd".parse::<LabelScheme>().unwrap_err().to_string();
        assert!(err.contains("did you mean `delayed`"), "{err}");
        assert_eq!("Standard".parse::<LabelScheme>().unwrap(), LabelScheme::Standard);
    }
}
