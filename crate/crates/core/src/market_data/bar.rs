use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

/// One hour of market data. Prices are in pip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OhlcBar {
    #[serde(with = "ts_format")]
    pub timestamp: NaiveDateTime,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
}

impl OhlcBar {
    pub fn new(timestamp: NaiveDateTime, open: f64, high: f64, low: f64, close: f64) -> Self {
        OhlcBar {
            timestamp,
            open,
            high,
            low,
            close,
        }
    }

    /// Checks finiteness, positivity and the high/low envelope.
    pub fn validate(&self) -> Result<()> {
        let prices = [self.open, self.high, self.low, self.close];
        if prices.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err(Error::Validation(format!(
                "non-finite or non-positive price at {}",
                self.timestamp.format(TIMESTAMP_FORMAT)
            )));
        }
        if self.low > self.open.min(self.close) || self.high < self.open.max(self.close) {
            return Err(Error::Validation(format!(
                "high/low inversion at {}",
                self.timestamp.format(TIMESTAMP_FORMAT)
            )));
        }
        Ok(())
    }

    /// Features in the fixed model order (close, open, high, low).
    pub fn features(&self) -> [f64; 4] {
        [self.close, self.open, self.high, self.low]
    }
}

/// Bars ordered by strictly increasing timestamp. Gaps are allowed.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OhlcSeries {
    bars: Vec<OhlcBar>,
}

impl OhlcSeries {
    /// Validates every bar and the ordering; all offending timestamps are
    /// reported together.
    pub fn new(bars: Vec<OhlcBar>) -> Result<Self> {
        let bad: Vec<String> = bars
            .iter()
            .filter(|b| b.validate().is_err())
            .map(|b| b.timestamp.format(TIMESTAMP_FORMAT).to_string())
            .collect();
        if !bad.is_empty() {
            return Err(Error::Validation(format!(
                "invalid bars (high/low inversion or bad price) at: {}",
                bad.join(", ")
            )));
        }
        for pair in bars.windows(2) {
            if pair[1].timestamp == pair[0].timestamp {
                return Err(Error::Validation(format!(
                    "duplicate timestamp {}",
                    pair[0].timestamp.format(TIMESTAMP_FORMAT)
                )));
            }
            if pair[1].timestamp < pair[0].timestamp {
                return Err(Error::Validation(format!(
                    "timestamps not increasing at {}",
                    pair[1].timestamp.format(TIMESTAMP_FORMAT)
                )));
            }
        }
        Ok(OhlcSeries { bars })
    }

    pub fn bars(&self) -> &[OhlcBar] {
        &self.bars
    }

    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }

    pub fn closes(&self) -> impl Iterator<Item = f64> + '_ {
        self.bars.iter().map(|b| b.close)
    }

    /// Contiguous sub-series; bounds are positions.
    pub fn slice(&self, range: std::ops::Range<usize>) -> OhlcSeries {
        OhlcSeries {
            bars: self.bars[range].to_vec(),
        }
    }
}

pub mod ts_format {
    use chrono::NaiveDateTime;
    use serde::{Deserialize, Deserializer, Serializer};

    use super::TIMESTAMP_FORMAT;

    pub fn serialize<S: Serializer>(ts: &NaiveDateTime, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(&ts.format(TIMESTAMP_FORMAT))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<NaiveDateTime, D::Error> {
        let raw = String::deserialize(d)?;
        NaiveDateTime::parse_from_str(raw.trim(), TIMESTAMP_FORMAT).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(s: &str) -> NaiveDateTime {
        NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT).unwrap()
    }

    #[test]
    fn rejects_inverted_envelope() {
        let bar = OhlcBar::new(ts("2020-04-21 22:00:00"), 100.0, 99.0, 101.0, 100.0);
        assert!(bar.validate().is_err());
    }

    #[test]
    fn rejects_duplicates_and_disorder() {
        let a = OhlcBar::new(ts("2020-04-21 22:00:00"), 100.0, 101.0, 99.0, 100.0);
        let b = OhlcBar::new(ts("2020-04-21 21:00:00"), 100.0, 101.0, 99.0, 100.0);
        assert!(OhlcSeries::new(vec![a, a]).unwrap_err().to_string().contains("duplicate"));
        assert!(OhlcSeries::new(vec![a, b]).is_err());
        assert!(OhlcSeries::new(vec![b, a]).is_ok());
    }

    #[test]
    fn non_positive_price_is_invalid() {
        let bar = OhlcBar::new(ts("2020-04-21 22:00:00"), 0.0, 1.0, 0.0, 0.5);
        assert!(bar.validate().is_err());
    }
}
