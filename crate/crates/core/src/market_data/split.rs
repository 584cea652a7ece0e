use serde::{Deserialize, Serialize};

use super::bar::OhlcSeries;
use crate::error::{Error, Result};

/// Chronological train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.6,
            validation_fraction: 0.2,
            test_fraction: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train_fraction, self.validation_fraction, self.test_fraction];
        if parts.iter().any(|f| !f.is_finite() || *f <= 0.0) {
            return Err(Error::Config(format!("split fractions must be > 0, got {parts:?}")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must sum to 1, got {sum}")));
        }
        Ok(())
    }

    /// Boundary positions `(end_of_train, end_of_validation)` for `n` bars.
    /// Both boundaries round down.
    pub fn boundaries(&self, n: usize) -> (usize, usize) {
        // A small epsilon keeps 0.6 * 10 from landing on 5.999...
        let cut = |f: f64| ((f * n as f64) + 1e-9).floor() as usize;
        let train_end = cut(self.train_fraction).min(n);
        let val_end = cut(self.train_fraction + self.validation_fraction).clamp(train_end, n);
        (train_end, val_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: OhlcSeries,
    pub validation: OhlcSeries,
    pub test: OhlcSeries,
}

/// Partitions `series` into contiguous, disjoint train/validation/test parts,
/// train earliest.
pub fn split(series: &OhlcSeries, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let n = series.len();
    if n < 3 {
        return Err(Error::Validation(format!("need at least 3 bars to split, got {n}")));
    }
    let (train_end, val_end) = spec.boundaries(n);
    if train_end == 0 || val_end == train_end || val_end == n {
        return Err(Error::Config(format!(
            "split of {n} bars leaves an empty part ({train_end}, {}, {})",
            val_end - train_end,
            n - val_end
        )));
    }
    Ok(Splits {
        train: series.slice(0..train_end),
        validation: series.slice(train_end..val_end),
        test: series.slice(val_end..n),
    })
}
