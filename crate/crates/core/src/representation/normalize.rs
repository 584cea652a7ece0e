use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::{OhlcBar, OhlcSeries};

/// Feature order used for every numeric representation.
pub const FEATURE_NAMES: [&str; 4] = ["close", "open", "high", "low"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationSource {
    TrainSet,
}

/// Per-feature mean and population standard deviation of the training bars.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub mean: [f64; 4],
    pub std: [f64; 4],
    pub source: NormalizationSource,
}

pub fn fit_normalizer(train: &OhlcSeries) -> Result<NormalizationParams> {
    if train.is_empty() {
        return Err(Error::NoRows);
    }
    let n = train.len() as f64;
    let mut mean = [0.0; 4];
    for bar in train.bars() {
        for (m, x) in mean.iter_mut().zip(bar.features()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut std = [0.0; 4];
    for bar in train.bars() {
        for ((s, x), m) in std.iter_mut().zip(bar.features()).zip(mean) {
            *s += (x - m) * (x - m);
        }
    }
    for (i, s) in std.iter_mut().enumerate() {
        *s = (*s / n).sqrt();
        if *s <= 0.0 || !s.is_finite() {
            return Err(Error::ZeroStd(FEATURE_NAMES[i]));
        }
    }
    Ok(NormalizationParams {
        mean,
        std,
        source: NormalizationSource::TrainSet,
    })
}

impl NormalizationParams {
    pub fn normalize(&self, bar: &OhlcBar) -> [f64; 4] {
        self.normalize_features(bar.features())
    }

    pub fn normalize_features(&self, x: [f64; 4]) -> [f64; 4] {
        std::array::from_fn(|i| (x[i] - self.mean[i]) / self.std[i])
    }

    pub fn denormalize(&self, z: [f64; 4]) -> [f64; 4] {
        std::array::from_fn(|i| z[i] * self.std[i] + self.mean[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::{generate_synthetic, SyntheticConfig};
    use chrono::{Duration, NaiveDateTime};

    fn bars(closes: &[f64], spread: f64) -> OhlcSeries {
        let t0 = NaiveDateTime::default();
        OhlcSeries::new(
            closes
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    OhlcBar::new(t0 + Duration::hours(i as i64), c, c + spread * i as f64, c - spread * i as f64, c)
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn constant_series_names_feature() {
        let err = fit_normalizer(&bars(&[10.0, 10.0, 10.0], 0.0)).unwrap_err();
        assert!(matches!(err, Error::ZeroStd("close")));
    }

    #[test]
    fn two_point_close() {
        let p = fit_normalizer(&bars(&[10.0, 20.0], 1.0)).unwrap();
        assert_eq!(p.mean[0], 15.0);
        assert_eq!(p.std[0], 5.0);
    }

    #[test]
    fn identity_and_unit_cases() {
        let s = generate_synthetic(&SyntheticConfig {
            seed: 7,
            n_bars: 300,
            volatility: 20.0,
        });
        let p = fit_normalizer(&s).unwrap();
        assert_eq!(p.normalize_features(p.mean), [0.0; 4]);
        let shifted: [f64; 4] = std::array::from_fn(|i| p.mean[i] + p.std[i]);
        for z in p.normalize_features(shifted) {
            assert!((z - 1.0).abs() < 1e-12);
        }
        for bar in s.bars() {
            let back = p.denormalize(p.normalize(bar));
            for (a, b) in back.iter().zip(bar.features()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn matches_streaming_oracle() {
        // Welford's streaming mean/variance, independent of the two-pass fit.
        let s = generate_synthetic(&SyntheticConfig {
            seed: 7,
            n_bars: 2000,
            volatility: 25.0,
        });
        let p = fit_normalizer(&s).unwrap();
        let mut mean = [0.0; 4];
        let mut m2 = [0.0; 4];
        for (k, bar) in s.bars().iter().enumerate() {
            let x = bar.features();
            for i in 0..4 {
                let d = x[i] - mean[i];
                mean[i] += d / (k + 1) as f64;
                m2[i] += d * (x[i] - mean[i]);
            }
        }
        for i in 0..4 {
            let std = (m2[i] / s.len() as f64).sqrt();
            assert!((p.mean[i] - mean[i]).abs() <= 1e-12 * mean[i].abs());
            assert!((p.std[i] - std).abs() <= 1e-9 * std, "{} vs {}", p.std[i], std);
        }
    }
}
