use serde::{Deserialize, Serialize};

use super::label::LabeledSample;
use crate::error::{Error, Result};

/// Summary of the label deltas of one split. Standard deviation is the
/// population form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStatistics {
    pub positive_fraction: f64,
    pub max_positive_delta: f64,
    pub max_negative_delta: f64,
    pub mean_delta: f64,
    pub std_delta: f64,
    pub n_samples: usize,
}

pub fn statistics(samples: &[LabeledSample]) -> Result<DatasetStatistics> {
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    let n = samples.len() as f64;
    let deltas = samples.iter().map(|s| s.delta);
    let positives = samples.iter().filter(|s| s.delta > 0.0).count();
    let mean = deltas.clone().sum::<f64>() / n;
    let var = deltas.clone().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    let max_pos = deltas.clone().fold(0.0_f64, f64::max);
    let max_neg = deltas.fold(0.0_f64, f64::min);
    Ok(DatasetStatistics {
        positive_fraction: 100.0 * positives as f64 / n,
        max_positive_delta: max_pos,
        max_negative_delta: max_neg,
        mean_delta: mean,
        std_delta: var.sqrt(),
        n_samples: samples.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::LabelScheme;

    fn samples(deltas: &[f64]) -> Vec<LabeledSample> {
        deltas
            .iter()
            .enumerate()
            .map(|(i, &d)| LabeledSample {
                anchor_index: i,
                anchor_ts: chrono::NaiveDateTime::default(),
                scheme: LabelScheme::Standard,
                delta: d,
                label: u8::from(d > 0.0),
            })
            .collect()
    }

    #[test]
    fn symmetric_pair() {
        let s = statistics(&samples(&[10.0, -10.0])).unwrap();
        assert_eq!(s.positive_fraction, 50.0);
        assert_eq!(s.mean_delta, 0.0);
        assert_eq!(s.max_positive_delta, 10.0);
        assert_eq!(s.max_negative_delta, -10.0);
        assert_eq!(s.std_delta, 10.0);
    }

    #[test]
    fn single_element_has_zero_std() {
        let s = statistics(&samples(&[5.0])).unwrap();
        assert_eq!(s.std_delta, 0.0);
        assert_eq!(s.max_negative_delta, 0.0);
    }

    #[test]
    fn mixed_deltas() {
        // hand: positives {3, 7} of 4; mean 6/4; var = (2.25+30.25+30.25+2.25)/4
        let s = statistics(&samples(&[3.0, -4.0, 7.0, 0.0])).unwrap();
        assert_eq!(s.positive_fraction, 50.0);
        assert_eq!(s.mean_delta, 1.5);
        assert!((s.std_delta - 16.25_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn empty_is_error() {
        assert_eq!(statistics(&[]).unwrap_err().to_string(), "no samples");
    }
}
