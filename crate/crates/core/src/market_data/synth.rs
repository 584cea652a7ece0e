use chrono::{Datelike, Duration, NaiveDateTime, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::bar::{OhlcBar, OhlcSeries, TIMESTAMP_FORMAT};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub seed: u64,
    #[serde(rename = "bars")]
    pub n_bars: usize,
    /// Standard deviation of the hourly close-to-close move, in pip.
    #[serde(default = "default_volatility")]
    pub volatility: f64,
}

fn default_volatility() -> f64 {
    25.0
}

const START_PRICE: f64 = 10_300.0;
const START_TS: &str = "2020-04-21 02:00:00";

fn tick(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Seeded random walk on a 0.1-pip grid with weekend gaps. Close moves have a
/// slight upward drift; opens gap from the previous close; highs and lows
/// extend the open/close envelope.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> OhlcSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vol = cfg.volatility.max(0.0);
    let normal = move |rng: &mut ChaCha8Rng, scale: f64| -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        z * scale
    };

    let mut ts = NaiveDateTime::parse_from_str(START_TS, TIMESTAMP_FORMAT).expect("start timestamp");
    let mut prev_close = START_PRICE;
    let mut bars = Vec::with_capacity(cfg.n_bars);
    while bars.len() < cfg.n_bars {
        if matches!(ts.weekday(), Weekday::Sat | Weekday::Sun) {
            ts += Duration::hours(1);
            continue;
        }
        let open = reflect(tick(prev_close + normal(&mut rng, 0.1 * vol)));
        let close = reflect(tick(prev_close + 0.02 * vol + normal(&mut rng, vol)));
        let high = tick(open.max(close) + normal(&mut rng, 0.5 * vol).abs());
        let low = tick(open.min(close) - normal(&mut rng, 0.5 * vol).abs()).max(0.1);
        bars.push(OhlcBar::new(ts, open, high, low, close));
        prev_close = close;
        ts += Duration::hours(1);
    }
    OhlcSeries::new(bars).expect("generator keeps bar invariants")
}

fn reflect(p: f64) -> f64 {
    if p < 1.0 {
        tick(2.0 - p)
    } else {
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::{label, statistics, LabelScheme};

    #[test]
    fn deterministic_per_seed() {
        let cfg = SyntheticConfig {
            seed: 7,
            n_bars: 100,
            volatility: 25.0,
        };
        let a = generate_synthetic(&cfg);
        let b = generate_synthetic(&cfg);
        assert_eq!(a, b);
        let mut ba = Vec::new();
        let mut bb = Vec::new();
        crate::market_data::write_csv(&a, &mut ba).unwrap();
        crate::market_data::write_csv(&b, &mut bb).unwrap();
        assert_eq!(ba, bb);
        let c = generate_synthetic(&SyntheticConfig { seed: 8, ..cfg });
        assert_ne!(a, c);
    }

    #[test]
    fn zero_volatility_is_flat() {
        let s = generate_synthetic(&SyntheticConfig {
            seed: 7,
            n_bars: 50,
            volatility: 0.0,
        });
        assert!(s.bars().iter().all(|b| b.close == START_PRICE && b.high == b.low));
        assert!(label(&s, LabelScheme::Standard).iter().all(|l| l.label == 0));
    }

    #[test]
    fn long_series_statistics_are_finite() {
        let s = generate_synthetic(&SyntheticConfig {
            seed: 7,
            n_bars: 5000,
            volatility: 25.0,
        });
        assert_eq!(s.len(), 5000);
        let st = statistics(&label(&s, LabelScheme::Standard)).unwrap();
        assert!(st.std_delta > 0.0 && st.std_delta.is_finite());
        assert!(st.mean_delta.is_finite());
        // no weekend bars
        assert!(s
            .bars()
            .iter()
            .all(|b| !matches!(b.timestamp.weekday(), Weekday::Sat | Weekday::Sun)));
    }
}
