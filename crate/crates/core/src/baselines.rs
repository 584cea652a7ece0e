//! Reference strategies that trade every labeled hour without learning.

use std::fmt;
use std::str::FromStr;

use chrono::NaiveDateTime;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::LabeledSample;

/// Direction taken at one anchor hour: 1 long, 0 short.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyDecision {
    pub anchor_index: usize,
    #[serde(with = "crate::market_data::ts_serde")]
    pub anchor_ts: NaiveDateTime,
    pub direction: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Random,
    Long,
    Short,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Random, Strategy::Long, Strategy::Short];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Long => "long",
            Strategy::Short => "short",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Strategy::Random => "Random",
            Strategy::Long => "Always Long",
            Strategy::Short => "Always Short",
        }
    }

    pub fn decide(self, anchors: &[LabeledSample], seed: u64) -> Vec<StrategyDecision> {
        match self {
            Strategy::Random => random_strategy(anchors, seed),
            Strategy::Long => always_long(anchors),
            Strategy::Short => always_short(anchors),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| crate::error::unknown_choice("strategy", s, &Strategy::ALL.map(|k| k.name())))
    }
}

/// Stream offset keeping the random strategy's generator apart from any
/// training generator built from the same seed.
const RANDOM_STREAM: u64 = 0x5eed_ba5e;

fn constant(anchors: &[LabeledSample], direction: u8) -> Vec<StrategyDecision> {
    anchors
        .iter()
        .map(|a| StrategyDecision {
            anchor_index: a.anchor_index,
            anchor_ts: a.anchor_ts,
            direction,
        })
        .collect()
}

/// Fair coin per anchor.
pub fn random_strategy(anchors: &[LabeledSample], seed: u64) -> Vec<StrategyDecision> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(RANDOM_STREAM);
    anchors
        .iter()
        .map(|a| StrategyDecision {
            anchor_index: a.anchor_index,
            anchor_ts: a.anchor_ts,
            direction: u8::from(rng.random_bool(0.5)),
        })
        .collect()
}

pub fn always_long(anchors: &[LabeledSample]) -> Vec<StrategyDecision> {
    constant(anchors, 1)
}

pub fn always_short(anchors: &[LabeledSample]) -> Vec<StrategyDecision> {
    constant(anchors, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::evaluate;
    use crate::market_data::{generate_synthetic, label, LabelScheme, SyntheticConfig};

    fn anchors(n: usize) -> Vec<LabeledSample> {
        let s = generate_synthetic(&SyntheticConfig {
            seed: 1,
            n_bars: n + 6,
            volatility: 25.0,
        });
        label(&s, LabelScheme::Standard)
    }

    #[test]
    fn random_is_seeded() {
        let a = anchors(200);
        assert_eq!(random_strategy(&a, 4), random_strategy(&a, 4));
        assert_ne!(random_strategy(&a, 4), random_strategy(&a, 5));
        assert!(random_strategy(&[], 4).is_empty());
    }

    #[test]
    fn random_is_a_fair_coin() {
        let a = anchors(10_000);
        let d = random_strategy(&a, 11);
        let longs = d.iter().filter(|d| d.direction == 1).count() as f64 / d.len() as f64;
        assert!((0.47..=0.53).contains(&longs), "{longs}");
    }

    #[test]
    fn constant_strategies() {
        let a = anchors(50);
        assert!(always_long(&a).iter().all(|d| d.direction == 1));
        assert!(always_short(&a).iter().all(|d| d.direction == 0));
    }

    #[test]
    fn constant_reports_match_closed_forms() {
        let s = generate_synthetic(&SyntheticConfig {
            seed: 2,
            n_bars: 400,
            volatility: 25.0,
        });
        let labels = label(&s, LabelScheme::Standard);
        let p = labels.iter().filter(|l| l.label == 1).count() as f64 / labels.len() as f64;
        let long = evaluate(&always_long(&labels), &labels, &s, LabelScheme::Standard).unwrap();
        let short = evaluate(&always_short(&labels), &labels, &s, LabelScheme::Standard).unwrap();
        assert!((long.f1 - 2.0 * p / (1.0 + p)).abs() < 1e-9);
        assert!((long.precision_long - 100.0 * p).abs() < 1e-9);
        assert_eq!(long.balanced_acc, 0.5);
        assert_eq!(long.mcc, 0.0);
        assert_eq!(short.f1, 0.0);
        assert_eq!(long.pip_long.to_bits(), (-short.pip_short).to_bits());
        let deltas: f64 = labels.iter().map(|l| l.delta).sum();
        assert_eq!(long.pip_long, deltas);
    }

    #[test]
    fn strategy_names_parse() {
        for k in Strategy::ALL {
            assert_eq!(k.name().parse::<Strategy>().unwrap(), k);
        }
        assert!("sideways".parse::<Strategy>().is_err());
    }
}
