//! Trade ledgers, confusion counts and the metric suite.

use std::fmt::Write as _;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::baselines::StrategyDecision;
use crate::error::{Error, Result};
use crate::market_data::{LabelScheme, LabeledSample, OhlcSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeRecord {
    pub anchor_index: usize,
    #[serde(with = "crate::market_data::ts_serde")]
    pub anchor_ts: NaiveDateTime,
    pub direction: u8,
    pub entry_price: f64,
    pub exit_price: f64,
    pub pnl: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Ledger {
    pub trades: Vec<TradeRecord>,
    /// Decisions whose exit bar lies outside the series.
    pub dropped: usize,
}

/// One trade per decision, entered at the close `entry_offset` hours after
/// the anchor and exited at the close `exit_offset` hours after it.
pub fn build_ledger(decisions: &[StrategyDecision], series: &OhlcSeries, scheme: LabelScheme) -> Ledger {
    let bars = series.bars();
    let mut ledger = Ledger::default();
    for d in decisions {
        let exit = d.anchor_index + scheme.exit_offset();
        if exit >= bars.len() || bars[d.anchor_index].timestamp != d.anchor_ts {
            ledger.dropped += 1;
            continue;
        }
        let entry_price = bars[d.anchor_index + scheme.entry_offset()].close;
        let exit_price = bars[exit].close;
        let pnl = if d.direction == 1 {
            exit_price - entry_price
        } else {
            entry_price - exit_price
        };
        ledger.trades.push(TradeRecord {
            anchor_index: d.anchor_index,
            anchor_ts: d.anchor_ts,
            direction: d.direction,
            entry_price,
            exit_price,
            pnl,
        });
    }
    ledger
}

/// Long is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (u8, u8)>) -> Self {
        let mut c = ConfusionCounts::default();
        for (pred, label) in pairs {
            match (pred == 1, label == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn f1(&self) -> f64 {
        let denom = self.tp as f64 + 0.5 * (self.fp + self.fn_) as f64;
        if denom == 0.0 {
            0.0
        } else {
            self.tp as f64 / denom
        }
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            0.0
        } else {
            (self.tp + self.tn) as f64 / n as f64
        }
    }

    /// Mean of sensitivity and specificity; an undefined component counts
    /// as 0.
    pub fn balanced_accuracy(&self) -> f64 {
        (ratio(self.tp, self.tp + self.fn_) + ratio(self.tn, self.tn + self.fp)) / 2.0
    }

    /// 0 when any factor of the denominator is 0.
    pub fn mcc(&self) -> f64 {
        let (tp, fp, tn, fn_) = (self.tp as f64, self.fp as f64, self.tn as f64, self.fn_ as f64);
        let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
        if factors.contains(&0.0) {
            return 0.0;
        }
        (tp * tn - fp * fn_) / factors.iter().product::<f64>().sqrt()
    }

    /// Percent; 0 without long predictions.
    pub fn precision_long(&self) -> f64 {
        100.0 * ratio(self.tp, self.tp + self.fp)
    }

    /// Percent; 0 without short predictions.
    pub fn precision_short(&self) -> f64 {
        100.0 * ratio(self.tn, self.tn + self.fn_)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Tallies predictions against labels. Both lists must refer to the same
/// anchors in the same order.
pub fn confusion(decisions: &[StrategyDecision], labels: &[LabeledSample]) -> Result<ConfusionCounts> {
    if decisions.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} decisions for {} labeled anchors",
            decisions.len(),
            labels.len()
        )));
    }
    for (d, l) in decisions.iter().zip(labels) {
        if d.anchor_index != l.anchor_index || d.anchor_ts != l.anchor_ts {
            return Err(Error::Validation(format!(
                "decision for {} is not aligned with the label for {}",
                d.anchor_ts, l.anchor_ts
            )));
        }
    }
    Ok(ConfusionCounts::from_pairs(
        decisions.iter().zip(labels).map(|(d, l)| (d.direction, l.label)),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub f1: f64,
    pub mcc: f64,
    pub balanced_acc: f64,
    pub precision_short: f64,
    pub precision_long: f64,
    pub pip_short: f64,
    pub pip_long: f64,
    pub counts: ConfusionCounts,
    pub scheme: LabelScheme,
    #[serde(default)]
    pub dropped: usize,
}

/// Full metric suite from counts and the matching ledger. Pip balances sum
/// trades in ledger order.
pub fn metrics(counts: &ConfusionCounts, ledger: &Ledger, scheme: LabelScheme) -> Result<MetricsReport> {
    if counts.total() != ledger.trades.len() as u64 {
        return Err(Error::Validation(format!(
            "confusion counts cover {} anchors but the ledger has {} trades",
            counts.total(),
            ledger.trades.len()
        )));
    }
    let mut pip_long = 0.0;
    let mut pip_short = 0.0;
    for t in &ledger.trades {
        if t.direction == 1 {
            pip_long += t.pnl;
        } else {
            pip_short += t.pnl;
        }
    }
    Ok(MetricsReport {
        f1: counts.f1(),
        mcc: counts.mcc(),
        balanced_acc: counts.balanced_accuracy(),
        precision_short: counts.precision_short(),
        precision_long: counts.precision_long(),
        pip_short,
        pip_long,
        counts: *counts,
        scheme,
        dropped: ledger.dropped,
    })
}

/// Ledger, counts and report for decisions over labeled anchors of
/// `series`.
pub fn evaluate(
    decisions: &[StrategyDecision],
    labels: &[LabeledSample],
    series: &OhlcSeries,
    scheme: LabelScheme,
) -> Result<MetricsReport> {
    let counts = confusion(decisions, labels)?;
    let ledger = build_ledger(decisions, series, scheme);
    if ledger.dropped > 0 {
        return Err(Error::Validation(format!(
            "{} labeled anchors have no exit bar",
            ledger.dropped
        )));
    }
    metrics(&counts, &ledger, scheme)
}

impl MetricsReport {
    /// Field-wise arithmetic mean; counts are rounded to the nearest whole
    /// trade.
    pub fn mean(reports: &[MetricsReport]) -> Option<MetricsReport> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let avg_count = |f: fn(&ConfusionCounts) -> u64| {
            (reports.iter().map(|r| f(&r.counts) as f64).sum::<f64>() / n).round() as u64
        };
        Some(MetricsReport {
            f1: avg(|r| r.f1),
            mcc: avg(|r| r.mcc),
            balanced_acc: avg(|r| r.balanced_acc),
            precision_short: avg(|r| r.precision_short),
            precision_long: avg(|r| r.precision_long),
            pip_short: avg(|r| r.pip_short),
            pip_long: avg(|r| r.pip_long),
            counts: ConfusionCounts {
                tp: avg_count(|c| c.tp),
                fp: avg_count(|c| c.fp),
                tn: avg_count(|c| c.tn),
                fn_: avg_count(|c| c.fn_),
            },
            scheme: first.scheme,
            dropped: reports.iter().map(|r| r.dropped).max().unwrap_or(0),
        })
    }
}

pub const TABLE_COLUMNS: [&str; 8] = [
    "Models",
    "F1",
    "MCC",
    "Balanced ACC",
    "Precision (Short)",
    "Precision (Long)",
    "Pip Balance (Short)",
    "Pip Balance (Long)",
];

/// Two decimals, without a sign on values that round to zero.
pub fn fmt2(x: f64) -> String {
    let s = format!("{x:.2}");
    if s == "-0.00" {
        "0.00".to_string()
    } else {
        s
    }
}

/// Aligned text table: a header row, then one row per `(name, report)`.
pub fn render_table(title: Option<&str>, rows: &[(String, MetricsReport)]) -> String {
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|(name, r)| {
            vec![
                name.clone(),
                fmt2(r.f1),
                fmt2(r.mcc),
                fmt2(r.balanced_acc),
                fmt2(r.precision_short),
                fmt2(r.precision_long),
                fmt2(r.pip_short),
                fmt2(r.pip_long),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = TABLE_COLUMNS.iter().map(|h| h.len()).collect();
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let line = |row: &[String]| -> String {
        let mut s = format!("{:<w$}", row[0], w = widths[0]);
        for (c, w) in row.iter().zip(&widths).skip(1) {
            let _ = write!(s, "  {c:>w$}");
        }
        s.trim_end().to_string()
    };
    let mut out = String::new();
    if let Some(t) = title {
        out.push_str(t);
        out.push('\n');
    }
    let header: Vec<String> = TABLE_COLUMNS.iter().map(|s| s.to_string()).collect();
    out.push_str(&line(&header));
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in &cells {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}
