use std::sync::OnceLock;

use chrono::{NaiveDate, NaiveDateTime, Timelike};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::OhlcBar;

/// One bar as a sentence:
/// `Date:DD/MM/YYYY Time:HH Close:<c> Open:<o> High:<h> Low:<l>`.
///
/// Prices carry exactly one decimal, so the record is lossless for prices on
/// the 0.1-pip grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TextRecord {
    pub text: String,
}

pub fn serialize_text(bar: &OhlcBar) -> TextRecord {
    let ts = bar.timestamp;
    TextRecord {
        text: format!(
            "Date:{} Time:{:02} Close:{:.1} Open:{:.1} High:{:.1} Low:{:.1}",
            ts.format("%d/%m/%Y"),
            ts.hour(),
            bar.close,
            bar.open,
            bar.high,
            bar.low
        ),
    }
}

fn grammar() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let price = r"((?:0|[1-9][0-9]*)\.[0-9])";
        Regex::new(&format!(
            r"^Date:([0-9]{{2}})/([0-9]{{2}})/([0-9]{{4}}) Time:([0-9]{{2}}) Close:{price} Open:{price} High:{price} Low:{price}$"
        ))
        .expect("text grammar")
    })
}

pub fn parse_text(text: &str) -> Result<OhlcBar> {
    let bad = |msg: &str| Error::Parse {
        row: 0,
        msg: format!("{msg}: `{text}`"),
    };
    let caps = grammar().captures(text).ok_or_else(|| bad("not a text record"))?;
    let num = |i: usize| caps[i].parse::<u32>().map_err(|_| bad("bad number"));
    let date = NaiveDate::from_ymd_opt(num(3)? as i32, num(2)?, num(1)?).ok_or_else(|| bad("bad date"))?;
    let hour = num(4)?;
    let timestamp: NaiveDateTime = date.and_hms_opt(hour, 0, 0).ok_or_else(|| bad("bad hour"))?;
    let price = |i: usize| caps[i].parse::<f64>().map_err(|_| bad("bad price"));
    Ok(OhlcBar::new(timestamp, price(6)?, price(7)?, price(8)?, price(5)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::TIMESTAMP_FORMAT;
    use proptest::prelude::*;

    fn bar(ts: &str, c: f64, o: f64, h: f64, l: f64) -> OhlcBar {
        OhlcBar::new(NaiveDateTime::parse_from_str(ts, TIMESTAMP_FORMAT).unwrap(), o, h, l, c)
    }

    #[test]
    fn table_rows() {
        let a = bar("2020-04-21 22:00:00", 10298.7, 10282.5, 10306.1, 10277.4);
        assert_eq!(
            serialize_text(&a).text,
            "Date:21/04/2020 Time:22 Close:10298.7 Open:10282.5 High:10306.1 Low:10277.4"
        );
        let b = bar("2020-04-21 23:00:00", 10316.0, 10301.4, 10320.8, 10300.5);
        assert_eq!(
            serialize_text(&b).text,
            "Date:21/04/2020 Time:23 Close:10316.0 Open:10301.4 High:10320.8 Low:10300.5"
        );
        assert_eq!(parse_text(&serialize_text(&b).text).unwrap(), b);
    }

    #[test]
    fn rejects_off_grammar() {
        for s in [
            "Date:21/04/2020 Time:22 Close:10298.70 Open:1.0 High:1.0 Low:1.0",
            "Date:31/02/2020 Time:22 Close:1.0 Open:1.0 High:1.0 Low:1.0",
            "Date:21/04/2020 Time:24 Close:1.0 Open:1.0 High:1.0 Low:1.0",
            "Date:21/04/2020 Time:22 Close:01.0 Open:1.0 High:1.0 Low:1.0",
            "Date:21/04/2020 Time:22 Open:1.0 Close:1.0 High:1.0 Low:1.0",
        ] {
            assert!(parse_text(s).is_err(), "{s}");
        }
    }

    proptest! {
        #[test]
        fn grammar_round_trip(
            d in 1u32..=28, m in 1u32..=12, y in 1990i32..2100, h in 0u32..24,
            p in proptest::array::uniform4(0u64..10_000_000)
        ) {
            let s = format!(
                "Date:{d:02}/{m:02}/{y:04} Time:{h:02} Close:{}.{} Open:{}.{} High:{}.{} Low:{}.{}",
                p[0] / 10, p[0] % 10, p[1] / 10, p[1] % 10, p[2] / 10, p[2] % 10, p[3] / 10, p[3] % 10
            );
            let parsed = parse_text(&s).unwrap();
            prop_assert_eq!(serialize_text(&parsed).text, s);
        }
    }
}
