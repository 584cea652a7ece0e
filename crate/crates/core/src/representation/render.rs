use std::io::Cursor;
use std::path::Path;

use chrono::NaiveDateTime;
use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::OhlcBar;

pub type Rgb = [u8; 3];

/// Stroke of one price series. `dash` alternates on/off run lengths in
/// pixels; empty means solid.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LineStyle {
    pub width: u32,
    pub dash: Vec<u32>,
    pub color: Rgb,
}

impl LineStyle {
    pub fn solid(width: u32) -> Self {
        LineStyle {
            width,
            dash: Vec::new(),
            color: [0, 0, 0],
        }
    }

    pub fn dashed(width: u32, dash: Vec<u32>) -> Self {
        LineStyle {
            width,
            dash,
            color: [0, 0, 0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub width: u32,
    pub height: u32,
    pub window_hours: usize,
    /// Styles for (close, open, high, low).
    pub styles: [LineStyle; 4],
    /// Gridline distance in pip.
    pub grid_spacing: f64,
    pub grid_color: Rgb,
    pub background: Rgb,
    pub margin: u32,
    /// Value-axis padding as a fraction of the window's price range.
    pub pad_fraction: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            width: 224,
            height: 224,
            window_hours: 20,
            styles: [
                LineStyle::solid(3),
                LineStyle::solid(1),
                LineStyle::dashed(1, vec![6, 4]),
                LineStyle::dashed(1, vec![2, 3]),
            ],
            grid_spacing: 20.0,
            grid_color: [200, 200, 200],
            background: [255, 255, 255],
            margin: 8,
            pad_fraction: 0.05,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        for i in 0..4 {
            for j in i + 1..4 {
                if self.styles[i] == self.styles[j] {
                    return Err(Error::Config(format!("line styles {i} and {j} are identical")));
                }
            }
        }
        if self.styles.iter().any(|s| s.width == 0) {
            return Err(Error::Config("line width must be >= 1".into()));
        }
        if self.window_hours < 2 {
            return Err(Error::Config("window must span at least 2 hours".into()));
        }
        if self.width <= 2 * self.margin + 1 || self.height <= 2 * self.margin + 1 {
            return Err(Error::Config("image too small for margins".into()));
        }
        if !(self.grid_spacing >= 0.1) || !(0.0..1.0).contains(&self.pad_fraction) {
            return Err(Error::Config("grid spacing or padding out of range".into()));
        }
        Ok(())
    }
}

/// Rendered line chart of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct ChartImage {
    pub width: u32,
    pub height: u32,
    /// Row-major RGB bytes.
    pub pixels: Vec<u8>,
    pub window_start: NaiveDateTime,
    pub window_hours: usize,
    /// Price range covered by the value axis, in pip.
    pub value_range: (f64, f64),
}

impl ChartImage {
    pub fn pixel(&self, x: u32, y: u32) -> Rgb {
        let i = ((y * self.width + x) * 3) as usize;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn blank(width: u32, height: u32, color: Rgb) -> Self {
        ChartImage {
            width,
            height,
            pixels: color.iter().copied().cycle().take((width * height * 3) as usize).collect(),
            window_start: NaiveDateTime::default(),
            window_hours: 0,
            value_range: (0.0, 0.0),
        }
    }

    pub fn to_rgb_image(&self) -> RgbImage {
        RgbImage::from_raw(self.width, self.height, self.pixels.clone()).expect("pixel buffer size")
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Cursor::new(Vec::new());
        self.to_rgb_image().write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

struct Canvas<'a> {
    img: &'a mut ChartImage,
}

impl Canvas<'_> {
    fn set(&mut self, x: i64, y: i64, c: Rgb) {
        if x < 0 || y < 0 || x >= self.img.width as i64 || y >= self.img.height as i64 {
            return;
        }
        let i = ((y as u32 * self.img.width + x as u32) * 3) as usize;
        self.img.pixels[i..i + 3].copy_from_slice(&c);
    }

    fn stamp(&mut self, cx: f64, cy: f64, width: u32, c: Rgb) {
        let ix = cx.round() as i64;
        let iy = cy.round() as i64;
        let lo = -((width as i64 - 1) / 2);
        let hi = width as i64 / 2;
        for dy in lo..=hi {
            for dx in lo..=hi {
                self.set(ix + dx, iy + dy, c);
            }
        }
    }

    /// Strokes a polyline; the dash phase follows arc length across segments.
    fn polyline(&mut self, pts: &[(f64, f64)], style: &LineStyle) {
        const STEP: f64 = 0.25;
        let period: u32 = style.dash.iter().sum();
        let mut arc = 0.0_f64;
        for seg in pts.windows(2) {
            let (x0, y0) = seg[0];
            let (x1, y1) = seg[1];
            let len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
            let steps = (len / STEP).ceil().max(1.0) as usize;
            for k in 0..=steps {
                let t = k as f64 / steps as f64;
                let pos = arc + t * len;
                if is_on(&style.dash, period, pos) {
                    self.stamp(x0 + t * (x1 - x0), y0 + t * (y1 - y0), style.width, style.color);
                }
            }
            arc += len;
        }
    }
}

fn is_on(dash: &[u32], period: u32, pos: f64) -> bool {
    if dash.is_empty() || period == 0 {
        return true;
    }
    let mut phase = pos.rem_euclid(period as f64);
    for (i, run) in dash.iter().enumerate() {
        if phase < *run as f64 {
            return i % 2 == 0;
        }
        phase -= *run as f64;
    }
    true
}

/// Draws the close/open/high/low polylines of `window` over 20-pip
/// gridlines on a white background.
///
/// Prices are quantized to tenths of a pip and laid out relative to the
/// window minimum, so shifting a window by a whole number of grid periods
/// reproduces the raster exactly.
pub fn render_chart(window: &[OhlcBar], config: &RenderConfig) -> Result<ChartImage> {
    config.validate()?;
    if window.len() != config.window_hours {
        return Err(Error::Validation(format!(
            "chart window must have {} bars, got {}",
            config.window_hours,
            window.len()
        )));
    }
    let quantize = |p: f64| -> Result<i64> {
        if p.is_finite() {
            Ok((p * 10.0).round() as i64)
        } else {
            Err(Error::Validation("non-finite price in chart window".into()))
        }
    };
    let mut series = [vec![], vec![], vec![], vec![]];
    for bar in window {
        for (s, p) in series.iter_mut().zip(bar.features()) {
            s.push(quantize(p)?);
        }
    }
    let min_q = series.iter().flatten().copied().min().expect("non-empty window");
    let max_q = series.iter().flatten().copied().max().expect("non-empty window");
    let grid_q = (config.grid_spacing * 10.0).round() as i64;
    let range = (max_q - min_q) as f64;
    let pad = if max_q == min_q {
        grid_q as f64 / 2.0
    } else {
        config.pad_fraction * range
    };
    let (lo, hi) = (-pad, range + pad);

    let left = config.margin as f64;
    let top = config.margin as f64;
    let plot_w = (config.width - 2 * config.margin) as f64;
    let plot_h = (config.height - 2 * config.margin) as f64;
    let y_of = |rel: f64| top + (hi - rel) / (hi - lo) * (plot_h - 1.0);
    let x_of = |i: usize| left + i as f64 * (plot_w - 1.0) / (window.len() - 1) as f64;

    let mut img = ChartImage::blank(config.width, config.height, config.background);
    img.window_start = window[0].timestamp;
    img.window_hours = window.len();
    img.value_range = ((min_q as f64 - pad) / 10.0, (max_q as f64 + pad) / 10.0);
    let mut canvas = Canvas { img: &mut img };

    let mut rel = -(min_q.rem_euclid(grid_q)) as f64;
    while rel <= hi {
        if rel >= lo {
            let y = y_of(rel).round() as i64;
            for x in left as i64..(left + plot_w) as i64 {
                canvas.set(x, y, config.grid_color);
            }
        }
        rel += grid_q as f64;
    }

    // low, high, open, then the heavy close line on top
    for idx in [3, 2, 1, 0] {
        let pts: Vec<(f64, f64)> = series[idx]
            .iter()
            .enumerate()
            .map(|(i, q)| (x_of(i), y_of((q - min_q) as f64)))
            .collect();
        canvas.polyline(&pts, &config.styles[idx]);
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Duration;
    use proptest::prelude::*;

    fn window_from(closes: &[f64]) -> Vec<OhlcBar> {
        let t0 = NaiveDateTime::default();
        closes
            .iter()
            .enumerate()
            .map(|(i, &c)| OhlcBar::new(t0 + Duration::hours(i as i64), c, c, c, c))
            .collect()
    }

    fn grid_rows(img: &ChartImage, cfg: &RenderConfig) -> Vec<u32> {
        let (x0, x1) = (cfg.margin, cfg.width - cfg.margin);
        (0..img.height)
            .filter(|&y| {
                let gray = (x0..x1).filter(|&x| img.pixel(x, y) == cfg.grid_color).count();
                gray * 2 >= (x1 - x0) as usize
            })
            .collect()
    }

    #[test]
    fn flat_window_one_or_two_gridlines() {
        let cfg = RenderConfig::default();
        for level in [10010.0, 10003.3] {
            let img = render_chart(&window_from(&[level; 20]), &cfg).unwrap();
            let n = grid_rows(&img, &cfg).len();
            assert!((1..=2).contains(&n), "level {level}: {n}");
        }
        let img = render_chart(&window_from(&[10010.0; 20]), &cfg).unwrap();
        assert_eq!(grid_rows(&img, &cfg).len(), 2);
        // a flat line on a grid multiple hides its only gridline
        let img = render_chart(&window_from(&[10000.0; 20]), &cfg).unwrap();
        assert!(grid_rows(&img, &cfg).is_empty());
        let mid = (cfg.height - 1) / 2;
        let black = (cfg.margin..cfg.width - cfg.margin)
            .filter(|&x| img.pixel(x, mid) == [0, 0, 0])
            .count();
        assert_eq!(black, (cfg.width - 2 * cfg.margin) as usize);
    }

    #[test]
    fn wrong_length_rejected() {
        assert!(render_chart(&window_from(&[1.0; 19]), &RenderConfig::default()).is_err());
    }

    #[test]
    fn identical_styles_rejected() {
        let mut cfg = RenderConfig::default();
        cfg.styles[1] = cfg.styles[2].clone();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn dash_pattern_phases() {
        assert!(is_on(&[6, 4], 10, 0.0));
        assert!(!is_on(&[6, 4], 10, 7.0));
        assert!(is_on(&[6, 4], 10, 12.0));
        assert!(is_on(&[], 0, 3.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn shift_by_grid_multiple_is_identical(
            ticks in proptest::collection::vec(0i64..3000, 20),
            k in -40i64..40
        ) {
            let cfg = RenderConfig::default();
            let base: Vec<f64> = ticks.iter().map(|t| 10_000.0 + *t as f64 / 10.0).collect();
            let shifted: Vec<f64> = base.iter().map(|p| p + 20.0 * k as f64).collect();
            let a = render_chart(&window_from(&base), &cfg).unwrap();
            let b = render_chart(&window_from(&shifted), &cfg).unwrap();
            prop_assert_eq!(a.pixels, b.pixels);
        }
    }
}
