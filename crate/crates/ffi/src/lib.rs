//! C interface. Objects are opaque handles freed by their `*_free`
//! function; every fallible call returns a `ChartcastStatus` and leaves a
//! message for `chartcast_last_error`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;
use std::ptr;

use chartcast::baselines::Strategy;
use chartcast::evaluation::evaluate;
use chartcast::market_data::{generate_synthetic, ingest, label, split, InputFormat, LabelScheme, OhlcSeries, SplitSpec, SyntheticConfig};
use chartcast::pipeline::{run_pipeline, validate_config};
use chartcast::representation::{render_chart, serialize_text, RenderConfig};
use chartcast::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChartcastStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Validation = 5,
    Config = 6,
    Checkpoint = 7,
    Training = 8,
    Internal = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChartcastScheme {
    Standard = 0,
    Delayed = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChartcastStrategy {
    Random = 0,
    Long = 1,
    Short = 2,
}

/// Test-split metrics of one strategy.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ChartcastMetrics {
    pub f1: f64,
    pub mcc: f64,
    pub balanced_acc: f64,
    /// Percent.
    pub precision_short: f64,
    /// Percent.
    pub precision_long: f64,
    pub pip_short: f64,
    pub pip_long: f64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

/// Opaque hourly OHLC series.
pub struct ChartcastSeries {
    inner: OhlcSeries,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> ChartcastStatus {
    match e {
        Error::Io { .. } => ChartcastStatus::Io,
        Error::Parse { .. } | Error::NoRows | Error::Json(_) => ChartcastStatus::Parse,
        Error::Validation(_) | Error::NoSamples | Error::ZeroStd(_) => ChartcastStatus::Validation,
        Error::Config(_) => ChartcastStatus::Config,
        Error::Checkpoint(_) | Error::UnsupportedEncoder(_) => ChartcastStatus::Checkpoint,
        Error::Divergence { .. } => ChartcastStatus::Training,
        Error::Stage { source, .. } => status_of(source),
        _ => ChartcastStatus::Internal,
    }
}

fn fail(status: ChartcastStatus, msg: impl Into<String>) -> ChartcastStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, mapping errors and panics to a status.
fn guard(f: impl FnOnce() -> Result<(), Error>) -> ChartcastStatus {
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(Ok(())) => ChartcastStatus::Ok,
        Ok(Err(e)) => fail(status_of(&e), e.to_string()),
        Err(_) => fail(ChartcastStatus::Internal, "internal panic"),
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, ChartcastStatus> {
    if p.is_null() {
        return Err(fail(ChartcastStatus::NullArgument, "null path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(ChartcastStatus::InvalidArgument, "path is not UTF-8"))
}

fn scheme_of(s: ChartcastScheme) -> LabelScheme {
    match s {
        ChartcastScheme::Standard => LabelScheme::Standard,
        ChartcastScheme::Delayed => LabelScheme::Delayed,
    }
}

/// Message of the last failed call on this thread, or NULL. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn chartcast_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn chartcast_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a `timestamp,open,high,low,close` CSV file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn chartcast_series_load_csv(path: *const c_char, out: *mut *mut ChartcastSeries) -> ChartcastStatus {
    if out.is_null() {
        return fail(ChartcastStatus::NullArgument, "null output pointer");
    }
    let path = match path_arg(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    guard(|| {
        let inner = ingest(&path, InputFormat::Csv)?;
        *out = Box::into_raw(Box::new(ChartcastSeries { inner }));
        Ok(())
    })
}

/// Seeded synthetic series of `bars` hours.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn chartcast_series_synthetic(
    seed: u64,
    bars: usize,
    volatility: f64,
    out: *mut *mut ChartcastSeries,
) -> ChartcastStatus {
    if out.is_null() {
        return fail(ChartcastStatus::NullArgument, "null output pointer");
    }
    if bars == 0 || !(volatility >= 0.0) {
        return fail(ChartcastStatus::InvalidArgument, "bars must be ≥ 1 and volatility ≥ 0");
    }
    guard(|| {
        let inner = generate_synthetic(&SyntheticConfig {
            seed,
            n_bars: bars,
            volatility,
        });
        *out = Box::into_raw(Box::new(ChartcastSeries { inner }));
        Ok(())
    })
}

/// Number of bars; 0 for NULL.
///
/// # Safety
/// `series` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn chartcast_series_len(series: *const ChartcastSeries) -> usize {
    series.as_ref().map_or(0, |s| s.inner.len())
}

/// # Safety
/// `series` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn chartcast_series_free(series: *mut ChartcastSeries) {
    if !series.is_null() {
        drop(Box::from_raw(series));
    }
}

/// Text record of bar `index`, written NUL-terminated into `buf`. `needed`
/// receives the size including the terminator; a too-small buffer yields
/// `INVALID_ARGUMENT` with `needed` set.
///
/// # Safety
/// `series` must be live; `buf` must hold `cap` bytes (or be NULL with
/// `cap` 0); `needed` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn chartcast_text_record(
    series: *const ChartcastSeries,
    index: usize,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> ChartcastStatus {
    let Some(s) = series.as_ref() else {
        return fail(ChartcastStatus::NullArgument, "null series");
    };
    let Some(bar) = s.inner.bars().get(index) else {
        return fail(ChartcastStatus::InvalidArgument, format!("index {index} out of range"));
    };
    let text = serialize_text(bar).text;
    let size = text.len() + 1;
    if !needed.is_null() {
        *needed = size;
    }
    if buf.is_null() || cap < size {
        return fail(ChartcastStatus::InvalidArgument, format!("buffer needs {size} bytes"));
    }
    ptr::copy_nonoverlapping(text.as_ptr(), buf.cast(), text.len());
    *buf.add(text.len()) = 0;
    ChartcastStatus::Ok
}

/// PNG chart of bars `[start, start + hours)`. Free the bytes with
/// `chartcast_bytes_free`.
///
/// # Safety
/// `series` must be live; `out_data` and `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn chartcast_render_png(
    series: *const ChartcastSeries,
    start: usize,
    hours: usize,
    out_data: *mut *mut u8,
    out_len: *mut usize,
) -> ChartcastStatus {
    let Some(s) = series.as_ref() else {
        return fail(ChartcastStatus::NullArgument, "null series");
    };
    if out_data.is_null() || out_len.is_null() {
        return fail(ChartcastStatus::NullArgument, "null output pointer");
    }
    if hours < 2 || start.checked_add(hours).is_none_or(|end| end > s.inner.len()) {
        return fail(ChartcastStatus::InvalidArgument, "window outside the series or shorter than 2 hours");
    }
    guard(|| {
        let cfg = RenderConfig {
            window_hours: hours,
            ..RenderConfig::default()
        };
        let png = render_chart(&s.inner.bars()[start..start + hours], &cfg)?.to_png()?;
        let boxed = png.into_boxed_slice();
        *out_len = boxed.len();
        *out_data = Box::into_raw(boxed).cast();
        Ok(())
    })
}

/// # Safety
/// `data`/`len` must come from one `chartcast_render_png` call.
#[no_mangle]
pub unsafe extern "C" fn chartcast_bytes_free(data: *mut u8, len: usize) {
    if !data.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(data, len)));
    }
}

/// Scores a baseline strategy on the test part of a 60/20/20 split.
///
/// # Safety
/// `series` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn chartcast_baseline_metrics(
    series: *const ChartcastSeries,
    scheme: ChartcastScheme,
    strategy: ChartcastStrategy,
    seed: u64,
    out: *mut ChartcastMetrics,
) -> ChartcastStatus {
    let Some(s) = series.as_ref() else {
        return fail(ChartcastStatus::NullArgument, "null series");
    };
    if out.is_null() {
        return fail(ChartcastStatus::NullArgument, "null output pointer");
    }
    guard(|| {
        let scheme = scheme_of(scheme);
        let strategy = match strategy {
            ChartcastStrategy::Random => Strategy::Random,
            ChartcastStrategy::Long => Strategy::Long,
            ChartcastStrategy::Short => Strategy::Short,
        };
        let test = split(&s.inner, &SplitSpec::default())?.test;
        let labels = label(&test, scheme);
        let r = evaluate(&strategy.decide(&labels, seed), &labels, &test, scheme)?;
        *out = ChartcastMetrics {
            f1: r.f1,
            mcc: r.mcc,
            balanced_acc: r.balanced_acc,
            precision_short: r.precision_short,
            precision_long: r.precision_long,
            pip_short: r.pip_short,
            pip_long: r.pip_long,
            tp: r.counts.tp,
            fp: r.counts.fp,
            tn: r.counts.tn,
            fn_: r.counts.fn_,
        };
        Ok(())
    })
}

/// Runs the full pipeline for a config file. On success `out_json`
/// receives the run summary as JSON; free it with `chartcast_string_free`.
///
/// # Safety
/// `config_path` must be a NUL-terminated string; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn chartcast_run_pipeline(config_path: *const c_char, out_json: *mut *mut c_char) -> ChartcastStatus {
    if out_json.is_null() {
        return fail(ChartcastStatus::NullArgument, "null output pointer");
    }
    let path = match path_arg(config_path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    guard(|| {
        let cfg = validate_config(&path)?;
        let summary = run_pipeline(&cfg)?;
        let json = serde_json::to_string(&summary)?;
        *out_json = CString::new(json).expect("JSON has no nul").into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn chartcast_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
