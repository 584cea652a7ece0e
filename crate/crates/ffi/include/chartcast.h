#ifndef CHARTCAST_H
#define CHARTCAST_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum ChartcastStatus {
  CHARTCAST_STATUS_OK = 0,
  CHARTCAST_STATUS_NULL_ARGUMENT = 1,
  CHARTCAST_STATUS_INVALID_ARGUMENT = 2,
  CHARTCAST_STATUS_IO = 3,
  CHARTCAST_STATUS_PARSE = 4,
  CHARTCAST_STATUS_VALIDATION = 5,
  CHARTCAST_STATUS_CONFIG = 6,
  CHARTCAST_STATUS_CHECKPOINT = 7,
  CHARTCAST_STATUS_TRAINING = 8,
  CHARTCAST_STATUS_INTERNAL = 9,
} ChartcastStatus;

typedef enum ChartcastScheme {
  CHARTCAST_SCHEME_STANDARD = 0,
  CHARTCAST_SCHEME_DELAYED = 1,
} ChartcastScheme;

typedef enum ChartcastStrategy {
  CHARTCAST_STRATEGY_RANDOM = 0,
  CHARTCAST_STRATEGY_LONG = 1,
  CHARTCAST_STRATEGY_SHORT = 2,
} ChartcastStrategy;

// Opaque hourly OHLC series.
typedef struct ChartcastSeries ChartcastSeries;

// Test-split metrics of one strategy.
typedef struct ChartcastMetrics {
  double f1;
  double mcc;
  double balanced_acc;
  // Percent.
  double precision_short;
  // Percent.
  double precision_long;
  double pip_short;
  double pip_long;
  uint64_t tp;
  uint64_t fp;
  uint64_t tn;
  uint64_t fn_;
} ChartcastMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Valid until
// the next failing call on the same thread.
const char *chartcast_last_error(void);

// Library version as a static string.
const char *chartcast_version(void);

// Loads a `timestamp,open,high,low,close` CSV file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum ChartcastStatus chartcast_series_load_csv(const char *path, struct ChartcastSeries **out);

// Seeded synthetic series of `bars` hours.
//
// # Safety
// `out` must be writable.
enum ChartcastStatus chartcast_series_synthetic(uint64_t seed,
                                                uintptr_t bars,
                                                double volatility,
                                                struct ChartcastSeries **out);

// Number of bars; 0 for NULL.
//
// # Safety
// `series` must be NULL or a live handle.
uintptr_t chartcast_series_len(const struct ChartcastSeries *series);

// # Safety
// `series` must be NULL or a handle not yet freed.
void chartcast_series_free(struct ChartcastSeries *series);

// Text record of bar `index`, written NUL-terminated into `buf`. `needed`
// receives the size including the terminator; a too-small buffer yields
// `INVALID_ARGUMENT` with `needed` set.
//
// # Safety
// `series` must be live; `buf` must hold `cap` bytes (or be NULL with
// `cap` 0); `needed` may be NULL.
enum ChartcastStatus chartcast_text_record(const struct ChartcastSeries *series,
                                           uintptr_t index,
                                           char *buf,
                                           uintptr_t cap,
                                           uintptr_t *needed);

// PNG chart of bars `[start, start + hours)`. Free the bytes with
// `chartcast_bytes_free`.
//
// # Safety
// `series` must be live; `out_data` and `out_len` must be writable.
enum ChartcastStatus chartcast_render_png(const struct ChartcastSeries *series,
                                          uintptr_t start,
                                          uintptr_t hours,
                                          uint8_t **out_data,
                                          uintptr_t *out_len);

// # Safety
// `data`/`len` must come from one `chartcast_render_png` call.
void chartcast_bytes_free(uint8_t *data, uintptr_t len);

// Scores a baseline strategy on the test part of a 60/20/20 split.
//
// # Safety
// `series` must be live; `out` must be writable.
enum ChartcastStatus chartcast_baseline_metrics(const struct ChartcastSeries *series,
                                                enum ChartcastScheme scheme,
                                                enum ChartcastStrategy strategy,
                                                uint64_t seed,
                                                struct ChartcastMetrics *out);

// Runs the full pipeline for a config file. On success `out_json`
// receives the run summary as JSON; free it with `chartcast_string_free`.
//
// # Safety
// `config_path` must be a NUL-terminated string; `out_json` writable.
enum ChartcastStatus chartcast_run_pipeline(const char *config_path, char **out_json);

// # Safety
// `s` must be NULL or come from this library.
void chartcast_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CHARTCAST_H */
