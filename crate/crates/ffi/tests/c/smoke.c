#include <stdio.h>
#include <string.h>
#include "chartcast.h"

int main(void) {
    ChartcastSeries *s = NULL;
    if (chartcast_series_synthetic(7, 500, 25.0, &s) != CHARTCAST_STATUS_OK) return 1;
    if (chartcast_series_len(s) != 500) return 2;
    char buf[128];
    size_t needed = 0;
    if (chartcast_text_record(s, 0, buf, sizeof buf, &needed) != CHARTCAST_STATUS_OK) return 3;
    if (strncmp(buf, "Date:", 5) != 0 || needed != strlen(buf) + 1) return 4;
    ChartcastMetrics lng, sht;
    if (chartcast_baseline_metrics(s, CHARTCAST_SCHEME_STANDARD, CHARTCAST_STRATEGY_LONG, 0, &lng) != CHARTCAST_STATUS_OK) return 5;
    if (chartcast_baseline_metrics(s, CHARTCAST_SCHEME_STANDARD, CHARTCAST_STRATEGY_SHORT, 0, &sht) != CHARTCAST_STATUS_OK) return 6;
    if (lng.pip_long != -sht.pip_short || lng.balanced_acc != 0.5) return 7;
    if (chartcast_series_load_csv("/nonexistent.csv", &s) != CHARTCAST_STATUS_IO) return 8;
    if (chartcast_last_error() == NULL) return 9;
    chartcast_series_free(s);
    printf("ok %s\n", chartcast_version());
    return 0;
}
