/*
 * Host-side certification harness for an emitted flow-classifier model.
 *
 * Reads a test-vector file (one "ROWS COLS" declaration line, then rows of
 * 15 encoded features, reference p0, reference p1, reference class; all
 * floats are C99 hex literals), calls sl_predict on every row, and writes
 * a CSV report with per-row deviations plus a summary line:
 *
 *     summary,<rows>,<class mismatches>,<max |dp|>,<seconds>
 *
 * Exit codes: 0 all rows match within tolerance, 1 equivalence failure,
 * 2 usage or input error.
 *
 * Memory discipline: every buffer is static; nothing on the heap. The
 * prediction loop runs between the parse and report phases and touches no
 * I/O, so its timing is pure compute.
 */

#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <math.h>
#include <time.h>

#include "super_learner.h"

#define MAX_ROWS 16384
#define N_COLS (SL_NUM_FEATURES + 3)
#define DEFAULT_TOLERANCE 1e-12

static double g_features[MAX_ROWS][SL_NUM_FEATURES];
static double g_ref_proba[MAX_ROWS][2];
static int g_ref_class[MAX_ROWS];
static double g_dp[MAX_ROWS][2];
static int g_out_class[MAX_ROWS];
static char g_line[8192];

static int parse_row(const char *line, double *out, int want)
{
    const char *p = line;
    char *end;
    int i;
    for (i = 0; i < want; i++) {
        out[i] = strtod(p, &end);
        if (end == p) {
            return -1;
        }
        p = end;
        if (*p == ',') {
            p++;
        }
    }
    return 0;
}

int main(int argc, char **argv)
{
    FILE *in;
    FILE *out;
    double tolerance = DEFAULT_TOLERANCE;
    double row_buf[N_COLS];
    double max_dp = 0.0;
    long mismatches = 0;
    int rows = 0;
    int cols = 0;
    int r;
    clock_t t0, t1;

    if (argc < 3 || argc > 4) {
        fprintf(stderr, "usage: %s vectors.csv report.csv [tolerance]\n", argv[0]);
        return 2;
    }
    if (argc == 4) {
        tolerance = strtod(argv[3], NULL);
        if (tolerance <= 0.0) {
            fprintf(stderr, "tolerance must be positive: %s\n", argv[3]);
            return 2;
        }
    }

    in = fopen(argv[1], "r");
    if (in == NULL) {
        fprintf(stderr, "cannot open vectors file: %s\n", argv[1]);
        return 2;
    }
    if (fgets(g_line, sizeof g_line, in) == NULL
        || sscanf(g_line, "%d %d", &rows, &cols) != 2) {
        fprintf(stderr, "vectors file has no 'ROWS COLS' declaration line\n");
        fclose(in);
        return 2;
    }
    if (cols != N_COLS) {
        fprintf(stderr, "expected %d columns, vectors file declares %d\n", N_COLS, cols);
        fclose(in);
        return 2;
    }
    if (rows < 0 || rows > MAX_ROWS) {
        fprintf(stderr, "row count %d outside [0, %d]\n", rows, MAX_ROWS);
        fclose(in);
        return 2;
    }
    for (r = 0; r < rows; r++) {
        if (fgets(g_line, sizeof g_line, in) == NULL
            || parse_row(g_line, row_buf, N_COLS) != 0) {
            fprintf(stderr, "malformed vector row %d\n", r);
            fclose(in);
            return 2;
        }
        memcpy(g_features[r], row_buf, sizeof g_features[r]);
        g_ref_proba[r][0] = row_buf[SL_NUM_FEATURES];
        g_ref_proba[r][1] = row_buf[SL_NUM_FEATURES + 1];
        g_ref_class[r] = (int)row_buf[SL_NUM_FEATURES + 2];
    }
    fclose(in);

    /* prediction phase: compute only, no I/O, no allocation */
    t0 = clock();
    for (r = 0; r < rows; r++) {
        double proba[2];
        g_out_class[r] = sl_predict(g_features[r], proba);
        g_dp[r][0] = fabs(proba[0] - g_ref_proba[r][0]);
        g_dp[r][1] = fabs(proba[1] - g_ref_proba[r][1]);
    }
    t1 = clock();

    out = fopen(argv[2], "w");
    if (out == NULL) {
        fprintf(stderr, "cannot open report file: %s\n", argv[2]);
        return 2;
    }
    fprintf(out, "row,dp0,dp1,class_ref,class_out,match\n");
    for (r = 0; r < rows; r++) {
        int match = g_out_class[r] == g_ref_class[r];
        if (!match) {
            mismatches++;
        }
        if (g_dp[r][0] > max_dp) {
            max_dp = g_dp[r][0];
        }
        if (g_dp[r][1] > max_dp) {
            max_dp = g_dp[r][1];
        }
        fprintf(out, "%d,%.17g,%.17g,%d,%d,%d\n", r, g_dp[r][0], g_dp[r][1],
                g_ref_class[r], g_out_class[r], match);
    }
    fprintf(out, "summary,%d,%ld,%.17g,%.6f\n", rows, mismatches, max_dp,
            (double)(t1 - t0) / CLOCKS_PER_SEC);
    fclose(out);

    printf("rows=%d mismatches=%ld max_dp=%.3e tolerance=%.1e\n",
           rows, mismatches, max_dp, tolerance);
    if (mismatches > 0 || max_dp > tolerance) {
        return 1;
    }
    return 0;
}
