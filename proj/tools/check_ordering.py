#!/usr/bin/env python3
"""Ordering checks on summary CSVs written by `mudman ablation`.

Usage: check_ordering.py SUMMARY.csv [SUMMARY.csv ...] [--strict]

Reads rows of (base_seed, method, mean, ...) and prints one PASS/FAIL line per
ordering that the files contain data for. Exit status is 2 on malformed input,
1 with --strict if any ordering fails, 0 otherwise.
"""

import argparse
import csv
import math
import sys
from collections import defaultdict

COLUMNS = ["base_seed", "method", "mean", "standard_error", "n_valid", "n_window", "n_trials", "failed", "saturation"]


def read_rows(paths):
    means = defaultdict(dict)  # method -> seed -> mean
    for path in paths:
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames != COLUMNS:
                raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
            for row in reader:
                mean = float(row["mean"])
                means[row["method"]][int(row["base_seed"])] = mean
    return means


def pooled(values):
    vals = [v for v in values if not math.isnan(v)]
    return sum(vals) / len(vals) if vals else math.nan


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("summaries", nargs="+")
    ap.add_argument("--strict", action="store_true")
    args = ap.parse_args()
    try:
        means = read_rows(args.summaries)
    except (OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2

    results = []

    def per_seed(a, b, op, label, need):
        if a not in means or b not in means:
            return
        seeds = sorted(set(means[a]) & set(means[b]))
        hits = sum(op(means[a][s], means[b][s]) for s in seeds)
        ok = bool(seeds) and hits >= need(len(seeds))
        results.append((ok, f"{label}: {hits}/{len(seeds)} seeds"))

    def pooled_order(chain, label):
        if any(m not in means for m in chain):
            return
        vals = [pooled(means[m].values()) for m in chain]
        ok = all(x >= y for x, y in zip(vals, vals[1:])) and vals[-2] > vals[-1]
        shown = " >= ".join(f"{m} {v:.4f}" for m, v in zip(chain, vals))
        results.append((ok, f"{label}: {shown}"))

    per_seed("mudman", "no_unlearning", lambda x, y: x > y, "mudman > no_unlearning", lambda n: n)
    per_seed("mudman", "tar_adapted", lambda x, y: x >= y, "mudman >= tar_adapted", lambda n: math.ceil(0.8 * n))
    pooled_order(["mudman", "no_masking"], "pooled mudman > no_masking")
    pooled_order(["variant.global_pre_mask", "variant.per_parameter", "variant.none"], "pooled variant order")

    for ok, msg in results:
        print(("PASS " if ok else "FAIL ") + msg)
    if not results:
        print("no orderings found in input")
    return 1 if args.strict and not all(ok for ok, _ in results) else 0


if __name__ == "__main__":
    sys.exit(main())
