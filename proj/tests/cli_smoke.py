#!/usr/bin/env python3
"""End-to-end CLI run on a tiny config.

Usage: cli_smoke.py MUDMAN_BINARY SMOKE_CONFIG CHECK_ORDERING_SCRIPT WORKDIR
"""

import csv
import filecmp
import json
import os
import shutil
import subprocess
import sys

exe, config, checker, work = sys.argv[1:5]
shutil.rmtree(work, ignore_errors=True)
os.makedirs(work)
failures = []


def run(*args, expect=0):
    p = subprocess.run([exe, *args], capture_output=True, text=True)
    if p.returncode != expect:
        failures.append(f"{' '.join(args)}: exit {p.returncode}, expected {expect}\n{p.stdout}{p.stderr}")
    return p


def check(cond, msg):
    if not cond:
        failures.append(msg)


def path(*parts):
    return os.path.join(work, *parts)


# Pretraining is deterministic and the checkpoint carries the plateau.
run("pretrain", "--config", config, "--out", path("a"))
run("pretrain", "--config", config, "--out", path("b"))
ckpt = path("a", "base_3.ckpt")
check(filecmp.cmp(ckpt, path("b", "base_3.ckpt"), shallow=False), "pretrain is not bitwise reproducible")
meta = json.load(open(path("a", "base_3.json")))
check(meta["forget_plateau"] < meta["retain_plateau"] + 10, "plateau metadata missing")

# A zero unlearning rate is the control trial.
p = run("trial", "--config", config, "--checkpoint", ckpt, "--out", path("control"), "alpha_unlearning=0")
rec = json.loads(open(path("control", "trial.jsonl")).readline())
check(rec["method"] == "control", "alpha_unlearning=0 did not run the control")
check(rec["config"]["alpha_retaining"] == 0, "control still retains")
check(abs(rec["result"]["forget_loss_after_unlearn"] - meta["forget_plateau"]) < 1e-12,
      "control changed the model before the attack")
check("forget loss after relearning" in p.stdout, "trial summary not printed")
for key in ("config", "attack", "guard", "data"):
    check(key in rec, f"record lacks resolved {key}")
run("replay", "--records", path("control", "trial.jsonl"), "--checkpoint", ckpt)

# A destructive trial is rejected; only --strict turns that into an exit status.
harsh = ["masking=false", "alpha_unlearning=5", "pass_budget_unlearn=100"]
run("trial", "--config", config, "--checkpoint", ckpt, "--out", path("harsh"), *harsh)
rec = json.loads(open(path("harsh", "trial.jsonl")).readline())
check(rec["result"]["status"] != "valid", "harsh trial was not rejected")
run("trial", "--config", config, "--checkpoint", ckpt, "--out", path("harsh"), "--strict", *harsh, expect=3)
run("replay", "--records", path("harsh", "trial.jsonl"), "--checkpoint", ckpt)

# Ablation: six rows, variants, parseable by the ordering script, rebuildable by report.
abl = path("abl")
run("ablation", "--config", config, "--checkpoint-dir", path("a"), "--out", abl, "--variants")
rows = list(csv.DictReader(open(os.path.join(abl, "ablation_summary.csv"))))
check(len(rows) == 6, f"expected 6 ablation rows, got {len(rows)}")
check([r["method"] for r in rows][-1] == "no_unlearning", "control row missing")
check(len(list(csv.DictReader(open(os.path.join(abl, "variants_summary.csv"))))) == 3, "expected 3 variant rows")
p = subprocess.run([sys.executable, checker, os.path.join(abl, "ablation_summary.csv"),
                    os.path.join(abl, "variants_summary.csv")], capture_output=True, text=True)
check(p.returncode == 0 and "mudman > no_unlearning" in p.stdout, f"ordering script failed: {p.stdout}{p.stderr}")
p = run("report", "--config", config, "--records", os.path.join(abl, "ablation_trials.jsonl"),
        "--out", path("report.csv"))
check(filecmp.cmp(path("report.csv"), os.path.join(abl, "ablation_summary.csv"), shallow=False),
      "report does not reproduce the ablation summary")
run("replay", "--records", os.path.join(abl, "ablation_trials.jsonl"), "--checkpoint", ckpt, "--index", "3")
check(os.path.exists(os.path.join(abl, "config.resolved.ini")), "resolved config not written")

# Batched search: the result depends on the round size, not on --jobs.
common = ["search", "--config", config, "--checkpoint", ckpt, "--method", "variant.per_parameter",
          "search.round_size=4"]
run(*common, "--out", path("s1"), "--jobs", "1")
run(*common, "--out", path("s2"), "--jobs", "3")
check(filecmp.cmp(path("s1", "search_variant.per_parameter_summary.csv"),
                  path("s2", "search_variant.per_parameter_summary.csv"), shallow=False),
      "batched search depends on --jobs")

# Fail-closed config handling.
bad = path("bad.ini")
open(bad, "w").write("[unlearn]\nalpha_unlearnin = 1\n")
p = run("trial", "--config", bad, "--checkpoint", ckpt, expect=1)
check("unknown key" in p.stderr, "unknown config key not reported")
run("trial", "--config", config, "--checkpoint", ckpt, "no_such_key=1", expect=1)

if failures:
    print("\n".join(failures))
    sys.exit(1)
print("cli smoke: all checks passed")
