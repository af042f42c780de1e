"""Critic-quality diagnostics for MSE vs residual-variance critics, per checkpoint.

Runs (or reuses) one sweep per critic loss with diagnostics enabled, then
averages each checkpoint's report over seeds and writes:

    diagnostics_table.csv    step, quantity, mse mean/std, avec mean/std, % variation
    summary.json             the same table as JSON plus the run directories
    <quantity>_<loss>.csv    long-format plot data (step, seed, value)

Quantities: distance to empirical targets, distance to Monte-Carlo true
targets (raw and corrected), bias^2, variance and gradient cosine similarity.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
from pathlib import Path

import numpy as np

from avec import harness
from avec.config import RunConfig, load_config, parse_override
from avec.diagnostics import percent_variation

LOSSES = ("mse", "avec")
QUANTITIES = ("empirical_distance", "true_distance", "true_distance_corrected", "bias2", "variance", "cosine")


def _reports(run_dir: Path) -> dict[int, dict]:
    out = {}
    for p in sorted((run_dir / "diagnostics").glob("step_*.json")):
        rep = json.loads(p.read_text())
        out[rep["step"]] = rep
    return out


def _pct(a: float, b: float) -> float:
    try:
        return percent_variation(a, b)
    except ZeroDivisionError:
        return math.nan


def run_protocol(out: Path, base: RunConfig, seeds: int = 3, workers: int = 1) -> list[dict]:
    out.mkdir(parents=True, exist_ok=True)
    dirs = {}
    for loss in LOSSES:
        cfg = base.replace(**{"critic.loss": loss, "diag.enabled": True})
        results = harness.sweep(cfg, range(seeds), workers, out / loss, resume=True)
        if any(code != harness.EXIT_OK for code, _ in results):
            raise RuntimeError(f"{loss}: some runs failed")
        dirs[loss] = [d for _, d in results]

    reports = {loss: [_reports(d) for d in dirs[loss]] for loss in LOSSES}
    steps = sorted(set.intersection(*(set(r) for loss in LOSSES for r in reports[loss])))
    table = []
    for step in steps:
        for q in QUANTITIES:
            row = {"step": step, "quantity": q}
            for loss in LOSSES:
                vals = np.array([r[step][q] for r in reports[loss]])
                row[f"{loss}_mean"] = float(vals.mean())
                row[f"{loss}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            row["percent_variation"] = _pct(row["avec_mean"], row["mse_mean"])
            table.append(row)

    cols = ["step", "quantity", "mse_mean", "mse_std", "avec_mean", "avec_std", "percent_variation"]
    with open(out / "diagnostics_table.csv", "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in table:
            fh.write(",".join(str(row[c]) if isinstance(row[c], (str, int)) else repr(row[c]) for c in cols) + "\n")
    for loss in LOSSES:
        for q in QUANTITIES:
            harness.emit_plot_data(dirs[loss], q, out / f"{q}_{loss}.csv")
    (out / "summary.json").write_text(json.dumps(
        {"table": table, "runs": {k: [str(d) for d in v] for k, v in dirs.items()}}, indent=1))
    return table


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="results/diagnostics")
    p.add_argument("--config", help="base config file")
    p.add_argument("--env", default="cartpole_swingup")
    p.add_argument("--algo", default="ppo", choices=("ppo", "sac"))
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    base = load_config(args.config) if args.config else RunConfig()
    base = base.replace(**{"env.id": args.env, "algo": args.algo, **dict(parse_override(s) for s in args.set)})
    table = run_protocol(Path(args.out), base, args.seeds, args.workers)
    for row in table:
        print(f"step {row['step']:>8}  {row['quantity']:<24} mse {row['mse_mean']:.4g}  avec {row['avec_mean']:.4g}"
              f"  ({row['percent_variation']:+.1f}%)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
