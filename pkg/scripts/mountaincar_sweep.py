"""PPO vs residual-variance PPO on the sparse mountain car, 6 seeds each.

Writes, under --out (default results/mountaincar):

    mse/ and avec/           one run directory per seed
    summary.json             final-return comparison, percent change, visitation coverage
    visitation_mse.csv       seed-averaged position x velocity histogram, one row per position bin
    visitation_avec.csv
    return_series_*.csv      mean/std episode-return series for plotting

Finished runs with an identical config are reused, so the script can be rerun
cheaply after an interruption.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
from pathlib import Path

import numpy as np

from avec import harness
from avec.config import RunConfig, load_config

LOSSES = ("mse", "avec")


def sweep_configs(base: RunConfig) -> dict[str, RunConfig]:
    return {loss: base.replace(**{"critic.loss": loss, "env.id": "mountaincar_sparse", "algo": "ppo"})
            for loss in LOSSES}


def run_study(out: Path, base: RunConfig, seeds: int = 6, workers: int = 1) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    dirs = {}
    for loss, cfg in sweep_configs(base).items():
        results = harness.sweep(cfg, range(seeds), workers, out / loss, resume=True)
        failed = [str(d) for code, d in results if code != harness.EXIT_OK]
        if failed:
            raise RuntimeError(f"runs failed: {failed}")
        dirs[loss] = [d for _, d in results]

    summary = harness.compare(dirs["mse"], dirs["avec"]).to_dict()
    visitation = {}
    for loss in LOSSES:
        v = harness.visitation_summary(dirs[loss])
        edges = np.linspace(*v["ranges"][0], v["bins"] + 1)
        with open(out / f"visitation_{loss}.csv", "w") as fh:
            fh.write("position_low,position_high," + ",".join(f"v{j}" for j in range(v["bins"])) + "\n")
            for i, row in enumerate(v["mean_histogram"]):
                fh.write(f"{edges[i]!r},{edges[i + 1]!r}," + ",".join(repr(x) for x in row) + "\n")
        visitation[loss] = {k: v[k] for k in ("seeds", "coverage", "coverage_mean", "max_position")}
        harness.emit_plot_data(dirs[loss], "ep_return_mean", out / f"return_series_{loss}.csv")
    base_cov, var_cov = visitation["mse"]["coverage_mean"], visitation["avec"]["coverage_mean"]
    summary["visitation"] = visitation
    summary["coverage_percent_change"] = 100.0 * (var_cov - base_cov) / base_cov if base_cov else math.nan
    summary["configs"] = {loss: str(dirs[loss][0] / harness.CONFIG_FILE) for loss in LOSSES}
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    return summary


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="results/mountaincar")
    p.add_argument("--config", help="base config file (defaults: desk-scale settings)")
    p.add_argument("--seeds", type=int, default=6)
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    base = load_config(args.config) if args.config else RunConfig()
    s = run_study(Path(args.out), base, args.seeds, args.workers)
    print(f"final return  PPO {s['baseline_mean']:.3f} +- {s['baseline_std']:.3f}   "
          f"AVEC-PPO {s['variant_mean']:.3f} +- {s['variant_std']:.3f}   change {s['percent_change']:.1f}%")
    v = s["visitation"]
    print(f"state coverage  PPO {v['mse']['coverage_mean']:.3f}   AVEC-PPO {v['avec']['coverage_mean']:.3f}   "
          f"change {s['coverage_percent_change']:.1f}%")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
