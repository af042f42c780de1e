"""Run directories, seed sweeps, run comparison and plot-data export.

A run directory holds::

    config.cfg          fully resolved config (parse with load_config)
    metrics.csv         '# avec-metrics v1' then one row per update
    episodes.csv        step, episode, return, length per finished episode
    checkpoints/        step_XXXXXXXX.json parameter files
    diagnostics/        step_XXXXXXXX.json diagnostics reports
    visitation.json     training-state histogram (envs with known state ranges)
    status.json         {"status": "ok" | "failed", ...}
"""
from __future__ import annotations

import json
import logging
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from avec.autodiff import params_digest
from avec.config import ConfigError, RunConfig, dump_config, load_config
from avec.diagnostics import percent_variation
from avec.envs import make_env
from avec.train import DIAG_FIELDS, build_agent, read_csv, restore_checkpoint, run_diagnostics, train

log = logging.getLogger(__name__)

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2
CONFIG_FILE = "config.cfg"
FINAL_WINDOW = 100


def run_name(cfg: RunConfig) -> str:
    loss = cfg.critic.loss if cfg.critic.loss != "alpha" else f"alpha{cfg.critic.alpha:g}"
    return f"{cfg.env.id}_{cfg.algo}_{loss}{'_baseline' if cfg.baseline else ''}_s{cfg.seed}"


def run(cfg: RunConfig, run_dir: Path | str | None = None) -> tuple[int, Path | None]:
    """Train one run into ``run_dir`` (default out_dir/run_name); returns (exit code, directory)."""
    try:
        cfg.validate()
    except ConfigError as e:
        log.error("invalid config: %s", e)
        return EXIT_CONFIG, None
    run_dir = Path(run_dir) if run_dir is not None else Path(cfg.out_dir) / run_name(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / CONFIG_FILE).write_text(dump_config(cfg))
    status = run_dir / "status.json"
    status.write_text(json.dumps({"status": "running"}))
    try:
        train(cfg, run_dir)
    except Exception as e:  # recorded, partial logs kept
        status.write_text(json.dumps({"status": "failed", "error": repr(e), "traceback": traceback.format_exc(),
                                      "dump": getattr(e, "dump", None)}))
        log.error("run %s failed: %s", run_dir, e)
        return EXIT_FAILED, run_dir
    status.write_text(json.dumps({"status": "ok"}))
    return EXIT_OK, run_dir


def _run_worker(args) -> tuple[int, str]:
    cfg, run_dir = args
    code, d = run(cfg, run_dir)
    return code, str(d)


def is_complete(cfg: RunConfig, run_dir: Path) -> bool:
    """True when ``run_dir`` holds a finished run of exactly ``cfg``."""
    try:
        status = json.loads((run_dir / "status.json").read_text())["status"]
        return status == "ok" and (run_dir / CONFIG_FILE).read_text() == dump_config(cfg)
    except (OSError, ValueError, KeyError):
        return False


def sweep(cfg: RunConfig, seeds: Sequence[int] = range(6), workers: int = 1,
          out_dir: Path | str | None = None, resume: bool = False) -> list[tuple[int, Path]]:
    """One run per seed in sibling directories; up to ``workers`` processes at once.

    With ``resume`` a seed whose directory already holds a finished run of the
    same resolved config is not rerun.
    """
    cfg.validate()
    root = Path(out_dir if out_dir is not None else cfg.out_dir)
    jobs, done = [], {}
    for s in seeds:
        c = cfg.replace(seed=int(s))
        d = root / run_name(c)
        if resume and is_complete(c, d):
            done[int(s)] = (EXIT_OK, d)
        else:
            jobs.append((c, d))
    if workers <= 1:
        results = [_run_worker(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_worker, jobs))
    fresh = iter((code, Path(d)) for code, d in results)
    return [done[int(s)] if int(s) in done else next(fresh) for s in seeds]


def load_run_config(run_dir) -> RunConfig:
    return load_config(Path(run_dir) / CONFIG_FILE)


def final_return(run_dir, window: int = FINAL_WINDOW) -> float:
    """Mean return of the last ``window`` finished episodes (0 episodes is an error)."""
    rows = read_csv(Path(run_dir) / "episodes.csv")
    if not rows:
        raise ValueError(f"{run_dir}: no finished episodes")
    return float(np.mean([float(r["return"]) for r in rows[-window:]]))


@dataclass
class ComparisonSummary:
    env: str
    algo: str
    baseline_mean: float
    baseline_std: float
    variant_mean: float
    variant_std: float
    percent_change: float
    n_baseline: int
    n_variant: int
    single_seed_warning: bool
    baseline_seeds: list
    variant_seeds: list

    def to_dict(self) -> dict:
        return asdict(self)


def _seed_stats(values: list[float]) -> tuple[float, float]:
    arr = np.array(values)
    return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0


def compare(baseline_dirs: Sequence, variant_dirs: Sequence, window: int = FINAL_WINDOW) -> ComparisonSummary:
    """Final-window return statistics over seeds and percent change of the variant.

    Runs are ordered by seed before aggregation so the summary does not depend
    on argument order. ``percent_change`` is NaN when the baseline mean is 0.
    """
    if not baseline_dirs or not variant_dirs:
        raise ValueError("need at least one run per side")

    def side(dirs):
        runs = sorted(((load_run_config(d), d) for d in dirs), key=lambda cd: (cd[0].seed, str(cd[1])))
        return runs, [final_return(d, window) for _, d in runs]

    base, base_ret = side(baseline_dirs)
    var, var_ret = side(variant_dirs)
    keys = {(c.env.id, c.algo) for c, _ in base + var}
    if len(keys) != 1:
        raise ValueError(f"mismatched env/algo across runs: {sorted(keys)}")
    env_id, algo = keys.pop()
    bm, bs = _seed_stats(base_ret)
    vm, vs = _seed_stats(var_ret)
    try:
        pct = percent_variation(vm, bm)
    except ZeroDivisionError:
        pct = math.nan
    return ComparisonSummary(env_id, algo, bm, bs, vm, vs, pct, len(base), len(var),
                             len(base) < 2 or len(var) < 2,
                             [c.seed for c, _ in base], [c.seed for c, _ in var])


def available_quantities(run_dir) -> list[str]:
    rows = read_csv(Path(run_dir) / "metrics.csv")
    header = _metrics_header(run_dir)
    present = [k for k in header if any(r.get(k) not in (None, "") for r in rows)]
    return [k for k in present if k != "step"]


def _metrics_header(run_dir) -> list[str]:
    with open(Path(run_dir) / "metrics.csv") as fh:
        for line in fh:
            if not line.startswith("#"):
                return line.strip().split(",")
    return []


def emit_plot_data(run_dirs: Sequence, quantity: str, out_path) -> tuple[Path, Path]:
    """Write long-format (step, seed, value) CSV to ``out_path`` and a mean/std series beside it.

    The series file has columns step, mean, std, n with the sample (n-1) std,
    0 where only one run contributes.
    """
    if not run_dirs:
        raise ValueError("no run directories given")
    avail = sorted(set().union(*(set(_metrics_header(d)) - {"step"} for d in run_dirs)))
    if not quantity or quantity not in avail:
        raise KeyError(f"unknown quantity {quantity!r}; available: {', '.join(avail)}")
    long_rows = []
    for d in run_dirs:
        seed = load_run_config(d).seed
        for r in read_csv(Path(d) / "metrics.csv"):
            if r.get(quantity) not in (None, ""):
                long_rows.append((int(r["step"]), seed, float(r[quantity])))
    long_rows.sort(key=lambda x: (x[0], x[1]))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w") as fh:
        fh.write("step,seed,value\n")
        for step, seed, v in long_rows:
            fh.write(f"{step},{seed},{v!r}\n")
    series_path = out_path.with_name(out_path.stem + "_series.csv")
    by_step: dict[int, list[float]] = {}
    for step, _, v in long_rows:
        by_step.setdefault(step, []).append(v)
    with open(series_path, "w") as fh:
        fh.write("step,mean,std,n\n")
        for step in sorted(by_step):
            m, s = _seed_stats(by_step[step])
            fh.write(f"{step},{m!r},{s!r},{len(by_step[step])}\n")
    return out_path, series_path


def visitation_summary(run_dirs: Sequence) -> dict:
    """Seed-averaged state-visitation histogram plus per-seed coverage.

    Coverage is the fraction of histogram cells visited at least once;
    ``max_position`` is the upper edge of the right-most visited cell along
    the first state dimension.
    """
    docs = []
    for d in run_dirs:
        path = Path(d) / "visitation.json"
        if not path.exists():
            raise FileNotFoundError(f"{path}: run has no visitation histogram")
        docs.append((load_run_config(d).seed, json.loads(path.read_text())))
    docs.sort(key=lambda sd: sd[0])
    hists = [np.array(doc["histogram"]) for _, doc in docs]
    first = docs[0][1]
    lo, hi = first["ranges"][0]
    edges = np.linspace(lo, hi, first["bins"] + 1)
    coverage, max_pos = {}, {}
    for (seed, _), h in zip(docs, hists):
        coverage[seed] = float(np.mean(h > 0))
        cols = np.flatnonzero(h.reshape(h.shape[0], -1).sum(axis=1) > 0)
        max_pos[seed] = float(edges[cols[-1] + 1]) if cols.size else float("nan")
    return {
        "env": first["env"], "bins": first["bins"], "ranges": first["ranges"],
        "seeds": [s for s, _ in docs],
        "mean_histogram": np.mean(hists, axis=0).tolist(),
        "coverage": coverage, "coverage_mean": float(np.mean(list(coverage.values()))),
        "max_position": max_pos,
    }


def diagnose_run(run_dir, write: bool = True) -> list[dict]:
    """Recompute diagnostics at every recorded checkpoint of a run.

    Each result carries the parameter digests before and after, which must agree.
    """
    run_dir = Path(run_dir)
    cfg = load_run_config(run_dir)
    env = make_env(cfg.env.id, cfg.env.horizon)
    out = []
    for ck in sorted((run_dir / "checkpoints").glob("step_*.json")):
        agent = build_agent(cfg, env, np.random.default_rng(0))
        extra, empirical = restore_checkpoint(ck, agent)
        if empirical is None:
            continue
        params = agent.parameters()
        before = params_digest(params)
        report = run_diagnostics(cfg, agent, env, int(extra["step"]), empirical, extra.get("obs_norm"))
        after = params_digest(params)
        rec = {**report.to_dict(), "digest_before": before, "digest_after": after}
        out.append(rec)
        if write:
            (run_dir / "diagnostics").mkdir(exist_ok=True)
            (run_dir / "diagnostics" / f"rediagnose_{ck.stem}.json").write_text(json.dumps(rec, indent=1))
    return out


__all__ = ["run", "sweep", "compare", "visitation_summary", "is_complete", "emit_plot_data", "diagnose_run", "ComparisonSummary", "final_return",
           "available_quantities", "run_name", "DIAG_FIELDS", "EXIT_OK", "EXIT_FAILED", "EXIT_CONFIG"]
