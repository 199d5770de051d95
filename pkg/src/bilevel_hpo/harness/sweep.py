"""Sweep execution: one run per (seed, K, mu, nu) cell, per-cell CSVs, aggregate CSV."""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from ..bilevel import cv_run, ud_run

HEADER = ["run_id", "algorithm", "seed", "t", "K", "mu", "nu", "val_loss", "test_loss"]
AGG_HEADER = ["algorithm", "K", "mu", "nu", "t", "n_seeds", "val_mean", "val_std", "test_mean", "test_std"]


def run_id(algorithm, seed, K, mu, nu):
    return f"{algorithm}_s{seed}_K{K}_mu{mu!r}_nu{nu!r}"


def ensure_writable(out):
    """Create ``out`` if needed and fail early if files cannot be written there."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".write-probe"
    with open(probe, "w") as fh:
        fh.write("")
    probe.unlink()
    return out


def run_cell(config, algorithm, seed, K, mu, nu):
    """Run one cell and return its CSV rows (CV rows are best-so-far)."""
    problem = config.problem(seed)
    if algorithm == "ud":
        trace = ud_run(problem, config.ud_config(seed, K, mu, nu))
        val, test = trace.val_loss, trace.test_loss
    else:
        trace = cv_run(problem, config.cv_config(seed, K, nu, problem))
        _, val, test = trace.best_so_far()
    rid = run_id(algorithm, seed, K, mu, nu)
    return [
        [rid, algorithm, seed, t, K, mu, nu, float(v), float(te)]
        for t, v, te in zip(trace.t, val, test)
    ]


def _fmt(value):
    return repr(value) if isinstance(value, float) else str(value)


def write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def aggregate(cell_rows):
    """Per-(algorithm, K, mu, nu, t) mean and sample std across seeds."""
    groups = {}
    for rows in cell_rows:
        for rid, alg, seed, t, K, mu, nu, val, test in rows:
            groups.setdefault((alg, K, mu, nu, t), []).append((val, test))
    out = []
    for key in sorted(groups):
        vals = np.array(groups[key])
        n = len(vals)
        std = vals.std(axis=0, ddof=1) if n > 1 else np.zeros(2)
        mean = vals.mean(axis=0)
        out.append([*key, n, float(mean[0]), float(std[0]), float(mean[1]), float(std[1])])
    return out


def _cell_job(args):
    config, algorithm, cell = args
    return run_cell(config, algorithm, *cell)


def run_sweep(config, algorithm, out=None, workers=None):
    """Run every cell of ``config`` for ``algorithm`` ("ud" or "cv") and write CSVs.

    Returns the list of written paths, aggregate last.
    """
    out = ensure_writable(out if out is not None else config.out)
    workers = config.workers if workers is None else workers
    cells = config.cells(algorithm)
    # validate every cell's settings before any compute starts
    for seed, K, mu, nu in cells:
        if algorithm == "ud":
            config.ud_config(seed, K, mu, nu)
        else:
            config.cv_config(seed, K, nu)
    jobs = [(config, algorithm, cell) for cell in cells]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_cell_job, jobs))
    else:
        results = [_cell_job(job) for job in jobs]

    paths = []
    for (seed, K, mu, nu), rows in zip(cells, results):
        path = out / f"{run_id(algorithm, seed, K, mu, nu)}.csv"
        write_rows(path, HEADER, rows)
        paths.append(path)
    agg = out / f"{algorithm}_aggregate.csv"
    write_rows(agg, AGG_HEADER, aggregate(results))
    paths.append(agg)
    return paths
