"""Hypergradient vs. central finite differences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..bilevel import BilevelProblem, UDConfig, hypergradient, stream, validation_objective
from ..data import Dataset, SplitSpec, inject_label_noise, split, synth_blobs
from ..errors import ContractViolation
from ..models import (
    FeatureLearningSpec,
    ReweightingSpec,
    feature_learning_losses,
    reweighting_losses,
    scalar_quadratic_losses,
)

MAX_ENTRIES = 200
TOLERANCE = {"scalar_quadratic": 1e-10, "reweighting": 1e-4, "feature_learning": 1e-4}

# extra stream id so the probe point does not collide with bilevel streams
PROBE = 99


@dataclass
class GradcheckReport:
    task: str
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_err: float
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_err <= self.tolerance

    def format(self):
        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"gradcheck {self.task}: {self.analytic.size} coordinates, "
            f"max rel err {self.max_rel_err:.3e} (tol {self.tolerance:.0e}) {verdict}"
        )


def relative_error(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.abs(a - b) / scale


def finite_difference(fn, lam, h):
    """Central differences of ``fn(lam)`` in every coordinate of the list ``lam``."""
    out = []
    for i, v in enumerate(lam):
        g = np.zeros(v.size)
        for j in range(v.size):
            plus = [x.copy() for x in lam]
            minus = [x.copy() for x in lam]
            plus[i].flat[j] += h
            minus[i].flat[j] -= h
            g[j] = (fn(plus) - fn(minus)) / (2.0 * h)
        out.append(g.reshape(v.shape))
    return out


def check(problem, cfg, lam, t=0, h=1e-5, floor=1e-8, task="custom", tolerance=1e-4):
    """Compare the tape hypergradient at ``lam`` with central differences."""
    lam = [np.asarray(v, dtype=np.float64) for v in lam]
    total = sum(v.size for v in lam)
    if total > MAX_ENTRIES:
        raise ContractViolation(f"gradcheck needs at most {MAX_ENTRIES} hyperparameter entries, got {total}")
    theta0 = problem.init_theta(cfg.seed)
    analytic, _ = hypergradient(problem, lam, cfg, theta0, t)
    numeric = finite_difference(lambda l: validation_objective(problem, l, cfg, theta0, t), lam, h)
    a = np.concatenate([g.ravel() for g in analytic])
    b = np.concatenate([g.ravel() for g in numeric])
    err = float(relative_error(a, b, floor).max()) if a.size else 0.0
    return GradcheckReport(task, a, b, err, tolerance)


def build(task, sizes=None, seed=0):
    """Problem, UD config, probe hyperparameter and step size for a named small task."""
    sizes = dict(sizes or {})
    K = int(sizes.pop("K", 3 if task == "scalar_quadratic" else 4))
    if task == "scalar_quadratic":
        lam0 = float(sizes.pop("lam", 2.0))
        eta = float(sizes.pop("eta", 0.5))
        _reject_extra(sizes)
        dummy = Dataset(np.zeros((1, 1)), np.zeros(1, dtype=np.int64), 1)
        problem = BilevelProblem(dummy, dummy, dummy, scalar_quadratic_losses(0.0, lam0))
        cfg = UDConfig(T=1, K=K, outer_mode="GD", inner_mode="GD", eta=eta, seed=seed)
        # the objective is quadratic in lam, so central differences are exact
        # and a wide step keeps rounding error out of the comparison
        return problem, cfg, problem.init_lam(seed), 1e-2

    n = int(sizes.pop("n", 8))
    m = int(sizes.pop("m", 4))
    hidden = int(sizes.pop("hidden", 8))
    input_dim = int(sizes.pop("input_dim", 5))
    classes = int(sizes.pop("num_classes", 3))
    feature_dim = int(sizes.pop("feature_dim", 4))
    _reject_extra(sizes)
    total = n + m + m
    full = synth_blobs(classes, input_dim, -(-total // classes), 2.0, seed)
    train, val, test = split(full, SplitSpec(n, m, m, seed=seed))
    cfg = UDConfig(T=1, K=K, outer_mode="GD", inner_mode="GD", eta=0.3, seed=seed)
    if task == "reweighting":
        train = inject_label_noise(train, 0.3, seed)
        losses = reweighting_losses(ReweightingSpec(input_dim, hidden, classes, n))
    elif task == "feature_learning":
        losses = feature_learning_losses(FeatureLearningSpec(input_dim, feature_dim, hidden, classes))
    else:
        raise ContractViolation(f"unknown task {task!r}")
    problem = BilevelProblem(train, val, test, losses)
    rng = stream(seed, PROBE)
    lam = [v + 0.5 * rng.standard_normal(v.shape) for v in problem.init_lam(seed)]
    return problem, cfg, lam, 1e-5


def _reject_extra(sizes):
    if sizes:
        raise ContractViolation(f"unknown gradcheck size field(s): {', '.join(sorted(sizes))}")


def gradcheck_task(task, sizes=None, seed=0):
    if task not in TOLERANCE:
        raise ContractViolation(f"unknown task {task!r}; choose from {sorted(TOLERANCE)}")
    problem, cfg, lam, h = build(task, sizes, seed)
    return check(problem, cfg, lam, h=h, task=task, tolerance=TOLERANCE[task])
