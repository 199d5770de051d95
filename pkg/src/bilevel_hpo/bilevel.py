"""Unrolled differentiation (UD) and cross-validation (CV) for bilevel HO.

Random streams are keyed by ``(seed, stream, step)`` so that, for example,
the inner mini-batches at outer step ``t`` are the same whether or not a
hypergradient is requested, and CV candidate ``t`` does not depend on how
many candidates are drawn in total.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation, NumericError
from .models import Batch

# stream ids for np.random.default_rng([seed, stream, step])
THETA_INIT, INNER, OUTER, CANDIDATE, LAM_INIT = 0, 1, 2, 3, 4


def stream(seed, kind, step=0):
    return np.random.default_rng([int(seed), kind, int(step)])


@dataclass(frozen=True)
class BilevelProblem:
    train: object
    val: object
    test: object
    losses: object

    def __post_init__(self):
        for name in ("train", "val", "test"):
            if len(getattr(self, name)) == 0:
                raise ContractViolation(f"{name} set is empty")

    def init_theta(self, seed):
        return [np.asarray(v, dtype=np.float64) for v in self.losses.init_theta(stream(seed, THETA_INIT))]

    def init_lam(self, seed):
        return [np.asarray(v, dtype=np.float64) for v in self.losses.init_lam(stream(seed, LAM_INIT))]


def _check_common(cfg, problem):
    if cfg.K < 0:
        raise ContractViolation(f"K must be >= 0, got {cfg.K}")
    if cfg.eta <= 0:
        raise ContractViolation(f"inner learning rate must be > 0, got {cfg.eta}")
    if cfg.nu < 0:
        raise ContractViolation(f"nu must be >= 0, got {cfg.nu}")
    if cfg.inner_mode not in ("GD", "SGD"):
        raise ContractViolation(f"inner_mode must be GD or SGD, got {cfg.inner_mode!r}")
    if cfg.inner_batch < 1:
        raise ContractViolation("inner_batch must be positive")
    if problem is not None and cfg.inner_mode == "SGD" and cfg.inner_batch > len(problem.train):
        raise ContractViolation(
            f"inner_batch {cfg.inner_batch} exceeds training set size {len(problem.train)}"
        )


@dataclass(frozen=True)
class UDConfig:
    """Settings for :func:`ud_run`.

    With ``schedule="inverse"`` the outer rate at step t is ``alpha / t``,
    i.e. ``alpha`` plays the role of the constant c.
    """

    T: int = 100
    K: int = 10
    outer_mode: str = "SGD"
    inner_mode: str = "SGD"
    alpha: float = 0.1
    schedule: str = "constant"
    eta: float = 0.1
    mu: float = 0.0
    nu: float = 0.0
    outer_batch: int = 50
    inner_batch: int = 50
    seed: int = 0

    def alpha_at(self, t):
        """Outer learning rate of update number ``t`` (1-based)."""
        if self.schedule == "inverse":
            return self.alpha / t
        return self.alpha

    def validate(self, problem=None):
        _check_common(self, problem)
        if self.T < 0:
            raise ContractViolation(f"T must be >= 0, got {self.T}")
        if self.alpha < 0:
            raise ContractViolation(f"alpha must be >= 0, got {self.alpha}")
        if self.mu < 0:
            raise ContractViolation(f"mu must be >= 0, got {self.mu}")
        if self.outer_mode not in ("GD", "SGD"):
            raise ContractViolation(f"outer_mode must be GD or SGD, got {self.outer_mode!r}")
        if self.schedule not in ("constant", "inverse"):
            raise ContractViolation(f"schedule must be constant or inverse, got {self.schedule!r}")
        if self.outer_batch < 1:
            raise ContractViolation("outer_batch must be positive")
        if problem is not None and self.outer_mode == "SGD" and self.outer_batch > len(problem.val):
            raise ContractViolation(
                f"outer_batch {self.outer_batch} exceeds validation set size {len(problem.val)}"
            )
        return self


@dataclass(frozen=True)
class CVConfig:
    """Settings for :func:`cv_run` (random search).

    ``sampler="gaussian"`` draws ``lam0 + std * N(0, 1)``;
    ``sampler="uniform_box"`` draws each entry from ``U(lo, hi)``.
    """

    T: int = 100
    K: int = 10
    inner_mode: str = "SGD"
    eta: float = 0.1
    nu: float = 0.0
    inner_batch: int = 50
    seed: int = 0
    sampler: str = "gaussian"
    std: float = 1.0
    lo: float = -1.0
    hi: float = 1.0

    def validate(self, problem=None):
        _check_common(self, problem)
        if self.T < 1:
            raise ContractViolation(f"CV needs T >= 1, got {self.T}")
        if self.sampler == "uniform_box":
            if not np.all(np.asarray(self.lo) < np.asarray(self.hi)):
                raise ContractViolation(f"box needs lo < hi, got {self.lo} and {self.hi}")
        elif self.sampler == "gaussian":
            if self.std < 0:
                raise ContractViolation("gaussian sampler std must be >= 0")
        else:
            raise ContractViolation(f"unknown sampler {self.sampler!r}")
        return self


@dataclass
class RunTrace:
    """Per-step metrics of one run.

    UD rows are t = 0..T (row 0 is the initial hyperparameter).  CV rows are
    candidates t = 1..T with their own losses; :meth:`best_so_far` gives the
    prefix-argmin view.
    """

    algorithm: str
    t: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    test_loss: list = field(default_factory=list)
    lam: Optional[list] = None
    theta: Optional[list] = None
    selected: Optional[int] = None
    snapshots: Optional[list] = None

    def add(self, t, val, test):
        self.t.append(int(t))
        self.val_loss.append(float(val))
        self.test_loss.append(float(test))

    def best_so_far(self):
        """Index, validation and test loss of the prefix argmin at each row."""
        idx, val, test = [], [], []
        best = 0
        for i, v in enumerate(self.val_loss):
            if v < self.val_loss[best]:
                best = i
            idx.append(best)
            val.append(self.val_loss[best])
            test.append(self.test_loss[best])
        return np.array(idx), np.array(val), np.array(test)


# ------------------------------------------------------------------ inner


def _inner_indices(cfg, n, rng):
    if cfg.inner_mode == "GD":
        return np.arange(n)
    return np.sort(rng.choice(n, size=cfg.inner_batch, replace=False))


def inner_unroll(problem, lam, cfg, theta0, rng):
    """Run K inner (S)GD steps from ``theta0`` and return theta_K.

    If ``lam`` is a list of Vars the whole unrolled trajectory is recorded on
    their tape so theta_K is differentiable in ``lam``; with plain arrays the
    same arithmetic runs without keeping a graph.  Update rule:
    ``theta <- (1 - eta * nu) theta - eta * grad_theta(inner batch loss)``.
    """
    loss_fn = problem.losses.inner_loss
    train = problem.train
    decay = 1.0 - cfg.eta * cfg.nu
    taped = any(isinstance(v, ad.Var) for v in lam)

    if taped:
        tape = lam[0].tape
        theta = [tape.leaf(v) for v in theta0]
    else:
        theta = [np.array(v, dtype=np.float64) for v in theta0]

    full = Batch.from_dataset(train) if cfg.inner_mode == "GD" else None
    for k in range(cfg.K):
        batch = full if full is not None else Batch.from_dataset(train, _inner_indices(cfg, len(train), rng))
        try:
            if taped:
                loss = loss_fn(lam, theta, batch)
                grads = ad.gradient(loss, theta, create_graph=True)
            else:
                step_tape = ad.Tape()
                leaves = [step_tape.leaf(v) for v in theta]
                loss = loss_fn(lam, leaves, batch)
                grads = ad.gradient(loss, leaves)
            new = []
            for th, g in zip(theta, grads):
                kept = ad.scale(th, decay) if cfg.nu else th
                new.append(ad.sub(kept, ad.scale(g, cfg.eta)))
            theta = new
        except NumericError as err:
            raise err.located(k=k) from None
        if not taped:
            for th in theta:
                if not np.isfinite(th).all():
                    raise NumericError("non-finite inner iterate", k=k)
    return theta


# ------------------------------------------------------------------ outer


def _values(xs):
    return [np.array(ad.value_of(x), dtype=np.float64) for x in xs]


def evaluate(problem, lam, theta, dataset):
    """Full-set outer loss of (lam, theta) on ``dataset`` (no sampling)."""
    loss = problem.losses.outer_loss(_values(lam), _values(theta), Batch.from_dataset(dataset))
    return float(loss)


def _outer_indices(problem, cfg, t):
    m = len(problem.val)
    if cfg.outer_mode == "GD":
        return np.arange(m)
    # with replacement, one batch per outer step
    return stream(cfg.seed, OUTER, t).integers(0, m, size=cfg.outer_batch)


def validation_objective(problem, lam, cfg, theta0, t):
    """The scalar that :func:`hypergradient` differentiates, evaluated without a tape.

    Uses the same inner and outer mini-batches as step ``t``, so finite
    differences of this function check the hypergradient exactly.
    """
    lam = _values(lam)
    theta_k = inner_unroll(problem, lam, cfg, theta0, stream(cfg.seed, INNER, t))
    batch = Batch.from_dataset(problem.val, _outer_indices(problem, cfg, t))
    return float(problem.losses.outer_loss(lam, theta_k, batch))


def hypergradient(problem, lam, cfg, theta0, t):
    """Gradient of the (mini-batch) validation loss through the unrolled inner loop.

    Returns ``(grads, theta_K)`` with plain arrays.
    """
    tape = ad.Tape()
    lam_vars = [tape.leaf(v) for v in lam]
    try:
        theta_k = inner_unroll(problem, lam_vars, cfg, theta0, stream(cfg.seed, INNER, t))
        batch = Batch.from_dataset(problem.val, _outer_indices(problem, cfg, t))
        loss = problem.losses.outer_loss(lam_vars, theta_k, batch)
        grads = ad.gradient(loss, lam_vars)
    except NumericError as err:
        raise err.located(t=t) from None
    for g in grads:
        if not np.isfinite(g).all():
            raise NumericError("non-finite hypergradient", t=t)
    return grads, _values(theta_k)


def outer_step(problem, lam, cfg, t, theta0=None):
    """One outer update ``lam <- (1 - a mu) lam - a * hypergradient`` at step ``t`` (0-based)."""
    if theta0 is None:
        theta0 = problem.init_theta(cfg.seed)
    grads, _ = hypergradient(problem, lam, cfg, theta0, t)
    return _apply_update(lam, grads, cfg, t)


def _apply_update(lam, grads, cfg, t):
    a = cfg.alpha_at(t + 1)
    return [(1.0 - a * cfg.mu) * v - a * g for v, g in zip(lam, grads)]


def ud_run(problem, cfg, lam0=None, keep_snapshots=False):
    """Unrolled differentiation: T outer steps, each through K unrolled inner steps."""
    cfg.validate(problem)
    theta0 = problem.init_theta(cfg.seed)
    lam = _values(problem.init_lam(cfg.seed) if lam0 is None else lam0)
    trace = RunTrace("ud", snapshots=[] if keep_snapshots else None)

    for t in range(cfg.T):
        grads, theta_k = hypergradient(problem, lam, cfg, theta0, t)
        _record(problem, trace, t, lam, theta_k)
        lam = _apply_update(lam, grads, cfg, t)
        for v in lam:
            if not np.isfinite(v).all():
                raise NumericError("non-finite hyperparameter after update", t=t)

    try:
        theta_k = inner_unroll(problem, lam, cfg, theta0, stream(cfg.seed, INNER, cfg.T))
    except NumericError as err:
        raise err.located(t=cfg.T) from None
    _record(problem, trace, cfg.T, lam, theta_k)
    trace.lam, trace.theta = lam, _values(theta_k)
    return trace


def _record(problem, trace, t, lam, theta):
    val = evaluate(problem, lam, theta, problem.val)
    test = evaluate(problem, lam, theta, problem.test)
    if not (np.isfinite(val) and np.isfinite(test)):
        raise NumericError("non-finite evaluation loss", t=t)
    trace.add(t, val, test)
    if trace.snapshots is not None:
        trace.snapshots.append((_values(lam), _values(theta)))


def sample_candidate(problem, cfg, t, lam0=None):
    """Hyperparameter candidate ``t`` (1-based) for random search."""
    rng = stream(cfg.seed, CANDIDATE, t)
    center = problem.init_lam(cfg.seed) if lam0 is None else lam0
    if cfg.sampler == "gaussian":
        return [c + cfg.std * rng.standard_normal(np.shape(c)) for c in center]
    return [rng.uniform(cfg.lo, cfg.hi, size=np.shape(c)) for c in center]


def cv_run(problem, cfg, candidates=None, keep_snapshots=False):
    """Random-search cross-validation sharing the UD inner loop.

    ``candidates`` overrides the sampler with an explicit list of
    hyperparameters (each a list of arrays); T is then its length.  Ties in
    validation loss go to the earliest candidate.
    """
    if candidates is not None:
        candidates = [_values(c) for c in candidates]
        cfg = _replace_T(cfg, len(candidates))
    cfg.validate(problem)
    theta0 = problem.init_theta(cfg.seed)
    trace = RunTrace("cv", snapshots=[] if keep_snapshots else None)
    best_val, best = np.inf, None

    for t in range(1, cfg.T + 1):
        lam = candidates[t - 1] if candidates is not None else sample_candidate(problem, cfg, t)
        try:
            theta_k = inner_unroll(problem, lam, cfg, theta0, stream(cfg.seed, INNER, t))
        except NumericError as err:
            raise err.located(t=t) from None
        _record(problem, trace, t, lam, theta_k)
        if trace.val_loss[-1] < best_val:
            best_val, best = trace.val_loss[-1], (t, lam, _values(theta_k))

    trace.selected, trace.lam, trace.theta = best
    return trace


def _replace_T(cfg, T):
    return replace(cfg, T=T)
