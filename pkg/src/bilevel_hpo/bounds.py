"""Closed-form stability and generalization bounds for UD and CV.

Every evaluator takes a :class:`BoundInputs` and returns a
:class:`BoundReport` carrying the value, the inputs it used and any
preconditions that do not hold.  A violated precondition does not stop the
computation; the value is still returned and flagged.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .bilevel import INNER, inner_unroll, stream
from .errors import ContractViolation
from .models import Batch


@dataclass(frozen=True)
class BoundInputs:
    """Symbols consumed by the bound formulas.

    ``c`` is the scale of the inverse outer schedule (alpha_t <= c / t),
    ``alpha`` the constant GD outer rate, ``s_ell`` the loss range and
    ``gamma_phi`` the inner smoothness constant.
    """

    T: int = 100
    K: int = 10
    m: int = 100
    n: int = 1000
    c: float = 1.0
    alpha: float = 0.1
    eta: float = 0.1
    L: float = 1.0
    gamma: float = 1.0
    gamma_phi: float = 1.0
    mu: float = 0.0
    nu: float = 0.0
    s_ell: float = 2.3
    d: int = 1
    delta: float = 0.05

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool) or not isinstance(v, (int, float, np.integer, np.floating)):
                raise ContractViolation(f"{f.name}: expected a number, got {v!r}")
            if not math.isfinite(v):
                raise ContractViolation(f"{f.name}: must be finite, got {v}")
            if v < 0:
                raise ContractViolation(f"{f.name}: must be nonnegative, got {v}")
        for name in ("m", "n", "d"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name}: must be >= 1, got {getattr(self, name)}")
        if not 0.0 < self.delta < 1.0:
            raise ContractViolation(f"delta: must lie in (0, 1), got {self.delta}")


@dataclass
class BoundReport:
    value: float
    formula_id: str
    inputs: dict
    violated_preconditions: list = field(default_factory=list)

    @property
    def valid(self):
        return not self.violated_preconditions

    def format(self):
        flag = "ok" if self.valid else "VIOLATED: " + "; ".join(self.violated_preconditions)
        return f"{self.formula_id} = {self.value:.10g}  [{flag}]"


def _echo(inputs, *names):
    d = asdict(inputs)
    return {k: d[k] for k in names}


# ------------------------------------------------------------- SGD outer


def kappa(inputs):
    """Exponent governing the T-growth of the SGD-outer stability bound."""
    g = inputs.c * ((1.0 - 1.0 / inputs.m) * inputs.gamma - inputs.mu)
    return g / (g + 1.0)


def kappa_preconditions(inputs):
    out = []
    if inputs.mu > (1.0 - 1.0 / inputs.m) * inputs.gamma:
        out.append("mu <= (1 - 1/m) gamma")
    return out


def _relative_growth(x, k):
    """(x**k - 1) / k, continuous at k = 0 where it equals ln x."""
    if k == 0.0:
        return math.log(x)
    return math.expm1(k * math.log(x)) / k


def sgd_beta_closed_form(c, L, m, s_ell, T, k):
    """Stability of SGD in the outer level for an explicit exponent ``k``."""
    if m <= 0:
        raise ContractViolation("m must be positive")
    a = 2.0 * c * L * L
    if a == 0.0 or T == 0:
        return 0.0
    if s_ell == 0.0:
        return a / m * (1.0 - 1.0 / k) if k else -math.inf
    x = T * s_ell / a
    return a / m * (_relative_growth(x, k) + 1.0)


def ud_sgd_beta(inputs):
    """Uniform stability (in expectation) of T steps of outer SGD with rate c/t."""
    violated = kappa_preconditions(inputs)
    i = inputs
    if i.L > 0 and i.c > i.s_ell / (2.0 * i.L**2):
        violated.append("c <= s_ell / (2 L^2)")
    if i.c > 0 and i.mu > 1.0 / i.c:
        violated.append("mu <= 1/c")
    if i.T < 1:
        violated.append("T >= 1")
    k = kappa(i)
    value = sgd_beta_closed_form(i.c, i.L, i.m, i.s_ell, i.T, k)
    return BoundReport(
        value,
        "ud_sgd_beta",
        dict(_echo(i, "T", "m", "c", "L", "gamma", "mu", "s_ell"), kappa=k),
        violated,
    )


# -------------------------------------------------------------- GD outer


def ud_gd_beta(inputs):
    """Uniform stability of T steps of outer GD with rate alpha and decay mu."""
    i = inputs
    violated = []
    if i.mu > i.gamma:
        violated.append("mu <= gamma")
    if i.alpha > 0 and i.mu > 1.0 / i.alpha:
        violated.append("mu <= 1/alpha")
    g = i.gamma - i.mu
    if g == 0.0:
        growth = i.alpha * i.T
    else:
        try:
            growth = math.expm1(i.T * math.log1p(i.alpha * g)) / g
        except OverflowError:
            growth = math.inf
    value = 2.0 * i.L**2 / i.m * growth
    return BoundReport(value, "ud_gd_beta", _echo(i, "T", "m", "alpha", "L", "gamma", "mu"), violated)


def gd_hp_bound(inputs, beta):
    """High-probability gap bound for a beta-stable deterministic algorithm.

    With probability at least 1 - delta the expected validation risk exceeds
    the empirical one by at most the returned value.
    """
    i = inputs
    if not 0.0 < i.delta < 1.0:
        raise ContractViolation(f"delta must lie in (0, 1), got {i.delta}")
    spread = 2.0 * beta * i.m + i.s_ell
    value = beta + math.sqrt(spread**2 * math.log(1.0 / i.delta) / (2.0 * i.m))
    return BoundReport(value, "gd_hp_bound", dict(_echo(i, "m", "s_ell", "delta"), beta=beta))


def generalization_gap_bound(beta, inputs=None):
    """Expected generalization gap of a beta-stable randomized algorithm: beta itself."""
    echo = {} if inputs is None else asdict(inputs)
    violated = [] if beta >= 0 else ["beta >= 0"]
    return BoundReport(float(beta), "generalization_gap_bound", dict(echo, beta=beta), violated)


# -------------------------------------------------------------------- CV


def cv_gap_bound(inputs):
    """Expected generalization gap of random-search CV over T candidates."""
    i = inputs
    if i.T < 1 or i.m < 1:
        raise ContractViolation(f"CV bound needs T >= 1 and m >= 1, got T={i.T}, m={i.m}")
    value = i.s_ell * math.sqrt(math.log(i.T) / (2.0 * i.m))
    return BoundReport(value, "cv_gap_bound", _echo(i, "T", "m", "s_ell"))


def cod_bound(L, d, T):
    """Excess validation risk of random search: L sqrt(d) / T^(1/d)."""
    if d < 1 or T < 1 or L < 0:
        raise ContractViolation(f"need d >= 1, T >= 1, L >= 0; got d={d}, T={T}, L={L}")
    return L * math.sqrt(d) / T ** (1.0 / d)


@dataclass(frozen=True)
class CodResult:
    mean_min: float
    stderr: float
    bound: float
    inf_f: float

    @property
    def holds(self):
        return self.mean_min <= self.inf_f + self.bound + 3.0 * self.stderr


def cod_montecarlo(f, L, d, T, trials, seed, inf_f=0.0, chunk=64):
    """Monte-Carlo mean of min_i f(lam_i) over T uniform draws on [0,1]^d.

    ``f`` maps an array of shape (..., d) to shape (...).  Returns the
    empirical mean, its standard error and the random-search excess term.
    """
    rng = np.random.default_rng(seed)
    mins = np.empty(trials)
    for lo in range(0, trials, chunk):
        hi = min(lo + chunk, trials)
        draws = rng.random((hi - lo, T, d))
        mins[lo:hi] = np.asarray(f(draws)).min(axis=1)
    stderr = float(mins.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    return CodResult(float(mins.mean()), stderr, cod_bound(L, d, T), float(inf_f))


# ------------------------------------------------------------- Lipschitz


@dataclass(frozen=True)
class GrowthOrder:
    """Order-form growth of the outer Lipschitz and smoothness constants in K.

    L = O(L_base ** K) and gamma = O(gamma_base ** K); hidden constants are
    not modelled.
    """

    L_base: float
    gamma_base: float
    K: int

    @property
    def L_growth(self):
        return self.L_base**self.K

    @property
    def gamma_growth(self):
        return self.gamma_base**self.K


def lipschitz_growth_order(inputs):
    base = 1.0 + inputs.eta * (inputs.gamma_phi - inputs.nu)
    return GrowthOrder(base, base * base, int(inputs.K))


def estimate_lipschitz_empirical(problem, cfg, num_probes, radius, box=(-1.0, 1.0), seed=0, examples=None):
    """Empirical lower bound on the Lipschitz constant of lam -> loss(lam, theta_K(lam), z).

    Each probe draws ``lam`` uniformly in ``box`` and a partner at distance
    ``radius`` in a random direction (kept inside the box when possible),
    runs the inner loop for both with the same mini-batch stream and records
    the largest per-example slope over ``examples`` (default: validation
    set).  This never certifies L; it only bounds it from below.
    """
    if radius <= 0:
        raise ContractViolation(f"radius must be positive, got {radius}")
    if num_probes < 2:
        raise ContractViolation(f"num_probes must be >= 2, got {num_probes}")
    per_example = problem.losses.outer_per_example
    if per_example is None:
        raise ContractViolation("loss pair has no per-example outer loss")
    data = problem.val if examples is None else examples
    batch = Batch.from_dataset(data)
    theta0 = problem.init_theta(cfg.seed)
    shapes = [np.shape(v) for v in problem.init_lam(cfg.seed)]
    sizes = [int(np.prod(s)) for s in shapes]
    lo, hi = box
    rng = np.random.default_rng(seed)

    def unflatten(flat):
        out, at = [], 0
        for s, n in zip(shapes, sizes):
            out.append(flat[at : at + n].reshape(s))
            at += n
        return out

    def losses(flat):
        lam = unflatten(flat)
        theta = inner_unroll(problem, lam, cfg, theta0, stream(cfg.seed, INNER, 0))
        return np.asarray(per_example(lam, theta, batch))

    best = 0.0
    for _ in range(num_probes):
        a = rng.uniform(lo, hi, size=sum(sizes))
        u = rng.standard_normal(a.shape)
        u /= np.linalg.norm(u)
        b = a + radius * u
        if np.any(b < lo) or np.any(b > hi):
            b = a - radius * u
            if np.any(b < lo) or np.any(b > hi):
                b = np.clip(a + radius * u, lo, hi)
        dist = np.linalg.norm(b - a)
        if dist == 0.0:
            continue
        slope = float(np.max(np.abs(losses(a) - losses(b)))) / dist
        best = max(best, slope)
    return best


# ------------------------------------------------------------ run bridge


def inputs_for_run(cfg, m, n, **constants):
    """BoundInputs for a UD run plus notes on how well the run fits the theory.

    ``constants`` supplies what a run cannot know (L, gamma, gamma_phi,
    s_ell, d, delta).  Under the inverse schedule ``alpha`` is the constant c;
    under a constant rate the c-based SGD bound does not apply and a note says
    so.
    """
    notes = []
    if cfg.schedule == "inverse":
        c, alpha = cfg.alpha, cfg.alpha
    else:
        c, alpha = constants.pop("c", cfg.alpha), cfg.alpha
        notes.append("outer rate is constant; the SGD bound assumes alpha_t = c/t")
    if cfg.outer_mode == "SGD" and cfg.outer_batch != 1:
        notes.append(f"outer batch is {cfg.outer_batch}; the SGD bound assumes one example per step")
    inputs = BoundInputs(
        T=cfg.T, K=cfg.K, m=m, n=n, c=c, alpha=alpha, eta=cfg.eta, mu=cfg.mu, nu=cfg.nu, **constants
    )
    return inputs, notes
