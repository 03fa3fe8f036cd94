"""Pathwise elastic-net estimation by cyclical coordinate descent.

Minimizes

    (1/2n) ||y - X w||^2 + lam * ( r ||w||_1 + (1 - r)/2 ||w||_2^2 )

by cyclically applying the closed-form single-coordinate update with
soft-thresholding.  The full residual rho = y - X w is maintained
incrementally (the naive update), never the p x p Gram matrix: with
p up to 65536 detector pixels the Gram matrix is out of reach while a
coordinate update is O(n) with n of order 10^3 to 10^4.

Column norms c_j = (1/n)||X_j||^2 are folded into the update so it is
the exact 1-D minimizer for raw, unnormalized intensity columns; for
unit-norm columns it reduces to the textbook soft-threshold update.

Regularization paths run on a geometric grid from lambda_max (where the
zero vector is optimal) downward, warm-starting each fit from the
previous solution, with active-set acceleration inside each fit.
Convergence is certified by an explicit first-order optimality (KKT)
check, and sweeps continue until the certificate passes or the sweep
budget is exhausted.

Design matrices can be given as arrays or streamed in column blocks
from disk; the coordinate update sequence is identical in both modes,
so the results are bitwise equal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .datamodel import DesignMatrix
from .errors import NumericsError

# Converged fits must satisfy the first-order optimality certificate
# kkt_max_violation <= _KKT_FACTOR * tol * max(1, lambda_max).
_KKT_FACTOR = 100.0


@dataclass(frozen=True)
class ElasticNetConfig:
    """Solver settings.

    r mixes the penalties: r = 1 is the lasso, r = 0 is ridge.  tol is
    the sweep convergence threshold on the largest coordinate change,
    relative to max(1, max|w|).  center_y and center_X subtract means
    before fitting; both default off since the objective has no
    intercept.
    """

    r: float = 5e-5
    tol: float = 1e-7
    max_sweeps: int = 100000
    center_y: bool = False
    center_X: bool = False

    def __post_init__(self):
        if not 0.0 <= self.r <= 1.0:
            raise ValueError(f"r must be in [0, 1], got {self.r}")
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.max_sweeps < 1:
            raise ValueError(f"max_sweeps must be >= 1, got {self.max_sweeps}")


@dataclass(frozen=True)
class PathConfig:
    """Regularization-path settings.

    Without an explicit list, the grid is n_lambda geometrically spaced
    values from lambda_max down to lambda_min_ratio * lambda_max.  An
    explicit list must be strictly descending and positive.
    """

    n_lambda: int = 100
    lambda_min_ratio: float = 1e-3
    explicit_lambdas: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.n_lambda < 1:
            raise ValueError(f"n_lambda must be >= 1, got {self.n_lambda}")
        if not 0.0 < self.lambda_min_ratio <= 1.0:
            raise ValueError(
                f"lambda_min_ratio must be in (0, 1], got {self.lambda_min_ratio}")
        if self.explicit_lambdas is not None:
            lams = tuple(float(v) for v in self.explicit_lambdas)
            if not lams:
                raise ValueError("explicit lambda list is empty")
            if any(v <= 0 for v in lams):
                raise ValueError("explicit lambdas must be positive")
            if any(b >= a for a, b in zip(lams, lams[1:])):
                raise ValueError("explicit lambdas must be strictly descending")
            object.__setattr__(self, "explicit_lambdas", lams)


@dataclass(frozen=True)
class FitResult:
    """One converged fit: weights plus diagnostics.

    filling_ratio is the fraction of exactly nonzero weights (the
    sparsity diagnostic; soft-thresholding produces structural zeros).
    objective_trace, present when the fit was run with trace=True,
    holds the objective value before the first sweep and after every
    sweep.
    """

    weights: np.ndarray
    lam: float
    sweeps_used: int
    objective_value: float
    filling_ratio: float
    kkt_max_violation: float
    objective_trace: tuple[float, ...] | None = None

    def __post_init__(self):
        w = np.ascontiguousarray(np.asarray(self.weights, dtype=np.float64))
        if not math.isfinite(self.objective_value):
            raise ValueError("non-finite objective value")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class RegPath:
    """Warm-started fits ordered by strictly descending lambda."""

    entries: tuple[FitResult, ...]

    def __post_init__(self):
        lams = [e.lam for e in self.entries]
        if any(b >= a for a, b in zip(lams, lams[1:])):
            raise ValueError("path lambdas must be strictly descending")

    @property
    def lambdas(self) -> tuple[float, ...]:
        return tuple(e.lam for e in self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, idx):
        return self.entries[idx]


@dataclass(frozen=True)
class CDState:
    """Mutable descent state: weights w and full residual rho = y - X w."""

    w: np.ndarray
    rho: np.ndarray


class InMemorySource:
    """Column-block view of an in-memory design: a single block."""

    def __init__(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError(f"expected 2 axes, got {x.ndim}")
        self.n, self.p = x.shape
        self._xt = np.ascontiguousarray(x.T)

    def blocks(self):
        yield 0, self._xt


def _as_source(x):
    """Accept DesignMatrix, ndarray, or any object with n, p, blocks()."""
    if isinstance(x, DesignMatrix):
        return InMemorySource(x.values)
    if hasattr(x, "blocks"):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise NumericsError("non-finite values in design matrix")
    return InMemorySource(arr)


def _check_vector(y, n, name="y"):
    y = np.ascontiguousarray(np.asarray(y, dtype=np.float64))
    if y.shape != (n,):
        raise ValueError(f"{name} has shape {y.shape}, expected ({n},)")
    if not np.isfinite(y).all():
        raise NumericsError(f"non-finite values in {name}")
    return y


def soft_threshold(z, gamma):
    """Soft-thresholding operator S_gamma(z) = max(0, 1 - gamma/|z|) z.

    Shrinks z toward zero by gamma and clips to exactly zero once
    |z| <= gamma; accepts scalars or arrays, gamma >= 0.
    """
    if np.any(np.asarray(gamma) < 0):
        raise ValueError("gamma must be non-negative")
    z = np.asarray(z, dtype=np.float64)
    out = np.sign(z) * np.maximum(np.abs(z) - gamma, 0.0)
    return float(out) if out.ndim == 0 else out


def _penalty(w, lam, r):
    return lam * (r * float(np.sum(np.abs(w)))
                  + 0.5 * (1.0 - r) * float(np.sum(w * w)))


def objective(x, y, w, lam, r) -> float:
    """(1/2n)||y - Xw||^2 + lam (r ||w||_1 + (1-r)/2 ||w||_2^2)."""
    source = _as_source(x)
    y = _check_vector(y, source.n)
    w = _check_vector(w, source.p, "w")
    yhat = np.zeros(source.n, dtype=np.float64)
    for j0, xt in source.blocks():
        _kernels.accumulate_prediction(xt, w, yhat, j0)
    res = y - yhat
    return 0.5 * _kernels.sum_sq(res) / source.n + _penalty(w, lam, r)


def _max_abs_correlation(source, y) -> float:
    u = np.empty(source.p, dtype=np.float64)
    for j0, xt in source.blocks():
        _kernels.col_correlations(xt, y, u, j0)
    return float(np.max(np.abs(u))) if source.p else 0.0


def lambda_max(x, y, r) -> float:
    """Smallest penalty at which the all-zero solution is optimal.

    Returns max_j |(1/n) <X_j, y>| / r, nudged up by float ulps if
    needed so that a fit at the returned value from a zero start
    produces structural zeros.  For r = 0 no finite penalty zeroes the
    solution and the caller must supply an explicit lambda list.
    """
    if r == 0:
        raise ValueError("lambda_max is unavailable for r = 0; "
                         "supply an explicit lambda list")
    source = _as_source(x)
    y = _check_vector(y, source.n)
    m = _max_abs_correlation(source, y)
    if m == 0.0:
        return 0.0
    lam = m / r
    while lam * r < m:
        lam = math.nextafter(lam, math.inf)
    return lam


def filling_ratio(w) -> float:
    """Fraction of exactly nonzero weights."""
    w = np.asarray(w)
    if w.size == 0:
        return 0.0
    return float(np.count_nonzero(w)) / w.size


def kkt_check(x, y, w, lam, r) -> float:
    """Largest first-order optimality violation of w.

    With g_j = -(1/n) X_j^T (y - Xw) + lam (1-r) w_j, the violation is
    |g_j + lam r sign(w_j)| where w_j != 0 and max(0, |g_j| - lam r)
    where w_j = 0; the optimum has violation 0.
    """
    source = _as_source(x)
    y = _check_vector(y, source.n)
    w = _check_vector(w, source.p, "w")
    rho = y.copy()
    for j0, xt in source.blocks():
        _kernels.subtract_contribution(xt, w, rho, j0)
    worst = 0.0
    for j0, xt in source.blocks():
        worst = max(worst, _kernels.kkt_worst(xt, w, rho, j0,
                                              lam * r, lam * (1.0 - r)))
    return worst


def coordinate_sweep(state: CDState, x, y, lam, r) -> float:
    """One cyclical pass updating every coordinate of state in place.

    state must hold the current weights and the maintained residual
    rho = y - X w; both are updated incrementally.  Returns the largest
    absolute coordinate change of the pass.  Coordinates with zero-norm
    columns are skipped and pinned at 0.
    """
    source = _as_source(x)
    y = _check_vector(y, source.n)
    if state.w.shape != (source.p,) or state.rho.shape != (source.n,):
        raise ValueError("state shapes do not match the design")
    cn = np.empty(source.p, dtype=np.float64)
    for j0, xt in source.blocks():
        _kernels.col_sq_norms(xt, cn, j0)
    return _sweep_all(source, state.w, state.rho, cn, lam * r,
                      lam * (1.0 - r), False)


def _sweep_all(source, w, rho, cn, lam_r, lam_l2, active_only) -> float:
    change = 0.0
    for j0, xt in source.blocks():
        change = max(change, _kernels.sweep(xt, w, rho, cn, j0,
                                            lam_r, lam_l2, active_only))
    return change


def _kkt_all(source, w, rho, lam_r, lam_l2) -> float:
    worst = 0.0
    for j0, xt in source.blocks():
        worst = max(worst, _kernels.kkt_worst(xt, w, rho, j0, lam_r, lam_l2))
    return worst


def _objective_from_state(source, y, w, rho, lam, r) -> float:
    return 0.5 * _kernels.sum_sq(rho) / source.n + _penalty(w, lam, r)


def _kkt_scale(source, y, r, lam) -> float:
    # Scale of the optimality certificate: lambda_max of the problem,
    # replaced by the current penalty when r = 0 leaves it undefined.
    if r > 0:
        return _max_abs_correlation(source, y) / r
    return float(lam)


def _fit_source(source, y, lam, config, w0, lam_scale, trace):
    if lam < 0:
        raise ValueError(f"lam must be >= 0, got {lam}")
    n, p = source.n, source.p

    w = np.zeros(p, dtype=np.float64) if w0 is None else w0.astype(
        np.float64).copy()
    if w.shape != (p,):
        raise ValueError(f"warm start has shape {w.shape}, expected ({p},)")

    cn = np.empty(p, dtype=np.float64)
    for j0, xt in source.blocks():
        _kernels.col_sq_norms(xt, cn, j0)

    rho = y.copy()
    if np.any(w != 0.0):
        for j0, xt in source.blocks():
            _kernels.subtract_contribution(xt, w, rho, j0)

    lam_r = lam * config.r
    lam_l2 = lam * (1.0 - config.r)
    kkt_bound = _KKT_FACTOR * config.tol * max(1.0, lam_scale)

    trace_vals = []
    if trace:
        trace_vals.append(_objective_from_state(source, y, w, rho, lam, config.r))

    sweeps = 0
    certified = False
    kkt = math.inf
    while sweeps < config.max_sweeps:
        change = _sweep_all(source, w, rho, cn, lam_r, lam_l2, False)
        sweeps += 1
        if trace:
            trace_vals.append(
                _objective_from_state(source, y, w, rho, lam, config.r))
        converged = change < config.tol * max(1.0, float(np.max(np.abs(w))))
        if not converged:
            # active-set phase: iterate the nonzero coordinates only,
            # then fall through to a full sweep that admits violators
            while sweeps < config.max_sweeps:
                change = _sweep_all(source, w, rho, cn, lam_r, lam_l2, True)
                sweeps += 1
                if trace:
                    trace_vals.append(
                        _objective_from_state(source, y, w, rho, lam, config.r))
                if change < config.tol * max(1.0, float(np.max(np.abs(w)))):
                    break
            continue
        kkt = _kkt_all(source, w, rho, lam_r, lam_l2)
        if kkt <= kkt_bound:
            certified = True
            break

    if not certified:
        kkt = _kkt_all(source, w, rho, lam_r, lam_l2)

    if not np.isfinite(w).all():
        raise NumericsError("descent produced non-finite weights")

    obj = _objective_from_state(source, y, w, rho, lam, config.r)
    return FitResult(
        weights=w,
        lam=float(lam),
        sweeps_used=sweeps,
        objective_value=obj,
        filling_ratio=filling_ratio(w),
        kkt_max_violation=kkt,
        objective_trace=tuple(trace_vals) if trace else None,
    )


def _centered(source, y, config):
    if not (config.center_y or config.center_X):
        return source, y
    if not isinstance(source, InMemorySource):
        raise ValueError("centering requires an in-memory design")
    xt = source._xt
    if config.center_X:
        xt = xt - xt.mean(axis=1, keepdims=True)
    if config.center_y:
        y = y - y.mean()
    centered = InMemorySource.__new__(InMemorySource)
    centered.n, centered.p = source.n, source.p
    centered._xt = np.ascontiguousarray(xt)
    return centered, y


def fit(x, y, lam, config: ElasticNetConfig | None = None,
        warm_start: np.ndarray | None = None, trace: bool = False) -> FitResult:
    """Solve one penalized problem at a fixed lambda.

    Sweeps cyclically (with active-set acceleration) until the largest
    coordinate change falls below tol * max(1, max|w|) and the
    first-order optimality certificate passes, or max_sweeps is hit.
    With trace=True the objective is recorded before the first sweep
    and after every sweep; it is non-increasing along the trace.
    """
    config = config or ElasticNetConfig()
    source = _as_source(x)
    y = _check_vector(y, source.n)
    source, y = _centered(source, y, config)
    lam_scale = _kkt_scale(source, y, config.r, lam)
    return _fit_source(source, y, float(lam), config, warm_start,
                       lam_scale, trace)


def fit_path(x, y, config: ElasticNetConfig | None = None,
             path_config: PathConfig | None = None,
             trace: bool = False) -> RegPath:
    """Fit a descending lambda grid, warm-starting each fit.

    Without an explicit list the grid starts at lambda_max, where the
    first entry is exactly zero with filling ratio 0, and descends
    geometrically to lambda_min_ratio * lambda_max.
    """
    config = config or ElasticNetConfig()
    path_config = path_config or PathConfig()
    source = _as_source(x)
    y = _check_vector(y, source.n)
    source, y = _centered(source, y, config)

    if path_config.explicit_lambdas is not None:
        grid = np.asarray(path_config.explicit_lambdas, dtype=np.float64)
    else:
        if config.r == 0:
            raise ValueError("lambda_max is unavailable for r = 0; "
                             "supply an explicit lambda list")
        m = _max_abs_correlation(source, y)
        if m == 0.0:
            raise ValueError("y is orthogonal to every column; "
                             "the path is identically zero")
        lam_max = m / config.r
        while lam_max * config.r < m:
            lam_max = math.nextafter(lam_max, math.inf)
        if path_config.n_lambda == 1:
            grid = np.array([lam_max])
        else:
            grid = np.geomspace(lam_max, lam_max * path_config.lambda_min_ratio,
                                path_config.n_lambda)
            grid[0] = lam_max  # geomspace endpoint may round off
    lam_scale = _kkt_scale(source, y, config.r, float(grid[0]))

    entries = []
    w = None
    for lam in grid:
        result = _fit_source(source, y, float(lam), config, w, lam_scale, trace)
        entries.append(result)
        w = result.weights
    return RegPath(tuple(entries))


def write_diagnostics(path: RegPath, file_path: str) -> None:
    """Write the per-lambda diagnostics table as CSV.

    Columns: lambda, sweeps, objective, filling_ratio, kkt_violation.
    The (lambda, filling_ratio) pair is the sparsity-versus-penalty
    curve.
    """
    from .datamodel import _atomic_write

    def writer(f):
        f.write(b"lambda,sweeps,objective,filling_ratio,kkt_violation\n")
        for e in path:
            f.write((f"{e.lam:.17g},{e.sweeps_used},{e.objective_value:.17g},"
                     f"{e.filling_ratio:.17g},{e.kkt_max_violation:.17g}\n")
                    .encode("ascii"))

    _atomic_write(file_path, writer)
