"""Explicit Runge-Kutta integration of latent dynamics.

States may be plain ``numpy`` arrays or :class:`~tivode.tensor.Tensor`
objects. With tensors every stage is recorded on the autodiff tape, so the
loss differentiates through the exact sequence of solver operations
(discretize-then-optimize). Step-size control reads only the numeric values
and is therefore treated as a constant by the gradient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, InputError, IntegrationError, StepBudgetError, StiffnessError
from .tensor import Tensor

METHODS = ("rk4_fixed", "dopri5")


@dataclass(frozen=True)
class SolverConfig:
    method: str = "rk4_fixed"
    rtol: float = 1e-3
    atol: float = 1e-4
    h_init: float = 1.0 / 7.0
    h_min: float = 1e-6
    h_max: float = 0.5
    max_steps: int = 10_000
    safety: float = 0.9

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown solver method {self.method!r}; choose from {METHODS}")
        if not (0 < self.h_min <= self.h_init <= self.h_max):
            raise ContractError("solver steps must satisfy 0 < h_min <= h_init <= h_max")
        if self.rtol <= 0 or self.atol <= 0:
            raise ContractError("rtol and atol must be positive")
        if self.max_steps <= 0:
            raise ContractError("max_steps must be positive")


class TimeGrid:
    """Strictly increasing, finite output times inside [0, 1]."""

    def __init__(self, times: Sequence[float]):
        ts = tuple(float(t) for t in times)
        if not ts:
            raise ContractError("time grid is empty")
        if not all(math.isfinite(t) for t in ts):
            raise InputError("time grid contains non-finite values")
        if ts[0] < 0 or ts[-1] > 1:
            raise InputError(f"time grid must lie in [0, 1], got [{ts[0]}, {ts[-1]}]")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise InputError("time grid must be strictly increasing")
        self.times = ts

    @classmethod
    def uniform(cls, n: int) -> "TimeGrid":
        """``n`` frames at i/(n-1)."""
        if n < 1:
            raise InputError("uniform grid needs at least one point")
        if n == 1:
            return cls([0.0])
        return cls([i / (n - 1) for i in range(n)])

    @classmethod
    def parse(cls, text: str) -> "TimeGrid":
        """Comma list of times, or ``fps:<n>`` for n+1 uniform times."""
        text = text.strip()
        if text.startswith("fps:"):
            try:
                n = int(text[4:])
            except ValueError as exc:
                raise InputError(f"bad fps shorthand {text!r}") from exc
            if n < 1:
                raise InputError("fps must be >= 1")
            return cls.uniform(n + 1)
        try:
            values = [float(tok) for tok in text.split(",") if tok.strip()]
        except ValueError as exc:
            raise InputError(f"bad time list {text!r}") from exc
        return cls(values)

    def is_uniform(self, tol: float = 1e-9) -> bool:
        if len(self.times) < 3:
            return True
        d = np.diff(self.times)
        return bool(np.all(np.abs(d - d[0]) <= tol))

    def __len__(self):
        return len(self.times)

    def __iter__(self):
        return iter(self.times)

    def __getitem__(self, i):
        return self.times[i]

    def __repr__(self):
        return f"TimeGrid({list(self.times)})"


@dataclass
class SolverStats:
    accepted: int = 0
    rejected: int = 0
    nfev: int = 0


@dataclass
class OdeTrajectory:
    states: list
    times: tuple
    stats: SolverStats = field(default_factory=SolverStats)

    def __len__(self):
        return len(self.states)


def _values(y) -> np.ndarray:
    return y.data if isinstance(y, Tensor) else np.asarray(y)


def _check(k, t: float, h: float, stage: int):
    if not np.all(np.isfinite(_values(k))):
        raise IntegrationError(f"non-finite value in stage {stage}", t=t, h=h)
    return k


def _combine(y, h: float, coeffs: Sequence[float], ks: Sequence):
    """y + h * sum(c_i k_i), skipping zero coefficients."""
    acc = None
    for c, k in zip(coeffs, ks):
        if c == 0.0:
            continue
        term = k * (h * c)
        acc = term if acc is None else acc + term
    return y if acc is None else y + acc


def rk4_step(f: Callable, y, t: float, h: float):
    """One classical fourth-order Runge-Kutta step."""
    if not h > 0:
        raise ContractError("step size must be positive")
    k1 = _check(f(y, t), t, h, 1)
    k2 = _check(f(y + k1 * (h / 2), t + h / 2), t, h, 2)
    k3 = _check(f(y + k2 * (h / 2), t + h / 2), t, h, 3)
    k4 = _check(f(y + k3 * h, t + h), t, h, 4)
    return _combine(y, h, (1 / 6, 1 / 3, 1 / 3, 1 / 6), (k1, k2, k3, k4))


# Dormand-Prince 5(4) tableau
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
)
_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
_E = tuple(b5 - b4 for b5, b4 in zip(_B5, _B4))


class StepResult(NamedTuple):
    y_next: object
    err_norm: float
    h_next: float
    accepted: bool
    k_last: object  # f(y_next, t + h), reusable as the next first stage


def dopri5_step(f: Callable, y, t: float, h: float, cfg: SolverConfig, k1=None) -> StepResult:
    """One attempted Dormand-Prince 5(4) step with error control.

    ``k1`` may carry f(y, t) from the previous accepted step (FSAL).
    """
    if not h > 0:
        raise ContractError("step size must be positive")
    if k1 is None:
        k1 = _check(f(y, t), t, h, 1)
    ks = [k1]
    for i in range(1, 6):
        yi = _combine(y, h, _A[i], ks)
        ks.append(_check(f(yi, t + _C[i] * h), t, h, i + 1))
    y_next = _combine(y, h, _B5, ks)
    k7 = _check(f(y_next, t + h), t, h, 7)
    ks.append(k7)

    yv, ynv = _values(y), _values(y_next)
    err = h * sum(e * _values(k) for e, k in zip(_E, ks) if e != 0.0)
    scale = cfg.atol + cfg.rtol * np.maximum(np.abs(yv), np.abs(ynv))
    err_norm = float(np.sqrt(np.mean((err / scale) ** 2))) if err.size else 0.0
    accepted = err_norm <= 1.0
    if err_norm == 0.0:
        factor = 5.0
    else:
        factor = min(5.0, max(0.2, cfg.safety * err_norm ** -0.2))
    h_next = min(cfg.h_max, max(cfg.h_min, h * factor))
    if not accepted and h <= cfg.h_min:
        raise StiffnessError("step rejected at minimum step size", t=t, h=h)
    return StepResult(y_next, err_norm, h_next, accepted, k7)


def _solve_rk4(f, y0, times, cfg, stats):
    # Full steps walk the mesh t0 + k*h_init whatever the grid is. A requested
    # time off the mesh is reached by one shorter step from the node before it,
    # and that branch is not continued, so inserting or removing output times
    # never changes the states at the others.
    t0, h = times[0], cfg.h_init
    tol = 1e-9 * h
    states = [y0]
    y, k = y0, 0

    def step(y, t, dt):
        if stats.accepted >= cfg.max_steps:
            raise StepBudgetError("fixed-step budget exhausted", t=t, h=dt)
        stats.accepted += 1
        stats.nfev += 4
        return rk4_step(f, y, t, dt)

    for target in times[1:]:
        while t0 + (k + 1) * h <= target + tol:
            y = step(y, t0 + k * h, h)
            k += 1
        node = t0 + k * h
        states.append(y if target - node <= tol else step(y, node, target - node))
    return states


def _advance(f, y, t, target, h, k1, cfg, stats):
    """Error-controlled steps from t until landing exactly on target."""
    while t < target:
        remaining = target - t
        landing = h >= remaining - 1e-12 * max(1.0, abs(target))
        h_try = remaining if landing else h
        if k1 is None:
            k1 = _check(f(y, t), t, h_try, 1)
            stats.nfev += 1
        res = _attempt(f, y, t, h_try, k1, cfg, stats)
        if res.accepted:
            y, k1 = res.y_next, res.k_last
            t = target if landing else t + h_try
        h = res.h_next
    return y


def _attempt(f, y, t, h, k1, cfg, stats):
    if stats.accepted + stats.rejected >= cfg.max_steps:
        raise StepBudgetError("adaptive step budget exhausted", t=t, h=h)
    res = dopri5_step(f, y, t, h, cfg, k1)
    stats.nfev += 6
    if res.accepted:
        stats.accepted += 1
    else:
        stats.rejected += 1
    return res


def _solve_dopri5(f, y0, times, cfg, stats):
    # The controller's own step sequence runs toward the last requested time
    # and depends on nothing else. Each requested time within the step proposed
    # on arrival at a node is reached by an error-controlled branch from that
    # node, so shared times get identical states on any two grids with the
    # same endpoints.
    tol = 1e-12 * max(1.0, abs(times[-1]))
    states = [y0]
    y, t, h, k1 = y0, times[0], cfg.h_init, None
    pending = list(times[1:])
    while pending:
        if k1 is None:
            k1 = _check(f(y, t), t, h, 1)
            stats.nfev += 1
        while pending and pending[0] <= t + h + tol:
            states.append(_advance(f, y, t, pending.pop(0), h, k1, cfg, stats))
        if not pending:
            break
        # pending[0] lies beyond t + h, so this step needs no truncation
        res = _attempt(f, y, t, h, k1, cfg, stats)
        while not res.accepted:
            h = res.h_next
            res = _attempt(f, y, t, h, k1, cfg, stats)
        y, t, k1 = res.y_next, t + h, res.k_last
        h = res.h_next
    return states


def solve_at(f: Callable, y0, grid, cfg: SolverConfig) -> OdeTrajectory:
    """Integrate ``dy/dt = f(y, t)`` once across ``grid`` and return its states.

    Every requested time is hit by a step that lands on it exactly; see the
    method helpers for how those steps branch off a grid-independent mesh.
    """
    if grid is None or len(grid) == 0:
        raise ContractError("time grid is empty")
    if not isinstance(grid, TimeGrid):
        grid = TimeGrid(grid)
    if not np.all(np.isfinite(_values(y0))):
        raise ContractError("initial state is not finite")
    stats = SolverStats()
    times = grid.times
    if cfg.method == "rk4_fixed":
        states = _solve_rk4(f, y0, times, cfg, stats)
    else:
        states = _solve_dopri5(f, y0, times, cfg, stats)
    return OdeTrajectory(states, times, stats)


def differentiable_solve(f: Callable, y0, grid, cfg: SolverConfig) -> OdeTrajectory:
    """``solve_at`` with graph recording forced on, for backprop through the solve."""
    with T.enable_grad():
        return solve_at(f, y0, grid, cfg)


def augment(xi, extra_channels: int, axis: int = 1):
    """Append ``extra_channels`` zero channels along ``axis``.

    The appended channels start at zero; whether they stay there is decided by
    the dynamics function, not here.
    """
    if extra_channels < 0:
        raise ContractError("extra_channels must be >= 0")
    if extra_channels == 0:
        return xi
    shape = list(_values(xi).shape)
    shape[axis] = extra_channels
    zeros = np.zeros(shape)
    if isinstance(xi, Tensor):
        return T.concat([xi, zeros], axis=axis)
    return np.concatenate([np.asarray(xi, dtype=np.float64), zeros], axis=axis)


def integrate_fixed(step: Callable, f: Callable, y0, t0: float, t1: float, n: int):
    """Apply ``step(f, y, t, h)`` n times with equal sub-steps from t0 to t1."""
    h = (t1 - t0) / n
    y = y0
    for k in range(n):
        y = step(f, y, t0 + k * h, h)
    return y
