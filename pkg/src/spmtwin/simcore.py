"""Simulation clock and the physical-layer model primitives.

Three modelling methods are provided: interpolation over finite datasets,
linear state-space stepping (fixed-step RK4), and a named callback registry
for closed-form pipelines such as the solar surface model.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime
from typing import Callable, Sequence

import numpy as np


class ConfigurationError(ValueError):
    """A model or clock was built or queried with inconsistent parameters."""


# ── Clock ──────────────────────────────────────────────────────────────────


@dataclass
class SimClock:
    """Simulated time source.

    All module logic reads time from here, never from the wall clock.
    ``scale`` maps real elapsed seconds to simulated seconds; advances are
    floored to multiples of ``tick``.
    """

    scale: float = 1000.0
    tick: float = 0.1
    sim_epoch: float = 0.0

    def __post_init__(self):
        if self.scale < 1:
            raise ConfigurationError("clock scale must be >= 1")
        if self.tick <= 0:
            raise ConfigurationError("clock tick must be > 0")

    def advance(self, real_elapsed: float) -> float:
        """Advance by ``real_elapsed`` wall seconds; returns the new sim epoch."""
        if real_elapsed < 0:
            raise ValueError("real_elapsed must be >= 0")
        raw = real_elapsed * self.scale
        increment = math.floor(raw / self.tick + 1e-9) * self.tick
        self.sim_epoch += increment
        return self.sim_epoch

    def advance_to(self, sim_time: float) -> float:
        """Jump directly to ``sim_time`` (used by the event-driven runner)."""
        if sim_time < self.sim_epoch:
            raise ValueError(
                f"sim time may not go backwards: {sim_time} < {self.sim_epoch}"
            )
        self.sim_epoch = sim_time
        return self.sim_epoch

    def now(self) -> float:
        return self.sim_epoch


# ── Interpolation ──────────────────────────────────────────────────────────

LINEAR = "linear-bracketing"
NEAREST = "nearest-record"


@dataclass
class InterpolationTable:
    """Finite (x, y) dataset queried by interpolation.

    ``linear-bracketing`` interpolates linearly over the smallest bracketing
    interval; ``nearest-record`` returns the y of the temporally closest
    record. Out-of-range queries clamp to the nearest endpoint.
    """

    points: Sequence[tuple[float, float]]
    mode: str = LINEAR

    def __post_init__(self):
        if not self.points:
            raise ConfigurationError("interpolation table must have at least one point")
        if self.mode not in (LINEAR, NEAREST):
            raise ConfigurationError(f"unknown interpolation mode {self.mode!r}")
        xs = [p[0] for p in self.points]
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise ConfigurationError("table x values must be strictly increasing")
        self._xs = xs
        self._ys = [p[1] for p in self.points]

    def __call__(self, x: float) -> float:
        return interpolate(self, x)


def interpolate(table: InterpolationTable, x: float) -> float:
    """Evaluate ``table`` at ``x`` according to its mode."""
    xs, ys = table._xs, table._ys
    if x <= xs[0]:
        return ys[0]
    if x >= xs[-1]:
        return ys[-1]
    hi = _bisect(xs, x)
    lo = hi - 1
    if table.mode == NEAREST:
        return ys[lo] if (x - xs[lo]) <= (xs[hi] - x) else ys[hi]
    frac = (x - xs[lo]) / (xs[hi] - xs[lo])
    return ys[lo] + frac * (ys[hi] - ys[lo])


def _bisect(xs: Sequence[float], x: float) -> int:
    lo, hi = 0, len(xs)
    while lo < hi:
        mid = (lo + hi) // 2
        if xs[mid] <= x:
            lo = mid + 1
        else:
            hi = mid
    return lo


# ── Linear state-space ─────────────────────────────────────────────────────


@dataclass
class LinearStateSpace:
    """x' = A x + B u with constant matrices, advanced by fixed-step RK4.

    ``dt`` is the integrator sub-step in simulated seconds; ``step`` covers
    arbitrary horizons by chaining sub-steps (plus one partial remainder).
    """

    A: Sequence[Sequence[float]]
    B: Sequence[Sequence[float]]
    x: Sequence[float]
    dt: float = 1.0

    def __post_init__(self):
        n = len(self.A)
        if any(len(row) != n for row in self.A):
            raise ConfigurationError("A must be square")
        if len(self.B) != n:
            raise ConfigurationError("B row count must equal the A dimension")
        m = len(self.B[0]) if self.B else 0
        if any(len(row) != m for row in self.B):
            raise ConfigurationError("B rows must have equal length")
        if len(self.x) != n:
            raise ConfigurationError("state length must equal the A dimension")
        if self.dt <= 0:
            raise ConfigurationError("dt must be > 0")
        self.A = [list(map(float, row)) for row in self.A]
        self.B = [list(map(float, row)) for row in self.B]
        self.x = list(map(float, self.x))
        self._n, self._m = n, m

    @property
    def n(self) -> int:
        return self._n

    @property
    def m(self) -> int:
        return self._m

    def _deriv(self, x: list[float], u: Sequence[float]) -> list[float]:
        A, B = self.A, self.B
        n, m = self._n, self._m
        return [
            sum(A[i][j] * x[j] for j in range(n))
            + sum(B[i][k] * u[k] for k in range(m))
            for i in range(n)
        ]

    def _rk4(self, x: list[float], u: Sequence[float], h: float) -> list[float]:
        n = self._n
        k1 = self._deriv(x, u)
        k2 = self._deriv([x[i] + 0.5 * h * k1[i] for i in range(n)], u)
        k3 = self._deriv([x[i] + 0.5 * h * k2[i] for i in range(n)], u)
        k4 = self._deriv([x[i] + h * k3[i] for i in range(n)], u)
        return [
            x[i] + h * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]) / 6.0
            for i in range(n)
        ]

    def step(self, u: Sequence[float], dt: float) -> list[float]:
        """Advance the state by ``dt`` simulated seconds under input ``u``."""
        if len(u) != self._m:
            raise ConfigurationError(
                f"input length {len(u)} does not match B columns {self._m}"
            )
        if dt <= 0:
            raise ConfigurationError("step dt must be > 0")
        x = self.x
        remaining = dt
        while remaining > 1e-12:
            h = min(self.dt, remaining)
            x = self._rk4(x, u, h)
            remaining -= h
        self.x = x
        return list(x)

    def steady_state(self, u: Sequence[float]) -> list[float]:
        """Solve A x* + B u = 0; raises for singular A."""
        if len(u) != self._m:
            raise ConfigurationError("input length does not match B columns")
        A = np.array(self.A, dtype=float)
        rhs = -np.array(self.B, dtype=float) @ np.array(u, dtype=float)
        try:
            sol = np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError as exc:
            raise ConfigurationError("no unique steady state: A is singular") from exc
        if not np.all(np.isfinite(sol)):
            raise ConfigurationError("no unique steady state: A is singular")
        return [float(v) for v in sol]


def lss_step(sys: LinearStateSpace, u: Sequence[float], dt: float) -> list[float]:
    return sys.step(u, dt)


def lss_steady_state(sys: LinearStateSpace, u: Sequence[float]) -> list[float]:
    return sys.steady_state(u)


# ── Callback registry ──────────────────────────────────────────────────────


class CallbackRegistry:
    """Named, pure callback functions bound at configuration time."""

    def __init__(self):
        self._entries: dict[str, Callable[..., float]] = {}

    def register(self, name: str, fn: Callable[..., float]) -> None:
        if name in self._entries:
            raise ConfigurationError(f"callback {name!r} already registered")
        self._entries[name] = fn

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def eval(self, name: str, args: Sequence) -> float:
        if name not in self._entries:
            raise ConfigurationError(f"unknown callback {name!r}")
        return float(self._entries[name](*args))


def solar_surface(radiance_w_msq: float, surface_m2: float, efficiency: float) -> float:
    """Panel output in watts: radiance x surface x efficiency."""
    return radiance_w_msq * surface_m2 * efficiency


def builtin_registry() -> CallbackRegistry:
    reg = CallbackRegistry()
    reg.register("solar-surface", solar_surface)
    # configuration files may bind the historical alias for the same pipeline
    reg.register("getSolarSurfaceInterpolant", solar_surface)
    return reg


def eval_callback(reg: CallbackRegistry, name: str, args: Sequence) -> float:
    return reg.eval(name, args)


# ── Radiance ingestion ─────────────────────────────────────────────────────


def load_radiance_csv(path: str, mode: str = NEAREST) -> InterpolationTable:
    """Read a ``timestamp,watt_per_msq`` CSV into a table keyed by seconds
    since the start of the reference year."""
    points: list[tuple[float, float]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["timestamp", "watt_per_msq"]:
            raise ConfigurationError(
                f"{path}: expected header 'timestamp,watt_per_msq'"
            )
        year_start = None
        for row in reader:
            if not row:
                continue
            ts = datetime.fromisoformat(row[0])
            if year_start is None:
                year_start = datetime(ts.year, 1, 1, tzinfo=ts.tzinfo)
            points.append(((ts - year_start).total_seconds(), float(row[1])))
    return InterpolationTable(points, mode=mode)


def year_seconds(year: int) -> float:
    days = 366 if (year % 4 == 0 and (year % 100 != 0 or year % 400 == 0)) else 365
    return days * 86400.0
