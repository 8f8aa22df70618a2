"""Reproducible Wiener paths and finite-activity Poisson jump streams.

All randomness in jdcalc flows through this module.  Sampling uses numpy's
Philox bit generator, a counter-based RNG: every draw is a pure function of
a 128-bit key, so identical ``(config, seed)`` pairs give bit-identical
output on any machine running the same numpy build, and independent
substreams are obtained by varying the second key word instead of by
sequential state mutation.

Key layout: ``key = [seed, (stream << 32) | lane]`` where ``stream`` is one
of the ``STREAM_*`` constants below and ``lane`` distinguishes repeated uses
inside one logical stream (e.g. successive refinement levels).

Jump events are generated in continuous time on ``(0, t_end]`` and are never
tied to a particular step grid: the same ``(seed, measure, t_end)`` yields
the same event list no matter how finely time is discretized.  Solvers
assign each event to the grid cell ``(t_j, t_{j+1}]`` containing it and
apply it between node updates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError

STREAM_WIENER = 1
STREAM_JUMPS = 2
STREAM_REFINE = 3
STREAM_PARTICLES = 4
STREAM_VALIDATE = 5

_MASK32 = (1 << 32) - 1


def make_rng(seed: int, stream: int, lane: int = 0) -> np.random.Generator:
    """Counter-based generator for (seed, stream, lane); pure and stateless."""
    if seed < 0:
        raise ConfigurationError(f"seed must be non-negative, got {seed}")
    key = np.array([np.uint64(seed), np.uint64((stream << 32) | (lane & _MASK32))])
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, t_end] with n_steps cells."""

    t_end: float
    n_steps: int

    def __post_init__(self):
        if not (self.t_end > 0.0 and np.isfinite(self.t_end)):
            raise ConfigurationError(f"t_end must be positive and finite, got {self.t_end}")
        if self.n_steps < 1:
            raise ConfigurationError(f"n_steps must be >= 1, got {self.n_steps}")

    @property
    def step(self) -> float:
        return self.t_end / self.n_steps

    def nodes(self) -> np.ndarray:
        """Node times t_0 = 0, ..., t_n = t_end (exact endpoints)."""
        return np.linspace(0.0, self.t_end, self.n_steps + 1)

    def refined(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.t_end, self.n_steps * factor)


@dataclass(frozen=True)
class MarkMeasure:
    """Finite-activity jump measure: total rate times a normalized mark law.

    ``sampler(rng, size)`` must return an array of shape ``(size, mark_dim)``.
    ``mean``/``std`` are optional per-component moments declared by built-in
    constructors; when present they are checked against a Monte Carlo draw
    at construction.
    """

    total_rate: float
    mark_dim: int = 1
    sampler: Optional[Callable[[np.random.Generator, int], np.ndarray]] = None
    mean: Optional[tuple] = None
    std: Optional[tuple] = None
    name: str = "custom"

    def __post_init__(self):
        if not (self.total_rate >= 0.0 and np.isfinite(self.total_rate)):
            raise ConfigurationError(f"total_rate must be finite and >= 0, got {self.total_rate}")
        if self.mark_dim < 1:
            raise ConfigurationError(f"mark_dim must be >= 1, got {self.mark_dim}")
        if self.sampler is not None and self.mean is not None:
            self._check_moments()

    def _check_moments(self, n: int = 4096):
        rng = make_rng(0, STREAM_VALIDATE)
        draws = np.asarray(self.sampler(rng, n), dtype=float)
        if draws.shape != (n, self.mark_dim):
            raise ConfigurationError(
                f"mark sampler returned shape {draws.shape}, expected {(n, self.mark_dim)}"
            )
        mean = np.asarray(self.mean, dtype=float)
        std = np.zeros(self.mark_dim) if self.std is None else np.asarray(self.std, dtype=float)
        tol = 5.0 * std / np.sqrt(n) + 1e-12
        err = np.abs(draws.mean(axis=0) - mean)
        if np.any(err > tol):
            raise ConfigurationError(
                f"mark sampler {self.name!r} failed its moment check: "
                f"|sample mean - declared mean| = {err} > {tol}"
            )

    def draw_marks(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if size == 0 or self.sampler is None:
            return np.zeros((size, self.mark_dim))
        marks = np.asarray(self.sampler(rng, size), dtype=float)
        return marks.reshape(size, self.mark_dim)


def point_mark_measure(rate: float, value: float, mark_dim: int = 1) -> MarkMeasure:
    """Degenerate mark law: every mark equals ``value`` in each component."""
    vals = (float(value),) * mark_dim

    def sampler(rng, size):
        return np.full((size, mark_dim), float(value))

    return MarkMeasure(rate, mark_dim, sampler, mean=vals, std=(0.0,) * mark_dim,
                       name=f"point({value})")


def normal_mark_measure(rate: float, mean: float, std: float, mark_dim: int = 1) -> MarkMeasure:
    def sampler(rng, size):
        return rng.normal(mean, std, size=(size, mark_dim))

    return MarkMeasure(rate, mark_dim, sampler, mean=(mean,) * mark_dim,
                       std=(std,) * mark_dim, name=f"normal({mean},{std})")


def uniform_mark_measure(rate: float, lo: float, hi: float, mark_dim: int = 1) -> MarkMeasure:
    if not hi > lo:
        raise ConfigurationError("uniform mark measure needs hi > lo")
    m, s = 0.5 * (lo + hi), (hi - lo) / np.sqrt(12.0)

    def sampler(rng, size):
        return rng.uniform(lo, hi, size=(size, mark_dim))

    return MarkMeasure(rate, mark_dim, sampler, mean=(m,) * mark_dim,
                       std=(s,) * mark_dim, name=f"uniform({lo},{hi})")


@dataclass(frozen=True)
class WienerPath:
    """Increments of an m-component Wiener process on a TimeGrid.

    ``increments[j, k] ~ Normal(0, step)`` independently over j and k.
    """

    grid: TimeGrid
    increments: np.ndarray  # shape (n_steps, m)

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.ndim != 2 or inc.shape[0] != self.grid.n_steps:
            raise ConfigurationError(
                f"increments shape {inc.shape} inconsistent with n_steps={self.grid.n_steps}"
            )
        object.__setattr__(self, "increments", inc)
        inc.setflags(write=False)

    @property
    def m(self) -> int:
        return self.increments.shape[1]

    def total(self) -> np.ndarray:
        """w(t_end), one entry per component."""
        return self.increments.sum(axis=0)


@dataclass(frozen=True)
class JumpStream:
    """Ordered jump events (times in (0, t_end], one mark row per event)."""

    t_end: float
    times: np.ndarray   # shape (k,)
    marks: np.ndarray   # shape (k, mark_dim)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        g = np.asarray(self.marks, dtype=float)
        if t.ndim != 1 or g.ndim != 2 or g.shape[0] != t.shape[0]:
            raise ConfigurationError(f"inconsistent jump stream shapes {t.shape}, {g.shape}")
        if t.size and (t[0] <= 0.0 or t[-1] > self.t_end or np.any(np.diff(t) <= 0.0)):
            raise ConfigurationError("jump times must be strictly increasing within (0, t_end]")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "marks", g)
        t.setflags(write=False)
        g.setflags(write=False)

    def __len__(self) -> int:
        return self.times.shape[0]

    def cells(self, grid: TimeGrid) -> np.ndarray:
        """Index j of the cell (t_j, t_{j+1}] containing each event."""
        idx = np.searchsorted(grid.nodes(), self.times, side="left") - 1
        return np.clip(idx, 0, grid.n_steps - 1)

    def count_until(self, t: float) -> int:
        """Number of events with time <= t."""
        return int(np.searchsorted(self.times, t, side="right"))


@dataclass(frozen=True)
class NoisePath:
    """One shared realization: a Wiener path plus a jump stream."""

    grid: TimeGrid
    wiener: WienerPath
    jumps: JumpStream


def sample_wiener(grid: TimeGrid, m: int, seed: int) -> WienerPath:
    """Sample i.i.d. Normal(0, step) increments; pure in (grid, m, seed)."""
    if m < 1:
        raise ConfigurationError(f"Wiener dimension m must be >= 1, got {m}")
    rng = make_rng(seed, STREAM_WIENER)
    inc = rng.normal(0.0, np.sqrt(grid.step), size=(grid.n_steps, m))
    return WienerPath(grid, inc)


def sample_jumps(grid: TimeGrid, measure: MarkMeasure, seed: int) -> JumpStream:
    """Sample a Poisson(rate * t_end) number of events, uniform in time.

    Event times live in continuous time, independent of grid resolution;
    only ``grid.t_end`` enters.  Marks are i.i.d. from the mark law.
    """
    rng = make_rng(seed, STREAM_JUMPS)
    lam = measure.total_rate * grid.t_end
    count = int(rng.poisson(lam)) if lam > 0.0 else 0
    if count == 0:
        return JumpStream(grid.t_end, np.empty(0), np.empty((0, measure.mark_dim)))
    # 1 - U maps [0,1) draws onto (0,1]; sort and de-collide at float level.
    times = np.sort(grid.t_end * (1.0 - rng.random(count)))
    for i in range(1, count):
        if times[i] <= times[i - 1]:
            times[i] = np.nextafter(times[i - 1], np.inf)
    marks = measure.draw_marks(rng, count)
    return JumpStream(grid.t_end, times, marks)


def sample_noise_path(grid: TimeGrid, m: int, measure: MarkMeasure, seed: int) -> NoisePath:
    """Wiener path and jump stream from disjoint substreams of one seed."""
    return NoisePath(grid, sample_wiener(grid, m, seed), sample_jumps(grid, measure, seed))


def refine_wiener(path: WienerPath, factor: int, seed: int, lane: int = 0) -> WienerPath:
    """Brownian-bridge refinement onto a grid ``factor`` times finer.

    Each coarse increment is split into ``factor`` fine increments whose sum
    reproduces the coarse increment exactly (up to float associativity) and
    whose conditional law is the correct Brownian bridge: i.i.d. centered
    Gaussians recentered so each group sums to the coarse value.
    """
    if factor < 2:
        raise ConfigurationError(f"refinement factor must be >= 2, got {factor}")
    rng = make_rng(seed, STREAM_REFINE, lane)
    n, m = path.increments.shape
    h_fine = path.grid.step / factor
    xi = rng.normal(0.0, np.sqrt(h_fine), size=(n, factor, m))
    fine = xi - xi.mean(axis=1, keepdims=True) + path.increments[:, None, :] / factor
    return WienerPath(path.grid.refined(factor), fine.reshape(n * factor, m))


def check_same_noise(a, b) -> bool:
    """True when two (WienerPath | JumpStream | NoisePath) carry equal data."""
    if isinstance(a, NoisePath) and isinstance(b, NoisePath):
        return check_same_noise(a.wiener, b.wiener) and check_same_noise(a.jumps, b.jumps)
    if isinstance(a, WienerPath) and isinstance(b, WienerPath):
        return a.grid == b.grid and np.array_equal(a.increments, b.increments)
    if isinstance(a, JumpStream) and isinstance(b, JumpStream):
        return (a.t_end == b.t_end and np.array_equal(a.times, b.times)
                and np.array_equal(a.marks, b.marks))
    return False
