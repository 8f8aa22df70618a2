"""Strong pathwise integrator for the jump-diffusion state equation.

Euler-Maruyama with operator splitting: within each grid cell the drift and
diffusion increment is applied with left-endpoint coefficients, then every
jump event inside the cell is applied atomically, in time order, as
``x <- x + jump_amp(tau, x, mark)``.  Jumps therefore carry no
discretization error, and recorded pre/post states satisfy
``x_plus - x_minus = jump_amp(tau, x_minus, mark)`` exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .errors import ConfigurationError, DivergenceError
from .fields import CoefficientSet, Preset
from .noise import JumpStream, TimeGrid, WienerPath


@dataclass(frozen=True)
class JumpRecord:
    index: int          # position in the jump stream
    time: float
    cell: int           # grid cell (t_j, t_{j+1}] containing the event
    mark: np.ndarray    # (mark_dim,)
    x_minus: np.ndarray  # (..., n) state just before the jump
    x_plus: np.ndarray   # (..., n) state just after


@dataclass(frozen=True)
class StatePath:
    """Node states plus exact jump bookkeeping for one noise realization."""

    grid: TimeGrid
    nodes: np.ndarray                  # (n_steps + 1, ..., n)
    jump_records: List[JumpRecord]
    wiener: WienerPath
    jumps: JumpStream

    def terminal(self) -> np.ndarray:
        return self.nodes[-1]


def _check_setup(coeffs: CoefficientSet, wiener: WienerPath, grid: TimeGrid):
    if wiener.m != coeffs.dim_w:
        raise ConfigurationError(
            f"coefficients expect {coeffs.dim_w} Wiener components, path has {wiener.m}")
    if wiener.grid != grid:
        raise ConfigurationError("Wiener path was sampled on a different time grid")


def _euler_steps(x0, coeffs, wiener, jumps, grid, record_nodes, record_jumps):
    """Shared stepping core; x0 has shape (..., n)."""
    dt = grid.step
    node_times = grid.nodes()
    cells = jumps.cells(grid) if len(jumps) else np.empty(0, dtype=int)
    x = np.array(x0, dtype=float)
    nodes = [x.copy()] if record_nodes else None
    records = []
    ev = 0
    n_events = len(jumps)
    for j in range(grid.n_steps):
        t = node_times[j]
        a = coeffs.drift(t, x)
        b = coeffs.diffusion(t, x)
        x = x + a * dt + b @ wiener.increments[j]
        while ev < n_events and cells[ev] == j:
            gamma = jumps.marks[ev]
            x_minus = x.copy()
            x = x + coeffs.jump_amp(float(jumps.times[ev]), x, gamma)
            if record_jumps:
                records.append(JumpRecord(ev, float(jumps.times[ev]), j,
                                          gamma, x_minus, x.copy()))
            ev += 1
        if not np.all(np.isfinite(x)):
            raise DivergenceError(
                f"state became non-finite during step {j} (t = {node_times[j + 1]:.6g})",
                step=j)
        if record_nodes:
            nodes.append(x.copy())
    return (np.stack(nodes, axis=0) if record_nodes else x), records


def integrate(x0, coeffs: CoefficientSet, wiener: WienerPath, jumps: JumpStream,
              grid: TimeGrid) -> StatePath:
    """Integrate a single initial point; returns the full node history."""
    _check_setup(coeffs, wiener, grid)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (coeffs.dim_x,):
        raise ConfigurationError(f"x0 shape {x0.shape} != ({coeffs.dim_x},)")
    nodes, records = _euler_steps(x0, coeffs, wiener, jumps, grid,
                                  record_nodes=True, record_jumps=True)
    return StatePath(grid, nodes, records, wiener, jumps)


def flow_map(y_batch: Sequence, coeffs: CoefficientSet, wiener: WienerPath,
             jumps: JumpStream, grid: TimeGrid) -> List[StatePath]:
    """Integrate many initial points under one shared noise realization.

    All particles see the same Wiener increments and the same jump events;
    a state-dependent jump amplitude is evaluated per particle.
    """
    _check_setup(coeffs, wiener, grid)
    y = np.asarray(y_batch, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[-1] != coeffs.dim_x:
        raise ConfigurationError(f"initial points have dimension {y.shape[-1]}, "
                                 f"expected {coeffs.dim_x}")
    nodes, records = _euler_steps(y, coeffs, wiener, jumps, grid,
                                  record_nodes=True, record_jumps=True)
    paths = []
    for p in range(y.shape[0]):
        recs = [JumpRecord(r.index, r.time, r.cell, r.mark,
                           r.x_minus[p], r.x_plus[p]) for r in records]
        paths.append(StatePath(grid, nodes[:, p, :], recs, wiener, jumps))
    return paths


def flow_terminal(y_batch, coeffs: CoefficientSet, wiener: WienerPath,
                  jumps: JumpStream, grid: TimeGrid) -> np.ndarray:
    """Terminal states only, for large particle clouds; O(batch) memory."""
    _check_setup(coeffs, wiener, grid)
    y = np.asarray(y_batch, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    x, _ = _euler_steps(y, coeffs, wiener, jumps, grid,
                        record_nodes=False, record_jumps=False)
    return x


def warn_if_outside_box(path_nodes: np.ndarray, preset: Preset):
    """Boundedness of preset callbacks is only guaranteed on the box."""
    lo, hi = preset.box
    if path_nodes.min() < lo or path_nodes.max() > hi:
        warnings.warn(
            f"trajectory left the domain box [{lo}, {hi}] of preset "
            f"{preset.name!r}; coefficient bounds no longer guaranteed",
            stacklevel=2)
