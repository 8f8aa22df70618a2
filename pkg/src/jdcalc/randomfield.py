"""Exact evaluation of the random field defined by its differential.

The field's coefficients do not depend on the field itself, so its value at
any time and point is an explicit finite sum over the noise realization:

    F(t_j, x) = F0(x) + sum_{s<j} [dt_coeff(t_s, x) dt + dw_coeff_k(t_s, x) dw_ks]
                      + sum_{events tau <= t_j} jump_coeff(tau, x, mark)

with spatial derivatives given by the same accumulation applied to the
coefficient derivatives.  No spatial grid is involved, so snapshots are
exact in x and the only discretization is the left-endpoint time sum shared
with the state integrator.

Within a cell the continuous increment is applied first and the cell's jump
events after it, mirroring the state integrator's operator splitting: the
pre-jump snapshot of event ``k`` (cell ``c``) therefore contains ``c + 1``
continuous increments and the first ``k`` event terms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DivergenceError
from .fields import FieldCoefficientSet
from .noise import JumpStream, TimeGrid, WienerPath


@dataclass(frozen=True)
class FieldContext:
    """A field coefficient set bound to one noise realization."""

    field: FieldCoefficientSet
    grid: TimeGrid
    wiener: WienerPath
    jumps: JumpStream

    def __post_init__(self):
        if self.wiener.grid != self.grid:
            raise ConfigurationError("Wiener path and grid disagree")
        if self.wiener.m != self.field.dim_w:
            raise ConfigurationError(
                f"field expects {self.field.dim_w} Wiener components, "
                f"path has {self.wiener.m}")
        object.__setattr__(self, "_cells", self.jumps.cells(self.grid))

    def event_cell(self, k: int) -> int:
        return int(self._cells[k])

    def events_before_node(self, j: int) -> int:
        """Events lying in cells 0..j-1, i.e. with time <= t_j."""
        return int(np.searchsorted(self._cells, j, side="left"))


@dataclass(frozen=True)
class FieldValue:
    value: np.ndarray   # (...)
    grad: np.ndarray    # (..., n)
    hess: np.ndarray    # (..., n, n)


@dataclass(frozen=True)
class FieldSnapshot:
    """The field frozen after a prefix of its increments.

    ``n_cont_steps`` counts whole-cell continuous increments included;
    ``n_events`` counts jump terms included.  Evaluation at any x returns
    the exact accumulated value, gradient and Hessian.
    """

    context: FieldContext
    n_cont_steps: int
    n_events: int
    label: str = ""

    def evaluate(self, x: np.ndarray) -> FieldValue:
        ctx = self.context
        fc = ctx.field
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != fc.dim_x:
            raise ConfigurationError(f"point has dimension {x.shape[-1]}, "
                                     f"field expects {fc.dim_x}")
        dt = ctx.grid.step
        times = ctx.grid.nodes()
        dw = ctx.wiener.increments
        value = np.array(fc.initial(x), dtype=float)
        grad = np.array(fc.initial_dx(x), dtype=float)
        hess = np.array(fc.initial_dxx(x), dtype=float)
        for s in range(self.n_cont_steps):
            t = float(times[s])
            value += fc.dt_coeff(t, x) * dt + fc.dw_coeff(t, x) @ dw[s]
            grad += (fc.dt_coeff_dx(t, x) * dt
                     + np.einsum("...mn,m->...n", fc.dw_coeff_dx(t, x), dw[s]))
            hess += (fc.dt_coeff_dxx(t, x) * dt
                     + np.einsum("...mnp,m->...np", fc.dw_coeff_dxx(t, x), dw[s]))
        for e in range(self.n_events):
            tau = float(ctx.jumps.times[e])
            gamma = ctx.jumps.marks[e]
            value += fc.jump_coeff(tau, x, gamma)
            grad += fc.jump_coeff_dx(tau, x, gamma)
            hess += fc.jump_coeff_dxx(tau, x, gamma)
        if not (np.all(np.isfinite(value)) and np.all(np.isfinite(grad))
                and np.all(np.isfinite(hess))):
            raise DivergenceError(self._locate_bad_term(x))
        return FieldValue(value, grad, hess)

    def _locate_bad_term(self, x) -> str:
        ctx, fc = self.context, self.context.field
        dt = ctx.grid.step
        times = ctx.grid.nodes()
        named = [("initial", lambda: fc.initial(x)),
                 ("initial_dx", lambda: fc.initial_dx(x)),
                 ("initial_dxx", lambda: fc.initial_dxx(x))]
        for s in range(self.n_cont_steps):
            t = float(times[s])
            named += [(f"dt_coeff(t={t:.6g})", lambda t=t: fc.dt_coeff(t, x)),
                      (f"dw_coeff(t={t:.6g})", lambda t=t: fc.dw_coeff(t, x))]
        for e in range(self.n_events):
            tau, gamma = float(ctx.jumps.times[e]), ctx.jumps.marks[e]
            named.append((f"jump_coeff(t={tau:.6g})",
                          lambda tau=tau, gamma=gamma: fc.jump_coeff(tau, x, gamma)))
        for name, fn in named:
            if not np.all(np.isfinite(np.asarray(fn(), dtype=float))):
                return f"field accumulation hit a non-finite {name} term"
        return "field accumulation became non-finite"


def snapshot_at_node(ctx: FieldContext, j: int) -> FieldSnapshot:
    """Field at node time t_j: continuous steps s < j, events with tau <= t_j."""
    if not 0 <= j <= ctx.grid.n_steps:
        raise ConfigurationError(f"node index {j} outside 0..{ctx.grid.n_steps}")
    return FieldSnapshot(ctx, j, ctx.events_before_node(j), label=f"node {j}")


def terminal_snapshot(ctx: FieldContext) -> FieldSnapshot:
    return snapshot_at_node(ctx, ctx.grid.n_steps)


def pre_jump_snapshot(ctx: FieldContext, event_index: int) -> FieldSnapshot:
    """Field just before event ``event_index`` updates it.

    Excludes the event's own jump term and all later ones; includes every
    continuous increment up to the event (through its cell, matching the
    state integrator's splitting).
    """
    if not 0 <= event_index < len(ctx.jumps):
        raise ConfigurationError(
            f"event index {event_index} outside 0..{len(ctx.jumps) - 1}")
    cell = ctx.event_cell(event_index)
    return FieldSnapshot(ctx, cell + 1, event_index, label=f"pre-jump {event_index}")


def post_jump_snapshot(ctx: FieldContext, event_index: int) -> FieldSnapshot:
    """Field just after event ``event_index``: one more jump term than pre."""
    if not 0 <= event_index < len(ctx.jumps):
        raise ConfigurationError(
            f"event index {event_index} outside 0..{len(ctx.jumps) - 1}")
    cell = ctx.event_cell(event_index)
    return FieldSnapshot(ctx, cell + 1, event_index + 1, label=f"post-jump {event_index}")


def evaluate(snapshot: FieldSnapshot, x) -> FieldValue:
    """Functional alias for ``snapshot.evaluate(x)``."""
    return snapshot.evaluate(x)
