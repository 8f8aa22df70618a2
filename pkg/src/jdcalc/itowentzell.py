"""Term-by-term evaluation of the composite differential of F(t, x(t)).

For a random field F driven by dt/dw/jump coefficients and a state x(t)
driven by drift/diffusion/jump amplitude under the same noise, the
composite increment over [0, T] decomposes into

* six continuous contributions per step, evaluated at left endpoints:
  the field's own dt and dw terms, the convective dw term (b dF/dx dw),
  the drift term (a dF/dx dt), the second-order term (1/2 b b d2F dt), and
  the cross term (b dD/dx dt);
* two exact contributions per jump event: the state jump of the pre-jump
  field, F-(x- + g) - F-(x-), and the field's own jump coefficient
  evaluated at the post-jump point.

``rhs_accumulate`` returns the full breakdown; ``verify_identity`` compares
its total against the directly evaluated increment F(T, x(T)) - F(0, x(0));
``convergence_study`` drives the residual to zero on nested grids under
Brownian-bridge-coupled noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, CouplingError, InsufficientDataError
from .fields import CoefficientSet, Preset
from .noise import (TimeGrid, WienerPath, JumpStream, check_same_noise,
                    refine_wiener, sample_jumps, sample_wiener)
from .randomfield import (FieldContext, pre_jump_snapshot, snapshot_at_node,
                          terminal_snapshot)
from .sde import StatePath, integrate, warn_if_outside_box

JUMP_EXACT_FLOOR = 1e-10

TERM_NAMES = ("field_dt", "field_dw", "convect_dw", "drift_dt",
              "secondorder_dt", "cross_dt", "state_jump", "field_jump")


@dataclass(frozen=True)
class IWTermBreakdown:
    """Per-step and per-event contributions to the composite increment."""

    field_dt: np.ndarray        # (n_steps,)
    field_dw: np.ndarray
    convect_dw: np.ndarray
    drift_dt: np.ndarray
    secondorder_dt: np.ndarray
    cross_dt: np.ndarray
    state_jump: np.ndarray      # (n_events,)
    field_jump: np.ndarray

    def totals(self) -> dict:
        return {name: float(getattr(self, name).sum()) for name in TERM_NAMES}

    @property
    def rhs_total(self) -> float:
        return float(sum(self.totals().values()))


@dataclass(frozen=True)
class ResidualReport:
    preset: str
    seed: int
    n_steps: int
    residual: float
    direct_delta: float
    rhs_total: float
    term_totals: dict
    n_events: int

    def __post_init__(self):
        if self.residual < 0:
            raise ConfigurationError("residual must be non-negative")


def rhs_accumulate(state: StatePath, field_ctx: FieldContext,
                   coeffs: CoefficientSet) -> IWTermBreakdown:
    """Accumulate every term of the composite differential along one path.

    Continuous terms use left-endpoint values (t_j, x_j); jump terms use
    the pre-jump state and the pre-jump field snapshot.  The state and the
    field context must share one noise realization.
    """
    if not (check_same_noise(state.wiener, field_ctx.wiener)
            and check_same_noise(state.jumps, field_ctx.jumps)):
        raise CouplingError(
            "state path and field context carry different noise realizations; "
            "the composite-differential identity is meaningless across them")
    grid = state.grid
    n, dt = grid.n_steps, grid.step
    times = grid.nodes()
    dw = state.wiener.increments
    fc = field_ctx.field
    x_nodes = state.nodes                     # (n+1, dim)
    lefts = x_nodes[:n]

    # Field gradient/Hessian at (t_j, x_j), built progressively: iteration s
    # first reads the (now complete) derivatives at node s, then adds the
    # step-s field increment, and any cell-s event terms, to all later nodes.
    grad_at = np.array(fc.initial_dx(lefts), dtype=float)    # (n, dim)
    hess_at = np.array(fc.initial_dxx(lefts), dtype=float)   # (n, dim, dim)

    by_cell = {}
    for rec in state.jump_records:
        by_cell.setdefault(rec.cell, []).append(rec)

    field_dt = np.zeros(n)
    field_dw = np.zeros(n)
    convect_dw = np.zeros(n)
    drift_dt = np.zeros(n)
    secondorder_dt = np.zeros(n)
    cross_dt = np.zeros(n)
    n_events = len(state.jump_records)
    state_jump = np.zeros(n_events)
    field_jump = np.zeros(n_events)

    for s in range(n):
        t = float(times[s])
        x_s = x_nodes[s]
        g1 = grad_at[s]
        h2 = hess_at[s]
        b_s = coeffs.diffusion(t, x_s)                       # (dim, m)
        a_s = coeffs.drift(t, x_s)
        d_s = fc.dw_coeff(t, x_s)                            # (m,)
        dd_s = fc.dw_coeff_dx(t, x_s)                        # (m, dim)
        field_dt[s] = fc.dt_coeff(t, x_s) * dt
        field_dw[s] = d_s @ dw[s]
        convect_dw[s] = g1 @ b_s @ dw[s]
        drift_dt[s] = (a_s @ g1) * dt
        secondorder_dt[s] = 0.5 * np.einsum("ik,jk,ij->", b_s, b_s, h2) * dt
        cross_dt[s] = np.einsum("ik,ki->", b_s, dd_s) * dt

        future = lefts[s + 1:]
        if future.size:
            grad_at[s + 1:] += (fc.dt_coeff_dx(t, future) * dt
                                + np.einsum("...mn,m->...n",
                                            fc.dw_coeff_dx(t, future), dw[s]))
            hess_at[s + 1:] += (fc.dt_coeff_dxx(t, future) * dt
                                + np.einsum("...mnp,m->...np",
                                            fc.dw_coeff_dxx(t, future), dw[s]))
        for rec in by_cell.get(s, ()):
            pre = pre_jump_snapshot(field_ctx, rec.index)
            vals = pre.evaluate(np.stack([rec.x_minus, rec.x_plus])).value
            state_jump[rec.index] = vals[1] - vals[0]
            field_jump[rec.index] = fc.jump_coeff(rec.time, rec.x_plus, rec.mark)
            if future.size:
                grad_at[s + 1:] += fc.jump_coeff_dx(rec.time, future, rec.mark)
                hess_at[s + 1:] += fc.jump_coeff_dxx(rec.time, future, rec.mark)

    return IWTermBreakdown(field_dt, field_dw, convect_dw, drift_dt,
                           secondorder_dt, cross_dt, state_jump, field_jump)


def verify_on_noise(preset: Preset, grid: TimeGrid, wiener: WienerPath,
                    jumps: JumpStream, seed: int = -1,
                    x0: Optional[float] = None) -> ResidualReport:
    """Residual of the composite-differential identity on given noise."""
    x0 = preset.x0 if x0 is None else x0
    state = integrate(x0, preset.coeffs, wiener, jumps, grid)
    warn_if_outside_box(state.nodes, preset)
    ctx = FieldContext(preset.field, grid, wiener, jumps)
    breakdown = rhs_accumulate(state, ctx, preset.coeffs)
    start = snapshot_at_node(ctx, 0).evaluate(state.nodes[0]).value
    end = terminal_snapshot(ctx).evaluate(state.terminal()).value
    direct = float(end - start)
    rhs = breakdown.rhs_total
    return ResidualReport(preset.name, seed, grid.n_steps,
                          abs(direct - rhs), direct, rhs,
                          breakdown.totals(), len(jumps))


def verify_identity(preset: Preset, grid: TimeGrid, seed: int,
                    x0: Optional[float] = None) -> ResidualReport:
    """Sample one noise realization and certify the identity on it.

    For jump-only presets the residual sits at the exactness floor
    (<= 1e-10); otherwise it is the finite time-discretization error.
    """
    wiener = sample_wiener(grid, preset.coeffs.dim_w, seed)
    jumps = sample_jumps(grid, preset.mark_measure, seed)
    return verify_on_noise(preset, grid, wiener, jumps, seed=seed, x0=x0)


@dataclass(frozen=True)
class ConvergenceRow:
    n_steps: int
    mean_residual: float
    stderr: float


@dataclass(frozen=True)
class ConvergenceResult:
    preset: str
    rows: List[ConvergenceRow]
    slope: float          # positive decay order in log2(n); inf when exact
    exact: bool

    @property
    def mean_residuals(self) -> np.ndarray:
        return np.array([r.mean_residual for r in self.rows])


def _check_nesting(n_list: Sequence[int]) -> List[int]:
    if len(n_list) < 3:
        raise InsufficientDataError(
            f"need at least 3 grid levels for a convergence fit, got {len(n_list)}")
    factors = []
    for lo, hi in zip(n_list, n_list[1:]):
        if hi <= lo:
            raise ConfigurationError("step counts must be strictly increasing")
        if hi % lo != 0 or hi // lo < 2:
            raise ConfigurationError(
                f"grids must be nested by integer factors >= 2; got {lo} -> {hi}")
        factors.append(hi // lo)
    return factors


def residual_ladder(preset: Preset, n_list: Sequence[int], seed: int,
                    t_end: float = 1.0) -> List[float]:
    """Identity residual per grid level for one seed, with the Brownian path
    shared across levels through bridge refinement (the jump stream is
    grid-independent by construction)."""
    n_list = [int(n) for n in n_list]
    factors = _check_nesting(n_list)
    grid = TimeGrid(t_end, n_list[0])
    wiener = sample_wiener(grid, preset.coeffs.dim_w, seed)
    jumps = sample_jumps(grid, preset.mark_measure, seed)
    out = []
    for level in range(len(n_list)):
        if level > 0:
            wiener = refine_wiener(wiener, factors[level - 1], seed, lane=level)
            grid = wiener.grid
        out.append(verify_on_noise(preset, grid, wiener, jumps, seed=seed).residual)
    return out


def classic_ladder(preset: Preset, n_list: Sequence[int], seed: int,
                   t_end: float = 1.0) -> List[tuple]:
    """Per-level comparison against a closed-form oracle, one seed.

    Requires a preset with a terminal-state oracle and a deterministic
    field profile.  Returns ``(n, match_err, residual, strong_err)`` rows:
    ``match_err`` is the gap between the accumulated right-hand side and
    the oracle increment F0(x_oracle(T)) - F0(x0) (zero up to rounding when
    the term set reduces exactly), ``residual`` the identity residual and
    ``strong_err`` the pathwise state error of the integrator.
    """
    if preset.state_oracle is None:
        raise ConfigurationError(f"preset {preset.name!r} has no closed-form oracle")
    n_list = [int(n) for n in n_list]
    factors = _check_nesting(n_list)
    grid = TimeGrid(t_end, n_list[0])
    wiener = sample_wiener(grid, preset.coeffs.dim_w, seed)
    jumps = sample_jumps(grid, preset.mark_measure, seed)
    f0 = preset.field.initial
    rows = []
    for level in range(len(n_list)):
        if level > 0:
            wiener = refine_wiener(wiener, factors[level - 1], seed, lane=level)
            grid = wiener.grid
        report = verify_on_noise(preset, grid, wiener, jumps, seed=seed)
        w_total = wiener.total()[0]
        x_exact = preset.state_oracle(preset.x0, t_end, w_total)
        closed = float(f0(np.array([x_exact])) - f0(np.array([preset.x0])))
        state = integrate(preset.x0, preset.coeffs, wiener, jumps, grid)
        strong = abs(float(state.terminal()[0]) - x_exact)
        rows.append((grid.n_steps, abs(report.rhs_total - closed),
                     report.residual, strong))
    return rows


def convergence_study(preset: Preset, n_list: Sequence[int], seeds: Sequence[int],
                      t_end: float = 1.0) -> ConvergenceResult:
    """Mean |residual| per step count under common random numbers.

    Every level of one seed reuses the same Brownian path through bridge
    refinement and the same (grid-independent) jump stream, so the decay is
    a pure discretization effect.
    """
    n_list = [int(n) for n in n_list]
    _check_nesting(n_list)
    if len(seeds) == 0:
        raise InsufficientDataError("need at least one seed")
    residuals = np.array([residual_ladder(preset, n_list, seed, t_end)
                          for seed in seeds])
    means = residuals.mean(axis=0)
    stderr = residuals.std(axis=0, ddof=1) / np.sqrt(len(seeds)) if len(seeds) > 1 \
        else np.zeros(len(n_list))
    rows = [ConvergenceRow(n, float(m), float(se))
            for n, m, se in zip(n_list, means, stderr)]
    exact = bool(np.all(means <= JUMP_EXACT_FLOOR))
    if exact:
        slope = float("inf")
    else:
        fit = np.polyfit(np.log2(n_list), np.log2(np.maximum(means, 1e-300)), 1)
        slope = float(-fit[0])
    return ConvergenceResult(preset.name, rows, slope, exact)
