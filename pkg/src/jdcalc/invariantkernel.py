"""Grid solver for the stochastic density of the integral invariant.

Between jumps the density follows the stochastic transport equation

    d rho = [-d_x(rho a) + 1/2 d_xx(rho b b)] dt - d_x(rho b_k) dw_k,

discretized in conservative flux form on a 1-D cell grid: upwind fluxes for
the drift, centered differences of (rho b b) for the second-order flux, and
centered face averages of (rho b_k) for the stochastic flux.  Interior
fluxes telescope and boundary fluxes are zero, so each continuous step
conserves discrete mass to rounding.

At a jump event the density is pushed forward under the per-event map
h(y) = y + g(t, y, mark): rho+(x) = rho-(h^{-1}(x)) / h'(h^{-1}(x)),
with the inverse found by monotone bisection and rho- linearly interpolated
between cell centers.

``verify_duality`` certifies the defining invariance of the kernel: the
grid quadrature of rho(T) f against a particle average of f(x(T; y)) over
initial points y ~ rho(0), both driven by the identical noise realization.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import (ConfigurationError, NegativityError, NonMonotoneJumpError,
                     NumericalError, StabilityError)
from .fields import CoefficientSet, Preset
from .noise import (STREAM_PARTICLES, JumpStream, TimeGrid, WienerPath,
                    make_rng, sample_jumps, sample_wiener)
from .sde import flow_terminal

DIFFUSION_SAFETY = 0.25
ADVECTION_SAFETY = 0.5
MASS_TOLERANCE = 1e-3
BOUNDARY_RATIO = 1e-8
# Clip floor for stochastic-flux undershoot at the far tails.  Undershoot is
# proportional to local tail values (~1e-10 of the peak), so a clip window
# of 1e-8 * max(rho) absorbs discretization noise while still flagging real
# instability, which blows past it within a few steps.
NEGATIVITY_TOL = 1e-8

TEST_FUNCTIONS = {
    "one": lambda t, x: np.ones_like(x),
    "identity": lambda t, x: x,
    "square": lambda t, x: x ** 2,
    "gauss": lambda t, x: np.exp(-0.5 * x ** 2),
}


@dataclass(frozen=True)
class DensityGrid:
    """Cell-centered density with midpoint quadrature."""

    x_min: float
    x_max: float
    n_cells: int
    values: np.ndarray             # (n_cells,)
    flux_mass_drift: float = 0.0   # |mass change| of the last continuous step
    clip_defect: float = 0.0       # mass added by negativity clipping, pre-renorm
    jump_defect: float = 0.0       # |mass defect| of the last pushforward, pre-renorm

    def __post_init__(self):
        if self.n_cells < 2 or not self.x_max > self.x_min:
            raise ConfigurationError("need x_max > x_min and n_cells >= 2")
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.n_cells,):
            raise ConfigurationError(f"values shape {v.shape} != ({self.n_cells},)")
        object.__setattr__(self, "values", v)

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.n_cells

    def centers(self) -> np.ndarray:
        return self.x_min + self.dx * (np.arange(self.n_cells) + 0.5)

    def interior_faces(self) -> np.ndarray:
        return self.x_min + self.dx * np.arange(1, self.n_cells)

    def mass(self) -> float:
        return float(self.values.sum() * self.dx)

    def boundary_ratio(self) -> float:
        peak = self.values.max()
        edge = max(self.values[0], self.values[-1])
        return float(edge / peak) if peak > 0 else 0.0


def gaussian_density_grid(x_min: float, x_max: float, n_cells: int,
                          mean: float, std: float) -> DensityGrid:
    """Truncated-Gaussian initial density, renormalized to unit mass."""
    grid = DensityGrid(x_min, x_max, n_cells, np.zeros(n_cells))
    c = grid.centers()
    v = np.exp(-0.5 * ((c - mean) / std) ** 2)
    v /= v.sum() * grid.dx
    out = replace(grid, values=v)
    if out.boundary_ratio() > BOUNDARY_RATIO:
        warnings.warn("initial density does not vanish at the boundary; "
                      "the domain box is too small", stacklevel=2)
    return out


def sample_truncated_gaussian(seed: int, n: int, mean: float, std: float,
                              lo: float, hi: float, lane: int = 0) -> np.ndarray:
    """Deterministic inverse-CDF draws from the same truncated Gaussian."""
    rng = make_rng(seed, STREAM_PARTICLES, lane)
    u = rng.random(n)
    p_lo = ndtr((lo - mean) / std)
    p_hi = ndtr((hi - mean) / std)
    return mean + std * ndtri(p_lo + u * (p_hi - p_lo))


def _coeff_bounds(coeffs: CoefficientSet, xs: np.ndarray, t_samples) -> tuple:
    max_a, max_bb = 0.0, 0.0
    xb = xs[:, None]
    for t in t_samples:
        a = np.abs(coeffs.drift(t, xb)[..., 0]).max()
        b = coeffs.diffusion(t, xb)[:, 0, :]
        bb = (b * b).sum(axis=-1).max()
        max_a = max(max_a, float(a))
        max_bb = max(max_bb, float(bb))
    return max_a, max_bb


def stability_bound(coeffs: CoefficientSet, x_min: float, x_max: float,
                    n_cells: int, t_end: float) -> float:
    """Largest admissible dt for the explicit continuous step."""
    dx = (x_max - x_min) / n_cells
    xs = np.linspace(x_min, x_max, 257)
    max_a, max_bb = _coeff_bounds(coeffs, xs, (0.0, 0.5 * t_end, t_end))
    bound = np.inf
    if max_bb > 0:
        bound = min(bound, DIFFUSION_SAFETY * dx * dx / max_bb)
    if max_a > 0:
        bound = min(bound, ADVECTION_SAFETY * dx / max_a)
    return float(bound)


def check_stability(coeffs: CoefficientSet, density: DensityGrid, dt: float,
                    t_end: float):
    bound = stability_bound(coeffs, density.x_min, density.x_max,
                            density.n_cells, t_end)
    if dt > bound:
        raise StabilityError(
            f"dt = {dt:.3e} exceeds the explicit stability bound {bound:.3e}; "
            f"use at least {int(np.ceil(t_end / bound))} steps",
            suggested_dt=bound)


def stable_time_grid(preset: Preset, n_cells: int, t_end: float,
                     x_min: Optional[float] = None,
                     x_max: Optional[float] = None) -> TimeGrid:
    """Smallest power-of-two step count satisfying the stability gate."""
    lo = preset.box[0] if x_min is None else x_min
    hi = preset.box[1] if x_max is None else x_max
    bound = stability_bound(preset.coeffs, lo, hi, n_cells, t_end)
    n = 1
    while t_end / n > bound:
        n *= 2
        if n > 1 << 26:
            raise StabilityError("stability bound demands an impractical step count",
                                 suggested_dt=bound)
    return TimeGrid(t_end, n)


def step_continuous(density: DensityGrid, coeffs: CoefficientSet, t: float,
                    dt: float, dw: np.ndarray) -> DensityGrid:
    """One explicit conservative update of the continuous generator."""
    rho = density.values
    dx = density.dx
    c = density.centers()[:, None]
    f = density.interior_faces()[:, None]
    b_c = coeffs.diffusion(t, c)[:, 0, :]              # (C, m)
    bb_c = (b_c * b_c).sum(axis=-1)
    a_f = coeffs.drift(t, f)[..., 0]                   # (C-1,)

    flux_drift = np.where(a_f > 0.0, a_f * rho[:-1], a_f * rho[1:])
    q = rho * bb_c
    flux_second = 0.5 * (q[1:] - q[:-1]) / dx
    s = rho[:, None] * b_c
    flux_noise = (0.5 * (s[1:] + s[:-1])) @ np.asarray(dw, dtype=float)

    face_flux = np.zeros(density.n_cells + 1)
    face_flux[1:-1] = (flux_drift - flux_second) * dt + flux_noise
    new = rho - np.diff(face_flux) / dx

    mass_before = rho.sum() * dx
    drift = abs(new.sum() * dx - mass_before)

    clip = 0.0
    lowest = new.min()
    if lowest < 0.0:
        if lowest < -NEGATIVITY_TOL * max(1.0, new.max()):
            raise NegativityError(
                f"density undershot to {lowest:.3e} at t = {t:.6g}; the continuous "
                "step looks unstable (reduce dt or refine the grid)")
        neg = new < 0.0
        clip = float(-new[neg].sum() * dx)
        new = np.where(neg, 0.0, new)
        new *= mass_before / (new.sum() * dx)
    if not np.all(np.isfinite(new)):
        raise NumericalError(f"density became non-finite at t = {t:.6g}")
    return replace(density, values=new, flux_mass_drift=float(drift),
                   clip_defect=clip, jump_defect=0.0)


@dataclass(frozen=True)
class JumpMap:
    """Strictly increasing per-event state map h(y) = y + g(t, y, mark)."""

    forward: Callable    # y (...,) -> h(y)
    slope: Callable      # y (...,) -> h'(y) = 1 + dg/dy
    domain: tuple
    label: str = ""

    def __post_init__(self):
        ys = np.linspace(self.domain[0], self.domain[1], 1025)
        sl = np.asarray(self.slope(ys), dtype=float)
        if not np.all(sl > 0.0):
            raise NonMonotoneJumpError(
                f"jump map {self.label!r} is not strictly increasing on "
                f"{self.domain}: min slope {sl.min():.3e}")

    def inverse(self, x: np.ndarray) -> np.ndarray:
        """Monotone bisection solve of h(y) = x, vectorized over x."""
        x = np.asarray(x, dtype=float)
        width = self.domain[1] - self.domain[0]
        lo = np.full_like(x, self.domain[0])
        hi = np.full_like(x, self.domain[1])
        for _ in range(64):
            bad = self.forward(lo) > x
            if not bad.any():
                break
            lo = np.where(bad, lo - width, lo)
            width *= 2.0
        else:
            raise NumericalError(f"could not bracket h^-1 below for map {self.label!r}")
        width = self.domain[1] - self.domain[0]
        for _ in range(64):
            bad = self.forward(hi) < x
            if not bad.any():
                break
            hi = np.where(bad, hi + width, hi)
            width *= 2.0
        else:
            raise NumericalError(f"could not bracket h^-1 above for map {self.label!r}")
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            below = self.forward(mid) <= x
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return 0.5 * (lo + hi)

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        """d h^{-1}/dx evaluated at target points x: 1 / h'(h^{-1}(x))."""
        return 1.0 / self.slope(self.inverse(x))


def jump_map_for_event(coeffs: CoefficientSet, t: float, gamma: np.ndarray,
                       domain: tuple, label: str = "") -> JumpMap:
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))

    def forward(y):
        y = np.asarray(y, dtype=float)
        return y + coeffs.jump_amp(t, y[..., None], gamma)[..., 0]

    def slope(y):
        y = np.asarray(y, dtype=float)
        return 1.0 + coeffs.jump_amp_dx(t, y[..., None], gamma)[..., 0, 0]

    return JumpMap(forward, slope, domain, label=label)


def apply_jump(density: DensityGrid, jump_map: JumpMap) -> DensityGrid:
    """Pushforward of the density under the event map.

    rho+(x_j) = rho-(h^{-1}(x_j)) * D(x_j) with linear interpolation of
    rho- between cell centers; the quadrature defect is recorded and then
    renormalized away.
    """
    c = density.centers()
    y = jump_map.inverse(c)
    dens = np.interp(y, c, density.values, left=0.0, right=0.0)
    new = dens / jump_map.slope(y)
    mass_before = density.mass()
    mass_after = new.sum() * density.dx
    if mass_after <= 0.25 * mass_before:
        raise NumericalError(
            f"pushforward under {jump_map.label!r} lost {1 - mass_after / mass_before:.1%} "
            "of the mass; the domain box is too small for this jump")
    defect = abs(mass_after - mass_before)
    new *= mass_before / mass_after
    return replace(density, values=new, flux_mass_drift=0.0,
                   clip_defect=0.0, jump_defect=float(defect))


@dataclass(frozen=True)
class MassTrace:
    masses: np.ndarray            # mass after each node, len n_steps + 1
    max_mass_error: float         # max |mass - mass(0)|
    max_step_drift: float         # max per-continuous-step conservation drift
    max_clip: float
    jump_defects: List[float]
    boundary_ratio: float


def run_density(preset: Preset, density: DensityGrid, grid: TimeGrid,
                wiener: WienerPath, jumps: JumpStream,
                snapshot_times: Optional[List[float]] = None):
    """Advance the density across [0, t_end] under one noise realization.

    Returns ``(final_density, MassTrace, snapshots)`` where snapshots holds
    a DensityGrid per requested time (taken at the first node >= t).
    """
    check_stability(preset.coeffs, density, grid.step, grid.t_end)
    cells = jumps.cells(grid) if len(jumps) else np.empty(0, dtype=int)
    times = grid.nodes()
    masses = [density.mass()]
    max_drift = 0.0
    max_clip = 0.0
    jump_defects = []
    want = sorted(snapshot_times or [])
    snapshots = []
    ev = 0
    for j in range(grid.n_steps):
        density = step_continuous(density, preset.coeffs, float(times[j]),
                                  grid.step, wiener.increments[j])
        max_drift = max(max_drift, density.flux_mass_drift)
        max_clip = max(max_clip, density.clip_defect)
        while ev < len(jumps) and cells[ev] == j:
            jmap = jump_map_for_event(preset.coeffs, float(jumps.times[ev]),
                                      jumps.marks[ev],
                                      (density.x_min, density.x_max),
                                      label=preset.name)
            density = apply_jump(density, jmap)
            jump_defects.append(density.jump_defect)
            ev += 1
        masses.append(density.mass())
        while want and times[j + 1] >= want[0]:
            snapshots.append((want.pop(0), density))
    ratio = density.boundary_ratio()
    if ratio > BOUNDARY_RATIO:
        warnings.warn(f"density at the boundary reached {ratio:.2e} of the peak; "
                      "the domain box is too small", stacklevel=2)
    masses = np.array(masses)
    trace = MassTrace(masses, float(np.abs(masses - masses[0]).max()),
                      max_drift, max_clip, jump_defects, ratio)
    return density, trace, snapshots


@dataclass(frozen=True)
class DualityReport:
    preset: str
    f_name: str
    lhs: float            # grid quadrature of rho(T) f(T, .)
    rhs: float            # particle average of f(T, x(T; y))
    rel_gap: float
    mc_stderr: float
    n_cells: int
    particles: int
    n_steps: int
    seed: int
    mass_error: float


def verify_duality(preset: Preset, rho0: Optional[tuple], f_test, grid: TimeGrid,
                   particles: int, seed: int, n_cells: int,
                   wiener: Optional[WienerPath] = None,
                   jumps: Optional[JumpStream] = None,
                   particle_lane: int = 0) -> DualityReport:
    """Compare the two sides of the integral invariant on common noise.

    LHS: quadrature of rho(T, .) f(T, .) from the grid solver.  RHS: mean of
    f(T, x(T; y_p)) over particles drawn from rho(0, .).  Both run on the
    identical Wiener path and jump stream.
    """
    if isinstance(f_test, str):
        f_name, f_test = f_test, TEST_FUNCTIONS[f_test]
    else:
        f_name = getattr(f_test, "__name__", "custom")
    if rho0 is None:
        rho0 = preset.rho0
    if rho0 is None:
        raise ConfigurationError(f"preset {preset.name!r} declares no initial density")
    mean, std = rho0
    lo, hi = preset.box
    if wiener is None:
        wiener = sample_wiener(grid, preset.coeffs.dim_w, seed)
    if jumps is None:
        jumps = sample_jumps(grid, preset.mark_measure, seed)

    density = gaussian_density_grid(lo, hi, n_cells, mean, std)
    density, trace, _ = run_density(preset, density, grid, wiener, jumps)
    centers = density.centers()
    lhs = float((density.values * f_test(grid.t_end, centers)).sum() * density.dx)

    y0 = sample_truncated_gaussian(seed, particles, mean, std, lo, hi,
                                   lane=particle_lane)
    x_t = flow_terminal(y0, preset.coeffs, wiener, jumps, grid)[..., 0]
    f_vals = f_test(grid.t_end, x_t)
    rhs = float(f_vals.mean())
    mc_stderr = float(f_vals.std(ddof=1) / np.sqrt(particles))
    scale = max(abs(lhs), abs(rhs), 1e-300)
    return DualityReport(preset.name, f_name, lhs, rhs,
                         abs(lhs - rhs) / scale, mc_stderr,
                         n_cells, particles, grid.n_steps, seed,
                         trace.max_mass_error)


def write_density_csv(density: DensityGrid, path):
    """Density snapshot as two-column CSV (x, rho)."""
    with open(path, "w", newline="") as fh:
        fh.write("x,rho\n")
        for x, r in zip(density.centers(), density.values):
            fh.write(f"{x:.17g},{r:.17g}\n")
