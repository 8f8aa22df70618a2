"""Closed-form coefficient sets for the state equation and the random field.

Shape conventions (used by every solver in the package):

* state points ``x`` have shape ``(..., n)`` where ``...`` is an arbitrary
  batch (empty for a single point, ``(P,)`` for a particle cloud);
* ``drift(t, x) -> (..., n)``, ``diffusion(t, x) -> (..., n, m)``,
  ``jump_amp(t, x, gamma) -> (..., n)`` with ``gamma`` of shape ``(n',)``;
* spatial derivatives append their differentiation axes last:
  ``drift_dx -> (..., n, n)`` with ``[..., i, j] = d a_i / d x_j``,
  ``diffusion_dx -> (..., n, m, n)``, ``diffusion_dxx -> (..., n, m, n, n)``,
  ``jump_amp_dx -> (..., n, n)``;
* field coefficients are scalar valued: ``dt_coeff(t, x) -> (...)``,
  ``dw_coeff(t, x) -> (..., m)``, ``jump_coeff(t, x, gamma) -> (...)``,
  ``initial(x) -> (...)``, each with ``_dx``/``_dxx`` variants.

``t`` is always a python float.  Callbacks must be pure, reentrant and
numpy-vectorized over the batch axes.

Presets bundle a state coefficient set, a field coefficient set, a mark
measure, a domain box on which boundedness is guaranteed, and (when one
exists) a closed-form terminal-state oracle used by convergence tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, PresetLookupError
from .noise import MarkMeasure, point_mark_measure

_EPS = np.finfo(float).eps
FD_STEP_GRAD = _EPS ** (1.0 / 3.0)
FD_STEP_HESS = _EPS ** 0.25
DERIVATIVE_TOL = 1e-5


@dataclass(frozen=True)
class CoefficientSet:
    """Drift / diffusion / jump amplitude of the state equation, with
    analytic spatial derivatives."""

    dim_x: int
    dim_w: int
    mark_dim: int
    drift: Callable
    diffusion: Callable
    jump_amp: Callable
    drift_dx: Callable
    diffusion_dx: Callable
    diffusion_dxx: Callable
    jump_amp_dx: Callable


@dataclass(frozen=True)
class FieldCoefficientSet:
    """Coefficients of the random field differential
    dF = dt_coeff dt + dw_coeff_k dw_k + integral(jump_coeff nu), plus the
    initial profile, all with analytic first and second x-derivatives."""

    dim_x: int
    dim_w: int
    mark_dim: int
    dt_coeff: Callable
    dt_coeff_dx: Callable
    dt_coeff_dxx: Callable
    dw_coeff: Callable
    dw_coeff_dx: Callable
    dw_coeff_dxx: Callable
    jump_coeff: Callable
    jump_coeff_dx: Callable
    jump_coeff_dxx: Callable
    initial: Callable
    initial_dx: Callable
    initial_dxx: Callable


def _ew(fn, shape, *args):
    """Evaluate an elementwise scalar callback, broadcasting constants."""
    out = np.asarray(fn(*args), dtype=float)
    return np.broadcast_to(out, shape)


def scalar_state_coeffs(a, da, b_triples, g=None, dg=None, mark_dim=1) -> CoefficientSet:
    """Build a 1-D (n = 1) CoefficientSet from scalar elementwise callbacks.

    ``a(t, u)``/``da(t, u)`` give the drift and its u-derivative;
    ``b_triples`` is a list of ``(b_k, db_k, d2b_k)`` per Wiener component;
    ``g(t, u, mark)``/``dg(t, u, mark)`` give the jump amplitude (mark is the
    scalar first component of the mark vector).  Missing g means no jumps.
    """
    m = len(b_triples)
    if m < 1:
        raise ConfigurationError("need at least one diffusion column")
    if g is None:
        g = lambda t, u, c: np.zeros_like(u)
        dg = lambda t, u, c: np.zeros_like(u)
    if dg is None:
        raise ConfigurationError("analytic dg must accompany g")

    def drift(t, x):
        u = x[..., 0]
        return _ew(a, u.shape, t, u)[..., None]

    def drift_dx(t, x):
        u = x[..., 0]
        return _ew(da, u.shape, t, u)[..., None, None]

    def diffusion(t, x):
        u = x[..., 0]
        cols = [_ew(bk, u.shape, t, u) for bk, _, _ in b_triples]
        return np.stack(cols, axis=-1)[..., None, :]

    def diffusion_dx(t, x):
        u = x[..., 0]
        cols = [_ew(dbk, u.shape, t, u) for _, dbk, _ in b_triples]
        return np.stack(cols, axis=-1)[..., None, :, None]

    def diffusion_dxx(t, x):
        u = x[..., 0]
        cols = [_ew(d2bk, u.shape, t, u) for _, _, d2bk in b_triples]
        return np.stack(cols, axis=-1)[..., None, :, None, None]

    def jump_amp(t, x, gamma):
        u = x[..., 0]
        return _ew(g, u.shape, t, u, gamma[0])[..., None]

    def jump_amp_dx(t, x, gamma):
        u = x[..., 0]
        return _ew(dg, u.shape, t, u, gamma[0])[..., None, None]

    return CoefficientSet(1, m, mark_dim, drift, diffusion, jump_amp,
                          drift_dx, diffusion_dx, diffusion_dxx, jump_amp_dx)


def scalar_field_coeffs(q, dq, d2q, d_triples, big_g, dg, d2g, f0, df0, d2f0,
                        mark_dim=1) -> FieldCoefficientSet:
    """Build a 1-D FieldCoefficientSet from scalar elementwise callbacks."""
    m = len(d_triples)
    if m < 1:
        raise ConfigurationError("need at least one dw column")

    def dt_coeff(t, x):
        u = x[..., 0]
        return _ew(q, u.shape, t, u)

    def dt_coeff_dx(t, x):
        u = x[..., 0]
        return _ew(dq, u.shape, t, u)[..., None]

    def dt_coeff_dxx(t, x):
        u = x[..., 0]
        return _ew(d2q, u.shape, t, u)[..., None, None]

    def dw_coeff(t, x):
        u = x[..., 0]
        return np.stack([_ew(dk, u.shape, t, u) for dk, _, _ in d_triples], axis=-1)

    def dw_coeff_dx(t, x):
        u = x[..., 0]
        return np.stack([_ew(ddk, u.shape, t, u) for _, ddk, _ in d_triples],
                        axis=-1)[..., None]

    def dw_coeff_dxx(t, x):
        u = x[..., 0]
        return np.stack([_ew(d2dk, u.shape, t, u) for _, _, d2dk in d_triples],
                        axis=-1)[..., None, None]

    def jump_coeff(t, x, gamma):
        u = x[..., 0]
        return _ew(big_g, u.shape, t, u, gamma[0])

    def jump_coeff_dx(t, x, gamma):
        u = x[..., 0]
        return _ew(dg, u.shape, t, u, gamma[0])[..., None]

    def jump_coeff_dxx(t, x, gamma):
        u = x[..., 0]
        return _ew(d2g, u.shape, t, u, gamma[0])[..., None, None]

    def initial(x):
        u = x[..., 0]
        return _ew(f0, u.shape, u)

    def initial_dx(x):
        u = x[..., 0]
        return _ew(df0, u.shape, u)[..., None]

    def initial_dxx(x):
        u = x[..., 0]
        return _ew(d2f0, u.shape, u)[..., None, None]

    return FieldCoefficientSet(1, m, mark_dim, dt_coeff, dt_coeff_dx, dt_coeff_dxx,
                               dw_coeff, dw_coeff_dx, dw_coeff_dxx,
                               jump_coeff, jump_coeff_dx, jump_coeff_dxx,
                               initial, initial_dx, initial_dxx)


@dataclass(frozen=True)
class Preset:
    """Named test scenario: state + field coefficients on a domain box."""

    name: str
    description: str
    coeffs: CoefficientSet
    field: FieldCoefficientSet
    mark_measure: MarkMeasure
    box: tuple        # (lo, hi) per the single state component
    x0: float
    jump_only: bool = False
    kernel_ok: bool = False
    state_dependent_jump: bool = False
    rho0: Optional[tuple] = None          # (mean, std) of the initial density
    state_oracle: Optional[Callable] = None  # oracle(x0, t, w_total) -> x(t)


def _zeros3():
    z = lambda t, u: np.zeros_like(u)
    return (z, z, z)


def _const3(c):
    return (lambda t, u: c + 0.0 * u,
            lambda t, u: np.zeros_like(u),
            lambda t, u: np.zeros_like(u))


def _null_field():
    z2 = lambda t, u: np.zeros_like(u)
    z3 = lambda t, u, c: np.zeros_like(u)
    return dict(q=z2, dq=z2, d2q=z2, d_triples=[_zeros3()],
                big_g=z3, dg=z3, d2g=z3)


def _build_catalog():
    cat = {}

    def add(p):
        if p.name in cat:
            raise ConfigurationError(f"duplicate preset name {p.name!r}")
        cat[p.name] = p

    no_jumps = point_mark_measure(0.0, 0.0)

    # Null dynamics: everything frozen, field profile F(t, x) = x.
    add(Preset(
        name="zero",
        description="all coefficients vanish; F(t,x) = x for all t",
        coeffs=scalar_state_coeffs(*_zeros3()[:2], b_triples=[_zeros3()]),
        field=scalar_field_coeffs(**_null_field(), f0=lambda u: u,
                                  df0=lambda u: np.ones_like(u),
                                  d2f0=lambda u: np.zeros_like(u)),
        mark_measure=no_jumps,
        box=(-10.0, 10.0), x0=0.0, kernel_ok=False,
    ))

    # Geometric Brownian motion observed through its logarithm.  The field
    # is the deterministic profile F(t,x) = ln x, so the chain-rule terms
    # reduce to d ln x = (mu - sigma^2/2) dt + sigma dw.
    mu, sigma = 0.05, 0.2

    def gbm_oracle(x0, t, w):
        return x0 * math.exp((mu - 0.5 * sigma * sigma) * t + sigma * float(w))

    add(Preset(
        name="gbm-log",
        description="dx = mu x dt + sigma x dw observed through F = ln x "
                    f"(mu={mu}, sigma={sigma}); closed-form state oracle",
        coeffs=scalar_state_coeffs(
            a=lambda t, u: mu * u, da=lambda t, u: mu + 0.0 * u,
            b_triples=[(lambda t, u: sigma * u,
                        lambda t, u: sigma + 0.0 * u,
                        lambda t, u: np.zeros_like(u))]),
        field=scalar_field_coeffs(**_null_field(),
                                  f0=np.log,
                                  df0=lambda u: 1.0 / u,
                                  d2f0=lambda u: -1.0 / u ** 2),
        mark_measure=no_jumps,
        box=(0.2, 5.0), x0=1.0,
        state_oracle=gbm_oracle,
    ))

    # Wiener-only random field: the no-jump chain rule with its cross term.
    add(Preset(
        name="classical-iw",
        description="no jumps; dx = -0.5 x dt + 0.3 dw with a dw-driven field, "
                    "exercising the cross term b dD/dx",
        coeffs=scalar_state_coeffs(
            a=lambda t, u: -0.5 * u, da=lambda t, u: -0.5 + 0.0 * u,
            b_triples=[_const3(0.3)]),
        field=scalar_field_coeffs(
            q=lambda t, u: 0.4 * np.cos(u),
            dq=lambda t, u: -0.4 * np.sin(u),
            d2q=lambda t, u: -0.4 * np.cos(u),
            d_triples=[(lambda t, u: 0.25 * np.sin(u),
                        lambda t, u: 0.25 * np.cos(u),
                        lambda t, u: -0.25 * np.sin(u))],
            big_g=lambda t, u, c: np.zeros_like(u),
            dg=lambda t, u, c: np.zeros_like(u),
            d2g=lambda t, u, c: np.zeros_like(u),
            f0=np.sin, df0=np.cos, d2f0=lambda u: -np.sin(u)),
        mark_measure=no_jumps,
        box=(-4.0, 4.0), x0=0.5,
    ))

    # Jump-only dynamics with F(t,x) = x^2: the composite differential
    # telescopes exactly, so the identity holds to machine precision.
    add(Preset(
        name="pure-jump-quadratic",
        description="a = b = 0, jumps of fixed size 0.5 at rate 3, F = x^2; "
                    "the identity is exact at any step count",
        coeffs=scalar_state_coeffs(
            *_zeros3()[:2], b_triples=[_zeros3()],
            g=lambda t, u, c: c + 0.0 * u, dg=lambda t, u, c: np.zeros_like(u)),
        field=scalar_field_coeffs(**_null_field(),
                                  f0=lambda u: u ** 2,
                                  df0=lambda u: 2.0 * u,
                                  d2f0=lambda u: 2.0 + 0.0 * u),
        mark_measure=point_mark_measure(3.0, 0.5),
        box=(-10.0, 10.0), x0=0.0,
        jump_only=True,
    ))

    # Full mix: contracting drift, additive noise, state-independent jumps,
    # and a field with all three stochastic contributions switched on.
    add(Preset(
        name="mixed",
        description="dx = -x dt + 0.3 dw + jumps of size 0.4 at rate 1; "
                    "field with nonzero dt, dw and jump coefficients",
        coeffs=scalar_state_coeffs(
            a=lambda t, u: -u, da=lambda t, u: -1.0 + 0.0 * u,
            b_triples=[_const3(0.3)],
            g=lambda t, u, c: c + 0.0 * u, dg=lambda t, u, c: np.zeros_like(u)),
        field=scalar_field_coeffs(
            q=lambda t, u: 0.4 * np.cos(u),
            dq=lambda t, u: -0.4 * np.sin(u),
            d2q=lambda t, u: -0.4 * np.cos(u),
            d_triples=[(lambda t, u: 0.25 * np.sin(u),
                        lambda t, u: 0.25 * np.cos(u),
                        lambda t, u: -0.25 * np.sin(u))],
            big_g=lambda t, u, c: 0.5 * c * np.cos(u),
            dg=lambda t, u, c: -0.5 * c * np.sin(u),
            d2g=lambda t, u, c: -0.5 * c * np.cos(u),
            f0=np.sin, df0=np.cos, d2f0=lambda u: -np.sin(u)),
        mark_measure=point_mark_measure(1.0, 0.4),
        box=(-4.0, 4.0), x0=0.3,
        kernel_ok=True, rho0=(0.0, 0.5),
    ))

    # State-dependent (multiplicative) jumps: x -> x + gamma x, a strictly
    # monotone per-event map with Jacobian 1 + gamma.
    add(Preset(
        name="scaling-jump",
        description="dx = -0.5 x dt + 0.2 dw with multiplicative jumps "
                    "x -> 1.2 x at rate 0.3; state-dependent jump amplitude",
        coeffs=scalar_state_coeffs(
            a=lambda t, u: -0.5 * u, da=lambda t, u: -0.5 + 0.0 * u,
            b_triples=[_const3(0.2)],
            g=lambda t, u, c: c * u, dg=lambda t, u, c: c + 0.0 * u),
        field=scalar_field_coeffs(
            q=lambda t, u: 0.3 * np.cos(u),
            dq=lambda t, u: -0.3 * np.sin(u),
            d2q=lambda t, u: -0.3 * np.cos(u),
            d_triples=[(lambda t, u: 0.2 * np.sin(u),
                        lambda t, u: 0.2 * np.cos(u),
                        lambda t, u: -0.2 * np.sin(u))],
            big_g=lambda t, u, c: 0.3 * c * np.cos(u),
            dg=lambda t, u, c: -0.3 * c * np.sin(u),
            d2g=lambda t, u, c: -0.3 * c * np.cos(u),
            f0=np.cos, df0=lambda u: -np.sin(u), d2f0=lambda u: -np.cos(u)),
        mark_measure=point_mark_measure(0.3, 0.2),
        box=(-8.0, 8.0), x0=0.4,
        kernel_ok=True, state_dependent_jump=True, rho0=(0.0, 0.5),
    ))

    # Constant drift: pure transport, density slides right at unit speed.
    add(Preset(
        name="transport",
        description="dx = dt; density slides at unit speed, "
                    "rho(t,x) = rho0(x - t)",
        coeffs=scalar_state_coeffs(
            a=lambda t, u: 1.0 + 0.0 * u, da=lambda t, u: np.zeros_like(u),
            b_triples=[_zeros3()]),
        field=scalar_field_coeffs(**_null_field(), f0=lambda u: u,
                                  df0=lambda u: np.ones_like(u),
                                  d2f0=lambda u: np.zeros_like(u)),
        mark_measure=no_jumps,
        box=(-4.0, 4.0), x0=0.0,
        kernel_ok=True, rho0=(-0.5, 0.4),
        state_oracle=lambda x0, t, w: x0 + t,
    ))

    # Additive noise only: the density is the initial profile translated by
    # the Brownian path, rho(t,x) = rho0(x - b w(t)).
    add(Preset(
        name="heat",
        description="dx = 0.35 dw; stochastic translation of the density",
        coeffs=scalar_state_coeffs(
            *_zeros3()[:2], b_triples=[_const3(0.35)]),
        field=scalar_field_coeffs(**_null_field(), f0=lambda u: u ** 2,
                                  df0=lambda u: 2.0 * u,
                                  d2f0=lambda u: 2.0 + 0.0 * u),
        mark_measure=no_jumps,
        box=(-4.0, 4.0), x0=0.0,
        kernel_ok=True, rho0=(0.0, 0.5),
        state_oracle=lambda x0, t, w: x0 + 0.35 * float(w),
    ))

    return cat


_CATALOG = _build_catalog()


def catalog_names() -> list:
    return sorted(_CATALOG)


def kernel_preset_names() -> list:
    return sorted(name for name, p in _CATALOG.items() if p.kernel_ok)


def catalog_lookup(name: str) -> Preset:
    try:
        return _CATALOG[name]
    except KeyError:
        raise PresetLookupError(name, catalog_names()) from None


# ---------------------------------------------------------------------------
# Finite-difference machinery: the independent check of analytic derivatives,
# and the fallback jet for user-supplied callbacks without analytic partials.
# ---------------------------------------------------------------------------

def _fd_grad(f, x, h):
    """Central difference of f(x) along each state axis.

    f maps (S, n) -> (S, *out); the result has shape (S, *out, n).
    h has shape (S,).
    """
    n = x.shape[-1]
    cols = []
    for j in range(n):
        dx = np.zeros_like(x)
        dx[..., j] = h
        fp = np.asarray(f(x + dx), dtype=float)
        fm = np.asarray(f(x - dx), dtype=float)
        denom = (2.0 * h).reshape(h.shape + (1,) * (fp.ndim - h.ndim))
        cols.append((fp - fm) / denom)
    return np.stack(cols, axis=-1)


def _fd_hess(f, x, h):
    """Central second differences of f(x): shape (S, *out, n, n)."""
    n = x.shape[-1]
    f0 = np.asarray(f(x), dtype=float)
    out = np.zeros(f0.shape + (n, n))
    h2 = (h * h).reshape(h.shape + (1,) * (f0.ndim - h.ndim))
    for i in range(n):
        ei = np.zeros_like(x)
        ei[..., i] = h
        out[..., i, i] = (np.asarray(f(x + ei), float) - 2.0 * f0
                          + np.asarray(f(x - ei), float)) / h2
        for j in range(i + 1, n):
            ej = np.zeros_like(x)
            ej[..., j] = h
            mixed = (np.asarray(f(x + ei + ej), float)
                     - np.asarray(f(x + ei - ej), float)
                     - np.asarray(f(x - ei + ej), float)
                     + np.asarray(f(x - ei - ej), float)) / (4.0 * h2)
            out[..., i, j] = mixed
            out[..., j, i] = mixed
    return out


@dataclass(frozen=True)
class ValidationReport:
    preset: str
    samples: int
    worst: dict          # coefficient name -> worst scaled mismatch
    max_mismatch: float


def validate_preset(preset: Preset, samples: int = 1000, seed: int = 0) -> ValidationReport:
    """Dense-sample every callback on the domain box and cross-check the
    analytic derivatives against central finite differences.

    Raises ConfigurationError when a callback returns a non-finite value or
    a derivative mismatch exceeds DERIVATIVE_TOL; otherwise returns the
    worst scaled mismatch per coefficient.
    """
    if samples < 1:
        raise ConfigurationError("samples must be >= 1")
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 77], dtype=np.uint64)))
    lo, hi = preset.box
    pad = 0.05 * (hi - lo)
    u = rng.uniform(lo + pad, hi - pad, size=samples)
    x = u[:, None]
    h1 = FD_STEP_GRAD * np.maximum(1.0, np.abs(u))
    h2 = FD_STEP_HESS * np.maximum(1.0, np.abs(u))
    marks = preset.mark_measure.draw_marks(
        np.random.Generator(np.random.Philox(key=np.array([seed, 78], dtype=np.uint64))), 3)
    if marks.shape[0] == 0:
        marks = np.zeros((1, preset.mark_measure.mark_dim))
    t_samples = (0.0, 0.31, 1.0)
    worst = {}

    def mismatch(name, analytic, fd):
        analytic = np.asarray(analytic, float)
        if not np.all(np.isfinite(analytic)):
            raise ConfigurationError(f"preset {preset.name!r}: {name} returned non-finite values")
        err = np.max(np.abs(analytic - fd) / np.maximum(1.0, np.abs(analytic)))
        worst[name] = max(worst.get(name, 0.0), float(err))

    c, f = preset.coeffs, preset.field
    for t in t_samples:
        mismatch("drift_dx", c.drift_dx(t, x), _fd_grad(lambda z: c.drift(t, z), x, h1))
        mismatch("diffusion_dx", c.diffusion_dx(t, x),
                 _fd_grad(lambda z: c.diffusion(t, z), x, h1))
        mismatch("diffusion_dxx", c.diffusion_dxx(t, x),
                 _fd_hess(lambda z: c.diffusion(t, z), x, h2))
        for gamma in marks:
            mismatch("jump_amp_dx", c.jump_amp_dx(t, x, gamma),
                     _fd_grad(lambda z: c.jump_amp(t, z, gamma), x, h1))
            mismatch("jump_coeff_dx", f.jump_coeff_dx(t, x, gamma),
                     _fd_grad(lambda z: f.jump_coeff(t, z, gamma), x, h1))
            mismatch("jump_coeff_dxx", f.jump_coeff_dxx(t, x, gamma),
                     _fd_hess(lambda z: f.jump_coeff(t, z, gamma), x, h2))
        mismatch("dt_coeff_dx", f.dt_coeff_dx(t, x), _fd_grad(lambda z: f.dt_coeff(t, z), x, h1))
        mismatch("dt_coeff_dxx", f.dt_coeff_dxx(t, x), _fd_hess(lambda z: f.dt_coeff(t, z), x, h2))
        mismatch("dw_coeff_dx", f.dw_coeff_dx(t, x), _fd_grad(lambda z: f.dw_coeff(t, z), x, h1))
        mismatch("dw_coeff_dxx", f.dw_coeff_dxx(t, x), _fd_hess(lambda z: f.dw_coeff(t, z), x, h2))
    mismatch("initial_dx", f.initial_dx(x), _fd_grad(f.initial, x, h1))
    mismatch("initial_dxx", f.initial_dxx(x), _fd_hess(f.initial, x, h2))
    for name, fn in (("drift", c.drift(0.0, x)), ("diffusion", c.diffusion(0.0, x)),
                     ("dt_coeff", f.dt_coeff(0.0, x)), ("dw_coeff", f.dw_coeff(0.0, x)),
                     ("initial", f.initial(x))):
        if not np.all(np.isfinite(np.asarray(fn, float))):
            raise ConfigurationError(f"preset {preset.name!r}: {name} returned non-finite values")

    max_mismatch = max(worst.values())
    if max_mismatch > DERIVATIVE_TOL:
        offender = max(worst, key=worst.get)
        raise ConfigurationError(
            f"preset {preset.name!r} rejected: analytic {offender} deviates from "
            f"finite differences by {worst[offender]:.3e} (> {DERIVATIVE_TOL})")
    return ValidationReport(preset.name, samples, worst, max_mismatch)
