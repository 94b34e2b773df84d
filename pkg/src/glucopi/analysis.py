"""Closed-form equilibria, linear stability, and trapping-region bounds.

Everything here works on the planar formulation with constant (or bounded)
net input g = -a3 + F.  The central object is the piecewise level function

    L(u, e) = (u - a1*e)^2 / (2*lam*a2) + e^2/(2*e_bar) + e      (e <= 0)
    L(u, e) = (u - a1*e)^2 / (2*lam*a2) + e                      (e > 0)

whose sublevel sets, once they enclose the locus where dL/dt = 0, are
forward-invariant: trajectories enter and never leave.  The closed-form
levels returned in :class:`TrappingBound.c` bound the smallest such set
from above via an enclosing rectangle in the sheared coordinates
(v, e) = (u - a1*e, e); the numerically tightened level ``c_tight``
maximizes L over the dL/dt = 0 locus directly and feeds the reported
glucose ceiling.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .model import ModelParams, ModelState, feedback_concentration

__all__ = [
    "Equilibrium",
    "Jacobian",
    "StabilityReport",
    "TrappingBound",
    "LyapunovValue",
    "equilibrium",
    "jacobian",
    "classify_stability",
    "lyapunov",
    "lyapunov_level_arrays",
    "lyapunov_rate",
    "trapping_bound",
    "trapping_bound_variable",
    "rate_zero_center",
]

RESIDUAL_TOL = 1e-12
BISECTION_TOL = 1e-9


@dataclass(frozen=True)
class Equilibrium:
    """Stationary point of the closed loop under constant net input g."""

    e_star: float
    u_star: float
    g: float
    branch: str  # "positive" (e* >= 0) or "negative" (e* < 0)
    residual: float


def equilibrium(params: ModelParams, g: float) -> Equilibrium:
    """Unique equilibrium for constant net input g = -a3 + F.

    For g >= 0 the deviation settles where mass-action uptake balances the
    input; for g < 0 the linear release branch applies.  The stationarity
    residual is checked to 1e-12.
    """
    s = params.a1 + params.a2
    ebar = params.e_bar
    if g >= 0:
        # Rationalized root of s*e*(e + ebar) = g, stable for small g.
        e_star = 2.0 * g / (s * ebar + math.sqrt(s * s * ebar * ebar + 4.0 * s * g))
        branch = "positive"
    else:
        e_star = g / (s * ebar)
        branch = "negative"
    residual = abs(g - s * e_star * max(e_star + ebar, ebar))
    if residual > RESIDUAL_TOL * max(1.0, abs(g)):
        raise ArithmeticError(
            f"equilibrium residual {residual:.3e} exceeds tolerance; "
            f"params or g are numerically pathological")
    if e_star <= -ebar:
        warnings.warn(
            f"equilibrium e*={e_star:.4g} lies outside the model domain "
            f"(total glucose <= 0); the loop cannot sustain g={g:g}",
            stacklevel=2)
    return Equilibrium(e_star=e_star, u_star=s * e_star, g=g,
                       branch=branch, residual=residual)


@dataclass(frozen=True)
class Jacobian:
    matrix: np.ndarray
    trace: float
    determinant: float


def jacobian(params: ModelParams, eq: Equilibrium) -> Jacobian:
    """Linearization of the planar system at an equilibrium.

    The removal term's partials switch with the feedback branch; the branch
    recorded on the equilibrium decides which one-sided derivative applies
    at the kink e* = 0.
    """
    a1, a2, lam, ebar = params.a1, params.a2, params.lam, params.e_bar
    if eq.branch == "positive":
        df_du = -(eq.e_star + ebar)
        df_de = -eq.u_star
    else:
        df_du = -ebar
        df_de = 0.0
    J = np.array([
        [-lam + a1 * df_du, lam * (a1 + a2) + a1 * df_de],
        [df_du, df_de],
    ])
    return Jacobian(matrix=J, trace=float(np.trace(J)), determinant=float(np.linalg.det(J)))


@dataclass(frozen=True)
class StabilityReport:
    equilibrium: Equilibrium
    trace: float
    determinant: float
    classification: str  # "stable-node" or "stable-focus"


def classify_stability(params: ModelParams, g: float) -> StabilityReport:
    """Stability class of the unique equilibrium under constant net input.

    The trace is negative and the determinant positive for every admissible
    parameter set, so the equilibrium is always asymptotically stable; the
    discriminant separates nodes from foci.
    """
    eq = equilibrium(params, g)
    jac = jacobian(params, eq)
    if not (jac.trace < 0 and jac.determinant > 0):
        raise ArithmeticError(
            f"stability invariant violated: tr={jac.trace:g}, det={jac.determinant:g} "
            f"for params={params}, g={g}")
    disc = jac.trace * jac.trace - 4.0 * jac.determinant
    classification = "stable-node" if disc >= 0 else "stable-focus"
    return StabilityReport(equilibrium=eq, trace=jac.trace,
                           determinant=jac.determinant, classification=classification)


# --------------------------------------------------------------------------
# Lyapunov level and its rate of change


def _level_ve(v: float, e: float, params: ModelParams) -> float:
    quad = v * v / (2.0 * params.lam * params.a2)
    if e <= 0:
        return quad + e * e / (2.0 * params.e_bar) + e
    return quad + e


def _rate_ve(v: float, e: float, params: ModelParams, g: float) -> float:
    a1, a2, ebar = params.a1, params.a2, params.e_bar
    sq_v = (v + a2 * ebar / 2.0) ** 2 / a2
    if e <= 0:
        shift = (a1 * ebar - g / ebar)
        return (-sq_v - a1 * (e + shift / (2.0 * a1)) ** 2
                + a2 * ebar * ebar / 4.0 + shift * shift / (4.0 * a1) + g)
    return (-sq_v - a1 * (e + ebar / 2.0) ** 2
            + ebar * ebar / 4.0 * (a1 + a2) + g)


@dataclass(frozen=True)
class LyapunovValue:
    level: float
    rate: float


def lyapunov(params: ModelParams, state: ModelState, g: float) -> LyapunovValue:
    """Level L and its along-trajectory derivative dL/dt at a state.

    Requires a2 > 0 (the level diverges otherwise) and a1 > 0 for the rate.
    The state must lie in the model domain e > -e_bar.
    """
    _require_positive_gains(params)
    feedback_concentration(state.e, params.e_bar)  # domain check
    v = state.u - params.a1 * state.e
    return LyapunovValue(level=_level_ve(v, state.e, params),
                         rate=_rate_ve(v, state.e, params, g))


def lyapunov_level_arrays(params: ModelParams, u: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Vectorized L over trajectory arrays (no domain check)."""
    _require_positive_gains(params, need_a1=False)
    v = np.asarray(u) - params.a1 * np.asarray(e)
    e = np.asarray(e)
    quad = v * v / (2.0 * params.lam * params.a2)
    return quad + np.where(e <= 0, e * e / (2.0 * params.e_bar) + e, e)


def lyapunov_rate(params: ModelParams, state: ModelState, g: float) -> float:
    return lyapunov(params, state, g).rate


def rate_zero_center(params: ModelParams, g: float) -> tuple[float, float]:
    """Center (u, e) of the dL/dt = 0 locus, by numeric square completion.

    The rate expression for positive deviations is a global quadratic in
    (v, e); its stationary point is recovered from central differences,
    which are exact for quadratics at any step size, and sheared back to
    (u, e).  A unit step keeps the second differences well above roundoff.
    """
    h = 1.0
    def q(v, e):
        a1, a2, ebar = params.a1, params.a2, params.e_bar
        return (-(v + a2 * ebar / 2.0) ** 2 / a2 - a1 * (e + ebar / 2.0) ** 2
                + ebar * ebar / 4.0 * (a1 + a2) + g)
    gv = (q(h, 0.0) - q(-h, 0.0)) / (2 * h)
    ge = (q(0.0, h) - q(0.0, -h)) / (2 * h)
    hvv = (q(h, 0.0) - 2 * q(0.0, 0.0) + q(-h, 0.0)) / (h * h)
    hee = (q(0.0, h) - 2 * q(0.0, 0.0) + q(0.0, -h)) / (h * h)
    v_c = -gv / hvv
    e_c = -ge / hee
    return v_c + params.a1 * e_c, e_c


# --------------------------------------------------------------------------
# Trapping bounds


def _require_positive_gains(params: ModelParams, need_a1: bool = True) -> None:
    if need_a1 and params.a1 <= 0:
        raise ValueError("trapping analysis requires a1 > 0; the bound degenerates at a1 = 0")
    if params.a2 <= 0:
        raise ValueError("the level function requires a2 > 0")


def regime_boundary(params: ModelParams) -> float:
    """Net input separating the two closed-form bound regimes."""
    return -params.a2 * params.e_bar ** 2 / 4.0


def level_bound_minus(params: ModelParams, g: float) -> float:
    """Closed-form enclosing level for strongly negative net input."""
    a1, a2, lam, ebar = params.a1, params.a2, params.lam, params.e_bar
    _require_positive_gains(params)
    R = math.sqrt(a1 * a2 * ebar ** 4 + (a1 * ebar ** 2 + g) ** 2)
    return (1.0 / (8.0 * a1 * lam * ebar ** 2)) * (
        (2.0 * ebar ** 2 * math.sqrt(a1 * a2) + 4.0 * ebar * lam) * R
        + a1 * (a1 + 2.0 * a2) * ebar ** 4 - 4.0 * a1 * ebar ** 3 * lam
        + 2.0 * a1 * g * ebar ** 2 + 4.0 * g * ebar * lam + g * g)


def level_bound_plus(params: ModelParams, g: float) -> float:
    """Closed-form enclosing level for net input above the regime boundary."""
    a1, a2, lam, ebar = params.a1, params.a2, params.lam, params.e_bar
    _require_positive_gains(params)
    rad = a1 * (a1 + a2) * ebar ** 2 + 4.0 * a1 * g
    if rad < 0:
        raise ValueError(
            f"inconsistent parameters: radicand {rad:g} negative for g={g:g} "
            f"(expected only for g <= {regime_boundary(params):g})")
    R = math.sqrt(a1 * a2 * ebar ** 4 + (a1 * ebar ** 2 + g) ** 2)
    return (1.0 / (8.0 * a1 * lam * ebar ** 2)) * (
        2.0 * math.sqrt(a1 * a2) * ebar ** 2 * R + (a1 * ebar ** 2 + g) ** 2
        + 4.0 * lam * ebar ** 2 * math.sqrt(rad)
        + 2.0 * a1 * a2 * ebar ** 4 - 4.0 * a1 * ebar ** 3 * lam)


def _rate_zero_pieces(params: ModelParams, g: float):
    """e-intervals and ellipse data of the dL/dt = 0 locus, per branch.

    Each piece is (e_lo, e_hi, e_center, amp) with the locus satisfying
    (v - v_c)^2 / a2 + a1*(e - e_center)^2 = amp on its half-plane, where
    v_c = -a2*e_bar/2.  Pieces are clipped to the model domain e > -e_bar.
    """
    a1, a2, ebar = params.a1, params.a2, params.e_bar
    pieces = []
    # negative-deviation branch
    ec_n = -ebar / 2.0 + g / (2.0 * a1 * ebar)
    amp_n = (a2 * ebar ** 2 / 4.0 + (a1 * ebar - g / ebar) ** 2 / (4.0 * a1) + g)
    if amp_n > 0:
        half = math.sqrt(amp_n / a1)
        lo = max(ec_n - half, -ebar + 1e-12)
        hi = min(ec_n + half, 0.0)
        if lo < hi:
            pieces.append((lo, hi, ec_n, amp_n))
    # positive-deviation branch
    ec_p = -ebar / 2.0
    amp_p = ebar ** 2 / 4.0 * (params.a1 + params.a2) + g
    if amp_p > 0:
        half = math.sqrt(amp_p / a1)
        lo = max(ec_p - half, 0.0)
        hi = ec_p + half
        if lo < hi:
            pieces.append((lo, hi, ec_p, amp_p))
    return pieces


def _tight_level(params: ModelParams, g: float, grid: int = 4001) -> float:
    """Smallest level whose curve encloses the dL/dt = 0 locus.

    Maximizes L over the locus: for each e the admissible v are the two
    ellipse roots, of which the more negative one always carries the larger
    quadratic term.  Dense grid plus golden-section refinement.
    """
    a1, a2, ebar = params.a1, params.a2, params.e_bar
    v_c = -a2 * ebar / 2.0
    best = -math.inf
    for lo, hi, ec, amp in _rate_zero_pieces(params, g):
        def value(e: float) -> float:
            rad = amp - a1 * (e - ec) ** 2
            if rad < 0:
                rad = 0.0
            v = v_c - math.sqrt(a2 * rad)
            return _level_ve(v, e, params)

        es = np.linspace(lo, hi, grid)
        vals = np.array([value(e) for e in es])
        k = int(np.argmax(vals))
        a = es[max(k - 1, 0)]
        b = es[min(k + 1, grid - 1)]
        # golden-section refinement of the 1-D maximum
        invphi = (math.sqrt(5.0) - 1.0) / 2.0
        x1 = b - invphi * (b - a)
        x2 = a + invphi * (b - a)
        f1, f2 = value(x1), value(x2)
        for _ in range(80):
            if f1 < f2:
                a, x1, f1 = x1, x2, f2
                x2 = a + invphi * (b - a)
                f2 = value(x2)
            else:
                b, x2, f2 = x2, x1, f1
                x1 = b - invphi * (b - a)
                f1 = value(x1)
            if b - a < 1e-13 * max(1.0, abs(b)):
                break
        best = max(best, vals[k], f1, f2)
    if not math.isfinite(best):
        raise ValueError(f"dL/dt = 0 locus is empty for g={g:g}; no growth region to enclose")
    return best


def _glucose_ceiling(params: ModelParams, level: float) -> float:
    """Total glucose where the curve L = level crosses v = -a2*e_bar/2.

    That vertical line passes through the center of the dL/dt = 0 locus;
    the crossing is resolved by bisection on e to 1e-9.
    """
    a2, lam, ebar = params.a2, params.lam, params.e_bar
    v_c = -a2 * ebar / 2.0

    def residual(e: float) -> float:
        return _level_ve(v_c, e, params) - level

    lo = -ebar + 1e-12
    hi = max(level - v_c * v_c / (2.0 * lam * a2), 0.0) + 1.0
    if residual(lo) > 0:
        # level below the line's minimum: curve never reaches this section
        raise ValueError(f"level {level:g} does not intersect the section line")
    while residual(hi) < 0:
        hi *= 2.0
    while hi - lo > BISECTION_TOL:
        mid = 0.5 * (lo + hi)
        if residual(mid) > 0:
            hi = mid
        else:
            lo = mid
    return ebar + 0.5 * (lo + hi)


@dataclass(frozen=True)
class TrappingBound:
    """Forward-invariant sublevel set {L <= c} and its glucose ceiling.

    c            closed-form enclosing level (rectangle construction)
    regime       "minus" (g <= -a2*e_bar^2/4) or "plus"
    g_min, g_max net-input range the bound covers (equal for constant input)
    c_tight      smallest enclosing level, from maximizing L over dL/dt = 0
    max_glucose  total glucose where L = c_tight crosses the vertical line
                 through the growth region's center, mmol/litre
    """

    c: float
    regime: str
    g_min: float
    g_max: float
    max_glucose: float
    c_tight: float


def trapping_bound(params: ModelParams, g: float) -> TrappingBound:
    """Trapping level for constant net input g."""
    _require_positive_gains(params)
    gstar = regime_boundary(params)
    if g <= gstar:
        c = level_bound_minus(params, g)
        regime = "minus"
    else:
        c = level_bound_plus(params, g)
        regime = "plus"
    c_tight = _tight_level(params, g)
    return TrappingBound(c=c, regime=regime, g_min=g, g_max=g,
                         max_glucose=_glucose_ceiling(params, c_tight),
                         c_tight=c_tight)


def trapping_bound_variable(params: ModelParams, g_min: float, g_max: float) -> TrappingBound:
    """Trapping level for any bounded input g(t) in [g_min, g_max].

    Requires g_max > 0.  The closed-form level is the larger of the
    strongly-negative bound at g_min (when that regime applies) and the
    plus bound at g_max; the tightened level is the supremum of the
    single-input tightened levels over the interval.
    """
    if g_min > g_max:
        raise ValueError(f"g_min={g_min:g} exceeds g_max={g_max:g}")
    if g_max <= 0:
        raise ValueError(f"the variable-input bound requires g_max > 0, got {g_max:g}")
    _require_positive_gains(params)
    if g_min == g_max:
        return trapping_bound(params, g_max)
    gstar = regime_boundary(params)
    c_plus = level_bound_plus(params, g_max)
    if g_min <= gstar:
        c_minus = level_bound_minus(params, g_min)
        c = max(c_minus, c_plus)
        regime = "minus" if c_minus >= c_plus else "plus"
    else:
        c = c_plus
        regime = "plus"
    c_tight = max(_tight_level(params, gg)
                  for gg in np.linspace(g_min, g_max, 33))
    return TrappingBound(c=c, regime=regime, g_min=g_min, g_max=g_max,
                         max_glucose=_glucose_ceiling(params, c_tight),
                         c_tight=c_tight)
