"""Conforming model parameters to extracted excursions.

Each excursion is fitted independently: the three control parameters
(a1, a2, lam) and the three Gaussian input parameters (amplitude, center,
width) are adjusted by projected gradient descent to minimize the
normalized squared error between the smoothed data and the simulated
deviation.  The basal rate a3 stays fixed and the baseline e_bar comes
from the excursion itself.

Fits are deterministic: no randomized initialization, fixed iteration
order, and a fixed base step with backtracking halving whenever the error
would increase.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .cgm import Excursion, GlucoseTrace, extract_excursions, smooth
from .model import A3_DEFAULT, TABLE1_RANGES, InputPulse, ModelParams

__all__ = [
    "FitConfig",
    "FitResult",
    "KIND_MEANS",
    "objective",
    "fit_excursion",
    "fit_excursions",
    "fit_trace",
    "fit_result_to_record",
    "record_to_fit_result",
]

# Per-kind initial guesses for (a1, a2, lam): overall healthy-cohort means
# for hyperglycemic and hypoglycemic episodes.
KIND_MEANS = {
    "peak": (0.0073, 0.0033, 0.0289),
    "trough": (0.0208, 0.0354, 0.0395),
}

ESCAPE_SENTINEL = math.inf


@dataclass(frozen=True)
class FitConfig:
    """Optimizer settings; defaults favor sub-second single-excursion fits.

    ``dt`` of None uses one fifth of the excursion's sampling interval so
    recorded timestamps land exactly on simulation steps.
    """

    learning_rate: float = 0.25
    max_iterations: int = 5000
    grad_tol: float = 1e-8
    error_tol: float = 1e-12
    plateau_tol: float = 1e-13
    dt: float | None = None
    a3: float = A3_DEFAULT
    max_amplitude: float = 1.0

    def bounds(self, excursion: Excursion) -> tuple[np.ndarray, np.ndarray]:
        """Parameter box: expected ranges widened 2x upward, zero floors
        (lam floored at 1e-4), pulse kept on the excursion's footprint."""
        dur = max(excursion.duration, excursion.nominal_interval)
        t0, t1 = float(excursion.t[0]), float(excursion.t[-1])
        lo = np.array([0.0, 0.0, 1e-4, 1e-6, t0 - dur, 1.0])
        hi = np.array([
            2.0 * TABLE1_RANGES["a1"][1],
            2.0 * TABLE1_RANGES["a2"][1],
            2.0 * TABLE1_RANGES["lam"][1],
            self.max_amplitude,
            t1 + dur,
            2.0 * dur,
        ])
        if excursion.kind == "trough":
            lo[3], hi[3] = -self.max_amplitude, -1e-6
        return lo, hi


@dataclass(frozen=True)
class FitResult:
    """Conformed parameters for one excursion.

    ``fit_seconds`` is informational and intentionally left out of the
    serialized record so that identical inputs reproduce byte-identical
    output files.
    """

    params: ModelParams
    pulse: InputPulse
    error: float
    iterations: int
    converged: bool
    kind: str
    subject_id: str
    start_idx: int
    end_idx: int
    n_samples: int
    flags: tuple[str, ...] = ()
    fit_seconds: float = 0.0
    t_obs: np.ndarray | None = None
    observed_e: np.ndarray | None = None


def _simulate_deviation(
    a1: float, a2: float, lam: float, a3: float, ebar: float,
    amp: float, cen: float, wid: float,
    e0: float, t0: float, n: int, dt: float,
) -> np.ndarray | None:
    """Deviation trajectory of the delay-integral model, streaming form.

    Identical quadrature to :func:`glucopi.model.simulate_integral`
    (midpoint rule, constant pre-history at e0, forward Euler) but with the
    exponential kernel accumulated recursively, which sidesteps the window
    dot product in this per-objective hot path.  Returns None when the
    trajectory leaves the model domain.
    """
    es = np.empty(n + 1)
    es[0] = e0
    decay = math.exp(-lam * dt)
    half = lam * dt * math.exp(-0.5 * lam * dt)
    kernel = e0
    e = e0
    t = t0
    inv2w2 = 0.5 / (wid * wid)
    for k in range(n):
        u = a1 * e + a2 * kernel
        phi = e + ebar if e > 0.0 else ebar
        z = t - cen
        f = -a3 - u * phi + amp * math.exp(-z * z * inv2w2)
        e_next = e + dt * f
        kernel = decay * kernel + half * (0.5 * (e + e_next))
        e = e_next
        t += dt
        es[k + 1] = e
        if e <= -ebar:
            return None
    return es


def _sample_indices(t: np.ndarray, t0: float, dt: float, n: int) -> np.ndarray:
    idx = np.rint((t - t0) / dt).astype(int)
    return np.clip(idx, 0, n)


def _objective_core(x: np.ndarray, excursion: Excursion, a3: float,
                    dt: float, obs: np.ndarray, denom: float,
                    idx: np.ndarray, n: int) -> float:
    a1, a2, lam, amp, cen, wid = x
    es = _simulate_deviation(a1, a2, lam, a3, excursion.e_bar,
                             amp, cen, wid,
                             float(obs[0]), float(excursion.t[0]), n, dt)
    if es is None:
        return ESCAPE_SENTINEL
    resid = obs - es[idx]
    return float(resid @ resid) / denom


def _fit_problem(excursion: Excursion, config: FitConfig):
    if len(excursion) < 4:
        raise ValueError(f"excursion too short to fit: n={len(excursion)} < 4")
    obs = excursion.deviation_series.astype(float)
    denom = float(obs @ obs)
    if denom <= 0:
        raise ValueError("degenerate excursion: zero deviation everywhere")
    dt = config.dt if config.dt is not None else excursion.nominal_interval / 5.0
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    t0 = float(excursion.t[0])
    n = max(int(round((float(excursion.t[-1]) - t0) / dt)), 1)
    idx = _sample_indices(excursion.t, t0, dt, n)
    return obs, denom, dt, idx, n


def objective(
    excursion: Excursion,
    params: ModelParams,
    pulse: InputPulse,
    dt: float | None = None,
) -> float:
    """Normalized squared error of the model against one excursion.

    The model is integrated from the excursion's first recorded deviation
    with constant pre-history, sampled at the recorded timestamps by
    nearest simulation step.  Domain escape yields an infinite sentinel
    rather than an exception so optimizers can reject the step.
    """
    config = FitConfig(dt=dt, a3=params.a3)
    obs, denom, dt_eff, idx, n = _fit_problem(excursion, config)
    x = np.array([params.a1, params.a2, params.lam,
                  pulse.amplitude, pulse.center, pulse.width])
    return _objective_core(x, excursion, params.a3, dt_eff, obs, denom, idx, n)


def _initial_guess(excursion: Excursion, config: FitConfig,
                   lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    a1, a2, lam = KIND_MEANS[excursion.kind]
    dev = excursion.deviation_series
    k_ext = int(np.argmax(np.abs(dev)))
    center = float(excursion.t[k_ext]) - excursion.nominal_interval
    width = max(excursion.duration / 4.0, 1.0)
    # two-point slope at the segment start, corrected for the removal term
    slope = float((dev[1] - dev[0]) / (excursion.t[1] - excursion.t[0]))
    u0 = (a1 + a2) * float(dev[0])
    phi0 = max(float(dev[0]) + excursion.e_bar, excursion.e_bar)
    f0 = slope + config.a3 + u0 * phi0
    z = (float(excursion.t[0]) - center) / width
    gauss = max(math.exp(-0.5 * z * z), 0.1)
    amp = f0 / gauss
    sign = 1.0 if excursion.kind == "peak" else -1.0
    if amp * sign <= 0:
        amp = sign * 0.05
    amp = sign * min(max(abs(amp), 1e-3), 0.8 * config.max_amplitude)
    x0 = np.array([a1, a2, lam, amp, center, width])
    return np.clip(x0, lo, hi)


def _scales(excursion: Excursion, x0: np.ndarray) -> np.ndarray:
    dur = max(excursion.duration, 1.0)
    return np.array([0.01, 0.01, 0.02, max(abs(x0[3]), 0.02), dur / 2.0, dur / 4.0])


def fit_excursion(excursion: Excursion, config: FitConfig | None = None) -> FitResult:
    """Conform (a1, a2, lam) and the input pulse to one excursion.

    Projected gradient descent on diagonally rescaled parameters with
    central-difference gradients; every iteration restarts from the fixed
    base step and halves it until the error decreases, so the error is
    monotone over accepted iterates.  Non-convergence is reported in the
    result flags, never raised.
    """
    config = config or FitConfig()
    t_start = time.perf_counter()
    obs, denom, dt, idx, n = _fit_problem(excursion, config)
    lo, hi = config.bounds(excursion)
    x = _initial_guess(excursion, config, lo, hi)
    s = _scales(excursion, x)
    a3 = config.a3

    def f(xv: np.ndarray) -> float:
        return _objective_core(xv, excursion, a3, dt, obs, denom, idx, n)

    def gradient(xv: np.ndarray, fx: float) -> np.ndarray:
        g = np.empty(6)
        for i in range(6):
            h = 1e-6 * max(abs(xv[i]), s[i])
            up = min(xv[i] + h, hi[i])
            dn = max(xv[i] - h, lo[i])
            if up == dn:
                g[i] = 0.0
                continue
            xp = xv.copy(); xp[i] = up
            xm = xv.copy(); xm[i] = dn
            fp, fm = f(xp), f(xm)
            if not (math.isfinite(fp) and math.isfinite(fm)):
                # fall back to whatever side stays in the domain
                fp = fp if math.isfinite(fp) else fx
                fm = fm if math.isfinite(fm) else fx
            g[i] = (fp - fm) / (up - dn)
        return g

    fx = f(x)
    if math.isnan(fx):
        raise ArithmeticError(f"objective is NaN at the initial guess {x}")
    converged = False
    iterations = 0
    for iterations in range(1, config.max_iterations + 1):
        if fx <= config.error_tol:
            converged = True
            break
        g = gradient(x, fx)
        gnorm = float(np.linalg.norm(g * s))
        if gnorm <= config.grad_tol:
            converged = True
            break
        step = config.learning_rate
        accepted = False
        for _ in range(60):
            x_new = np.clip(x - step * (s * s) * g, lo, hi)
            f_new = f(x_new)
            if math.isnan(f_new):
                raise ArithmeticError(f"objective is NaN at {x_new}")
            if f_new < fx:
                improvement = fx - f_new
                x, fx = x_new, f_new
                accepted = True
                break
            step *= 0.5
        if not accepted:
            # no descent at any step length: stationary to working precision
            converged = True
            break
        if improvement <= config.plateau_tol * max(fx, 1e-30):
            converged = True
            break

    params = ModelParams(a1=float(x[0]), a2=float(x[1]), lam=float(x[2]),
                         e_bar=excursion.e_bar, a3=a3)
    pulse = InputPulse(amplitude=float(x[3]), center=float(x[4]), width=float(x[5]))
    flags = list(excursion.flags)
    on_bound = bool(np.any(x <= lo) or np.any(x >= hi))
    if on_bound:
        flags.append("boundary-pinned")
    if not converged:
        flags.append("max-iterations")
    return FitResult(
        params=params,
        pulse=pulse,
        error=fx,
        iterations=iterations,
        converged=converged,
        kind=excursion.kind,
        subject_id=excursion.subject_id,
        start_idx=excursion.start_idx,
        end_idx=excursion.end_idx,
        n_samples=len(excursion),
        flags=tuple(dict.fromkeys(flags)),
        fit_seconds=time.perf_counter() - t_start,
        t_obs=excursion.t.copy(),
        observed_e=obs.copy(),
    )


def _fit_one(args) -> FitResult:
    excursion, config = args
    return fit_excursion(excursion, config)


def fit_excursions(
    excursions: Sequence[Excursion],
    config: FitConfig | None = None,
    jobs: int = 1,
) -> list[FitResult]:
    """Fit a batch; excursions are independent, so jobs > 1 uses a process
    pool.  Results come back in excursion order either way."""
    config = config or FitConfig()
    if jobs > 1 and len(excursions) > 1:
        import concurrent.futures as cf

        with cf.ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_fit_one, ((x, config) for x in excursions),
                                 chunksize=max(1, len(excursions) // (4 * jobs))))
    return [fit_excursion(x, config) for x in excursions]


def fit_trace(
    trace: GlucoseTrace,
    config: FitConfig | None = None,
    sigma: float | None = None,
    min_deviation: float = 0.5,
    jobs: int = 1,
) -> list[FitResult]:
    """Smooth, extract, and fit every excursion of one subject's trace."""
    smoothed = smooth(trace, sigma)
    excursions = extract_excursions(smoothed, min_deviation)
    return fit_excursions(excursions, config, jobs=jobs)


# --------------------------------------------------------------------------
# Serialization (JSON-lines records; schema-versioned by the CLI layer)


def fit_result_to_record(r: FitResult, study: str | None = None) -> dict:
    rec = {
        "kind": r.kind,
        "subject_id": r.subject_id,
        "start_idx": r.start_idx,
        "end_idx": r.end_idx,
        "n_samples": r.n_samples,
        "a1": r.params.a1,
        "a2": r.params.a2,
        "lam": r.params.lam,
        "a3": r.params.a3,
        "e_bar": r.params.e_bar,
        "amplitude": r.pulse.amplitude,
        "center": r.pulse.center,
        "width": r.pulse.width,
        "error": r.error,
        "iterations": r.iterations,
        "converged": r.converged,
        "flags": list(r.flags),
    }
    if r.t_obs is not None:
        rec["t"] = [float(v) for v in r.t_obs]
        rec["observed_e"] = [float(v) for v in r.observed_e]
    if study is not None:
        rec["study"] = study
    return rec


def record_to_fit_result(rec: dict) -> FitResult:
    import warnings as _warnings

    with _warnings.catch_warnings():
        _warnings.simplefilter("ignore")  # fitted values may sit outside Table 1
        params = ModelParams(a1=rec["a1"], a2=rec["a2"], lam=rec["lam"],
                             e_bar=rec["e_bar"], a3=rec.get("a3", A3_DEFAULT))
    return FitResult(
        params=params,
        pulse=InputPulse(amplitude=rec["amplitude"], center=rec["center"],
                         width=rec["width"]),
        error=rec["error"],
        iterations=rec["iterations"],
        converged=rec["converged"],
        kind=rec["kind"],
        subject_id=rec["subject_id"],
        start_idx=rec["start_idx"],
        end_idx=rec["end_idx"],
        n_samples=rec["n_samples"],
        flags=tuple(rec.get("flags", ())),
        t_obs=np.array(rec["t"]) if "t" in rec else None,
        observed_e=np.array(rec["observed_e"]) if "observed_e" in rec else None,
    )
