"""Shared fixtures: synthetic CGM material generated from the model itself."""

from __future__ import annotations

import numpy as np
import pytest

from glucopi.cgm import Excursion, GlucoseTrace
from glucopi.fit import KIND_MEANS
from glucopi.model import InputPulse, ModelParams, simulate_integral

BASELINE = 5.0
INTERVAL = 15.0


def table1_draw(rng, a_floor: float = 0.001) -> ModelParams:
    """Random parameters inside the expected healthy ranges.

    Gains are floored away from zero: zero-gain corner cases degenerate
    the control loop and are exercised separately.
    """
    return ModelParams(
        a1=float(rng.uniform(a_floor, 0.03274)),
        a2=float(rng.uniform(a_floor, 0.04627)),
        lam=float(rng.uniform(0.02434, 0.05804)),
        e_bar=float(rng.uniform(4.0, 5.9)),
    )


def make_synthetic_excursion(
    kind: str = "peak",
    params: ModelParams | None = None,
    pulse: InputPulse | None = None,
    e_bar: float = BASELINE,
    interval: float = INTERVAL,
    duration: float = 300.0,
    noise: float = 0.0,
    rng: np.random.Generator | None = None,
    subject_id: str = "synthetic",
) -> Excursion:
    """Model-generated excursion sampled like a CGM device would.

    The deviation trajectory is simulated at dt = interval/5 (the fitting
    grid) so a fit at the generating parameters reproduces the data up to
    discretization noise only.
    """
    if params is None:
        a1, a2, lam = KIND_MEANS[kind]
        params = ModelParams(a1=a1, a2=a2, lam=lam, e_bar=e_bar)
    if pulse is None:
        pulse = (InputPulse(0.08, 60.0, 25.0) if kind == "peak"
                 else InputPulse(-0.15, 60.0, 25.0))
    dt = interval / 5.0
    traj = simulate_integral(params, pulse, initial_e=0.0, t_end=duration, dt=dt)
    step = int(round(interval / dt))
    dev = traj.e[::step].copy()
    t = traj.t[::step].copy()
    if noise > 0:
        if rng is None:
            rng = np.random.default_rng(0)
        dev = dev * (1.0 + noise * rng.standard_normal(len(dev)))
    return Excursion(
        kind=kind,
        subject_id=subject_id,
        start_idx=0,
        end_idx=len(t) - 1,
        t=t,
        glucose=dev + e_bar,
        e_bar=e_bar,
        nominal_interval=interval,
        flags=(),
    )


def make_pulse_trace(
    n_excursions: int = 8,
    days: float = 14.0,
    interval: float = INTERVAL,
    baseline: float = BASELINE,
    sensor_noise: float = 0.03,
    seed: int = 0,
    subject_id: str = "synthetic-subject",
) -> tuple[GlucoseTrace, int, int]:
    """Two-week style trace with planted model excursions.

    Returns (trace, n_peaks, n_troughs).  Excursions are spaced at least
    six hours apart so extraction sees isolated features.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(0.0, days * 1440.0, interval)
    glucose = np.full(len(t), baseline)
    window = 330.0
    slot = (days * 1440.0 - window) / n_excursions
    n_peaks = n_troughs = 0
    dt = interval / 5.0
    for i in range(n_excursions):
        kind = "peak" if i % 2 == 0 else "trough"
        a1, a2, lam = KIND_MEANS[kind]
        params = ModelParams(a1=a1, a2=a2, lam=lam, e_bar=baseline)
        if kind == "peak":
            amp = rng.uniform(0.05, 0.15)
            n_peaks += 1
        else:
            amp = -rng.uniform(0.15, 0.28)
            n_troughs += 1
        pulse = InputPulse(float(amp), float(rng.uniform(50, 90)),
                           float(rng.uniform(15, 35)))
        start = i * slot + rng.uniform(0, slot * 0.2)
        traj = simulate_integral(params, pulse, initial_e=0.0,
                                 t_end=window, dt=dt)
        lo = int(np.searchsorted(t, start))
        for j, tv in enumerate(np.arange(0.0, window, interval)):
            if lo + j < len(t):
                glucose[lo + j] += traj.e[int(round(tv / dt))]
    if sensor_noise > 0:
        glucose = glucose + sensor_noise * rng.standard_normal(len(t))
    return (GlucoseTrace(subject_id=subject_id, t=t, glucose=glucose,
                         nominal_interval=interval),
            n_peaks, n_troughs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
