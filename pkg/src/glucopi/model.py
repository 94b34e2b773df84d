"""Two-variable closed-loop model of blood glucose homeostasis.

The observable state is the deviation ``e`` of blood glucose from a set
point ``e_bar`` (total glucose = e + e_bar, mmol/litre).  A single control
variable ``u`` aggregates every regulating pathway through a
proportional-integral law: the proportional part reacts to the current
deviation with gain ``a1``, the integral part to an exponentially weighted
history of deviations with gain ``a2`` and memory time scale ``1/lam``.

Two equivalent formulations are provided:

* :func:`simulate_integral` steps the scalar deviation equation directly,
  evaluating the control's convolution integral by the midpoint rule.
* :func:`simulate_planar` steps the equivalent planar ODE system in
  ``(u, e)`` obtained by differentiating the control law.

Both use fixed-step forward Euler.  All functions are pure; trajectories
are immutable records safe to share across workers.
"""

from __future__ import annotations

import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "TABLE1_RANGES",
    "A3_DEFAULT",
    "ModelParams",
    "InputPulse",
    "ModelState",
    "Trajectory",
    "feedback_concentration",
    "input_f",
    "constant_external_input",
    "simulate_planar",
    "simulate_integral",
]

# Expected parameter ranges across healthy test subjects (min, max), used
# only to warn: values outside are suspicious, not invalid.
TABLE1_RANGES: dict[str, tuple[float, float]] = {
    "a1": (0.0, 0.03274),
    "a2": (0.0, 0.04627),
    "lam": (0.02434, 0.05804),
    "e_bar": (4.0, 5.9),
}

# Basal metabolic rate, mmol/(min*litre); held constant for healthy subjects.
A3_DEFAULT = 0.0003

# Integral memory older than 10 time scales carries kernel mass < e^-10 and
# is dropped from the quadrature.
KERNEL_CUTOFF = 10.0

# Default simulation step, minutes.
DT_DEFAULT = 0.1


def _midpoint(lo: float, hi: float) -> float:
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class ModelParams:
    """Physiological parameters of the homeostasis model.

    a1     proportional control gain, litre/(min*mmol)
    a2     integral control gain, litre/(min*mmol)
    a3     basal metabolic rate, mmol/(min*litre)
    lam    inverse delay time scale of the integral memory, 1/min
    e_bar  set-point glucose concentration, mmol/litre
    """

    a1: float
    a2: float
    lam: float
    e_bar: float
    a3: float = A3_DEFAULT

    def __post_init__(self) -> None:
        if self.a1 < 0 or self.a2 < 0:
            raise ValueError(f"control gains must be nonnegative (a1={self.a1}, a2={self.a2})")
        if self.a1 + self.a2 <= 0:
            raise ValueError("a1 + a2 must be positive; the control loop would be absent")
        if self.lam <= 0:
            raise ValueError(f"lam must be positive, got {self.lam}")
        if self.e_bar <= 0:
            raise ValueError(f"e_bar must be positive, got {self.e_bar}")
        if self.a3 < 0:
            raise ValueError(f"a3 must be nonnegative, got {self.a3}")
        for name, (lo, hi) in TABLE1_RANGES.items():
            val = getattr(self, name)
            if not lo <= val <= hi:
                warnings.warn(
                    f"{name}={val:g} lies outside the expected healthy-subject "
                    f"range [{lo:g}, {hi:g}]",
                    stacklevel=2,
                )

    @classmethod
    def table1_midpoint(cls, a3: float = A3_DEFAULT) -> "ModelParams":
        """Parameters fixed at the arithmetic middle of each expected range."""
        return cls(
            a1=_midpoint(*TABLE1_RANGES["a1"]),
            a2=_midpoint(*TABLE1_RANGES["a2"]),
            lam=_midpoint(*TABLE1_RANGES["lam"]),
            e_bar=_midpoint(*TABLE1_RANGES["e_bar"]),
            a3=a3,
        )


@dataclass(frozen=True)
class InputPulse:
    """Gaussian external glucose input F(t).

    amplitude  peak rate, mmol/(min*litre); positive for meals
               (hyperglycemic excursions), negative for sinks driving
               hypoglycemic excursions
    center     time of the peak, minutes
    width      standard deviation of the Gaussian, minutes
    """

    amplitude: float
    center: float
    width: float

    def __post_init__(self) -> None:
        if self.width <= 0:
            raise ValueError(f"pulse width must be positive, got {self.width}")

    def __call__(self, t: float) -> float:
        z = (t - self.center) / self.width
        return self.amplitude * math.exp(-0.5 * z * z)


def input_f(pulse: InputPulse, t: float) -> float:
    """External input rate at time ``t`` for a Gaussian pulse."""
    return pulse(t)


def constant_external_input(params: ModelParams, g: float) -> float:
    """External input F making the net input -a3 + F equal ``g``."""
    return g + params.a3


@dataclass(frozen=True)
class ModelState:
    """Instantaneous state: control variable u, glucose deviation e, time t."""

    u: float
    e: float
    t: float = 0.0


ExternalInput = float | InputPulse | Callable[[float], float]


def _resolve_input(external_input: ExternalInput) -> Callable[[float], float]:
    if isinstance(external_input, (int, float)):
        const = float(external_input)
        return lambda t: const
    if callable(external_input):
        return external_input
    raise TypeError(f"external input must be a number or callable, got {external_input!r}")


def feedback_concentration(e: float, e_bar: float) -> float:
    """Concentration factor multiplying the control variable in the removal term.

    Equals total glucose e + e_bar when the deviation is positive (mass-action
    uptake) and saturates at the set point e_bar for negative deviations
    (linear glucose release).  Only defined for total glucose > 0.
    """
    if e <= -e_bar:
        raise ValueError(f"state outside model domain: e={e} <= -e_bar={-e_bar}")
    return max(e + e_bar, e_bar)


@dataclass(frozen=True)
class Trajectory:
    """Fixed-step simulation output.

    ``t``, ``e`` and ``u`` are equal-length arrays; ``escaped`` marks runs
    truncated because total glucose reached zero (e <= -e_bar), where the
    model stops being meaningful.
    """

    t: np.ndarray
    e: np.ndarray
    u: np.ndarray
    dt: float
    params: ModelParams
    escaped: bool = False
    escape_index: int | None = None

    def __post_init__(self) -> None:
        if not (len(self.t) == len(self.e) == len(self.u)):
            raise ValueError("t, e, u must have equal length")

    def __len__(self) -> int:
        return len(self.t)

    def state(self, i: int) -> ModelState:
        return ModelState(u=float(self.u[i]), e=float(self.e[i]), t=float(self.t[i]))

    @property
    def glucose(self) -> np.ndarray:
        """Total glucose e + e_bar, mmol/litre."""
        return self.e + self.params.e_bar

    def to_csv(self, path_or_buffer, header_comments: Sequence[str] = ()) -> None:
        """Write `t_min,e_mmol_per_l,u,glucose_mmol_per_l` rows."""
        own = isinstance(path_or_buffer, (str, bytes)) or hasattr(path_or_buffer, "__fspath__")
        fh = open(path_or_buffer, "w", newline="") if own else path_or_buffer
        try:
            for line in header_comments:
                fh.write(f"# {line}\n")
            fh.write("t_min,e_mmol_per_l,u,glucose_mmol_per_l\n")
            ebar = self.params.e_bar
            for t, e, u in zip(self.t, self.e, self.u):
                fh.write(f"{t:.10g},{e:.10g},{u:.10g},{e + ebar:.10g}\n")
        finally:
            if own:
                fh.close()

    def to_csv_string(self) -> str:
        buf = io.StringIO()
        self.to_csv(buf)
        return buf.getvalue()


def _check_step_args(dt: float, t_end: float, t0: float) -> int:
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if t_end <= t0:
        raise ValueError(f"t_end={t_end} must exceed the initial time {t0}")
    return int(round((t_end - t0) / dt))


def simulate_planar(
    params: ModelParams,
    external_input: ExternalInput,
    initial: ModelState | None = None,
    t_end: float = 600.0,
    dt: float = DT_DEFAULT,
) -> Trajectory:
    """Forward-Euler integration of the planar (u, e) system.

    du/dt = -lam*u + a1*f(u,e) + lam*(a1+a2)*e
    de/dt = f(u,e) = -a3 - u*feedback_concentration(e) + F(t)

    The default initial condition is (u, e) = (0, 0) at t = 0, which carries
    zero integral memory (u0 - a1*e0 = 0).  Crossing e <= -e_bar truncates
    the run and sets the ``escaped`` flag so that downstream fitting sees a
    flagged trajectory instead of a crash.
    """
    if initial is None:
        initial = ModelState(u=0.0, e=0.0, t=0.0)
    if initial.e <= -params.e_bar:
        raise ValueError(f"initial state outside model domain: e={initial.e} <= {-params.e_bar}")
    n = _check_step_args(dt, t_end, initial.t)
    fin = _resolve_input(external_input)

    a1, a2, a3 = params.a1, params.a2, params.a3
    lam, ebar = params.lam, params.e_bar
    lam_a12 = lam * (a1 + a2)

    ts = initial.t + dt * np.arange(n + 1)
    es = np.empty(n + 1)
    us = np.empty(n + 1)
    u = float(initial.u)
    e = float(initial.e)
    es[0] = e
    us[0] = u
    t = float(initial.t)
    escaped = False
    escape_index = None
    for k in range(n):
        phi = e + ebar if e > 0.0 else ebar
        f = -a3 - u * phi + fin(t)
        u += dt * (-lam * u + a1 * f + lam_a12 * e)
        e += dt * f
        t += dt
        es[k + 1] = e
        us[k + 1] = u
        if e <= -ebar:
            escaped = True
            escape_index = k + 1
            ts, es, us = ts[: k + 2], es[: k + 2], us[: k + 2]
            break
    return Trajectory(t=ts, e=es, u=us, dt=dt, params=params,
                      escaped=escaped, escape_index=escape_index)


def simulate_integral(
    params: ModelParams,
    external_input: ExternalInput,
    initial_e: float,
    history: float | Sequence[float] | None = None,
    t_end: float = 600.0,
    dt: float = DT_DEFAULT,
    t0: float = 0.0,
) -> Trajectory:
    """Forward-Euler integration of the delay-integral formulation.

    The control variable is reconstructed each step as

        u(t) = a1*e(t) + a2 * integral of lam*exp(-lam*(t-tau))*e(tau) dtau

    with the integral evaluated by the midpoint rule over the discrete
    trajectory.  ``history`` supplies e(tau) for tau < t0:

    * ``None`` — constant at ``initial_e`` (the default for fitted
      excursions, where the pre-excursion record is unknown),
    * a float — constant at that value (0.0 reproduces the planar system's
      default memory-free start),
    * a sequence — e-values on the same dt grid immediately before t0,
      oldest first, extended further back by its own first value.

    Memory older than 10/lam is dropped from the quadrature; the constant
    tail beyond the supplied samples is integrated in closed form.
    """
    if initial_e <= -params.e_bar:
        raise ValueError(f"initial state outside model domain: e={initial_e} <= {-params.e_bar}")
    n = _check_step_args(dt, t_end, t0)
    fin = _resolve_input(external_input)

    a1, a2, a3 = params.a1, params.a2, params.a3
    lam, ebar = params.lam, params.e_bar

    if history is None:
        hist = np.empty(0)
        tail_value = float(initial_e)
    elif isinstance(history, (int, float)):
        hist = np.empty(0)
        tail_value = float(history)
    else:
        hist = np.asarray(history, dtype=float)
        tail_value = float(hist[0]) if len(hist) else float(initial_e)

    # Panel weights: a panel whose midpoint lies k-1/2 steps in the past
    # contributes lam*dt*exp(-lam*(k-1/2)*dt) to the kernel integral.
    window = int(math.ceil(KERNEL_CUTOFF / (lam * dt)))
    w = lam * dt * np.exp(-lam * (np.arange(window) + 0.5) * dt)

    nh = len(hist)
    vals = np.empty(nh + n + 1)
    vals[:nh] = hist
    vals[nh] = initial_e
    # mids[j] is the midpoint value of the panel between vals[j] and vals[j+1]
    mids = np.empty(nh + n)
    if nh:
        mids[: nh] = 0.5 * (vals[:nh] + vals[1 : nh + 1])

    ts = t0 + dt * np.arange(n + 1)
    es = np.empty(n + 1)
    us = np.empty(n + 1)
    es[0] = initial_e
    # Time from the oldest stored sample to "now", for the analytic tail.
    tail_decay = math.exp(-lam * dt)
    tail = tail_value * math.exp(-lam * nh * dt)

    e = float(initial_e)
    t = float(t0)
    escaped = False
    escape_index = None
    k = 0
    for k in range(n):
        m = nh + k                           # completed panels so far
        npan = min(m, window)
        kernel = tail + (w[:npan] @ mids[m - 1 :: -1][:npan] if npan else 0.0)
        u = a1 * e + a2 * kernel
        us[k] = u
        phi = e + ebar if e > 0.0 else ebar
        f = -a3 - u * phi + fin(t)
        e_next = e + dt * f
        mids[m] = 0.5 * (e + e_next)
        e = e_next
        t += dt
        tail *= tail_decay
        es[k + 1] = e
        if e <= -ebar:
            escaped = True
            escape_index = k + 1
            break

    last = escape_index if escaped else n
    # Control value at the final retained sample.
    m = nh + last
    npan = min(m, window)
    kernel = tail + (w[:npan] @ mids[m - 1 :: -1][:npan] if npan else 0.0)
    us[last] = a1 * es[last] + a2 * kernel
    if escaped:
        ts, es, us = ts[: last + 1], es[: last + 1], us[: last + 1]
    return Trajectory(t=ts, e=es, u=us, dt=dt, params=params,
                      escaped=escaped, escape_index=escape_index)
