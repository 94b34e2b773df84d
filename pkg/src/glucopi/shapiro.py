"""Shapiro-Wilk normality test, polynomial-approximation form.

Self-contained implementation of the W statistic and its p-value using the
widely adopted polynomial coefficient fits valid for sample sizes 3..5000
(the same approximation scheme standard statistical packages use).  The
test suite pins this against a frozen reference table generated once from
an established implementation.
"""

from __future__ import annotations

import math
from statistics import NormalDist
from typing import NamedTuple, Sequence

import numpy as np

__all__ = ["ShapiroResult", "shapiro_wilk"]

_NORMAL = NormalDist()

# Correction polynomials (highest degree first) for the two largest
# order-statistic coefficients, in powers of 1/sqrt(n).
_C1 = (-2.706056, 4.434685, -2.07119, -0.147981, 0.221157, 0.0)
_C2 = (-3.582633, 5.682633, -1.752461, -0.293762, 0.042981, 0.0)
# Null-distribution location/scale fits: small samples in powers of n,
# large samples in powers of log(n).
_C3 = (-0.0006714, 0.025054, -0.39978, 0.544)
_C4 = (-0.0020322, 0.062767, -0.77857, 1.3822)
_C5 = (0.0038915, -0.083751, -0.31082, -1.5861)
_C6 = (0.0030302, -0.082676, -0.4803)
_G = (0.459, -2.273)


class ShapiroResult(NamedTuple):
    statistic: float
    pvalue: float


def _polyval(coeffs: Sequence[float], x: float) -> float:
    acc = 0.0
    for c in coeffs:
        acc = acc * x + c
    return acc


def _coefficients(n: int) -> np.ndarray:
    """Lower-half weights a_1..a_{n//2} (the upper half is their negation)."""
    n2 = n // 2
    if n == 3:
        return np.array([-math.sqrt(0.5)])
    m = np.array([_NORMAL.inv_cdf((i - 0.375) / (n + 0.25))
                  for i in range(1, n2 + 1)])
    summ2 = 2.0 * float(m @ m)  # middle score of odd n is zero
    ssumm2 = math.sqrt(summ2)
    rsn = 1.0 / math.sqrt(n)
    a = m.copy()
    a1 = _polyval(_C1, rsn) - m[0] / ssumm2  # weight of the largest observation
    if n > 5:
        a2 = _polyval(_C2, rsn) - m[1] / ssumm2
        fac = math.sqrt((summ2 - 2.0 * m[0] ** 2 - 2.0 * m[1] ** 2)
                        / (1.0 - 2.0 * a1 ** 2 - 2.0 * a2 ** 2))
        a[0], a[1] = -a1, -a2
        a[2:] /= fac
    else:
        fac = math.sqrt((summ2 - 2.0 * m[0] ** 2) / (1.0 - 2.0 * a1 ** 2))
        a[0] = -a1
        a[1:] /= fac
    return a


def shapiro_wilk(sample: Sequence[float]) -> ShapiroResult:
    """W statistic and p-value for the normality null hypothesis.

    Valid for 3 <= n <= 5000; rejects constant samples, where W is
    undefined.  W is the squared correlation between the ordered sample
    and the expected normal order statistics, so it is invariant under
    affine rescaling of the data.
    """
    x = np.sort(np.asarray(sample, dtype=float))
    n = len(x)
    if n < 3:
        raise ValueError(f"need at least 3 observations, got {n}")
    if n > 5000:
        raise ValueError(f"approximation only valid up to n=5000, got {n}")
    if x[-1] - x[0] <= 0:
        raise ValueError("constant sample: W is undefined")

    a_lower = _coefficients(n)
    n2 = len(a_lower)
    num = float(a_lower @ x[:n2] - a_lower @ x[: n - n2 - 1 : -1])
    xc = x - x.mean()
    ssq = float(xc @ xc)
    w = num * num / ssq
    w = min(w, 1.0)

    if n == 3:
        p = (6.0 / math.pi) * (math.asin(math.sqrt(w)) - math.asin(math.sqrt(0.75)))
        return ShapiroResult(w, min(max(p, 0.0), 1.0))

    w1 = 1.0 - w
    if n <= 11:
        gamma = _polyval(_G, float(n))
        if math.log(w1) >= gamma:
            return ShapiroResult(w, 1e-19)
        y = -math.log(gamma - math.log(w1))
        mu = _polyval(_C3, float(n))
        sigma = math.exp(_polyval(_C4, float(n)))
    else:
        logn = math.log(n)
        y = math.log(w1)
        mu = _polyval(_C5, logn)
        sigma = math.exp(_polyval(_C6, logn))
    p = 1.0 - _NORMAL.cdf((y - mu) / sigma)
    return ShapiroResult(w, min(max(p, 0.0), 1.0))
