"""CGM trace ingestion, Gaussian smoothing, and excursion extraction.

A trace is a timestamped glucose series from a wearable monitor sampling
every 5 or 15 minutes.  Ingestion normalizes units, sorts, de-duplicates
and annotates gaps; smoothing suppresses instrument noise without crossing
gaps; extraction cuts the smoothed series into hyperglycemic peaks and
hypoglycemic troughs using first/second-derivative sign changes and
assigns each excursion its own baseline.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "MGDL_PER_MMOL",
    "GlucoseTrace",
    "Excursion",
    "ingest_csv",
    "smooth",
    "extract_excursions",
    "write_excursions_jsonl",
    "read_excursions_jsonl",
]

MGDL_PER_MMOL = 18.016

# Glucose readings outside this band are sensor artifacts, quarantined at
# ingestion (the hole is annotated as a gap, never silently closed).
PLAUSIBLE_MMOL = (0.0, 40.0)

# A hole wider than this multiple of the nominal interval is a gap.
GAP_FACTOR = 1.5

# Baselines outside Table-1-like expectations get a warning flag; outside
# the wider artifact band the excursion is additionally flagged as suspect.
EBAR_EXPECTED = (4.0, 5.9)
EBAR_ARTIFACT = (3.0, 8.0)

MIN_DEVIATION_DEFAULT = 0.5

_TIME_FORMATS = (
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%dT%H:%M:%S",
    "%d/%m/%Y %H:%M",
    "%m/%d/%Y %H:%M:%S",
    "%m/%d/%Y %H:%M",
)


def _parse_time_minutes(text: str) -> float:
    """Timestamp cell to minutes (numeric passes through, datetimes are
    converted to minutes since the Unix epoch)."""
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        pass
    try:
        stamp = datetime.fromisoformat(text)
    except ValueError:
        stamp = None
    if stamp is None:
        for fmt in _TIME_FORMATS:
            try:
                stamp = datetime.strptime(text, fmt)
                break
            except ValueError:
                continue
    if stamp is None:
        raise ValueError(f"unparseable timestamp {text!r}")
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=timezone.utc)
    return stamp.timestamp() / 60.0


@dataclass(frozen=True)
class GlucoseTrace:
    """Ordered CGM series with device metadata and gap annotations.

    ``gaps`` holds (left, right) index pairs bracketing temporal holes —
    either intervals wider than 1.5x the nominal sampling interval or the
    sites of quarantined implausible readings.
    """

    subject_id: str
    t: np.ndarray
    glucose: np.ndarray
    nominal_interval: float
    gaps: tuple[tuple[int, int], ...] = ()

    def __post_init__(self) -> None:
        if len(self.t) != len(self.glucose):
            raise ValueError("t and glucose must have equal length")
        if len(self.t) == 0:
            raise ValueError("empty trace")
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        lo, hi = PLAUSIBLE_MMOL
        if np.any(self.glucose <= lo) or np.any(self.glucose >= hi):
            raise ValueError(
                f"glucose values outside ({lo}, {hi}) mmol/litre; "
                "quarantine them at ingestion instead of constructing directly")
        if self.nominal_interval <= 0:
            raise ValueError("nominal_interval must be positive")

    def __len__(self) -> int:
        return len(self.t)

    def segments(self) -> list[tuple[int, int]]:
        """Contiguous (start, stop) index ranges between gaps, stop exclusive."""
        cuts = sorted(right for _, right in self.gaps)
        out = []
        start = 0
        for c in cuts:
            out.append((start, c))
            start = c
        out.append((start, len(self.t)))
        return [(a, b) for a, b in out if b > a]


def ingest_csv(
    path,
    time_col: str = "time",
    glucose_col: str = "glucose",
    unit: str = "mmol",
    nominal_interval: float | None = None,
    subject_id: str | None = None,
    bad_row_budget: float = 0.05,
) -> GlucoseTrace:
    """Parse a CGM CSV into a unit-normalized, gap-annotated trace.

    Rows that fail to parse are tolerated up to ``bad_row_budget`` of the
    data rows; beyond that the file is rejected with the offending row
    numbers.  mg/dL readings are converted by dividing by 18.016.
    """
    if unit not in ("mmol", "mgdl"):
        raise ValueError(f"unit must be 'mmol' or 'mgdl', got {unit!r}")
    rows: list[tuple[float, float]] = []
    bad: list[int] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty file")
        missing = {time_col, glucose_col} - set(reader.fieldnames)
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}; "
                             f"found {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            try:
                t = _parse_time_minutes(row[time_col])
                g = float(row[glucose_col])
            except (ValueError, TypeError, KeyError):
                bad.append(lineno)
                continue
            if unit == "mgdl":
                g /= MGDL_PER_MMOL
            rows.append((t, g))
    total = len(rows) + len(bad)
    if total == 0:
        raise ValueError(f"{path}: no data rows")
    if len(bad) > bad_row_budget * total:
        shown = ", ".join(map(str, bad[:20]))
        more = f" (+{len(bad) - 20} more)" if len(bad) > 20 else ""
        raise ValueError(
            f"{path}: {len(bad)}/{total} rows unparseable, over the "
            f"{bad_row_budget:.0%} budget; rows {shown}{more}")

    rows.sort(key=lambda r: r[0])
    # De-duplicate identical timestamps, keeping the first occurrence.
    t_list: list[float] = []
    g_list: list[float] = []
    for t, g in rows:
        if t_list and t == t_list[-1]:
            continue
        t_list.append(t)
        g_list.append(g)

    lo, hi = PLAUSIBLE_MMOL
    kept_t: list[float] = []
    kept_g: list[float] = []
    quarantine_holes: set[int] = set()
    for t, g in zip(t_list, g_list):
        if lo < g < hi:
            kept_t.append(t)
            kept_g.append(g)
        elif kept_t:
            # hole sits after the last kept sample
            quarantine_holes.add(len(kept_t) - 1)
    if not kept_t:
        raise ValueError(f"{path}: no plausible glucose readings")

    t_arr = np.array(kept_t)
    g_arr = np.array(kept_g)
    if nominal_interval is None:
        nominal_interval = float(np.median(np.diff(t_arr))) if len(t_arr) > 1 else 1.0
    gap_left = {i for i in range(len(t_arr) - 1)
                if t_arr[i + 1] - t_arr[i] > GAP_FACTOR * nominal_interval}
    gap_left |= {i for i in quarantine_holes if i < len(t_arr) - 1}
    gaps = tuple((i, i + 1) for i in sorted(gap_left))
    return GlucoseTrace(
        subject_id=subject_id or str(path),
        t=t_arr,
        glucose=g_arr,
        nominal_interval=float(nominal_interval),
        gaps=gaps,
    )


def smooth(trace: GlucoseTrace, sigma: float | None = None) -> GlucoseTrace:
    """Gaussian-kernel smoothing in time units, renormalized at edges.

    The kernel never reaches across gaps; each contiguous segment is
    smoothed independently with weights exp(-(ti-tj)^2 / (2 sigma^2))
    truncated at 6 sigma.  Defaults to sigma = one nominal interval.
    """
    if sigma is None:
        sigma = trace.nominal_interval
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    out = np.empty_like(trace.glucose)
    radius = 6.0 * sigma
    inv = 1.0 / (2.0 * sigma * sigma)
    for a, b in trace.segments():
        ts = trace.t[a:b]
        ys = trace.glucose[a:b]
        for i in range(len(ts)):
            j0 = int(np.searchsorted(ts, ts[i] - radius, side="left"))
            j1 = int(np.searchsorted(ts, ts[i] + radius, side="right"))
            w = np.exp(-((ts[j0:j1] - ts[i]) ** 2) * inv)
            out[a + i] = float(w @ ys[j0:j1] / w.sum())
    return GlucoseTrace(
        subject_id=trace.subject_id,
        t=trace.t.copy(),
        glucose=out,
        nominal_interval=trace.nominal_interval,
        gaps=trace.gaps,
    )


@dataclass(frozen=True)
class Excursion:
    """One extracted peak or trough with its own glucose baseline.

    ``deviation_series`` is glucose minus the baseline ``e_bar``, which is
    the segment minimum for peaks and maximum for troughs, so deviations
    carry the sign of the excursion kind at every sample.  Indices refer to
    the parent trace.
    """

    kind: str  # "peak" or "trough"
    subject_id: str
    start_idx: int
    end_idx: int  # inclusive
    t: np.ndarray
    glucose: np.ndarray
    e_bar: float
    nominal_interval: float
    flags: tuple[str, ...] = ()

    @property
    def deviation_series(self) -> np.ndarray:
        return self.glucose - self.e_bar

    @property
    def amplitude(self) -> float:
        dev = self.deviation_series
        k = int(np.argmax(np.abs(dev)))
        return float(dev[k])

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])

    def __len__(self) -> int:
        return len(self.t)


def _peak_candidates(d1: np.ndarray, y: np.ndarray) -> list[int]:
    """Indices of local maxima: first derivative crossing + to -."""
    out = []
    for i in range(len(d1) - 1):
        if d1[i] > 0 >= d1[i + 1]:
            out.append(i if y[i] >= y[i + 1] else i + 1)
    return out


def _prominence(y: np.ndarray, m: int) -> float:
    """Smaller of the two drops from a local maximum before higher terrain."""
    drops = []
    for step, bound in ((-1, -1), (+1, len(y))):
        j = m
        lowest = y[m]
        while j + step != bound:
            j += step
            if y[j] > y[m]:
                break
            lowest = min(lowest, y[j])
        drops.append(y[m] - lowest)
    return min(drops)


def _expand(y: np.ndarray, d2: np.ndarray, m: int, step: int,
            min_deviation: float, floor: float) -> int:
    """Walk outward from a maximum through the concave cap and convex flank.

    Stops just before the second derivative turns negative again (the next
    feature's cap), at the series boundary, or when the series drops below
    ``floor`` (the level of this feature's own base: descending further
    would climb down a neighbouring feature's wall and corrupt the
    baseline).  A reversal of the series itself is tolerated while the
    subsequent rise stays below ``min_deviation`` (shoulder wiggles and
    merged sub-peaks are absorbed); a larger rise marks the start of a
    genuine neighbouring feature and ends the segment at the shared valley.
    """
    n = len(y)
    j = m
    in_flank = False
    while True:
        nxt = j + step
        if nxt < 0 or nxt >= n:
            return j
        if y[nxt] < floor:
            return j
        if y[nxt] > y[j]:
            # series turning back up: measure the rise ahead
            k = nxt
            while 0 <= k + step < n and y[k + step] >= y[k]:
                k += step
            if y[k] - y[j] >= min_deviation:
                return j
            j = k
            continue
        if in_flank:
            if d2[nxt] < 0:
                return j
        elif d2[nxt] > 0:
            in_flank = True
        j = nxt


def _segments_one_sign(t: np.ndarray, y: np.ndarray,
                       min_deviation: float) -> list[tuple[int, int, int]]:
    """Maximal peak segments (l, r, n_modes) of one series, r inclusive."""
    if len(y) < 5:
        return []
    d1 = np.gradient(y, t)
    d2 = np.gradient(d1, t)
    maxima = [(m, prom) for m in _peak_candidates(d1, y)
              if (prom := _prominence(y, m)) >= min_deviation]
    raw = []
    for m, prom in maxima:
        floor = y[m] - prom
        l = _expand(y, d2, m, -1, min_deviation, floor)
        r = _expand(y, d2, m, +1, min_deviation, floor)
        raw.append((l, r))
    # Consolidate: candidates strictly overlapping merge into one segment;
    # neighbours sharing only the boundary valley stay separate, with the
    # shared sample assigned to the earlier segment.
    merged: list[list[int]] = []
    for l, r in sorted(raw):
        if merged and l < merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], r)
        elif merged and l <= merged[-1][1]:
            if r > merged[-1][1] + 1:
                merged.append([merged[-1][1] + 1, r])
        else:
            merged.append([l, r])
    out = []
    for l, r in merged:
        interior_modes = sum(1 for m in _peak_candidates(d1[l : r + 1], y[l : r + 1]))
        out.append((l, r, max(interior_modes, 1)))
    return out


def extract_excursions(
    trace: GlucoseTrace,
    min_deviation: float = MIN_DEVIATION_DEFAULT,
) -> list[Excursion]:
    """Cut a smoothed trace into peaks and troughs.

    Peaks are maximal runs around a first-derivative + to - crossing,
    delimited by the second derivative's return to negative on either
    flank; troughs are the exact mirror (the trough extractor runs the
    peak extractor on the negated series).  Segments never span gaps;
    candidates whose largest |deviation| stays below ``min_deviation``
    are discarded.  Overlapping same-kind candidates are merged into one
    multi-modal excursion rather than split.
    """
    if min_deviation <= 0:
        raise ValueError(f"min_deviation must be positive, got {min_deviation}")
    excursions: list[Excursion] = []
    for a, b in trace.segments():
        ts = trace.t[a:b]
        ys = trace.glucose[a:b]
        for kind, series in (("peak", ys), ("trough", -ys)):
            for l, r, modes in _segments_one_sign(ts, series, min_deviation):
                seg_y = ys[l : r + 1]
                if kind == "peak":
                    e_bar = float(seg_y.min())
                    amp = float(seg_y.max() - e_bar)
                else:
                    e_bar = float(seg_y.max())
                    amp = float(e_bar - seg_y.min())
                if amp < min_deviation:
                    continue
                flags = []
                if modes > 1:
                    flags.append("multimodal")
                if not EBAR_EXPECTED[0] <= e_bar <= EBAR_EXPECTED[1]:
                    flags.append("ebar-out-of-range")
                if not EBAR_ARTIFACT[0] <= e_bar <= EBAR_ARTIFACT[1]:
                    flags.append("ebar-artifact")
                excursions.append(Excursion(
                    kind=kind,
                    subject_id=trace.subject_id,
                    start_idx=a + l,
                    end_idx=a + r,
                    t=ts[l : r + 1].copy(),
                    glucose=seg_y.copy(),
                    e_bar=e_bar,
                    nominal_interval=trace.nominal_interval,
                    flags=tuple(flags),
                ))
    excursions.sort(key=lambda x: (x.start_idx, x.kind))
    return excursions


def write_excursions_jsonl(excursions: Iterable[Excursion], fh) -> int:
    """One JSON record per excursion; returns the record count."""
    n = 0
    for x in excursions:
        rec = {
            "kind": x.kind,
            "subject_id": x.subject_id,
            "start_idx": x.start_idx,
            "end_idx": x.end_idx,
            "e_bar": x.e_bar,
            "nominal_interval": x.nominal_interval,
            "flags": list(x.flags),
            "t": [float(v) for v in x.t],
            "e": [float(v) for v in x.deviation_series],
        }
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
        n += 1
    return n


def read_excursions_jsonl(lines: Iterable[str]) -> list[Excursion]:
    out = []
    for line in lines:
        line = line.strip()
        if not line:
            continue
        rec = json.loads(line)
        if "kind" not in rec:  # metadata record
            continue
        e_bar = float(rec["e_bar"])
        t = np.array(rec["t"], dtype=float)
        glucose = np.array(rec["e"], dtype=float) + e_bar
        out.append(Excursion(
            kind=rec["kind"],
            subject_id=rec["subject_id"],
            start_idx=int(rec["start_idx"]),
            end_idx=int(rec["end_idx"]),
            t=t,
            glucose=glucose,
            e_bar=e_bar,
            nominal_interval=float(rec["nominal_interval"]),
            flags=tuple(rec.get("flags", ())),
        ))
    return out
