"""Plot-ready tables and rendered figures from fits and cohort statistics.

The report stage turns a batch of fitted excursions into the artifacts an
analyst actually looks at: per-excursion overlays of observed versus model
deviation, histogram and Q-Q source tables for each normalized parameter
distribution, the (a1, a2) clustering scatter, and a plain-text summary.
Every table is written as CSV and every CSV gets a rendered PNG next to it.
"""

from __future__ import annotations

import math
from pathlib import Path
from statistics import NormalDist
from typing import Sequence

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .fit import FitResult, record_to_fit_result, _simulate_deviation
from .stats import CohortTable, g_range

__all__ = ["write_overlay_csv", "generate_report"]

HIST_BINS = 10

_PNG_META = {"Software": "glucopi"}


def write_overlay_csv(path, t: np.ndarray, observed: np.ndarray,
                      model: np.ndarray, comments: Sequence[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        fh.write("t,observed_e,model_e\n")
        for a, b, c in zip(t, observed, model):
            fh.write(f"{a:.10g},{b:.10g},{c:.10g}\n")


def _overlay_model(rec: dict) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(model at observed t, dense t, dense model) for one fit record."""
    t = np.asarray(rec["t"], dtype=float)
    obs = np.asarray(rec["observed_e"], dtype=float)
    t0 = float(t[0])
    step = float(np.median(np.diff(t))) / 5.0 if len(t) > 1 else 1.0
    n = max(int(round((float(t[-1]) - t0) / step)), 1)
    es = _simulate_deviation(
        rec["a1"], rec["a2"], rec["lam"], rec["a3"], rec["e_bar"],
        rec["amplitude"], rec["center"], rec["width"],
        float(obs[0]), t0, n, step)
    if es is None:
        es = np.full(n + 1, np.nan)
    dense_t = t0 + step * np.arange(n + 1)
    idx = np.clip(np.rint((t - t0) / step).astype(int), 0, n)
    return es[idx], dense_t, es


def _plot_overlay(path, t, observed, model_at_obs, dense_t, dense_model, title):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(t, observed, "r--", label="observed")
    ax.plot(dense_t, dense_model, "k-", lw=1, label="model")
    ax.plot(t, model_at_obs, "kx", ms=5)
    ax.set_xlabel("time (min)")
    ax.set_ylabel("glucose deviation (mmol/litre)")
    ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)


def _hist_table(z: np.ndarray) -> list[tuple[float, float, int, float]]:
    counts, edges = np.histogram(z, bins=HIST_BINS)
    nd = NormalDist()
    rows = []
    for i, c in enumerate(counts):
        center = 0.5 * (edges[i] + edges[i + 1])
        rows.append((float(edges[i]), float(edges[i + 1]), int(c), nd.pdf(center)))
    return rows


def _qq_table(z: np.ndarray) -> list[tuple[float, float]]:
    zs = np.sort(z)
    n = len(zs)
    nd = NormalDist()
    return [(nd.inv_cdf((i - 0.5) / n), float(zs[i - 1])) for i in range(1, n + 1)]


def _plot_distribution(path, z, hist_rows, qq_rows, label):
    fig, (axh, axq) = plt.subplots(1, 2, figsize=(9, 4))
    edges = [r[0] for r in hist_rows] + [hist_rows[-1][1]]
    counts = [r[2] for r in hist_rows]
    axh.bar(edges[:-1], counts, width=np.diff(edges), align="edge",
            color="tab:blue", edgecolor="white")
    xs = np.linspace(min(edges), max(edges), 200)
    nd = NormalDist()
    binw = edges[1] - edges[0]
    axh.plot(xs, [nd.pdf(x) * len(z) * binw for x in xs], "r-", lw=1.5)
    axh.set_xlabel(label)
    axh.set_ylabel("subjects")
    tq = [r[0] for r in qq_rows]
    sq = [r[1] for r in qq_rows]
    axq.plot(tq, sq, "o", ms=3)
    lim = [min(tq + sq), max(tq + sq)]
    axq.plot(lim, lim, "r-", lw=1)
    axq.set_xlabel("normal quantile")
    axq.set_ylabel("sample quantile")
    fig.suptitle(label)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)


def _plot_scatter(path, rows):
    fig, ax = plt.subplots(figsize=(6, 5))
    for kind, marker, color in (("peak", "o", "tab:blue"), ("trough", "*", "tab:orange")):
        xs = [a1 for _, k, a1, _ in rows if k == kind]
        ys = [a2 for _, k, _, a2 in rows if k == kind]
        if xs:
            ax.scatter(xs, ys, marker=marker, s=28, color=color,
                       label=f"{kind}s", alpha=0.8)
    ax.set_xlabel("a1 mean, litre/(min*mmol)")
    ax.set_ylabel("a2 mean, litre/(min*mmol)")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)


def _write_table(path, header: str, rows, comments: Sequence[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(f"{v:.10g}" if isinstance(v, float) else str(v)
                              for v in row) + "\n")


def generate_report(
    fit_records: Sequence[dict],
    cohort: CohortTable,
    out_dir,
    comments: Sequence[str] = (),
    figures: bool = True,
) -> dict:
    """Emit overlay CSVs/figures, distribution tables, scatter, and summary.

    ``fit_records`` are the serialized fit dicts (with their observation
    series); returns a manifest of written paths and headline statistics.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    overlays = out / "overlays"
    overlays.mkdir(exist_ok=True)

    written: list[str] = []
    for i, rec in enumerate(fit_records):
        t = np.asarray(rec["t"], dtype=float)
        obs = np.asarray(rec["observed_e"], dtype=float)
        model_at_obs, dense_t, dense_model = _overlay_model(rec)
        stem = f"excursion_{i:04d}_{rec['kind']}"
        csv_path = overlays / f"{stem}.csv"
        write_overlay_csv(csv_path, t, obs, model_at_obs, comments)
        written.append(str(csv_path))
        if figures:
            png_path = overlays / f"{stem}.png"
            _plot_overlay(png_path, t, obs, model_at_obs, dense_t, dense_model,
                          f"{rec['subject_id']} {rec['kind']} E={rec['error']:.4f}")
            written.append(str(png_path))

    # distribution tables: 3 parameters x 2 kinds, delay scale on a log
    # axis for troughs
    cells = [("peak", "a1"), ("peak", "a2"), ("peak", "lam"),
             ("trough", "a1"), ("trough", "a2"), ("trough", "log_lam")]
    for kind, param in cells:
        vals = np.array([means[param]
                         for (s, k), means in sorted(cohort.subject_means.items())
                         if k == kind and param in means])
        if len(vals) < 3 or vals.std(ddof=1) == 0:
            continue
        z = (vals - vals.mean()) / vals.std(ddof=1)
        hist_rows = _hist_table(z)
        qq_rows = _qq_table(z)
        _write_table(out / f"hist_{kind}_{param}.csv",
                     "bin_left,bin_right,count,normal_density", hist_rows, comments)
        _write_table(out / f"qq_{kind}_{param}.csv",
                     "theoretical_quantile,sample_quantile", qq_rows, comments)
        written += [str(out / f"hist_{kind}_{param}.csv"),
                    str(out / f"qq_{kind}_{param}.csv")]
        if figures:
            _plot_distribution(out / f"dist_{kind}_{param}.png", z, hist_rows,
                               qq_rows, f"{kind} {param} (normalized)")
            written.append(str(out / f"dist_{kind}_{param}.png"))

    scatter_rows = cohort.scatter_rows()
    _write_table(out / "scatter_a1_a2.csv", "subject,kind,a1_mean,a2_mean",
                 scatter_rows, comments)
    written.append(str(out / "scatter_a1_a2.csv"))
    if figures and scatter_rows:
        _plot_scatter(out / "scatter_a1_a2.png", scatter_rows)
        written.append(str(out / "scatter_a1_a2.png"))

    summary = _summary_text(fit_records, cohort)
    (out / "summary.txt").write_text(summary)
    written.append(str(out / "summary.txt"))
    return {"written": written, "n_overlays": len(fit_records)}


def _summary_text(fit_records: Sequence[dict], cohort: CohortTable) -> str:
    lines = ["glucopi report", "=" * 40]
    for kind in ("peak", "trough"):
        errs = np.array([r["error"] for r in fit_records if r["kind"] == kind])
        if len(errs):
            lines.append(
                f"{kind}s: {len(errs)} fitted, error {errs.mean():.4f} "
                f"+/- {errs.std(ddof=1) if len(errs) > 1 else 0.0:.4f} "
                f"(max {errs.max():.4f})")
    fits = [_record_minimal(r) for r in fit_records]
    if fits:
        lo, hi = g_range(fits)
        lines.append(f"net input range across pulses: [{lo:.4f}, {hi:.4f}] mmol/(litre min)")
    lines.append("")
    lines.append(f"{'study':<12}{'kind':<8}{'param':<9}{'mean':>12}{'sd':>12}"
                 f"{'n':>5}{'p':>9}")
    for row in cohort.rows:
        p = f"{row.p_value:.3f}" if row.p_value is not None else "-"
        lines.append(f"{row.study:<12}{row.kind:<8}{row.parameter:<9}"
                     f"{row.mean:>12.5g}{row.sd:>12.5g}{row.count:>5}{p:>9}")
    return "\n".join(lines) + "\n"


def _record_minimal(rec: dict) -> FitResult:
    return record_to_fit_result(rec)
