"""Ingestion, smoothing, and excursion extraction."""

import io
import math

import numpy as np
import pytest

from glucopi.cgm import (
    GlucoseTrace,
    extract_excursions,
    ingest_csv,
    read_excursions_jsonl,
    smooth,
    write_excursions_jsonl,
)


def write_csv(tmp_path, rows, header="time,glucose"):
    path = tmp_path / "trace.csv"
    path.write_text(header + "\n" + "\n".join(rows) + "\n")
    return path


def gaussian_bump_trace(height=3.0, baseline=5.0, width=45.0, center=720.0,
                        span=1440.0, interval=15.0, sign=1.0):
    t = np.arange(0.0, span, interval)
    g = baseline + sign * height * np.exp(-((t - center) ** 2) / (2 * width ** 2))
    return GlucoseTrace(subject_id="synthetic", t=t, glucose=g,
                        nominal_interval=interval)


class TestIngest:
    def test_well_formed_file(self, tmp_path):
        path = write_csv(tmp_path, ["0,5.0", "15,5.2", "30,5.1", "45,5.3"])
        trace = ingest_csv(path)
        assert len(trace) == 4
        assert trace.gaps == ()
        assert trace.nominal_interval == 15.0

    def test_gap_annotation(self, tmp_path):
        # one 45-minute hole at 15-minute nominal sampling
        path = write_csv(tmp_path, ["0,5.0", "15,5.2", "60,5.1", "75,5.3"])
        trace = ingest_csv(path, nominal_interval=15.0)
        assert trace.gaps == ((1, 2),)

    def test_mgdl_conversion(self, tmp_path):
        path = write_csv(tmp_path, ["0,90", "15,95", "30,92"])
        trace = ingest_csv(path, unit="mgdl", nominal_interval=15.0)
        assert trace.glucose[0] == pytest.approx(4.996, abs=5e-4)

    def test_unsorted_and_duplicated_rows(self, tmp_path):
        path = write_csv(tmp_path, ["30,5.1", "0,5.0", "15,5.2", "15,9.9"])
        trace = ingest_csv(path, nominal_interval=15.0)
        assert list(trace.t) == [0.0, 15.0, 30.0]
        assert trace.glucose[1] == 5.2  # first occurrence wins

    def test_bad_rows_within_budget(self, tmp_path):
        rows = [f"{15*i},5.{i % 10}" for i in range(40)] + ["oops,noise"]
        path = write_csv(tmp_path, rows)
        trace = ingest_csv(path, nominal_interval=15.0)
        assert len(trace) == 40

    def test_bad_rows_over_budget_reports_rows(self, tmp_path):
        rows = ["0,5.0", "junk,x", "30,bad", "45,5.1"]
        path = write_csv(tmp_path, rows)
        with pytest.raises(ValueError, match=r"rows 3, 4"):
            ingest_csv(path, nominal_interval=15.0)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("time,glucose\n")
        with pytest.raises(ValueError, match="no data rows"):
            ingest_csv(path)

    def test_missing_column(self, tmp_path):
        path = write_csv(tmp_path, ["0,5.0"], header="time,bg")
        with pytest.raises(ValueError, match="missing columns"):
            ingest_csv(path)

    def test_implausible_values_quarantined_to_gaps(self, tmp_path):
        path = write_csv(tmp_path, ["0,5.0", "15,250.0", "30,5.1", "45,5.2"])
        trace = ingest_csv(path, nominal_interval=15.0)
        assert len(trace) == 3
        assert trace.gaps == ((0, 1),)

    def test_datetime_timestamps(self, tmp_path):
        rows = ["2023-01-01 00:00:00,5.0", "2023-01-01 00:15:00,5.2",
                "2023-01-01 00:30:00,5.1"]
        path = write_csv(tmp_path, rows)
        trace = ingest_csv(path)
        assert trace.nominal_interval == 15.0
        assert np.allclose(np.diff(trace.t), 15.0)


class TestSmooth:
    def test_constant_trace_unchanged(self):
        t = np.arange(0.0, 600.0, 15.0)
        trace = GlucoseTrace("s", t, np.full(len(t), 5.5), 15.0)
        out = smooth(trace, sigma=15.0)
        assert np.max(np.abs(out.glucose - 5.5)) < 1e-12

    def test_impulse_becomes_gaussian(self):
        # kernel width recovered from the smoothed impulse's second moment
        t = np.arange(0.0, 3000.0, 15.0)
        g = np.full(len(t), 5.0)
        g[100] += 1.0
        trace = GlucoseTrace("s", t, g, 15.0)
        sigma = 30.0
        out = smooth(trace, sigma=sigma)
        bump = out.glucose - 5.0
        m0 = bump.sum()
        mean = (t * bump).sum() / m0
        var = (((t - mean) ** 2) * bump).sum() / m0
        assert math.sqrt(var) == pytest.approx(sigma, rel=0.02)

    def test_linear_ramp_interior_unchanged(self):
        t = np.arange(0.0, 1500.0, 15.0)
        g = 4.0 + 0.001 * t
        trace = GlucoseTrace("s", t, g, 15.0)
        out = smooth(trace, sigma=15.0)
        interior = slice(10, -10)  # beyond the 6-sigma kernel radius
        assert np.max(np.abs(out.glucose[interior] - g[interior])) < 1e-9

    def test_no_smoothing_across_gaps(self):
        t = np.concatenate([np.arange(0.0, 300.0, 15.0),
                            np.arange(600.0, 900.0, 15.0)])
        g = np.concatenate([np.full(20, 4.0), np.full(20, 7.0)])
        trace = GlucoseTrace("s", t, g, 15.0, gaps=((19, 20),))
        out = smooth(trace, sigma=30.0)
        assert np.max(np.abs(out.glucose[:20] - 4.0)) < 1e-12
        assert np.max(np.abs(out.glucose[20:] - 7.0)) < 1e-12

    def test_sigma_validation(self):
        t = np.arange(0.0, 300.0, 15.0)
        trace = GlucoseTrace("s", t, np.full(len(t), 5.0), 15.0)
        with pytest.raises(ValueError):
            smooth(trace, sigma=0.0)


class TestExtract:
    def test_single_clean_peak(self):
        trace = smooth(gaussian_bump_trace(height=3.0), sigma=15.0)
        excursions = extract_excursions(trace, min_deviation=0.5)
        peaks = [x for x in excursions if x.kind == "peak"]
        troughs = [x for x in excursions if x.kind == "trough"]
        assert len(peaks) == 1
        assert len(troughs) == 0
        assert peaks[0].e_bar == pytest.approx(5.0, abs=0.05)
        assert np.all(peaks[0].deviation_series >= 0)

    def test_single_clean_trough(self):
        trace = smooth(gaussian_bump_trace(height=3.0, sign=-1.0), sigma=15.0)
        excursions = extract_excursions(trace, min_deviation=0.5)
        troughs = [x for x in excursions if x.kind == "trough"]
        assert len(troughs) == 1
        assert len([x for x in excursions if x.kind == "peak"]) == 0
        assert troughs[0].e_bar == pytest.approx(5.0, abs=0.05)
        assert np.all(troughs[0].deviation_series <= 0)

    def test_constant_trace_yields_nothing(self):
        t = np.arange(0.0, 1440.0, 15.0)
        trace = GlucoseTrace("s", t, np.full(len(t), 5.0), 15.0)
        assert extract_excursions(trace) == []

    def test_mirror_symmetry(self, rng):
        # reflecting about a constant swaps peaks and troughs exactly
        t = np.arange(0.0, 4320.0, 15.0)
        g = 5.0 + 0.9 * np.sin(t / 57.0) + 0.03 * rng.standard_normal(len(t))
        up = smooth(GlucoseTrace("s", t, g, 15.0), sigma=15.0)
        down = smooth(GlucoseTrace("s", t, 10.0 - g, 15.0), sigma=15.0)
        ex_up = extract_excursions(up, min_deviation=0.4)
        ex_down = extract_excursions(down, min_deviation=0.4)
        assert ex_up
        swap = {"peak": "trough", "trough": "peak"}
        key_up = [(x.start_idx, x.end_idx, swap[x.kind]) for x in ex_up]
        key_down = [(x.start_idx, x.end_idx, x.kind) for x in ex_down]
        assert sorted(key_up) == sorted(key_down)

    def test_time_shift_invariance(self):
        base = gaussian_bump_trace()
        shifted = GlucoseTrace("s", base.t + 9999.0, base.glucose.copy(), 15.0)
        ex0 = extract_excursions(smooth(base, 15.0))
        ex1 = extract_excursions(smooth(shifted, 15.0))
        assert len(ex0) == len(ex1) == 1
        assert ex0[0].start_idx == ex1[0].start_idx
        assert ex0[0].end_idx == ex1[0].end_idx
        assert np.allclose(ex1[0].t - ex0[0].t, 9999.0)

    def test_no_same_kind_overlap(self, rng):
        t = np.arange(0.0, 20160.0, 15.0)
        g = (5.0 + 0.9 * np.sin(t / 53.0) + 0.5 * np.sin(t / 149.0)
             + 0.03 * rng.standard_normal(len(t)))
        trace = smooth(GlucoseTrace("s", t, g, 15.0), sigma=15.0)
        excursions = extract_excursions(trace, min_deviation=0.3)
        assert excursions
        for kind in ("peak", "trough"):
            spans = sorted((x.start_idx, x.end_idx)
                           for x in excursions if x.kind == kind)
            for (s1, e1), (s2, e2) in zip(spans, spans[1:]):
                assert e1 < s2

    def test_deviation_sign_at_every_sample(self, rng):
        t = np.arange(0.0, 20160.0, 15.0)
        g = 5.0 + 1.2 * np.sin(t / 61.0) + 0.03 * rng.standard_normal(len(t))
        trace = smooth(GlucoseTrace("s", t, g, 15.0), sigma=15.0)
        for x in extract_excursions(trace, min_deviation=0.3):
            dev = x.deviation_series
            assert np.all(dev >= 0) if x.kind == "peak" else np.all(dev <= 0)

    def test_segments_respect_gaps(self):
        base = gaussian_bump_trace()
        cut = len(base.t) // 2
        trace = GlucoseTrace("s", base.t, base.glucose, 15.0,
                             gaps=((cut - 1, cut),))
        for x in extract_excursions(smooth(trace, 15.0)):
            assert not (x.start_idx < cut <= x.end_idx)

    def test_low_baseline_is_flagged(self):
        trace = smooth(gaussian_bump_trace(baseline=2.5, height=2.0), sigma=15.0)
        excursions = extract_excursions(trace, min_deviation=0.5)
        assert excursions
        assert "ebar-out-of-range" in excursions[0].flags
        assert "ebar-artifact" in excursions[0].flags


class TestExcursionRoundtrip:
    def test_jsonl_roundtrip(self):
        trace = smooth(gaussian_bump_trace(), sigma=15.0)
        excursions = extract_excursions(trace)
        buf = io.StringIO()
        n = write_excursions_jsonl(excursions, buf)
        assert n == len(excursions) == 1
        back = read_excursions_jsonl(buf.getvalue().splitlines())
        assert len(back) == 1
        assert back[0].kind == excursions[0].kind
        assert back[0].e_bar == excursions[0].e_bar
        assert np.allclose(back[0].t, excursions[0].t)
        assert np.allclose(back[0].glucose, excursions[0].glucose)
