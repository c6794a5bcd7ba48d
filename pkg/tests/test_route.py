import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from urbanchan.arrays import LinkState
from urbanchan.errors import InputError
from urbanchan.lsp import LspRecord
from urbanchan.route import (
    BinningConfig,
    RouteDataset,
    adaptive_bins,
    bearing,
    bootstrap_median_ci,
    deduplicate,
    distance_trend,
    filter_valid,
)


def rec(i, pos=(0.0, 0.0), d3d=10.0, ds=50e-9, state=LinkState.LOS):
    return LspRecord(i, d3d, state, 80.0, ds, 20.0, 10.0, None, True, position=pos)


def route_along_x(xs, **kw):
    return RouteDataset("A", "UMa", [rec(i, (float(x), 0.0), **kw) for i, x in enumerate(xs)])


# ---- filtering and dedup -------------------------------------------------------------

def test_bearing_convention():
    # boresight along +y; positive bearings counter-clockwise
    assert bearing((0, 0), 0.0, (0, 10)) == pytest.approx(0.0)
    assert math.degrees(bearing((0, 0), 0.0, (-10, 10))) == pytest.approx(45.0)


def test_filter_valid_examples():
    on = rec(0, (0.0, 50.0))
    off = rec(1, (-50.0 * math.tan(math.radians(60)), 50.0))
    r = RouteDataset("A", "UMa", [on, off])
    assert [s.snapshot_id for s in filter_valid(r).snapshots] == [0]
    assert len(filter_valid(r, (-180.0, 180.0)).snapshots) == 2


def test_filter_valid_needs_positions():
    r = RouteDataset("A", "UMa", [LspRecord(0, 10.0, LinkState.LOS, 80.0, 1e-8, 1.0, 1.0)])
    with pytest.raises(InputError):
        filter_valid(r)


def test_dedup_examples():
    kept = deduplicate(route_along_x([0, 0.5, 1.2, 1.6, 2.4])).snapshots
    assert [s.position[0] for s in kept] == [0, 1.2, 2.4]
    assert len(deduplicate(route_along_x([3.0] * 7)).snapshots) == 1
    r = route_along_x([0, 1, 2.5, 4, 10])
    assert deduplicate(r).snapshots == r.snapshots


@given(st.lists(st.floats(0, 20), min_size=1, max_size=40), st.floats(0.1, 3))
def test_dedup_idempotent(xs, thr):
    once = deduplicate(route_along_x(xs), thr)
    assert deduplicate(once, thr).snapshots == once.snapshots


# ---- binning -------------------------------------------------------------------------

def test_hundred_uniform_samples_give_five_bins():
    b = adaptive_bins(np.linspace(0, 100, 100))
    assert b.counts == [20] * 5
    assert not any(b.sparse)


def test_few_samples_single_bin():
    b = adaptive_bins(np.linspace(0, 30, 10))
    assert b.counts == [10] and b.sparse == [True]


def test_ten_metre_spacing_respects_width():
    d = np.arange(0, 300, 10.0)
    b = adaptive_bins(d)
    for i, j in b.ranges:
        assert d[j - 1] - d[i] <= 50.0
    assert all(b.sparse)
    assert sum(b.counts) == d.size


@settings(max_examples=200)
@given(st.lists(st.floats(0, 1000), min_size=1, max_size=300), st.integers(2, 30), st.floats(1, 200))
def test_binning_is_partition(ds, n_min, width):
    d = np.sort(np.array(ds))
    b = adaptive_bins(d, BinningConfig(n_min, width))
    assert b.ranges[0][0] == 0 and b.ranges[-1][1] == d.size
    assert all(r[1] == s[0] for r, s in zip(b.ranges, b.ranges[1:]))
    assert all(j > i for i, j in b.ranges)
    assert b.boundaries[0] == d[0] and b.boundaries[-1] == d[-1]
    if len(b.ranges) > 1:
        assert np.all(np.diff(b.boundaries) > 0)
    for (i, j), lo, hi in zip(b.ranges, b.boundaries[:-1], b.boundaries[1:]):
        assert np.all((d[i:j] >= lo) & (d[i:j] <= hi))
    for i, j in b.ranges:
        assert d[j - 1] - d[i] <= width
    for (_, j), (i, _) in zip(b.ranges, b.ranges[1:]):
        assert d[j - 1] < d[i]


def test_binning_errors():
    with pytest.raises(InputError):
        adaptive_bins([])
    with pytest.raises(InputError):
        adaptive_bins([3.0, 1.0])
    with pytest.raises(InputError):
        BinningConfig(n_min=1)


# ---- bootstrap -------------------------------------------------------------------------

def test_bootstrap_constant():
    assert bootstrap_median_ci([4.2] * 17) == (4.2, 4.2, 4.2)


def test_bootstrap_reproducible_and_matches_oracle():
    x = np.random.default_rng(5).normal(size=37)
    a = bootstrap_median_ci(x, seed=9)
    assert a == bootstrap_median_ci(x, seed=9)
    rng = np.random.default_rng(9)
    meds = np.median(x[rng.integers(0, x.size, size=(1000, x.size))], axis=1)
    lo, hi = np.percentile(meds, [5, 95])
    assert a == (float(np.median(x)), float(lo), float(hi))


def test_bootstrap_coverage_normal():
    rng = np.random.default_rng(123)
    hits = 0
    for k in range(200):
        _, lo, hi = bootstrap_median_ci(rng.standard_normal(100), seed=k)
        hits += lo <= 0.0 <= hi
    assert hits >= 170


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50), st.integers(0, 1000))
def test_bootstrap_ci_brackets_median(vals, seed):
    med, lo, hi = bootstrap_median_ci(vals, b=50, seed=seed)
    assert lo <= med <= hi
    s = sorted(vals)
    n = len(s)
    assert med == pytest.approx((s[(n - 1) // 2] + s[n // 2]) / 2)


# ---- trends ----------------------------------------------------------------------------

def test_trend_constant_ds():
    r = RouteDataset("A", "UMa", [rec(i, d3d=10.0 + i, ds=50e-9) for i in range(100)])
    bins = distance_trend(r, "ds", "LoS", b=200)
    assert len(bins) == 5
    for s in bins:
        assert s.median == s.ci_low == s.ci_high == pytest.approx(50e-9)


def test_trend_linear_is_monotone():
    r = RouteDataset("A", "UMa", [rec(i, d3d=10.0 + i, ds=(10 + i) * 1e-9) for i in range(150)])
    meds = [s.median for s in distance_trend(r, "ds", "LoS", b=200)]
    assert all(b > a for a, b in zip(meds, meds[1:]))


def test_trend_states_are_separate():
    snaps = [rec(i, d3d=10.0 + i, ds=10e-9) for i in range(40)]
    snaps += [rec(100 + i, d3d=10.0 + i, ds=500e-9, state=LinkState.NLOS) for i in range(40)]
    r = RouteDataset("A", "UMa", snaps)
    bins = distance_trend(r, "ds", b=100)
    assert [s.state for s in bins] == ["LoS", "LoS", "NLoS", "NLoS"]
    assert all(s.median == pytest.approx(10e-9) for s in bins[:2])
    assert all(s.median == pytest.approx(500e-9) for s in bins[2:])
    assert distance_trend(RouteDataset("A", "UMa", snaps[:40]), "ds", "NLoS") == []


def test_trend_medians_match_sorted_middle():
    rng = np.random.default_rng(2)
    snaps = [rec(i, d3d=float(d), ds=float(v)) for i, (d, v) in
             enumerate(zip(np.sort(rng.uniform(10, 300, 77)), rng.uniform(1e-8, 1e-6, 77)))]
    r = RouteDataset("A", "UMa", snaps)
    b = adaptive_bins([s.d3d for s in snaps])
    trend = distance_trend(r, "ds", "LoS", b=10)
    for (i, j), s in zip(b.ranges, trend):
        v = sorted(x.ds for x in snaps[i:j])
        n = len(v)
        assert s.median == (v[(n - 1) // 2] + v[n // 2]) / 2
        assert s.count == n
