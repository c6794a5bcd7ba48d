"""Route preprocessing and distance-binned LSP trends with bootstrap median CIs."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .arrays import LinkState, wrap_angle
from .errors import InputError
from .lsp import LspRecord


@dataclass
class RouteDataset:
    area: str
    scenario: str  # "UMa" or "UMi"
    snapshots: list[LspRecord]
    sampling_interval: float = 0.5
    bs_position: tuple[float, float] = (0.0, 0.0)
    bs_orientation: float = 0.0  # radians, boresight azimuth in the map frame

    def with_snapshots(self, snaps: list[LspRecord]) -> "RouteDataset":
        return replace(self, snapshots=snaps)


def bearing(bs: tuple[float, float], orientation: float, ms: tuple[float, float]) -> float:
    """Azimuth of ``ms`` seen from the BS, relative to its boresight (radians)."""
    vx, vy = ms[0] - bs[0], ms[1] - bs[1]
    return float(wrap_angle(math.atan2(-vx, vy) - orientation))


def filter_valid(route: RouteDataset, sector: tuple[float, float] = (-50.0, 50.0)) -> RouteDataset:
    """Drop snapshots whose BS-to-MS bearing falls outside ``sector`` (degrees)."""
    lo, hi = sector
    if hi - lo >= 360.0:
        return route.with_snapshots(list(route.snapshots))
    kept = []
    for s in route.snapshots:
        if s.position is None:
            raise InputError(f"snapshot {s.snapshot_id} has no position")
        b = math.degrees(bearing(route.bs_position, route.bs_orientation, s.position))
        if lo <= b <= hi:
            kept.append(s)
    return route.with_snapshots(kept)


def deduplicate(route: RouteDataset, threshold: float = 1.0) -> RouteDataset:
    """Keep a snapshot only if it is at least ``threshold`` metres from the last kept one."""
    kept: list[LspRecord] = []
    last = None
    for s in route.snapshots:
        if s.position is None:
            raise InputError(f"snapshot {s.snapshot_id} has no position")
        p = np.asarray(s.position, dtype=float)
        if last is None or np.hypot(*(p - last)) >= threshold:
            kept.append(s)
            last = p
    return route.with_snapshots(kept)


@dataclass(frozen=True)
class BinningConfig:
    n_min: int = 20
    max_width: float = 50.0

    def __post_init__(self):
        if self.n_min < 2:
            raise InputError("n_min must be >= 2")
        if not self.max_width > 0:
            raise InputError("max_width must be positive")


@dataclass
class Binning:
    """Bins as half-open index ranges into the sorted distances."""

    boundaries: np.ndarray  # K+1 values, b_0 = d_1, midpoints between bins, b_K = d_N
    ranges: list[tuple[int, int]]
    sparse: list[bool]

    @property
    def counts(self) -> list[int]:
        return [j - i for i, j in self.ranges]

    @property
    def centers(self) -> np.ndarray:
        b = self.boundaries
        return (b[:-1] + b[1:]) / 2.0


def adaptive_bins(distances: Sequence[float], cfg: BinningConfig = BinningConfig()) -> Binning:
    """Sequential bins with at least ``n_min`` samples and at most ``max_width`` span.

    The width cap wins when the two conflict; such bins are flagged sparse.
    A short trailing bin is merged into its predecessor when the merged span
    still respects the cap.
    """
    d = np.asarray(distances, dtype=float)
    if d.size == 0:
        raise InputError("adaptive_bins needs at least one sample")
    if np.any(np.diff(d) < 0):
        raise InputError("distances must be sorted")
    n = d.size
    ranges: list[list[int]] = []
    i = 0
    while i < n:
        j = i + 1
        while j < n and j - i < cfg.n_min and d[j] - d[i] <= cfg.max_width:
            j += 1
        # equal distances never straddle a bin edge
        while j < n and d[j] == d[j - 1]:
            j += 1
        ranges.append([i, j])
        i = j
    if len(ranges) > 1:
        i, j = ranges[-1]
        pi, _ = ranges[-2]
        if j - i < cfg.n_min and d[j - 1] - d[pi] <= cfg.max_width:
            ranges[-2][1] = j
            ranges.pop()
    # interior edges sit halfway between neighbouring bins' outer samples
    bounds = [d[0]] + [(d[r[0] - 1] + d[r[0]]) / 2.0 for r in ranges[1:]] + [d[-1]]
    sparse = [(j - i) < cfg.n_min for i, j in ranges]
    return Binning(np.array(bounds), [tuple(r) for r in ranges], sparse)


def bootstrap_median_ci(
    values: Sequence[float],
    b: int = 1000,
    seed: int = 0,
    percentiles: tuple[float, float] = (5.0, 95.0),
) -> tuple[float, float, float]:
    """Sample median and percentile bootstrap CI of the median."""
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise InputError("bootstrap_median_ci needs at least one value")
    med = float(np.median(x))
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, x.size, size=(b, x.size))
    meds = np.median(x[idx], axis=1)
    lo, hi = np.percentile(meds, percentiles, method="linear")
    # percentile intervals can exclude the point estimate for tiny bins
    return med, float(min(lo, med)), float(max(hi, med))


@dataclass
class BinSummary:
    center: float
    median: float
    ci_low: float
    ci_high: float
    count: int
    lsp: str = ""
    state: str = ""
    sparse: bool = False
    seed: int = 0


def distance_trend(
    route: RouteDataset,
    lsp: str,
    state: LinkState | str | None = None,
    cfg: BinningConfig = BinningConfig(),
    seed: int = 0,
    b: int = 1000,
) -> list[BinSummary]:
    """Median and 5-95% bootstrap CI of ``lsp`` per adaptive distance bin.

    ``state=None`` returns LoS bins followed by NLoS bins. Bin ``k`` uses
    seed ``seed + k`` so bins can be processed in any order.
    """
    states = [LinkState.LOS, LinkState.NLOS] if state is None else [LinkState.parse(state)]
    out: list[BinSummary] = []
    for st in states:
        recs = sorted((r for r in route.snapshots if r.state is st), key=lambda r: r.d3d)
        if not recs:
            continue
        d = np.array([r.d3d for r in recs])
        v = np.array([r.value(lsp) for r in recs])
        bins = adaptive_bins(d, cfg)
        centers = bins.centers
        for k, ((i, j), sp) in enumerate(zip(bins.ranges, bins.sparse)):
            med, lo, hi = bootstrap_median_ci(v[i:j], b=b, seed=seed + k)
            out.append(BinSummary(float(centers[k]), med, lo, hi, j - i, lsp.upper(), st.value, sp, seed + k))
    return out
