"""Spatial consistency of LSP traces: arc-length resampling, ACF, decorrelation distance.

Decorrelation distances are fitted to an exponential ACF model exp(-d/D)
and given percentile confidence intervals by a circular block bootstrap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

from .errors import EstimationError, InputError
from .lsp import LspRecord
from .pathloss import PathlossFit

INV_E = math.exp(-1.0)
_X_BOUNDS = (1e-3, 1e5)  # fit bounds on D in units of the sample step


@dataclass
class SpatialTrace:
    values: np.ndarray
    step: float  # metres
    lsp: str = ""
    state: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1 or self.values.size < 4:
            raise InputError("a spatial trace needs at least 4 samples")
        if not np.all(np.isfinite(self.values)):
            raise InputError("spatial trace contains non-finite values")
        if not self.step > 0:
            raise InputError("step must be positive")

    def __len__(self) -> int:
        return self.values.size

    @property
    def centered(self) -> np.ndarray:
        return self.values - self.values.mean()


def resample_arclength(
    positions: Sequence[Sequence[float]],
    values: Sequence[float],
    step: float,
    *,
    lsp: str = "",
    state: str = "",
) -> SpatialTrace:
    """Interpolate per-point values onto a uniform arc-length grid with PCHIP.

    Repeated consecutive positions carry no arc length and are dropped.
    """
    p = np.asarray(positions, dtype=float)
    v = np.asarray(values, dtype=float)
    if p.ndim != 2 or p.shape[1] != 2 or len(p) != len(v):
        raise InputError("positions must be (N, 2) with one value per position")
    if not step > 0:
        raise InputError("step must be positive")
    seg = np.hypot(*np.diff(p, axis=0).T)
    keep = np.concatenate([[True], seg > 0])
    s = np.concatenate([[0.0], np.cumsum(seg)])[keep]
    v = v[keep]
    if s.size < 2 or s[-1] <= 0:
        raise InputError("zero total arc length")
    grid = np.arange(0.0, s[-1] + 1e-9 * s[-1], step)
    return SpatialTrace(PchipInterpolator(s, v)(grid), step, lsp, state)


def empirical_acf(trace: SpatialTrace | Sequence[float], max_lag: int | None = None) -> np.ndarray:
    """Biased ACF normalised by the full-trace energy, so R[0] = 1 exactly."""
    x = trace.values if isinstance(trace, SpatialTrace) else np.asarray(trace, dtype=float)
    n = x.size
    y = x - x.mean()
    den = float(y @ y)
    if not den > 0:
        raise InputError("zero variance")
    max_lag = n - 1 if max_lag is None else min(int(max_lag), n - 1)
    f = np.fft.rfft(y, 2 * n)
    r = np.fft.irfft(f * np.conj(f), 2 * n)[: max_lag + 1] / den
    r[0] = 1.0
    return r


def _window(r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row fit length (lags through the first 1/e crossing, at least 3) and crossing lag."""
    k = r.shape[1]
    below = r <= INV_E
    has = below.any(axis=1)
    d0 = np.where(has, below.argmax(axis=1), k - 1)
    end = np.minimum(np.maximum(d0 + 1, 3), k)
    return end, d0


def _lm_exp(r: np.ndarray, end: np.ndarray, x0: np.ndarray, iters: int = 60) -> tuple[np.ndarray, np.ndarray]:
    """Batched Levenberg-Marquardt for min_x sum_l (r_l - exp(-l/x))^2 on l < end.

    Works in theta = ln x so x stays positive; returns (x, rms residual).
    """
    b, k = r.shape
    lag = np.arange(k)[None, :]
    mask = (lag < end[:, None]).astype(float)
    lo, hi = math.log(_X_BOUNDS[0]), math.log(_X_BOUNDS[1])
    th = np.log(np.clip(x0, *_X_BOUNDS))
    lam = np.full(b, 1e-3)

    def cost(t):
        m = np.exp(-lag * np.exp(-t)[:, None])
        return ((r - m) ** 2 * mask).sum(axis=1)

    c = cost(th)
    for _ in range(iters):
        a = np.exp(-th)[:, None]
        m = np.exp(-lag * a)
        jac = m * lag * a  # d model / d theta
        g = (mask * jac * (r - m)).sum(axis=1)
        h = (mask * jac * jac).sum(axis=1)
        tn = np.clip(th + g / (h * (1.0 + lam) + 1e-300), lo, hi)
        cn = cost(tn)
        acc = cn <= c
        th = np.where(acc, tn, th)
        c = np.where(acc, cn, c)
        lam = np.where(acc, lam * 0.3, lam * 10.0)
    return np.exp(th), np.sqrt(c / end)


@dataclass(frozen=True)
class DecorrFit:
    d_corr: float
    fit_rmse: float
    lags_used: int
    d0: float  # first 1/e crossing in metres


def fit_decorr(acf: Sequence[float], step: float) -> DecorrFit:
    """Least-squares exponential decorrelation distance from an ACF sequence.

    The fit window runs through the first 1/e crossing (at least three lags)
    and the crossing lag seeds the solver.
    """
    r = np.asarray(acf, dtype=float)
    if r.ndim != 1 or r.size < 3:
        raise InputError("fit_decorr needs at least 3 lags")
    if not abs(r[0] - 1.0) < 1e-9:
        raise InputError("acf[0] must be 1")
    if not step > 0:
        raise InputError("step must be positive")
    if not np.all(np.isfinite(r)):
        raise InputError("acf contains non-finite values")
    if not np.any(r <= INV_E) and np.all(np.diff(r) >= 0):
        raise InputError("no decay")
    end, d0 = _window(r[None, :])
    x, rmse = _lm_exp(r[None, :], end, np.maximum(d0, 0.5).astype(float))
    return DecorrFit(float(x[0]) * step, float(rmse[0]), int(end[0]), float(d0[0]) * step)


def default_block_len(d0_lags: float) -> int:
    return max(3 * int(math.ceil(d0_lags)), 10)


@dataclass(frozen=True)
class DecorrEstimate:
    d_corr: float  # metres
    ci_low: float
    ci_high: float
    fit_rmse: float
    lags_used: int
    n_fail: int = 0
    block_len: int = 0
    b: int = 0
    seed: int = 0
    lsp: str = ""
    state: str = ""


def _replicate_acfs(y: np.ndarray, starts: np.ndarray, block_len: int, max_lag: int) -> np.ndarray:
    """ACF of each circular block-bootstrap replicate, counting only lag pairs inside a block.

    ``starts`` is (B, M). Replicate b is the concatenation of y[starts[b, j] :
    starts[b, j] + len_j] (indices mod n), truncated to n samples. Products
    straddling two blocks pair values that were never adjacent, so they are
    excluded and each lag sum is rescaled to the n - l pairs of the
    original estimator.
    """
    n = y.size
    m = starts.shape[1]
    lens = np.full(m, block_len)
    lens[-1] = n - (m - 1) * block_len
    y2 = np.concatenate([y, y])
    cs = np.concatenate([[0.0], np.cumsum(y2)])
    mu = (cs[starts + lens] - cs[starts]).sum(axis=1) / n
    out = np.empty((starts.shape[0], max_lag + 1))
    for lag in range(max_lag + 1):
        cp = np.concatenate([[0.0], np.cumsum(y2[: 2 * n - lag] * y2[lag:])])
        cnt = np.clip(lens - lag, 0, None)[None, :]
        e = starts + cnt
        sxy = (cp[e] - cp[starts]).sum(axis=1)
        sa = (cs[e] - cs[starts]).sum(axis=1)
        sb = (cs[e + lag] - cs[starts + lag]).sum(axis=1)
        npair = int(cnt.sum())
        num = sxy - mu * (sa + sb) + npair * mu * mu
        out[:, lag] = num * (n - lag) / max(npair, 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return out / out[:, :1]


def block_bootstrap_ci(
    trace: SpatialTrace,
    block_len: int | None = None,
    b: int = 1000,
    seed: int = 0,
    *,
    max_lag: int | None = None,
    level: float = 0.95,
) -> DecorrEstimate:
    """Point estimate of D and its circular block bootstrap percentile CI.

    ``block_len`` defaults to max(3 ceil(D0/step), 10) with D0 the first 1/e
    crossing. Replicates whose fit fails are dropped and counted in ``n_fail``.
    """
    n = len(trace)
    max_lag = n // 4 if max_lag is None else min(int(max_lag), n - 1)
    if max_lag < 2:
        raise InputError("trace too short for a 3-lag fit")
    r = empirical_acf(trace, max_lag)
    point = fit_decorr(r, trace.step)
    d0_lags = point.d0 / trace.step
    if block_len is None:
        block_len = default_block_len(d0_lags)
    block_len = int(block_len)
    if block_len < 1 or n < 2 * block_len:
        raise InputError(f"trace length {n} must be at least twice the block length {block_len}")
    if b < 1:
        raise InputError("b must be positive")

    rng = np.random.default_rng(seed)
    m = -(-n // block_len)
    starts = rng.integers(0, n, size=(b, m))
    rep_lag = max(min(block_len - 1, max_lag), 2)
    rb = _replicate_acfs(trace.centered, starts, block_len, rep_lag)

    ok = np.all(np.isfinite(rb), axis=1) & (rb[:, 0] > 0)
    decays = np.any(rb <= INV_E, axis=1) | np.any(np.diff(rb, axis=1) < 0, axis=1)
    ok &= decays
    n_fail = int(b - ok.sum())
    if n_fail > b / 2:
        raise EstimationError(f"unstable correlation structure ({n_fail} of {b} replicates failed)")
    rb = rb[ok]
    end, d0 = _window(rb)
    x, _ = _lm_exp(rb, end, np.maximum(d0, 0.5).astype(float))
    at_bound = (x <= _X_BOUNDS[0] * 1.0001) | (x >= _X_BOUNDS[1] * 0.9999)
    n_fail += int(at_bound.sum())
    if n_fail > b / 2:
        raise EstimationError(f"unstable correlation structure ({n_fail} of {b} replicates failed)")
    ds = x[~at_bound] * trace.step
    alpha = (1.0 - level) / 2.0 * 100.0
    lo, hi = np.percentile(ds, [alpha, 100.0 - alpha])
    d = point.d_corr
    # a percentile interval need not contain the full-sample estimate
    return DecorrEstimate(d, float(min(lo, d)), float(max(hi, d)), point.fit_rmse, point.lags_used,
                          n_fail, block_len, b, seed, trace.lsp, trace.state)


def pl_residual_trace(records: Sequence[LspRecord], fit: PathlossFit, step: float) -> SpatialTrace:
    """Shadow-fading trace: PL minus the fitted mean, resampled along the route."""
    if any(r.position is None for r in records):
        raise InputError("pl_residual_trace needs positions for every record")
    d = np.array([r.d3d for r in records])
    res = np.array([r.pl_db for r in records]) - fit.predict(d)
    state = fit.state.value if fit.state is not None else ""
    return resample_arclength([r.position for r in records], res, step, lsp="SF", state=state)


def lsp_trace(records: Sequence[LspRecord], lsp: str, step: float) -> SpatialTrace:
    """Resampled trace of one LSP; DS is taken in log10 seconds."""
    if any(r.position is None for r in records):
        raise InputError("lsp_trace needs positions for every record")
    key = lsp.lower()
    vals = [r.log10_ds if key == "ds" else r.value(key) for r in records]
    state = records[0].state.value if records else ""
    return resample_arclength([r.position for r in records], vals, step, lsp=lsp.upper(), state=state)
