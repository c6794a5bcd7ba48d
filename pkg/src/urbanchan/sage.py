"""Multipath extraction (SAGE), reconstruction residuals and K-power-means clustering.

Extraction runs successive interference cancellation for initialisation and
space-alternating coordinate updates (delay, departure azimuth, arrival
azimuth, then weight) for refinement. Each coordinate update maximises the
single-path likelihood ``|c(theta)^H x_l|^2 / ||c(theta)||^2`` on the
component's own signal estimate ``x_l = residual + s_l``, so the residual
power can never increase.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .arrays import (
    ArrayGeometry,
    CtfSnapshot,
    Mpc,
    SoundingConfig,
    steering_matrix,
    synthesize_ctf,
    wrap_angle,
)
from .errors import InputError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExtractionConfig:
    max_paths: int = 60
    residual_target: float = 0.05
    dynamic_range_db: float = 30.0
    delay_grid_bins: float = 1.0
    angle_grid_deg: float = 2.0
    refine_iters: int = 40
    em_rounds: int = 3
    convergence_tol: float = 1e-4
    # Pointing sectors in degrees; None picks the array default.
    scan_range_t: tuple[float, float] | None = None
    scan_range_r: tuple[float, float] | None = None

    def __post_init__(self):
        if self.max_paths < 1:
            raise InputError("max_paths must be >= 1")
        if not 0.0 < self.residual_target < 1.0:
            raise InputError("residual_target must lie in (0, 1)")
        if self.dynamic_range_db <= 0:
            raise InputError("dynamic_range_db must be positive")
        if self.em_rounds < 0 or self.refine_iters < 1:
            raise InputError("em_rounds must be >= 0 and refine_iters >= 1")


@dataclass
class ExtractionResult:
    mpcs: list[Mpc]
    residual_power_ratio: float
    iterations_used: int
    converged: bool
    residual_history: list[float] = field(default_factory=list)


class _Model:
    """Per-snapshot cache of the array/tone manifold used by the updates."""

    def __init__(self, tx, rx, cfg, scan_t, scan_r):
        self.tx, self.rx, self.cfg = tx, rx, cfg
        self.freqs = cfg.frequencies
        self.fc = cfg.center_frequency
        self.span = cfg.delay_span
        self.scan_t = np.radians(scan_t)
        self.scan_r = np.radians(scan_r)
        self.full_t = scan_t[1] - scan_t[0] >= 360.0
        self.full_r = scan_r[1] - scan_r[0] >= 360.0

    def a_t(self, phi):
        return steering_matrix(self.tx, phi, self.fc)

    def a_r(self, phi):
        return steering_matrix(self.rx, phi, self.fc)

    def e(self, tau):
        return np.exp(-2j * np.pi * self.freqs * tau)

    def atom(self, tau, phi_t, phi_r):
        ar = self.a_r([phi_r])[:, 0]
        at = self.a_t([phi_t])[:, 0]
        return ar, at, self.e(tau)

    def signal(self, gamma, tau, phi_t, phi_r):
        ar, at, e = self.atom(tau, phi_t, phi_r)
        return gamma * ar[:, None, None] * at[None, :, None] * e[None, None, :]


def _bounded_argmax(f, lo, hi, iters):
    res = minimize_scalar(lambda v: -f(v), bounds=(lo, hi), method="bounded",
                          options={"maxiter": iters, "xatol": 1e-12 * max(1.0, abs(hi))})
    return float(res.x), -float(res.fun)


class _Component:
    __slots__ = ("gamma", "tau", "phi_t", "phi_r")

    def __init__(self, gamma, tau, phi_t, phi_r):
        self.gamma, self.tau, self.phi_t, self.phi_r = gamma, tau, phi_t, phi_r

    def to_mpc(self) -> Mpc:
        return Mpc(self.gamma, max(self.tau, 0.0), self.phi_t, self.phi_r)


def _update_component(model: _Model, comp: _Component, x: np.ndarray, cfg: ExtractionConfig) -> float:
    """One space-alternating sweep tau -> phi_T -> phi_R -> gamma on ``x``.

    Returns the achieved objective |c^H x|^2/||c||^2. A coordinate move is
    kept only if it does not lower the objective.
    """
    n = model.cfg.num_tones
    ar, at, e = model.atom(comp.tau, comp.phi_t, comp.phi_r)

    def objective(ar, at, e):
        z = np.einsum("r,rtn,t,n->", ar.conj(), x, at.conj(), e.conj(), optimize=True)
        return abs(z) ** 2 / (np.vdot(ar, ar).real * np.vdot(at, at).real * n)

    best = objective(ar, at, e)

    # delay
    y = np.einsum("r,rtn,t->n", ar.conj(), x, at.conj(), optimize=True)
    step = model.cfg.delay_step * cfg.delay_grid_bins
    fd = lambda tau: abs(np.dot(y, np.exp(2j * np.pi * model.freqs * tau))) ** 2
    lo, hi = max(0.0, comp.tau - step), min(model.span, comp.tau + step)
    tau_new, val = _bounded_argmax(fd, lo, hi, cfg.refine_iters)
    val /= np.vdot(ar, ar).real * np.vdot(at, at).real * n
    if val >= best:
        comp.tau, best = tau_new, val
        e = model.e(comp.tau)

    # departure azimuth
    w_t = np.einsum("r,rtn,n->t", ar.conj(), x, e.conj(), optimize=True)
    comp.phi_t, best = _angle_update(model.a_t, w_t, comp.phi_t, best,
                                     np.vdot(ar, ar).real * n, model.scan_t, model.full_t, cfg)
    at = model.a_t([comp.phi_t])[:, 0]

    # arrival azimuth
    w_r = np.einsum("rtn,t,n->r", x, at.conj(), e.conj(), optimize=True)
    comp.phi_r, best = _angle_update(model.a_r, w_r, comp.phi_r, best,
                                     np.vdot(at, at).real * n, model.scan_r, model.full_r, cfg)
    ar = model.a_r([comp.phi_r])[:, 0]

    # weight: least squares given the other parameters
    c_norm = np.vdot(ar, ar).real * np.vdot(at, at).real * n
    z = np.einsum("r,rtn,t,n->", ar.conj(), x, at.conj(), e.conj(), optimize=True)
    comp.gamma = complex(z / c_norm)
    return abs(z) ** 2 / c_norm


def _angle_update(steer, w, phi0, best, other_norm, scan, full, cfg):
    """Local grid + bounded Brent search of |a(phi)^H w|^2 / ||a(phi)||^2."""
    half = math.radians(cfg.angle_grid_deg)

    def f(phi):
        a = steer(np.atleast_1d(phi))
        return np.abs(a.conj().T @ w) ** 2 / np.sum(np.abs(a) ** 2, axis=0) / other_norm

    lo, hi = phi0 - 2 * half, phi0 + 2 * half
    if not full:
        lo, hi = max(lo, scan[0]), min(hi, scan[1])
    grid = np.linspace(lo, hi, 17)
    vals = f(grid)
    i = int(np.argmax(vals))
    glo, ghi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    phi, val = _bounded_argmax(lambda p: float(f(p)[0]), glo, ghi, cfg.refine_iters)
    if vals[i] > val:
        phi, val = grid[i], vals[i]
    if val >= best:
        return float(wrap_angle(phi)), val
    return phi0, best


class _Initializer:
    """Coarse delay/angle matched-filter spectrum for seeding new components."""

    def __init__(self, model: _Model, cfg: ExtractionConfig, scan_t, scan_r):
        step = cfg.angle_grid_deg
        self.grid_t = np.radians(_grid(scan_t, step))
        self.grid_r = np.radians(_grid(scan_r, step))
        at = model.a_t(self.grid_t)
        ar = model.a_r(self.grid_r)
        # single precision is enough to locate the coarse peak
        self.at = (at / np.linalg.norm(at, axis=0)).conj().T.astype(np.complex64)
        self.ar = (ar / np.linalg.norm(ar, axis=0)).conj().T.astype(np.complex64)
        self.model = model
        n = model.cfg.num_tones
        self.nfft = max(n, int(round(n / cfg.delay_grid_bins)))

    def seed(self, x: np.ndarray):
        model = self.model
        # delay transform first (it commutes with beamforming), then beams per bin
        xd = np.fft.ifft(x, n=self.nfft, axis=-1).astype(np.complex64)  # (rx, tx, K)
        nr, nt, nk = xd.shape
        # two large GEMMs instead of a batched per-bin product
        y = self.at @ xd.transpose(1, 0, 2).reshape(nt, nr * nk)  # (nT, rx*K)
        y = y.reshape(-1, nr, nk).transpose(1, 0, 2).reshape(nr, -1)  # (rx, nT*K)
        z = self.ar @ y  # (nR, nT*K)
        p = z.real**2 + z.imag**2
        ir, it, k = np.unravel_index(int(np.argmax(p)), (z.shape[0], self.at.shape[0], nk))
        tau = k / (self.nfft * model.cfg.tone_spacing)
        return tau, float(self.grid_t[it]), float(self.grid_r[ir])


def _grid(scan, step):
    lo, hi = scan
    if hi - lo >= 360.0:
        return np.arange(-180.0, 180.0, step)
    return np.arange(lo, hi + 1e-9, step)


def _scan_ranges(tx, rx, cfg):
    st = cfg.scan_range_t if cfg.scan_range_t is not None else tx.default_scan()
    sr = cfg.scan_range_r if cfg.scan_range_r is not None else rx.default_scan()
    return st, sr


def extract_mpcs(
    snapshot: CtfSnapshot,
    tx: ArrayGeometry,
    rx: ArrayGeometry,
    cfg_s: SoundingConfig,
    cfg_e: ExtractionConfig | None = None,
) -> ExtractionResult:
    """Estimate plane-wave components of ``snapshot`` with SAGE.

    Components are admitted one at a time from the strongest peak of the
    residual's delay-angle spectrum, and every admitted component is then
    refined by space-alternating updates. Admission stops when the residual
    power ratio reaches ``residual_target``, when a new component would be
    weaker than ``dynamic_range_db`` below the strongest one, or at
    ``max_paths``.
    """
    cfg_e = cfg_e or ExtractionConfig()
    h = snapshot.h
    expected = (rx.num_elements, tx.num_elements, cfg_s.num_tones)
    if h.shape != expected:
        raise InputError(f"snapshot shape {h.shape} does not match arrays/sounding {expected}")
    if not snapshot.valid:
        raise InputError(f"snapshot {snapshot.snapshot_id} is marked invalid")
    total = snapshot.power
    if total == 0.0:
        return ExtractionResult([], 0.0, 0, True, [0.0])

    scan_t, scan_r = _scan_ranges(tx, rx, cfg_e)
    model = _Model(tx, rx, cfg_s, scan_t, scan_r)
    init = _Initializer(model, cfg_e, scan_t, scan_r)
    dr = 10.0 ** (-cfg_e.dynamic_range_db / 10.0)

    comps: list[_Component] = []
    signals: list[np.ndarray] = []
    residual = h.copy()
    history = [1.0]
    iterations = 0

    def sweep(indices):
        nonlocal residual, iterations
        for i in indices:
            c = comps[i]
            x = residual + signals[i]
            _update_component(model, c, x, cfg_e)
            signals[i] = model.signal(c.gamma, c.tau, c.phi_t, c.phi_r)
            residual = x - signals[i]
        iterations += 1

    while len(comps) < cfg_e.max_paths:
        tau, pt, pr = init.seed(residual)
        c = _Component(0j, tau, pt, pr)
        # a couple of updates on the residual alone settle the new component
        for _ in range(2):
            _update_component(model, c, residual, cfg_e)
        strongest = max((abs(k.gamma) ** 2 for k in comps), default=abs(c.gamma) ** 2)
        if abs(c.gamma) ** 2 < dr * strongest:
            log.debug("stop: candidate %.3g below dynamic range", abs(c.gamma) ** 2)
            break
        s = model.signal(c.gamma, c.tau, c.phi_t, c.phi_r)
        cand = residual - s
        if np.vdot(cand, cand).real > np.vdot(residual, residual).real:
            break
        comps.append(c)
        signals.append(s)
        residual = cand
        sweep(range(len(comps)))
        ratio = np.vdot(residual, residual).real / total
        history.append(ratio)
        if ratio <= cfg_e.residual_target:
            break

    converged = cfg_e.em_rounds == 0
    prev = np.vdot(residual, residual).real
    for _ in range(cfg_e.em_rounds):
        sweep(range(len(comps)))
        cur = np.vdot(residual, residual).real
        history.append(cur / total)
        if prev == 0.0 or abs(math.log(max(cur, 1e-300) / prev)) < cfg_e.convergence_tol:
            converged = True
            break
        prev = cur

    mpcs = sorted((c.to_mpc() for c in comps), key=lambda m: -m.power)
    ratio = float(np.vdot(residual, residual).real / total)
    return ExtractionResult(mpcs, min(max(ratio, 0.0), 1.0), iterations, converged, history)


def reconstruct_and_residual(
    snapshot: CtfSnapshot,
    mpcs: Sequence[Mpc],
    tx: ArrayGeometry,
    rx: ArrayGeometry,
    cfg: SoundingConfig,
) -> tuple[CtfSnapshot, float]:
    """Rebuild the CTF from ``mpcs`` and return it with ||H - H_rec||^2 / ||H||^2."""
    rec = synthesize_ctf(
        mpcs, tx, rx, cfg,
        position=snapshot.position, d3d=snapshot.d3d, state=snapshot.state,
        valid=snapshot.valid, snapshot_id=snapshot.snapshot_id,
    )
    if rec.h.shape != snapshot.h.shape:
        raise InputError("reconstruction shape differs from snapshot")
    total = snapshot.power
    if total == 0.0:
        raise InputError("undefined residual ratio: snapshot has zero power")
    diff = snapshot.h - rec.h
    return rec, float(np.vdot(diff, diff).real / total)


@dataclass
class ClusterResult:
    labels: np.ndarray
    centroids: list[tuple[float, float, float, float]]  # (tau, phi_t, phi_r, power)
    k: int
    seed: int = 0


def _features(mpcs, delay_scale):
    tau = np.array([m.tau for m in mpcs]) / delay_scale
    pt = np.array([m.phi_t for m in mpcs])
    pr = np.array([m.phi_r for m in mpcs])
    return tau, pt, pr


def _dist2(tau, pt, pr, c):
    dt = tau - c[0]
    # chord distance on the unit circle; behaves like the angle for small gaps
    da = 2.0 * np.sin(wrap_angle(pt - c[1]) / 2.0)
    dr = 2.0 * np.sin(wrap_angle(pr - c[2]) / 2.0)
    return dt**2 + da**2 + dr**2


def _kpm(tau, pt, pr, w, k, rng, iters=100):
    n = len(tau)
    # power-weighted farthest-point seeding from the strongest MPC
    first = int(np.argmax(w))
    cents = [(tau[first], pt[first], pr[first])]
    d = _dist2(tau, pt, pr, cents[0])
    for _ in range(1, k):
        score = w * d
        if score.max() <= 0:
            j = int(rng.integers(n))
        else:
            j = int(np.argmax(score))
        cents.append((tau[j], pt[j], pr[j]))
        d = np.minimum(d, _dist2(tau, pt, pr, cents[-1]))
    cents = np.array(cents, dtype=float)
    labels = np.full(n, -1)
    for _ in range(iters):
        dist = np.stack([_dist2(tau, pt, pr, c) for c in cents], axis=1)
        new = np.argmin(dist, axis=1)
        if np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            m = labels == j
            if not m.any():
                continue
            ww = w[m]
            cents[j, 0] = np.sum(ww * tau[m]) / ww.sum()
            cents[j, 1] = np.arctan2(np.sum(ww * np.sin(pt[m])), np.sum(ww * np.cos(pt[m])))
            cents[j, 2] = np.arctan2(np.sum(ww * np.sin(pr[m])), np.sum(ww * np.cos(pr[m])))
    dist = np.stack([_dist2(tau, pt, pr, c) for c in cents], axis=1)
    cost = float(np.sum(w * dist[np.arange(n), labels]))
    return labels, cents, cost


def cluster_kpm(
    mpcs: Sequence[Mpc],
    k: int | str = "auto",
    delay_scale: float = 50e-9,
    *,
    max_k: int = 10,
    seed: int = 0,
) -> ClusterResult:
    """Power-weighted k-means on (tau/delay_scale, phi_T, phi_R).

    ``k="auto"`` scans k = 1..max_k and picks the elbow: the k after which the
    relative drop in weighted within-cluster cost falls off the most.
    """
    if not mpcs:
        raise InputError("cluster_kpm needs at least one MPC")
    n = len(mpcs)
    # canonical order so the partition does not depend on input order
    order = sorted(range(n), key=lambda i: (-mpcs[i].power, mpcs[i].tau, mpcs[i].phi_t, mpcs[i].phi_r))
    ms = [mpcs[i] for i in order]
    tau, pt, pr = _features(ms, delay_scale)
    w = np.array([m.power for m in ms])
    if w.sum() <= 0:
        raise InputError("cluster_kpm needs positive total power")
    w = w / w.sum()

    if k == "auto":
        kmax = min(max_k, n)
        runs = [_kpm(tau, pt, pr, w, kk, np.random.default_rng(seed)) for kk in range(1, kmax + 1)]
        costs = np.array([r[2] for r in runs])
        if kmax <= 2 or costs[0] <= 0:
            best = 0 if kmax == 1 or costs[0] <= 0 else (1 if costs[1] < 0.5 * costs[0] else 0)
        else:
            gain = (costs[:-1] - costs[1:]) / np.maximum(costs[:-1], 1e-300)  # gain[i]: k=i+1 -> i+2
            drop = gain[:-1] - gain[1:]
            best = int(np.argmax(drop)) + 1
            if gain[best - 1] < 0.5:
                best = 0
        labels, cents, _ = runs[best]
        kk = best + 1
    else:
        kk = int(k)
        if kk < 1:
            raise InputError("k must be >= 1")
        if kk > n:
            raise InputError(f"k={kk} exceeds the number of MPCs ({n})")
        labels, cents, _ = _kpm(tau, pt, pr, w, kk, np.random.default_rng(seed))

    # relabel by first appearance in canonical order, then undo the sort
    remap = {}
    for lab in labels:
        remap.setdefault(int(lab), len(remap))
    canon = np.array([remap[int(l)] for l in labels])
    out = np.empty(n, dtype=int)
    out[np.array(order)] = canon
    raw_w = np.array([m.power for m in ms])
    centroids = []
    for old, new in sorted(remap.items(), key=lambda kv: kv[1]):
        m = labels == old
        centroids.append((
            float(cents[old, 0] * delay_scale),
            float(wrap_angle(cents[old, 1])),
            float(wrap_angle(cents[old, 2])),
            float(raw_w[m].sum()),
        ))
    return ClusterResult(out, centroids, len(centroids), seed)
