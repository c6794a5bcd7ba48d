"""Per-snapshot large-scale parameters from extracted MPCs."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .arrays import LinkState, Mpc, SoundingConfig
from .errors import InputError

ANGLE_FLOOR = 1e-12


def _weights(mpcs: Sequence[Mpc]) -> np.ndarray:
    if not mpcs:
        raise InputError("no MPCs given")
    p = np.array([abs(m.gamma) ** 2 for m in mpcs])
    if not p.sum() > 0:
        raise InputError("no detected power")
    return p


def path_loss(mpcs: Sequence[Mpc]) -> float:
    """Omnidirectional path loss in dB from the incoherent MPC power sum."""
    return float(-10.0 * np.log10(_weights(mpcs).sum()))


def delay_spread(mpcs: Sequence[Mpc]) -> float:
    """Power-weighted RMS delay spread in seconds."""
    p = _weights(mpcs)
    tau = np.array([m.tau for m in mpcs])
    w = p / p.sum()
    mean = np.dot(w, tau)
    # central form avoids cancellation between E[tau^2] and E[tau]^2
    return float(math.sqrt(np.dot(w, (tau - mean) ** 2)))


@dataclass(frozen=True)
class AngleSpread:
    degrees: float
    saturated: bool

    def __float__(self) -> float:
        return self.degrees


def angle_spread_detail(mpcs: Sequence[Mpc], side: str) -> AngleSpread:
    """Circular azimuth spread sqrt(-2 ln r) with its saturation flag."""
    p = _weights(mpcs)
    if side in ("departure", "t", "tx", "asd"):
        phi = np.array([m.phi_t for m in mpcs])
    elif side in ("arrival", "r", "rx", "asa"):
        phi = np.array([m.phi_r for m in mpcs])
    else:
        raise InputError(f"side must be 'departure' or 'arrival', got {side!r}")
    w = p / p.sum()
    z = np.dot(w, np.exp(1j * phi))
    r = abs(z)
    saturated = r < ANGLE_FLOOR
    if r > 0.5:
        # near-coherent sets: 1 - r from the deviations about the mean direction,
        # so a single path gives exactly zero instead of rounding noise
        one_minus_r = float(np.dot(w, 2.0 * np.sin((phi - np.angle(z)) / 2.0) ** 2))
        neg_log_r = -math.log1p(-min(one_minus_r, 0.5))
    else:
        neg_log_r = -math.log(max(r, ANGLE_FLOOR))
    return AngleSpread(math.degrees(math.sqrt(2.0 * neg_log_r)), saturated)


def angle_spread(mpcs: Sequence[Mpc], side: str) -> float:
    """Azimuth spread in degrees; ``side`` is 'departure' (ASD) or 'arrival' (ASA)."""
    return angle_spread_detail(mpcs, side).degrees


@dataclass(frozen=True)
class KfactorEstimate:
    k_linear: float | None  # None when the estimate is invalid (G_a^2 < G_v)
    k_db: float | None
    g_a: float
    g_v: float

    @property
    def valid(self) -> bool:
        return self.k_linear is not None


def k_factor(h: Sequence[complex]) -> KfactorEstimate:
    """Method-of-moments Rician K from samples of one frequency response."""
    h = np.asarray(h, dtype=complex).ravel()
    n = h.size
    if n < 2:
        raise InputError("k_factor needs at least two samples")
    p = np.abs(h) ** 2
    g_a = float(p.mean())
    if g_a == 0.0:
        raise InputError("k_factor input has zero power")
    g_v = float((np.sum(p * p) - n * g_a * g_a) / (n - 1))
    disc = g_a * g_a - g_v
    if disc < 0:
        return KfactorEstimate(None, None, g_a, g_v)
    root = math.sqrt(disc)
    den = g_a - root
    if den <= 0:
        return KfactorEstimate(math.inf, math.inf, g_a, g_v)
    k = root / den
    k_db = 10.0 * math.log10(k) if k > 0 else -math.inf
    return KfactorEstimate(k, k_db, g_a, g_v)


def omni_ctf(mpcs: Sequence[Mpc], cfg: SoundingConfig) -> np.ndarray:
    """Array-free CTF sum_l gamma_l exp(-j 2 pi f tau_l) on the tone grid."""
    if not mpcs:
        return np.zeros(cfg.num_tones, dtype=complex)
    g = np.array([m.gamma for m in mpcs], dtype=complex)
    tau = np.array([m.tau for m in mpcs])
    return np.exp(-2j * np.pi * np.outer(cfg.frequencies, tau)) @ g


@dataclass
class LspRecord:
    snapshot_id: int
    d3d: float
    state: LinkState
    pl_db: float
    ds: float  # seconds
    asa_deg: float
    asd_deg: float
    k_db: float | None = None
    k_valid: bool = True
    asa_saturated: bool = False
    asd_saturated: bool = False
    position: tuple[float, float] | None = None

    @property
    def log10_ds(self) -> float:
        return math.log10(self.ds) if self.ds > 0 else -math.inf

    def value(self, lsp: str) -> float:
        key = lsp.lower()
        if key == "ds":
            return self.ds
        if key == "asa":
            return self.asa_deg
        if key == "asd":
            return self.asd_deg
        if key == "pl":
            return self.pl_db
        if key == "k":
            return math.nan if self.k_db is None else self.k_db
        raise InputError(f"unknown LSP {lsp!r}")


def lsp_record(
    mpcs: Sequence[Mpc],
    cfg: SoundingConfig,
    *,
    snapshot_id: int = 0,
    d3d: float = math.nan,
    state: LinkState | str = LinkState.LOS,
    position: tuple[float, float] | None = None,
    ctf: np.ndarray | None = None,
) -> LspRecord:
    """Collect PL, DS, ASA, ASD and (LoS only) K-factor for one snapshot.

    ``ctf`` overrides the single-channel response used for K; by default the
    array-free reconstruction from ``mpcs`` is used.
    """
    state = LinkState.parse(state)
    asa = angle_spread_detail(mpcs, "arrival")
    asd = angle_spread_detail(mpcs, "departure")
    k_db, k_valid = None, True
    if state is LinkState.LOS:
        est = k_factor(omni_ctf(mpcs, cfg) if ctf is None else ctf)
        k_valid = est.valid
        k_db = est.k_db
    return LspRecord(
        snapshot_id=snapshot_id,
        d3d=d3d,
        state=state,
        pl_db=path_loss(mpcs),
        ds=delay_spread(mpcs),
        asa_deg=asa.degrees,
        asd_deg=asd.degrees,
        k_db=k_db,
        k_valid=k_valid,
        asa_saturated=asa.saturated,
        asd_saturated=asd.saturated,
        position=position,
    )
