"""Synthetic generators: MPC sets, noisy snapshots, Rician CTFs, Gauss-Markov traces and a demo route.

Everything here is seeded through ``numpy.random.Generator`` so results are
reproducible.
"""

from __future__ import annotations

import math

import numpy as np

from .arrays import (
    ArrayGeometry,
    CtfSnapshot,
    ElementPattern,
    LinkState,
    Mpc,
    SoundingConfig,
    synthesize_ctf,
)

# 8-element BS ULA (HPBW 90 deg, 4 dBi) and MS UCA (HPBW 74 deg, 6.5 dBi)
ULA_PATTERN = ElementPattern(hpbw_deg=90.0, gain_dbi=4.0)
UCA_PATTERN = ElementPattern(hpbw_deg=74.0, gain_dbi=6.5)


def measurement_arrays(cfg: SoundingConfig | None = None) -> tuple[ArrayGeometry, ArrayGeometry]:
    """(tx, rx) pair matching the 8x8 sounder: ULA at the BS, UCA at the MS."""
    f = (cfg or SoundingConfig()).center_frequency
    return (
        ArrayGeometry.ula(8, frequency=f, pattern=ULA_PATTERN),
        ArrayGeometry.uca(8, frequency=f, pattern=UCA_PATTERN),
    )


def add_noise(snapshot: CtfSnapshot, snr_db: float, rng: np.random.Generator) -> CtfSnapshot:
    """Add circular white Gaussian noise at ``snr_db`` relative to the mean entry power."""
    h = snapshot.h
    sig = np.mean(np.abs(h) ** 2)
    var = sig * 10.0 ** (-snr_db / 10.0)
    noise = math.sqrt(var / 2.0) * (rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape))
    return CtfSnapshot(h + noise, snapshot.position, snapshot.d3d, snapshot.state,
                       snapshot.valid, snapshot.snapshot_id, dict(snapshot.metadata))


def separated_mpcs(
    rng: np.random.Generator,
    n_paths: int,
    cfg: SoundingConfig,
    *,
    min_sep_bins: float = 3.0,
    tau_max: float = 1.5e-6,
    scan_t_deg: float = 45.0,
    power_range_db: float = 20.0,
) -> list[Mpc]:
    """Paths at least ``min_sep_bins`` delay bins apart with random angles and powers."""
    sep = min_sep_bins * cfg.delay_step
    taus: list[float] = []
    while len(taus) < n_paths:
        t = rng.uniform(20e-9, tau_max)
        if all(abs(t - u) >= sep for u in taus):
            taus.append(t)
    out = []
    for i, t in enumerate(taus):
        p_db = 0.0 if i == 0 else -rng.uniform(0.0, power_range_db)
        amp = 10.0 ** (p_db / 20.0) * 1e-4
        out.append(Mpc(
            amp * np.exp(2j * np.pi * rng.uniform()),
            t,
            math.radians(rng.uniform(-scan_t_deg, scan_t_deg)),
            math.radians(rng.uniform(-180.0, 180.0)),
        ))
    return out


def urban_mpcs(
    rng: np.random.Generator,
    n_paths: int = 50,
    *,
    k_factor_db: float = 6.0,
    decay_ns: float = 60.0,
    tau_max: float = 600e-9,
    los_tau: float = 100e-9,
    scan_t_deg: float = 45.0,
    path_gain: float = 1e-4,
) -> list[Mpc]:
    """LoS-type urban channel: one specular path plus exponentially decaying scatter.

    Scattered paths have delays after the LoS path, exponential mean power
    vs. excess delay with 3 dB lognormal spread, departure angles inside the
    BS sector around the LoS direction, and arrival angles over the full
    circle. Total scattered power is ``1/K`` of the LoS power.
    """
    phi_t0 = math.radians(rng.uniform(-20.0, 20.0))
    phi_r0 = math.radians(rng.uniform(-180.0, 180.0))
    excess = np.sort(rng.uniform(5e-9, tau_max - los_tau, n_paths - 1))
    p = np.exp(-excess / (decay_ns * 1e-9)) * 10.0 ** (rng.normal(0.0, 3.0, n_paths - 1) / 10.0)
    k_lin = 10.0 ** (k_factor_db / 10.0)
    p = p / p.sum() / k_lin
    mpcs = [Mpc(path_gain * np.exp(2j * np.pi * rng.uniform()), los_tau, phi_t0, phi_r0)]
    for t, pw in zip(excess, p):
        mpcs.append(Mpc(
            path_gain * math.sqrt(pw) * np.exp(2j * np.pi * rng.uniform()),
            los_tau + t,
            float(np.clip(phi_t0 + math.radians(rng.normal(0.0, 15.0)),
                          -math.radians(scan_t_deg), math.radians(scan_t_deg))),
            phi_r0 + math.radians(rng.normal(0.0, 60.0)),
        ))
    return mpcs


def rician_ctf(
    rng: np.random.Generator,
    k_linear: float,
    num_tones: int = 510,
    *,
    tone_spacing: float = 195e3,
    n_taps: int = 200,
    tap_span: float = 5.0e-6,
) -> np.ndarray:
    """Single-antenna frequency response: unit-power LoS + complex-Gaussian taps.

    The diffuse part is a sum of ``n_taps`` equal-power Gaussian taps spread
    uniformly over ``tap_span`` seconds, so tones decorrelate over a few bins.
    """
    f = np.arange(num_tones) * tone_spacing
    taus = rng.uniform(0.0, tap_span, n_taps)
    taps = (rng.standard_normal(n_taps) + 1j * rng.standard_normal(n_taps)) / math.sqrt(2 * n_taps)
    diffuse = np.exp(-2j * np.pi * np.outer(f, taus)) @ taps
    los = np.exp(2j * np.pi * rng.uniform())
    if math.isinf(k_linear):
        return np.full(num_tones, los)
    return math.sqrt(k_linear / (k_linear + 1.0)) * los + math.sqrt(1.0 / (k_linear + 1.0)) * diffuse


def gauss_markov(rng: np.random.Generator, d_corr: float, n: int, step: float = 1.0) -> np.ndarray:
    """Unit-variance AR(1) trace with exponential ACF exp(-d/d_corr)."""
    rho = math.exp(-step / d_corr)
    e = rng.standard_normal(n) * math.sqrt(1.0 - rho * rho)
    x = np.empty(n)
    x[0] = rng.standard_normal()
    for i in range(1, n):
        x[i] = rho * x[i - 1] + e[i]
    return x


def demo_route(
    seed: int = 0,
    *,
    n_snapshots: int = 60,
    cfg: SoundingConfig | None = None,
    snr_db: float = 30.0,
    tx: ArrayGeometry | None = None,
    rx: ArrayGeometry | None = None,
) -> dict:
    """Small synthetic drive test for the end-to-end pipeline.

    Returns a dict with ``sounding``, ``tx``, ``rx``, ``bs_position``,
    ``bs_orientation`` and a list of snapshots. Path gains follow a CI law
    (n=2.2 LoS, n=3.0 NLoS at 4.85 GHz) with correlated shadowing; the route
    is an L-shaped street starting 20 m from the BS.
    """
    cfg = cfg or SoundingConfig()
    if tx is None or rx is None:
        tx, rx = measurement_arrays(cfg)
    rng = np.random.default_rng(seed)
    s = np.arange(n_snapshots) * 4.0
    leg = n_snapshots // 2 * 4.0
    xy = np.where(
        s[:, None] < leg,
        np.column_stack([np.full_like(s, 5.0), 20.0 + s]),
        np.column_stack([5.0 + (s - leg), np.full_like(s, 20.0 + leg)]),
    )
    bs_height, ms_height = 30.0, 2.7
    shadow = gauss_markov(rng, 15.0, n_snapshots, step=4.0)
    snaps = []
    fspl = 32.4 + 20.0 * math.log10(cfg.center_frequency / 1e9)
    for i, (x, y) in enumerate(xy):
        d3d = math.sqrt(x * x + y * y + (bs_height - ms_height) ** 2)
        state = LinkState.LOS if i < n_snapshots // 2 else LinkState.NLOS
        n_exp, sigma = (2.2, 3.0) if state is LinkState.LOS else (3.0, 5.0)
        pl = fspl + 10.0 * n_exp * math.log10(d3d) + sigma * shadow[i]
        mpcs = urban_mpcs(
            rng, 8,
            k_factor_db=6.0 if state is LinkState.LOS else -3.0,
            decay_ns=40.0 if state is LinkState.LOS else 90.0,
            tau_max=500e-9,
            path_gain=1.0,
        )
        tot = sum(m.power for m in mpcs)
        scale = math.sqrt(10.0 ** (-pl / 10.0) / tot)
        mpcs = [Mpc(m.gamma * scale, m.tau, m.phi_t, m.phi_r) for m in mpcs]
        snap = synthesize_ctf(mpcs, tx, rx, cfg, position=(float(x), float(y)), d3d=d3d,
                              state=state, snapshot_id=i)
        snaps.append(add_noise(snap, snr_db, rng))
    return {
        "sounding": cfg,
        "tx": tx,
        "rx": rx,
        "bs_position": (0.0, 0.0),
        "bs_orientation": 0.0,
        "bs_height": bs_height,
        "ms_height": ms_height,
        "snapshots": snaps,
    }
