"""Array geometry, steering vectors, CTF synthesis and double-directional beamforming.

Angle convention: azimuth is measured counter-clockwise from the array
boresight, which points along the local +y axis, so the propagation unit
vector is ``u(phi) = (-sin phi, cos phi)``. Angles are radians internally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import InputError

SPEED_OF_LIGHT = 299_792_458.0


def wrap_angle(phi):
    """Wrap radians to [-pi, pi)."""
    return (np.asarray(phi) + np.pi) % (2.0 * np.pi) - np.pi


class LinkState(str, Enum):
    LOS = "LoS"
    NLOS = "NLoS"

    @classmethod
    def parse(cls, value: "str | LinkState") -> "LinkState":
        if isinstance(value, LinkState):
            return value
        key = str(value).strip().lower()
        for member in cls:
            if member.value.lower() == key:
                return member
        raise InputError(f"unknown link state {value!r} (expected LoS or NLoS)")


@dataclass(frozen=True)
class SoundingConfig:
    """Multitone sounding grid. Frequencies in Hz."""

    center_frequency: float = 4.85e9
    num_tones: int = 510
    tone_spacing: float = 195e3
    bandwidth: float = 99.9e6

    def __post_init__(self):
        if not self.center_frequency > 0:
            raise InputError("center_frequency must be positive")
        if self.num_tones < 2:
            raise InputError("num_tones must be >= 2")
        if not self.tone_spacing > 0:
            raise InputError("tone_spacing must be positive")
        span = (self.num_tones - 1) * self.tone_spacing
        if abs(self.bandwidth - span) > 0.01 * self.bandwidth:
            raise InputError(
                f"bandwidth {self.bandwidth:g} Hz inconsistent with "
                f"(num_tones-1)*tone_spacing = {span:g} Hz (1% tolerance)"
            )

    @property
    def frequencies(self) -> np.ndarray:
        i = np.arange(self.num_tones)
        return self.center_frequency - self.bandwidth / 2.0 + i * self.tone_spacing

    @property
    def delay_step(self) -> float:
        return 1.0 / (self.num_tones * self.tone_spacing)

    @property
    def delay_span(self) -> float:
        """Unambiguous delay range 1/tone_spacing."""
        return 1.0 / self.tone_spacing

    @property
    def delays(self) -> np.ndarray:
        return np.arange(self.num_tones) * self.delay_step

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.center_frequency


@dataclass(frozen=True)
class ElementPattern:
    """Parametric azimuth amplitude pattern ``sqrt(G) * cos^q(theta)``.

    ``q`` is solved so the power pattern is 3 dB down at ``hpbw/2``. The
    pattern never drops below ``backlobe_db`` relative to its peak.
    ``hpbw_deg = 360`` gives an isotropic element. For beamwidths of 180
    degrees or more the raised-cosine form ``((1 + cos theta)/2)^q`` is used
    since ``cos(hpbw/2)`` is no longer positive.
    """

    hpbw_deg: float = 360.0
    gain_dbi: float = 0.0
    backlobe_db: float = -30.0

    def __post_init__(self):
        if not 0.0 < self.hpbw_deg <= 360.0:
            raise InputError("hpbw must lie in (0, 360] degrees")

    @property
    def exponent(self) -> float:
        if self.hpbw_deg >= 360.0:
            return 0.0
        half = math.radians(self.hpbw_deg) / 2.0
        if self.hpbw_deg < 180.0:
            return math.log(0.5) / (2.0 * math.log(math.cos(half)))
        return math.log(0.5) / (2.0 * math.log((1.0 + math.cos(half)) / 2.0))

    def amplitude(self, theta) -> np.ndarray:
        theta = wrap_angle(theta)
        peak = 10.0 ** (self.gain_dbi / 20.0)
        q = self.exponent
        if q == 0.0:
            return np.full(np.shape(theta), peak)
        if self.hpbw_deg < 180.0:
            c = np.clip(np.cos(theta), 0.0, None)
        else:
            c = (1.0 + np.cos(theta)) / 2.0
        floor = 10.0 ** (self.backlobe_db / 20.0)
        return peak * np.maximum(c**q, floor)


class ArrayKind(str, Enum):
    ULA = "ULA"
    UCA = "UCA"


@dataclass(frozen=True, eq=False)
class ArrayGeometry:
    kind: ArrayKind
    element_positions: np.ndarray  # (M, 2) metres, local frame
    element_boresights: np.ndarray  # (M,) radians, local frame
    pattern: ElementPattern = field(default_factory=ElementPattern)
    orientation: float = 0.0

    def __post_init__(self):
        pos = np.asarray(self.element_positions, dtype=float).reshape(-1, 2)
        bs = np.asarray(self.element_boresights, dtype=float).reshape(-1)
        if len(pos) < 1:
            raise InputError("array needs at least one element")
        if len(bs) != len(pos):
            raise InputError("one boresight per element required")
        object.__setattr__(self, "element_positions", pos)
        object.__setattr__(self, "element_boresights", bs)
        object.__setattr__(self, "kind", ArrayKind(self.kind))

    @property
    def num_elements(self) -> int:
        return len(self.element_positions)

    @classmethod
    def ula(
        cls,
        num_elements: int = 8,
        spacing: float | None = None,
        *,
        frequency: float = 4.85e9,
        pattern: ElementPattern | None = None,
        orientation: float = 0.0,
    ) -> "ArrayGeometry":
        """Uniform linear array along local x, boresight +y. Default spacing lambda/2."""
        if spacing is None:
            spacing = SPEED_OF_LIGHT / frequency / 2.0
        x = (np.arange(num_elements) - (num_elements - 1) / 2.0) * spacing
        pos = np.column_stack([x, np.zeros(num_elements)])
        return cls(
            ArrayKind.ULA,
            pos,
            np.zeros(num_elements),
            pattern or ElementPattern(),
            orientation,
        )

    @classmethod
    def uca(
        cls,
        num_elements: int = 8,
        radius: float | None = None,
        *,
        frequency: float = 4.85e9,
        pattern: ElementPattern | None = None,
        orientation: float = 0.0,
    ) -> "ArrayGeometry":
        """Uniform circular array with radially outward elements.

        Default radius gives lambda/2 spacing between neighbours.
        """
        if radius is None:
            lam = SPEED_OF_LIGHT / frequency
            radius = lam / (4.0 * math.sin(math.pi / num_elements)) if num_elements > 1 else 0.0
        psi = 2.0 * np.pi * np.arange(num_elements) / num_elements
        pos = radius * np.column_stack([-np.sin(psi), np.cos(psi)])
        return cls(
            ArrayKind.UCA,
            pos,
            wrap_angle(psi),
            pattern or ElementPattern(),
            orientation,
        )

    def default_scan(self) -> tuple[float, float]:
        """Default pointing sector in degrees."""
        if self.kind is ArrayKind.UCA:
            return (-180.0, 180.0)
        return (-50.0, 50.0)


def unit_vector(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    return np.stack([-np.sin(phi), np.cos(phi)], axis=-1)


def steering_matrix(array: ArrayGeometry, phi, frequency: float) -> np.ndarray:
    """Steering vectors for a batch of azimuths, shape (M, len(phi))."""
    if not frequency > 0:
        raise InputError("frequency must be positive")
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    if not np.all(np.isfinite(phi)):
        raise InputError("azimuth must be finite")
    local = phi - array.orientation
    k = 2.0 * np.pi * frequency / SPEED_OF_LIGHT
    proj = array.element_positions @ unit_vector(local).T  # (M, P)
    gain = array.pattern.amplitude(local[None, :] - array.element_boresights[:, None])
    return gain * np.exp(1j * k * proj)


def steering_vector(array: ArrayGeometry, phi: float, frequency: float) -> np.ndarray:
    return steering_matrix(array, [phi], frequency)[:, 0]


@dataclass(frozen=True)
class Mpc:
    """One plane-wave component. ``tau`` in seconds, angles in radians."""

    gamma: complex
    tau: float
    phi_t: float
    phi_r: float

    def __post_init__(self):
        if not (np.isfinite(self.tau) and self.tau >= 0):
            raise InputError(f"MPC delay must be finite and >= 0, got {self.tau}")
        g = complex(self.gamma)
        if not (np.isfinite(g.real) and np.isfinite(g.imag)):
            raise InputError("MPC weight must be finite")
        if not (np.isfinite(self.phi_t) and np.isfinite(self.phi_r)):
            raise InputError("MPC angles must be finite")
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "phi_t", float(wrap_angle(self.phi_t)))
        object.__setattr__(self, "phi_r", float(wrap_angle(self.phi_r)))

    @property
    def power(self) -> float:
        return abs(self.gamma) ** 2


@dataclass(eq=False)
class CtfSnapshot:
    """MIMO channel transfer function, ``h`` of shape (M_rx, M_tx, N)."""

    h: np.ndarray
    position: tuple[float, float] | None = None
    d3d: float | None = None
    state: LinkState = LinkState.LOS
    valid: bool = True
    snapshot_id: int = 0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=complex)
        if self.h.ndim != 3:
            raise InputError(f"CTF tensor must be 3-D (rx, tx, tone), got shape {self.h.shape}")
        if not np.all(np.isfinite(self.h)):
            raise InputError("CTF tensor contains non-finite entries")
        self.state = LinkState.parse(self.state)
        if self.d3d is not None and not self.d3d > 0:
            raise InputError("d3d must be positive")

    @property
    def power(self) -> float:
        return float(np.vdot(self.h, self.h).real)


def _tone_phasors(cfg: SoundingConfig, tau) -> np.ndarray:
    return np.exp(-2j * np.pi * np.outer(np.atleast_1d(tau), cfg.frequencies))


def synthesize_ctf(
    mpcs: Sequence[Mpc],
    tx: ArrayGeometry,
    rx: ArrayGeometry,
    cfg: SoundingConfig,
    **snapshot_fields,
) -> CtfSnapshot:
    """H(f) = sum_l gamma_l exp(-j 2 pi f tau_l) a_R(phi_R,l) a_T(phi_T,l)^T."""
    shape = (rx.num_elements, tx.num_elements, cfg.num_tones)
    meta = dict(snapshot_fields.pop("metadata", {}) or {})
    if not mpcs:
        return CtfSnapshot(np.zeros(shape, dtype=complex), metadata=meta, **snapshot_fields)
    gamma = np.array([m.gamma for m in mpcs], dtype=complex)
    tau = np.array([m.tau for m in mpcs])
    a_t = steering_matrix(tx, [m.phi_t for m in mpcs], cfg.center_frequency)
    a_r = steering_matrix(rx, [m.phi_r for m in mpcs], cfg.center_frequency)
    e = _tone_phasors(cfg, tau)
    h = np.einsum("l,rl,tl,ln->rtn", gamma, a_r, a_t, e, optimize=True)
    if np.any(tau >= cfg.delay_span):
        meta["delay_aliasing"] = True
    return CtfSnapshot(h, metadata=meta, **snapshot_fields)


@dataclass(frozen=True)
class BeamformerConfig:
    """Pointing grids and beam widths, all in degrees."""

    delta_t: float = 6.0
    delta_r: float = 6.0
    b_t: float = 12.0
    b_r: float = 24.0
    scan_range_t: tuple[float, float] = (-50.0, 50.0)
    scan_range_r: tuple[float, float] = (-180.0, 180.0)

    def __post_init__(self):
        for d, b, name in ((self.delta_t, self.b_t, "tx"), (self.delta_r, self.b_r, "rx")):
            if not 0 < d <= b:
                raise InputError(f"{name}: need 0 < delta <= beamwidth, got delta={d}, b={b}")
        for lo, hi in (self.scan_range_t, self.scan_range_r):
            if not hi > lo:
                raise InputError(f"empty scan range ({lo}, {hi})")

    @property
    def grid_t(self) -> np.ndarray:
        return pointing_grid(self.scan_range_t, self.delta_t)

    @property
    def grid_r(self) -> np.ndarray:
        return pointing_grid(self.scan_range_r, self.delta_r)


def pointing_grid(scan: tuple[float, float], step: float) -> np.ndarray:
    """Multiples of ``step`` inside ``scan`` (degrees); full circles exclude +180."""
    lo, hi = scan
    full = hi - lo >= 360.0
    k0 = math.ceil(lo / step - 1e-9)
    k1 = math.floor(hi / step + 1e-9)
    grid = np.arange(k0, k1 + 1) * step
    if full:
        grid = grid[grid < lo + 360.0 - 1e-9]
    if grid.size == 0:
        raise InputError(f"scan range {scan} contains no grid point at step {step}")
    return grid


@dataclass
class DirectionalSpectrum:
    """P(tau, phi_T, phi_R) on the pointing grids (degrees)."""

    p: np.ndarray  # (N, nT, nR)
    delay_step: float
    grid_t: np.ndarray
    grid_r: np.ndarray
    null_cells: np.ndarray  # (nT, nR) bool, compensation coefficient vanished

    @property
    def delays(self) -> np.ndarray:
        return np.arange(self.p.shape[0]) * self.delay_step


def beamform(
    snapshot: CtfSnapshot,
    tx: ArrayGeometry,
    rx: ArrayGeometry,
    bf: BeamformerConfig,
    cfg: SoundingConfig,
) -> DirectionalSpectrum:
    """Gain-compensated Bartlett beamformer followed by an inverse DFT over tones."""
    h = snapshot.h
    if h.shape != (rx.num_elements, tx.num_elements, cfg.num_tones):
        raise InputError(
            f"snapshot shape {h.shape} does not match arrays/sounding "
            f"({rx.num_elements}, {tx.num_elements}, {cfg.num_tones})"
        )
    gt, gr = bf.grid_t, bf.grid_r
    a_t = steering_matrix(tx, np.radians(gt), cfg.center_frequency)
    a_r = steering_matrix(rx, np.radians(gr), cfg.center_frequency)
    c_t = np.sum(np.abs(a_t) ** 2, axis=0)
    c_r = np.sum(np.abs(a_r) ** 2, axis=0)
    tiny = np.finfo(float).tiny * 1e6
    # H carries a_T^T, so the Tx weight is conjugated to match it
    g = np.einsum("rp,rtn,tq->nqp", a_r.conj(), h, a_t.conj(), optimize=True)
    null = (c_t[:, None] <= tiny) | (c_r[None, :] <= tiny)
    scale = np.where(null, 0.0, 1.0 / np.where(null, 1.0, np.outer(c_t, c_r)))
    g = g * scale[None, :, :]
    p = np.abs(np.fft.ifft(g, axis=0)) ** 2
    return DirectionalSpectrum(p, cfg.delay_step, gt, gr, null)


@dataclass
class Pdp:
    values: np.ndarray
    delay_step: float

    @property
    def delays(self) -> np.ndarray:
        return np.arange(len(self.values)) * self.delay_step


def pdp(spectrum: DirectionalSpectrum, bf: BeamformerConfig) -> Pdp:
    nt, nr = spectrum.p.shape[1:]
    if nt != len(bf.grid_t) or nr != len(bf.grid_r):
        raise InputError("beamformer grids do not match the spectrum")
    scale = (bf.delta_t * bf.delta_r) / (bf.b_t * bf.b_r)
    return Pdp(scale * spectrum.p.sum(axis=(1, 2)), spectrum.delay_step)
