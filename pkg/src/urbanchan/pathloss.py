"""Close-in (CI) and floating-intercept (FI) path-loss fits, plus the ABG reference model."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .arrays import LinkState
from .errors import DegenerateFitError, InputError


@dataclass(frozen=True)
class PlSample:
    d3d: float
    pl_db: float
    state: LinkState = LinkState.LOS

    def __post_init__(self):
        if not self.d3d > 0:
            raise InputError(f"d3d must be positive, got {self.d3d}")
        object.__setattr__(self, "state", LinkState.parse(self.state))


class PlModel(str, Enum):
    CI = "CI"
    FI = "FI"


@dataclass(frozen=True)
class PathlossFit:
    model: PlModel
    n_or_alpha: float
    beta: float | None
    sigma: float
    fc: float | None
    state: LinkState | None = None
    n_samples: int = 0
    d0: float | None = None

    def predict(self, d3d) -> np.ndarray:
        x = 10.0 * np.log10(np.asarray(d3d, dtype=float))
        if self.model is PlModel.CI:
            return fspl_1m(self.fc) + self.n_or_alpha * x
        return self.beta + self.n_or_alpha * x


@dataclass(frozen=True)
class AbgParams:
    alpha: float
    beta: float
    gamma: float
    sigma: float = 0.0


def fspl_1m(fc: float) -> float:
    """Free-space path loss at 1 m in dB, ``fc`` in Hz."""
    if not fc > 0:
        raise InputError("fc must be positive")
    return 32.4 + 20.0 * math.log10(fc / 1e9)


def _arrays(samples: Sequence[PlSample]):
    if len(samples) < 2:
        raise DegenerateFitError("need at least two samples")
    states = {s.state for s in samples}
    if len(states) > 1:
        raise InputError("mixed LoS/NLoS samples; fit each state separately")
    d = np.array([s.d3d for s in samples], dtype=float)
    pl = np.array([s.pl_db for s in samples], dtype=float)
    if not np.all(np.isfinite(pl)):
        raise InputError("non-finite path loss sample")
    if np.unique(d).size < 2:
        raise DegenerateFitError("all samples at the same distance")
    return d, pl, states.pop()


def _rms(r: np.ndarray, ddof: int) -> float:
    return float(math.sqrt(np.sum(r * r) / (len(r) - ddof)))


def fit_ci(samples: Sequence[PlSample], fc: float, *, ddof: int = 0) -> PathlossFit:
    """Least-squares path-loss exponent with the 1 m free-space anchor.

    ``sigma`` is the RMS residual; ``ddof=0`` gives the maximum-likelihood form.
    """
    d, pl, state = _arrays(samples)
    x = 10.0 * np.log10(d)
    y = pl - fspl_1m(fc)
    n = float(np.dot(x, y) / np.dot(x, x))
    return PathlossFit(PlModel.CI, n, None, _rms(y - n * x, ddof), fc, state, len(d), 1.0)


def fit_fi(samples: Sequence[PlSample], fc: float | None = None, *, ddof: int = 0) -> PathlossFit:
    """Ordinary least squares PL = 10 alpha log10(d) + beta."""
    d, pl, state = _arrays(samples)
    x = 10.0 * np.log10(d)
    xm, ym = x.mean(), pl.mean()
    alpha = float(np.dot(x - xm, pl - ym) / np.dot(x - xm, x - xm))
    beta = float(ym - alpha * xm)
    return PathlossFit(PlModel.FI, alpha, beta, _rms(pl - beta - alpha * x, ddof), fc, state, len(d))


def eval_abg(p: AbgParams, fc: float, d3d) -> np.ndarray | float:
    """ABG mean path loss in dB; ``fc`` in Hz, ``d3d`` in metres."""
    if not fc > 0:
        raise InputError("fc must be positive")
    d = np.asarray(d3d, dtype=float)
    if np.any(d <= 0):
        raise InputError("d3d must be positive")
    out = 10.0 * p.alpha * np.log10(d) + p.beta + 10.0 * p.gamma * math.log10(fc / 1e9)
    return float(out) if out.ndim == 0 else out


def fit_abg(samples: Iterable[tuple[float, float, float]], *, ddof: int = 0) -> AbgParams:
    """Multi-frequency ABG least squares over (fc_hz, d3d, pl_db) triples.

    Provided for completeness; the reference ABG parameters are normally
    taken from the ITU-R tables rather than fitted.
    """
    arr = np.array(list(samples), dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3 or len(arr) < 3:
        raise DegenerateFitError("need at least three (fc, d, pl) samples")
    a = np.column_stack([10 * np.log10(arr[:, 1]), np.ones(len(arr)), 10 * np.log10(arr[:, 0] / 1e9)])
    if np.linalg.matrix_rank(a) < 3:
        raise DegenerateFitError("ABG needs distinct distances and frequencies")
    coef, *_ = np.linalg.lstsq(a, arr[:, 2], rcond=None)
    r = arr[:, 2] - a @ coef
    return AbgParams(float(coef[0]), float(coef[1]), float(coef[2]), _rms(r, ddof))
