"""Frequency-continuous LSP models log10 X(f) = a log10 f + b with a <= 0.

Coefficients are fitted to anchor points by iteratively reweighted least
squares with Tukey bisquare weights. Reference 3GPP mean formulas and the
literature anchors ship as CSV files in ``urbanchan/data``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .arrays import LinkState
from .errors import DegenerateFitError, EstimationError, InputError, InsufficientAnchorsError
from .lsp import LspRecord

LSPS = ("DS", "ASA", "ASD")
SCENARIOS = ("UMa", "UMi")
ROUTE_FREQ_GHZ = 4.85
FR1_FR3_BOUNDARY_GHZ = 7.125


def parse_scenario(s: str) -> str:
    for name in SCENARIOS:
        if s.strip().lower() == name.lower():
            return name
    raise InputError(f"unknown scenario {s!r}")


def parse_lsp(s: str) -> str:
    key = s.strip().upper()
    if key not in LSPS:
        raise InputError(f"unknown LSP {s!r}; expected one of {LSPS}")
    return key


@dataclass(frozen=True)
class AnchorPoint:
    freq: float  # GHz
    scenario: str
    state: LinkState
    lsp: str
    value: float  # seconds for DS, degrees for angles
    source: str = ""

    def __post_init__(self):
        if not self.freq > 0:
            raise InputError(f"anchor frequency must be positive, got {self.freq}")
        if not (self.value > 0 and math.isfinite(self.value)):
            raise InputError(f"anchor value must be positive and finite, got {self.value}")
        object.__setattr__(self, "scenario", parse_scenario(self.scenario))
        object.__setattr__(self, "state", LinkState.parse(self.state))
        object.__setattr__(self, "lsp", parse_lsp(self.lsp))

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.scenario, self.state.value, self.lsp)


@dataclass(frozen=True)
class RobustFitConfig:
    tukey_k: float = 4.685
    mad_scale: float = 0.6745
    max_irls_iters: int = 100
    tol: float = 1e-10
    min_distinct_freqs: int = 3
    rescale_each_iter: bool = False  # sensitivity mode: re-estimate s_r every iteration

    def __post_init__(self):
        if not self.tukey_k > 0:
            raise InputError("tukey_k must be positive")
        if not self.mad_scale > 0:
            raise InputError("mad_scale must be positive")
        if self.max_irls_iters < 1:
            raise InputError("max_irls_iters must be >= 1")


@dataclass(frozen=True)
class FreqModel:
    a: float
    b: float
    scenario: str = ""
    state: str = ""
    lsp: str = ""
    n_anchors: int = 0
    constraint_active: bool = False
    scale: float = 0.0  # frozen robust residual scale s_r
    weights: tuple[float, ...] = field(default=(), compare=False)
    iterations: int = 0

    def log10_value(self, f) -> np.ndarray | float:
        return self.a * np.log10(f) + self.b

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "state": self.state,
            "lsp": self.lsp,
            "a": self.a,
            "b": self.b,
            "constraint_active": self.constraint_active,
            "n_anchors": self.n_anchors,
        }


def _check_freq(f) -> np.ndarray:
    arr = np.asarray(f, dtype=float)
    if np.any(~(arr > 0)):
        raise InputError("frequency must be positive")
    return arr


def _out(x: np.ndarray):
    return float(x) if x.ndim == 0 else x


def eval_freq_model(model: FreqModel, f) -> np.ndarray | float:
    """Linear LSP value at ``f`` GHz (seconds for DS, degrees otherwise)."""
    return _out(10.0 ** model.log10_value(_check_freq(f)))


def _mad(r: np.ndarray, scale: float) -> float:
    return float(np.median(np.abs(r - np.median(r))) / scale)


def _bisquare(r: np.ndarray, c: float) -> np.ndarray:
    z = r / c
    return np.where(np.abs(z) <= 1.0, (1.0 - z * z) ** 2, 0.0)


def _irls(a_mat: np.ndarray, v: np.ndarray, cfg: RobustFitConfig):
    """Bisquare IRLS from the OLS start; returns (coef, weights, s_r, iterations)."""
    coef, *_ = np.linalg.lstsq(a_mat, v, rcond=None)
    s = _mad(v - a_mat @ coef, cfg.mad_scale)
    # a scale at rounding level means the OLS line already fits exactly
    if s <= 1e-12 * max(1.0, float(np.max(np.abs(v)))):
        return coef, np.ones_like(v), 0.0, 0
    w = np.ones_like(v)
    it = 0
    for it in range(1, cfg.max_irls_iters + 1):
        r = v - a_mat @ coef
        if cfg.rescale_each_iter and it > 1:
            s = _mad(r, cfg.mad_scale) or s
        w = _bisquare(r, cfg.tukey_k * s)
        sw = np.sqrt(w)
        aw = a_mat * sw[:, None]
        if np.linalg.matrix_rank(aw) < a_mat.shape[1]:
            raise EstimationError("bisquare weights left too few effective anchors")
        new, *_ = np.linalg.lstsq(aw, v * sw, rcond=None)
        done = np.max(np.abs(new - coef)) <= cfg.tol * max(1.0, np.max(np.abs(coef)))
        coef = new
        if done:
            break
    w = _bisquare(v - a_mat @ coef, cfg.tukey_k * s)
    return coef, w, s, it


def fit_freq_model(anchors: Sequence[AnchorPoint], cfg: RobustFitConfig = RobustFitConfig()) -> FreqModel:
    """Constrained robust log-log fit of one (scenario, state, lsp) anchor set.

    Needs at least ``cfg.min_distinct_freqs`` distinct frequencies: repeated
    anchors at one frequency pin the level there but not the slope. A
    positive unconstrained slope is clamped to zero and only the intercept is
    refitted.
    """
    anchors = list(anchors)
    if len({a.key for a in anchors}) > 1:
        raise InputError("anchors mix scenarios, states or LSPs")
    if len(anchors) < 3:
        raise InsufficientAnchorsError(f"insufficient anchors: {len(anchors)} < 3")
    f = np.array([a.freq for a in anchors])
    n_freq = np.unique(f).size
    if n_freq == 1:
        raise DegenerateFitError("all anchors at one frequency")
    if n_freq < cfg.min_distinct_freqs:
        raise InsufficientAnchorsError(
            f"insufficient anchors: {n_freq} distinct frequencies < {cfg.min_distinct_freqs}")
    u = np.log10(f)
    v = np.log10([a.value for a in anchors])
    coef, w, s, it = _irls(np.column_stack([u, np.ones_like(u)]), v, cfg)
    a, b = float(coef[0]), float(coef[1])
    active = False
    if a > 0:
        c0, w, s, it = _irls(np.ones((len(v), 1)), v, cfg)
        a, b, active = 0.0, float(c0[0]), True
    sc, st, ls = anchors[0].key
    return FreqModel(a, b, sc, st, ls, len(anchors), active, s, tuple(float(x) for x in w), it)


def select_anchors(anchors: Iterable[AnchorPoint], scenario: str, state, lsp: str) -> list[AnchorPoint]:
    key = (parse_scenario(scenario), LinkState.parse(state).value, parse_lsp(lsp))
    return [a for a in anchors if a.key == key]


def fit_all(
    anchors: Sequence[AnchorPoint], cfg: RobustFitConfig = RobustFitConfig()
) -> dict[tuple[str, str, str], FreqModel | Exception]:
    """Fit every (scenario, state, lsp) triple; failures are returned in place of a model."""
    out: dict[tuple[str, str, str], FreqModel | Exception] = {}
    for sc in SCENARIOS:
        for st in LinkState:
            for ls in LSPS:
                subset = select_anchors(anchors, sc, st, ls)
                try:
                    out[(sc, st.value, ls)] = fit_freq_model(subset, cfg)
                except (InputError, EstimationError) as e:
                    out[(sc, st.value, ls)] = e
    return out


class FreqTransform(str, Enum):
    LOG10_F = "log10_f"
    LOG10_1PLUS_F = "log10_1plus_f"
    CONSTANT = "constant"


@dataclass(frozen=True)
class Gpp3Model:
    scenario: str
    state: str
    lsp: str
    slope: float
    intercept: float
    freq_transform: FreqTransform

    def log10_value(self, f) -> np.ndarray | float:
        f = np.asarray(f, dtype=float)
        if self.freq_transform is FreqTransform.CONSTANT:
            return np.full_like(f, self.intercept)
        x = np.log10(1.0 + f) if self.freq_transform is FreqTransform.LOG10_1PLUS_F else np.log10(f)
        return self.slope * x + self.intercept


def eval_3gpp(model: Gpp3Model, f) -> np.ndarray | float:
    """Linear value of a 3GPP mean formula at ``f`` GHz."""
    return _out(10.0 ** model.log10_value(_check_freq(f)))


@dataclass(frozen=True)
class SplitBandModel:
    """Two independent power laws joined at ``boundary`` GHz (a discontinuous baseline)."""

    low: FreqModel
    high: FreqModel
    boundary: float = FR1_FR3_BOUNDARY_GHZ

    def log10_value(self, f) -> np.ndarray | float:
        f = np.asarray(f, dtype=float)
        return np.where(f < self.boundary, self.low.log10_value(f), self.high.log10_value(f))


def _ols(anchors: Sequence[AnchorPoint]) -> FreqModel:
    f = np.array([a.freq for a in anchors])
    if np.unique(f).size < 2:
        raise InsufficientAnchorsError("each band needs anchors at two or more frequencies")
    u = np.log10(f)
    v = np.log10([a.value for a in anchors])
    a, b = np.polyfit(u, v, 1)
    sc, st, ls = anchors[0].key
    return FreqModel(float(a), float(b), sc, st, ls, len(anchors))


def split_band_baseline(anchors: Sequence[AnchorPoint], boundary: float = FR1_FR3_BOUNDARY_GHZ) -> SplitBandModel:
    """Unconstrained OLS fitted separately below and above ``boundary``."""
    low = [a for a in anchors if a.freq < boundary]
    high = [a for a in anchors if a.freq >= boundary]
    return SplitBandModel(_ols(low), _ols(high), boundary)


@dataclass(frozen=True)
class ContinuityReport:
    boundary: float
    eps: float
    gap: float  # |X(boundary - eps) - X(boundary + eps)|, linear units
    log_diff: float  # the same difference in decades; includes the slope term ~ 2 eps |a| / (f ln 10)
    log_gap: float  # jump between the one-sided limits at the boundary, decades


def continuity_check(model, boundary: float = FR1_FR3_BOUNDARY_GHZ, eps: float = 1e-6) -> ContinuityReport:
    """Jump of ``model`` across ``boundary`` GHz.

    The plain difference across [boundary - eps, boundary + eps] also picks up
    the model's slope, so ``log_gap`` extrapolates each side linearly from
    offsets eps and 2 eps to its one-sided limit. That leaves O(eps^2) for a
    continuous model and the full step for a piecewise one.
    """
    if not 0 < 2 * eps < boundary:
        raise InputError("eps must lie in (0, boundary / 2)")

    def g(f):
        return float(model.log10_value(f))

    lo, hi = g(boundary - eps), g(boundary + eps)
    left = 2.0 * lo - g(boundary - 2 * eps)
    right = 2.0 * hi - g(boundary + 2 * eps)
    return ContinuityReport(boundary, eps, abs(10.0 ** lo - 10.0 ** hi), abs(lo - hi), abs(left - right))


def build_anchor_set(
    routes: Mapping[str, tuple[str, Sequence[LspRecord]]] | None,
    literature: Iterable[AnchorPoint] = (),
    *,
    log_mean: bool = False,
    freq: float = ROUTE_FREQ_GHZ,
) -> list[AnchorPoint]:
    """Route-wise anchors at ``freq`` followed by the literature anchors.

    ``routes`` maps an area name to (scenario, LSP records). Each route gives
    one anchor per (state, lsp): the arithmetic mean of the linear values, or
    the antilog of the mean log10 value when ``log_mean`` is set.
    """
    out: list[AnchorPoint] = []
    for area, (scenario, records) in (routes or {}).items():
        for st in LinkState:
            recs = [r for r in records if r.state is st]
            if not recs:
                continue
            for ls in LSPS:
                x = np.array([r.value(ls) for r in recs], dtype=float)
                x = x[np.isfinite(x) & (x > 0)]
                if x.size == 0:
                    continue
                val = 10.0 ** np.mean(np.log10(x)) if log_mean else np.mean(x)
                out.append(AnchorPoint(freq, scenario, st, ls, float(val), area))
    out.extend(literature)
    return out


# ---- CSV ingestion ------------------------------------------------------------

_MISSING = {"---", "", "-", "nan"}


def _open_text(path: str | Path | None, name: str) -> str:
    if path is None:
        return resources.files("urbanchan").joinpath("data", name).read_text(encoding="utf-8")
    try:
        return Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise InputError(f"file not found: {path}") from None


def _rows(text: str, required: Sequence[str]) -> list[tuple[int, dict]]:
    reader = csv.DictReader(line for line in io.StringIO(text) if not line.startswith("#"))
    missing = [c for c in required if c not in (reader.fieldnames or [])]
    if missing:
        raise InputError(f"CSV missing columns {missing}")
    return [(i + 2, row) for i, row in enumerate(reader)]


def load_anchors(path: str | Path | None = None) -> list[AnchorPoint]:
    """Read anchors (freq_ghz, scenario, state, lsp, value, source); DS values are in ns.

    Rows whose value is '---' are skipped. ``path=None`` loads the bundled table.
    """
    out = []
    for line, row in _rows(_open_text(path, "table5_anchors.csv"),
                           ("freq_ghz", "scenario", "state", "lsp", "value", "source")):
        raw = row["value"].strip()
        if raw.lower() in _MISSING:
            continue
        try:
            val = float(raw)
            freq = float(row["freq_ghz"])
        except ValueError as e:
            raise InputError(f"anchor CSV line {line}: {e}") from None
        lsp = parse_lsp(row["lsp"])
        if lsp == "DS":
            val *= 1e-9
        try:
            out.append(AnchorPoint(freq, row["scenario"], row["state"], lsp, val, row["source"].strip()))
        except InputError as e:
            raise InputError(f"anchor CSV line {line}: {e}") from None
    return out


def write_anchors(anchors: Iterable[AnchorPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["freq_ghz", "scenario", "state", "lsp", "value", "source"])
    for a in anchors:
        val = a.value * 1e9 if a.lsp == "DS" else a.value
        w.writerow([repr(a.freq), a.scenario, a.state.value, a.lsp, repr(float(val)), a.source])
    return buf.getvalue()


def load_3gpp_table(path: str | Path | None = None) -> dict[tuple[str, str, str], Gpp3Model]:
    out = {}
    for line, row in _rows(_open_text(path, "table4_3gpp.csv"),
                           ("scenario", "state", "lsp", "slope", "intercept", "freq_transform")):
        try:
            m = Gpp3Model(parse_scenario(row["scenario"]), LinkState.parse(row["state"]).value, parse_lsp(row["lsp"]),
                          float(row["slope"]), float(row["intercept"]), FreqTransform(row["freq_transform"]))
        except ValueError as e:
            raise InputError(f"3GPP CSV line {line}: {e}") from None
        out[(m.scenario, m.state, m.lsp)] = m
    return out


def load_published_models(path: str | Path | None = None) -> dict[tuple[str, str, str], FreqModel | None]:
    """Published fitted coefficients; '---' cells map to None."""
    out: dict[tuple[str, str, str], FreqModel | None] = {}
    for line, row in _rows(_open_text(path, "table4_thiswork.csv"), ("scenario", "state", "lsp", "a", "b")):
        key = (parse_scenario(row["scenario"]), LinkState.parse(row["state"]).value, parse_lsp(row["lsp"]))
        if row["a"].strip() in _MISSING:
            out[key] = None
            continue
        try:
            out[key] = FreqModel(float(row["a"]), float(row["b"]), *key)
        except ValueError as e:
            raise InputError(f"model CSV line {line}: {e}") from None
    return out


def load_plfit_table(path: str | Path | None = None) -> list[dict]:
    """Published CI/FI/ABG path-loss parameters per route and state."""
    cols = ("route", "scenario", "state", "ci_n", "ci_sigma", "fi_alpha", "fi_beta", "fi_sigma",
            "itu_alpha", "itu_beta", "itu_gamma", "itu_sigma")
    out = []
    for _, row in _rows(_open_text(path, "table2_plfits.csv"), cols):
        rec = {k: float(row[k]) for k in cols[3:]}
        rec.update(route=row["route"], scenario=parse_scenario(row["scenario"]), state=LinkState.parse(row["state"]).value)
        out.append(rec)
    return out


def model_registry_json(models: Mapping[tuple[str, str, str], FreqModel | Exception]) -> list[dict]:
    """JSON-ready list of fitted models; failed fits carry an ``error`` field."""
    out = []
    for (sc, st, ls), m in sorted(models.items()):
        if isinstance(m, FreqModel):
            out.append(m.to_dict())
        else:
            out.append({"scenario": sc, "state": st, "lsp": ls, "error": str(m)})
    return out
