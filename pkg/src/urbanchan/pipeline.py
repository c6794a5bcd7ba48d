"""End-to-end pipeline: extraction, LSPs, path loss, trends, spatial consistency, frequency models.

Every artifact is deterministic given (inputs, config, seed) and carries the
config hash and seed. ``manifest.json`` lists the SHA-256 of each file.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .arrays import BeamformerConfig, LinkState, SoundingConfig, beamform, pdp
from .errors import EstimationError, InputError
from .formats import (
    DEFAULT_RX,
    DEFAULT_TX,
    ArraySpec,
    RouteFile,
    canonical_json,
    csv_text,
    decorr_csv,
    load_route,
    lsp_records_csv,
    mpc_file_dict,
    sounding_from_dict,
    sounding_to_dict,
    trend_csv,
)
from .freqmodel import (
    FreqModel,
    RobustFitConfig,
    build_anchor_set,
    eval_3gpp,
    eval_freq_model,
    fit_all,
    load_3gpp_table,
    load_anchors,
    load_published_models,
    model_registry_json,
    write_anchors,
)
from .lsp import LspRecord, lsp_record
from .pathloss import PlSample, fit_ci, fit_fi
from .route import BinningConfig, RouteDataset, deduplicate, distance_trend, filter_valid
from .sage import ExtractionConfig, extract_mpcs
from .spatial import block_bootstrap_ci, empirical_acf, lsp_trace, pl_residual_trace
from .synthetic import demo_route

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

OUTPUT_DIR_ENV = "URBANCHAN_OUTPUT_DIR"


class PipelineError(RuntimeError):
    """A stage failed; ``stage`` and ``item`` locate the failure."""

    def __init__(self, stage: str, item: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed on {item}: {cause}")
        self.stage = stage
        self.item = item
        self.cause = cause


@dataclass(frozen=True)
class InputConfig:
    route: str | None = None  # route JSON; None uses the synthetic demo generator
    area: str = "Demo"
    scenario: str = "UMa"
    dataset_seed: int = 0
    n_snapshots: int = 60
    snr_db: float = 30.0


@dataclass(frozen=True)
class RouteConfig:
    sector_deg: tuple[float, float] | None = None  # None: the BS array's default sector
    dedup_m: float = 1.0


@dataclass(frozen=True)
class TrendConfig:
    b: int = 1000
    lsps: tuple[str, ...] = ("DS", "ASA", "ASD", "K")


@dataclass(frozen=True)
class SpatialConfig:
    step_m: float = 1.0
    b: int = 1000
    block_len: int | None = None
    lsps: tuple[str, ...] = ("SF", "DS", "ASA", "ASD")


@dataclass(frozen=True)
class FreqConfig:
    anchors: str | None = None  # anchor CSV; None uses the bundled literature table
    include_route_anchors: bool = True
    grid_min_ghz: float = 4.0
    grid_max_ghz: float = 28.0
    grid_points: int = 49


@dataclass(frozen=True)
class PipelineConfig:
    sounding: SoundingConfig = SoundingConfig()
    tx: ArraySpec = DEFAULT_TX
    rx: ArraySpec = DEFAULT_RX
    beamformer: BeamformerConfig = BeamformerConfig()
    extraction: ExtractionConfig = ExtractionConfig()
    binning: BinningConfig = BinningConfig()
    robust_fit: RobustFitConfig = RobustFitConfig()
    input: InputConfig = InputConfig()
    route: RouteConfig = RouteConfig()
    trend: TrendConfig = TrendConfig()
    spatial: SpatialConfig = SpatialConfig()
    freq: FreqConfig = FreqConfig()
    seed: int = 0
    output_dir: str = "urbanchan-out"

    def to_dict(self) -> dict:
        """Resolved config as plain data (used for hashing)."""
        def conv(x):
            if dataclasses.is_dataclass(x):
                return {f.name: conv(getattr(x, f.name)) for f in dataclasses.fields(x)}
            if isinstance(x, tuple):
                return [conv(v) for v in x]
            return x

        d = conv(self)
        d["sounding"] = sounding_to_dict(self.sounding)
        d.pop("output_dir")
        return d

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()


_SECTIONS = {
    "tx": ArraySpec,
    "rx": ArraySpec,
    "beamformer": BeamformerConfig,
    "extraction": ExtractionConfig,
    "binning": BinningConfig,
    "robust_fit": RobustFitConfig,
    "input": InputConfig,
    "route": RouteConfig,
    "trend": TrendConfig,
    "spatial": SpatialConfig,
    "freq": FreqConfig,
}


def _build(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise InputError(f"config [{where}] must be a table")
    names = {f.name for f in dataclasses.fields(cls)}
    extra = sorted(set(d) - names)
    if extra:
        raise InputError(f"config [{where}]: unknown keys {extra}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise InputError(f"config [{where}]: {e}") from None


def config_from_dict(d: dict, base_dir: Path | None = None) -> PipelineConfig:
    d = dict(d)
    kw: dict[str, Any] = {}
    if "arrays" in d:
        arrays = d.pop("arrays")
        for side in ("tx", "rx"):
            if side in arrays:
                kw[side] = _build(ArraySpec, arrays[side], f"arrays.{side}")
    if "sounding" in d:
        kw["sounding"] = sounding_from_dict({**sounding_to_dict(SoundingConfig()), **d.pop("sounding")})
    for name, cls in _SECTIONS.items():
        if name in d:
            kw[name] = _build(cls, d.pop(name), name)
    for key in ("seed", "output_dir"):
        if key in d:
            kw[key] = d.pop(key)
    if d:
        raise InputError(f"config: unknown keys {sorted(d)}")
    if "seed" in kw and (isinstance(kw["seed"], bool) or not isinstance(kw["seed"], int)):
        raise InputError("config: seed must be an integer")
    cfg = PipelineConfig(**kw)
    # relative paths in a config file are relative to that file
    if base_dir is not None:
        if cfg.input.route and not Path(cfg.input.route).is_absolute():
            cfg = dataclasses.replace(cfg, input=dataclasses.replace(cfg.input, route=str(base_dir / cfg.input.route)))
        if cfg.freq.anchors and not Path(cfg.freq.anchors).is_absolute():
            cfg = dataclasses.replace(cfg, freq=dataclasses.replace(cfg.freq, anchors=str(base_dir / cfg.freq.anchors)))
    return cfg


def load_config(path: str | Path | None = None) -> PipelineConfig:
    """Read a TOML config; ``URBANCHAN_OUTPUT_DIR`` overrides ``output_dir``."""
    if path is None:
        cfg = PipelineConfig()
    else:
        p = Path(path)
        try:
            data = tomllib.loads(p.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise InputError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as e:
            raise InputError(f"{path}: invalid TOML ({e})") from None
        cfg = config_from_dict(data, p.resolve().parent)
    env = os.environ.get(OUTPUT_DIR_ENV)
    if env:
        cfg = dataclasses.replace(cfg, output_dir=env)
    return cfg


def demo_config_path() -> Path:
    return Path(__file__).with_name("data") / "demo.toml"


# ---- stages -------------------------------------------------------------------

def _stage(name: str, item: str, fn: Callable, *args, **kw):
    try:
        return fn(*args, **kw)
    except PipelineError:
        raise
    except (InputError, EstimationError, ValueError, ArithmeticError, np.linalg.LinAlgError) as e:
        raise PipelineError(name, item, e) from e


def load_inputs(cfg: PipelineConfig) -> RouteFile:
    if cfg.input.route:
        return load_route(cfg.input.route)
    tx = cfg.tx.build(cfg.sounding.center_frequency)
    rx = cfg.rx.build(cfg.sounding.center_frequency)
    demo = demo_route(cfg.input.dataset_seed, n_snapshots=cfg.input.n_snapshots, cfg=cfg.sounding,
                      snr_db=cfg.input.snr_db, tx=tx, rx=rx)
    return RouteFile(
        area=cfg.input.area,
        scenario=cfg.input.scenario,
        sounding=cfg.sounding,
        snapshots=demo["snapshots"],
        tx=cfg.tx,
        rx=cfg.rx,
        bs_position=demo["bs_position"],
        bs_orientation=demo["bs_orientation"],
        bs_height=demo["bs_height"],
        ms_height=demo["ms_height"],
        synthetic=True,
        metadata={"generator": "demo_route", "dataset_seed": cfg.input.dataset_seed},
    )


def _d3d(route: RouteFile, snap) -> float:
    if snap.d3d is not None:
        return float(snap.d3d)
    if snap.position is None:
        raise InputError(f"snapshot {snap.snapshot_id} has neither d3d_m nor position")
    dx = snap.position[0] - route.bs_position[0]
    dy = snap.position[1] - route.bs_position[1]
    return math.sqrt(dx * dx + dy * dy + (route.bs_height - route.ms_height) ** 2)


def extract_route(route: RouteFile, cfg: PipelineConfig) -> list[dict]:
    """SAGE extraction for every valid snapshot; the route's own sounding grid is used."""
    tx = route.tx.build(route.sounding.center_frequency)
    rx = route.rx.build(route.sounding.center_frequency)
    out = []
    for snap in route.snapshots:
        if not snap.valid:
            continue
        res = _stage("extract", f"snapshot {snap.snapshot_id}", extract_mpcs, snap, tx, rx, route.sounding,
                     cfg.extraction)
        out.append({
            "id": snap.snapshot_id,
            "state": snap.state,
            "position": snap.position,
            "d3d": _d3d(route, snap),
            "residual_power_ratio": res.residual_power_ratio,
            "mpcs": res.mpcs,
        })
    return out


def lsp_records(entries: list[dict], sounding: SoundingConfig) -> list[LspRecord]:
    out = []
    for e in entries:
        if not e["mpcs"]:
            continue
        out.append(_stage("lsp", f"snapshot {e['id']}", lsp_record, e["mpcs"], sounding,
                          snapshot_id=e["id"], d3d=e["d3d"], state=e["state"], position=e["position"]))
    return out


def _pl_fits(records: list[LspRecord], fc: float) -> dict:
    fits = {}
    for st in LinkState:
        samples = [PlSample(r.d3d, r.pl_db, st) for r in records if r.state is st]
        if len({s.d3d for s in samples}) < 2:
            continue
        fits[st] = (_stage("plfit", f"{st.value} CI", fit_ci, samples, fc),
                    _stage("plfit", f"{st.value} FI", fit_fi, samples, fc))
    return fits


def _lsp_stats(records: list[LspRecord]) -> list[tuple]:
    rows = []
    for st in LinkState:
        recs = [r for r in records if r.state is st]
        cols = {
            "log10_DS": [r.log10_ds for r in recs],
            "log10_ASD": [math.log10(r.asd_deg) if r.asd_deg > 0 else -math.inf for r in recs],
            "log10_ASA": [math.log10(r.asa_deg) if r.asa_deg > 0 else -math.inf for r in recs],
            "K_dB": [r.k_db for r in recs if r.k_db is not None],
        }
        for name, vals in cols.items():
            x = np.array(vals, dtype=float)
            x = x[np.isfinite(x)]
            if x.size == 0:
                continue
            sd = float(np.std(x, ddof=1)) if x.size > 1 else math.nan
            rows.append((st.value, name, float(np.mean(x)), sd, int(x.size)))
    return rows


@dataclass
class RunReport:
    output_dir: Path
    tables: dict[str, Path] = field(default_factory=dict)
    models: dict[str, Path] = field(default_factory=dict)
    digests: dict[str, str] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    @property
    def files(self) -> dict[str, Path]:
        return {**self.tables, **self.models}


class _Writer:
    """Single writer for all artifacts; stamps provenance and records digests."""

    def __init__(self, out: Path, provenance: dict, report: RunReport):
        self.out = out
        self.prov = provenance
        self.report = report
        out.mkdir(parents=True, exist_ok=True)

    def _put(self, name: str, text: str, kind: str):
        path = self.out / name
        data = text.encode("utf-8")
        path.write_bytes(data)
        self.report.digests[name] = hashlib.sha256(data).hexdigest()
        (self.report.tables if kind == "table" else self.report.models)[name] = path

    def csv(self, name: str, text: str):
        stamp = f"# urbanchan {self.prov['version']} seed={self.prov['seed']} config_sha256={self.prov['config_hash']}\n"
        self._put(name, stamp + text, "table")

    def json(self, name: str, obj: dict):
        self._put(name, canonical_json({"provenance": self.prov, **obj}), "model")


def _series_csv(rows: list[tuple]) -> str:
    return csv_text(("series", "x", "y"), rows)


def run_pipeline(cfg: PipelineConfig, route: RouteFile | None = None, output_dir: str | Path | None = None) -> RunReport:
    """Run every stage and write the artifact set to ``output_dir``."""
    route = route if route is not None else _stage("load", cfg.input.route or "synthetic demo", load_inputs, cfg)
    out = Path(output_dir or cfg.output_dir)
    prov = {"tool": "urbanchan", "version": __version__, "seed": cfg.seed, "config_hash": cfg.config_hash,
            "input": {"area": route.area, "scenario": route.scenario, "synthetic": route.synthetic}}
    report = RunReport(out, provenance=prov)
    w = _Writer(out, prov, report)
    fc = route.sounding.center_frequency

    # multipath extraction and per-snapshot LSPs
    entries = extract_route(route, cfg)
    w.json("mpcs.json", mpc_file_dict(entries, area=route.area, scenario=route.scenario))
    records = lsp_records(entries, route.sounding)
    w.csv("lsp_records.csv", lsp_records_csv(records))

    first = next((s for s in route.snapshots if s.valid), None)
    if first is not None:
        tx = route.tx.build(fc)
        rx = route.rx.build(fc)
        spec = _stage("beamform", f"snapshot {first.snapshot_id}", beamform, first, tx, rx, cfg.beamformer,
                      route.sounding)
        prof = pdp(spec, cfg.beamformer)
        w.csv("plot_pdp.csv", _series_csv([("pdp_db", t * 1e9, 10 * math.log10(v) if v > 0 else None)
                                           for t, v in zip(prof.delays, prof.values)]))

    # route preprocessing
    sector = cfg.route.sector_deg or route.tx.build(fc).default_scan()
    ds = RouteDataset(route.area, route.scenario, records, route.sampling_interval, route.bs_position,
                      route.bs_orientation)
    ds = _stage("route", "sector filter", filter_valid, ds, sector)
    ds = _stage("route", "deduplicate", deduplicate, ds, cfg.route.dedup_m)

    # path loss
    fits = _pl_fits(ds.snapshots, fc)
    rows, plot = [], []
    for st, (ci, fi) in fits.items():
        rows.append((route.area, route.scenario, st.value, ci.n_or_alpha, ci.sigma, fi.n_or_alpha, fi.beta,
                     fi.sigma, ci.n_samples))
        d = np.array(sorted(r.d3d for r in ds.snapshots if r.state is st))
        plot += [(f"measured_{st.value}", r.d3d, r.pl_db) for r in ds.snapshots if r.state is st]
        plot += [(f"CI_{st.value}", x, y) for x, y in zip(d, ci.predict(d))]
        plot += [(f"FI_{st.value}", x, y) for x, y in zip(d, fi.predict(d))]
    w.csv("table_pl_fits.csv", csv_text(("area", "scenario", "state", "ci_n", "ci_sigma", "fi_alpha", "fi_beta",
                                         "fi_sigma", "n_samples"), rows))
    w.csv("plot_pl.csv", _series_csv(plot))
    w.csv("table_lsp_stats.csv", csv_text(("state", "parameter", "mu", "sigma", "count"), _lsp_stats(ds.snapshots)))

    # distance trends
    bins = []
    for lsp in cfg.trend.lsps:
        for st in LinkState:
            sub = [r for r in ds.snapshots if r.state is st and math.isfinite(r.value(lsp))]
            if not sub:
                continue
            bins += _stage("trend", f"{lsp} {st.value}", distance_trend, ds.with_snapshots(sub), lsp, st,
                           cfg.binning, cfg.seed, cfg.trend.b)
    w.csv("trends.csv", trend_csv(bins))

    # spatial consistency; traces follow route order
    est, acf_rows = [], []
    ordered = sorted(ds.snapshots, key=lambda r: r.snapshot_id)
    for lsp in cfg.spatial.lsps:
        for st in LinkState:
            recs = [r for r in ordered if r.state is st]
            try:
                if lsp.upper() == "SF":
                    if st not in fits:
                        raise InputError("no path-loss fit for this state")
                    trace = pl_residual_trace(recs, fits[st][0], cfg.spatial.step_m)
                else:
                    trace = lsp_trace(recs, lsp, cfg.spatial.step_m)
                e = block_bootstrap_ci(trace, cfg.spatial.block_len, cfg.spatial.b, cfg.seed)
            except (InputError, EstimationError) as err:
                est.append((lsp.upper(), st.value, str(err)))
                continue
            est.append(e)
            r_hat = empirical_acf(trace, len(trace) // 4)
            lags = np.arange(r_hat.size) * trace.step
            acf_rows += [(f"acf_{lsp.upper()}_{st.value}", x, y) for x, y in zip(lags, r_hat)]
            acf_rows += [(f"fit_{lsp.upper()}_{st.value}", x, math.exp(-x / e.d_corr)) for x in lags]
    w.csv("decorrelation.csv", decorr_csv(route.area, est))
    w.csv("plot_acf.csv", _series_csv(acf_rows))

    # frequency-continuous models
    literature = _stage("freqfit", cfg.freq.anchors or "bundled anchors", load_anchors, cfg.freq.anchors)
    routes = {route.area: (route.scenario, ds.snapshots)} if cfg.freq.include_route_anchors else None
    anchors = _stage("freqfit", "anchor set", build_anchor_set, routes, literature, freq=fc / 1e9)
    w.csv("anchors.csv", write_anchors(anchors))
    models = fit_all(anchors, cfg.robust_fit)
    w.json("models.json", {"models": model_registry_json(models)})
    gpp = load_3gpp_table()
    published = load_published_models()
    rows, plot = [], []
    grid = np.geomspace(cfg.freq.grid_min_ghz, cfg.freq.grid_max_ghz, cfg.freq.grid_points)
    for key, m in models.items():
        g = gpp[key]
        p = published.get(key)
        fitted = isinstance(m, FreqModel)
        rows.append((*key, g.slope, g.intercept, g.freq_transform.value,
                     m.a if fitted else None, m.b if fitted else None,
                     m.constraint_active if fitted else None, m.n_anchors if fitted else None,
                     p.a if p else None, p.b if p else None, "" if fitted else str(m)))
        name = "_".join(key)
        scale = 1e9 if key[2] == "DS" else 1.0
        plot += [(f"3gpp_{name}", f, eval_3gpp(g, f) * scale) for f in grid]
        if fitted:
            plot += [(f"model_{name}", f, eval_freq_model(m, f) * scale) for f in grid]
        plot += [(f"anchor_{name}", a.freq, a.value * scale) for a in anchors if a.key == key]
    w.csv("table_freq_models.csv", csv_text(
        ("scenario", "state", "lsp", "gpp_slope", "gpp_intercept", "gpp_transform", "a", "b",
         "constraint_active", "n_anchors", "published_a", "published_b", "error"), rows))
    w.csv("plot_freq.csv", _series_csv(plot))

    manifest = {"provenance": prov, "config": cfg.to_dict(),
                "artifacts": {k: report.digests[k] for k in sorted(report.digests)}}
    (out / "manifest.json").write_text(canonical_json(manifest), encoding="utf-8")
    return report
