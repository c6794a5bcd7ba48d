"""JSON and CSV file formats.

Units on disk: delays in ns, angles in degrees, sounding frequencies in Hz,
anchor/model frequencies in GHz, complex numbers as [re, im] pairs. Values
that pass through a unit conversion are written with 12 significant digits
so that load/save round trips are byte-stable.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .arrays import ArrayGeometry, CtfSnapshot, ElementPattern, LinkState, Mpc, SoundingConfig
from .errors import InputError
from .lsp import LspRecord
from .route import BinSummary
from .spatial import DecorrEstimate

ROUTE_FORMAT = "urbanchan.route/1"
MPC_FORMAT = "urbanchan.mpcs/1"


def _conv(x: float) -> float:
    """Round a unit-converted value so that repeated conversion is stable."""
    return float(f"{x:.12g}")


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def _req(d: dict, key: str, where: str):
    if not isinstance(d, dict) or key not in d:
        raise InputError(f"{where}: missing field {key!r}")
    return d[key]


def _num(x, where: str) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise InputError(f"{where}: expected a number, got {x!r}")
    v = float(x)
    if not math.isfinite(v):
        raise InputError(f"{where}: non-finite value")
    return v


# ---- arrays and sounding ------------------------------------------------------

def sounding_to_dict(cfg: SoundingConfig) -> dict:
    return {
        "center_frequency_hz": cfg.center_frequency,
        "num_tones": cfg.num_tones,
        "tone_spacing_hz": cfg.tone_spacing,
        "bandwidth_hz": cfg.bandwidth,
    }


def sounding_from_dict(d: dict) -> SoundingConfig:
    w = "sounding"
    return SoundingConfig(
        _num(_req(d, "center_frequency_hz", w), w + ".center_frequency_hz"),
        int(_num(_req(d, "num_tones", w), w + ".num_tones")),
        _num(_req(d, "tone_spacing_hz", w), w + ".tone_spacing_hz"),
        _num(_req(d, "bandwidth_hz", w), w + ".bandwidth_hz"),
    )


@dataclass(frozen=True)
class ArraySpec:
    """Declarative array description; ``build`` produces the geometry."""

    kind: str = "ULA"
    num_elements: int = 8
    hpbw_deg: float = 360.0
    gain_dbi: float = 0.0
    spacing_m: float | None = None  # ULA element spacing, default lambda/2
    radius_m: float | None = None  # UCA radius, default gives lambda/2 neighbour spacing
    orientation_deg: float = 0.0

    def __post_init__(self):
        if str(self.kind).upper() not in ("ULA", "UCA"):
            raise InputError(f"array kind must be ULA or UCA, got {self.kind!r}")
        if isinstance(self.num_elements, bool) or not isinstance(self.num_elements, int) or self.num_elements < 1:
            raise InputError(f"num_elements must be a positive integer, got {self.num_elements!r}")

    def build(self, frequency: float) -> ArrayGeometry:
        pat = ElementPattern(self.hpbw_deg, self.gain_dbi)
        orient = math.radians(self.orientation_deg)
        kind = self.kind.upper()
        if kind == "ULA":
            return ArrayGeometry.ula(self.num_elements, self.spacing_m, frequency=frequency,
                                     pattern=pat, orientation=orient)
        if kind == "UCA":
            return ArrayGeometry.uca(self.num_elements, self.radius_m, frequency=frequency,
                                     pattern=pat, orientation=orient)
        raise AssertionError(self.kind)

    def to_dict(self) -> dict:
        d = {"kind": self.kind.upper(), "num_elements": self.num_elements, "hpbw_deg": self.hpbw_deg,
             "gain_dbi": self.gain_dbi, "orientation_deg": self.orientation_deg}
        if self.spacing_m is not None:
            d["spacing_m"] = self.spacing_m
        if self.radius_m is not None:
            d["radius_m"] = self.radius_m
        return d

    @classmethod
    def from_dict(cls, d: dict, where: str = "array") -> "ArraySpec":
        known = {"kind", "num_elements", "hpbw_deg", "gain_dbi", "spacing_m", "radius_m", "orientation_deg"}
        extra = set(d) - known
        if extra:
            raise InputError(f"{where}: unknown fields {sorted(extra)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise InputError(f"{where}: {e}") from None


DEFAULT_TX = ArraySpec("ULA", 8, 90.0, 4.0)
DEFAULT_RX = ArraySpec("UCA", 8, 74.0, 6.5)


# ---- routes -------------------------------------------------------------------

@dataclass
class RouteFile:
    """Raw measurement route: CTF snapshots plus site metadata."""

    area: str
    scenario: str
    sounding: SoundingConfig
    snapshots: list[CtfSnapshot]
    tx: ArraySpec = DEFAULT_TX
    rx: ArraySpec = DEFAULT_RX
    bs_position: tuple[float, float] = (0.0, 0.0)
    bs_orientation: float = 0.0  # radians
    bs_height: float = 30.0
    ms_height: float = 2.7
    sampling_interval: float = 0.5
    synthetic: bool = False
    metadata: dict = field(default_factory=dict)


def _complex_tensor(raw, shape: tuple[int, int, int], snap_id: int) -> np.ndarray:
    try:
        arr = np.array(raw, dtype=float)
    except (TypeError, ValueError):
        raise InputError(f"snapshot {snap_id}: field 'h' is not a numeric [rx][tx][tone][re, im] array") from None
    if arr.shape != shape + (2,):
        raise InputError(f"snapshot {snap_id}: field 'h' has shape {arr.shape[:-1]}, expected {shape}")
    bad = ~np.isfinite(arr).all(axis=-1)
    if bad.any():
        i, j, k = (int(v) for v in np.argwhere(bad)[0])
        raise InputError(f"snapshot {snap_id}: non-finite CTF entry at rx {i}, tx {j}, tone {k}")
    return arr[..., 0] + 1j * arr[..., 1]


def route_from_dict(d: dict) -> RouteFile:
    fmt = _req(d, "format", "route")
    if fmt != ROUTE_FORMAT:
        raise InputError(f"route: unsupported format {fmt!r}")
    sounding = sounding_from_dict(_req(d, "sounding", "route"))
    arrays = d.get("arrays", {})
    tx = ArraySpec.from_dict(arrays["tx"], "arrays.tx") if "tx" in arrays else DEFAULT_TX
    rx = ArraySpec.from_dict(arrays["rx"], "arrays.rx") if "rx" in arrays else DEFAULT_RX
    bs = d.get("bs", {})
    shape = (rx.num_elements, tx.num_elements, sounding.num_tones)
    snaps = []
    for n, s in enumerate(_req(d, "snapshots", "route")):
        sid = int(_num(_req(s, "id", f"snapshots[{n}]"), f"snapshots[{n}].id"))
        h = _complex_tensor(_req(s, "h", f"snapshot {sid}"), shape, sid)
        pos = s.get("position")
        if pos is not None:
            pos = (_num(pos[0], f"snapshot {sid}.position"), _num(pos[1], f"snapshot {sid}.position"))
        d3d = s.get("d3d_m")
        snaps.append(CtfSnapshot(
            h, pos,
            None if d3d is None else _num(d3d, f"snapshot {sid}.d3d_m"),
            LinkState.parse(_req(s, "state", f"snapshot {sid}")),
            bool(s.get("valid", True)),
            sid,
        ))
    ids = [s.snapshot_id for s in snaps]
    if ids != sorted(ids) or len(set(ids)) != len(ids):
        raise InputError("route: snapshot ids must be unique and increasing")
    pos = bs.get("position", [0.0, 0.0])
    return RouteFile(
        area=str(d.get("area", "")),
        scenario=str(_req(d, "scenario", "route")),
        sounding=sounding,
        snapshots=snaps,
        tx=tx,
        rx=rx,
        bs_position=(_num(pos[0], "bs.position"), _num(pos[1], "bs.position")),
        bs_orientation=math.radians(_num(bs.get("orientation_deg", 0.0), "bs.orientation_deg")),
        bs_height=_num(bs.get("height_m", 30.0), "bs.height_m"),
        ms_height=_num(d.get("ms_height_m", 2.7), "ms_height_m"),
        sampling_interval=_num(d.get("sampling_interval_s", 0.5), "sampling_interval_s"),
        synthetic=bool(d.get("synthetic", False)),
        metadata=dict(d.get("metadata", {})),
    )


def route_to_dict(r: RouteFile) -> dict:
    snaps = []
    for s in r.snapshots:
        item = {
            "id": s.snapshot_id,
            "state": s.state.value,
            "valid": s.valid,
            "h": np.stack([s.h.real, s.h.imag], axis=-1).tolist(),
        }
        if s.position is not None:
            item["position"] = [float(s.position[0]), float(s.position[1])]
        if s.d3d is not None:
            item["d3d_m"] = float(s.d3d)
        snaps.append(item)
    return {
        "format": ROUTE_FORMAT,
        "area": r.area,
        "scenario": r.scenario,
        "synthetic": r.synthetic,
        "sounding": sounding_to_dict(r.sounding),
        "arrays": {"tx": r.tx.to_dict(), "rx": r.rx.to_dict()},
        "bs": {
            "position": [float(r.bs_position[0]), float(r.bs_position[1])],
            "orientation_deg": _conv(math.degrees(r.bs_orientation)),
            "height_m": r.bs_height,
        },
        "ms_height_m": r.ms_height,
        "sampling_interval_s": r.sampling_interval,
        "metadata": r.metadata,
        "snapshots": snaps,
    }


def _read_json(path: str | Path) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InputError(f"file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: invalid JSON ({e})") from None


def load_route(path: str | Path) -> RouteFile:
    return route_from_dict(_read_json(path))


def save_route(r: RouteFile, path: str | Path) -> None:
    Path(path).write_text(canonical_json(route_to_dict(r)), encoding="utf-8")


# ---- MPC lists ----------------------------------------------------------------

def mpcs_to_dict(mpcs: Sequence[Mpc]) -> list[dict]:
    return [{
        "gamma": [float(m.gamma.real), float(m.gamma.imag)],
        "tau_ns": _conv(m.tau * 1e9),
        "phi_t_deg": _conv(math.degrees(m.phi_t)),
        "phi_r_deg": _conv(math.degrees(m.phi_r)),
    } for m in mpcs]


def mpcs_from_dict(items: Iterable[dict], where: str = "mpcs") -> list[Mpc]:
    out = []
    for i, d in enumerate(items):
        w = f"{where}[{i}]"
        g = _req(d, "gamma", w)
        if not isinstance(g, list) or len(g) != 2:
            raise InputError(f"{w}.gamma: expected [re, im]")
        out.append(Mpc(
            complex(_num(g[0], w + ".gamma"), _num(g[1], w + ".gamma")),
            _num(_req(d, "tau_ns", w), w + ".tau_ns") * 1e-9,
            math.radians(_num(_req(d, "phi_t_deg", w), w + ".phi_t_deg")),
            math.radians(_num(_req(d, "phi_r_deg", w), w + ".phi_r_deg")),
        ))
    return out


def load_mpc_file(path: str | Path) -> dict:
    """MPC file: {"format", "snapshots": [{"id", "state", "position", "d3d_m", "mpcs": [...]}]}.

    A bare {"mpcs": [...]} object is accepted as a single snapshot.
    """
    d = _read_json(path)
    if isinstance(d, dict) and "mpcs" in d and "snapshots" not in d:
        d = {"format": MPC_FORMAT, "snapshots": [dict(d, id=d.get("id", 0))]}
    if _req(d, "format", "mpc file") != MPC_FORMAT:
        raise InputError(f"mpc file: unsupported format {d['format']!r}")
    snaps = []
    for n, s in enumerate(_req(d, "snapshots", "mpc file")):
        sid = int(s.get("id", n))
        pos = s.get("position")
        snaps.append({
            "id": sid,
            "state": LinkState.parse(s.get("state", "LoS")),
            "position": None if pos is None else (_num(pos[0], "position"), _num(pos[1], "position")),
            "d3d": None if s.get("d3d_m") is None else _num(s["d3d_m"], f"snapshot {sid}.d3d_m"),
            "residual_power_ratio": s.get("residual_power_ratio"),
            "mpcs": mpcs_from_dict(_req(s, "mpcs", f"snapshot {sid}"), f"snapshot {sid}.mpcs"),
        })
    out = {k: v for k, v in d.items() if k != "snapshots"}
    out["snapshots"] = snaps
    return out


def mpc_file_dict(entries: Sequence[dict], **header) -> dict:
    snaps = []
    for e in entries:
        item = {"id": e["id"], "state": LinkState.parse(e["state"]).value, "mpcs": mpcs_to_dict(e["mpcs"])}
        if e.get("position") is not None:
            item["position"] = [float(e["position"][0]), float(e["position"][1])]
        if e.get("d3d") is not None:
            item["d3d_m"] = float(e["d3d"])
        if e.get("residual_power_ratio") is not None:
            item["residual_power_ratio"] = float(e["residual_power_ratio"])
        snaps.append(item)
    return dict(header, format=MPC_FORMAT, snapshots=snaps)


# ---- CSV tables ---------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return ""
        return repr(x)
    return str(x)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


LSP_HEADER = ("snapshot_id", "x_m", "y_m", "d3d_m", "state", "pl_db", "ds_ns", "asa_deg", "asd_deg",
              "k_db", "k_valid", "asa_saturated", "asd_saturated")


def lsp_records_csv(records: Iterable[LspRecord]) -> str:
    rows = []
    for r in records:
        x, y = r.position if r.position is not None else (None, None)
        rows.append((r.snapshot_id, x, y, r.d3d, r.state.value, r.pl_db, r.ds * 1e9, r.asa_deg, r.asd_deg,
                     r.k_db, r.k_valid, r.asa_saturated, r.asd_saturated))
    return csv_text(LSP_HEADER, rows)


def load_lsp_csv(path: str | Path) -> list[LspRecord]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise InputError(f"file not found: {path}") from None
    reader = csv.DictReader(line for line in io.StringIO(text) if not line.startswith("#"))
    missing = [c for c in LSP_HEADER if c not in (reader.fieldnames or [])]
    if missing:
        raise InputError(f"{path}: missing columns {missing}")
    out = []
    for line, row in enumerate(reader, start=2):
        try:
            pos = None if row["x_m"] == "" else (float(row["x_m"]), float(row["y_m"]))
            out.append(LspRecord(
                snapshot_id=int(row["snapshot_id"]),
                d3d=float(row["d3d_m"]),
                state=LinkState.parse(row["state"]),
                pl_db=float(row["pl_db"]),
                ds=float(row["ds_ns"]) * 1e-9,
                asa_deg=float(row["asa_deg"]),
                asd_deg=float(row["asd_deg"]),
                k_db=None if row["k_db"] == "" else float(row["k_db"]),
                k_valid=row["k_valid"] == "true",
                asa_saturated=row["asa_saturated"] == "true",
                asd_saturated=row["asd_saturated"] == "true",
                position=pos,
            ))
        except (ValueError, InputError) as e:
            raise InputError(f"{path} line {line}: {e}") from None
    return out


TREND_HEADER = ("lsp", "state", "bin_center_m", "median", "ci_low", "ci_high", "count", "sparse", "seed", "unit")


def trend_csv(bins: Iterable[BinSummary]) -> str:
    rows = []
    for b in bins:
        scale, unit = (1e9, "ns") if b.lsp == "DS" else (1.0, {"PL": "dB", "K": "dB"}.get(b.lsp, "deg"))
        rows.append((b.lsp, b.state, b.center, b.median * scale, b.ci_low * scale, b.ci_high * scale,
                     b.count, b.sparse, b.seed, unit))
    return csv_text(TREND_HEADER, rows)


DECORR_HEADER = ("area", "lsp", "state", "d_corr_m", "ci_low", "ci_high", "n_fail", "block_len", "b", "error")


def decorr_csv(area: str, items: Iterable[DecorrEstimate | tuple[str, str, str]]) -> str:
    """Rows for estimates; a (lsp, state, message) tuple records a skipped trace."""
    rows = []
    for e in items:
        if isinstance(e, DecorrEstimate):
            rows.append((area, e.lsp, e.state, e.d_corr, e.ci_low, e.ci_high, e.n_fail, e.block_len, e.b, ""))
        else:
            lsp, state, msg = e
            rows.append((area, lsp, state, None, None, None, None, None, None, msg))
    return csv_text(DECORR_HEADER, rows)
