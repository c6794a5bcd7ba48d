import json
import math
import os

import numpy as np
import pytest

from urbanchan.arrays import LinkState, Mpc
from urbanchan.cli import main
from urbanchan.errors import InputError
from urbanchan.formats import (
    ArraySpec,
    canonical_json,
    load_lsp_csv,
    load_mpc_file,
    load_route,
    lsp_records_csv,
    mpc_file_dict,
    route_from_dict,
    save_route,
)
from urbanchan.lsp import LspRecord
from urbanchan.pipeline import OUTPUT_DIR_ENV, PipelineError, config_from_dict, load_config


def tiny_route_dict(h=None):
    h = np.arange(16, dtype=float).reshape(2, 2, 4) + 1j if h is None else h
    return {
        "format": "urbanchan.route/1",
        "area": "T",
        "scenario": "UMi",
        "sounding": {"center_frequency_hz": 4.85e9, "num_tones": 4, "tone_spacing_hz": 195e3,
                     "bandwidth_hz": 3 * 195e3},
        "arrays": {"tx": {"kind": "ULA", "num_elements": 2}, "rx": {"kind": "ULA", "num_elements": 2}},
        "snapshots": [{"id": 0, "state": "LoS", "position": [1.0, 2.0], "d3d_m": 35.0,
                       "h": np.stack([h.real, h.imag], axis=-1).tolist()}],
    }


def test_minimal_route_parses():
    r = route_from_dict(tiny_route_dict())
    assert len(r.snapshots) == 1
    s = r.snapshots[0]
    assert s.h.shape == (2, 2, 4)
    assert s.h[1, 0, 3] == 11 + 1j
    assert s.state is LinkState.LOS and s.position == (1.0, 2.0)


def test_nan_tone_is_rejected_with_location():
    d = tiny_route_dict()
    d["snapshots"][0]["h"][1][0][2][0] = float("nan")
    with pytest.raises(InputError, match=r"snapshot 0: non-finite CTF entry at rx 1, tx 0, tone 2"):
        route_from_dict(d)


def test_shape_mismatch_is_schema_error():
    d = tiny_route_dict(np.ones((2, 2, 3), complex))
    with pytest.raises(InputError, match="shape"):
        route_from_dict(d)


def test_missing_field_is_named():
    d = tiny_route_dict()
    del d["snapshots"][0]["state"]
    with pytest.raises(InputError, match="state"):
        route_from_dict(d)


def test_route_round_trip_is_byte_identical(tmp_path):
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    p1.write_text(canonical_json(tiny_route_dict()))
    save_route(load_route(p1), p2)
    save_route(load_route(p2), p1)
    assert p1.read_bytes() == p2.read_bytes()


def test_canonical_json_sorted_and_compact():
    assert canonical_json({"b": 1, "a": [1, 2]}) == '{"a":[1,2],"b":1}\n'


def test_mpc_file_round_trip(tmp_path):
    mpcs = [Mpc(0.1 - 0.2j, 123.5e-9, math.radians(10), math.radians(-170))]
    entry = {"id": 4, "state": "NLoS", "position": (3.0, 4.0), "d3d": 50.0, "mpcs": mpcs}
    p = tmp_path / "m.json"
    p.write_text(canonical_json(mpc_file_dict([entry], area="X")))
    back = load_mpc_file(p)["snapshots"][0]
    m = back["mpcs"][0]
    assert back["state"] is LinkState.NLOS and back["d3d"] == 50.0
    assert m.gamma == mpcs[0].gamma
    assert m.tau == pytest.approx(mpcs[0].tau, rel=1e-12)
    assert m.phi_r == pytest.approx(mpcs[0].phi_r, rel=1e-12)
    raw = json.loads(p.read_text())["snapshots"][0]["mpcs"][0]
    assert raw["tau_ns"] == 123.5 and raw["phi_t_deg"] == 10.0


def test_lsp_csv_round_trip(tmp_path):
    recs = [LspRecord(0, 40.0, LinkState.LOS, 88.5, 5e-8, 30.0, 9.0, 6.5, True, position=(1.0, 2.0)),
            LspRecord(1, 60.0, LinkState.NLOS, 101.0, 2e-7, 50.0, 14.0, None, True, position=(3.0, 4.0))]
    p = tmp_path / "l.csv"
    p.write_text(lsp_records_csv(recs))
    back = load_lsp_csv(p)
    assert [r.snapshot_id for r in back] == [0, 1]
    assert back[0].ds == pytest.approx(5e-8) and back[0].k_db == 6.5
    assert back[1].k_db is None and back[1].state is LinkState.NLOS
    assert back[1].position == (3.0, 4.0)


def test_array_spec_validation():
    with pytest.raises(InputError):
        ArraySpec.from_dict({"kind": "URA", "num_elements": 4}, "arrays.tx")
    with pytest.raises(InputError, match="unknown fields"):
        ArraySpec.from_dict({"kind": "ULA", "pitch": 4}, "arrays.tx")


# ---- config ----------------------------------------------------------------------------

def test_config_unknown_key_is_named():
    with pytest.raises(InputError, match="bogus"):
        config_from_dict({"extraction": {"bogus": 1}})
    with pytest.raises(InputError, match="nonsense"):
        config_from_dict({"nonsense": 1})


def test_output_dir_env_override(tmp_path, monkeypatch):
    cfgf = tmp_path / "c.toml"
    cfgf.write_text('seed = 3\noutput_dir = "x"\n')
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "env"))
    cfg = load_config(cfgf)
    assert cfg.seed == 3 and cfg.output_dir == str(tmp_path / "env")


def test_pipeline_error_carries_stage():
    e = PipelineError("extract", "snapshot 3", InputError("bad"))
    assert "extract" in str(e) and "snapshot 3" in str(e)


# ---- CLI -------------------------------------------------------------------------------

def test_cli_unknown_flag_exits_2(capsys):
    assert main(["eval", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err


def test_cli_eval_prints_side_by_side(capsys):
    assert main(["eval", "--scenario", "uma", "--state", "nlos", "--lsp", "ds", "--freq", "6"]) == 0
    out = capsys.readouterr().out
    row = [line for line in out.splitlines() if line.strip().startswith("6")][0].split()
    assert float(row[1]) == pytest.approx(364.13, abs=0.01)
    assert float(row[2]) == pytest.approx(10 ** (-2.21 * math.log10(6) - 5.38) * 1e9, abs=1e-3)


def test_cli_freqfit_and_eval_with_models(tmp_path, capsys):
    models = tmp_path / "models.json"
    assert main(["freqfit", "--out", str(models)]) == 0
    data = json.loads(models.read_text())["models"]
    keys = {(m["scenario"], m["state"], m["lsp"]) for m in data}
    assert ("UMa", "LoS", "DS") in keys
    out = tmp_path / "e.csv"
    assert main(["eval", "--scenario", "UMa", "--state", "LoS", "--lsp", "ASA", "--freq", "4", "28",
                 "--models", str(models), "--out", str(out)]) == 0
    lines = [x for x in out.read_text().splitlines() if not x.startswith("#")]
    assert lines[0] == "freq_ghz,gpp_deg,this_work_deg" and len(lines) == 3


def test_cli_validation_errors_exit_2(tmp_path):
    assert main(["freqfit", "--anchors", str(tmp_path / "none.csv")]) == 2
    assert main(["eval", "--scenario", "rma", "--state", "los", "--lsp", "ds", "--freq", "6"]) == 2
    bad = tmp_path / "bad.json"
    d = tiny_route_dict()
    d["snapshots"][0]["h"][0][0][0][1] = float("inf")
    bad.write_text(json.dumps(d))
    assert main(["extract", "--route", str(bad)]) == 2


def test_cli_chain_synth_to_trend(tmp_path):
    mp = tmp_path / "m.json"
    entries = []
    for i in range(6):
        mpcs = [Mpc(1e-4, 100e-9 + i * 1e-9, 0.1, 0.5), Mpc(3e-5, 400e-9, -0.3, 2.0)]
        entries.append({"id": i, "state": "LoS", "position": (0.0, 40.0 + 5 * i), "d3d": 40.0 + 5 * i, "mpcs": mpcs})
    mp.write_text(canonical_json(mpc_file_dict(entries)))
    route = tmp_path / "r.json"
    assert main(["synth", "--mpcs", str(mp), "--snr-db", "40", "--out", str(route)]) == 0
    ext = tmp_path / "x.json"
    assert main(["extract", "--route", str(route), "--out", str(ext)]) == 0
    got = load_mpc_file(ext)["snapshots"]
    assert len(got) == 6 and all(len(s["mpcs"]) >= 2 for s in got)
    strongest = max(got[0]["mpcs"], key=lambda m: m.power)
    assert strongest.tau == pytest.approx(100e-9, abs=2e-9)
    lsp = tmp_path / "l.csv"
    assert main(["lsp", "--mpcs", str(ext), "--out", str(lsp)]) == 0
    assert main(["plfit", "--lsp", str(lsp), "--out", str(tmp_path / "p.csv")]) == 0
    assert main(["trend", "--lsp", str(lsp), "--param", "ds", "--out", str(tmp_path / "t.csv")]) == 0


@pytest.mark.slow
def test_report_is_deterministic(tmp_path):
    cfgf = tmp_path / "small.toml"
    cfgf.write_text(
        "seed = 1\n[input]\nn_snapshots = 30\n[extraction]\nmax_paths = 8\nresidual_target = 0.02\n"
        "[trend]\nb = 100\n[spatial]\nb = 100\n")
    a, b = tmp_path / "a", tmp_path / "b"
    env = os.environ.pop(OUTPUT_DIR_ENV, None)
    try:
        assert main(["report", "--config", str(cfgf), "--out", str(a)]) == 0
        assert main(["report", "--config", str(cfgf), "--out", str(b)]) == 0
    finally:
        if env is not None:
            os.environ[OUTPUT_DIR_ENV] = env
    names = sorted(p.name for p in a.iterdir())
    assert "manifest.json" in names and len(names) > 5
    assert names == sorted(p.name for p in b.iterdir())
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes(), n
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["provenance"]["seed"] == 1
