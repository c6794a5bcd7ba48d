"""Command-line interface.

Exit codes: 0 success, 2 invalid input or usage, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .arrays import LinkState, synthesize_ctf
from .errors import EstimationError, InputError
from .formats import (
    RouteFile,
    canonical_json,
    csv_text,
    decorr_csv,
    load_lsp_csv,
    load_mpc_file,
    load_route,
    lsp_records_csv,
    mpc_file_dict,
    route_to_dict,
    save_route,
    trend_csv,
)
from .freqmodel import (
    FreqModel,
    eval_3gpp,
    eval_freq_model,
    fit_all,
    load_3gpp_table,
    load_anchors,
    load_published_models,
    model_registry_json,
    parse_lsp,
    parse_scenario,
)
from .pipeline import PipelineConfig, PipelineError, extract_route, load_config, load_inputs, lsp_records, run_pipeline
from .pathloss import PlSample, fit_ci, fit_fi
from .route import RouteDataset, distance_trend
from .spatial import block_bootstrap_ci, lsp_trace, pl_residual_trace
from .synthetic import add_noise


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _records(path: str, state: str | None):
    recs = load_lsp_csv(path)
    if state:
        st = LinkState.parse(state)
        recs = [r for r in recs if r.state is st]
    if not recs:
        raise InputError(f"{path}: no LSP records" + (f" for state {state}" if state else ""))
    return recs


def cmd_synth(args, cfg: PipelineConfig) -> None:
    if args.mpcs is None:
        route = load_inputs(dataclasses.replace(cfg, input=dataclasses.replace(cfg.input, route=None,
                                                                               dataset_seed=args.seed)))
    else:
        data = load_mpc_file(args.mpcs)
        tx = cfg.tx.build(cfg.sounding.center_frequency)
        rx = cfg.rx.build(cfg.sounding.center_frequency)
        rng = np.random.default_rng(args.seed)
        snaps = []
        for s in data["snapshots"]:
            snap = synthesize_ctf(s["mpcs"], tx, rx, cfg.sounding, position=s["position"], d3d=s["d3d"],
                                  state=s["state"], snapshot_id=s["id"])
            if args.snr_db is not None:
                snap = add_noise(snap, args.snr_db, rng)
            snaps.append(snap)
        route = RouteFile(cfg.input.area, cfg.input.scenario, cfg.sounding, snaps, cfg.tx, cfg.rx,
                          synthetic=True, metadata={"generator": "synth", "seed": args.seed})
    if args.out:
        save_route(route, args.out)
    else:
        sys.stdout.write(canonical_json(route_to_dict(route)))


def cmd_extract(args, cfg: PipelineConfig) -> None:
    route = load_route(args.route)
    entries = extract_route(route, cfg)
    _emit(canonical_json(mpc_file_dict(entries, area=route.area, scenario=route.scenario)), args.out)


def cmd_lsp(args, cfg: PipelineConfig) -> None:
    data = load_mpc_file(args.mpcs)
    entries = [dict(s) for s in data["snapshots"]]
    for e in entries:
        if e["d3d"] is None:
            raise InputError(f"snapshot {e['id']}: d3d_m is required for LSP records")
    _emit(lsp_records_csv(lsp_records(entries, cfg.sounding)), args.out)


def _pl_samples(recs):
    state = recs[0].state
    return [PlSample(r.d3d, r.pl_db, state) for r in recs]


def cmd_plfit(args, cfg: PipelineConfig) -> None:
    fc = args.fc_ghz * 1e9 if args.fc_ghz else cfg.sounding.center_frequency
    rows = []
    states = [LinkState.parse(args.state)] if args.state else list(LinkState)
    all_recs = load_lsp_csv(args.lsp)
    for st in states:
        recs = [r for r in all_recs if r.state is st]
        if not recs:
            continue
        ci = fit_ci(_pl_samples(recs), fc)
        fi = fit_fi(_pl_samples(recs), fc)
        rows.append((st.value, ci.n_or_alpha, ci.sigma, fi.n_or_alpha, fi.beta, fi.sigma, ci.n_samples))
    if not rows:
        raise InputError(f"{args.lsp}: no LSP records")
    _emit(csv_text(("state", "ci_n", "ci_sigma", "fi_alpha", "fi_beta", "fi_sigma", "n_samples"), rows), args.out)


def cmd_trend(args, cfg: PipelineConfig) -> None:
    recs = load_lsp_csv(args.lsp)
    ds = RouteDataset(cfg.input.area, cfg.input.scenario, recs)
    bins = distance_trend(ds, args.param, args.state, cfg.binning, args.seed, cfg.trend.b)
    _emit(trend_csv(bins), args.out)


def cmd_spatial(args, cfg: PipelineConfig) -> None:
    recs = sorted(_records(args.lsp, args.state), key=lambda r: r.snapshot_id)
    if len({r.state for r in recs}) > 1:
        raise InputError("select one link state with --state")
    step = args.step or cfg.spatial.step_m
    if args.param.upper() == "SF":
        fit = fit_ci(_pl_samples(recs), cfg.sounding.center_frequency)
        trace = pl_residual_trace(recs, fit, step)
    else:
        trace = lsp_trace(recs, args.param, step)
    est = block_bootstrap_ci(trace, args.block_len or cfg.spatial.block_len, cfg.spatial.b, args.seed)
    _emit(decorr_csv(cfg.input.area, [est]), args.out)


def cmd_freqfit(args, cfg: PipelineConfig) -> None:
    models = fit_all(load_anchors(args.anchors), cfg.robust_fit)
    _emit(canonical_json({"models": model_registry_json(models)}), args.out)


def _load_models(path: str | None) -> dict:
    if path is None:
        return load_published_models()
    try:
        items = json.loads(Path(path).read_text(encoding="utf-8"))["models"]
    except (OSError, ValueError, KeyError) as e:
        raise InputError(f"{path}: cannot read models ({e})") from None
    out = {}
    for m in items:
        key = (m["scenario"], m["state"], m["lsp"])
        out[key] = None if "error" in m else FreqModel(m["a"], m["b"], *key, m.get("n_anchors", 0),
                                                       m.get("constraint_active", False))
    return out


def cmd_eval(args, cfg: PipelineConfig) -> None:
    key = (parse_scenario(args.scenario), LinkState.parse(args.state).value, parse_lsp(args.lsp))
    gpp = load_3gpp_table()[key]
    model = _load_models(args.models).get(key)
    unit, scale = ("ns", 1e9) if key[2] == "DS" else ("deg", 1.0)
    rows = []
    for f in args.freq:
        ours = None if model is None else eval_freq_model(model, f) * scale
        rows.append((f, eval_3gpp(gpp, f) * scale, ours))
    if args.out:
        _emit(csv_text(("freq_ghz", f"gpp_{unit}", f"this_work_{unit}"), rows), args.out)
        return
    print(f"{key[0]} {key[1]} {key[2]} [{unit}]")
    print(f"{'f (GHz)':>10} {'3GPP':>12} {'this work':>12}")
    for f, g, o in rows:
        print(f"{f:>10g} {g:>12.4f} {'---' if o is None else format(o, '.4f'):>12}")


def cmd_report(args, cfg: PipelineConfig) -> None:
    cfg = dataclasses.replace(cfg, seed=args.seed)
    report = run_pipeline(cfg, output_dir=args.out or cfg.output_dir)
    for name in sorted(report.digests):
        print(f"{report.digests[name]}  {name}")
    print(f"wrote {len(report.digests)} artifacts + manifest.json to {report.output_dir}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="TOML configuration file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 0 or config)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output file (directory for report)")

    p = argparse.ArgumentParser(prog="urbanchan", parents=[common],
                                description="Urban MIMO channel post-processing and LSP frequency models.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    s = sub.add_parser("synth", parents=[common], help="MPC list (or demo generator) -> route file")
    s.add_argument("--mpcs", help="MPC JSON; omit to generate the synthetic demo route")
    s.add_argument("--snr-db", type=float, default=None, help="add white noise at this SNR")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("extract", parents=[common], help="SAGE extraction: route file -> MPC JSON")
    s.add_argument("--route", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("lsp", parents=[common], help="MPC JSON -> per-snapshot LSP CSV")
    s.add_argument("--mpcs", required=True)
    s.set_defaults(func=cmd_lsp)

    s = sub.add_parser("plfit", parents=[common], help="CI/FI path-loss fits from an LSP CSV")
    s.add_argument("--lsp", required=True)
    s.add_argument("--state", choices=["los", "nlos", "LoS", "NLoS"])
    s.add_argument("--fc-ghz", type=float)
    s.set_defaults(func=cmd_plfit)

    s = sub.add_parser("trend", parents=[common], help="binned median trends with bootstrap CIs")
    s.add_argument("--lsp", required=True)
    s.add_argument("--param", required=True, choices=["ds", "asa", "asd", "k", "pl"])
    s.add_argument("--state", choices=["los", "nlos", "LoS", "NLoS"])
    s.set_defaults(func=cmd_trend)

    s = sub.add_parser("spatial", parents=[common], help="decorrelation distance with block-bootstrap CI")
    s.add_argument("--lsp", required=True)
    s.add_argument("--param", required=True, choices=["sf", "ds", "asa", "asd"])
    s.add_argument("--state", required=True, choices=["los", "nlos", "LoS", "NLoS"])
    s.add_argument("--step", type=float)
    s.add_argument("--block-len", type=int)
    s.set_defaults(func=cmd_spatial)

    s = sub.add_parser("freqfit", parents=[common], help="robust frequency models from an anchor CSV")
    s.add_argument("--anchors", help="anchor CSV (default: bundled literature table)")
    s.set_defaults(func=cmd_freqfit)

    s = sub.add_parser("eval", parents=[common], help="evaluate 3GPP and fitted models at frequencies")
    s.add_argument("--scenario", required=True)
    s.add_argument("--state", required=True)
    s.add_argument("--lsp", required=True)
    s.add_argument("--freq", required=True, type=float, nargs="+", help="frequencies in GHz")
    s.add_argument("--models", help="model JSON from freqfit (default: published coefficients)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", parents=[common], help="full pipeline -> artifact directory")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = load_config(getattr(args, "config", None))
        if not hasattr(args, "seed"):
            args.seed = cfg.seed
        if not hasattr(args, "out"):
            args.out = None
        args.func(args, cfg)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except PipelineError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2 if isinstance(e.cause, InputError) else 1
    except (EstimationError, OSError, RuntimeError, ArithmeticError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
