"""Command-line entry point: train, score, bin, trace, simulate, sweep, report."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .binning import BinLayout, adaptive_binning, fixed_binning, text_bias
from .ep_sim import (
    HOME_POLICIES,
    PREFILL,
    DeviceTopology,
    TraceParseError,
    export_trace,
    import_trace,
    latency_model,
    place_bins,
    replay_trace,
    uniform_trace,
)
from .metrics import js_divergence, msi, write_json, write_msi_csv
from .numerics import TEXT, VISION, InvalidConfig, InvalidInput
from .router import modality_counts
from .scores import export_score_csv
from .trainer import ScoreEstimator, SyntheticData, TrainConfig, preset, router_trace, run_training

log = logging.getLogger("modroute")

OUT_DIR_ENV = "MODROUTE_OUT_DIR"
SWEEP_AXES = ("n_bins", "tau", "alpha_mi", "alpha_bal")


class UsageError(Exception):
    pass


def _load_json(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"file not found: {path}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


def build_config(args) -> TrainConfig:
    base = preset(args.preset).to_dict()
    if getattr(args, "config", None):
        user = _load_json(args.config)
        TrainConfig.from_dict(user)  # reject unknown keys before merging
        synth = {**base["synth"], **user.get("synth", {})}
        base.update(user)
        base["synth"] = synth
    overrides = {
        "alpha_mi": getattr(args, "alpha_mi", None),
        "alpha_bal": getattr(args, "alpha_bal", None),
        "steps": getattr(args, "steps", None),
        "estimator": getattr(args, "estimator", None),
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    if getattr(args, "n_bins", None) is not None:
        base["synth"]["N_bins"] = args.n_bins
    if args.seed is not None:
        base["synth"]["seed"] = args.seed
    return TrainConfig.from_dict(base)


def out_dir(args) -> Path:
    d = Path(args.out_dir or os.environ.get(OUT_DIR_ENV) or "runs")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_rows(rows: list[dict], path: Path) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def cmd_train(args) -> int:
    cfg = build_config(args)
    log.info("seed %d", cfg.synth.seed)
    d = out_dir(args)
    result = run_training(cfg)
    result.write_csv(d / "trainlog.csv")
    result.write_json(d / "trainlog.json")
    np.save(d / "checkpoint.npy", result.W)
    (d / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    result.layout.save(d / "layout.json")
    export_trace(result.trace, d / "trace.jsonl")
    print(f"final MSI {result.final_msi:.4f}; wrote {d}")
    return 0


def cmd_score(args) -> int:
    cfg = build_config(args)
    log.info("seed %d", cfg.synth.seed)
    est_cfg = TrainConfig.from_dict({**cfg.to_dict(), "estimator": args.estimator or cfg.estimator})
    data = SyntheticData(est_cfg.synth)
    rng = np.random.default_rng([est_cfg.synth.seed, 5])
    est = ScoreEstimator(est_cfg)
    if est_cfg.estimator in ("gaussian", "gmm"):
        for _ in range(max(est_cfg.warmup, 1)):
            est.observe(data.batch(rng))
    batch = data.batch(rng, args.samples)
    path = out_dir(args) / "scores.csv"
    export_score_csv(est.field(batch), path)
    print(f"wrote {path}")
    return 0


def counts_from_trace(trace) -> np.ndarray:
    C = np.zeros((trace.L, 2, trace.N_e))
    for l in range(trace.L):
        sel = trace.layer == l
        C[l] = modality_counts(trace.topk[sel], trace.modality[sel], trace.N_e)
    return C


def cmd_bin(args) -> int:
    trace = import_trace(args.trace)
    if args.binning == "fixed":
        layout = fixed_binning(trace.N_e, args.n_bins, trace.L)
    else:
        layout = adaptive_binning(text_bias(counts_from_trace(trace)), args.n_bins)
    path = out_dir(args) / "layout.json"
    layout.save(path)
    print(f"wrote {path}")
    return 0


def cmd_trace(args) -> int:
    cfg = build_config(args)
    s = cfg.synth
    log.info("seed %d", s.seed)
    rng = np.random.default_rng([s.seed, 6])
    if args.uniform:
        trace = uniform_trace(rng, args.samples, s.V, s.T, s.N_e, s.k, s.L, s.D, args.decode_steps)
    else:
        if not args.checkpoint:
            raise UsageError("--checkpoint is required unless --uniform is given")
        if not Path(args.checkpoint).is_file():
            raise UsageError(f"file not found: {args.checkpoint}")
        W = np.load(args.checkpoint)
        if W.shape != (s.L, s.N_e, s.D):
            raise UsageError(f"checkpoint shape {W.shape} does not match config {(s.L, s.N_e, s.D)}")
        trace = router_trace(W, SyntheticData(s), rng, args.samples, args.decode_steps)
    path = out_dir(args) / (args.name or "trace.jsonl")
    export_trace(trace, path)
    print(f"wrote {path} ({len(trace)} records)")
    return 0


def simulate(trace, layout: BinLayout, topo: DeviceTopology, policy: str, home: str, modes) -> tuple:
    plan = place_bins(layout, topo.num_devices, policy)
    stats = replay_trace(trace, plan, home)
    reports = [latency_model(stats, topo, m) for m in modes]
    return plan, stats, reports


def cmd_simulate(args) -> int:
    trace = import_trace(args.trace)
    topo = DeviceTopology.from_dict(_load_json(args.topology)) if args.topology else DeviceTopology.calibrated_toy()
    if args.layout:
        layout = BinLayout.from_json(_load_json(args.layout))
        if layout.num_experts != trace.N_e:
            print(f"error: trace has N_e={trace.N_e} but layout has N_e={layout.num_experts}", file=sys.stderr)
            return 2
    else:
        layout = fixed_binning(trace.N_e, args.n_bins, trace.L)
    modes = ("sync", "async") if args.mode == "both" else (args.mode,)
    plan, stats, reports = simulate(trace, layout, topo, args.placement, args.home, modes)
    d = out_dir(args)
    stats.write_csv(d / "transfer.csv")
    write_json({"rows": stats.rows(), "placement": plan.to_json(), "home": args.home}, d / "transfer.json")
    write_json({"topology": topo.to_dict(), "reports": [r.to_json() for r in reports]}, d / "latency.json")
    print(f"{'phase':8} {'mod':4} {'w/o dedup':>10} {'w/ dedup':>10}")
    for r in stats.rows():
        if r["tokens"]:
            print(f"{r['phase']:8} {r['modality']:4} {r['ratio_no_dedup']:10.3%} {r['ratio_dedup']:10.3%}")
    for rep in reports:
        print(f"{rep.mode:5} TTFT {rep.ttft:.6f}s TPOT {rep.tpot:.6f}s")
    return 0


def _sweep_one(base: TrainConfig, axis: str, value: float) -> dict:
    cfg = base.to_dict()
    if axis == "n_bins":
        cfg["synth"]["N_bins"] = int(value)
    elif axis == "tau":
        cfg["tau_scale"] = value
    else:
        cfg[axis] = value
    tc = TrainConfig.from_dict(cfg)
    result = run_training(tc, log_every=max(tc.steps, 1))
    last = result.rows[-1] if result.rows else {}
    row = {
        "axis": axis,
        "value": value,
        "final_msi": result.final_msi,
        "loss_bal": last.get("loss_bal", float("nan")),
        "loss_mi": last.get("loss_mi", float("nan")),
    }
    nd = 2
    if tc.synth.N_bins % nd == 0:
        stats = replay_trace(result.trace, place_bins(result.layout, nd, "block"))
        row["ratio_no_dedup"] = stats.cell(PREFILL).ratio_no_dedup
        row["ratio_dedup"] = stats.cell(PREFILL).ratio_dedup
    else:
        row["ratio_no_dedup"] = row["ratio_dedup"] = float("nan")
    return row


def cmd_sweep(args) -> int:
    if args.axis not in SWEEP_AXES:
        print(f"error: invalid axis {args.axis!r}; valid axes: {', '.join(SWEEP_AXES)}", file=sys.stderr)
        return 2
    values: list[float] = []
    for v in args.values:
        if v in values:
            log.warning("duplicate sweep value %g dropped", v)
            continue
        values.append(v)
    if len(values) < 2:
        raise UsageError("a sweep needs at least two distinct values")
    base = build_config(args)
    log.info("seed %d", base.synth.seed)
    with ThreadPoolExecutor(max_workers=max(args.threads, 1)) as pool:
        rows = list(pool.map(lambda v: _sweep_one(base, args.axis, v), values))
    path = out_dir(args) / f"sweep_{args.axis}.csv"
    _write_rows(rows, path)
    print(f"wrote {path}")
    return 0


def cmd_report(args) -> int:
    d = out_dir(args)
    payload = {}
    if args.trace:
        trace = import_trace(args.trace)
        report = msi(counts_from_trace(trace.select(trace.phase == PREFILL)))
        write_msi_csv(report, d / "msi.csv")
        payload["msi"] = report.to_json()
        print(f"MSI {report.overall:.4f}")
    if args.js:
        cfg = build_config(args)
        data = SyntheticData(cfg.synth)
        batch = data.batch(np.random.default_rng([cfg.synth.seed, 7]), args.samples)
        labels = batch.flat_labels()
        rows = []
        for l in range(batch.num_layers):
            x = batch.layer_tokens(l)
            js = js_divergence(x[labels == VISION], x[labels == TEXT], seed=cfg.synth.seed)
            rows.append({"layer": l, "js": js})
        _write_rows(rows, d / "js.csv")
        payload["js"] = rows
    if not payload:
        raise UsageError("report needs --trace and/or --js")
    write_json(payload, d / "report.json")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--out-dir", default=None, help=f"output directory (default ${OUT_DIR_ENV} or ./runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    cfg_opts = argparse.ArgumentParser(add_help=False)
    cfg_opts.add_argument("--config", default=None, help="JSON training config")
    cfg_opts.add_argument("--preset", default="desk", choices=["desk", "paper-scale"])
    cfg_opts.add_argument("--alpha-mi", type=float, default=None)
    cfg_opts.add_argument("--alpha-bal", type=float, default=None)
    cfg_opts.add_argument("--steps", type=int, default=None)
    cfg_opts.add_argument("--estimator", default=None, choices=["gaussian", "attention", "gmm", "hard"])
    cfg_opts.add_argument("--n-bins", type=int, default=None)

    p = argparse.ArgumentParser(prog="modroute", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", parents=[common, cfg_opts], help="train a router and export its trace")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("score", parents=[common, cfg_opts], help="export soft modality scores as CSV")
    s.add_argument("--samples", type=int, default=4)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("bin", parents=[common], help="derive a bin layout from a trace")
    s.add_argument("--trace", required=True)
    s.add_argument("--n-bins", type=int, required=True)
    s.add_argument("--binning", choices=["adaptive", "fixed"], default="adaptive")
    s.set_defaults(func=cmd_bin)

    s = sub.add_parser("trace", parents=[common, cfg_opts], help="route synthetic tokens into a JSONL trace")
    s.add_argument("--checkpoint", default=None)
    s.add_argument("--uniform", action="store_true", help="uniform random top-k instead of a router")
    s.add_argument("--samples", type=int, default=8)
    s.add_argument("--decode-steps", type=int, default=4)
    s.add_argument("--name", default=None, help="output file name")
    s.set_defaults(func=cmd_trace)

    s = sub.add_parser("simulate", parents=[common], help="replay a trace on an expert-parallel topology")
    s.add_argument("--trace", required=True)
    s.add_argument("--topology", default=None, help="JSON topology (default: calibrated 2-device toy)")
    s.add_argument("--layout", default=None, help="JSON bin layout (default: fixed index-order bins)")
    s.add_argument("--n-bins", type=int, default=2)
    s.add_argument("--placement", choices=["block", "round_robin"], default="block")
    s.add_argument("--home", choices=list(HOME_POLICIES), default="device0")
    s.add_argument("--mode", choices=["sync", "async", "both"], default="both")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("sweep", parents=[common, cfg_opts], help="train once per value of one hyperparameter")
    s.add_argument("--axis", required=True)
    s.add_argument("--values", type=float, nargs="+", required=True)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("report", parents=[common, cfg_opts], help="MSI from a trace and per-layer JS divergence")
    s.add_argument("--trace", default=None)
    s.add_argument("--js", action="store_true")
    s.add_argument("--samples", type=int, default=64)
    s.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (InvalidConfig, InvalidInput, TypeError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except TraceParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
