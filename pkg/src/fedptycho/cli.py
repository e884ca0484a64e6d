"""``fedptycho`` command line.

Human-readable output goes to stderr; artifacts are written to files only.
Exit codes: 0 success, 1 runtime or workflow failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import threading
from pathlib import Path

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("fedptycho")


class UsageError(Exception):
    pass


def _say(msg=""):
    print(msg, file=sys.stderr)


def _shape(text):
    try:
        parts = [int(v) for v in text.lower().replace("x", ",").split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW or N, got {text!r}") from None
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected HxW or N, got {text!r}")
    return tuple(parts)


def _int_list(text):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError("node counts must be >= 1")
    return values


def _existing(path, what):
    if path is not None and not Path(path).exists():
        raise UsageError(f"{what} {path} does not exist")
    return path


# -- generate ------------------------------------------------------------------

def cmd_generate(args):
    from .phantoms import PRESETS, PhantomSpec, generate_experiment

    fields = {}
    if args.spec:
        try:
            fields.update(json.loads(Path(_existing(args.spec, "phantom spec")).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise UsageError(f"phantom spec {args.spec} is not valid JSON: {exc}") from None
    if args.preset:
        if args.preset not in PRESETS:
            raise UsageError(f"unknown preset {args.preset!r}; choose from {', '.join(PRESETS)}")
        fields.update(PRESETS[args.preset])
    for key in ("kind", "object_shape", "probe_shape", "step", "views", "photon_scale", "noise", "seed"):
        value = getattr(args, key)
        if value is not None:
            fields[key] = value
    try:
        spec = PhantomSpec(**fields)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad phantom spec: {exc}") from None
    views = generate_experiment(spec, args.out)
    for v in views:
        meta = json.loads((v / "meta.json").read_text(encoding="utf-8"))
        _say(f"{v}: {spec.kind} object {spec.object_shape[0]}x{spec.object_shape[1]}, "
             f"{meta['count']} frames of {spec.probe_shape[0]}x{spec.probe_shape[1]}")
    return EXIT_OK


# -- run-experiment --------------------------------------------------------------

def cmd_run_experiment(args):
    from .experiment import ExperimentConfig, run_experiment, run_node_sweep
    from .facility import ConfigError, load_deployment
    from .flows import FlowDefinitionError, parse_definition

    _existing(args.dataset, "dataset directory")
    try:
        deployment = load_deployment(_existing(args.deployment, "deployment config")) if args.deployment else None
        flow = None
        if args.flow:
            flow = parse_definition(Path(_existing(args.flow, "flow definition")).read_text(encoding="utf-8"))
    except (ConfigError, FlowDefinitionError) as exc:
        raise UsageError(str(exc)) from None
    cfg = ExperimentConfig(
        dataset=Path(args.dataset), out=Path(args.out), deployment=deployment, flow=flow,
        interval=args.interval, views=args.views, nodes=args.nodes[0], slots_per_node=args.slots_per_node,
        partitions=args.partitions, iterations=args.iterations, accelerator_rate=args.accelerator_rate,
        queue_delay=args.queue_delay, bandwidth=args.bandwidth, latency=args.latency, seed=args.seed,
        corrupt=tuple(args.corrupt or ()), run_timeout=args.run_timeout,
    )
    if cfg.partitions > cfg.slots_per_node:
        raise UsageError(f"--partitions {cfg.partitions} exceeds --slots-per-node {cfg.slots_per_node}")
    stop = threading.Event()
    try:
        if len(args.nodes) > 1:
            results, report = run_node_sweep(cfg, args.nodes, stop)
        else:
            results, report = {args.nodes[0]: run_experiment(cfg, stop)}, None
    except KeyboardInterrupt:
        stop.set()
        _say("interrupted: outstanding runs cancelled and slots released")
        return EXIT_FAILURE

    ok = True
    for n, res in results.items():
        succeeded = len(res.runs) - len(res.failed)
        _say(f"nodes={n}: {succeeded}/{len(res.runs)} runs succeeded, {res.allocations} node allocation(s)")
        for run in res.failed:
            _say(f"  FAILED run {run.run_id} ({res.scans[run.run_id]}): {run.error}")
        for sid, good in sorted(res.verified.items()):
            if not good:
                _say(f"  recon/{sid} checksum mismatch between compute and beamline endpoints")
        if len(results) == 1:
            for b in res.breakdowns:
                _say(f"  {res.scans[b.run_id]:>10}  in {b.incoming:7.3f}s  compute {b.compute:7.3f}s  "
                     f"out {b.outgoing:7.3f}s  others {b.others:7.3f}s  total {b.total:7.3f}s")
        if res.batch is not None:
            _say(f"  batch compute span {res.batch.compute:.3f}s of {res.batch.total:.3f}s total")
        ok = ok and res.ok
    if report is not None:
        _say(report.to_text())
        if args.plot:
            report.plot(args.plot)
    _say(f"artifacts under {args.out}")
    return EXIT_OK if ok else EXIT_FAILURE


# -- reconstruct -------------------------------------------------------------------

def cmd_reconstruct(args):
    from .compute.tasks import write_recon
    from .ptycho import (DatasetFormatError, ReconConfig, default_object_guess, default_probe_guess,
                         load_dataset, reconstruct)

    try:
        dataset = load_dataset(_existing(args.dataset, "dataset")).normalized()
    except (DatasetFormatError, OSError) as exc:
        _say(f"cannot read dataset: {exc}")
        return EXIT_FAILURE
    recover = args.recover_probe or dataset.probe is None
    probe = default_probe_guess(dataset.probe_shape, args.seed) if recover else dataset.probe
    try:
        config = ReconConfig(iterations=args.iterations, solver=args.solver, step_size=args.step_size,
                             recover_probe=recover, partitions=args.partitions, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    result = reconstruct(dataset, default_object_guess(dataset.object_shape), probe, config)
    write_recon(result, args.out, {"view_id": dataset.view_id, "partitions": args.partitions,
                                   "solver": args.solver, "recover_probe": recover})
    hist = result.residual_history
    _say(f"{len(hist)} iterations: residual {hist[0]:.4e} -> {result.final_residual:.4e}; wrote {args.out}")
    return EXIT_OK


# -- report --------------------------------------------------------------------------

def _journal_files(paths):
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(p.rglob("*.jsonl")))
        elif p.exists():
            files.append(p)
        else:
            raise UsageError(f"journal path {p} does not exist")
    return files


def _series(text):
    out = {}
    for item in text.split(","):
        n, sep, t = item.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"expected n=time pairs, got {item!r}")
        out[int(n)] = float(t)
    return out


def cmd_report(args):
    from . import metrics

    if not args.journals and not args.series and not args.scaling_csv:
        raise UsageError("nothing to report: give journal files/directories, --series or --scaling-csv")
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    if args.journals:
        files = _journal_files(args.journals)
        table = metrics.ingest_events(*files)
        if not table.runs:
            raise UsageError("no flow runs found in the given journals")
        rows = []
        for rid in sorted(table.runs, key=lambda r: table.runs[r]["started"] or 0):
            try:
                rows.append(metrics.breakdown(table, rid))
            except metrics.IncompleteRunError as exc:
                _say(f"skipping: {exc}")
        _say(f"{'run':>34} {'incoming':>9} {'compute':>9} {'outgoing':>9} {'others':>9} {'total':>9}")
        for b in rows:
            _say(f"{b.run_id:>34} {b.incoming:9.3f} {b.compute:9.3f} {b.outgoing:9.3f} {b.others:9.3f} {b.total:9.3f}")
        if len(rows) > 1:
            batch = metrics.breakdown(table, [b.run_id for b in rows])
            _say(f"batch compute span {batch.compute:.3f}s, others {batch.others:.3f}s, total {batch.total:.3f}s")
        if out:
            metrics.write_breakdown_csv(rows, out / "breakdown.csv")
    series = dict(args.series or {})
    if args.scaling_csv:
        import csv

        with open(_existing(args.scaling_csv, "scaling CSV"), encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                series[int(row["n"])] = float(row["time_s"])
    if series:
        try:
            report = metrics.scaling_report(series, base=args.base)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        _say(report.to_text())
        for v in report.violations():
            _say(f"warning: {v}")
        if out:
            (out / "scaling.csv").write_text(report.to_csv(), encoding="utf-8")
        if args.plot:
            report.plot(args.plot)
    return EXIT_OK


# -- slots -----------------------------------------------------------------------------

def cmd_slots(args):
    from .compute import SlotFile

    sf = SlotFile(_existing(args.slot_file, "slot file"))
    if args.slots_command == "show":
        entries = sf.entries()
        for node, c in sorted(sf.counts().items()):
            _say(f"{node}: {c['busy']} busy / {c['free']} free")
        for e in entries:
            if e["state"] == "busy":
                _say(f"  {e['slot_id']} held by {e['holder']}")
        if not entries:
            _say("no slots registered")
        return EXIT_OK
    freed = sf.repair(args.keep)
    _say(f"freed {len(freed)} slot(s)" + (f": {', '.join(freed)}" if freed else ""))
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="fedptycho", description="Federated ptychography pipeline on a desk.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic scan directories")
    g.add_argument("--spec", help="JSON phantom spec; flags override its fields")
    g.add_argument("--preset")
    g.add_argument("--kind")
    g.add_argument("--views", type=int)
    g.add_argument("--object-shape", type=_shape)
    g.add_argument("--probe-shape", type=_shape)
    g.add_argument("--step", type=int)
    g.add_argument("--photon-scale", type=float)
    g.add_argument("--noise", choices=("none", "poisson"))
    g.add_argument("--seed", type=int)
    g.add_argument("--out", default="data")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run-experiment", help="replay scans through the federated flow")
    r.add_argument("--dataset", required=True, help="directory holding scan1..scanN")
    r.add_argument("--deployment", help="deployment JSON (default: beamline + compute under --out)")
    r.add_argument("--flow", help="flow definition JSON (default: the shipped 3-state flow)")
    r.add_argument("--interval", type=float, default=0.0, help="seconds between replayed scans")
    r.add_argument("--views", type=int, help="replay only scan1..scanN")
    r.add_argument("--nodes", type=_int_list, default=[1], help="max nodes; a comma list sweeps")
    r.add_argument("--slots-per-node", type=int, default=8)
    r.add_argument("--partitions", type=int, default=1, help="slots per reconstruction task")
    r.add_argument("--iterations", type=int, default=100)
    r.add_argument("--accelerator-rate", type=float, help="modeled pixel-updates/s per slot")
    r.add_argument("--queue-delay", default="0", help="node queue delay, e.g. 2 or exponential:1.5")
    r.add_argument("--bandwidth", type=float, default=125e6, help="link bytes/s for the default deployment")
    r.add_argument("--latency", type=float, default=0.0)
    r.add_argument("--corrupt", action="append", metavar="SCAN", help="flip a byte in SCAN's inbound copy")
    r.add_argument("--run-timeout", type=float)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--plot", help="speedup plot file for node sweeps")
    r.add_argument("--out", default="experiment")
    r.set_defaults(func=cmd_run_experiment)

    c = sub.add_parser("reconstruct", help="standalone reconstruction of one scan directory")
    c.add_argument("dataset")
    c.add_argument("--iterations", type=int, default=100)
    c.add_argument("--partitions", type=int, default=1)
    c.add_argument("--solver", choices=("gradient-descent", "epie"), default="gradient-descent")
    c.add_argument("--step-size", type=float, default=0.5)
    c.add_argument("--recover-probe", action="store_true")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", default="recon")
    c.set_defaults(func=cmd_reconstruct)

    m = sub.add_parser("report", help="breakdown and scaling tables from journals")
    m.add_argument("journals", nargs="*", help="journal files or directories searched for *.jsonl")
    m.add_argument("--series", type=_series, help="scaling series, e.g. 1=100,2=64.1")
    m.add_argument("--scaling-csv", help="n,time_s CSV from a node sweep")
    m.add_argument("--base", type=int)
    m.add_argument("--plot")
    m.add_argument("--out", help="directory for breakdown.csv / scaling.csv")
    m.set_defaults(func=cmd_report)

    s = sub.add_parser("slots", help="inspect or repair a slot file")
    ssub = s.add_subparsers(dest="slots_command", required=True)
    show = ssub.add_parser("show")
    show.add_argument("slot_file")
    rep = ssub.add_parser("repair", help="free busy slots left behind by dead workers")
    rep.add_argument("slot_file")
    rep.add_argument("--keep", action="append", metavar="TASK_ID", help="holder known to be alive")
    for sp in (show, rep):
        sp.set_defaults(func=cmd_slots)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    from .metrics import JournalError

    try:
        return args.func(args)
    except UsageError as exc:
        _say(f"error: {exc}")
        return EXIT_USAGE
    except JournalError as exc:
        _say(f"error: {exc}")
        return EXIT_USAGE
    except KeyboardInterrupt:
        _say("interrupted")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
