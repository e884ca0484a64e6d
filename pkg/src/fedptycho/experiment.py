"""End-to-end experiment: replayed acquisition feeding concurrent flow runs.

One call wires the simulated facility, the compute endpoint and the flow
engine together, starts one run per replayed scan, waits for all of them
and checks that every reconstruction arrived intact at the beamline.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .compute import ComputeEndpoint, QueueDelayModel
from .facility import Deployment, Endpoint, EventLog, extract_scan_id, replay_acquisition, tree_checksum
from .flows import FlowEngine, standard_flow
from .flows.engine import FlowRun
from .flows.providers import ComputeProvider, TransferProvider
from .metrics import (TimingBreakdown, breakdown, ingest_events, scaling_report,
                      write_breakdown_csv)

log = logging.getLogger(__name__)

RECON_FUNCTION = "ptycho-reconstruct"
RECON_BODY = "fedptycho.compute.tasks:reconstruct_view"


@dataclass
class ExperimentConfig:
    dataset: Path
    out: Path
    deployment: Deployment | None = None
    flow: object = None  # FlowDefinition; the shipped flow when None
    interval: float = 0.0
    views: object = None
    nodes: int = 1
    slots_per_node: int = 8
    partitions: int = 1
    iterations: int = 100
    accelerator_rate: float | None = None
    queue_delay: str = "0"
    bandwidth: float = 125e6
    latency: float = 0.0
    seed: int = 0
    corrupt: tuple = ()  # scan names whose inbound transfer gets a flipped byte
    run_timeout: float | None = None


@dataclass
class ExperimentResult:
    runs: list[FlowRun]
    scans: dict[str, str]  # run_id -> scan folder
    verified: dict[str, bool] = field(default_factory=dict)  # scan id -> checksum match
    breakdowns: list[TimingBreakdown] = field(default_factory=list)
    batch: TimingBreakdown | None = None
    journals: list[Path] = field(default_factory=list)
    allocations: int = 0

    @property
    def failed(self) -> list[FlowRun]:
        return [r for r in self.runs if r.status != "succeeded"]

    @property
    def ok(self) -> bool:
        return bool(self.runs) and not self.failed and all(self.verified.values()) and (
            len(self.verified) == len(self.runs))


def corrupting_hook(scan_names):
    """Fault hook flipping one byte of every staged copy of the named scans."""
    names = set(scan_names)

    def hook(parameters, tmp: Path):
        if Path(str(parameters.get("source_path", ""))).name not in names:
            return
        files = sorted(p for p in Path(tmp).rglob("*") if p.is_file() and p.stat().st_size)
        if files:
            data = bytearray(files[0].read_bytes())
            data[0] ^= 0xFF
            files[0].write_bytes(bytes(data))

    return hook


def verify_recon(deployment: Deployment, scan_id: str) -> bool:
    compute = deployment.by_role("compute").path(f"recon/{scan_id}")
    beamline = deployment.by_role("beamline").path(f"recon/{scan_id}")
    if not (compute.is_dir() and beamline.is_dir()):
        return False
    return tree_checksum(compute)[0] == tree_checksum(beamline)[0]


def run_experiment(cfg: ExperimentConfig, stop: threading.Event | None = None) -> ExperimentResult:
    out = Path(cfg.out)
    journal_dir = out / "journals"
    deployment = cfg.deployment or Deployment.default(out / "facility", cfg.bandwidth, cfg.latency)
    beamline = deployment.by_role("beamline")
    compute = deployment.by_role("compute")
    for ep in (beamline, compute):
        ep.root.mkdir(parents=True, exist_ok=True)
    flow = cfg.flow or standard_flow()

    transfer_log = EventLog(journal_dir / "transfers.jsonl")
    endpoint_log = EventLog(journal_dir / "endpoint.jsonl")
    endpoint = ComputeEndpoint(out / "endpoint", slots_per_node=cfg.slots_per_node, max_nodes=cfg.nodes,
                               queue_delay=QueueDelayModel.parse(cfg.queue_delay, cfg.seed),
                               journal=endpoint_log)
    endpoint.register_function(RECON_FUNCTION, RECON_BODY)
    providers = {
        "transfer": TransferProvider(deployment, deployment.token, transfer_log,
                                     corrupting_hook(cfg.corrupt) if cfg.corrupt else None),
        "compute": ComputeProvider(endpoint, {compute.id: compute.root}),
    }
    n_views = cfg.views if isinstance(cfg.views, int) else 64
    engine = FlowEngine(providers, journal_dir / "runs", max_concurrent_runs=max(64, n_views))
    runs, scans = [], {}
    try:
        for event in replay_acquisition(cfg.dataset, beamline, cfg.interval, cfg.views, transfer_log):
            if stop is not None and stop.is_set():
                break
            run = engine.start_run(flow, {
                "scan_dir": event.scan,
                "iterations": cfg.iterations,
                "slots": cfg.partitions,
                "accelerator_rate": cfg.accelerator_rate,
                "beamline_endpoint": beamline.id,
                "compute_endpoint": compute.id,
            })
            runs.append(run)
            scans[run.run_id] = event.scan
            log.info("started run %s for %s", run.run_id[:8], event.scan)
        for run in runs:
            engine.await_run(run.run_id, cfg.run_timeout)
    except BaseException:
        engine.cancel()
        raise
    finally:
        endpoint.shutdown()
        engine.shutdown()

    result = ExperimentResult(runs, scans, allocations=len(endpoint.nodes))
    for run in runs:
        if run.status == "succeeded":
            sid = extract_scan_id(scans[run.run_id])
            result.verified[sid] = verify_recon(deployment, sid)
    result.journals = sorted((journal_dir / "runs").glob("*.jsonl")) + [endpoint_log.path]
    table = ingest_events(*[p for p in result.journals if p.exists()])
    done = [r.run_id for r in runs if r.status == "succeeded"]
    result.breakdowns = [breakdown(table, rid, flow.path_from_start()) for rid in done]
    write_breakdown_csv(result.breakdowns, out / "breakdown.csv")
    if len(done) > 1:
        result.batch = breakdown(table, done)
        write_breakdown_csv([result.batch], out / "batch.csv")
    return result


def relocate(deployment: Deployment, root) -> Deployment:
    """Same endpoints, links and token, with endpoint roots moved under ``root``."""
    root = Path(root)
    eps = {k: Endpoint(e.id, root / e.id, e.role) for k, e in deployment.endpoints.items()}
    return Deployment(eps, dict(deployment.links), deployment.token)


def run_node_sweep(cfg: ExperimentConfig, nodes, stop=None):
    """Repeat the experiment at each node count; returns (results, ScalingReport).

    The scaling series uses the batch compute span, measured from the first
    task start to the last task end.
    """
    results, times = {}, {}
    for n in nodes:
        out = Path(cfg.out) / f"nodes{n}"
        deployment = relocate(cfg.deployment, out / "facility") if cfg.deployment else None
        sub = ExperimentConfig(**{**cfg.__dict__, "nodes": int(n), "out": out, "deployment": deployment})
        res = run_experiment(sub, stop)
        results[int(n)] = res
        if res.batch is not None:
            times[int(n)] = res.batch.compute
        elif res.breakdowns:
            times[int(n)] = res.breakdowns[0].compute
    report = scaling_report(times) if times else None
    if report is not None:
        (Path(cfg.out) / "scaling.csv").write_text(report.to_csv(), encoding="utf-8")
    return results, report
