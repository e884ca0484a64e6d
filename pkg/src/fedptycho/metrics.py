"""Timing breakdowns and scaling tables computed from run and task journals.

Everything here is a pure function of the journal contents, so re-ingesting
the same files reproduces the same reports byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

BREAKDOWN_COLUMNS = ("run_id", "incoming_s", "compute_s", "outgoing_s", "others_s", "total_s")
SCALING_COLUMNS = ("n", "time_s", "speedup", "efficiency")
DEFAULT_NOISE_BAND = 0.10
STANDARD_STATES = ("TransferIn", "Reconstruct", "TransferOut")


class JournalError(ValueError):
    pass


class IncompleteRunError(ValueError):
    pass


@dataclass
class EventTable:
    runs: dict[str, dict] = field(default_factory=dict)
    tasks: dict[str, dict] = field(default_factory=dict)
    nodes: list[dict] = field(default_factory=list)
    transfers: list[dict] = field(default_factory=list)

    @property
    def empty(self):
        return not (self.runs or self.tasks or self.nodes or self.transfers)

    def state_count(self):
        return sum(len(r["states"]) for r in self.runs.values())

    def tasks_for(self, run_id):
        return [t for t in self.tasks.values() if t.get("meta", {}).get("run_id") == run_id]


_TASK_TIMES = ("queued_at", "started", "finished")


def _add_task(table: EventTable, rec: dict, where: str):
    task_id = rec.get("task_id")
    if not task_id:
        raise JournalError(f"{where}: task record without task_id")
    known = table.tasks.get(task_id)
    if known is not None:
        if any(known.get(k) != rec.get(k) for k in _TASK_TIMES):
            raise JournalError(f"{where}: task {task_id} recorded twice with conflicting timestamps")
        return
    table.tasks[task_id] = {k: v for k, v in rec.items() if k != "event"}


def _run(table, run_id):
    return table.runs.setdefault(run_id, {"run_id": run_id, "started": None, "finished": None,
                                          "status": None, "states": []})


def ingest_events(*paths) -> EventTable:
    """Merge flow-run journals and endpoint task journals into one table."""
    table = EventTable()
    seen_attempts: dict[str, dict] = {}
    for path in paths:
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                where = f"{path}:{lineno}"
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise JournalError(f"{where}: malformed journal line ({exc.msg})") from None
                if not isinstance(rec, dict) or "event" not in rec:
                    raise JournalError(f"{where}: journal record must be an object with an 'event' field")
                kind = rec["event"]
                if kind == "run_started":
                    run = _run(table, rec["run_id"])
                    if run["started"] is not None and run["started"] != rec["time"]:
                        raise JournalError(f"{where}: run {rec['run_id']} started twice")
                    run["started"] = rec["time"]
                    run["flow_id"] = rec.get("flow_id")
                elif kind == "run_finished":
                    run = _run(table, rec["run_id"])
                    if run["finished"] is not None and run["finished"] != rec["time"]:
                        raise JournalError(f"{where}: run {rec['run_id']} finished twice")
                    run["finished"] = rec["time"]
                    run["status"] = rec.get("status")
                elif kind == "state":
                    key = rec.get("attempt_id") or f"{rec['run_id']}:{rec['state']}:{rec.get('attempt')}"
                    if key in seen_attempts:
                        prior = seen_attempts[key]
                        if (prior["started"], prior["finished"]) != (rec["started"], rec["finished"]):
                            raise JournalError(f"{where}: state attempt {key} recorded twice with conflicting timestamps")
                        continue
                    seen_attempts[key] = rec
                    _run(table, rec["run_id"])["states"].append(rec)
                    task = (rec.get("output") or {}).get("task") if isinstance(rec.get("output"), dict) else None
                    if task:
                        _add_task(table, task, where)
                elif kind == "task":
                    _add_task(table, rec, where)
                elif kind in ("node", "node_denied"):
                    table.nodes.append(rec)
                elif kind in ("transfer", "replay"):
                    table.transfers.append(rec)
    for run in table.runs.values():
        run["states"].sort(key=lambda s: (s["started"], s.get("attempt", 0)))
    return table


@dataclass
class TimingBreakdown:
    run_id: str
    incoming: float
    compute: float
    outgoing: float
    others: float
    total: float

    def row(self):
        return (self.run_id, self.incoming, self.compute, self.outgoing, self.others, self.total)


def _run_breakdown(table: EventTable, run_id, expected_states) -> TimingBreakdown:
    run = table.runs.get(run_id)
    if run is None:
        raise IncompleteRunError(f"run {run_id} not found in journals")
    if run["started"] is None or run["finished"] is None:
        missing = "run_started" if run["started"] is None else "run_finished"
        raise IncompleteRunError(f"run {run_id} is incomplete: missing {missing} record")
    states = run["states"]
    names = {s["state"] for s in states}
    missing = [s for s in expected_states if s not in names]
    if missing:
        raise IncompleteRunError(f"run {run_id} is incomplete: missing state {', '.join(missing)}")
    total = run["finished"] - run["started"]
    compute_states = [s for s in states if s["action_type"] == "compute"]
    boundary = min((s["started"] for s in compute_states), default=float("inf"))
    incoming = sum(s["finished"] - s["started"] for s in states
                   if s["action_type"] == "transfer" and s["started"] < boundary)
    outgoing = sum(s["finished"] - s["started"] for s in states
                   if s["action_type"] == "transfer" and s["started"] >= boundary)
    compute = sum(t["finished"] - t["started"] for t in table.tasks_for(run_id)
                  if t.get("started") is not None and t.get("finished") is not None)
    if compute_states and not table.tasks_for(run_id) and any(s["outcome"] == "success" for s in compute_states):
        raise IncompleteRunError(f"run {run_id}: compute state succeeded but no task record found")
    others = max(0.0, total - incoming - compute - outgoing)
    return TimingBreakdown(run_id, incoming, compute, outgoing, others, total)


def breakdown(table: EventTable, run_ids, expected_states=STANDARD_STATES) -> TimingBreakdown:
    """Compute / incoming / outgoing / others split.

    A single run id gives the sequential accounting. Several run ids are
    treated as one concurrent batch: compute is the span from the first
    task start to the last task end, and everything else is others.
    """
    if isinstance(run_ids, str):
        return _run_breakdown(table, run_ids, expected_states)
    run_ids = list(run_ids)
    if len(run_ids) == 1:
        return _run_breakdown(table, run_ids[0], expected_states)
    if not run_ids:
        raise ValueError("no runs given")
    starts, ends, t_starts, t_ends = [], [], [], []
    for rid in run_ids:
        run = table.runs.get(rid)
        if run is None or run["started"] is None or run["finished"] is None:
            raise IncompleteRunError(f"run {rid} is incomplete: missing run_started/run_finished")
        starts.append(run["started"])
        ends.append(run["finished"])
        for t in table.tasks_for(rid):
            if t.get("started") is not None and t.get("finished") is not None:
                t_starts.append(t["started"])
                t_ends.append(t["finished"])
    total = max(ends) - min(starts)
    compute = (max(t_ends) - min(t_starts)) if t_starts else 0.0
    return TimingBreakdown("batch", 0.0, compute, 0.0, max(0.0, total - compute), total)


def breakdown_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BREAKDOWN_COLUMNS)
    for b in rows:
        w.writerow([b.run_id] + [f"{v:.6f}" for v in b.row()[1:]])
    return buf.getvalue()


def write_breakdown_csv(rows, path):
    Path(path).write_text(breakdown_csv(rows), encoding="utf-8")


def read_breakdown_csv(path) -> list[TimingBreakdown]:
    with open(path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != BREAKDOWN_COLUMNS:
            raise JournalError(f"{path}: unexpected columns {reader.fieldnames}")
        return [TimingBreakdown(r["run_id"], float(r["incoming_s"]), float(r["compute_s"]),
                                float(r["outgoing_s"]), float(r["others_s"]), float(r["total_s"]))
                for r in reader]


# -- scaling -----------------------------------------------------------------

@dataclass
class ScalingPoint:
    n: int
    time: float
    speedup: float
    efficiency: float


@dataclass
class WeakPoint:
    size: float
    workers: int
    time: float
    efficiency: float


@dataclass
class ScalingReport:
    base_n: int
    points: list[ScalingPoint]
    weak: list[WeakPoint] = field(default_factory=list)
    noise_band: float = DEFAULT_NOISE_BAND

    def speedups(self):
        return {p.n: p.speedup for p in self.points}

    def violations(self) -> list[str]:
        """Points whose efficiency falls outside (0, 1 + noise_band]."""
        out = []
        for p in self.points:
            if not 0 < p.efficiency <= 1 + self.noise_band:
                out.append(f"n={p.n}: efficiency {p.efficiency:.3f} outside (0, {1 + self.noise_band:.2f}]")
        for p in self.weak:
            if not 0 < p.efficiency <= 1 + self.noise_band:
                out.append(f"weak n={p.workers}: efficiency {p.efficiency:.3f} outside (0, {1 + self.noise_band:.2f}]")
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SCALING_COLUMNS)
        for p in self.points:
            w.writerow([p.n, f"{p.time:.6f}", f"{p.speedup:.4f}", f"{p.efficiency:.4f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{'n':>4} {'time_s':>12} {'speedup':>8} {'efficiency':>10}"]
        for p in self.points:
            lines.append(f"{p.n:>4} {p.time:>12.4f} {p.speedup:>8.2f} {p.efficiency:>10.1%}")
        if self.weak:
            lines.append("")
            lines.append(f"{'size':>8} {'workers':>7} {'time_s':>12} {'weak eff':>9}")
            for p in self.weak:
                lines.append(f"{p.size:>8g} {p.workers:>7} {p.time:>12.4f} {p.efficiency:>9.1%}")
        lines.append(f"(efficiencies up to {1 + self.noise_band:.0%} are within the declared noise band)")
        return "\n".join(lines)

    def plot(self, path):
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(4, 3))
        ns = [p.n for p in self.points]
        ax.plot(ns, [p.speedup for p in self.points], "o-", label="measured")
        ax.plot(ns, [n / self.base_n for n in ns], "k--", lw=0.8, label="ideal")
        ax.set_xlabel("workers")
        ax.set_ylabel("speedup")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def scaling_report(times: dict, base=None, weak=None, noise_band=DEFAULT_NOISE_BAND) -> ScalingReport:
    """Speedup ``T_base / T_n`` and efficiency ``speedup / (n / base)``.

    ``weak`` is an iterable of ``(problem_size, workers, time)`` triples where
    the problem grows with the worker count; weak efficiency is
    ``T_base / T_n`` relative to the fewest-worker entry.
    """
    times = {int(n): float(t) for n, t in times.items()}
    if not times:
        raise ValueError("no scaling measurements given")
    base = min(times) if base is None else int(base)
    if base not in times:
        raise ValueError(f"base configuration n={base} was not measured")
    t_base = times[base]
    points = [ScalingPoint(n, t, t_base / t, (t_base / t) / (n / base)) for n, t in sorted(times.items())]
    weak_points = []
    if weak:
        triples = sorted((float(s), int(w), float(t)) for s, w, t in weak)
        triples.sort(key=lambda x: x[1])
        t0 = triples[0][2]
        weak_points = [WeakPoint(s, w, t, t0 / t) for s, w, t in triples]
    return ScalingReport(base, points, weak_points, noise_band)
