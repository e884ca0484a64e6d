"""FaaS-style compute endpoint.

Functions are registered once and invoked by id. Invocations queue as
tasks; when queued demand exceeds the slots of the nodes already held, the
endpoint asks the (simulated) batch scheduler for exactly one more node.
Each active node runs one worker per slot; a worker claims slots for its
task through the shared :class:`SlotFile` before running it.
"""

from __future__ import annotations

import hashlib
import importlib
import inspect
import itertools
import logging
import queue
import random
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from ..facility import EventLog
from .slots import SlotFile, SlotTimeout

log = logging.getLogger(__name__)


class UnknownFunctionError(KeyError):
    pass


class TaskRejected(ValueError):
    pass


# -- function registry -------------------------------------------------------

@dataclass
class FunctionRecord:
    function_id: str
    name: str
    body: str  # "module:qualname" import reference
    body_hash: str
    registered_at: float


def resolve_body(ref: str) -> Callable:
    module, _, attr = ref.partition(":")
    obj = importlib.import_module(module)
    for part in attr.split("."):
        obj = getattr(obj, part)
    return obj


def _body_reference(body) -> tuple[str, str]:
    if isinstance(body, str):
        ref = body
        fn = resolve_body(ref)
    else:
        fn = body
        ref = f"{fn.__module__}:{fn.__qualname__}"
        if "<locals>" in ref or "<lambda>" in ref:
            raise ValueError(f"function bodies must be importable module attributes, got {ref}")
    try:
        source = inspect.getsource(fn)
    except (OSError, TypeError):
        source = repr(getattr(fn, "__code__", fn))
    return ref, hashlib.sha256(f"{ref}\n{source}".encode()).hexdigest()


class FunctionRegistry:
    def __init__(self):
        self._records: dict[str, FunctionRecord] = {}
        self._lock = threading.Lock()

    def register(self, name: str, body) -> str:
        """Register ``body`` (callable or ``"module:attr"``); same name and body give the same id."""
        ref, body_hash = _body_reference(body)
        digest = hashlib.sha256(f"{name}\0{body_hash}".encode()).digest()
        function_id = str(uuid.UUID(bytes=digest[:16]))
        with self._lock:
            if function_id not in self._records:
                self._records[function_id] = FunctionRecord(function_id, name, ref, body_hash, time.time())
        return function_id

    def get(self, function_id) -> FunctionRecord:
        with self._lock:
            try:
                return self._records[function_id]
            except KeyError:
                raise UnknownFunctionError(f"unknown function id {function_id!r}") from None

    def lookup(self, name_or_id) -> FunctionRecord:
        """Find by id, else by the most recently registered function with that name."""
        with self._lock:
            if name_or_id in self._records:
                return self._records[name_or_id]
            named = [r for r in self._records.values() if r.name == name_or_id]
        if not named:
            raise UnknownFunctionError(f"no function registered as {name_or_id!r}")
        return max(named, key=lambda r: r.registered_at)

    def resolve(self, function_id) -> Callable:
        return resolve_body(self.get(function_id).body)


# -- scheduler model -------------------------------------------------------

class QueueDelayModel:
    """Batch-queue wait before a requested node becomes active."""

    def __init__(self, kind="constant", value=0.0, seed=0):
        if kind not in ("constant", "exponential"):
            raise ValueError(f"unknown queue delay model {kind!r}")
        if value < 0:
            raise ValueError("queue delay must be >= 0")
        self.kind = kind
        self.value = float(value)
        self._rng = random.Random(seed)
        self._lock = threading.Lock()

    @classmethod
    def parse(cls, text: str, seed=0) -> "QueueDelayModel":
        """``"constant:2"``, ``"exponential:1.5"`` or a bare number of seconds."""
        kind, _, value = str(text).partition(":")
        if not value:
            return cls("constant", float(kind), seed)
        return cls(kind, float(value), seed)

    def sample(self) -> float:
        if self.kind == "constant" or self.value == 0:
            return self.value
        with self._lock:
            return self._rng.expovariate(1.0 / self.value)

    def __repr__(self):
        return f"{self.kind}:{self.value:g}"


@dataclass
class NodeAllocation:
    node_id: str
    slots: int
    state: str = "queued"
    queue_delay: float = 0.0
    requested: float = 0.0
    activated: float | None = None
    released: float | None = None
    demand_at_request: int = 0
    capacity_at_request: int = 0


@dataclass
class TaskContext:
    task_id: str
    node_id: str
    slots: list[str]


@dataclass
class TaskRecord:
    task_id: str
    function_id: str
    args: dict
    slots_required: int = 1
    state: str = "queued"
    slots: list[str] = field(default_factory=list)  # assigned; held only while running
    node_id: str | None = None
    queued_at: float = 0.0
    started: float | None = None
    finished: float | None = None
    result: Any = None
    error: str | None = None
    meta: dict = field(default_factory=dict)
    done: threading.Event = field(default_factory=threading.Event, repr=False, compare=False)

    def to_dict(self):
        return {
            "task_id": self.task_id,
            "function_id": self.function_id,
            "slots_required": self.slots_required,
            "state": self.state,
            "slots": list(self.slots),
            "node_id": self.node_id,
            "queued_at": self.queued_at,
            "started": self.started,
            "finished": self.finished,
            "error": self.error,
            **({"meta": self.meta} if self.meta else {}),
        }


def _call(fn, args, context):
    try:
        params = inspect.signature(fn).parameters
    except (TypeError, ValueError):
        params = {}
    if "context" in params:
        return fn(**args, context=context)
    return fn(**args)


class ComputeEndpoint:
    """Task queue, node allocation and worker daemons over one slot file."""

    def __init__(self, workdir, slots_per_node=8, max_nodes=8, queue_delay=None,
                 registry: FunctionRegistry | None = None, slot_file=None,
                 journal: EventLog | None = None):
        if slots_per_node < 1 or max_nodes < 1:
            raise ValueError("slots_per_node and max_nodes must be >= 1")
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.slots_per_node = int(slots_per_node)
        self.max_nodes = int(max_nodes)
        self.queue_delay = queue_delay if queue_delay is not None else QueueDelayModel()
        self.registry = registry or FunctionRegistry()
        self.slot_file = SlotFile(slot_file or self.workdir / "availgpus")
        self.slot_file.initialize()
        self.journal = journal
        self.nodes: list[NodeAllocation] = []
        self.tasks: dict[str, TaskRecord] = {}
        self.denied_allocations = 0
        self._queue: queue.Queue[str] = queue.Queue()
        self._lock = threading.RLock()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._node_ids = itertools.count()

    # -- public API

    def register_function(self, name, body) -> str:
        return self.registry.register(name, body)

    def invoke(self, function_id, args=None, slots_required=1, meta=None) -> str:
        self.registry.get(function_id)
        if slots_required < 1 or slots_required > self.slots_per_node:
            raise TaskRejected(
                f"task needs {slots_required} slots; nodes have {self.slots_per_node} "
                "and a task must fit on one node"
            )
        if self._stop.is_set():
            raise TaskRejected("endpoint is shut down")
        task = TaskRecord(uuid.uuid4().hex, function_id, dict(args or {}), int(slots_required),
                          queued_at=time.time(), meta=dict(meta or {}))
        with self._lock:
            self.tasks[task.task_id] = task
            self._ensure_capacity()
        self._queue.put(task.task_id)
        return task.task_id

    def wait(self, task_id, timeout=None) -> TaskRecord:
        task = self.task(task_id)
        if not task.done.wait(timeout):
            raise TimeoutError(f"task {task_id} did not finish within {timeout}s")
        return task

    def task(self, task_id) -> TaskRecord:
        with self._lock:
            try:
                return self.tasks[task_id]
            except KeyError:
                raise KeyError(f"unknown task id {task_id!r}") from None

    def demand(self) -> int:
        with self._lock:
            return sum(t.slots_required for t in self.tasks.values() if t.state in ("queued", "running"))

    def capacity(self) -> int:
        with self._lock:
            return self.slots_per_node * sum(1 for n in self.nodes if n.state in ("queued", "active"))

    def allocate_node(self) -> NodeAllocation | None:
        """Request one node from the simulated scheduler; None when at the node cap."""
        with self._lock:
            held = [n for n in self.nodes if n.state in ("queued", "active")]
            if len(held) >= self.max_nodes:
                self.denied_allocations += 1
                log.info("node allocation denied: %d/%d nodes held", len(held), self.max_nodes)
                self._emit({"event": "node_denied", "time": time.time(), "held": len(held)})
                return None
            node = NodeAllocation(
                node_id=f"node{next(self._node_ids)}",
                slots=self.slots_per_node,
                queue_delay=self.queue_delay.sample(),
                requested=time.time(),
                demand_at_request=self.demand(),
                capacity_at_request=self.capacity(),
            )
            self.nodes.append(node)
        t = threading.Thread(target=self._activate, args=(node,), name=f"{node.node_id}-boot", daemon=True)
        self._threads.append(t)
        t.start()
        return node

    def shutdown(self, wait=True):
        """Stop workers, fail unstarted tasks and release every node."""
        self._stop.set()
        if wait:
            for t in list(self._threads):
                if t is not threading.current_thread():
                    t.join()
        with self._lock:
            for task in self.tasks.values():
                if task.state == "queued":
                    task.state = "failed"
                    task.error = "endpoint shut down before the task ran"
                    task.finished = time.time()
                    task.done.set()
            for node in self.nodes:
                if node.state in ("queued", "active"):
                    if node.state == "active":
                        self.slot_file.remove_node(node.node_id, force=True)
                    node.state = "released"
                    node.released = time.time()
                    self._emit({"event": "node", "node_id": node.node_id, "state": "released",
                                "time": node.released})

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()

    # -- internals

    def _emit(self, record):
        if self.journal is not None:
            self.journal.write(record)

    def _ensure_capacity(self):
        # one node per request, and only once current capacity is exhausted
        while self.demand() > self.capacity():
            if self.allocate_node() is None:
                break

    def _activate(self, node: NodeAllocation):
        if node.queue_delay > 0 and self._stop.wait(node.queue_delay):
            return
        if self._stop.is_set():
            return
        with self._lock:
            self.slot_file.add_node(node.node_id, node.slots)
            node.state = "active"
            node.activated = time.time()
            self._emit({"event": "node", "node_id": node.node_id, "state": "active",
                        "requested": node.requested, "activated": node.activated,
                        "queue_delay": node.queue_delay, "slots": node.slots})
            for i in range(node.slots):
                t = threading.Thread(target=self.run_worker, args=(node,), daemon=True,
                                     name=f"{node.node_id}-worker{i}")
                self._threads.append(t)
                t.start()

    def run_worker(self, node: NodeAllocation):
        """Worker daemon loop: dequeue, claim slots, execute, release."""
        while not self._stop.is_set():
            try:
                task_id = self._queue.get(timeout=0.05)
            except queue.Empty:
                continue
            task = self.task(task_id)
            try:
                slots = self.slot_file.acquire(task.task_id, task.slots_required, node_id=node.node_id,
                                               stop=self._stop)
            except SlotTimeout:
                self._queue.put(task_id)
                return
            with self._lock:
                task.state = "running"
                task.slots = slots
                task.node_id = node.node_id
                task.started = time.time()
            try:
                fn = self.registry.resolve(task.function_id)
                result = _call(fn, task.args, TaskContext(task.task_id, node.node_id, list(slots)))
                state, error = "done", None
            except Exception as exc:  # function bodies are user code
                log.warning("task %s failed: %s", task.task_id, exc)
                result, state, error = None, "failed", f"{type(exc).__name__}: {exc}"
            finally:
                self.slot_file.release(task.task_id)
            with self._lock:
                task.result = result
                task.error = error
                task.finished = time.time()
                task.state = state
            self._emit({"event": "task", **task.to_dict()})
            task.done.set()
