"""Concurrent executor for flow runs.

Runs execute on a bounded thread pool; states inside a run are strictly
sequential. Every attempt of every state is appended to the run's
``state_log`` and, when a journal directory is set, to a per-run JSON-lines
journal.
"""

from __future__ import annotations

import json
import logging
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Protocol

from .definition import END, FlowDefinition, TemplateError, render

log = logging.getLogger(__name__)

DEFAULT_MAX_CONCURRENT_RUNS = 64

SUCCESS = "success"
RETRYABLE = "retryable-failure"
FATAL = "fatal"


class RetryableActionError(RuntimeError):
    pass


class ActionTimeout(RetryableActionError, TimeoutError):
    pass


class FatalActionError(RuntimeError):
    pass


@dataclass
class ActionResult:
    output: dict = field(default_factory=dict)


class ActionProvider(Protocol):
    def invoke(self, parameters: dict, attempt_id: str, timeout: float) -> ActionResult:
        ...


@dataclass
class StateRecord:
    state: str
    action_type: str
    attempt: int
    attempt_id: str
    started: float
    finished: float
    outcome: str
    next: str | None = None
    output: Any = None
    error: str | None = None

    @property
    def duration(self):
        return self.finished - self.started


@dataclass
class FlowRun:
    run_id: str
    definition_id: str
    input: dict
    state_log: list[StateRecord] = field(default_factory=list)
    status: str = "running"
    started: float = 0.0
    finished: float | None = None
    error: str | None = None
    outputs: dict = field(default_factory=dict)
    done: threading.Event = field(default_factory=threading.Event, repr=False, compare=False)

    @property
    def terminal(self):
        return self.status in ("succeeded", "failed")


class FlowEngine:
    def __init__(self, providers: dict[str, ActionProvider], journal_dir=None,
                 max_concurrent_runs=DEFAULT_MAX_CONCURRENT_RUNS):
        self.providers = dict(providers)
        self.journal_dir = Path(journal_dir) if journal_dir is not None else None
        if self.journal_dir is not None:
            self.journal_dir.mkdir(parents=True, exist_ok=True)
        self.max_concurrent_runs = int(max_concurrent_runs)
        self._pool = ThreadPoolExecutor(max_workers=self.max_concurrent_runs, thread_name_prefix="flow")
        self._runs: dict[str, FlowRun] = {}
        self._lock = threading.Lock()
        self._cancel = threading.Event()

    # -- journal

    def journal_path(self, run_id) -> Path | None:
        return None if self.journal_dir is None else self.journal_dir / f"{run_id}.jsonl"

    def _journal(self, run: FlowRun, record: dict):
        path = self.journal_path(run.run_id)
        if path is None:
            return
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"run_id": run.run_id, **record}, sort_keys=True, default=str) + "\n")

    # -- runs

    def start_run(self, definition: FlowDefinition, input: dict) -> FlowRun:
        run = FlowRun(uuid.uuid4().hex, definition.id, dict(input), started=time.time())
        with self._lock:
            self._runs[run.run_id] = run
        self._journal(run, {"event": "run_started", "flow_id": definition.id, "time": run.started,
                            "input": run.input})
        try:
            run.input = definition.resolve_input(run.input)
        except TemplateError as exc:
            self._finish(run, "failed", str(exc))
            return run
        self._pool.submit(self._execute, definition, run)
        return run

    def await_run(self, run_id, timeout=None) -> FlowRun:
        run = self.get_run(run_id)
        if not run.done.wait(timeout):
            raise TimeoutError(f"run {run_id} still running after {timeout}s")
        return run

    def get_run(self, run_id) -> FlowRun:
        with self._lock:
            try:
                return self._runs[run_id]
            except KeyError:
                raise KeyError(f"unknown run id {run_id!r}") from None

    def runs(self) -> list[FlowRun]:
        with self._lock:
            return list(self._runs.values())

    def cancel(self):
        """Stop dispatching new states; in-flight attempts finish first."""
        self._cancel.set()

    def shutdown(self, wait=True):
        self._pool.shutdown(wait=wait)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        if exc[0] is not None:
            self.cancel()
        self.shutdown()

    # -- execution

    def _finish(self, run: FlowRun, status, error=None):
        run.status = status
        run.error = error
        run.finished = time.time()
        self._journal(run, {"event": "run_finished", "status": status, "time": run.finished, "error": error})
        run.done.set()

    def _execute(self, definition: FlowDefinition, run: FlowRun):
        try:
            name = definition.start_state
            while name != END:
                if self._cancel.is_set():
                    self._finish(run, "failed", "cancelled")
                    return
                outcome = self.execute_state(run, definition, name)
                if outcome != SUCCESS:
                    self._finish(run, "failed", f"state {name!r} ended with {outcome}: {run.state_log[-1].error}")
                    return
                name = definition.states[name].next
            self._finish(run, "succeeded")
        except Exception as exc:  # never let one run take the pool down
            log.exception("run %s crashed", run.run_id)
            self._finish(run, "failed", f"engine error: {exc}")

    def execute_state(self, run: FlowRun, definition: FlowDefinition, name: str) -> str:
        """Dispatch one state, retrying retryable failures up to ``retries`` times."""
        state = definition.states[name]
        provider = self.providers.get(state.action_type)
        context = {"input": run.input, "states": run.outputs}
        outcome = FATAL
        for attempt in range(1, state.retries + 2):
            attempt_id = f"{run.run_id}:{name}:{attempt}"
            started = time.time()
            output, error = None, None
            try:
                if provider is None:
                    raise FatalActionError(f"no provider registered for action type {state.action_type!r}")
                params = render(state.parameters, context)
                result = provider.invoke(params, attempt_id, state.timeout)
                output = result.output
                outcome = SUCCESS
            except (TemplateError, FatalActionError) as exc:
                outcome, error = FATAL, str(exc)
            except Exception as exc:
                outcome, error = RETRYABLE, f"{type(exc).__name__}: {exc}"
            record = StateRecord(name, state.action_type, attempt, attempt_id, started, time.time(), outcome,
                                 next=state.next if outcome == SUCCESS else None, output=output, error=error)
            run.state_log.append(record)
            self._journal(run, {"event": "state", **asdict(record)})
            if outcome == SUCCESS:
                run.outputs[name] = {"output": output}
                return outcome
            if outcome == FATAL or self._cancel.is_set():
                return outcome
            log.info("run %s state %s attempt %d failed: %s", run.run_id, name, attempt, error)
        return outcome
