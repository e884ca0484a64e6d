"""File-based accelerator slot tracking shared by every worker on an endpoint.

The slot table is a small JSON document rewritten atomically. All reads and
writes happen while holding an exclusive advisory lock on a sibling
``.lock`` file, so the protocol holds across OS processes as well as
threads (each caller opens its own descriptor; ``flock`` locks belong to
the open file description, not the process).
"""

from __future__ import annotations

import contextlib
import fcntl
import json
import logging
import os
import time
from pathlib import Path

log = logging.getLogger(__name__)

VERSION = 1
BACKOFF_STEP = 0.010
BACKOFF_CAP = 0.200


class SlotError(RuntimeError):
    pass


class SlotTimeout(TimeoutError):
    pass


def backoff_delay(attempt: int) -> float:
    return min(BACKOFF_STEP * attempt, BACKOFF_CAP)


def _dump(entries) -> str:
    return json.dumps({"version": VERSION, "slots": entries}, indent=2, sort_keys=True) + "\n"


class SlotFile:
    def __init__(self, path):
        self.path = Path(path)
        self.lock_path = self.path.with_name(self.path.name + ".lock")

    @contextlib.contextmanager
    def locked(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd = os.open(self.lock_path, os.O_RDWR | os.O_CREAT, 0o644)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX)
            try:
                yield
            finally:
                fcntl.flock(fd, fcntl.LOCK_UN)
        finally:
            os.close(fd)

    def _read(self) -> list[dict]:
        try:
            text = self.path.read_text(encoding="utf-8")
        except FileNotFoundError:
            return []
        data = json.loads(text)
        if data.get("version") != VERSION:
            raise SlotError(f"{self.path}: unsupported slot file version {data.get('version')!r}")
        return data["slots"]

    def _write(self, entries):
        tmp = self.path.with_name(f".{self.path.name}.{os.getpid()}.tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(_dump(entries))
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.path)

    def initialize(self):
        with self.locked():
            self._write([])

    def entries(self) -> list[dict]:
        with self.locked():
            return self._read()

    def add_node(self, node_id: str, slots: int) -> list[str]:
        with self.locked():
            entries = self._read()
            if any(e["node_id"] == node_id for e in entries):
                raise SlotError(f"node {node_id!r} already has slot entries")
            new = [{"slot_id": f"{node_id}:{i}", "node_id": node_id, "state": "free", "holder": None}
                   for i in range(slots)]
            self._write(entries + new)
        return [e["slot_id"] for e in new]

    def remove_node(self, node_id: str, force=False):
        with self.locked():
            entries = self._read()
            busy = [e for e in entries if e["node_id"] == node_id and e["state"] == "busy"]
            if busy and not force:
                raise SlotError(f"node {node_id!r} still has {len(busy)} busy slots")
            self._write([e for e in entries if e["node_id"] != node_id])

    def try_acquire(self, task_id: str, n: int, node_id: str | None = None) -> list[str] | None:
        """One locked attempt; all ``n`` slots on a single node, or nothing."""
        if n < 1:
            raise ValueError("must request at least one slot")
        with self.locked():
            entries = self._read()
            if any(e["holder"] == task_id for e in entries):
                raise SlotError(f"task {task_id!r} already holds slots")
            free_by_node: dict[str, list[dict]] = {}
            for e in entries:
                if e["state"] == "free" and (node_id is None or e["node_id"] == node_id):
                    free_by_node.setdefault(e["node_id"], []).append(e)
            for free in free_by_node.values():
                if len(free) >= n:
                    for e in free[:n]:
                        e["state"] = "busy"
                        e["holder"] = task_id
                    self._write(entries)
                    return [e["slot_id"] for e in free[:n]]
        return None

    def acquire(self, task_id: str, n: int, node_id: str | None = None, timeout: float | None = None,
                stop=None) -> list[str]:
        """Block until ``n`` slots on one node are taken for ``task_id``.

        Retries with linear backoff (10 ms per attempt, capped at 200 ms).
        ``stop`` is an optional ``threading.Event`` that aborts the wait.
        """
        deadline = None if timeout is None else time.monotonic() + timeout
        attempt = 0
        while True:
            got = self.try_acquire(task_id, n, node_id)
            if got is not None:
                return got
            attempt += 1
            delay = backoff_delay(attempt)
            if deadline is not None and time.monotonic() + delay > deadline:
                raise SlotTimeout(f"task {task_id!r} could not acquire {n} slots within {timeout}s")
            if stop is not None:
                if stop.wait(delay):
                    raise SlotTimeout(f"task {task_id!r} slot wait aborted")
            else:
                time.sleep(delay)

    def release(self, task_id: str) -> list[str]:
        with self.locked():
            entries = self._read()
            released = []
            for e in entries:
                if e["holder"] == task_id:
                    e["state"] = "free"
                    e["holder"] = None
                    released.append(e["slot_id"])
            if released:
                self._write(entries)
        if not released:
            log.warning("task %s released slots it does not hold", task_id)
        return released

    def repair(self, live_holders=None) -> list[str]:
        """Free busy slots whose holder is not in ``live_holders`` (all, if None)."""
        live = set(live_holders or ())
        with self.locked():
            entries = self._read()
            freed = []
            for e in entries:
                if e["state"] == "busy" and e["holder"] not in live:
                    freed.append(e["slot_id"])
                    e["state"] = "free"
                    e["holder"] = None
            if freed:
                self._write(entries)
        return freed

    def counts(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for e in self.entries():
            c = out.setdefault(e["node_id"], {"free": 0, "busy": 0})
            c[e["state"]] += 1
        return out


def acquire_slots(task_id, n, slot_file: SlotFile, node_id=None, timeout=None) -> list[str]:
    return slot_file.acquire(task_id, n, node_id=node_id, timeout=timeout)


def release_slots(task_id, slot_file: SlotFile) -> list[str]:
    return slot_file.release(task_id)
