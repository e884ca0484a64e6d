"""Action providers backing the ``transfer`` and ``compute`` flow states."""

from __future__ import annotations

import threading
from pathlib import Path

from ..compute.endpoint import ComputeEndpoint, TaskRejected, UnknownFunctionError
from ..facility import Deployment, EventLog, extract_scan_id, prepare_remote_dirs, transfer
from .engine import ActionResult, ActionTimeout, FatalActionError, RetryableActionError


class TransferProvider:
    """Directory transfers between deployment endpoints.

    With ``stage_scan`` the destination is derived from the source folder
    name: ``scan100`` goes to ``input/100`` and ``recon/100`` is created
    alongside it.

    ``fault_hook(parameters, temp_path)`` is called on each staged copy
    before verification; tests use it to inject corruption.
    """

    def __init__(self, deployment: Deployment, token=None, event_log: EventLog | None = None,
                 fault_hook=None):
        self.deployment = deployment
        self.token = token
        self.event_log = event_log
        self.fault_hook = fault_hook

    def invoke(self, parameters, attempt_id, timeout):
        try:
            src_ep = parameters["source_endpoint"]
            src_path = parameters["source_path"]
            dst_ep = parameters["destination_endpoint"]
        except KeyError as exc:
            raise FatalActionError(f"transfer parameters missing {exc}") from None
        output = {}
        if parameters.get("stage_scan"):
            scan_id = extract_scan_id(src_path)
            endpoint = self.deployment.endpoint(dst_ep)
            prepare_remote_dirs(endpoint, scan_id)
            dst_path = f"input/{scan_id}"
            output.update(scan_id=scan_id, input_path=dst_path, recon_path=f"recon/{scan_id}")
        else:
            dst_path = parameters.get("destination_path")
            if not dst_path:
                raise FatalActionError("transfer needs destination_path or stage_scan")
        hook = None
        if self.fault_hook is not None:
            hook = lambda tmp: self.fault_hook(parameters, tmp)  # noqa: E731
        task = transfer(self.deployment, (src_ep, src_path), (dst_ep, dst_path), token=self.token,
                        fault_hook=hook, event_log=self.event_log)
        if not task.succeeded:
            raise RetryableActionError(task.reason)
        if task.finished - task.started > timeout:
            raise ActionTimeout(f"transfer took {task.finished - task.started:.2f}s > {timeout}s")
        output.update(transfer_id=task.task_id, bytes=task.bytes, checksum=task.checksum,
                      algorithm=task.algorithm, destination_path=dst_path,
                      started=task.started, finished=task.finished)
        return ActionResult(output)


class ComputeProvider:
    """Invokes registered functions on a compute endpoint and waits for them.

    A given ``attempt_id`` dispatches at most one task; re-invoking with the
    same id waits on the task already submitted.
    """

    def __init__(self, endpoint: ComputeEndpoint, data_roots: dict[str, Path] | None = None):
        self.endpoint = endpoint
        self.data_roots = {k: Path(v) for k, v in (data_roots or {}).items()}
        self._dispatched: dict[str, str] = {}
        self._lock = threading.Lock()

    def _resolve_args(self, parameters):
        args = dict(parameters.get("args", {}))
        root = self.data_roots.get(parameters.get("endpoint"))
        for key in parameters.get("path_args", []):
            if key in args and root is not None and not Path(args[key]).is_absolute():
                args[key] = str(root / args[key])
        return args

    def invoke(self, parameters, attempt_id, timeout):
        try:
            record = self.endpoint.registry.lookup(parameters["function"])
        except KeyError as exc:
            raise FatalActionError(str(exc)) from None
        with self._lock:
            task_id = self._dispatched.get(attempt_id)
            if task_id is None:
                try:
                    task_id = self.endpoint.invoke(
                        record.function_id, self._resolve_args(parameters),
                        slots_required=int(parameters.get("slots", 1) or 1),
                        meta={"attempt_id": attempt_id, "run_id": attempt_id.split(":")[0]},
                    )
                except (TaskRejected, UnknownFunctionError) as exc:
                    raise FatalActionError(str(exc)) from None
                self._dispatched[attempt_id] = task_id
        try:
            task = self.endpoint.wait(task_id, timeout)
        except TimeoutError as exc:
            raise ActionTimeout(str(exc)) from None
        if task.state != "done":
            raise RetryableActionError(task.error or f"task {task_id} {task.state}")
        return ActionResult({"task_id": task_id, "task": task.to_dict(), "result": task.result})
