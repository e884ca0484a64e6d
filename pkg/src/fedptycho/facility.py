"""Simulated beamline and compute facilities and the link between them.

Both endpoints live on the local filesystem; distance is modeled by
pacing each transfer to ``latency + bytes / bandwidth`` seconds.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import shutil
import threading
import time
import uuid
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator

log = logging.getLogger(__name__)

CHECKSUM_ALGORITHM = "sha256"
ROLES = ("beamline", "compute")
# 1 Gb Ethernet
DEFAULT_BANDWIDTH = 125_000_000.0


class AuthError(PermissionError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class Endpoint:
    id: str
    root: Path
    role: str

    def __post_init__(self):
        self.root = Path(self.root)
        if self.role not in ROLES:
            raise ConfigError(f"endpoint {self.id!r}: role must be one of {ROLES}, got {self.role!r}")
        self.root.mkdir(parents=True, exist_ok=True)
        if not os.access(self.root, os.W_OK):
            raise ConfigError(f"endpoint {self.id!r}: root {self.root} is not writable")

    def path(self, rel) -> Path:
        rel = Path(rel)
        if rel.is_absolute() or ".." in rel.parts:
            raise ValueError(f"endpoint paths must be relative and stay under the root: {rel}")
        return self.root / rel


@dataclass
class LinkModel:
    bandwidth: float = DEFAULT_BANDWIDTH  # bytes/s
    latency: float = 0.0  # s

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ConfigError("link bandwidth must be > 0")
        if self.latency < 0:
            raise ConfigError("link latency must be >= 0")

    def duration(self, nbytes: int) -> float:
        return self.latency + nbytes / self.bandwidth


@dataclass
class TransferTask:
    task_id: str
    src: tuple[str, str]
    dst: tuple[str, str]
    state: str = "pending"
    bytes: int = 0
    started: float | None = None
    finished: float | None = None
    checksum: str | None = None
    dst_checksum: str | None = None
    algorithm: str = CHECKSUM_ALGORITHM
    reason: str | None = None

    @property
    def succeeded(self):
        return self.state == "succeeded"

    def to_dict(self):
        d = asdict(self)
        d["src"] = list(self.src)
        d["dst"] = list(self.dst)
        return d


class EventLog:
    """Append-only JSON-lines log, safe to share between threads."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self.records: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict):
        line = json.dumps(record, sort_keys=True)
        with self._lock:
            self.records.append(record)
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(line + "\n")


@dataclass
class Deployment:
    endpoints: dict[str, Endpoint]
    links: dict[tuple[str, str], LinkModel] = field(default_factory=dict)
    token: str | None = None

    def endpoint(self, endpoint_id) -> Endpoint:
        try:
            return self.endpoints[endpoint_id]
        except KeyError:
            raise ConfigError(f"unknown endpoint {endpoint_id!r}") from None

    def by_role(self, role) -> Endpoint:
        for ep in self.endpoints.values():
            if ep.role == role:
                return ep
        raise ConfigError(f"deployment has no {role} endpoint")

    def link(self, src_id, dst_id) -> LinkModel:
        if (src_id, dst_id) in self.links:
            return self.links[(src_id, dst_id)]
        if (dst_id, src_id) in self.links:
            return self.links[(dst_id, src_id)]
        return LinkModel()

    def check_token(self, token):
        """Static bearer-token check standing in for a real auth service."""
        if self.token is not None and token != self.token:
            raise AuthError("invalid or missing bearer token")

    @classmethod
    def from_dict(cls, data, base_dir=None) -> "Deployment":
        base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
        try:
            eps = {}
            for e in data["endpoints"]:
                if e["id"] in eps:
                    raise ConfigError(f"duplicate endpoint id {e['id']!r}")
                root = Path(e["root"])
                eps[e["id"]] = Endpoint(e["id"], root if root.is_absolute() else base_dir / root, e["role"])
            links = {}
            for link in data.get("links", []):
                for end in (link["src"], link["dst"]):
                    if end not in eps:
                        raise ConfigError(f"link references unknown endpoint {end!r}")
                links[(link["src"], link["dst"])] = LinkModel(
                    float(link.get("bandwidth_bps", DEFAULT_BANDWIDTH)), float(link.get("latency_s", 0.0))
                )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed deployment config: {exc}") from exc
        return cls(eps, links, data.get("token"))

    def to_dict(self):
        return {
            "endpoints": [{"id": e.id, "root": str(e.root), "role": e.role} for e in self.endpoints.values()],
            "links": [
                {"src": s, "dst": d, "bandwidth_bps": m.bandwidth, "latency_s": m.latency}
                for (s, d), m in self.links.items()
            ],
            "token": self.token,
        }

    @classmethod
    def default(cls, root, bandwidth=DEFAULT_BANDWIDTH, latency=0.0, token="desk-token") -> "Deployment":
        root = Path(root)
        return cls(
            {
                "beamline": Endpoint("beamline", root / "beamline", "beamline"),
                "compute": Endpoint("compute", root / "compute", "compute"),
            },
            {("beamline", "compute"): LinkModel(bandwidth, latency)},
            token,
        )


def load_deployment(path) -> Deployment:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read deployment config {path}: {exc}") from exc
    return Deployment.from_dict(data, base_dir=path.parent)


def tree_checksum(path) -> tuple[str, int]:
    """Digest and byte count of a file or directory tree.

    Directories hash each file's relative path and contents in sorted
    path order, so renames are detected as well as content changes.
    """
    path = Path(path)
    digest = hashlib.sha256()
    total = 0
    if path.is_file():
        files = [(path.name, path)]
    else:
        files = sorted(
            ((p.relative_to(path).as_posix(), p) for p in path.rglob("*") if p.is_file()),
            key=lambda item: item[0],
        )
    for rel, p in files:
        digest.update(rel.encode("utf-8") + b"\0")
        with open(p, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                digest.update(chunk)
                total += len(chunk)
        digest.update(b"\0")
    return digest.hexdigest(), total


def _copy(src: Path, dst: Path):
    if src.is_dir():
        shutil.copytree(src, dst)
    else:
        dst.parent.mkdir(parents=True, exist_ok=True)
        shutil.copy2(src, dst)


def _remove(path: Path):
    if path.is_dir() and not path.is_symlink():
        shutil.rmtree(path)
    elif path.exists():
        path.unlink()


def transfer(deployment: Deployment, src, dst, link: LinkModel | None = None, token=None,
             fault_hook: Callable[[Path], None] | None = None,
             event_log: EventLog | None = None) -> TransferTask:
    """Copy ``src`` to ``dst`` (each an ``(endpoint_id, relative_path)`` pair).

    The copy lands under a temporary name, is checksum-verified, and only
    then replaces ``dst``; a retry simply overwrites. ``fault_hook`` runs on
    the temporary copy before verification.
    """
    task = TransferTask(uuid.uuid4().hex, tuple(src), tuple(dst))
    task.started = time.time()
    t0 = time.monotonic()
    task.state = "active"
    try:
        deployment.check_token(token)
        src_ep, dst_ep = deployment.endpoint(src[0]), deployment.endpoint(dst[0])
        link = link or deployment.link(src_ep.id, dst_ep.id)
        src_path, dst_path = src_ep.path(src[1]), dst_ep.path(dst[1])
        if not src_path.exists():
            raise FileNotFoundError(f"source {src[0]}:{src[1]} does not exist")
        task.checksum, task.bytes = tree_checksum(src_path)
        dst_path.parent.mkdir(parents=True, exist_ok=True)
        tmp = dst_path.parent / f".{dst_path.name}.partial-{task.task_id[:8]}"
        try:
            _copy(src_path, tmp)
            if fault_hook is not None:
                fault_hook(tmp)
            task.dst_checksum, _ = tree_checksum(tmp)
            if task.dst_checksum != task.checksum:
                raise IOError(
                    f"checksum mismatch for {dst[0]}:{dst[1]} "
                    f"({task.algorithm} {task.checksum[:12]} != {task.dst_checksum[:12]})"
                )
            _remove(dst_path)
            os.replace(tmp, dst_path)
        finally:
            if tmp.exists():
                _remove(tmp)
        remaining = link.duration(task.bytes) - (time.monotonic() - t0)
        if remaining > 0:
            time.sleep(remaining)
        task.state = "succeeded"
    except (OSError, AuthError, ConfigError, ValueError) as exc:
        task.state = "failed"
        task.reason = str(exc)
        log.warning("transfer %s -> %s failed: %s", src, dst, exc)
    task.finished = time.time()
    if event_log is not None:
        event_log.write({"event": "transfer", **task.to_dict()})
    return task


_SCAN_ID = re.compile(r"(\d+)$")


def extract_scan_id(folder_name) -> str:
    """``scan100`` / ``flyscan100`` -> ``"100"``; digits are kept verbatim."""
    name = Path(str(folder_name)).name
    m = _SCAN_ID.search(name)
    if not m:
        raise ValueError(f"folder name {folder_name!r} has no trailing scan id digits")
    return m.group(1)


def prepare_remote_dirs(endpoint: Endpoint, scan_id: str) -> tuple[Path, Path]:
    input_dir = endpoint.path(Path("input") / scan_id)
    recon_dir = endpoint.path(Path("recon") / scan_id)
    try:
        input_dir.mkdir(parents=True, exist_ok=True)
        recon_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create scan directories on endpoint {endpoint.id!r}: {exc}") from exc
    return input_dir, recon_dir


@dataclass
class ReplayEvent:
    scan: str
    path: Path
    time: float


def replay_acquisition(dataset_root, beamline: Endpoint, interval: float = 0.0, views=None,
                       event_log: EventLog | None = None) -> Iterator[ReplayEvent]:
    """Publish pre-generated views into the beamline root one at a time.

    ``views`` is a count (``scan1..scanN``), a list of folder names, or
    None for every ``scan*`` folder. Each view is copied under a hidden
    name and renamed into place, so consumers never see a partial scan.
    """
    dataset_root = Path(dataset_root)
    if views is None:
        names = sorted((p.name for p in dataset_root.iterdir() if p.is_dir() and _SCAN_ID.search(p.name)),
                       key=lambda n: (int(extract_scan_id(n)), n))
    elif isinstance(views, int):
        names = [f"scan{k}" for k in range(1, views + 1)]
    else:
        names = list(views)
    missing = [n for n in names if not (dataset_root / n / "meta.json").is_file()]
    if missing:
        raise FileNotFoundError(f"missing source views under {dataset_root}: {', '.join(missing)}")
    for i, name in enumerate(names):
        if i and interval > 0:
            time.sleep(interval)
        final = beamline.root / name
        tmp = beamline.root / f".{name}.acquiring"
        if tmp.exists():
            _remove(tmp)
        shutil.copytree(dataset_root / name, tmp)
        if final.exists():
            _remove(final)
        os.replace(tmp, final)
        event = ReplayEvent(name, final, time.time())
        if event_log is not None:
            event_log.write({"event": "replay", "scan": name, "path": str(final), "time": event.time})
        yield event
