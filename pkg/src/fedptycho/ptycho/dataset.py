"""Scan geometry, diffraction datasets and the on-disk view container."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class ShapeError(ValueError):
    pass


class PositionBoundsError(IndexError):
    pass


class DatasetFormatError(ValueError):
    pass


def as_field(data, name="field") -> np.ndarray:
    """Coerce to a finite 2D complex128 array."""
    arr = np.asarray(data, dtype=np.complex128)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass
class ScanPositions:
    """Integer top-left probe offsets in object pixel coordinates."""

    y: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        self.x = np.asarray(self.x, dtype=np.int64).reshape(-1)
        if self.y.shape != self.x.shape:
            raise ShapeError("y and x must have the same length")

    @property
    def count(self) -> int:
        return int(self.y.size)

    def __len__(self):
        return self.count

    def subset(self, index) -> "ScanPositions":
        index = np.asarray(index, dtype=np.int64)
        return ScanPositions(self.y[index], self.x[index])

    def check_bounds(self, object_shape, probe_shape):
        max_y = object_shape[0] - probe_shape[0]
        max_x = object_shape[1] - probe_shape[1]
        bad = (self.y < 0) | (self.y > max_y) | (self.x < 0) | (self.x > max_x)
        if np.any(bad):
            j = int(np.flatnonzero(bad)[0])
            raise PositionBoundsError(
                f"scan position {j} at (y={self.y[j]}, x={self.x[j]}) does not "
                f"fit a {tuple(probe_shape)} probe inside a {tuple(object_shape)} object"
            )


@dataclass
class ScanDataset:
    positions: ScanPositions
    frames: np.ndarray
    probe_shape: tuple[int, int]
    object_shape: tuple[int, int]
    view_id: str = ""
    photon_scale: float = 1.0
    noise: str = "none"
    seed: int = 0
    kind: str | None = None
    probe: np.ndarray | None = None
    truth_object: np.ndarray | None = None
    extra_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.probe_shape = tuple(int(v) for v in self.probe_shape)
        self.object_shape = tuple(int(v) for v in self.object_shape)
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.validate()

    @property
    def count(self) -> int:
        return self.positions.count

    def validate(self):
        if self.frames.ndim != 3 or self.frames.shape[1:] != self.probe_shape:
            raise ShapeError(
                f"frames shape {self.frames.shape} does not match "
                f"(count, {self.probe_shape[0]}, {self.probe_shape[1]})"
            )
        if self.frames.shape[0] != self.positions.count:
            raise ShapeError(
                f"{self.frames.shape[0]} frames but {self.positions.count} positions"
            )
        if np.any(self.frames < 0) or not np.all(np.isfinite(self.frames)):
            raise ValueError("frames must be finite and non-negative")
        self.positions.check_bounds(self.object_shape, self.probe_shape)

    def normalized(self) -> "ScanDataset":
        """Copy with frames divided by ``photon_scale`` (unit-scale model)."""
        if self.photon_scale in (0, 1):
            return self
        return ScanDataset(
            positions=self.positions,
            frames=self.frames / self.photon_scale,
            probe_shape=self.probe_shape,
            object_shape=self.object_shape,
            view_id=self.view_id,
            photon_scale=1.0,
            noise=self.noise,
            seed=self.seed,
            kind=self.kind,
            probe=self.probe,
            truth_object=self.truth_object,
            extra_meta=dict(self.extra_meta),
        )


def _write_complex(path: Path, arr: np.ndarray):
    arr = np.ascontiguousarray(arr, dtype=np.complex128)
    out = np.empty(arr.shape + (2,), dtype="<f8")
    out[..., 0] = arr.real
    out[..., 1] = arr.imag
    path.write_bytes(out.tobytes())


def read_complex(path, shape) -> np.ndarray:
    raw = np.frombuffer(Path(path).read_bytes(), dtype="<f8")
    expected = int(np.prod(shape)) * 2
    if raw.size != expected:
        raise DatasetFormatError(f"{path}: expected {expected} float64 values, got {raw.size}")
    raw = raw.reshape(tuple(shape) + (2,))
    return (raw[..., 0] + 1j * raw[..., 1]).astype(np.complex128)


def write_complex(path, arr):
    _write_complex(Path(path), arr)


def save_dataset(dataset: ScanDataset, directory) -> Path:
    """Write ``dataset`` as a view container directory.

    Layout: ``meta.json``, ``positions.bin`` (int32 y,x pairs), ``frames.bin``
    (float32, frame-major), plus ``probe.bin`` / ``truth_object.bin``
    (float64 re,im interleaved) when present. ``meta.json`` is written last
    so a directory with metadata is always complete.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pos = np.empty((dataset.count, 2), dtype="<i4")
    pos[:, 0] = dataset.positions.y
    pos[:, 1] = dataset.positions.x
    (directory / "positions.bin").write_bytes(pos.tobytes())
    (directory / "frames.bin").write_bytes(
        np.ascontiguousarray(dataset.frames, dtype="<f4").tobytes()
    )
    if dataset.probe is not None:
        _write_complex(directory / "probe.bin", dataset.probe)
    if dataset.truth_object is not None:
        _write_complex(directory / "truth_object.bin", dataset.truth_object)
    meta = {
        "format_version": FORMAT_VERSION,
        "view_id": dataset.view_id,
        "object_shape": list(dataset.object_shape),
        "probe_shape": list(dataset.probe_shape),
        "count": dataset.count,
        "photon_scale": dataset.photon_scale,
        "noise": dataset.noise,
        "seed": dataset.seed,
    }
    if dataset.kind is not None:
        meta["kind"] = dataset.kind
    meta.update(dataset.extra_meta)
    tmp = directory / ".meta.json.tmp"
    tmp.write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    os.replace(tmp, directory / "meta.json")
    return directory


def load_dataset(directory) -> ScanDataset:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.is_file():
        raise DatasetFormatError(f"{directory}: missing meta.json")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{meta_path}: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(
            f"{meta_path}: unsupported format_version {meta.get('format_version')!r}"
        )
    count = int(meta["count"])
    probe_shape = tuple(int(v) for v in meta["probe_shape"])
    object_shape = tuple(int(v) for v in meta["object_shape"])

    pos = np.frombuffer((directory / "positions.bin").read_bytes(), dtype="<i4")
    if pos.size != 2 * count:
        raise DatasetFormatError(f"{directory}: positions.bin holds {pos.size // 2} pairs, meta says {count}")
    pos = pos.reshape(count, 2)
    frames = np.frombuffer((directory / "frames.bin").read_bytes(), dtype="<f4")
    if frames.size != count * probe_shape[0] * probe_shape[1]:
        raise DatasetFormatError(f"{directory}: frames.bin size does not match meta.json")
    frames = frames.reshape((count,) + probe_shape).astype(np.float64)

    probe = truth = None
    if (directory / "probe.bin").exists():
        probe = read_complex(directory / "probe.bin", probe_shape)
    if (directory / "truth_object.bin").exists():
        truth = read_complex(directory / "truth_object.bin", object_shape)

    known = {"format_version", "view_id", "object_shape", "probe_shape", "count",
             "photon_scale", "noise", "seed", "kind"}
    return ScanDataset(
        positions=ScanPositions(pos[:, 0], pos[:, 1]),
        frames=frames,
        probe_shape=probe_shape,
        object_shape=object_shape,
        view_id=str(meta.get("view_id", directory.name)),
        photon_scale=float(meta.get("photon_scale", 1.0)),
        noise=str(meta.get("noise", "none")),
        seed=int(meta.get("seed", 0)),
        kind=meta.get("kind"),
        probe=probe,
        truth_object=truth,
        extra_meta={k: v for k, v in meta.items() if k not in known},
    )
