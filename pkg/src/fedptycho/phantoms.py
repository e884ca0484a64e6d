"""Synthetic objects, probes, raster scans and multi-view experiments."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .ptycho.dataset import ScanPositions, save_dataset
from .ptycho.operators import simulate_diffraction

log = logging.getLogger(__name__)

KINDS = ("siemens-star", "coin", "catalyst", "flat")


@dataclass
class PhantomSpec:
    kind: str = "siemens-star"
    object_shape: tuple[int, int] = (64, 64)
    probe_shape: tuple[int, int] = (16, 16)
    step: int = 8
    views: int = 1
    photon_scale: float = 1.0
    noise: str = "none"
    seed: int = 0

    def __post_init__(self):
        self.object_shape = tuple(int(v) for v in self.object_shape)
        self.probe_shape = tuple(int(v) for v in self.probe_shape)
        if self.kind not in KINDS:
            raise ValueError(f"unknown phantom kind {self.kind!r}; expected one of {KINDS}")
        if self.views < 1:
            raise ValueError("views must be >= 1")
        if self.step <= 0:
            raise ValueError("step must be > 0")
        if self.step > min(self.probe_shape):
            raise ValueError(
                f"step {self.step} exceeds probe size {min(self.probe_shape)}; "
                "consecutive probe footprints would not overlap"
            )
        if any(p > o for p, o in zip(self.probe_shape, self.object_shape)):
            raise ValueError(f"probe {self.probe_shape} larger than object {self.object_shape}")
        if self.noise not in ("none", "poisson"):
            raise ValueError(f"unknown noise model {self.noise!r}")
        if self.photon_scale < 0:
            raise ValueError("photon_scale must be >= 0")

    def to_dict(self):
        d = asdict(self)
        d["object_shape"] = list(self.object_shape)
        d["probe_shape"] = list(self.probe_shape)
        return d


# Reduced-scale stand-ins for the four evaluation datasets. Position counts
# keep the 1:2:4 ratio of the synthetic sets; the catalyst keeps the
# (views, patterns, H, W) structure with 64 patterns of 32x32 per view.
PRESETS = {
    "catalyst": dict(kind="catalyst", object_shape=(144, 144), probe_shape=(32, 32), step=16, views=8),
    "coin-8k": dict(kind="coin", object_shape=(88, 88), probe_shape=(32, 32), step=8, views=1),
    "coin-16k": dict(kind="coin", object_shape=(88, 152), probe_shape=(32, 32), step=8, views=1),
    "siemens-star": dict(kind="siemens-star", object_shape=(152, 152), probe_shape=(32, 32), step=8, views=1),
}


def preset(name: str, **overrides) -> PhantomSpec:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    params = dict(PRESETS[name])
    params.update(overrides)
    return PhantomSpec(**params)


def _polar(shape, center=None):
    h, w = shape
    cy, cx = center if center is not None else ((h - 1) / 2, (w - 1) / 2)
    yy, xx = np.mgrid[0:h, 0:w]
    return np.hypot(yy - cy, xx - cx), np.arctan2(yy - cy, xx - cx)


def _transmission(feature, max_phase=np.pi / 3):
    """Map a feature map in [0, 1] to magnitude in [0.5, 1] and phase in [0, max_phase]."""
    feature = np.clip(feature, 0.0, 1.0)
    return (1.0 - 0.5 * feature) * np.exp(1j * max_phase * feature)


def make_object(kind: str, object_shape, seed: int = 0) -> np.ndarray:
    """Complex transmission function with |t| in [0.5, 1] and arg(t) in [-pi/2, pi/2]."""
    h, w = (int(v) for v in object_shape)
    if h < 8 or w < 8:
        raise ValueError(f"object must be at least 8x8, got {h}x{w}")
    if kind == "flat":
        return np.ones((h, w), dtype=np.complex128)
    rng = np.random.default_rng(seed)
    radius = 0.45 * min(h, w)
    r, theta = _polar((h, w))
    if kind == "siemens-star":
        spokes = 16
        feature = ((np.sin(spokes * theta) > 0) & (r < radius)).astype(float)
    elif kind == "coin":
        r, _ = _polar((h, w), ((h - 1) / 2 + rng.uniform(-1, 1), (w - 1) / 2 + rng.uniform(-1, 1)))
        feature = np.where(r < radius, 0.4, 0.0)
        ring_width = max(1.0, 0.04 * min(h, w))
        for frac in (0.3, 0.55, 0.8):
            ring_r = frac * radius * rng.uniform(0.95, 1.05)
            feature = np.where(np.abs(r - ring_r) < ring_width / 2, 1.0, feature)
    elif kind == "catalyst":
        texture = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=max(1.0, min(h, w) / 24))
        texture = (texture - texture.min()) / max(np.ptp(texture), 1e-12)
        edge = np.clip((radius - r) / 2.0, 0.0, 1.0)
        feature = edge * (0.3 + 0.7 * texture)
    else:
        raise ValueError(f"unknown phantom kind {kind!r}; expected one of {KINDS}")
    return _transmission(feature).astype(np.complex128)


def make_probe(probe_shape, seed: int = 0) -> np.ndarray:
    """Centered Gaussian disk with quadratic phase, normalized to unit power."""
    h, w = (int(v) for v in probe_shape)
    yy, xx = np.mgrid[0:h, 0:w]
    r2 = ((yy - h // 2) / h) ** 2 + ((xx - w // 2) / w) ** 2
    rng = np.random.default_rng(seed)
    curvature = rng.uniform(2.0, 4.0)
    mag = np.exp(-r2 / (2 * 0.5 ** 2)) * (r2 <= 0.45 ** 2)
    probe = mag * np.exp(1j * curvature * np.pi * r2)
    return probe / np.sqrt(np.sum(np.abs(probe) ** 2))


def raster_positions(object_shape, probe_shape, step) -> ScanPositions:
    step = int(step)
    if step <= 0:
        raise ValueError("step must be > 0")
    span_y = object_shape[0] - probe_shape[0]
    span_x = object_shape[1] - probe_shape[1]
    if span_y < 0 or span_x < 0:
        raise ValueError(f"probe {tuple(probe_shape)} does not fit in object {tuple(object_shape)}")
    ys = np.arange(0, span_y + 1, step)
    xs = np.arange(0, span_x + 1, step)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ScanPositions(yy.ravel(), xx.ravel())


def coverage(positions: ScanPositions, object_shape, probe_shape) -> np.ndarray:
    """Number of probe footprints covering each object pixel."""
    count = np.zeros(object_shape, dtype=np.int64)
    h, w = probe_shape
    for y, x in zip(positions.y, positions.x):
        count[y:y + h, x:x + w] += 1
    return count


def generate_experiment(spec: PhantomSpec, out_dir) -> list[Path]:
    """Write ``scan1 .. scan<views>`` view directories under ``out_dir``.

    All views share the object and probe; view ``k`` draws its noise from
    ``seed + k``.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    obj = make_object(spec.kind, spec.object_shape, spec.seed)
    probe = make_probe(spec.probe_shape, spec.seed)
    positions = raster_positions(spec.object_shape, spec.probe_shape, spec.step)
    views = []
    for k in range(1, spec.views + 1):
        ds = simulate_diffraction(obj, probe, positions, spec.photon_scale, spec.noise,
                                  seed=spec.seed + k, view_id=f"scan{k}")
        ds.kind = spec.kind
        ds.probe = probe
        ds.truth_object = obj
        ds.extra_meta = {"step": spec.step}
        views.append(save_dataset(ds, out_dir / f"scan{k}"))
        log.debug("wrote view %s (%d frames)", views[-1], ds.count)
    return views
