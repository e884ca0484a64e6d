"""Forward model: patch extraction, far-field propagation and simulation.

FFT convention: forward is the unnormalized DFT, inverse carries 1/N.
"""

from __future__ import annotations

import numpy as np

from .dataset import PositionBoundsError, ScanDataset, ScanPositions, ShapeError, as_field


def extract_patch(obj, j, positions: ScanPositions, probe_shape) -> np.ndarray:
    """Return the probe-sized window of ``obj`` illuminated at position ``j``."""
    obj = np.asarray(obj)
    if not 0 <= j < positions.count:
        raise PositionBoundsError(f"scan position {j} does not exist ({positions.count} positions)")
    h, w = probe_shape
    y, x = int(positions.y[j]), int(positions.x[j])
    if y < 0 or x < 0 or y + h > obj.shape[0] or x + w > obj.shape[1]:
        raise PositionBoundsError(
            f"scan position {j} at (y={y}, x={x}) puts a {h}x{w} patch outside a "
            f"{obj.shape[0]}x{obj.shape[1]} object"
        )
    return obj[y:y + h, x:x + w].copy()


def _patch_index(positions: ScanPositions, probe_shape):
    h, w = probe_shape
    rows = positions.y[:, None, None] + np.arange(h)[None, :, None]
    cols = positions.x[:, None, None] + np.arange(w)[None, None, :]
    return rows, cols


def extract_patches(obj, positions: ScanPositions, probe_shape) -> np.ndarray:
    """Stack of all patches, shape (count, h, w)."""
    positions.check_bounds(obj.shape, probe_shape)
    rows, cols = _patch_index(positions, probe_shape)
    return obj[rows, cols]


def scatter_patches(patches, positions: ScanPositions, object_shape) -> np.ndarray:
    """Adjoint of :func:`extract_patches`: sum patches back into an object grid."""
    out = np.zeros(object_shape, dtype=np.complex128)
    rows, cols = _patch_index(positions, patches.shape[1:])
    np.add.at(out, (rows, cols), patches)
    return out


def forward(probe, patch) -> np.ndarray:
    probe = np.asarray(probe, dtype=np.complex128)
    patch = np.asarray(patch, dtype=np.complex128)
    if probe.shape != patch.shape[-2:]:
        raise ShapeError(f"probe shape {probe.shape} does not match patch shape {patch.shape}")
    return np.fft.fft2(probe * patch, axes=(-2, -1))


def simulate_diffraction(obj, probe, positions: ScanPositions, photon_scale=1.0,
                         noise="none", seed=0, view_id="") -> ScanDataset:
    obj = as_field(obj, "object")
    probe = as_field(probe, "probe")
    if photon_scale < 0:
        raise ValueError("photon_scale must be >= 0")
    if noise not in ("none", "poisson"):
        raise ValueError(f"unknown noise model {noise!r}")
    patches = extract_patches(obj, positions, probe.shape)
    frames = photon_scale * np.abs(forward(probe, patches)) ** 2
    if noise == "poisson":
        rng = np.random.default_rng(seed)
        frames = rng.poisson(frames).astype(np.float64)
    return ScanDataset(
        positions=positions,
        frames=frames,
        probe_shape=probe.shape,
        object_shape=obj.shape,
        view_id=view_id,
        photon_scale=float(photon_scale),
        noise=noise,
        seed=int(seed),
    )
