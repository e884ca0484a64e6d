"""Amplitude-model objective, its gradient and the iterative solvers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dataset import ScanDataset, ShapeError, as_field
from .operators import extract_patches, scatter_patches

log = logging.getLogger(__name__)

SOLVERS = ("gradient-descent", "epie")


class DivergenceError(FloatingPointError):
    def __init__(self, iteration, what="residual"):
        super().__init__(f"reconstruction diverged at iteration {iteration}: {what} is not finite")
        self.iteration = iteration


@dataclass
class ReconConfig:
    iterations: int = 100
    solver: str = "gradient-descent"
    step_size: float = 0.5
    recover_probe: bool = False
    partitions: int = 1
    seed: int = 0

    def __post_init__(self):
        if int(self.iterations) < 1:
            raise ValueError("iterations must be >= 1")
        if int(self.partitions) < 1:
            raise ValueError("partitions must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}; expected one of {SOLVERS}")
        self.iterations = int(self.iterations)
        self.partitions = int(self.partitions)


@dataclass
class ReconResult:
    object: np.ndarray
    probe: np.ndarray
    residual_history: list[float] = field(default_factory=list)
    iterations_run: int = 0
    final_residual: float | None = None


def _check_shapes(dataset: ScanDataset, obj, probe):
    if obj.shape != dataset.object_shape:
        raise ShapeError(f"object shape {obj.shape} != dataset object_shape {dataset.object_shape}")
    if probe.shape != dataset.probe_shape:
        raise ShapeError(f"probe shape {probe.shape} != dataset probe_shape {dataset.probe_shape}")


def amplitude_terms(amplitudes, probe, patches):
    """Far-field amplitude projection for a stack of patches.

    Returns ``(exit_waves, diff, residual)`` where ``diff`` is the
    near-field difference between the current exit waves and their
    modulus-corrected versions. Zero-modulus pixels take phase 1.
    """
    exit_waves = probe * patches
    farfield = np.fft.fft2(exit_waves, axes=(-2, -1))
    modulus = np.abs(farfield)
    phase = np.ones_like(farfield)
    nz = modulus > 0
    phase[nz] = farfield[nz] / modulus[nz]
    corrected = amplitudes * phase
    diff = np.fft.ifft2(farfield - corrected, axes=(-2, -1))
    res = float(np.sum((modulus - amplitudes) ** 2))
    return exit_waves, diff, res


def residual(dataset: ScanDataset, obj, probe) -> float:
    obj = np.asarray(obj, dtype=np.complex128)
    probe = np.asarray(probe, dtype=np.complex128)
    _check_shapes(dataset, obj, probe)
    patches = extract_patches(obj, dataset.positions, dataset.probe_shape)
    modulus = np.abs(np.fft.fft2(probe * patches, axes=(-2, -1)))
    return float(np.sum((modulus - np.sqrt(dataset.frames)) ** 2))


def residual_gradient(dataset: ScanDataset, obj, probe):
    """Real gradients (d/dRe + i d/dIm) of the residual w.r.t. object and probe."""
    obj = np.asarray(obj, dtype=np.complex128)
    probe = np.asarray(probe, dtype=np.complex128)
    _check_shapes(dataset, obj, probe)
    n = probe.size
    patches = extract_patches(obj, dataset.positions, dataset.probe_shape)
    _, diff, _ = amplitude_terms(np.sqrt(dataset.frames), probe, patches)
    g_obj = 2 * n * scatter_patches(np.conj(probe) * diff, dataset.positions, obj.shape)
    g_probe = 2 * n * np.sum(np.conj(patches) * diff, axis=0)
    return g_obj, g_probe


def illumination(probe, positions, object_shape) -> np.ndarray:
    """Per-pixel sum of |probe|^2 over all scan positions."""
    count = positions.count
    weights = np.broadcast_to(np.abs(probe) ** 2, (count,) + probe.shape).astype(np.complex128)
    return scatter_patches(weights, positions, object_shape).real


def step_normalizers(dataset: ScanDataset, obj, probe):
    """Object and probe step denominators: the largest diagonal curvature terms."""
    obj_norm = float(illumination(probe, dataset.positions, obj.shape).max())
    patches = extract_patches(obj, dataset.positions, dataset.probe_shape)
    probe_norm = float(np.sum(np.abs(patches) ** 2, axis=0).max())
    tiny = np.finfo(float).tiny
    return max(obj_norm, tiny), max(probe_norm, tiny)


def gradient_step(dataset: ScanDataset, obj, probe, step_size, recover_probe=False,
                  norms=None):
    """One full-batch amplitude-projection update of object (and probe).

    All positions contribute before anything is applied, and the probe
    update uses the same iterate as the object update.
    """
    if not step_size > 0:
        raise ValueError("step_size must be > 0")
    obj = np.asarray(obj, dtype=np.complex128)
    probe = np.asarray(probe, dtype=np.complex128)
    _check_shapes(dataset, obj, probe)
    obj_norm, probe_norm = norms if norms is not None else step_normalizers(dataset, obj, probe)
    patches = extract_patches(obj, dataset.positions, dataset.probe_shape)
    _, diff, _ = amplitude_terms(np.sqrt(dataset.frames), probe, patches)
    obj_corr = scatter_patches(np.conj(probe) * diff, dataset.positions, obj.shape)
    new_obj = obj - (step_size / obj_norm) * obj_corr
    new_probe = probe
    if recover_probe:
        new_probe = probe - (step_size / probe_norm) * np.sum(np.conj(patches) * diff, axis=0)
    return new_obj, new_probe


def _prepare(dataset, initial_object, initial_probe):
    obj = as_field(initial_object, "initial_object").copy()
    probe = as_field(initial_probe, "initial_probe").copy()
    _check_shapes(dataset, obj, probe)
    return obj, probe


def _gradient_descent(dataset, obj, probe, config, callback):
    amplitudes = np.sqrt(dataset.frames)
    positions = dataset.positions
    obj_norm, probe_norm = step_normalizers(dataset, obj, probe)
    history = []
    for it in range(config.iterations):
        patches = extract_patches(obj, positions, dataset.probe_shape)
        _, diff, res = amplitude_terms(amplitudes, probe, patches)
        if not np.isfinite(res):
            raise DivergenceError(it)
        history.append(res)
        obj_corr = scatter_patches(np.conj(probe) * diff, positions, obj.shape)
        if config.recover_probe:
            probe = probe - (config.step_size / probe_norm) * np.sum(np.conj(patches) * diff, axis=0)
        obj = obj - (config.step_size / obj_norm) * obj_corr
        if not (np.all(np.isfinite(obj)) and np.all(np.isfinite(probe))):
            raise DivergenceError(it, "object/probe")
        if callback is not None:
            callback(it, obj, probe)
    return obj, probe, history


def _epie(dataset, obj, probe, config, callback):
    rng = np.random.default_rng(config.seed)
    amplitudes = np.sqrt(dataset.frames)
    h, w = dataset.probe_shape
    history = []
    for it in range(config.iterations):
        res = residual(dataset, obj, probe)
        if not np.isfinite(res):
            raise DivergenceError(it)
        history.append(res)
        for j in rng.permutation(dataset.count):
            y, x = dataset.positions.y[j], dataset.positions.x[j]
            patch = obj[y:y + h, x:x + w].copy()
            exit_wave, diff, _ = amplitude_terms(amplitudes[j], probe, patch)
            # diff = exit - corrected exit; ePIE moves toward the corrected wave
            obj[y:y + h, x:x + w] = patch - config.step_size * np.conj(probe) * diff / max(
                float(np.max(np.abs(probe) ** 2)), 1e-300)
            if config.recover_probe:
                probe = probe - config.step_size * np.conj(patch) * diff / max(
                    float(np.max(np.abs(patch) ** 2)), 1e-300)
        if not (np.all(np.isfinite(obj)) and np.all(np.isfinite(probe))):
            raise DivergenceError(it, "object/probe")
        if callback is not None:
            callback(it, obj, probe)
    return obj, probe, history


def reconstruct(dataset: ScanDataset, initial_object, initial_probe, config: ReconConfig,
                callback: Callable | None = None) -> ReconResult:
    """Iterate the object (and optionally probe) update ``config.iterations`` times.

    ``residual_history[i]`` is the residual of the iterate entering
    iteration ``i``; ``final_residual`` is evaluated after the last update.
    ``callback(iteration, object, probe)`` sees every post-update iterate.
    """
    if config.solver == "gradient-descent" and config.partitions > 1:
        from .partition import partitioned_reconstruct

        return partitioned_reconstruct(dataset, initial_object, initial_probe, config, callback)
    obj, probe = _prepare(dataset, initial_object, initial_probe)
    if config.solver == "epie":
        if config.partitions > 1:
            log.warning("epie is sequential; ignoring partitions=%d", config.partitions)
        obj, probe, history = _epie(dataset, obj, probe, config, callback)
    else:
        obj, probe, history = _gradient_descent(dataset, obj, probe, config, callback)
    return ReconResult(
        object=obj,
        probe=probe,
        residual_history=history,
        iterations_run=len(history),
        final_residual=residual(dataset, obj, probe),
    )


def default_probe_guess(shape, seed=0) -> np.ndarray:
    """Disk-support Gaussian with unit total power and a small seeded phase ripple."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    r2 = ((yy - h // 2) / h) ** 2 + ((xx - w // 2) / w) ** 2
    mag = np.exp(-r2 / (2 * 0.3 ** 2)) * (r2 <= 0.45 ** 2)
    rng = np.random.default_rng(seed)
    guess = mag * np.exp(1j * 0.1 * rng.standard_normal(shape))
    return guess / np.sqrt(np.sum(np.abs(guess) ** 2))


def default_object_guess(shape) -> np.ndarray:
    return np.ones(shape, dtype=np.complex128)
