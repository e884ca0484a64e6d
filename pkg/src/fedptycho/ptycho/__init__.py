"""Ptychographic forward model and iterative reconstruction."""

from .dataset import (
    DatasetFormatError,
    PositionBoundsError,
    ScanDataset,
    ScanPositions,
    ShapeError,
    load_dataset,
    save_dataset,
)
from .operators import extract_patch, extract_patches, forward, scatter_patches, simulate_diffraction
from .partition import partition_positions, partitioned_reconstruct
from .solvers import (
    DivergenceError,
    ReconConfig,
    ReconResult,
    default_object_guess,
    default_probe_guess,
    gradient_step,
    illumination,
    reconstruct,
    residual,
    residual_gradient,
)

__all__ = [
    "DatasetFormatError",
    "DivergenceError",
    "PositionBoundsError",
    "ReconConfig",
    "ReconResult",
    "ScanDataset",
    "ScanPositions",
    "ShapeError",
    "default_object_guess",
    "default_probe_guess",
    "extract_patch",
    "extract_patches",
    "forward",
    "gradient_step",
    "illumination",
    "load_dataset",
    "partition_positions",
    "partitioned_reconstruct",
    "reconstruct",
    "residual",
    "residual_gradient",
    "save_dataset",
    "scatter_patches",
    "simulate_diffraction",
]
