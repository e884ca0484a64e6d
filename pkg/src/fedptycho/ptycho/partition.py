"""Grid-cell domain decomposition of the object with halo synchronization.

Each cell worker keeps a private copy of its cell plus a halo of
``probe - 1`` pixels, computes correction terms for the scan positions it
owns, and at the end of every iteration the halo contributions are summed
into the owning cells and refreshed from them. Because the update is
full-batch, the summed correction equals the monolithic one.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dataset import ScanDataset, ScanPositions
from .solvers import (
    DivergenceError,
    ReconConfig,
    ReconResult,
    _prepare,
    amplitude_terms,
    residual,
    step_normalizers,
)
from .operators import extract_patches, scatter_patches


@dataclass(frozen=True)
class Rect:
    y0: int
    y1: int
    x0: int
    x1: int

    @property
    def slices(self):
        return slice(self.y0, self.y1), slice(self.x0, self.x1)

    @property
    def shape(self):
        return self.y1 - self.y0, self.x1 - self.x0

    def intersect(self, other: "Rect"):
        r = Rect(max(self.y0, other.y0), min(self.y1, other.y1),
                 max(self.x0, other.x0), min(self.x1, other.x1))
        if r.y0 >= r.y1 or r.x0 >= r.x1:
            return None
        return r

    def relative_to(self, origin: "Rect"):
        return (slice(self.y0 - origin.y0, self.y1 - origin.y0),
                slice(self.x0 - origin.x0, self.x1 - origin.x0))


@dataclass
class Cell:
    index: int
    owned: Rect
    positions: np.ndarray  # indices into the dataset's scan positions


def grid_shape(partitions: int) -> tuple[int, int]:
    """Rows x columns for ``partitions`` cells; columns >= rows, as square as possible."""
    rows = 1
    for r in range(1, int(np.sqrt(partitions)) + 1):
        if partitions % r == 0:
            rows = r
    return rows, partitions // rows


def partition_positions(positions: ScanPositions, object_shape, partitions: int,
                        probe_shape) -> list[Cell]:
    if partitions < 1:
        raise ValueError("partitions must be >= 1")
    if partitions > positions.count:
        raise ValueError(
            f"cannot split {positions.count} scan positions across {partitions} partitions"
        )
    rows, cols = grid_shape(partitions)
    H, W = object_shape
    y_edges = np.round(np.linspace(0, H, rows + 1)).astype(int)
    x_edges = np.round(np.linspace(0, W, cols + 1)).astype(int)
    cy = positions.y + probe_shape[0] // 2
    cx = positions.x + probe_shape[1] // 2
    row_of = np.searchsorted(y_edges, cy, side="right") - 1
    col_of = np.searchsorted(x_edges, cx, side="right") - 1
    cells = []
    for r in range(rows):
        for c in range(cols):
            owned = Rect(int(y_edges[r]), int(y_edges[r + 1]), int(x_edges[c]), int(x_edges[c + 1]))
            idx = np.flatnonzero((row_of == r) & (col_of == c))
            cells.append(Cell(index=r * cols + c, owned=owned, positions=idx))
    return cells


class CellWorker:
    """Holds one cell's object copy (owned region plus halo) and its positions."""

    def __init__(self, cell: Cell, dataset: ScanDataset, obj: np.ndarray):
        h, w = dataset.probe_shape
        H, W = dataset.object_shape
        o = cell.owned
        self.cell = cell
        self.extended = Rect(max(0, o.y0 - (h - 1)), min(H, o.y1 + (h - 1)),
                             max(0, o.x0 - (w - 1)), min(W, o.x1 + (w - 1)))
        sub = dataset.positions.subset(cell.positions)
        self.positions = ScanPositions(sub.y - self.extended.y0, sub.x - self.extended.x0)
        self.positions.check_bounds(self.extended.shape, dataset.probe_shape)
        self.amplitudes = np.sqrt(dataset.frames[cell.positions])
        self.probe_shape = dataset.probe_shape
        self.local = obj[self.extended.slices].copy()

    def contributions(self, probe):
        """Unscaled object correction over the extended region, probe correction, residual."""
        if self.positions.count == 0:
            return np.zeros(self.extended.shape, np.complex128), np.zeros_like(probe), 0.0
        patches = extract_patches(self.local, self.positions, self.probe_shape)
        _, diff, res = amplitude_terms(self.amplitudes, probe, patches)
        obj_corr = scatter_patches(np.conj(probe) * diff, self.positions, self.extended.shape)
        probe_corr = np.sum(np.conj(patches) * diff, axis=0)
        return obj_corr, probe_corr, res


def _exchange(workers, corrections, scale):
    """Sum halo contributions into owners, apply, then refresh every halo."""
    for owner in workers:
        total = np.zeros(owner.cell.owned.shape, np.complex128)
        for other, corr in zip(workers, corrections):
            overlap = owner.cell.owned.intersect(other.extended)
            if overlap is None:
                continue
            total[overlap.relative_to(owner.cell.owned)] += corr[overlap.relative_to(other.extended)]
        owned_in_local = owner.cell.owned.relative_to(owner.extended)
        owner.local[owned_in_local] -= scale * total
    for w in workers:
        for other in workers:
            if other is w:
                continue
            overlap = w.extended.intersect(other.cell.owned)
            if overlap is not None:
                w.local[overlap.relative_to(w.extended)] = other.local[overlap.relative_to(other.extended)]


def _assemble(workers, shape):
    out = np.empty(shape, np.complex128)
    for w in workers:
        out[w.cell.owned.slices] = w.local[w.cell.owned.relative_to(w.extended)]
    return out


def partitioned_reconstruct(dataset: ScanDataset, initial_object, initial_probe,
                            config: ReconConfig, callback=None) -> ReconResult:
    if config.partitions < 2:
        raise ValueError("partitioned_reconstruct needs partitions >= 2")
    obj, probe = _prepare(dataset, initial_object, initial_probe)
    obj_norm, probe_norm = step_normalizers(dataset, obj, probe)
    cells = partition_positions(dataset.positions, dataset.object_shape, config.partitions,
                                dataset.probe_shape)
    workers = [CellWorker(c, dataset, obj) for c in cells]
    history = []
    with ThreadPoolExecutor(max_workers=len(workers), thread_name_prefix="cell") as pool:
        for it in range(config.iterations):
            results = list(pool.map(lambda w: w.contributions(probe), workers))
            res = float(sum(r[2] for r in results))
            if not np.isfinite(res):
                raise DivergenceError(it)
            history.append(res)
            if config.recover_probe:
                probe_corr = sum(r[1] for r in results)
                probe = probe - (config.step_size / probe_norm) * probe_corr
            _exchange(workers, [r[0] for r in results], config.step_size / obj_norm)
            if not (all(np.all(np.isfinite(w.local)) for w in workers) and np.all(np.isfinite(probe))):
                raise DivergenceError(it, "object/probe")
            if callback is not None:
                callback(it, _assemble(workers, dataset.object_shape), probe)
    obj = _assemble(workers, dataset.object_shape)
    return ReconResult(
        object=obj,
        probe=probe,
        residual_history=history,
        iterations_run=len(history),
        final_residual=residual(dataset, obj, probe),
    )
