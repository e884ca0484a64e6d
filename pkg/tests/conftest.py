import numpy as np
import pytest

from fedptycho.phantoms import make_object, make_probe, raster_positions
from fedptycho.ptycho import ScanPositions, simulate_diffraction


def naive_dft2(a):
    """Direct O(N^2) double sum; the reference for the FFT forward model."""
    h, w = a.shape
    ky = np.exp(-2j * np.pi * np.outer(np.arange(h), np.arange(h)) / h)
    kx = np.exp(-2j * np.pi * np.outer(np.arange(w), np.arange(w)) / w)
    out = np.zeros_like(a, dtype=np.complex128)
    for u in range(h):
        for v in range(w):
            out[u, v] = np.sum(a * ky[u][:, None] * kx[v][None, :])
    return out


def random_field(rng, shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


def small_problem(seed=0, object_shape=(8, 8), probe_shape=(4, 4), step=2):
    """Random object/probe with a raster scan; 8x8/4x4/step 2 gives 9 positions."""
    rng = np.random.default_rng(seed)
    obj = random_field(rng, object_shape)
    probe = random_field(rng, probe_shape)
    positions = raster_positions(object_shape, probe_shape, step)
    return obj, probe, positions


@pytest.fixture
def star():
    """The 64x64 siemens-star / 16x16 probe / step 8 configuration."""
    obj = make_object("siemens-star", (64, 64), 0)
    probe = make_probe((16, 16), 0)
    positions = raster_positions((64, 64), (16, 16), 8)
    return obj, probe, simulate_diffraction(obj, probe, positions)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


__all__ = ["naive_dft2", "random_field", "small_problem", "ScanPositions"]
