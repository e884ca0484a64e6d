import json

import numpy as np
import pytest

from conftest import random_field
from fedptycho.phantoms import raster_positions
from fedptycho.ptycho import (DatasetFormatError, ScanDataset, ScanPositions, ShapeError, load_dataset,
                              save_dataset, simulate_diffraction)


def _dataset(rng):
    obj, probe = random_field(rng, (12, 12)), random_field(rng, (4, 4))
    ds = simulate_diffraction(obj, probe, raster_positions((12, 12), (4, 4), 4), view_id="scan5")
    ds.probe = probe
    ds.truth_object = obj
    return ds


def test_round_trip(tmp_path, rng):
    ds = _dataset(rng)
    save_dataset(ds, tmp_path / "scan5")
    back = load_dataset(tmp_path / "scan5")
    assert back.view_id == "scan5"
    assert back.object_shape == (12, 12) and back.probe_shape == (4, 4)
    np.testing.assert_array_equal(back.positions.y, ds.positions.y)
    np.testing.assert_array_equal(back.positions.x, ds.positions.x)
    # frames are stored as float32
    np.testing.assert_allclose(back.frames, ds.frames, rtol=1e-6)
    np.testing.assert_array_equal(back.probe, ds.probe)
    np.testing.assert_array_equal(back.truth_object, ds.truth_object)


def test_meta_is_written_last_and_versioned(tmp_path, rng):
    save_dataset(_dataset(rng), tmp_path / "v")
    meta = json.loads((tmp_path / "v" / "meta.json").read_text())
    assert meta["format_version"] == 1
    assert meta["count"] == 9


def test_missing_meta(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(DatasetFormatError):
        load_dataset(tmp_path / "empty")


def test_truncated_frames(tmp_path, rng):
    save_dataset(_dataset(rng), tmp_path / "v")
    f = tmp_path / "v" / "frames.bin"
    f.write_bytes(f.read_bytes()[:-4])
    with pytest.raises(DatasetFormatError):
        load_dataset(tmp_path / "v")


def test_negative_frames_rejected(rng):
    ds = _dataset(rng)
    ds.frames[0, 0, 0] = -1
    with pytest.raises(ValueError):
        ds.validate()


def test_frame_count_mismatch(rng):
    ds = _dataset(rng)
    with pytest.raises((ShapeError, ValueError)):
        ScanDataset(positions=ScanPositions(np.array([0]), np.array([0])), frames=ds.frames,
                    probe_shape=(4, 4), object_shape=(12, 12)).validate()
