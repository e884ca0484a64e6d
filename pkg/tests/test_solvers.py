import numpy as np
import pytest

from conftest import random_field, small_problem
from fedptycho.phantoms import coverage
from fedptycho.ptycho import (ReconConfig, ScanPositions, default_object_guess, default_probe_guess,
                              gradient_step, reconstruct, residual, residual_gradient,
                              simulate_diffraction)
from fedptycho.ptycho.solvers import step_normalizers


def fd_gradient(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        for unit in (1, 1j):
            xp, xm = x.copy(), x.copy()
            xp[idx] += eps * unit
            xm[idx] -= eps * unit
            g[idx] += unit * (f(xp) - f(xm)) / (2 * eps)
    return g


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def magnitude_correlation(recon, truth, mask):
    a, b = np.abs(recon)[mask], np.abs(truth)[mask]
    return float(np.corrcoef(a, b)[0, 1])


def test_residual_zero_at_truth(star):
    obj, probe, ds = star
    assert residual(ds, obj, probe) <= 1e-9 * ds.frames.sum()


def test_residual_of_zero_object_is_total_intensity(star):
    obj, probe, ds = star
    assert np.isclose(residual(ds, np.zeros_like(obj), probe), ds.frames.sum(), rtol=1e-12)


def test_residual_matches_loop_oracle():
    obj, probe, pos = small_problem(3)
    data = simulate_diffraction(*small_problem(4)[:2], pos)
    ref = 0.0
    for j in range(pos.count):
        patch = obj[pos.y[j]:pos.y[j] + 4, pos.x[j]:pos.x[j] + 4]
        far = np.fft.fft2(probe * patch)
        for a in range(4):
            for b in range(4):
                ref += (abs(far[a, b]) - np.sqrt(data.frames[j, a, b])) ** 2
    assert np.isclose(residual(data, obj, probe), ref, rtol=1e-12)


@pytest.mark.parametrize("trial", range(5))
def test_gradient_matches_finite_differences(trial):
    obj, probe, pos = small_problem(10 + trial)
    data = simulate_diffraction(*small_problem(100 + trial)[:2], pos)
    g_obj, g_probe = residual_gradient(data, obj, probe)
    assert rel(g_obj, fd_gradient(lambda o: residual(data, o, probe), obj)) < 1e-5
    assert rel(g_probe, fd_gradient(lambda p: residual(data, obj, p), probe)) < 1e-5


def test_gradient_step_is_scaled_gradient():
    obj, probe, pos = small_problem(5)
    data = simulate_diffraction(*small_problem(6)[:2], pos)
    g_obj, g_probe = residual_gradient(data, obj, probe)
    obj_norm, probe_norm = step_normalizers(data, obj, probe)
    n = probe.size
    new_obj, new_probe = gradient_step(data, obj, probe, 0.3, recover_probe=True)
    np.testing.assert_allclose(new_obj, obj - 0.3 / obj_norm * g_obj / (2 * n), atol=1e-12)
    np.testing.assert_allclose(new_probe, probe - 0.3 / probe_norm * g_probe / (2 * n), atol=1e-12)


def test_stationary_at_exact_solution(star):
    obj, probe, ds = star
    new_obj, new_probe = gradient_step(ds, obj, probe, 0.5, recover_probe=True)
    assert np.max(np.abs(new_obj - obj)) <= 1e-9
    assert np.max(np.abs(new_probe - probe)) <= 1e-9


def test_update_is_local_to_footprint(rng):
    obj = random_field(rng, (12, 12))
    probe = np.zeros((4, 4), complex)
    probe[0, 0] = 1
    pos = ScanPositions(np.array([5]), np.array([3]))
    ds = simulate_diffraction(random_field(rng, (12, 12)), probe, pos)
    new_obj, _ = gradient_step(ds, obj, probe, 0.5)
    changed = np.argwhere(np.abs(new_obj - obj) > 0)
    assert len(changed)
    assert all(5 <= y < 9 and 3 <= x < 7 for y, x in changed)


def test_tiny_step_is_near_noop(star):
    obj, probe, ds = star
    init = default_object_guess(obj.shape)
    res = reconstruct(ds, init, probe, ReconConfig(iterations=1, step_size=1e-12))
    assert np.max(np.abs(res.object - init)) < 1e-9


def test_convergence_and_monotone_history(star):
    obj, probe, ds = star
    res = reconstruct(ds, default_object_guess(obj.shape), probe, ReconConfig(iterations=200))
    hist = res.residual_history
    assert len(hist) == 200 and res.iterations_run == 200
    assert res.final_residual <= hist[0] / 100
    assert all(b <= a * (1 + 1e-12) for a, b in zip(hist, hist[1:]))
    mask = coverage(ds.positions, ds.object_shape, ds.probe_shape) > 0
    assert magnitude_correlation(res.object, obj, mask) >= 0.95


def test_probe_recovery_reduces_residual(star):
    obj, probe, ds = star
    res = reconstruct(ds, default_object_guess(obj.shape), default_probe_guess(probe.shape, 0),
                      ReconConfig(iterations=60, recover_probe=True))
    assert res.final_residual < res.residual_history[0] / 5


def test_epie_reduces_residual(star):
    obj, probe, ds = star
    res = reconstruct(ds, default_object_guess(obj.shape), probe,
                      ReconConfig(iterations=30, solver="epie", step_size=0.9))
    assert res.final_residual < res.residual_history[0] / 100


def test_global_phase_gauge(star):
    obj, probe, ds = star
    phi = np.exp(0.7j)
    init = default_object_guess(obj.shape)
    guess = default_probe_guess(probe.shape, 2)
    cfg = ReconConfig(iterations=15, recover_probe=True)
    a = reconstruct(ds, init, guess, cfg).residual_history
    b = reconstruct(ds, init * phi, guess / phi, cfg).residual_history
    np.testing.assert_allclose(a, b, rtol=1e-9)


def test_deterministic(star):
    obj, probe, ds = star
    cfg = ReconConfig(iterations=5, solver="epie", recover_probe=True, seed=4)
    a = reconstruct(ds, default_object_guess(obj.shape), default_probe_guess(probe.shape, 1), cfg)
    b = reconstruct(ds, default_object_guess(obj.shape), default_probe_guess(probe.shape, 1), cfg)
    np.testing.assert_array_equal(a.object, b.object)
    np.testing.assert_array_equal(a.probe, b.probe)
    assert a.residual_history == b.residual_history


def test_callback_sees_every_iterate(star):
    obj, probe, ds = star
    seen = []
    reconstruct(ds, default_object_guess(obj.shape), probe, ReconConfig(iterations=3),
                callback=lambda it, o, p: seen.append(it))
    assert seen == [0, 1, 2]


@pytest.mark.parametrize("kwargs", [dict(iterations=0), dict(step_size=0), dict(solver="cg"),
                                    dict(partitions=0)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        ReconConfig(**kwargs)


def test_shape_mismatch(star):
    obj, probe, ds = star
    with pytest.raises(ValueError):
        reconstruct(ds, np.ones((10, 10)), probe, ReconConfig(iterations=1))
