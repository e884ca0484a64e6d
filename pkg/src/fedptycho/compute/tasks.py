"""Registered task bodies executed by endpoint workers."""

from __future__ import annotations

import json
import time
from pathlib import Path

from ..ptycho import ReconConfig, default_object_guess, default_probe_guess, load_dataset, reconstruct
from ..ptycho.dataset import write_complex


def write_recon(result, recon_path, extra=None):
    recon_path = Path(recon_path)
    recon_path.mkdir(parents=True, exist_ok=True)
    write_complex(recon_path / "object.bin", result.object)
    write_complex(recon_path / "probe.bin", result.probe)
    (recon_path / "residuals.json").write_text(
        json.dumps({"residual_history": result.residual_history,
                    "final_residual": result.final_residual}, indent=2),
        encoding="utf-8",
    )
    meta = {
        "object_shape": list(result.object.shape),
        "probe_shape": list(result.probe.shape),
        "iterations_run": result.iterations_run,
    }
    meta.update(extra or {})
    (recon_path / "recon.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")


def reconstruct_view(input_path, recon_path, iterations=100, solver="gradient-descent",
                     step_size=0.5, recover_probe=None, seed=0, accelerator_rate=None,
                     context=None):
    """Reconstruct one view directory into ``recon_path``.

    The solver runs with one partition per slot held by the task. When the
    dataset ships no probe, the probe is recovered from a default guess.

    ``accelerator_rate`` (pixel-updates per second per slot) emulates the
    run time of an accelerator: the task occupies its slots for at least
    ``iterations * positions * probe pixels / (rate * slots)`` seconds.
    """
    t0 = time.monotonic()
    dataset = load_dataset(input_path).normalized()
    slots = len(context.slots) if context is not None else 1
    partitions = max(1, min(slots, dataset.count))
    if recover_probe is None:
        recover_probe = dataset.probe is None
    probe = dataset.probe if dataset.probe is not None and not recover_probe else default_probe_guess(
        dataset.probe_shape, seed)
    config = ReconConfig(iterations=iterations, solver=solver, step_size=step_size,
                         recover_probe=recover_probe, partitions=partitions, seed=seed)
    result = reconstruct(dataset, default_object_guess(dataset.object_shape), probe, config)
    if accelerator_rate:
        modeled = iterations * dataset.count * dataset.probe_shape[0] * dataset.probe_shape[1] / (
            accelerator_rate * slots)
        remaining = modeled - (time.monotonic() - t0)
        if remaining > 0:
            time.sleep(remaining)
    write_recon(result, recon_path, {"view_id": dataset.view_id, "partitions": partitions,
                                     "solver": solver, "recover_probe": recover_probe})
    return {
        "recon_path": str(recon_path),
        "final_residual": result.final_residual,
        "partitions": partitions,
        "iterations": result.iterations_run,
    }
