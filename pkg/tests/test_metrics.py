import json

import pytest

from fedptycho.metrics import (BREAKDOWN_COLUMNS, IncompleteRunError, JournalError, breakdown,
                               breakdown_csv, ingest_events, read_breakdown_csv, scaling_report,
                               write_breakdown_csv)


def _state(run, name, action, t0, t1, task=None):
    rec = {"event": "state", "run_id": run, "state": name, "action_type": action, "attempt": 1,
           "attempt_id": f"{run}:{name}:1", "started": t0, "finished": t1, "outcome": "success",
           "output": None}
    if task:
        rec["output"] = {"task": task}
    return rec


def _task(run, tid, t0, t1):
    return {"task_id": tid, "queued_at": t0, "started": t0, "finished": t1, "meta": {"run_id": run}}


def run_journal(run, t0, incoming, compute, outgoing, total, task_id=None):
    """Sequential run: transfer-in, compute task, transfer-out, padded to ``total``."""
    t_in = t0 + incoming
    task = _task(run, task_id or f"task-{run}", t_in, t_in + compute)
    return [
        {"event": "run_started", "run_id": run, "time": t0},
        _state(run, "TransferIn", "transfer", t0, t_in),
        _state(run, "Reconstruct", "compute", t_in, t_in + compute, task),
        _state(run, "TransferOut", "transfer", t_in + compute, t_in + compute + outgoing),
        {"event": "run_finished", "run_id": run, "time": t0 + total, "status": "succeeded"},
    ]


def write(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


def test_one_run_journal(tmp_path):
    table = ingest_events(write(tmp_path / "r.jsonl", run_journal("r1", 100.0, 2, 5, 1, 9)))
    assert table.state_count() == 3
    assert len(table.tasks) == 1


def test_known_intervals(tmp_path):
    table = ingest_events(write(tmp_path / "r.jsonl", run_journal("r1", 100.0, 2, 5, 1, 9)))
    b = breakdown(table, "r1")
    assert (b.incoming, b.compute, b.outgoing, b.total) == (2, 5, 1, 9)
    assert b.others == pytest.approx(1.0)


def test_zero_length_run(tmp_path):
    b = breakdown(ingest_events(write(tmp_path / "r.jsonl", run_journal("z", 5.0, 0, 0, 0, 0))), "z")
    assert (b.incoming, b.compute, b.outgoing, b.others, b.total) == (0, 0, 0, 0, 0)


def test_empty_journal(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert ingest_events(tmp_path / "e.jsonl").empty


def test_malformed_line_reports_line_number(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text(json.dumps({"event": "run_started", "run_id": "a", "time": 0}) + "\n{oops\n")
    with pytest.raises(JournalError, match=r"bad\.jsonl:2"):
        ingest_events(p)


def test_conflicting_duplicate_task(tmp_path):
    a = write(tmp_path / "a.jsonl", run_journal("r1", 0.0, 1, 1, 1, 3, task_id="T"))
    b = write(tmp_path / "b.jsonl", [{"event": "task", **_task("r1", "T", 50, 60)}])
    with pytest.raises(JournalError, match="conflicting"):
        ingest_events(a, b)


def test_identical_duplicates_merge(tmp_path):
    recs = run_journal("r1", 0.0, 1, 2, 1, 5, task_id="T")
    a = write(tmp_path / "a.jsonl", recs)
    b = write(tmp_path / "b.jsonl", [{"event": "task", **recs[2]["output"]["task"]}])
    table = ingest_events(a, b, a)
    assert len(table.tasks) == 1 and table.state_count() == 3


def test_incomplete_run_names_missing_state(tmp_path):
    recs = [r for r in run_journal("r1", 0.0, 1, 2, 1, 5) if r.get("state") != "TransferOut"]
    with pytest.raises(IncompleteRunError, match="TransferOut"):
        breakdown(ingest_events(write(tmp_path / "a.jsonl", recs)), "r1")
    unfinished = run_journal("r2", 0.0, 1, 2, 1, 5)[:-1]
    with pytest.raises(IncompleteRunError, match="run_finished"):
        breakdown(ingest_events(write(tmp_path / "b.jsonl", unfinished)), "r2")


def test_batch_compute_span(tmp_path):
    recs = []
    for k, start in enumerate([0.0, 0.5, 1.0, 1.5]):
        recs += run_journal(f"r{k}", start, 1, 4, 1, 7)
    table = ingest_events(write(tmp_path / "batch.jsonl", recs))
    b = breakdown(table, [f"r{k}" for k in range(4)])
    # first task starts at 1.0, last ends at 1.5 + 1 + 4
    assert b.compute == pytest.approx(5.5)
    assert b.total == pytest.approx(8.5)
    assert b.others == pytest.approx(3.0)
    assert b.incoming == b.outgoing == 0


def test_components_nonnegative_and_identity(tmp_path):
    table = ingest_events(write(tmp_path / "r.jsonl", run_journal("r", 0.0, 0.3, 1.2, 0.2, 2.0)))
    b = breakdown(table, "r")
    assert min(b.incoming, b.compute, b.outgoing, b.others) >= 0
    assert b.incoming + b.compute + b.outgoing + b.others == pytest.approx(b.total)


def test_others_clamped_at_zero(tmp_path):
    # clock skew between journals can make the parts overshoot the wall time
    table = ingest_events(write(tmp_path / "r.jsonl", run_journal("r", 0.0, 0.3, 1.2, 0.2, 1.5)))
    assert breakdown(table, "r").others == 0


def test_reingest_is_byte_identical(tmp_path):
    p = write(tmp_path / "r.jsonl", run_journal("r1", 0.0, 1, 2, 1, 5) + run_journal("r2", 1.0, 1, 3, 1, 6))
    out = []
    for _ in range(2):
        table = ingest_events(p)
        out.append(breakdown_csv([breakdown(table, r) for r in ("r1", "r2")]))
    assert out[0] == out[1]
    assert out[0].splitlines()[0] == ",".join(BREAKDOWN_COLUMNS)


def test_csv_round_trip(tmp_path):
    table = ingest_events(write(tmp_path / "r.jsonl", run_journal("r1", 0.0, 1, 2, 1, 5)))
    rows = [breakdown(table, "r1")]
    write_breakdown_csv(rows, tmp_path / "b.csv")
    (back,) = read_breakdown_csv(tmp_path / "b.csv")
    assert back.run_id == "r1" and back.compute == pytest.approx(2.0)


def test_ideal_scaling():
    rep = scaling_report({1: 100, 2: 50, 4: 25})
    assert rep.speedups() == {1: 1, 2: 2, 4: 4}
    assert all(p.efficiency == pytest.approx(1.0) for p in rep.points)
    assert rep.to_csv().splitlines()[0] == "n,time_s,speedup,efficiency"


def test_catalyst_shape_speedup():
    rep = scaling_report({1: 100, 2: 64.1})
    assert round(rep.speedups()[2], 2) == 1.56
    assert rep.violations() == []


def test_base_is_smallest_measured():
    rep = scaling_report({2: 50, 4: 25})
    assert rep.base_n == 2 and rep.speedups()[2] == 1.0 and rep.points[1].efficiency == pytest.approx(1.0)


def test_missing_base():
    with pytest.raises(ValueError, match="base"):
        scaling_report({2: 50, 4: 25}, base=1)
    with pytest.raises(ValueError):
        scaling_report({})


def test_weak_scaling():
    rep = scaling_report({1: 10}, weak=[(2000, 2, 10.0), (1000, 1, 10.0)])
    assert [p.efficiency for p in rep.weak] == [1.0, 1.0]


def test_noise_band_violation():
    rep = scaling_report({1: 100, 2: 40})
    assert rep.violations() and "n=2" in rep.violations()[0]


def test_plot(tmp_path):
    pytest.importorskip("matplotlib")
    scaling_report({1: 100, 2: 60, 4: 40}).plot(tmp_path / "s.png")
    assert (tmp_path / "s.png").stat().st_size > 0
