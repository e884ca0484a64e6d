import os
import threading
import time

import pytest

from fedptycho.facility import (AuthError, ConfigError, Deployment, EventLog, LinkModel, extract_scan_id,
                                load_deployment, prepare_remote_dirs, replay_acquisition, transfer,
                                tree_checksum)
from fedptycho.phantoms import PhantomSpec, generate_experiment


@pytest.fixture
def dep(tmp_path):
    return Deployment.default(tmp_path / "fac", bandwidth=1e9)


def _tree(root, files):
    for rel, data in files.items():
        p = root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(data)
    return root


@pytest.mark.parametrize("name,expected", [("scan100", "100"), ("flyscan100", "100"), ("scan007", "007")])
def test_extract_scan_id(name, expected):
    assert extract_scan_id(name) == expected


def test_extract_scan_id_without_digits():
    with pytest.raises(ValueError):
        extract_scan_id("scan")


def test_prepare_remote_dirs(dep):
    ep = dep.endpoint("compute")
    a = prepare_remote_dirs(ep, "100")
    assert a == (ep.root / "input" / "100", ep.root / "recon" / "100")
    assert prepare_remote_dirs(ep, "100") == a
    assert prepare_remote_dirs(ep, "007")[0].name == "007"


def test_transfer_round_trip(dep):
    src = _tree(dep.endpoint("beamline").root / "scan1", {"a.bin": b"x" * 1000, "sub/b.bin": b"yz"})
    task = transfer(dep, ("beamline", "scan1"), ("compute", "input/1"), token=dep.token)
    assert task.succeeded, task.reason
    assert task.bytes == 1002 and task.algorithm == "sha256"
    assert tree_checksum(dep.endpoint("compute").path("input/1"))[0] == tree_checksum(src)[0]


def test_empty_directory_transfer(tmp_path):
    dep = Deployment.default(tmp_path, latency=0.1)
    (dep.endpoint("beamline").root / "scan2").mkdir()
    task = transfer(dep, ("beamline", "scan2"), ("compute", "input/2"), token=dep.token)
    assert task.succeeded and task.bytes == 0
    assert 0.1 <= task.finished - task.started < 0.3


def test_pacing_10mb_at_10mb_per_s(tmp_path):
    dep = Deployment.default(tmp_path, bandwidth=10e6)
    src = dep.endpoint("beamline").root / "big"
    src.mkdir()
    (src / "blob").write_bytes(os.urandom(10_000_000))
    t0 = time.monotonic()
    task = transfer(dep, ("beamline", "big"), ("compute", "big"), token=dep.token)
    elapsed = time.monotonic() - t0
    assert task.succeeded
    assert 1.0 <= elapsed <= 1.2


def test_corruption_fails_with_mismatch(dep):
    _tree(dep.endpoint("beamline").root / "scan3", {"f": b"abc"})

    def corrupt(tmp):
        (tmp / "f").write_bytes(b"abd")

    task = transfer(dep, ("beamline", "scan3"), ("compute", "input/3"), token=dep.token, fault_hook=corrupt)
    assert task.state == "failed" and "checksum mismatch" in task.reason
    assert not dep.endpoint("compute").path("input/3").exists()


def test_bad_token(dep):
    _tree(dep.endpoint("beamline").root / "s1", {"f": b"1"})
    task = transfer(dep, ("beamline", "s1"), ("compute", "s1"), token="nope")
    assert task.state == "failed" and "token" in task.reason
    with pytest.raises(AuthError):
        dep.check_token(None)


def test_missing_source(dep):
    task = transfer(dep, ("beamline", "ghost"), ("compute", "ghost"), token=dep.token)
    assert task.state == "failed"


def test_path_escape_rejected(dep):
    with pytest.raises(ValueError):
        dep.endpoint("compute").path("../outside")


def test_checksum_sees_renames(tmp_path):
    a = _tree(tmp_path / "a", {"x": b"1", "y": b"2"})
    b = _tree(tmp_path / "b", {"x": b"1", "z": b"2"})
    assert tree_checksum(a)[0] != tree_checksum(b)[0]


def test_random_trees_never_succeed_with_unequal_checksums(dep):
    import random

    rnd = random.Random(0)
    root = dep.endpoint("beamline").root
    for k in range(15):
        files = {f"d{rnd.randint(0, 2)}/f{i}": os.urandom(rnd.randint(0, 300)) for i in range(rnd.randint(1, 6))}
        _tree(root / f"t{k}", files)
        flip = rnd.random() < 0.5

        def hook(tmp, flip=flip):
            if flip:
                f = sorted(p for p in tmp.rglob("*") if p.is_file())[0]
                f.write_bytes(f.read_bytes() + b"!")

        task = transfer(dep, ("beamline", f"t{k}"), ("compute", f"t{k}"), token=dep.token, fault_hook=hook)
        if task.succeeded:
            assert task.checksum == task.dst_checksum == tree_checksum(dep.endpoint("compute").path(f"t{k}"))[0]
        assert task.succeeded != flip


def test_concurrent_disjoint_transfers(tmp_path):
    dep = Deployment.default(tmp_path, bandwidth=1e6)
    for k in range(4):
        _tree(dep.endpoint("beamline").root / f"scan{k}", {"f": os.urandom(200_000)})
    log = EventLog()
    tasks = []
    threads = [threading.Thread(target=lambda k=k: tasks.append(
        transfer(dep, ("beamline", f"scan{k}"), ("compute", f"input/{k}"), token=dep.token, event_log=log)))
        for k in range(4)]
    t0 = time.monotonic()
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert time.monotonic() - t0 < 0.6  # each paces 0.2 s independently
    assert all(t.succeeded for t in tasks)
    assert sum(t.bytes for t in tasks) == 800_000
    assert len(log.records) == 4


def test_deployment_config_round_trip(tmp_path, dep):
    cfg = tmp_path / "dep.json"
    import json

    cfg.write_text(json.dumps(dep.to_dict()))
    back = load_deployment(cfg)
    assert back.endpoint("compute").root == dep.endpoint("compute").root
    assert back.link("compute", "beamline").bandwidth == 1e9
    with pytest.raises(ConfigError):
        Deployment.from_dict({"endpoints": [{"id": "a", "root": str(tmp_path), "role": "moon"}]})
    with pytest.raises(ConfigError):
        LinkModel(bandwidth=0)


@pytest.fixture(scope="module")
def five_views(tmp_path_factory):
    root = tmp_path_factory.mktemp("views")
    generate_experiment(PhantomSpec(object_shape=(16, 16), probe_shape=(8, 8), step=8, views=5), root)
    return root


def test_replay_order_and_atomicity(tmp_path, five_views):
    dep = Deployment.default(tmp_path)
    beam = dep.endpoint("beamline")
    names = []
    for ev in replay_acquisition(five_views, beam, 0.0, 3):
        # every visible scan directory is complete
        for d in beam.root.iterdir():
            if not d.name.startswith("."):
                assert (d / "meta.json").is_file()
        names.append(ev.scan)
    assert names == ["scan1", "scan2", "scan3"]


def test_replay_interval(tmp_path, five_views):
    dep = Deployment.default(tmp_path)
    times = [ev.time for ev in replay_acquisition(five_views, dep.endpoint("beamline"), 0.1, 5)]
    gaps = [b - a for a, b in zip(times, times[1:])]
    assert len(times) == 5 and min(gaps) >= 0.1 - 0.005


def test_replay_missing_view(tmp_path, five_views):
    dep = Deployment.default(tmp_path)
    with pytest.raises(FileNotFoundError, match="scan9"):
        list(replay_acquisition(five_views, dep.endpoint("beamline"), 0.0, ["scan1", "scan9"]))


def test_replay_extract_prepare_compose(tmp_path, five_views):
    dep = Deployment.default(tmp_path)
    compute = dep.endpoint("compute")
    pairs = [prepare_remote_dirs(compute, extract_scan_id(ev.scan))
             for ev in replay_acquisition(five_views, dep.endpoint("beamline"), 0.0, 5)]
    assert len(set(pairs)) == 5
    assert sorted(p.name for p in (compute.root / "input").iterdir()) == ["1", "2", "3", "4", "5"]
