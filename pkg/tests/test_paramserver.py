import threading

import numpy as np
import pytest

from geartrain import transport as tp
from geartrain.paramserver import ParamClient, ParamServer, shard_assignment
from geartrain.tensor import DimensionError
from oracles import adam64


def test_register_then_pull():
    ps = ParamServer()
    x = np.arange(6, dtype=np.float32).reshape(2, 3)
    ps.register("w", x)
    values, versions = ps.pull(["w"])
    np.testing.assert_array_equal(values["w"], x)
    assert versions == {"w": 0}
    assert ps.pull([]) == ({}, {})


def test_duplicate_and_unknown():
    ps = ParamServer()
    ps.register("w", np.zeros(2))
    with pytest.raises(ValueError):
        ps.register("w", np.zeros(2))
    with pytest.raises(KeyError):
        ps.pull(["nope"])
    with pytest.raises(KeyError):
        ps.push_grad("nope", np.zeros(2))
    with pytest.raises(DimensionError):
        ps.push_grad("w", np.zeros(3))


def test_many_names():
    ps = ParamServer()
    for i in range(100):
        ps.register(f"p{i}", np.full(3, i, np.float32))
    values, _ = ps.pull(ps.names())
    assert len(values) == 100 and values["p42"][0] == 42


def test_zero_grad_bumps_version_and_t():
    ps = ParamServer()
    ps.register("w", np.ones(3))
    assert ps.push_grad("w", np.zeros(3)) == 1
    values, versions = ps.pull(["w"])
    np.testing.assert_array_equal(values["w"], np.ones(3))
    assert versions["w"] == 1 and ps.adam_state("w").t == 1


def test_two_pushes_match_reference():
    r = np.random.default_rng(0)
    x = r.normal(size=5).astype(np.float32)
    g1, g2 = r.normal(size=5).astype(np.float32), r.normal(size=5).astype(np.float32)
    ps = ParamServer(lr=1e-3)
    ps.register("w", x)
    ps.push_grad("w", g1)
    ps.push_grad("w", g2)
    assert np.max(np.abs(ps.pull(["w"])[0]["w"] - adam64(x, [g1, g2], lr=1e-3))) < 1e-6


def test_concurrent_zero_grad_pushes_count_exactly():
    ps = ParamServer()
    ps.register("w", np.ones(64))
    n_threads, per = 8, 200

    def worker():
        for _ in range(per):
            ps.push_grad("w", np.zeros(64))

    ts = [threading.Thread(target=worker) for _ in range(n_threads)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    values, versions = ps.pull(["w"])
    assert versions["w"] == n_threads * per
    np.testing.assert_array_equal(values["w"], np.ones(64))


def test_no_torn_reads():
    # every push moves all elements together, so a consistent tensor has all
    # entries equal; a torn read would mix two values
    ps = ParamServer(lr=1e-2)
    ps.register("w", np.zeros(4096))
    stop = threading.Event()
    bad = []

    def reader():
        while not stop.is_set():
            v = ps.pull(["w"])[0]["w"]
            if not np.all(v == v[0]):
                bad.append(v)

    th = threading.Thread(target=reader)
    th.start()
    for _ in range(300):
        ps.push_grad("w", np.ones(4096))
    stop.set()
    th.join()
    assert not bad
    assert ps.pull(["w"])[1]["w"] == 300


def test_pulled_tensor_is_immutable_snapshot():
    ps = ParamServer()
    ps.register("w", np.zeros(2))
    v = ps.pull(["w"])[0]["w"]
    with pytest.raises(ValueError):
        v[0] = 1
    ps.push_grad("w", np.ones(2))
    assert v[0] == 0


def test_snapshot_round_trip(tmp_path):
    ps = ParamServer(lr=1e-2)
    ps.register("a", np.arange(6, dtype=np.float32).reshape(3, 2))
    ps.register("b", np.ones(4))
    for _ in range(3):
        ps.push_grad("a", np.full((3, 2), 0.5))
    ps.save_snapshot(tmp_path / "s.bin")
    other = ParamServer(lr=1e-2)
    other.load_snapshot(tmp_path / "s.bin")
    for n in ("a", "b"):
        assert other.pull([n])[0][n].tobytes() == ps.pull([n])[0][n].tobytes()
        assert other.pull([n])[1] == ps.pull([n])[1]
        assert other.adam_state(n).t == ps.adam_state(n).t
    # continuing from the snapshot equals continuing the original
    ps.push_grad("a", np.ones((3, 2)))
    other.push_grad("a", np.ones((3, 2)))
    assert other.pull(["a"])[0]["a"].tobytes() == ps.pull(["a"])[0]["a"].tobytes()
    other.save_snapshot(tmp_path / "t.bin")
    ps.save_snapshot(tmp_path / "u.bin")
    assert (tmp_path / "t.bin").read_bytes() == (tmp_path / "u.bin").read_bytes()


def test_bad_snapshot(tmp_path):
    (tmp_path / "x").write_bytes(b"nope")
    with pytest.raises(tp.FramingError):
        ParamServer().load_snapshot(tmp_path / "x")


def test_wire_handling():
    ps = ParamServer()
    ps.register("w", np.ones(2))
    resp = ps.handle(tp.ParamPullReq(("w",)))
    assert resp.entries[0][0] == "w" and resp.entries[0][1] == 0
    ack = ps.handle(tp.ParamGradPush((("w", np.zeros(2, np.float32)),)))
    assert ack.entries[0][1] == 1
    with pytest.raises(tp.ProtocolError):
        ps.handle(tp.InferReq(1))


def test_shard_assignment_round_robin():
    assert shard_assignment(["a", "b", "c", "d", "e"], 2) == {"a": 0, "b": 1, "c": 0, "d": 1, "e": 0}
    with pytest.raises(ValueError):
        shard_assignment(["a"], 0)


def test_client_routes_to_owning_server():
    servers = [ParamServer(), ParamServer()]
    names = ["a", "b", "c"]
    assign = shard_assignment(names, 2)
    for n in names:
        servers[assign[n]].register(n, np.zeros(1))
    client = ParamClient([tp.DirectConnection(s) for s in servers], assign)
    assert set(client.pull(names)) == set(names)
    client.push({"a": np.ones(1, np.float32), "b": np.ones(1, np.float32)})
    assert servers[0].pull(["a"])[1]["a"] == 1 and servers[1].pull(["b"])[1]["b"] == 1
    assert servers[0].pull(["c"])[1]["c"] == 0
    assert client.versions["a"] == 1
    with pytest.raises(KeyError):
        client.pull(["zzz"])
