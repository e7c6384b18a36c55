"""Parameter servers holding named tensors with server-side Adam state.

Updates are atomic per tensor and there is no locking across tensors, so
concurrent workers see the usual ASGD semantics: a pull may mix versions of
different tensors but never returns a torn tensor.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass

import numpy as np

from . import transport as tp
from .tensor import AdamState, DimensionError, adam_apply


@dataclass
class _Slot:
    value: np.ndarray
    state: AdamState
    version: int
    lock: threading.Lock


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class ParamServer:
    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.hyper = dict(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)
        self._slots: dict[str, _Slot] = {}
        self._lock = threading.Lock()

    def register(self, name: str, init: np.ndarray) -> None:
        value = _frozen(np.array(init, dtype=np.float32, copy=True))
        with self._lock:
            if name in self._slots:
                raise ValueError(f"parameter {name!r} already registered")
            self._slots[name] = _Slot(value, AdamState.fresh(value, **self.hyper), 0, threading.Lock())

    def names(self) -> list:
        with self._lock:
            return list(self._slots)

    def _slot(self, name: str) -> _Slot:
        try:
            return self._slots[name]
        except KeyError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def pull(self, names) -> tuple[dict, dict]:
        values, versions = {}, {}
        for name in names:
            slot = self._slot(name)
            with slot.lock:
                values[name], versions[name] = slot.value, slot.version
        return values, versions

    def push_grad(self, name: str, grad: np.ndarray) -> int:
        slot = self._slot(name)
        grad = np.asarray(grad, dtype=np.float32)
        if grad.shape != slot.value.shape:
            raise DimensionError(f"gradient for {name!r} has shape {grad.shape}, expected {slot.value.shape}")
        with slot.lock:
            value, slot.state = adam_apply(slot.value, grad, slot.state)
            slot.value = _frozen(value)
            slot.version += 1
            return slot.version

    def adam_state(self, name: str) -> AdamState:
        return self._slot(name).state

    # wire endpoint

    def handle(self, msg: tp.Message):
        if msg.kind == tp.Kind.PARAM_PULL_REQ:
            values, versions = self.pull(msg.names)
            return tp.ParamPullResp(tuple((n, versions[n], values[n]) for n in msg.names))
        if msg.kind == tp.Kind.PARAM_GRAD_PUSH:
            # acknowledged with the updated tensors so that pushes are ordered
            # before the pusher's next request on any connection
            names = [n for n, _ in msg.grads]
            for name, grad in msg.grads:
                self.push_grad(name, grad)
            values, versions = self.pull(names)
            return tp.ParamPullResp(tuple((n, versions[n], values[n]) for n in names))
        raise tp.ProtocolError(f"parameter server cannot handle {msg.kind.name}")

    def shutdown(self) -> None:
        pass

    # snapshots: b"GTPS", u32 count, then per tensor:
    # str name, u64 version, u64 adam_t, tensor value, tensor m, tensor v

    def save_snapshot(self, path) -> None:
        parts = []
        with self._lock:
            items = list(self._slots.items())
        for name, slot in items:
            with slot.lock:
                parts += [tp.pack_str(name), struct.pack("<QQ", slot.version, slot.state.t),
                          tp.pack_tensor(slot.value), tp.pack_tensor(slot.state.m), tp.pack_tensor(slot.state.v)]
        with open(path, "wb") as f:
            f.write(b"GTPS" + struct.pack("<I", len(items)) + b"".join(parts))

    def load_snapshot(self, path) -> None:
        with open(path, "rb") as f:
            data = f.read()
        if data[:4] != b"GTPS":
            raise tp.FramingError("not a parameter snapshot")
        r = tp.Reader(memoryview(data), 4)
        (n,) = r.unpack("<I")
        slots = {}
        for _ in range(n):
            name = r.string()
            version, t = r.unpack("<QQ")
            value, m, v = r.tensor(), r.tensor(), r.tensor()
            state = AdamState(m=m, v=v, t=t, **self.hyper)
            slots[name] = _Slot(_frozen(value), state, version, threading.Lock())
        with self._lock:
            self._slots = slots


def shard_assignment(names, num_servers: int) -> dict:
    """Round-robin by registration order."""
    if num_servers < 1:
        raise ValueError("num_servers must be >= 1")
    return {name: i % num_servers for i, name in enumerate(names)}


class ParamClient:
    """Worker-side view of a group of parameter servers."""

    def __init__(self, conns: list, assignment: dict):
        self.conns = conns
        self.assignment = assignment
        self.versions: dict[str, int] = {}

    def _group(self, names):
        groups: dict[int, list] = {}
        for n in names:
            if n not in self.assignment:
                raise KeyError(f"unknown parameter {n!r}")
            groups.setdefault(self.assignment[n], []).append(n)
        return groups

    def _collect(self, server: int, out: dict) -> None:
        resp = self.conns[server].recv()
        if resp.kind != tp.Kind.PARAM_PULL_RESP:
            raise tp.ProtocolError(f"expected PARAM_PULL_RESP, got {resp.kind.name}")
        for name, version, value in resp.entries:
            out[name] = value
            self.versions[name] = version

    def pull(self, names) -> dict:
        groups = self._group(names)
        for server, group in groups.items():
            self.conns[server].send(tp.ParamPullReq(tuple(group)))
        out: dict = {}
        for server in groups:
            self._collect(server, out)
        return out

    def close(self) -> None:
        for c in self.conns:
            c.close()

    def push(self, grads: dict) -> dict:
        """Push gradients; returns the updated tensors from the acks."""
        groups = self._group(grads)
        for server, group in groups.items():
            self.conns[server].send(tp.ParamGradPush(tuple((n, grads[n]) for n in group)))
        out: dict = {}
        for server in groups:
            self._collect(server, out)
        return out
