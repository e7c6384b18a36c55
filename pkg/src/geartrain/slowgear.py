"""Slowgear worker: serves DFV inference through the TTL cache, accumulates
DFV gradients per image and applies slow-cadence Dense Part updates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import transport as tp
from .kvstore import KVStore, NotFound
from .model import DENSE, DensePart, dense_backward, mlp_forward, param_names, unqualify

log = logging.getLogger(__name__)

COUNTERS = ("infer_requests", "dense_forward_count", "cache_hits", "cache_misses", "not_found",
            "grad_pushes", "dense_update_count", "dropped_grad_batches", "dense_pushes", "evicted",
            "leftover_grads")


@dataclass
class SlowgearConfig:
    ttl: float = 0
    M: int = 1
    index: int = 0
    # "coalesce": sum the dense gradients of consecutive ready images into one
    # parameter-server push, flushed before the next INFER_REQ and at shutdown
    # (message order, never timing, decides the groups); "per_image": push
    # after every ready image
    dense_push: str = "coalesce"
    stale_replay: bool = False
    evict_every: int = 64
    record_every: int = 0

    def __post_init__(self):
        if self.ttl < 0:
            raise ValueError("ttl must be >= 0")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.dense_push not in ("coalesce", "per_image"):
            raise ValueError(f"unknown dense_push mode {self.dense_push!r}")


class SlowgearWorker:
    def __init__(self, config: SlowgearConfig, dense_layers: list, kv: KVStore, ps, clock):
        self.config = config
        self.layers = dense_layers
        self.kv = kv
        self.ps = ps
        self.clock = clock
        self.names = param_names(DENSE, dense_layers)
        self.counters = dict.fromkeys(COUNTERS, 0)
        self.rows: list = []
        self._pending: dict | None = None
        self._replay: dict = {}
        self._since_evict = 0
        self._processed = 0
        self.closed = False

    @property
    def endpoint(self) -> tp.Endpoint:
        return tp.Endpoint("slowgear", self.config.index)

    def _current_dense(self) -> DensePart:
        return DensePart(self.layers, unqualify(DENSE, self.ps.pull(self.names)))

    def handle_infer(self, image_id: int, now: float) -> np.ndarray:
        """DFV for ``image_id``; runs the dense forward only on a cache miss."""
        if not self.kv.has_image(image_id):
            self.counters["not_found"] += 1
            raise NotFound(f"image {image_id} not in store")
        self.counters["infer_requests"] += 1
        dfv = self.kv.cache_get_dfv(image_id, now, self.config.ttl)
        if dfv is not None:
            self.counters["cache_hits"] += 1
            return dfv
        self.counters["cache_misses"] += 1
        self.counters["dense_forward_count"] += 1
        dense = self._current_dense()
        raw = self.kv.get_image(image_id)
        out, cache = mlp_forward(dense.layers, dense.params, raw.reshape(1, -1))
        dfv = out[0]
        self.kv.cache_put_dfv(image_id, dfv, now)
        if self.config.stale_replay:
            self._replay[image_id] = (dense, cache)
        return dfv

    def handle_grad_push(self, image_id: int, grad: np.ndarray, now: float) -> bool:
        """Accumulate one DFV gradient. Returns True when it completed a group
        of M and produced a dense update."""
        self.counters["grad_pushes"] += 1
        avg = self.kv.accum_push(image_id, grad, self.config.M)
        if avg is None:
            return False
        if not self.kv.has_image(image_id):
            log.warning("slowgear %d: dropping gradient batch for unknown image %d", self.config.index, image_id)
            self.counters["dropped_grad_batches"] += 1
            return False
        raw = self.kv.get_image(image_id).reshape(1, -1)
        replay = self._replay.get(image_id) if self.config.stale_replay else None
        if replay is not None:
            dense, cache = replay
            grads = dense_backward(dense, raw, avg.reshape(1, -1), cache=cache)
        else:
            grads = dense_backward(self._current_dense(), raw, avg.reshape(1, -1))
        self.counters["dense_update_count"] += 1
        if self.config.dense_push == "per_image":
            self._push(grads)
        elif self._pending is None:
            self._pending = grads
        else:
            for k, g in grads.items():
                self._pending[k] = self._pending[k] + g
        return True

    def _push(self, grads: dict) -> None:
        self.ps.push({f"{DENSE}.{k}": g for k, g in grads.items()})
        self.counters["dense_pushes"] += 1

    def flush(self) -> None:
        """Push any coalesced dense gradient to the parameter servers."""
        if self._pending is not None:
            pending, self._pending = self._pending, None
            self._push(pending)

    def evict(self) -> int:
        n = self.kv.evict_expired(self.clock.now(), self.config.ttl)
        self.counters["evicted"] += n
        for k in [k for k in self._replay if self.kv.cache_entry(k) is None]:
            del self._replay[k]
        return n

    def record(self, step: int) -> dict:
        row = {"worker": str(self.endpoint), "step": step, "time": self.clock.now(), **self.counters}
        self.rows.append(row)
        return row

    # transport endpoint

    def handle(self, msg: tp.Message):
        now = self.clock.now()
        self._processed += 1
        try:
            if msg.kind == tp.Kind.INFER_REQ:
                self.flush()
                try:
                    return tp.InferResp(msg.image_id, self.handle_infer(msg.image_id, now))
                except NotFound:
                    return tp.InferResp(msg.image_id, np.zeros(0, np.float32), tp.STATUS_NOT_FOUND)
            if msg.kind == tp.Kind.GRAD_PUSH:
                self.handle_grad_push(msg.image_id, msg.grad, now)
                return None
            raise tp.ProtocolError(f"slowgear cannot handle {msg.kind.name}")
        finally:
            self._since_evict += 1
            if self._since_evict >= self.config.evict_every:
                self._since_evict = 0
                self.evict()
            if self.config.record_every and self._processed % self.config.record_every == 0:
                self.record(self._processed)

    def shutdown(self) -> None:
        """Flush, then drop partially accumulated gradients (counted)."""
        if self.closed:
            return
        self.closed = True
        self.flush()
        self.counters["leftover_grads"] += self.kv.discard_pending()
        self.ps.close()
        if self.config.record_every:
            self.record(self._processed)

    def run_loop(self, inbox: tp.Inbox) -> None:
        tp.serve(self, inbox)
