"""Fastgear worker: trains the Sparse Part every step against DFVs served by
the slowgears and sends the per-image DFV gradients back to them.

This module never pulls or updates Dense Part parameters.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from . import rng
from . import transport as tp
from .model import SPARSE, SparsePart, param_names, qualify, sparse_forward_backward, unqualify

log = logging.getLogger(__name__)


@dataclass
class FastgearConfig:
    batch_size: int = 16
    steps: int = 100
    max_inflight: int = 64
    seed: int = 0
    index: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.max_inflight < 1:
            raise ValueError("max_inflight must be >= 1")


class StepMetrics(NamedTuple):
    loss: float
    accuracy: float
    skips: int
    infer_requests: int
    grad_pushes: int


def batch_indices(n: int, batch_size: int, seed: int, index: int = 0) -> Iterator[np.ndarray]:
    """Endless stream of index batches, reshuffled every epoch from a seed.

    A trailing partial batch is dropped unless it is the only one.
    """
    if n < 1:
        raise ValueError("empty shard")
    epoch = 0
    while True:
        perm = rng.permutation(rng.derive(seed, 0xFA57, index, epoch), n)
        full = max(n // batch_size, 1)
        for b in range(full):
            yield perm[b * batch_size:(b + 1) * batch_size]
        epoch += 1


def accuracy(logits: np.ndarray, labels) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


class FastgearWorker:
    def __init__(self, config: FastgearConfig, sparse_layers: list, sparse_dim: int, shard: list,
                 slowgears: list, ps, clock):
        if not shard:
            raise ValueError("fastgear shard is empty")
        self.config = config
        self.layers = sparse_layers
        self.sparse_dim = sparse_dim
        self.shard = shard
        self.slowgears = slowgears
        self.ps = ps
        self.clock = clock
        self.names = param_names(SPARSE, sparse_layers)
        self.rows: list = []
        self.totals = dict(infer_requests=0, grad_pushes=0, skips=0)
        self._batches = batch_indices(len(shard), config.batch_size, config.seed, config.index)
        self.step_count = 0

    @property
    def endpoint(self) -> tp.Endpoint:
        return tp.Endpoint("fastgear", self.config.index)

    def _route(self, image_id: int) -> int:
        return tp.route_image(image_id, len(self.slowgears))

    def fetch_dfvs(self, batch) -> list:
        """Steps 1-3: one INFER_REQ per sample, pipelined up to max_inflight.

        Returns one DFV (or None for a not-found image) per sample.
        """
        out = [None] * len(batch)
        inflight: deque = deque()  # (position, slowgear) in send order

        def receive_oldest():
            pos, sg = inflight.popleft()
            resp = self.slowgears[sg].recv()
            if resp.kind != tp.Kind.INFER_RESP or resp.image_id != batch[pos].image_id:
                raise tp.ProtocolError(f"unexpected reply {resp.kind.name} for image {batch[pos].image_id}")
            if resp.status == tp.STATUS_OK:
                out[pos] = resp.dfv

        for pos, sample in enumerate(batch):
            if len(inflight) >= self.config.max_inflight:
                receive_oldest()
            sg = self._route(sample.image_id)
            self.slowgears[sg].send(tp.InferReq(sample.image_id))
            inflight.append((pos, sg))
        while inflight:
            receive_oldest()
        return out

    def train_step(self, batch) -> StepMetrics:
        if not batch:
            raise ValueError("empty batch")
        dfvs = self.fetch_dfvs(batch)
        kept = [i for i, d in enumerate(dfvs) if d is not None]
        skips = len(batch) - len(kept)
        self.totals["infer_requests"] += len(batch)
        self.totals["skips"] += skips
        if not kept:
            log.warning("fastgear %d: every image in the batch was missing", self.config.index)
            return StepMetrics(float("nan"), float("nan"), skips, len(batch), 0)

        samples = [batch[i] for i in kept]
        xs = np.stack([s.sparse_input for s in samples])
        dfv = np.stack([dfvs[i] for i in kept])
        labels = np.array([s.label for s in samples], dtype=np.int64)

        sparse = SparsePart(self.layers, self.sparse_dim, unqualify(SPARSE, self.ps.pull(self.names)))
        res = sparse_forward_backward(sparse, xs, dfv, labels)
        self.ps.push(qualify(SPARSE, res.grads))
        for s, g in zip(samples, res.dfv_grad):
            self.slowgears[self._route(s.image_id)].send(tp.GradPush(s.image_id, g))
        self.totals["grad_pushes"] += len(samples)
        return StepMetrics(res.loss, accuracy(res.logits, labels), skips, len(batch), len(samples))

    def next_batch(self) -> list:
        return [self.shard[i] for i in next(self._batches)]

    def step(self) -> StepMetrics:
        """Train on the next batch and append a metrics row."""
        m = self.train_step(self.next_batch())
        self.step_count += 1
        self.rows.append({"worker": str(self.endpoint), "step": self.step_count, "time": self.clock.now(),
                          "loss": m.loss, "accuracy": m.accuracy, "skips": self.totals["skips"]})
        return m

    def close(self) -> None:
        for c in self.slowgears:
            c.close()
        self.ps.close()

    def run_epochs(self, steps: int | None = None, on_step=None) -> list:
        """Run ``steps`` (default: config.steps) training steps; returns the rows."""
        for _ in range(self.config.steps if steps is None else steps):
            m = self.step()
            if on_step is not None:
                on_step(self, m)
        return self.rows
