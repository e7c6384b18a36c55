"""In-memory store with three independent tables keyed by image id.

* raw dense inputs (``put_image`` / ``get_image``)
* the DFV inference cache with TTL expiry
* per-image DFV-gradient accumulation lists

Every table has its own lock, so callers on different threads never see a
half-applied update and operations on one table never block another.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError


class NotFound(KeyError):
    pass


class LogicalClock:
    """Monotone clock that only moves when ``tick`` is called."""

    mode = "logical"

    def __init__(self, start: float = 0):
        self._now = start
        self._lock = threading.Lock()

    def now(self) -> float:
        return self._now

    def tick(self, n: float = 1) -> float:
        if n < 0:
            raise ValueError("clock cannot move backwards")
        with self._lock:
            self._now += n
            return self._now


class WallClock:
    """Seconds since construction, from ``time.monotonic``."""

    mode = "wall"

    def __init__(self):
        self._t0 = time.monotonic()

    def now(self) -> float:
        return time.monotonic() - self._t0

    def tick(self, n: float = 1) -> float:
        return self.now()


def make_clock(mode: str):
    if mode == "logical":
        return LogicalClock()
    if mode == "wall":
        return WallClock()
    raise ValueError(f"unknown clock mode {mode!r}")


@dataclass(frozen=True)
class DfvEntry:
    dfv: np.ndarray
    created_at: float


class KVStore:
    def __init__(self, dfv_dim: int | None = None):
        self.dfv_dim = dfv_dim
        self._images: dict[int, np.ndarray] = {}
        self._cache: dict[int, DfvEntry] = {}
        self._grads: dict[int, list] = {}
        self._img_lock = threading.Lock()
        self._cache_lock = threading.Lock()
        self._grad_lock = threading.Lock()

    # raw inputs

    def put_image(self, image_id: int, blob: np.ndarray) -> None:
        blob = np.array(blob, copy=True)
        blob.setflags(write=False)
        with self._img_lock:
            self._images[image_id] = blob

    def get_image(self, image_id: int) -> np.ndarray:
        with self._img_lock:
            try:
                return self._images[image_id]
            except KeyError:
                raise NotFound(f"image {image_id} not in store") from None

    def has_image(self, image_id: int) -> bool:
        with self._img_lock:
            return image_id in self._images

    def num_images(self) -> int:
        with self._img_lock:
            return len(self._images)

    # DFV cache

    def cache_put_dfv(self, image_id: int, dfv: np.ndarray, now: float) -> None:
        dfv = np.array(dfv, copy=True)
        dfv.setflags(write=False)
        with self._cache_lock:
            self._cache[image_id] = DfvEntry(dfv, now)

    def cache_get_dfv(self, image_id: int, now: float, ttl: float):
        """Cached DFV if younger than ``ttl``, else None. Age == ttl is a miss."""
        if ttl < 0:
            raise ValueError("ttl must be >= 0")
        with self._cache_lock:
            entry = self._cache.get(image_id)
        if entry is None or now - entry.created_at >= ttl:
            return None
        return entry.dfv

    def cache_entry(self, image_id: int):
        with self._cache_lock:
            return self._cache.get(image_id)

    def evict_expired(self, now: float, ttl: float) -> int:
        with self._cache_lock:
            stale = [k for k, e in self._cache.items() if now - e.created_at >= ttl]
            for k in stale:
                del self._cache[k]
        return len(stale)

    def cache_size(self) -> int:
        with self._cache_lock:
            return len(self._cache)

    # gradient accumulation

    def accum_push(self, image_id: int, grad: np.ndarray, m: int):
        """Append ``grad``; on the M-th push return the mean and clear the list.

        Returns None while fewer than ``m`` gradients are pending.
        """
        if m < 1:
            raise ValueError("M must be >= 1")
        grad = np.asarray(grad)
        if grad.ndim != 1 or (self.dfv_dim is not None and grad.shape[0] != self.dfv_dim):
            raise DimensionError(f"gradient shape {grad.shape} does not match dfv_dim {self.dfv_dim}")
        with self._grad_lock:
            pending = self._grads.setdefault(image_id, [])
            if pending and pending[0].shape != grad.shape:
                raise DimensionError(f"gradient shape {grad.shape} != pending {pending[0].shape}")
            pending.append(np.array(grad, copy=True))
            if len(pending) < m:
                return None
            del self._grads[image_id]
        return np.mean(np.stack(pending).astype(np.float64), axis=0).astype(grad.dtype)

    def pending_count(self, image_id: int) -> int:
        with self._grad_lock:
            return len(self._grads.get(image_id, ()))

    def discard_pending(self) -> int:
        """Drop every partially accumulated list; returns how many gradients were dropped."""
        with self._grad_lock:
            n = sum(len(v) for v in self._grads.values())
            self._grads.clear()
        return n
