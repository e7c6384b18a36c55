"""Gear training: a sparse/dense split model whose dense half is trained at a
slower cadence through a TTL-expiring feature cache and M-way averaged
gradient accumulation."""

from .harness import RunConfig, compare, load_config, run, ttl_sweep

__all__ = ["RunConfig", "compare", "load_config", "run", "ttl_sweep"]
__version__ = "0.1.0"
