"""Experiment runner: builds a gear or nogear topology, trains, and writes
per-worker metrics CSVs plus a JSON summary.

Scheduling
----------
``sync``   Fastgears (or nogear workers) take turns, one step each per round,
           on the calling thread. With ``transport = "inproc"`` every message
           is handled immediately by its receiver, so runs are bit-for-bit
           reproducible. The logical clock advances by one per round.
``async``  Each training worker runs on its own thread; slowgears and
           parameter servers run their receive loops on threads. Requires the
           wall clock.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
import threading
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import transport as tp
from .fastgear import FastgearConfig, FastgearWorker, accuracy, batch_indices
from .kvstore import KVStore, make_clock
from .model import DENSE, SPARSE, DensePart, ModelSpec, SparsePart, monolithic_grads, param_names, qualify, unqualify
from .paramserver import ParamClient, ParamServer, shard_assignment
from .slowgear import COUNTERS, SlowgearConfig, SlowgearWorker

log = logging.getLogger(__name__)

OUTPUT_ENV = "GEARTRAIN_OUTPUT_DIR"
CSV_COLUMNS = ("run_id", "worker", "step", "time", "loss", "accuracy", "dense_forward_count",
               "dense_update_count", "cache_hits", "cache_misses", "skips", "dropped_grad_batches")


class ConfigError(ValueError):
    def __init__(self, field_name: str, msg: str):
        super().__init__(f"{field_name}: {msg}")
        self.field = field_name


class AlignmentError(ValueError):
    pass


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    n: int = 4096
    num_images: int = 256
    sparse_dim: int = 32
    dense_dim: int = 32
    num_classes: int = 10
    class_sep: float = 0.35
    noise: float = 1.0
    seed: int | None = None
    path: str = ""
    limit: int | None = None


@dataclass
class ModelConfig:
    dfv_dim: int = 16
    dense_hidden: tuple = (64,)
    sparse_hidden: tuple = (64,)
    dfv_activation: str = "relu"


@dataclass
class OptimizerSpec:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass
class RunConfig:
    mode: str = "gear"
    num_fastgear: int = 2
    num_slowgear: int = 2
    num_param_servers: int = 1
    ttl: float = 5
    M: int = 1
    clock: str = "logical"
    schedule: str = ""  # default: sync for the logical clock, async for wall
    seed: int = 0
    steps: int = 200
    batch_size: int = 16
    transport: str = "inproc"
    max_inflight: int = 64
    dense_push: str = "coalesce"
    stale_replay: bool = False
    output: str = "runs/default"
    run_id: str = "run"
    resume: str = ""
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)

    @property
    def effective_schedule(self) -> str:
        return self.schedule or ("sync" if self.clock == "logical" else "async")

    def validate(self) -> "RunConfig":
        def need(ok, name, msg):
            if not ok:
                raise ConfigError(name, msg)

        need(self.mode in ("gear", "nogear"), "mode", f"must be gear or nogear, got {self.mode!r}")
        need(self.clock in ("logical", "wall"), "clock", f"must be logical or wall, got {self.clock!r}")
        need(self.effective_schedule in ("sync", "async"), "schedule", "must be sync or async")
        need(not (self.clock == "logical" and self.effective_schedule == "async"), "schedule",
             "the logical clock needs the sync schedule")
        need(self.transport in ("inproc", "socket"), "transport", f"must be inproc or socket, got {self.transport!r}")
        for name in ("num_fastgear", "num_slowgear", "num_param_servers", "steps", "batch_size", "M", "max_inflight"):
            need(getattr(self, name) >= 1, name, "must be >= 1")
        need(self.ttl >= 0, "ttl", "must be >= 0")
        need(self.dense_push in ("coalesce", "per_image"), "dense_push", "must be coalesce or per_image")
        need(self.dataset.kind in ("synthetic", "cifar100"), "dataset.kind", "must be synthetic or cifar100")
        need(self.dataset.kind != "cifar100" or bool(self.dataset.path), "dataset.path", "required for cifar100")
        need(self.model.dfv_dim >= 1, "model.dfv_dim", "must be >= 1")
        if self.mode == "gear" and self.num_slowgear != self.num_fastgear:
            warnings.warn(f"gear run with {self.num_fastgear} fastgears and {self.num_slowgear} slowgears; "
                          "comparisons with nogear assume equal counts", stacklevel=2)
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        flat = {}
        for section in ("topology", "gear", "run"):
            flat.update(data.pop(section, {}) or {})
        flat.update(data)
        nested = {"dataset": DatasetSpec, "model": ModelConfig, "optimizer": OptimizerSpec}
        known = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in flat.items():
            if key not in known:
                raise ConfigError(key, "unknown config key")
            if key in nested:
                sub_known = {f.name for f in dataclasses.fields(nested[key])}
                for k in value:
                    if k not in sub_known:
                        raise ConfigError(f"{key}.{k}", "unknown config key")
                value = dict(value)
                for k in ("dense_hidden", "sparse_hidden"):
                    if k in value:
                        value[k] = tuple(value[k])
                value = nested[key](**value)
            kwargs[key] = value
        return cls(**kwargs)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("dense_hidden", "sparse_hidden"):
            d["model"][k] = list(d["model"][k])
        return d


def load_config(path) -> RunConfig:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as f:
        return RunConfig.from_dict(tomllib.load(f))


# data and model

def load_data(config: RunConfig):
    """Returns (samples, blobs, ModelSpec)."""
    d = config.dataset
    if d.kind == "synthetic":
        seed = config.seed if d.seed is None else d.seed
        samples, blobs = ds.synth_generate(seed, d.n, d.sparse_dim, d.dense_dim, d.num_classes,
                                           num_images=d.num_images, class_sep=d.class_sep, noise=d.noise)
        sparse_dim, dense_dim, classes = d.sparse_dim, d.dense_dim, d.num_classes
    else:
        samples, blobs = ds.cifar_samples(ds.load_cifar100(d.path), d.limit)
        sparse_dim = dense_dim = 16 * 32 * 3
        classes = ds.CIFAR_CLASSES
    m = config.model
    spec = ModelSpec(sparse_dim, dense_dim, m.dfv_dim, classes, tuple(m.dense_hidden), tuple(m.sparse_hidden),
                     m.dfv_activation)
    return samples, blobs, spec


class NogearWorker:
    """Conventional trainer: full forward/backward of both parts every step."""

    def __init__(self, config: FastgearConfig, spec: ModelSpec, shard: list, blobs: dict, ps, clock):
        self.config = config
        self.dense_layers, self.sparse_layers = spec.dense_layers(), spec.sparse_layers()
        self.sparse_dim = spec.sparse_dim
        self.shard, self.blobs = shard, blobs
        self.ps, self.clock = ps, clock
        self.names = param_names(DENSE, self.dense_layers) + param_names(SPARSE, self.sparse_layers)
        self.rows: list = []
        self.counters = dict(dense_forward_count=0, dense_update_count=0)
        self._batches = batch_indices(len(shard), config.batch_size, config.seed, config.index)
        self.step_count = 0

    @property
    def endpoint(self) -> tp.Endpoint:
        return tp.Endpoint("worker", self.config.index)

    def step(self):
        batch = [self.shard[i] for i in next(self._batches)]
        xs, dense_in, labels = ds.stack(batch, self.blobs)
        params = self.ps.pull(self.names)
        dense = DensePart(self.dense_layers, unqualify(DENSE, params))
        sparse = SparsePart(self.sparse_layers, self.sparse_dim, unqualify(SPARSE, params))
        loss, dgrads, sgrads, logits = monolithic_grads(dense, sparse, xs, dense_in, labels)
        self.ps.push({**qualify(DENSE, dgrads), **qualify(SPARSE, sgrads)})
        self.counters["dense_forward_count"] += len(batch)
        self.counters["dense_update_count"] += 1
        self.step_count += 1
        acc = accuracy(logits, labels)
        self.rows.append({"worker": str(self.endpoint), "step": self.step_count, "time": self.clock.now(),
                          "loss": loss, "accuracy": acc, **self.counters})
        return loss, acc

    def close(self) -> None:
        self.ps.close()

    def run_epochs(self, steps: int | None = None):
        for _ in range(self.config.steps if steps is None else steps):
            self.step()
        return self.rows


# topology

class _Network:
    """Creates server endpoints and client connections for one transport."""

    def __init__(self, transport: str, schedule: str):
        self.direct = transport == "inproc" and schedule == "sync"
        self.transport = transport
        self._ends: dict = {}  # id(handler) -> (thread, inbox, socket server or None)

    def serve(self, handler):
        if self.direct:
            return handler
        inbox = tp.Inbox()
        t = threading.Thread(target=tp.serve, args=(handler, inbox), daemon=True, name=type(handler).__name__)
        t.start()
        srv = tp.SocketServer(inbox) if self.transport == "socket" else None
        self._ends[id(handler)] = (t, inbox, srv)
        return handler

    def connect(self, handler):
        if self.direct:
            return tp.DirectConnection(handler)
        _, inbox, srv = self._ends[id(handler)]
        if srv is not None:
            return tp.SocketConnection(srv.address)
        return tp.InprocConnection(inbox)

    def stop(self, handler, timeout: float = 30.0) -> None:
        """SHUTDOWN ``handler`` after everything already sent to it, then wait
        for its loop to exit. Clients must have closed their connections."""
        if self.direct:
            handler.shutdown()
            return
        thread, _, srv = self._ends[id(handler)]
        if not thread.is_alive():
            return
        if srv is not None:
            srv.wait_drained(timeout)
        conn = self.connect(handler)
        conn.send(tp.Shutdown())
        thread.join(timeout)
        conn.close()
        if srv is not None:
            srv.close()


@dataclass
class RunResult:
    config: RunConfig
    summary: dict
    rows: dict  # worker name -> list of row dicts
    params: dict  # qualified name -> final tensor
    output_dir: Path | None = None


def _fmt(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, rows, run_id: str) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        full = {c: r.get(c, "" if c in ("loss", "accuracy") else 0) for c in CSV_COLUMNS}
        full["run_id"] = run_id
        w.writerow([_fmt(full[c]) for c in CSV_COLUMNS])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _round_series(trainers, steps: int, key: str) -> list:
    out = []
    for s in range(steps):
        vals = [t.rows[s][key] for t in trainers if s < len(t.rows)]
        vals = [v for v in vals if not math.isnan(v)]
        out.append(float(np.mean(vals)) if vals else float("nan"))
    return out


def run(config: RunConfig, output: str | os.PathLike | None = None, write: bool = True) -> RunResult:
    config.validate()
    out_dir = Path(output or os.environ.get(OUTPUT_ENV) or config.output)
    schedule = config.effective_schedule
    samples, blobs, spec = load_data(config)
    clock = make_clock(config.clock)
    net = _Network(config.transport, schedule)
    hyper = dataclasses.asdict(config.optimizer)

    dense0, sparse0 = spec.build(config.seed)
    initial = {**qualify(DENSE, dense0.params), **qualify(SPARSE, sparse0.params)}
    servers = [ParamServer(**hyper) for _ in range(config.num_param_servers)]
    assignment = shard_assignment(list(initial), config.num_param_servers)
    if config.resume:
        for i, s in enumerate(servers):
            s.load_snapshot(Path(config.resume) / f"params_ps{i}.bin")
    else:
        for name, value in initial.items():
            servers[assignment[name]].register(name, value)
    for s in servers:
        net.serve(s)

    def ps_client():
        return ParamClient([net.connect(s) for s in servers], assignment)

    slowgears: list = []
    trainers: list = []
    if config.mode == "gear":
        stores = [KVStore(spec.dfv_dim) for _ in range(config.num_slowgear)]
        for image_id, blob in blobs.items():
            stores[tp.route_image(image_id, config.num_slowgear)].put_image(image_id, blob)
        for i in range(config.num_slowgear):
            sg_cfg = SlowgearConfig(ttl=config.ttl, M=config.M, index=i, dense_push=config.dense_push,
                                    stale_replay=config.stale_replay,
                                    record_every=0 if schedule == "sync" else 64)
            slowgears.append(net.serve(SlowgearWorker(sg_cfg, spec.dense_layers(), stores[i], ps_client(), clock)))
        for i in range(config.num_fastgear):
            fg_cfg = FastgearConfig(config.batch_size, config.steps, config.max_inflight, config.seed, i)
            trainers.append(FastgearWorker(fg_cfg, spec.sparse_layers(), spec.sparse_dim,
                                           ds.shard(samples, i, config.num_fastgear),
                                           [net.connect(sg) for sg in slowgears], ps_client(), clock))
    else:
        for i in range(config.num_fastgear):
            cfg = FastgearConfig(config.batch_size, config.steps, config.max_inflight, config.seed, i)
            trainers.append(NogearWorker(cfg, spec, ds.shard(samples, i, config.num_fastgear), blobs,
                                         ps_client(), clock))

    t0 = time.monotonic()
    failure = None
    try:
        if schedule == "sync":
            for r in range(1, config.steps + 1):
                for t in trainers:
                    t.step()
                    if net.direct:
                        for sg in slowgears:
                            sg.flush()
                if r < config.steps:
                    for sg in slowgears:
                        sg.record(r)
                clock.tick()
        else:
            errors: list = []

            def drive(t):
                try:
                    t.run_epochs()
                except Exception as e:  # surfaced after join
                    errors.append(e)

            threads = [threading.Thread(target=drive, args=(t,)) for t in trainers]
            for th in threads:
                th.start()
            for th in threads:
                th.join()
            if errors:
                raise errors[0]
    except Exception as e:
        failure = e
        log.error("run %s failed: %s", config.run_id, e)
    finally:
        for t in trainers:
            t.close()
        for handler in [*slowgears, *servers]:
            try:
                net.stop(handler)
            except tp.Disconnected:
                pass
    elapsed = time.monotonic() - t0
    if schedule == "sync":
        for sg in slowgears:
            # final row is taken after the shutdown flush
            sg.record(len(trainers[0].rows))

    params = {}
    for s in servers:
        values, _ = s.pull(s.names())
        params.update(values)

    rows = {str(t.endpoint): t.rows for t in trainers}
    rows.update({str(sg.endpoint): sg.rows for sg in slowgears})
    summary = _summary(config, trainers, slowgears, elapsed)
    if failure is not None:
        summary["error"] = str(failure)
    result = RunResult(config, summary, rows, params, out_dir if write else None)
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)
        for worker, wrows in rows.items():
            write_csv(out_dir / f"{worker}.csv", wrows, config.run_id)
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
        for i, s in enumerate(servers):
            s.save_snapshot(out_dir / f"params_ps{i}.bin")
    if failure is not None:
        raise RuntimeError(f"run {config.run_id} failed; partial metrics in {out_dir}") from failure
    return result


def _summary(config: RunConfig, trainers, slowgears, elapsed: float) -> dict:
    done = min(len(t.rows) for t in trainers)
    loss = _round_series(trainers, done, "loss")
    acc = _round_series(trainers, done, "accuracy")
    totals = dict.fromkeys(COUNTERS, 0)
    for sg in slowgears:
        for k in COUNTERS:
            totals[k] += sg.counters[k]
    if config.mode == "nogear":
        for t in trainers:
            totals["dense_forward_count"] += t.counters["dense_forward_count"]
            totals["dense_update_count"] += t.counters["dense_update_count"]
    else:
        totals["skips"] = sum(t.totals["skips"] for t in trainers)
    s = {
        "run_id": config.run_id,
        "mode": config.mode,
        "steps": done,
        "ttl": config.ttl,
        "M": config.M,
        "seed": config.seed,
        "final_loss": loss[-1] if loss else None,
        "final_accuracy": acc[-1] if acc else None,
        "logical_time": done,
        "loss": loss,
        "accuracy": acc,
        "totals": totals,
    }
    if config.clock == "wall":
        s["elapsed_seconds"] = elapsed
    return s


# analysis

def smoothed(series, window: int = 20) -> np.ndarray:
    """Trailing moving average (shorter window at the start)."""
    x = np.asarray(series, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def steps_to_threshold(losses, threshold: float, window: int = 20):
    """First 1-based step whose smoothed loss is <= threshold, or None."""
    hit = np.nonzero(smoothed(losses, window) <= threshold)[0]
    return int(hit[0]) + 1 if hit.size else None


def _load_summary(s):
    if isinstance(s, dict):
        return s
    p = Path(s)
    if p.is_dir():
        p = p / "summary.json"
    return json.loads(p.read_text())


def compare(run_a, run_b, threshold: float | None = None, window: int = 20) -> dict:
    """Step-aligned loss/accuracy deltas (b - a) and steps-to-threshold.

    The default threshold is run a's smoothed final loss.
    """
    a, b = _load_summary(run_a), _load_summary(run_b)
    if len(a["loss"]) != len(b["loss"]):
        raise AlignmentError(f"runs have {len(a['loss'])} and {len(b['loss'])} steps")
    la, lb = np.asarray(a["loss"]), np.asarray(b["loss"])
    aa, ab = np.asarray(a["accuracy"]), np.asarray(b["accuracy"])
    if threshold is None:
        threshold = float(smoothed(la, window)[-1]) if la.size else float("nan")
    dl, da = lb - la, ab - aa
    rel = np.abs(dl) / np.maximum(np.abs(la), 1e-12)
    return {
        "steps": int(la.size),
        "loss_delta": dl.tolist(),
        "accuracy_delta": da.tolist(),
        "max_abs_loss_delta": float(np.max(np.abs(dl))) if dl.size else 0.0,
        "max_rel_loss_delta": float(np.max(rel)) if rel.size else 0.0,
        "max_abs_accuracy_delta": float(np.max(np.abs(da))) if da.size else 0.0,
        "threshold": threshold,
        "steps_to_threshold": {"a": steps_to_threshold(la, threshold, window),
                               "b": steps_to_threshold(lb, threshold, window)},
    }


def ttl_sweep(base: RunConfig, ttls, baseline_steps: int | None = None, window: int = 20,
              output: str | os.PathLike | None = None, write: bool = True) -> dict:
    """One gear run per ttl (same seed) plus a nogear baseline that sets the
    loss threshold: its smoothed loss after ``baseline_steps`` steps."""
    ttls = list(ttls)
    if len(ttls) < 2:
        raise ValueError("ttl_sweep needs at least two ttl values")
    root = Path(output or os.environ.get(OUTPUT_ENV) or base.output)
    bsteps = baseline_steps or base.steps
    baseline = run(replace(base, mode="nogear", steps=bsteps, run_id=f"{base.run_id}-nogear"),
                   output=root / "nogear", write=write)
    threshold = float(smoothed(baseline.summary["loss"], window)[-1])
    rows = []
    for ttl in ttls:
        res = run(replace(base, mode="gear", ttl=ttl, run_id=f"{base.run_id}-ttl{ttl:g}"),
                  output=root / f"ttl_{ttl:g}", write=write)
        rows.append({
            "ttl": ttl,
            "steps_to_threshold": steps_to_threshold(res.summary["loss"], threshold, window),
            "dense_forward_count": res.summary["totals"]["dense_forward_count"],
            "final_loss": res.summary["final_loss"],
        })
    table = {"threshold": threshold, "baseline_steps": bsteps, "rows": rows}
    if write:
        root.mkdir(parents=True, exist_ok=True)
        (root / "sweep.json").write_text(json.dumps(table, indent=1, sort_keys=True) + "\n")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["ttl", "steps_to_threshold", "dense_forward_count", "final_loss"])
        for r in rows:
            w.writerow([_fmt(r["ttl"]), _fmt(r["steps_to_threshold"]), r["dense_forward_count"],
                        _fmt(r["final_loss"])])
        (root / "sweep.csv").write_text(buf.getvalue(), encoding="utf-8")
    return table
