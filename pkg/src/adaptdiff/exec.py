"""Execution backends with identical diff semantics.

``InMemBackend`` runs batches on a shared-heap thread pool, ``TaskPoolBackend``
adds per-task dispatch overhead and per-worker accounting (threads by default,
processes optionally), and ``SimBackend`` is a discrete-event stand-in whose
timings and memory come from a seeded ``SimModel``. All three expose the same
submit / next_completion / resize / cancel surface to the scheduler loop.
"""
from __future__ import annotations

import heapq
import itertools
import math
import os
import queue
import threading
import time
from collections import deque
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .diffcore import BatchDescriptor, DiffResult, JobSpec, diff_batch, diff_shard, extract_shard
from .model import INMEM, SIMULATED, TASKPOOL, MiB, windowed_percentile

SAMPLE_INTERVAL = 0.05
MAX_RETRIES = 2
DEFAULT_TASK_OVERHEAD = 0.005


class JobError(Exception):
    """A batch failed more than the retry budget allows."""

    def __init__(self, batch, cause):
        super().__init__(f"batch {batch.batch_id} [{batch.lo}:{batch.hi}) failed: {cause!r}")
        self.batch = batch
        self.cause = cause


@dataclass
class BatchMetrics:
    """Measurements for one completed batch.

    Times are seconds since the job was admitted. ``rss_peak`` and ``cpu_p95``
    are per worker; ``rss_total``/``cpu_total`` scale them by the workers that
    were active, giving the core-equivalents and bytes the controller compares
    against the caps.
    """

    batch_id: int
    start: float
    end: float
    latency: float
    rows: int
    b: int
    k: int
    rss_peak: float
    cpu_p95: float
    bytes_read: float = 0.0
    queue_depth_at_submit: int = 0
    worker_id: str = ""
    active_workers: int = 1
    attempt: int = 0
    rss_attributed: bool = False
    oom: bool = False
    true_mem_total: float | None = None

    def __post_init__(self):
        if self.end < self.start:
            raise ValueError(f"batch {self.batch_id}: end {self.end} before start {self.start}")
        if self.rss_peak < 0:
            raise ValueError(f"batch {self.batch_id}: negative rss_peak")

    @property
    def rss_total(self) -> float:
        return self.rss_peak * self.active_workers

    @property
    def cpu_total(self) -> float:
        return self.cpu_p95 * self.active_workers

    @property
    def config(self):
        return (self.b, self.k)

    def to_dict(self) -> dict:
        return asdict(self)


class Completion(NamedTuple):
    batch: BatchDescriptor
    attempt: int
    result: DiffResult | None
    metrics: BatchMetrics | None
    error: BaseException | None = None


# ---------------------------------------------------------------- simulator


@dataclass(frozen=True)
class SimModel:
    """Ground truth for simulated batches.

    Latency per batch of ``rows`` on ``k`` workers::

        (fixed + rows*(W/bw + prep + delta) + task_overhead)
            * (1 + contention*(k-1)) * max(1, k/cores) + overhead_per_worker*k

    Per-worker memory is ``beta0 + beta1*rows*W + beta2*rows`` plus the
    worker's share of ``shared_bytes`` (the resident tables of a shared heap).
    Noise is multiplicative lognormal; stragglers multiply latency.
    """

    bytes_per_row: float = 200.0
    read_bandwidth: float = 400e6
    prep_per_row: float = 2e-6
    delta_per_row: float = 6e-6
    fixed_per_batch: float = 0.25
    overhead_per_worker: float = 0.01
    contention: float = 0.02
    cores: int = 32
    beta0: float = 256 * MiB
    beta1: float = 10.0
    beta2: float = 64.0
    shared_bytes: float = 0.0
    cpu_util: float = 0.92
    task_overhead: float = 0.0
    taskpool_overhead: float = 0.05
    sigma: float = 0.1
    straggler_prob: float = 0.0
    straggler_factor: float = 3.0
    seed: int = 0

    def truth_latency(self, rows, k):
        per_row = self.bytes_per_row / self.read_bandwidth + self.prep_per_row + self.delta_per_row
        work = self.fixed_per_batch + rows * per_row + self.task_overhead
        slow = (1.0 + self.contention * (k - 1)) * max(1.0, k / self.cores)
        return work * slow + self.overhead_per_worker * k

    def truth_rss(self, rows, k):
        return (self.beta0 + self.beta1 * rows * self.bytes_per_row + self.beta2 * rows
                + self.shared_bytes / k)

    def truth_cpu(self, k):
        return self.cpu_util * min(1.0, self.cores / k)

    def scaled(self, ratio: float) -> "SimModel":
        """The same machine at a different job scale: times and bytes shrink with row counts."""
        return replace(self, fixed_per_batch=self.fixed_per_batch * ratio,
                       overhead_per_worker=self.overhead_per_worker * ratio,
                       task_overhead=self.task_overhead * ratio,
                       taskpool_overhead=self.taskpool_overhead * ratio,
                       beta0=self.beta0 * ratio, shared_bytes=self.shared_bytes * ratio)

    def with_noise(self, sigma=None, straggler_prob=None, seed=None) -> "SimModel":
        return replace(self,
                       sigma=self.sigma if sigma is None else sigma,
                       straggler_prob=self.straggler_prob if straggler_prob is None else straggler_prob,
                       seed=self.seed if seed is None else seed)


def simulate_batch(sim: SimModel, b: int, k: int, batch_id: int, attempt: int = 0,
                   rows: int | None = None) -> BatchMetrics:
    """Metrics for one batch, deterministic in (seed, batch_id, b, k, attempt)."""
    rows = b if rows is None else rows
    lat = sim.truth_latency(rows, k)
    rss = sim.truth_rss(rows, k)
    cpu = sim.truth_cpu(k)
    if sim.sigma > 0 or sim.straggler_prob > 0:
        rng = np.random.default_rng([sim.seed, batch_id, b, k, attempt])
        z = rng.standard_normal(3)
        u = rng.random()
        lat *= math.exp(sim.sigma * z[0])
        rss *= math.exp(sim.sigma * z[1])
        cpu = min(1.0, cpu * math.exp(sim.sigma * z[2]))
        if u < sim.straggler_prob:
            lat *= sim.straggler_factor
    return BatchMetrics(batch_id=batch_id, start=0.0, end=lat, latency=lat, rows=rows, b=b, k=k,
                        rss_peak=rss, cpu_p95=cpu, bytes_read=rows * sim.bytes_per_row,
                        worker_id="sim", active_workers=k, attempt=attempt)


class _Running(NamedTuple):
    end: float
    seq: int
    batch: BatchDescriptor
    attempt: int
    metrics: BatchMetrics


class SimBackend:
    """Discrete-event backend on a virtual clock.

    With a ``JobSpec`` it also computes real verdicts for each batch, so its
    merged result can be compared with the threaded backends; with ``job=None``
    only metrics are produced.
    """

    kind = SIMULATED

    def __init__(self, sim: SimModel, k: int, cpu_cap: int, job: JobSpec | None = None,
                 mem_cap: float | None = None, mode: str = INMEM):
        if mode == TASKPOOL:
            # task pool: no shared resident tables, extra dispatch cost per task
            sim = replace(sim, shared_bytes=0.0, task_overhead=sim.task_overhead + sim.taskpool_overhead)
        self.sim = sim
        self.k = k
        self.cpu_cap = cpu_cap
        self.job = job
        self.mem_cap = mem_cap
        self.mode = mode
        self.clock = 0.0
        self._pending = deque()
        self._running = {}
        self._heap = []
        self._seq = itertools.count()
        self.oom_events = 0

    @property
    def queue_depth(self) -> int:
        return len(self._pending)

    @property
    def active(self) -> int:
        return len(self._running)

    def now(self) -> float:
        return self.clock

    def submit(self, batch: BatchDescriptor, attempt: int = 0, front: bool = False):
        item = (batch, attempt, len(self._pending))
        if front:
            self._pending.appendleft(item)
        else:
            self._pending.append(item)
        self._pump()

    def resize(self, new_k: int):
        resize_check(new_k, self.cpu_cap)
        self.k = new_k
        self._pump()

    def _pump(self):
        while self._pending and len(self._running) < self.k:
            batch, attempt, depth = self._pending.popleft()
            active = len(self._running) + 1
            m = simulate_batch(self.sim, batch.row_budget, self.k, batch.batch_id, attempt, rows=batch.rows)
            own = m.rss_peak
            total = own + sum(r.metrics.rss_peak for r in self._running.values())
            m.start = self.clock
            m.end = self.clock + m.latency
            m.active_workers = active
            m.queue_depth_at_submit = depth
            m.worker_id = f"sim-{len(self._running)}"
            m.true_mem_total = total
            if self.mem_cap is not None and total > self.mem_cap:
                m.oom = True
                self.oom_events += 1
            seq = next(self._seq)
            run = _Running(m.end, seq, batch, attempt, m)
            self._running[seq] = run
            heapq.heappush(self._heap, (m.end, seq))

    def running(self):
        return [(r.batch, r.attempt, r.metrics.start) for r in self._running.values()]

    def cancel(self, batch_id: int, attempt: int | None = None):
        for item in list(self._pending):
            if item[0].batch_id == batch_id and (attempt is None or item[1] == attempt):
                self._pending.remove(item)
        for seq, r in list(self._running.items()):
            if r.batch.batch_id == batch_id and (attempt is None or r.attempt == attempt):
                del self._running[seq]
        self._pump()

    def next_completion(self, timeout: float | None = None):
        while self._heap and self._heap[0][1] not in self._running:
            heapq.heappop(self._heap)
        if not self._heap:
            return None
        t_end, seq = self._heap[0]
        if timeout is not None and self.clock + timeout < t_end:
            self.clock += timeout
            return None
        heapq.heappop(self._heap)
        run = self._running.pop(seq)
        self.clock = max(self.clock, t_end)
        result = diff_batch(self.job, run.batch) if self.job is not None else None
        self._pump()
        return Completion(run.batch, run.attempt, result, run.metrics)

    def close(self):
        self._pending.clear()
        self._running.clear()
        self._heap.clear()


# ---------------------------------------------------------------- sampling


def summarize_samples(rss_samples, cpu_samples):
    """(rss_peak, cpu_p95) from one worker's samples: max RSS, nearest-rank p95 CPU."""
    rss_peak = max(rss_samples) if rss_samples else 0.0
    cpu_p95 = windowed_percentile(cpu_samples, 0.95) if cpu_samples else 0.0
    return rss_peak, cpu_p95


class ResourceSampler:
    """Background sampler of process RSS and per-thread CPU time.

    Per-thread RSS is not observable, so RSS is attributed as process RSS
    divided by active workers and the metric is flagged accordingly.
    """

    def __init__(self, interval: float = SAMPLE_INTERVAL, history: int = 4096):
        import psutil

        self.interval = interval
        self._proc = psutil.Process()
        self._ticks = deque(maxlen=history)
        self._stop = threading.Event()
        self._thread = None
        self._lock = threading.Lock()

    def _tick(self):
        t = time.perf_counter()
        try:
            rss = self._proc.memory_info().rss
            cpu = {th.id: th.user_time + th.system_time for th in self._proc.threads()}
        except Exception:
            return
        with self._lock:
            self._ticks.append((t, rss, cpu))

    def _loop(self):
        while not self._stop.wait(self.interval):
            self._tick()

    def start(self):
        if self._thread is None:
            self._tick()
            self._thread = threading.Thread(target=self._loop, name="adaptdiff-sampler", daemon=True)
            self._thread.start()
        return self

    def stop(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=1.0)
            self._thread = None

    def current_rss(self) -> float:
        return float(self._proc.memory_info().rss)

    def window(self, t0, t1, native_id):
        """RSS and CPU-utilization samples for one thread over [t0, t1]."""
        with self._lock:
            ticks = [tk for tk in self._ticks if t0 <= tk[0] <= t1]
        rss = [tk[1] for tk in ticks]
        util = []
        for (ta, _, ca), (tb, _, cb) in zip(ticks, ticks[1:]):
            if native_id in ca and native_id in cb and tb > ta:
                util.append(max(0.0, (cb[native_id] - ca[native_id]) / (tb - ta)))
        return rss, util


# ---------------------------------------------------------------- pools


def resize_check(new_k, cpu_cap):
    if isinstance(new_k, bool) or not isinstance(new_k, int) or new_k < 1 or new_k > cpu_cap:
        raise ValueError(f"worker count {new_k!r} outside [1, {cpu_cap}]")


def _thread_task(job, batch, overhead):
    t0 = time.perf_counter()
    c0 = time.thread_time()
    if overhead:
        time.sleep(overhead)
    result = diff_batch(job, batch)
    return result, t0, time.perf_counter(), time.thread_time() - c0, threading.get_native_id()


def _process_task(payload, overhead):
    import resource

    t0 = time.perf_counter()
    c0 = time.process_time()
    if overhead:
        time.sleep(overhead)
    keys, rows_a, rows_b, plan = payload
    verdicts = diff_shard(keys, rows_a, rows_b, plan)
    cpu = time.process_time() - c0
    rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024
    return verdicts, t0, time.perf_counter(), cpu, os.getpid(), rss


class _PoolBackend:
    kind = INMEM
    task_overhead = 0.0

    def __init__(self, job: JobSpec, k: int, cpu_cap: int, bytes_per_row: float = 0.0,
                 sampler: ResourceSampler | None = None):
        resize_check(k, cpu_cap)
        self.job = job
        self.k = k
        self.cpu_cap = cpu_cap
        self.bytes_per_row = bytes_per_row
        self._pending = deque()
        self._active = {}
        self._done = queue.Queue()
        self._seq = itertools.count()
        self._discard = set()
        self._executor = self._make_executor()
        self._t0 = time.perf_counter()
        self._sampler = sampler if sampler is not None else ResourceSampler().start()
        self._own_sampler = sampler is None
        job.load()

    def _make_executor(self):
        return ThreadPoolExecutor(max_workers=self.cpu_cap, thread_name_prefix=f"adaptdiff-{self.kind}")

    def _task(self, batch):
        return self._executor.submit(_thread_task, self.job, batch, self.task_overhead)

    @property
    def queue_depth(self) -> int:
        return len(self._pending)

    @property
    def active(self) -> int:
        return len(self._active)

    def now(self) -> float:
        return time.perf_counter() - self._t0

    def submit(self, batch: BatchDescriptor, attempt: int = 0, front: bool = False):
        item = (batch, attempt, len(self._pending))
        if front:
            self._pending.appendleft(item)
        else:
            self._pending.append(item)
        self._pump()

    def resize(self, new_k: int):
        resize_check(new_k, self.cpu_cap)
        self.k = new_k
        self._pump()

    def _pump(self):
        while self._pending and len(self._active) < self.k:
            batch, attempt, depth = self._pending.popleft()
            seq = next(self._seq)
            started = self.now()
            fut = self._task(batch)
            self._active[seq] = (batch, attempt, depth, started, self.k, len(self._active) + 1)
            fut.add_done_callback(lambda f, s=seq: self._done.put((s, f)))

    def running(self):
        return [(b, a, st) for b, a, _, st, _, _ in self._active.values()]

    def cancel(self, batch_id: int, attempt: int | None = None):
        for item in list(self._pending):
            if item[0].batch_id == batch_id and (attempt is None or item[1] == attempt):
                self._pending.remove(item)
        # running threads cannot be interrupted; their results are dropped
        for seq, (b, a, *_rest) in self._active.items():
            if b.batch_id == batch_id and (attempt is None or a == attempt):
                self._discard.add(seq)

    def _metrics(self, batch, attempt, depth, k, active, out):
        _, t0, t1, cpu_s, native_id = out[:5]
        start, end = t0 - self._t0, t1 - self._t0
        wall = max(t1 - t0, 1e-9)
        rss_s, cpu_samples = self._sampler.window(t0, t1, native_id)
        if len(cpu_samples) < 2:
            cpu_samples = [min(1.0, cpu_s / wall)]
        if not rss_s:
            rss_s = [self._sampler.current_rss()]
        rss_peak, cpu_p95 = summarize_samples(rss_s, cpu_samples)
        return BatchMetrics(batch_id=batch.batch_id, start=start, end=end, latency=end - start,
                            rows=batch.rows, b=batch.row_budget, k=k,
                            rss_peak=rss_peak / max(active, 1), cpu_p95=cpu_p95,
                            bytes_read=batch.rows * self.bytes_per_row, queue_depth_at_submit=depth,
                            worker_id=str(native_id), active_workers=active, attempt=attempt,
                            rss_attributed=True)

    def next_completion(self, timeout: float | None = None):
        while True:
            self._pump()
            if not self._active:
                return None
            try:
                seq, fut = self._done.get(timeout=timeout)
            except queue.Empty:
                return None
            batch, attempt, depth, _, k, active = self._active.pop(seq)
            if seq in self._discard:
                self._discard.discard(seq)
                continue
            self._pump()
            exc = fut.exception()
            if exc is not None:
                return Completion(batch, attempt, None, None, exc)
            out = fut.result()
            return Completion(batch, attempt, self._result(batch, out), self._metrics(batch, attempt, depth, k, active, out))

    def _result(self, batch, out):
        return out[0]

    def close(self):
        self._pending.clear()
        self._executor.shutdown(wait=True, cancel_futures=True)
        if self._own_sampler:
            self._sampler.stop()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class InMemBackend(_PoolBackend):
    """Shared-heap thread pool: the whole job lives in this process."""

    kind = INMEM


class TaskPoolBackend(_PoolBackend):
    """Task pool with fixed per-task dispatch overhead.

    ``isolation="thread"`` (default) keeps workers in-process with attributed
    accounting; ``"process"`` ships each shard to a worker process, which then
    reports its own peak RSS.
    """

    kind = TASKPOOL

    def __init__(self, job, k, cpu_cap, bytes_per_row=0.0, sampler=None,
                 task_overhead=DEFAULT_TASK_OVERHEAD, isolation="thread"):
        if isolation not in ("thread", "process"):
            raise ValueError(f"isolation must be 'thread' or 'process', got {isolation!r}")
        self.task_overhead = task_overhead
        self.isolation = isolation
        super().__init__(job, k, cpu_cap, bytes_per_row, sampler)

    def _make_executor(self):
        if self.isolation == "process":
            return ProcessPoolExecutor(max_workers=self.cpu_cap)
        return super()._make_executor()

    def _task(self, batch):
        if self.isolation == "process":
            return self._executor.submit(_process_task, extract_shard(self.job, batch), self.task_overhead)
        return super()._task(batch)

    def _result(self, batch, out):
        if self.isolation == "process":
            return DiffResult(out[0], batch)
        return out[0]

    def _metrics(self, batch, attempt, depth, k, active, out):
        if self.isolation != "process":
            return super()._metrics(batch, attempt, depth, k, active, out)
        _, t0, t1, cpu_s, pid, rss = out
        start, end = t0 - self._t0, t1 - self._t0
        return BatchMetrics(batch_id=batch.batch_id, start=start, end=end, latency=end - start,
                            rows=batch.rows, b=batch.row_budget, k=k, rss_peak=float(rss),
                            cpu_p95=min(1.0, cpu_s / max(t1 - t0, 1e-9)),
                            bytes_read=batch.rows * self.bytes_per_row, queue_depth_at_submit=depth,
                            worker_id=f"pid-{pid}", active_workers=active, attempt=attempt)


def make_backend(kind, job, k, cpu_cap, *, sim=None, mem_cap=None, bytes_per_row=0.0,
                 task_overhead=DEFAULT_TASK_OVERHEAD, isolation="thread", sim_mode=INMEM):
    if kind == INMEM:
        return InMemBackend(job, k, cpu_cap, bytes_per_row)
    if kind == TASKPOOL:
        return TaskPoolBackend(job, k, cpu_cap, bytes_per_row, task_overhead=task_overhead,
                               isolation=isolation)
    if kind in (SIMULATED, "sim"):
        return SimBackend(sim or SimModel(), k, cpu_cap, job=job, mem_cap=mem_cap, mode=sim_mode)
    raise ValueError(f"unknown backend {kind!r}")


def submit_batches(backend, batches, timeout=None):
    """Run ``batches`` to completion on ``backend``, yielding (DiffResult, BatchMetrics).

    Failed batches are retried up to ``MAX_RETRIES`` times before a JobError.
    """
    for batch in batches:
        backend.submit(batch)
    while True:
        c = backend.next_completion(timeout)
        if c is None:
            if backend.active == 0 and backend.queue_depth == 0:
                return
            continue
        if c.error is not None:
            if c.attempt >= MAX_RETRIES:
                raise JobError(c.batch, c.error)
            backend.submit(c.batch, attempt=c.attempt + 1, front=True)
            continue
        yield c.result, c.metrics
