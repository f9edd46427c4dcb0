"""Parallel cluster loading with size-aware (greedy packing) dispatch order."""

from __future__ import annotations

import itertools
import logging
import queue
import threading
import time
from concurrent.futures import Future
from dataclasses import dataclass, field

from .errors import ClusterSchedError, InvalidArgument, StorageError

log = logging.getLogger(__name__)

DEFAULT_THREADS = 8


@dataclass(frozen=True)
class LoadPlan:
    order: tuple  # cluster ids, dispatch order
    thread_groups: tuple  # chunks of at most T ids; order is their concatenation
    T: int
    sizes: dict = field(default_factory=dict, compare=False)

    def __len__(self):
        return len(self.order)

    def worker_queues(self) -> list[list[int]]:
        """Worker w runs order[w], order[w + T], order[w + 2T], ... in turn."""
        return [list(self.order[w::self.T]) for w in range(self.T)]


def _chunk(ids, T):
    return tuple(tuple(ids[k:k + T]) for k in range(0, len(ids), T))


def plan_load(missing, T: int = DEFAULT_THREADS) -> LoadPlan:
    """Load-weighted greedy packing.

    ``missing`` is a sequence of ``(cluster_id, byte_size)``. Clusters are
    sorted largest first (ties by id) and each goes to the earliest thread
    group that still has fewer than ``T`` members.
    """
    if T < 1:
        raise InvalidArgument("T must be >= 1")
    missing = [(int(c), int(s)) for c, s in missing]
    ranked = sorted(missing, key=lambda cs: (-cs[1], cs[0]))
    groups: list[list[int]] = [[] for _ in range(-(-len(ranked) // T))]
    for cid, _ in ranked:
        # earliest group with room; groups fill strictly in order so this is a scan from the front
        g = next(g for g in groups if len(g) < T)
        g.append(cid)
    order = tuple(itertools.chain.from_iterable(groups))
    return LoadPlan(order, tuple(tuple(g) for g in groups), T, dict(missing))


def baseline_round_robin(missing, T: int = DEFAULT_THREADS) -> LoadPlan:
    """Size-oblivious plan: dispatch in the given (arrival / id) order."""
    if T < 1:
        raise InvalidArgument("T must be >= 1")
    missing = [(int(c), int(s)) for c, s in missing]
    ids = [c for c, _ in missing]
    return LoadPlan(tuple(ids), _chunk(ids, T), T, dict(missing))


@dataclass(frozen=True)
class DiskModel:
    """Virtual I/O cost: fixed per-file overhead plus bytes over throughput."""

    throughput: float = 200e6  # bytes / second
    per_file_overhead: float = 2e-4  # seconds

    def cost(self, nbytes: int) -> float:
        return self.per_file_overhead + nbytes / self.throughput


@dataclass
class ThreadTiming:
    worker: int
    cluster_ids: list
    bytes: int = 0
    start: float = 0.0
    end: float = 0.0

    @property
    def seconds(self):
        return self.end - self.start


@dataclass
class LoadTiming:
    threads: list
    makespan: float
    per_cluster: dict  # cluster id -> seconds spent reading it

    @property
    def total_bytes(self):
        return sum(t.bytes for t in self.threads)


def simulate_plan(plan: LoadPlan, cost) -> LoadTiming:
    """Makespan of ``plan`` when each cluster takes ``cost(size)`` seconds."""
    threads, per_cluster = [], {}
    for w, ids in enumerate(plan.worker_queues()):
        t = ThreadTiming(w, ids)
        for cid in ids:
            c = cost(plan.sizes.get(cid, 0))
            per_cluster[cid] = c
            t.bytes += plan.sizes.get(cid, 0)
            t.end += c
        threads.append(t)
    return LoadTiming(threads, max((t.end for t in threads), default=0.0), per_cluster)


def makespan(plan: LoadPlan, cost=lambda s: s) -> float:
    return simulate_plan(plan, cost).makespan


@dataclass
class LoadResult:
    data: dict  # cluster id -> ClusterData
    timing: LoadTiming
    failed: dict = field(default_factory=dict)  # cluster id -> exception


class _WorkerPool:
    """Fixed worker threads draining a priority queue (lower value runs first)."""

    def __init__(self, n):
        self._q: queue.PriorityQueue = queue.PriorityQueue()
        self._seq = itertools.count()
        self._threads = [threading.Thread(target=self._run, daemon=True, name=f"loader-{k}")
                         for k in range(n)]
        for t in self._threads:
            t.start()

    def _run(self):
        while True:
            _, _, item = self._q.get()
            if item is None:
                return
            fn, fut = item
            if fut.set_running_or_notify_cancel():
                try:
                    fut.set_result(fn())
                except BaseException as exc:  # delivered to the waiter
                    fut.set_exception(exc)

    def submit(self, fn, priority=0) -> Future:
        fut: Future = Future()
        self._q.put((priority, next(self._seq), (fn, fut)))
        return fut

    def shutdown(self):
        for _ in self._threads:
            self._q.put((float("inf"), next(self._seq), None))
        for t in self._threads:
            t.join()


DEMAND, PREFETCH = 0, 1


class ClusterLoader:
    """Reads clusters with ``T`` workers following a :class:`LoadPlan`.

    With a ``disk_model`` the data is still read from disk but all reported
    times come from the model, which makes timing deterministic.
    """

    def __init__(self, index, T: int = DEFAULT_THREADS, disk_model: DiskModel | None = None,
                 greedy: bool = True):
        self.index = index
        self.T = T
        self.disk_model = disk_model
        self.greedy = greedy
        self._pool = None if disk_model is not None else _WorkerPool(T)

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def plan(self, cluster_ids) -> LoadPlan:
        missing = [(c, self.index.byte_size(c)) for c in cluster_ids]
        return plan_load(missing, self.T) if self.greedy else baseline_round_robin(missing, self.T)

    def _read_sequence(self, w, ids, t0):
        timing = ThreadTiming(w, list(ids))
        data, failed, per_cluster = {}, {}, {}
        timing.start = time.perf_counter() - t0
        for cid in ids:
            c0 = time.perf_counter()
            try:
                d = self.index.read_cluster(cid)
            except ClusterSchedError as exc:
                failed[cid] = exc
            else:
                data[cid] = d
                timing.bytes += d.nbytes
            per_cluster[cid] = time.perf_counter() - c0
        timing.end = time.perf_counter() - t0
        return timing, data, failed, per_cluster

    def execute(self, plan: LoadPlan, cache=None, prefetch=False, protect=()) -> LoadResult:
        """Load every cluster of ``plan``; optionally admit the results to ``cache``."""
        if not plan.order:
            return LoadResult({}, LoadTiming([], 0.0, {}))
        if self.disk_model is not None:
            result = self._execute_virtual(plan)
        else:
            result = self._execute_threads(plan, PREFETCH if prefetch else DEMAND)
        if cache is not None:
            self.admit(result, cache, prefetch=prefetch, protect=protect)
        return result

    def admit(self, result: LoadResult, cache, prefetch=False, protect=()):
        entries = [(result.data[c], result.timing.per_cluster[c]) for c in result.data]
        if entries:
            cache.admit(entries, protect=protect, prefetch=prefetch)
            cache.record_load(sum(d.nbytes for d, _ in entries), prefetch=prefetch, count=len(entries))

    def _execute_virtual(self, plan):
        data, failed = {}, {}
        for cid in plan.order:
            try:
                data[cid] = self.index.read_cluster(cid)
            except ClusterSchedError as exc:
                log.warning("cluster %d failed to load: %s", cid, exc)
                failed[cid] = exc
        timing = simulate_plan(plan, self.disk_model.cost)
        return LoadResult(data, timing, failed)

    def _execute_threads(self, plan, priority):
        t0 = time.perf_counter()
        futures = [self._pool.submit(lambda w=w, ids=ids: self._read_sequence(w, ids, t0), priority)
                   for w, ids in enumerate(plan.worker_queues()) if ids]
        threads, data, failed, per_cluster = [], {}, {}, {}
        for fut in futures:
            timing, d, f, pc = fut.result()
            threads.append(timing)
            data.update(d)
            failed.update(f)
            per_cluster.update(pc)
        for cid, exc in failed.items():
            log.warning("cluster %d failed to load: %s", cid, exc)
        span = max(t.end for t in threads) - min(t.start for t in threads)
        return LoadResult(data, LoadTiming(threads, span, per_cluster), failed)


def raise_on_failure(result: LoadResult):
    if result.failed:
        cid, exc = next(iter(result.failed.items()))
        raise StorageError(f"cluster {cid} could not be loaded: {exc}") from exc
