"""Batch search pipeline: probe, group, reorder, cache, load, partial index, top-k."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .cache import CachePolicy, ClusterCache, PolicyKind
from .errors import CacheFullError, ClusterSchedError, InvalidArgument
from .grouping import (DEFAULT_THETA, QueryRecord, arrival_groups, form_groups,
                       reorder_batch)
from .loader import ClusterLoader, DiskModel
from .prefetch import Prefetcher
from .vector_index import DiskIndex, as_matrix

log = logging.getLogger(__name__)

SCHEDULERS = ("call", "baseline_fifo_order")


@dataclass(frozen=True)
class EngineConfig:
    nprobe: int = 30
    k: int = 10
    theta: float = DEFAULT_THETA
    threads: int = 8
    scheduler: str = "call"
    prefetch: bool = True
    prefetch_trigger: str = "dispatch"
    prefetch_timeout: float = 5.0
    greedy_loading: bool = True  # only consulted by the call scheduler
    grouping_method: str = "bitmap"
    metric: str = "l2"
    virtual_time: bool = True
    disk_throughput: float = 50e6
    per_file_overhead: float = 5e-4
    lookup_cost: float = 1e-6  # virtual seconds per cluster id looked up
    build_cost_per_vector: float = 2e-8
    search_cost_per_vector: float = 5e-8
    search_threads: int = 1
    # frequency/cost-driven periodic prefetch used only by baseline variants
    baseline_prefetch: str = "none"  # none | frequent | costly
    baseline_prefetch_degree: int = 20
    baseline_prefetch_period: float = 60.0


@dataclass
class SearchRequest:
    query_id: int
    embedding: np.ndarray
    k: int = 10
    nprobe: int | None = None
    arrival_time: float = 0.0

    def __post_init__(self):
        if self.k < 1:
            raise InvalidArgument("k must be >= 1")


@dataclass
class StageTiming:
    cache_lookup: float = 0.0
    load: float = 0.0
    index_build: float = 0.0
    search: float = 0.0
    prefetch_wait: float = 0.0

    @property
    def end_to_end(self):
        return self.prefetch_wait + self.cache_lookup + self.load + self.index_build + self.search


@dataclass
class SearchResult:
    query_id: int
    neighbor_ids: np.ndarray
    distances: np.ndarray
    timing: StageTiming
    cluster_set: tuple = ()
    cluster_hits: list = field(default_factory=list)
    cluster_misses: list = field(default_factory=list)
    group_id: int = 0
    is_head: bool = False
    position: int = 0
    arrival_time: float = 0.0
    dispatch_time: float = 0.0
    finish_time: float = 0.0
    bytes_read: int = 0
    load_plan: tuple = ()
    thread_seconds: tuple = ()  # per loader worker, for this query's demand load
    error: str | None = None

    @property
    def neighbors(self):
        return list(zip(self.neighbor_ids.tolist(), self.distances.tolist()))

    @property
    def search_latency(self):
        return self.timing.end_to_end

    @property
    def total_latency(self):
        return self.finish_time - self.arrival_time


@dataclass
class PartialIndex:
    cluster_ids: tuple
    ids: np.ndarray
    vectors: np.ndarray  # float64 rows aligned with ids

    @classmethod
    def from_clusters(cls, clusters, dim):
        clusters = list(clusters)
        if not clusters:
            return cls((), np.empty(0, np.uint64), np.empty((0, dim), np.float64))
        return cls(tuple(c.cluster_id for c in clusters),
                   np.concatenate([c.vector_ids for c in clusters]),
                   np.concatenate([c.wide for c in clusters]))

    def __len__(self):
        return len(self.ids)


def distances(query, vectors, metric="l2") -> np.ndarray:
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    v = np.asarray(vectors, dtype=np.float64)
    if metric == "l2":
        diff = v - q
        return np.einsum("ij,ij->i", diff, diff)
    if metric == "ip":
        return -(v @ q)
    raise InvalidArgument(f"unknown metric {metric!r}")


def rank(ids, dist, k):
    """Indices of the k best (smallest distance, then smallest id) candidates."""
    if len(dist) > k:
        kth = np.partition(dist, k - 1)[k - 1]
        cand = np.flatnonzero(dist <= kth)
    else:
        cand = np.arange(len(dist))
    order = np.lexsort((ids[cand], dist[cand]))
    return cand[order[:k]]


def topk_search(query, partial: PartialIndex, k: int, metric="l2"):
    """Exact top-k over a partial index; returns (ids, distances) ascending."""
    if len(partial) == 0:
        return np.empty(0, np.uint64), np.empty(0, np.float64)
    d = distances(query, partial.vectors, metric)
    sel = rank(partial.ids, d, k)
    return partial.ids[sel], d[sel]


class SearchEngine:
    """Runs batches of queries against a :class:`DiskIndex` through a cluster cache.

    In virtual-time mode, stage durations come from a cost model (disk
    throughput and per-file overhead for I/O, per-vector costs for compute),
    so every logical decision and every reported time is reproducible. In
    real-time mode stages are timed with a monotonic clock.
    """

    def __init__(self, index: DiskIndex, cache: ClusterCache | None = None,
                 config: EngineConfig | None = None):
        self.index = index
        self.config = config or EngineConfig()
        if self.config.scheduler not in SCHEDULERS:
            raise InvalidArgument(f"scheduler must be one of {SCHEDULERS}")
        self.cache = cache if cache is not None else ClusterCache()
        self.now = 0.0
        self.batches = 0
        self.grouping_times: list[float] = []
        self._last_baseline_prefetch = None
        self._build_io()

    def _build_io(self):
        c = self.config
        model = DiskModel(c.disk_throughput, c.per_file_overhead) if c.virtual_time else None
        self.loader = ClusterLoader(self.index, c.threads, model,
                                    greedy=c.greedy_loading and c.scheduler == "call")
        self.prefetcher = Prefetcher(self.cache, self.loader, c.prefetch_trigger,
                                     c.prefetch_timeout, virtual=c.virtual_time)

    def close(self):
        self.prefetcher.close()
        self.loader.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # ------------------------------------------------------------ knobs

    def set_policy(self, policy: CachePolicy):
        self.cache.set_policy(policy)

    def set_scheduler(self, mode: str):
        if mode not in SCHEDULERS:
            raise InvalidArgument(f"scheduler must be one of {SCHEDULERS}")
        self.close()
        self.config = replace(self.config, scheduler=mode)
        self._build_io()

    @property
    def prefetch_enabled(self):
        return self.config.scheduler == "call" and self.config.prefetch and self.config.search_threads == 1

    # ------------------------------------------------------------ batch

    def submit_batch(self, requests, now: float | None = None) -> list[SearchResult]:
        """Execute one batch; results are returned in execution order."""
        requests = list(requests)
        if not requests:
            return []
        if now is not None:
            self.now = max(self.now, now)
        c = self.config
        emb = as_matrix([r.embedding for r in requests], self.index.dim)
        sets = self._probe(requests, emb)
        records = [QueryRecord(r.query_id, tuple(s), self.index.K, r.arrival_time)
                   for r, s in zip(requests, sets)]
        if len({r.query_id for r in requests}) != len(requests):
            raise InvalidArgument("query ids within a batch must be unique")

        if c.scheduler == "call":
            t0 = time.perf_counter()
            groups = form_groups(records, c.theta, c.grouping_method)
            order, groups = reorder_batch(groups, records)
            self.grouping_times.append(time.perf_counter() - t0)
        else:
            groups = arrival_groups(records)
        by_id = {r.query_id: (r, row, rec) for row, (r, rec) in enumerate(zip(requests, records))}

        if self.prefetch_enabled:
            self.prefetcher.start_batch(groups)
        batch_id = self.batches
        self.batches += 1

        plan = [(g, pos, qid) for g in groups for pos, qid in enumerate(g.members)]
        if c.search_threads > 1 and not c.virtual_time:
            with ThreadPoolExecutor(c.search_threads) as pool:
                results = list(pool.map(lambda item: self._run_query(item, by_id, emb, batch_id), plan))
        else:
            results = [self._run_query(item, by_id, emb, batch_id) for item in plan]
        for k, res in enumerate(results):
            res.position = k
        return results

    def _probe(self, requests, emb):
        nprobes = [r.nprobe or self.config.nprobe for r in requests]
        if len(set(nprobes)) == 1:
            return self.index.probe_many(emb, nprobes[0]).tolist()
        return [self.index.probe(emb[k], n).tolist() for k, n in enumerate(nprobes)]

    # ------------------------------------------------------------ query

    def _run_query(self, item, by_id, emb, batch_id) -> SearchResult:
        group, pos, qid = item
        req, row, rec = by_id[qid]
        c = self.config
        virtual = c.virtual_time
        prefetch = self.prefetch_enabled
        timing = StageTiming()
        is_head = pos == 0

        if prefetch and is_head:
            timing.prefetch_wait = self.prefetcher.await_group_head(group.group_id, self.now)
            if virtual:
                self.now += timing.prefetch_wait
        if virtual:
            self._maybe_baseline_prefetch()
            self.cache.window_tick(self.now)
        else:
            self.cache.window_tick(time.monotonic())
        dispatch_time = self.now - timing.prefetch_wait if virtual else time.perf_counter()

        t0 = time.perf_counter_ns()
        hits, misses = self.cache.lookup(rec.cluster_set)
        self.cache.pin(hits)
        timing.cache_lookup = (c.lookup_cost * len(rec.cluster_set) if virtual
                               else (time.perf_counter_ns() - t0) * 1e-9)

        error = None
        loaded = {}
        bytes_read = 0
        load_plan = ()
        thread_seconds = ()
        pinned = list(hits)
        if misses:
            lp = self.loader.plan(misses)
            load_plan = lp.order
            result = self.loader.execute(lp)
            loaded = result.data
            timing.load = result.timing.makespan
            thread_seconds = tuple(t.seconds for t in result.timing.threads)
            bytes_read = sum(d.nbytes for d in loaded.values())
            if result.failed:
                cid, exc = next(iter(result.failed.items()))
                error = f"storage error on cluster {cid}: {exc}"
            try:
                self.loader.admit(result, self.cache)
                self.cache.pin(loaded)
                pinned += list(loaded)
            except CacheFullError:
                # every resident entry is in use by concurrent searches; search uncached
                self.cache.record_load(bytes_read)
        if virtual:
            self.now += timing.cache_lookup + timing.load

        if prefetch:
            self.prefetcher.on_query_dispatch(qid, group.group_id, self.now)

        try:
            if error is None:
                clusters = [loaded[cid] if cid in loaded else self.cache.get(cid) for cid in rec.cluster_set]
                t1 = time.perf_counter_ns()
                partial = PartialIndex.from_clusters(clusters, self.index.dim)
                t2 = time.perf_counter_ns()
                ids, dist = topk_search(emb[row], partial, req.k, c.metric)
                t3 = time.perf_counter_ns()
                if virtual:
                    timing.index_build = c.build_cost_per_vector * len(partial)
                    timing.search = c.search_cost_per_vector * len(partial)
                else:
                    timing.index_build = (t2 - t1) * 1e-9
                    timing.search = (t3 - t2) * 1e-9
            else:
                ids, dist = np.empty(0, np.uint64), np.empty(0, np.float64)
        finally:
            self.cache.unpin(pinned)
        if virtual:
            self.now += timing.index_build + timing.search
            finish = self.now
        else:
            finish = time.perf_counter()

        if prefetch:
            self.prefetcher.on_query_complete(qid, group.group_id, self.now)

        return SearchResult(
            query_id=qid, neighbor_ids=ids, distances=dist, timing=timing,
            cluster_set=rec.cluster_set, cluster_hits=hits, cluster_misses=misses,
            group_id=group.group_id, is_head=is_head, arrival_time=req.arrival_time,
            dispatch_time=dispatch_time, finish_time=finish, bytes_read=bytes_read,
            load_plan=load_plan, thread_seconds=thread_seconds, error=error)

    def _maybe_baseline_prefetch(self):
        c = self.config
        if c.baseline_prefetch == "none":
            return
        period_start = self.now - (self.now % c.baseline_prefetch_period)
        if self._last_baseline_prefetch is not None and period_start <= self._last_baseline_prefetch:
            return
        first = self._last_baseline_prefetch is None
        self._last_baseline_prefetch = period_start
        if first:
            return
        if c.baseline_prefetch == "frequent":
            ids = self.cache.top_frequent(c.baseline_prefetch_degree)
        elif c.baseline_prefetch == "costly":
            ids = self.cache.top_costly(c.baseline_prefetch_degree)
        else:
            raise InvalidArgument(f"unknown baseline_prefetch {c.baseline_prefetch!r}")
        missing = self.cache.missing(ids)[: self.cache.evictable_room(ids)]
        if missing:
            try:
                result = self.loader.execute(self.loader.plan(missing))
                self.loader.admit(result, self.cache, prefetch=True, protect=ids)
            except ClusterSchedError as exc:
                log.warning("baseline prefetch failed: %s", exc)


def exact_topk(corpus, query, k, metric="l2", ids=None):
    """Exhaustive scan over the whole corpus; reference for search correctness."""
    corpus = np.asarray(corpus, dtype=np.float32)
    ids = np.arange(len(corpus), dtype=np.uint64) if ids is None else np.asarray(ids, dtype=np.uint64)
    d = distances(query, corpus, metric)
    order = np.lexsort((ids, d))[:k]
    return ids[order], d[order]


def make_engine(index, policy="lru", capacity=50, **config) -> SearchEngine:
    cache = ClusterCache(capacity, CachePolicy(PolicyKind(policy)))
    return SearchEngine(index, cache, EngineConfig(**config))
