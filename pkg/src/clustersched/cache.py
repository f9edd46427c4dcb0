"""Fixed-capacity cluster cache with LRU, CLRU, WLRU and FIFO replacement."""

from __future__ import annotations

import threading
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum

from .errors import CacheFullError, InvalidArgument
from .vector_index import ClusterData

DEFAULT_CAPACITY = 50
DEFAULT_WINDOW_LENGTH = 60.0
DEFAULT_WINDOW_TOP_N = 10
LATENCY_SMOOTHING = 0.5


class PolicyKind(str, Enum):
    LRU = "lru"
    CLRU = "clru"
    WLRU = "wlru"
    FIFO = "fifo"


@dataclass(frozen=True)
class CachePolicy:
    kind: PolicyKind = PolicyKind.LRU
    window_length: float = DEFAULT_WINDOW_LENGTH
    window_top_n: int = DEFAULT_WINDOW_TOP_N

    def __post_init__(self):
        kind = self.kind if isinstance(self.kind, PolicyKind) else PolicyKind(str(self.kind).lower())
        object.__setattr__(self, "kind", kind)
        if self.window_length <= 0:
            raise InvalidArgument("window_length must be positive")
        if self.window_top_n < 1:
            raise InvalidArgument("window_top_n must be positive")


@dataclass
class CacheEntry:
    cluster_id: int
    data: ClusterData
    insert_seq: int
    last_access_seq: int
    access_count: int = 0
    load_latency: float = 0.0
    prefetched: bool = False

    @property
    def nbytes(self):
        return self.data.nbytes


@dataclass
class CacheStats:
    lookups: int = 0
    hits: int = 0
    misses: int = 0
    bytes_read_from_disk: int = 0
    prefetch_bytes: int = 0
    prefetched: int = 0
    evictions: int = 0
    hit_ratio_series: list = field(default_factory=list)

    @property
    def hit_ratio(self) -> float:
        return self.hits / max(1, self.lookups)


class ClusterCache:
    """Thread-safe cache of :class:`ClusterData` keyed by cluster id.

    Capacity is counted in entries; ``byte_budget`` optionally adds a byte
    limit on top. Victims are picked at admission time. Pinned entries (in
    use by a running search) and ids passed as ``protect`` are never evicted.

    CLRU ranks victims by ``access_count * load_latency`` (lowest first, ties
    by least recent use). Both factors are per-cluster lifetime figures that
    survive eviction, with the latency exponentially smoothed.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY, policy: CachePolicy | None = None,
                 byte_budget: int | None = None):
        if capacity < 1:
            raise InvalidArgument("capacity must be positive")
        self.capacity = capacity
        self.byte_budget = byte_budget
        self._lock = threading.RLock()
        self._entries: dict[int, CacheEntry] = {}
        self._pins: Counter = Counter()
        self._seq = 0
        self._freq: Counter = Counter()
        self._latency: dict[int, float] = {}
        self._window_counts: Counter = Counter()
        self._window_start: float | None = None
        self._stats = CacheStats()
        self.policy = CachePolicy()
        self.set_policy(policy or CachePolicy())

    # ------------------------------------------------------------ config

    def set_policy(self, policy: CachePolicy):
        if policy.kind is PolicyKind.WLRU and policy.window_top_n > self.capacity:
            raise InvalidArgument("window_top_n exceeds cache capacity")
        with self._lock:
            self.policy = policy
            self._window_counts.clear()
            self._window_start = None

    def clear(self):
        """Drop all entries, history and statistics."""
        with self._lock:
            self._entries.clear()
            self._pins.clear()
            self._freq.clear()
            self._latency.clear()
            self._window_counts.clear()
            self._window_start = None
            self._stats = CacheStats()
            self._seq = 0

    # ------------------------------------------------------------ queries

    def __len__(self):
        return len(self._entries)

    def __contains__(self, cluster_id):
        return cluster_id in self._entries

    def resident_ids(self) -> list[int]:
        with self._lock:
            return sorted(self._entries)

    def entry(self, cluster_id) -> CacheEntry | None:
        return self._entries.get(cluster_id)

    def get(self, cluster_id) -> ClusterData | None:
        """Return resident data without touching recency or statistics."""
        e = self._entries.get(cluster_id)
        return None if e is None else e.data

    @property
    def resident_bytes(self) -> int:
        return sum(e.nbytes for e in self._entries.values())

    def _next_seq(self):
        self._seq += 1
        return self._seq

    def lookup(self, ids) -> tuple[list[int], list[int]]:
        """Split ``ids`` into (hits, misses), both in input order.

        Every id counts as one access for CLRU frequency and the WLRU window.
        """
        ids = list(dict.fromkeys(int(i) for i in ids))
        with self._lock:
            hits, misses = [], []
            for cid in ids:
                self._freq[cid] += 1
                self._window_counts[cid] += 1
                e = self._entries.get(cid)
                if e is None:
                    misses.append(cid)
                    continue
                e.last_access_seq = self._next_seq()
                e.access_count = self._freq[cid]
                hits.append(cid)
            s = self._stats
            s.lookups += len(ids)
            s.hits += len(hits)
            s.misses += len(misses)
            if ids:
                s.hit_ratio_series.append(len(hits) / len(ids))
            return hits, misses

    def missing(self, ids) -> list[int]:
        """Ids not resident, without counting a lookup."""
        with self._lock:
            return [int(i) for i in ids if int(i) not in self._entries]

    # ------------------------------------------------------------ pinning

    def pin(self, ids):
        with self._lock:
            for cid in ids:
                self._pins[int(cid)] += 1

    def unpin(self, ids):
        with self._lock:
            for cid in ids:
                cid = int(cid)
                if self._pins[cid] <= 1:
                    self._pins.pop(cid, None)
                else:
                    self._pins[cid] -= 1

    def pinned(self) -> set[int]:
        with self._lock:
            return set(self._pins)

    # ------------------------------------------------------------ admission

    def _score(self, e: CacheEntry):
        kind = self.policy.kind
        if kind is PolicyKind.FIFO:
            return (e.insert_seq,)
        if kind is PolicyKind.CLRU:
            return (self._freq[e.cluster_id] * self._latency.get(e.cluster_id, 0.0), e.last_access_seq)
        return (e.last_access_seq,)

    def _candidates(self, exclude):
        return sorted((e for cid, e in self._entries.items()
                       if cid not in exclude and cid not in self._pins), key=self._score)

    def evictable_room(self, protect=()) -> int:
        """How many new entries could be admitted right now."""
        with self._lock:
            free = self.capacity - len(self._entries)
            return free + len(self._candidates(set(protect)))

    def admit(self, entries, protect=(), prefetch=False) -> list[int]:
        """Insert ``(ClusterData, load_latency)`` pairs, evicting as needed.

        Returns the evicted cluster ids in eviction order. Already-resident
        ids only refresh their latency figure.
        """
        entries = list(entries)
        if len(entries) > self.capacity:
            raise InvalidArgument(f"admission batch of {len(entries)} exceeds capacity {self.capacity}")
        with self._lock:
            fresh = []
            for data, latency in entries:
                self._observe_latency(data.cluster_id, latency)
                if data.cluster_id not in self._entries:
                    fresh.append((data, latency))
            overflow = len(self._entries) + len(fresh) - self.capacity
            exclude = {d.cluster_id for d, _ in entries} | {int(p) for p in protect}
            victims = self._candidates(exclude)
            evicted = []
            if overflow > 0:
                if overflow > len(victims):
                    raise CacheFullError(f"need {overflow} victims, only {len(victims)} evictable")
                evicted = [v.cluster_id for v in victims[:overflow]]
                victims = victims[overflow:]
            if self.byte_budget is not None:
                incoming = sum(d.nbytes for d, _ in fresh)
                used = sum(e.nbytes for cid, e in self._entries.items() if cid not in evicted)
                for v in victims:
                    if used + incoming <= self.byte_budget:
                        break
                    evicted.append(v.cluster_id)
                    used -= v.nbytes
                if used + incoming > self.byte_budget:
                    raise CacheFullError("byte budget cannot be met")
            for cid in evicted:
                del self._entries[cid]
            self._stats.evictions += len(evicted)
            for data, latency in fresh:
                seq = self._next_seq()
                self._entries[data.cluster_id] = CacheEntry(
                    data.cluster_id, data, insert_seq=seq, last_access_seq=seq,
                    access_count=self._freq[data.cluster_id],
                    load_latency=self._latency[data.cluster_id], prefetched=prefetch)
            return evicted

    def _observe_latency(self, cid, latency):
        old = self._latency.get(cid)
        self._latency[cid] = latency if old is None else (
            LATENCY_SMOOTHING * latency + (1 - LATENCY_SMOOTHING) * old)
        e = self._entries.get(cid)
        if e is not None:
            e.load_latency = self._latency[cid]

    def record_load(self, nbytes: int, prefetch=False, count=1):
        with self._lock:
            if prefetch:
                self._stats.prefetch_bytes += nbytes
                self._stats.prefetched += count
            else:
                self._stats.bytes_read_from_disk += nbytes

    # ------------------------------------------------------------ WLRU

    def window_tick(self, now: float) -> list[int]:
        """Advance the WLRU window clock; returns ids evicted at boundaries."""
        if self.policy.kind is not PolicyKind.WLRU:
            return []
        with self._lock:
            if self._window_start is None:
                self._window_start = now
                return []
            if now < self._window_start:
                raise InvalidArgument("window_tick time went backwards")
            evicted = []
            length = self.policy.window_length
            while now >= self._window_start + length:
                keep = set(self.top_frequent(self.policy.window_top_n))
                for cid in sorted(self._entries):
                    if cid not in keep and cid not in self._pins:
                        del self._entries[cid]
                        evicted.append(cid)
                self._window_counts.clear()
                self._window_start += length
            self._stats.evictions += len(evicted)
            return evicted

    def top_frequent(self, n: int) -> list[int]:
        """Most accessed ids in the current window, ties by lower id."""
        with self._lock:
            ranked = sorted(self._window_counts.items(), key=lambda kv: (-kv[1], kv[0]))
            return [cid for cid, _ in ranked[:n]]

    def top_costly(self, n: int) -> list[int]:
        """Ids with the highest smoothed load latency seen so far, ties by lower id."""
        with self._lock:
            ranked = sorted(self._latency.items(), key=lambda kv: (-kv[1], kv[0]))
            return [cid for cid, _ in ranked[:n]]

    # ------------------------------------------------------------ stats

    def stats(self) -> CacheStats:
        with self._lock:
            s = self._stats
            return CacheStats(s.lookups, s.hits, s.misses, s.bytes_read_from_disk,
                              s.prefetch_bytes, s.prefetched, s.evictions,
                              list(s.hit_ratio_series))
