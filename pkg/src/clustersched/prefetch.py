"""Group-aware prefetching of the next group's head-query clusters.

Each group (except a batch's last) carries a hint naming the next group's
first query and its cluster set. When the group's last member is dispatched
(or completes, depending on ``trigger``), the missing clusters of that set are
read in the background. The read data is admitted to the cache once the last
member has finished, so it cannot displace clusters that member is using,
and the next group's head waits for that admission (up to ``timeout``).
"""

from __future__ import annotations

import enum
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor, TimeoutError as FutureTimeout
from dataclasses import dataclass, field

from .errors import ClusterSchedError, InvalidArgument, ProtocolError

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 5.0


class PrefetchState(enum.Enum):
    IDLE = "idle"
    IN_FLIGHT = "in_flight"
    COMPLETE = "complete"


@dataclass
class GroupProgress:
    group_id: int
    members: tuple
    metadata: object = None  # PrefetchMetadata or None
    remaining: int = 0
    state: PrefetchState = PrefetchState.IDLE
    dispatched: set = field(default_factory=set)
    io_done: float = 0.0  # virtual time the prefetch reads finish
    completed_at: float | None = None  # virtual time the last member finished
    staged: object = None  # LoadResult waiting for admission (virtual mode)
    future: object = None
    done_event: threading.Event = field(default_factory=threading.Event)
    loaded: int = 0


@dataclass
class PrefetchStats:
    issued: int = 0
    completed: int = 0
    clusters_loaded: int = 0
    timeouts: int = 0
    failures: int = 0
    wait_seconds: float = 0.0


def execute_prefetch(fqset, cache, loader) -> int:
    """Synchronously load and admit the non-resident clusters of ``fqset``.

    Resident members are left untouched but shielded from eviction. Storage
    failures are logged and skipped. Returns the number of clusters admitted.
    """
    missing = cache.missing(fqset)
    if not missing:
        return 0
    try:
        result = loader.execute(loader.plan(missing))
        loader.admit(result, cache, prefetch=True, protect=fqset)
    except ClusterSchedError as exc:
        log.warning("prefetch failed: %s", exc)
        return 0
    return len(result.data)


class Prefetcher:
    """Tracks group execution and fires at most one prefetch per group.

    ``virtual`` selects the clock: in virtual mode the caller passes ``now``
    with every event and all work happens inline; otherwise reads run on a
    background thread and :meth:`await_group_head` blocks for real.
    """

    def __init__(self, cache, loader, trigger: str = "dispatch", timeout: float = DEFAULT_TIMEOUT,
                 virtual: bool = True):
        if trigger not in ("dispatch", "completion"):
            raise InvalidArgument(f"prefetch trigger must be 'dispatch' or 'completion', got {trigger!r}")
        self.cache = cache
        self.loader = loader
        self.trigger = trigger
        self.timeout = timeout
        self.virtual = virtual
        self.stats = PrefetchStats()
        self._groups: dict[int, GroupProgress] = {}
        self._order: list[int] = []
        self._lock = threading.Lock()
        self._executor = None if virtual else ThreadPoolExecutor(1, thread_name_prefix="prefetch")

    def close(self):
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    # ------------------------------------------------------------ lifecycle

    def start_batch(self, groups):
        with self._lock:
            self._groups = {g.group_id: GroupProgress(g.group_id, tuple(g.members), g.prefetch, len(g.members))
                            for g in groups}
            self._order = [g.group_id for g in groups]

    def progress(self, group_id) -> GroupProgress:
        try:
            return self._groups[group_id]
        except KeyError:
            raise ProtocolError(f"unknown group {group_id}") from None

    def _member_check(self, gp, query_id):
        if query_id not in gp.members:
            raise ProtocolError(f"query {query_id} is not a member of group {gp.group_id}")

    def on_query_dispatch(self, query_id, group_id, now: float = 0.0) -> bool:
        """Record a dispatch; returns True when this call fired the group's prefetch."""
        gp = self.progress(group_id)
        self._member_check(gp, query_id)
        with self._lock:
            gp.dispatched.add(query_id)
            is_last = len(gp.dispatched) == len(gp.members)
        if is_last and self.trigger == "dispatch":
            return self._fire(gp, now)
        return False

    def on_query_complete(self, query_id, group_id, now: float = 0.0) -> bool:
        gp = self.progress(group_id)
        self._member_check(gp, query_id)
        with self._lock:
            gp.remaining -= 1
            finished = gp.remaining == 0
            if finished:
                gp.completed_at = now
        fired = False
        if finished:
            if self.trigger == "completion":
                fired = self._fire(gp, now)
            gp.done_event.set()
        return fired

    # ------------------------------------------------------------ firing

    def _fire(self, gp: GroupProgress, now: float) -> bool:
        with self._lock:
            if gp.metadata is None or gp.state is not PrefetchState.IDLE:
                return False
            gp.state = PrefetchState.IN_FLIGHT
        self.stats.issued += 1
        fqset = tuple(gp.metadata.fqset)
        if self.virtual:
            missing = self.cache.missing(fqset)
            if missing:
                gp.staged = self.loader.execute(self.loader.plan(missing))
                gp.io_done = now + gp.staged.timing.makespan
            else:
                gp.io_done = now
        else:
            gp.future = self._executor.submit(self._background, gp, fqset)
        return True

    def _background(self, gp, fqset):
        try:
            missing = self.cache.missing(fqset)
            result = self.loader.execute(self.loader.plan(missing), prefetch=True) if missing else None
            gp.done_event.wait()
            if result is not None:
                self._admit(gp, result, fqset)
        except ClusterSchedError as exc:
            self.stats.failures += 1
            log.warning("prefetch for group %d failed: %s", gp.group_id, exc)
        finally:
            gp.state = PrefetchState.COMPLETE
            self.stats.completed += 1

    def _admit(self, gp, result, fqset):
        # only clusters still missing; anything that arrived meanwhile keeps its entry
        still = set(self.cache.missing(fqset))
        for cid in list(result.data):
            if cid not in still:
                del result.data[cid]
        if result.failed:
            self.stats.failures += len(result.failed)
        self.loader.admit(result, self.cache, prefetch=True, protect=fqset)
        gp.loaded = len(result.data)
        self.stats.clusters_loaded += gp.loaded

    # ------------------------------------------------------------ head gate

    def predecessor(self, group_id):
        pos = self._order.index(group_id)
        return self._groups[self._order[pos - 1]] if pos > 0 else None

    def await_group_head(self, group_id, now: float = 0.0) -> float:
        """Block until the predecessor group's prefetch is admitted; returns seconds waited."""
        self.progress(group_id)
        gp = self.predecessor(group_id)
        if gp is None or gp.state is PrefetchState.IDLE:
            return 0.0
        if self.virtual:
            return self._await_virtual(gp, now)
        if gp.future is None:
            return 0.0
        start = time.perf_counter()
        try:
            gp.future.result(timeout=self.timeout)
        except FutureTimeout:
            self.stats.timeouts += 1
        waited = time.perf_counter() - start
        self.stats.wait_seconds += waited
        return waited

    def _await_virtual(self, gp, now):
        if gp.state is PrefetchState.COMPLETE:
            return 0.0
        ready = max(gp.io_done, gp.completed_at if gp.completed_at is not None else now)
        wait = max(0.0, ready - now)
        gp.state = PrefetchState.COMPLETE
        self.stats.completed += 1
        if wait > self.timeout:
            self.stats.timeouts += 1
            self.stats.wait_seconds += self.timeout
            gp.staged = None
            return self.timeout
        if gp.staged is not None:
            self._admit(gp, gp.staged, tuple(gp.metadata.fqset))
            gp.staged = None
        self.stats.wait_seconds += wait
        return wait
