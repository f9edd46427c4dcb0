"""Query grouping by overlap of probed cluster sets.

Two interchangeable similarity kernels produce identical Jaccard matrices:
``hash`` intersects Python sets pair by pair; ``bitmap`` packs each cluster
set into 64-bit words and counts ``popcount(a & b)`` over whole matrices
with no data-dependent branching. Grouping is threshold-stopped
complete-linkage agglomerative clustering on that matrix, so every pair
inside a group has similarity >= theta.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidArgument

DEFAULT_THETA = 0.5
_ROW_CHUNK = 128


@dataclass(frozen=True)
class ClusterBitmap:
    words: np.ndarray  # uint64, ceil(K / 64) words, bit k of word k // 64
    K: int

    @classmethod
    def from_ids(cls, ids: Iterable[int], K: int) -> "ClusterBitmap":
        return cls(pack_bitmaps([ids], K)[0], K)

    def to_ids(self) -> list[int]:
        bits = np.unpackbits(self.words.view(np.uint8), bitorder="little")[: self.K]
        return np.flatnonzero(bits).tolist()

    def popcount(self) -> int:
        return int(np.bitwise_count(self.words).sum())


@dataclass(frozen=True)
class QueryRecord:
    query_id: int
    cluster_set: tuple  # probe order: nearest cluster first
    K: int
    arrival_time: float = 0.0
    embedding: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def clusters(self) -> frozenset:
        return frozenset(self.cluster_set)

    @property
    def bitmap(self) -> ClusterBitmap:
        return ClusterBitmap.from_ids(self.cluster_set, self.K)


@dataclass(frozen=True)
class PrefetchMetadata:
    fq: int  # query id heading the next group
    fqset: tuple  # that query's cluster set


@dataclass(frozen=True)
class QueryGroup:
    group_id: int
    members: tuple  # query ids, arrival order
    union_clusters: frozenset
    prefetch: PrefetchMetadata | None = None

    def __len__(self):
        return len(self.members)

    @property
    def head(self):
        return self.members[0]


# ------------------------------------------------------------------ kernels


def jaccard_hash(a, b) -> float:
    a, b = set(a), set(b)
    union = len(a | b)
    if union == 0:
        return 1.0
    return len(a & b) / union


def jaccard_bitmap(vi: ClusterBitmap, vj: ClusterBitmap) -> float:
    if vi.K != vj.K:
        raise InvalidArgument(f"bitmap widths differ: K={vi.K} vs K={vj.K}")
    inter = int(np.bitwise_count(vi.words & vj.words).sum())
    union = int(np.bitwise_count(vi.words).sum()) + int(np.bitwise_count(vj.words).sum()) - inter
    if union == 0:
        return 1.0
    return inter / union


def pack_bitmaps(cluster_sets: Sequence[Iterable[int]], K: int) -> np.ndarray:
    """(N, ceil(K/64)) uint64 matrix with bit k set when cluster k is in the set."""
    if K < 1:
        raise InvalidArgument("K must be positive")
    n_words = (K + 63) // 64
    dense = np.zeros((len(cluster_sets), n_words * 64), dtype=np.uint8)
    for row, ids in enumerate(cluster_sets):
        ids = np.fromiter(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= K):
            raise InvalidArgument(f"cluster id outside [0, {K})")
        dense[row, ids] = 1
    packed = np.packbits(dense, axis=1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").reshape(len(cluster_sets), n_words)


def bitmap_similarity(words: np.ndarray) -> np.ndarray:
    """All-pairs Jaccard from packed bitmaps via AND + popcount."""
    n = words.shape[0]
    counts = np.bitwise_count(words).sum(axis=1, dtype=np.int64)
    out = np.empty((n, n), dtype=np.float64)
    for start in range(0, n, _ROW_CHUNK):
        block = words[start:start + _ROW_CHUNK]
        inter = np.bitwise_count(block[:, None, :] & words[None, :, :]).sum(axis=2, dtype=np.int64)
        union = counts[start:start + _ROW_CHUNK, None] + counts[None, :] - inter
        empty = union == 0
        np.divide(inter, np.where(empty, 1, union), out=out[start:start + _ROW_CHUNK])
        out[start:start + _ROW_CHUNK][empty] = 1.0
    return out


def paired_bitmap_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise Jaccard of two equally shaped packed bitmap matrices."""
    if a.shape != b.shape:
        raise InvalidArgument(f"bitmap matrices differ in shape: {a.shape} vs {b.shape}")
    inter = np.bitwise_count(a & b).sum(axis=1, dtype=np.int64)
    union = np.bitwise_count(a).sum(axis=1, dtype=np.int64) + np.bitwise_count(b).sum(axis=1, dtype=np.int64) - inter
    out = np.ones(len(a), dtype=np.float64)
    nz = union > 0
    out[nz] = inter[nz] / union[nz]
    return out


def hash_similarity(cluster_sets: Sequence[Iterable[int]]) -> np.ndarray:
    """All-pairs Jaccard by explicit set intersection; the reference path."""
    sets = [set(s) for s in cluster_sets]
    n = len(sets)
    out = np.ones((n, n), dtype=np.float64)
    for i in range(n):
        a = sets[i]
        row = out[i]
        for j in range(i + 1, n):
            b = sets[j]
            union = len(a | b)
            row[j] = len(a & b) / union if union else 1.0
    iu = np.triu_indices(n, 1)
    out[(iu[1], iu[0])] = out[iu]
    return out


def _sets_and_width(records):
    sets = [r.cluster_set for r in records]
    widths = {r.K for r in records}
    if len(widths) > 1:
        raise InvalidArgument(f"records disagree on K: {sorted(widths)}")
    return sets, (widths.pop() if widths else 1)


def pairwise_similarity(records: Sequence[QueryRecord], method: str = "bitmap") -> np.ndarray:
    sets, K = _sets_and_width(records)
    if method == "bitmap":
        return bitmap_similarity(pack_bitmaps(sets, K))
    if method == "hash":
        return hash_similarity(sets)
    raise InvalidArgument(f"unknown similarity method {method!r}")


# ------------------------------------------------------------------ grouping


def complete_linkage(similarity: np.ndarray, theta: float, mergeable=None) -> list[list[int]]:
    """Greedy complete-linkage merging on a similarity matrix.

    Repeatedly merges the two clusters whose least-similar cross pair is
    most similar, as long as that value is >= ``theta``. A cluster is named
    by its smallest member index; among equally good merges the
    lexicographically smallest (left, right) pair wins. Returns member index
    lists sorted by first member.
    """
    S = np.asarray(similarity, dtype=np.float64)
    n = S.shape[0]
    if S.shape != (n, n):
        raise InvalidArgument("similarity matrix must be square")
    if n == 0:
        return []
    # U[a, b] holds the linkage between clusters a < b; everything else -inf
    U = np.triu(S, 1)
    U[np.tril_indices(n)] = -np.inf
    if mergeable is not None:
        blocked = ~np.asarray(mergeable, dtype=bool)
        U[blocked, :] = -np.inf
        U[:, blocked] = -np.inf
    idx = np.arange(n)
    nn = U.argmax(axis=1)
    best = U[idx, nn]
    members = {i: [i] for i in range(n)}

    while True:
        i = int(best.argmax())
        if not best[i] >= theta:
            break
        j = int(nn[i])
        # full symmetric rows of i and j, read from the upper triangle
        row_i = np.where(idx < i, U[:, i], U[i, :])
        row_j = np.where(idx < j, U[:, j], U[j, :])
        merged = np.minimum(row_i, row_j)
        merged[i] = -np.inf
        U[:i, i] = merged[:i]
        U[i, i + 1:] = merged[i + 1:]
        U[j, :] = -np.inf
        U[:, j] = -np.inf
        best[j] = -np.inf
        members[i].extend(members.pop(j))

        stale = _stale_rows(nn, i, j)
        nn[stale] = U[stale].argmax(axis=1)
        best[stale] = U[stale, nn[stale]]

    return [sorted(m) for _, m in sorted(members.items())]


def _stale_rows(nn, i, j):
    below = np.flatnonzero((nn[:i] == i) | (nn[:i] == j))
    between = i + 1 + np.flatnonzero(nn[i + 1:j] == j)
    return np.concatenate([below, [i], between]).astype(np.int64)


def form_groups(records: Sequence[QueryRecord], theta: float = DEFAULT_THETA,
                method: str = "bitmap", similarity: np.ndarray | None = None) -> list[QueryGroup]:
    """Partition a batch into groups whose members are pairwise >= ``theta`` similar.

    Records are taken in arrival order (stable by ``arrival_time``). Groups
    come back ordered by their earliest member; queries with an empty
    cluster set always stay alone.
    """
    if not 0.0 <= theta <= 1.0:
        raise InvalidArgument("theta must be within [0, 1]")
    order = sorted(range(len(records)), key=lambda k: records[k].arrival_time)
    recs = [records[k] for k in order]
    if similarity is None:
        similarity = pairwise_similarity(recs, method)
    else:
        similarity = np.asarray(similarity)[np.ix_(order, order)]
    mergeable = np.array([len(r.cluster_set) > 0 for r in recs], dtype=bool)
    groups = []
    for gid, idxs in enumerate(complete_linkage(similarity, theta, mergeable)):
        union = frozenset().union(*(recs[k].cluster_set for k in idxs))
        groups.append(QueryGroup(gid, tuple(recs[k].query_id for k in idxs), union))
    return groups


def reorder_batch(groups: Sequence[QueryGroup], records: Sequence[QueryRecord]):
    """Flatten groups into execution order and attach next-group prefetch hints.

    Returns ``(order, groups)`` where every group but the last carries
    :class:`PrefetchMetadata` naming the next group's head and its clusters.
    """
    by_id = {r.query_id: r for r in records}
    order = [qid for g in groups for qid in g.members]
    out = []
    for k, g in enumerate(groups):
        meta = None
        if k + 1 < len(groups):
            head = groups[k + 1].head
            meta = PrefetchMetadata(head, tuple(by_id[head].cluster_set))
        out.append(replace(g, prefetch=meta))
    return order, out


def arrival_groups(records: Sequence[QueryRecord]) -> list[QueryGroup]:
    """Arrival-order pseudo grouping: each query its own group, no hints (baseline)."""
    return [QueryGroup(k, (r.query_id,), frozenset(r.cluster_set)) for k, r in enumerate(records)]
