import numpy as np
import pytest

from clustersched.cache import CachePolicy, ClusterCache
from clustersched.engine import (EngineConfig, PartialIndex, SearchEngine, SearchRequest, exact_topk,
                                 make_engine, topk_search)
from clustersched.errors import InvalidArgument
from clustersched.vector_index import CentroidIndex, assign_vectors, open_index, write_index


def brute_force(corpus, q, k):
    """Independent oracle: python-level exact scan with (distance, id) ordering."""
    c = corpus.astype(np.float64)
    d = ((c - q.astype(np.float64)) ** 2).sum(axis=1)
    order = sorted(range(len(c)), key=lambda i: (d[i], i))[:k]
    return order


def requests(queries, k=10, start=0):
    return [SearchRequest(start + i, q, k, arrival_time=float(i)) for i, q in enumerate(queries)]


def test_full_probe_equals_exact_scan(medium_index, medium_corpus):
    rng = np.random.default_rng(5)
    queries = rng.uniform(-1, 1, size=(100, 64)).astype(np.float32)
    with make_engine(medium_index, capacity=100, nprobe=100) as eng:
        results = eng.submit_batch(requests(queries))
    for res in results:
        q = queries[res.query_id]
        assert res.neighbor_ids.tolist() == brute_force(medium_corpus, q, 10)
        ids, dist = exact_topk(medium_corpus, q, 10)
        assert np.array_equal(res.neighbor_ids, ids) and np.array_equal(res.distances, dist)


def test_recall_monotone_in_nprobe(medium_index, medium_corpus):
    rng = np.random.default_rng(6)
    queries = medium_corpus[rng.choice(len(medium_corpus), 50, replace=False)] + \
        rng.normal(0, 0.2, size=(50, 64)).astype(np.float32)
    truth = [set(exact_topk(medium_corpus, q, 10)[0].tolist()) for q in queries]
    recalls = []
    for nprobe in (1, 10, 30, 100):
        with make_engine(medium_index, capacity=100, nprobe=nprobe) as eng:
            res = sorted(eng.submit_batch(requests(queries)), key=lambda r: r.query_id)
        recalls.append(np.mean([len(truth[r.query_id] & set(r.neighbor_ids.tolist())) / 10 for r in res]))
    assert recalls == sorted(recalls) and recalls[-1] == 1.0


def test_self_query_distance_zero(small_index, small_corpus):
    with make_engine(small_index, capacity=20, nprobe=3) as eng:
        (res,) = eng.submit_batch([SearchRequest(0, small_corpus[17], 1)])
    # duplicates in the corpus would share distance 0; the lowest id wins
    assert res.distances[0] == 0.0
    assert res.neighbor_ids[0] == min(np.flatnonzero((small_corpus == small_corpus[17]).all(axis=1)))


def test_single_query_batch_matches_direct_search(small_index, small_corpus):
    q = small_corpus[3] + 0.05
    with make_engine(small_index, capacity=20, nprobe=4) as eng:
        (res,) = eng.submit_batch([SearchRequest(9, q, 5)])
    clusters = [small_index.read_cluster(c) for c in small_index.probe(q, 4)]
    ids, dist = topk_search(q, PartialIndex.from_clusters(clusters, small_index.dim), 5)
    assert np.array_equal(res.neighbor_ids, ids) and np.array_equal(res.distances, dist)
    assert res.query_id == 9 and res.group_id == 0 and res.is_head


def test_topk_empty_and_ties():
    ids, dist = topk_search(np.zeros(2), PartialIndex.from_clusters([], 2), 3)
    assert len(ids) == 0
    p = PartialIndex((0,), np.array([7, 3, 5], np.uint64), np.array([[1, 0], [0, 1], [2, 0]], np.float64))
    ids, dist = topk_search(np.zeros(2), p, 2)
    assert ids.tolist() == [3, 7] and dist.tolist() == [1.0, 1.0]


def test_probe_set_consistency_and_stage_floors(small_index, small_corpus):
    rng = np.random.default_rng(2)
    queries = small_corpus[rng.choice(len(small_corpus), 40, replace=False)]
    with make_engine(small_index, capacity=8, nprobe=5) as eng:
        results = eng.submit_batch(requests(queries))
    assert sorted(r.query_id for r in results) == list(range(40))
    for r in results:
        assert sorted(r.cluster_hits + r.cluster_misses) == sorted(small_index.probe(queries[r.query_id], 5).tolist())
        t = r.timing
        assert r.search_latency >= t.cache_lookup + t.load + t.index_build + t.search - 1e-12
        assert list(r.distances) == sorted(r.distances)


def test_rejects_bad_input(small_index):
    with pytest.raises(InvalidArgument):
        SearchEngine(small_index, config=EngineConfig(scheduler="nope"))
    with make_engine(small_index) as eng:
        with pytest.raises(InvalidArgument):
            eng.submit_batch([SearchRequest(0, np.zeros(5, np.float32))])
        with pytest.raises(InvalidArgument):
            SearchRequest(0, np.zeros(16, np.float32), k=0)


def scenario_index(tmp_path):
    # two pairs of nearby centroids; an "A" query probes {0, 1}, a "B" query probes {2, 3}
    cents = CentroidIndex(np.array([[0, 0], [0.2, 0], [10, 0], [10.2, 0]], np.float32))
    pts = np.concatenate([c + np.random.default_rng(0).normal(0, 0.01, (5, 2)) for c in cents.centroids])
    pts = pts.astype(np.float32)
    write_index(pts, assign_vectors(pts, cents), cents, tmp_path)
    return open_index(tmp_path)


@pytest.mark.parametrize("scheduler,expected", [("baseline_fifo_order", 8), ("call", 0)])
def test_three_entry_scenario(tmp_path, scheduler, expected):
    idx = scenario_index(tmp_path)
    a, b = np.array([0.1, 0], np.float32), np.array([10.1, 0], np.float32)
    qs = [a, b] * 4
    with make_engine(idx, capacity=3, nprobe=2, scheduler=scheduler) as eng:
        eng.cache.admit([(idx.read_cluster(0), 0.0), (idx.read_cluster(1), 0.0)])
        results = eng.submit_batch(requests(qs, k=2))
    assert sum(len(r.cluster_misses) for r in results) == expected


def test_head_hits_with_prefetch_only(tmp_path):
    idx = scenario_index(tmp_path)
    qs = [np.array([0.1, 0], np.float32), np.array([10.1, 0], np.float32)] * 3
    heads = {}
    for prefetch in (True, False):
        with make_engine(idx, capacity=3, nprobe=2, prefetch=prefetch) as eng:
            res = eng.submit_batch(requests(qs, k=2))
        heads[prefetch] = [len(r.cluster_misses) for r in res if r.is_head and r.group_id > 0]
    assert heads[True] == [0] and heads[False] == [2]


def test_storage_failure_yields_error_result(tmp_path):
    idx = scenario_index(tmp_path)
    (tmp_path / idx.manifest.entries[3].path).unlink()
    qs = [np.array([0.1, 0], np.float32), np.array([10.1, 0], np.float32)]
    with make_engine(idx, capacity=4, nprobe=2) as eng:
        res = {r.query_id: r for r in eng.submit_batch(requests(qs, k=2))}
    assert res[0].error is None and len(res[0].neighbor_ids) == 2
    assert "cluster 3" in res[1].error and len(res[1].neighbor_ids) == 0


def test_real_time_mode_matches_virtual(small_index, small_corpus):
    rng = np.random.default_rng(8)
    queries = small_corpus[rng.choice(len(small_corpus), 30, replace=False)] + 0.01
    out = {}
    for virtual in (True, False):
        cfg = EngineConfig(nprobe=6, threads=3, virtual_time=virtual)
        with SearchEngine(small_index, ClusterCache(10), cfg) as eng:
            res = eng.submit_batch(requests(queries))
            res += eng.submit_batch(requests(queries, start=100))
        out[virtual] = {r.query_id: (r.neighbor_ids.tolist(), r.cluster_hits, r.cluster_misses) for r in res}
    assert out[True] == out[False]


def test_search_threads_mode(small_index, small_corpus):
    queries = small_corpus[:20] + 0.01
    cfg = EngineConfig(nprobe=4, virtual_time=False, search_threads=4)
    with SearchEngine(small_index, ClusterCache(20), cfg) as eng:
        res = eng.submit_batch(requests(queries))
    with make_engine(small_index, capacity=20, nprobe=4) as eng:
        ref = eng.submit_batch(requests(queries))
    key = lambda rs: {r.query_id: r.neighbor_ids.tolist() for r in rs}
    assert key(res) == key(ref)


def test_set_policy_and_scheduler(small_index, small_corpus):
    with make_engine(small_index, capacity=10, nprobe=4) as eng:
        eng.set_policy(CachePolicy("fifo"))
        eng.set_scheduler("baseline_fifo_order")
        res = eng.submit_batch(requests(small_corpus[:5]))
        assert [r.query_id for r in res] == list(range(5))
        assert not eng.prefetch_enabled
        with pytest.raises(InvalidArgument):
            eng.set_scheduler("other")
