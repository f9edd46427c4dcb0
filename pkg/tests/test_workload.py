import itertools
import math

import numpy as np
import pytest

from clustersched.errors import CorruptionError, InvalidArgument
from clustersched.grouping import jaccard_hash
from clustersched.vector_index import build_index
from clustersched.workload import (CorpusParams, OverlapProfile, TrafficConfig, WorkloadTrace, gen_traffic,
                                   make_trace, read_embeddings, read_trace, synth_corpus, synth_queries,
                                   write_embeddings, write_trace)


def test_single_topic_zero_spread():
    x = synth_corpus(50, 8, 1, 0.0, seed=4)
    assert np.all(x == x[0])
    assert np.all(np.abs(x[0]) <= 1)


def test_corpus_deterministic_and_validated():
    assert np.array_equal(synth_corpus(100, 4, 3, 0.2, 9), synth_corpus(100, 4, 3, 0.2, 9))
    assert not np.array_equal(synth_corpus(100, 4, 3, 0.2, 9), synth_corpus(100, 4, 3, 0.2, 10))
    with pytest.raises(InvalidArgument):
        synth_corpus(10, 4, 0, 0.2)


def test_cluster_sizes_are_uneven(medium_index):
    counts = np.array([e.vector_count for e in medium_index.manifest.entries], dtype=float)
    assert counts.std() / counts.mean() > 0


def test_query_overlap_profiles(medium_index):
    params = CorpusParams(10000, 64, 100, 0.3, 11)

    def sets(profile, n=200, seed=3):
        q = synth_queries(params, n, profile, seed)
        return [set(s) for s in medium_index.probe_many(q, 30).tolist()], q

    same, q = sets(OverlapProfile(1.0, 0.0))
    assert np.all(q == q[0])
    assert all(s == same[0] for s in same)

    # no repeats and flat popularity: overlap within the stream matches independent draws
    fresh, _ = sets(OverlapProfile(0.0, topic_skew=0.0))
    mc, _ = sets(OverlapProfile(0.0, topic_skew=0.0), seed=99)
    pairs = lambda ss: [jaccard_hash(a, b) for a, b in itertools.combinations(ss[:80], 2)]
    assert abs(np.mean(pairs(fresh)) - np.mean([jaccard_hash(a, b) for a, b in zip(fresh[:80], mc[:80])])) < 0.05

    default, _ = sets(OverlapProfile())
    shares = []
    for start in range(0, len(default) - 10, 10):
        w = default[start:start + 10]
        far = [jaccard_hash(w[i], w[j]) >= 0.5 for i in range(10) for j in range(i + 2, 10)]
        shares.append(np.mean(far))
    assert np.mean(shares) >= 0.2


def test_traffic_exponential_rate():
    t = gen_traffic(TrafficConfig(base_rate=100, burst_probability=0, duration=120, seed=2))
    assert len(t) > 10_000
    assert abs(len(t) / 120 - 100) / 100 < 0.05
    assert np.all(np.diff(t) > 0) and t[0] > 0


def test_weibull_shape_one_is_exponential():
    t = gen_traffic(TrafficConfig(base_rate=50, burst_probability=0, duration=2100, seed=5))
    gaps = np.diff(np.concatenate([[0.0], t]))[:100_000]
    n, mean = len(gaps), 1 / 50
    assert n == 100_000
    assert abs(gaps.mean() - mean) <= 3 * mean / math.sqrt(n)
    # variance of an exponential is mean^2; the sample variance has sd ~ mean^2 * sqrt(8/n)
    assert abs(gaps.var() - mean**2) <= 3 * mean**2 * math.sqrt(8 / n)


def test_weibull_mean_for_other_shapes():
    for shape in (0.7, 2.0):
        t = gen_traffic(TrafficConfig(base_rate=100, burst_probability=0, weibull_shape=shape,
                                      duration=200, seed=1))
        assert abs(len(t) / 200 - 100) / 100 < 0.05


def test_bursts_raise_rate_and_multiplier_one_is_neutral():
    base = TrafficConfig(base_rate=100, burst_probability=0.0, duration=300, seed=3)
    bursty = TrafficConfig(base_rate=100, burst_probability=0.5, burst_multiplier=3, duration=300, seed=3)
    flat = TrafficConfig(base_rate=100, burst_probability=0.5, burst_multiplier=1, duration=300, seed=3)
    assert len(gen_traffic(bursty)) > 1.3 * len(gen_traffic(base))
    assert abs(len(gen_traffic(flat)) / 300 - 100) / 100 < 0.05


def test_traffic_validation_and_determinism():
    cfg = TrafficConfig(duration=10, seed=8)
    assert np.array_equal(gen_traffic(cfg), gen_traffic(cfg))
    with pytest.raises(InvalidArgument):
        gen_traffic(TrafficConfig(duration=0))
    with pytest.raises(InvalidArgument):
        TrafficConfig(base_rate=0)
    with pytest.raises(InvalidArgument):
        TrafficConfig(burst_multiplier=0.5)
    with pytest.raises(InvalidArgument):
        TrafficConfig(burst_probability=1.5)


def test_trace_roundtrip(tmp_path):
    tr = make_trace(TrafficConfig(duration=5, seed=1), CorpusParams(100, 8, 4, 0.2, 1), seed=1)
    write_trace(tr, tmp_path)
    back = read_trace(tmp_path)
    assert back.arrivals.tobytes() == tr.arrivals.tobytes()
    assert np.array_equal(back.query_ids, tr.query_ids)
    assert back.embeddings.tobytes() == tr.embeddings.tobytes()
    again = make_trace(TrafficConfig(duration=5, seed=1), CorpusParams(100, 8, 4, 0.2, 1), seed=1)
    assert again.arrivals.tobytes() == tr.arrivals.tobytes() and again.embeddings.tobytes() == tr.embeddings.tobytes()


def test_trace_corruption(tmp_path):
    tr = WorkloadTrace(np.array([0.5, 0.2]), np.array([0, 1]), np.zeros((2, 3), np.float32))
    write_trace(tr, tmp_path)
    with pytest.raises(CorruptionError):
        read_trace(tmp_path)
    (tmp_path / "events.jsonl").write_text('{"t": 0.1, "qid": 5}\n')
    with pytest.raises(CorruptionError):
        read_trace(tmp_path)
    (tmp_path / "events.jsonl").write_text('not json\n')
    with pytest.raises(CorruptionError):
        read_trace(tmp_path)


def test_embedding_file(tmp_path):
    x = np.arange(12, dtype=np.float32).reshape(4, 3)
    write_embeddings(x, tmp_path / "e.emb")
    raw = (tmp_path / "e.emb").read_bytes()
    assert raw[:8] == b"CALLEMB1" and len(raw) == 16 + 48
    assert np.array_equal(read_embeddings(tmp_path / "e.emb"), x)
    (tmp_path / "e.emb").write_bytes(raw[:-1])
    with pytest.raises(CorruptionError):
        read_embeddings(tmp_path / "e.emb")


def test_external_corpus_builds(tmp_path):
    x = synth_corpus(300, 8, 5, 0.2, seed=0)
    write_embeddings(x, tmp_path / "c.emb")
    idx = build_index(read_embeddings(tmp_path / "c.emb"), 5, tmp_path / "idx")
    assert sum(e.vector_count for e in idx.manifest.entries) == 300


def test_negative_topic_skew_rejected():
    params = CorpusParams(n=100, dim=4, topic_count=5, spread=0.3, seed=0)
    with pytest.raises(InvalidArgument):
        synth_queries(params, 10, OverlapProfile(topic_skew=-1.0), seed=0)
