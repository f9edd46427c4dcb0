import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clustersched.errors import CorruptionError, InvalidArgument, StorageError
from clustersched.vector_index import (CentroidIndex, assign_vectors, build_index, decode_cluster,
                                       encode_cluster, load_manifest, open_index, probe, probe_many,
                                       read_cluster, train_kmeans, write_index)


def brute_nearest(points, centroids):
    out = []
    for p in points.astype(np.float64):
        d = [float(np.sum((p - c) ** 2)) for c in centroids.astype(np.float64)]
        best = min(range(len(d)), key=lambda k: (d[k], k))
        out.append(best)
    return np.array(out)


def test_single_centroid_is_mean(rng):
    x = rng.normal(size=(200, 5)).astype(np.float32)
    c = train_kmeans(x, 1, seed=0)
    np.testing.assert_allclose(c.centroids[0], x.astype(np.float64).mean(axis=0), atol=1e-5)


def test_unit_square_corners():
    corners = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=np.float32)
    c = train_kmeans(corners, 4, seed=7)
    got = sorted(map(tuple, c.centroids.tolist()))
    assert got == sorted(map(tuple, corners.tolist()))


def test_kmeans_deterministic(rng):
    x = rng.normal(size=(500, 8)).astype(np.float32)
    a = train_kmeans(x, 10, seed=5)
    b = train_kmeans(x, 10, seed=5)
    assert np.array_equal(a.centroids, b.centroids)


@pytest.mark.parametrize("bad", ["small", "nan"])
def test_kmeans_rejects_bad_input(bad, rng):
    x = rng.normal(size=(5, 3)).astype(np.float32)
    if bad == "small":
        with pytest.raises(InvalidArgument):
            train_kmeans(x, 6)
    else:
        x[2, 1] = np.nan
        with pytest.raises(InvalidArgument):
            train_kmeans(x, 2)


def test_assign_exact_and_tie():
    cents = CentroidIndex(np.array([[9, 9], [8, 8], [0, 1], [5, 5], [7, 7], [0, -1]], dtype=np.float32))
    pts = np.array([[5, 5], [0, 0]], dtype=np.float32)
    # (0,0) is equidistant from centroid 2 and 5
    assert assign_vectors(pts, cents).tolist() == [3, 2]


def test_assign_matches_brute_force(rng):
    x = rng.normal(size=(1000, 6)).astype(np.float32)
    c = train_kmeans(x, 12, seed=1)
    assert np.array_equal(assign_vectors(x, c), brute_nearest(x, c.centroids))


def test_assign_dim_mismatch(rng):
    c = CentroidIndex(rng.normal(size=(3, 4)).astype(np.float32))
    with pytest.raises(InvalidArgument):
        assign_vectors(rng.normal(size=(2, 5)), c)


def test_probe_examples(rng):
    cents = CentroidIndex(rng.normal(size=(10, 4)).astype(np.float32))
    assert sorted(probe(cents.centroids[7], cents, 10).tolist()) == list(range(10))
    assert probe(cents.centroids[7], cents, 1).tolist() == [7]
    with pytest.raises(InvalidArgument):
        probe(cents.centroids[0], cents, 11)
    with pytest.raises(InvalidArgument):
        probe(cents.centroids[0], cents, 0)


def test_probe_order_and_ties():
    cents = CentroidIndex(np.array([[2, 0], [-1, 0], [1, 0], [0, 3]], dtype=np.float32))
    # distances from origin: 4, 1, 1, 9 -> ties 1 and 2 broken by id
    assert probe(np.zeros(2, np.float32), cents, 4).tolist() == [1, 2, 0, 3]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_probe_prefix_monotone(seed):
    rng = np.random.default_rng(seed)
    cents = CentroidIndex(rng.integers(-3, 3, size=(16, 3)).astype(np.float32))
    q = rng.integers(-3, 3, size=3).astype(np.float32)
    full = probe(q, cents, 16).tolist()
    for n in range(1, 16):
        assert set(probe(q, cents, n).tolist()) < set(probe(q, cents, n + 1).tolist())
        assert probe(q, cents, n).tolist() == full[:n]
    assert probe_many(q[None, :], cents, 5)[0].tolist() == full[:5]


def test_index_partition_and_roundtrip(tmp_path, small_corpus, small_index):
    ids, vecs = [], []
    for cid in range(small_index.K):
        d = small_index.read_cluster(cid)
        assert d.cluster_id == cid
        assert len(d.vector_ids) == len(np.unique(d.vector_ids))
        ids.append(d.vector_ids)
        vecs.append(d.vectors)
    ids = np.concatenate(ids)
    vecs = np.concatenate(vecs)
    assert sorted(ids.tolist()) == list(range(len(small_corpus)))
    assert np.array_equal(vecs[np.argsort(ids)], small_corpus)
    m = small_index.manifest
    assert [e.cluster_id for e in m.entries] == list(range(small_index.K))
    assert sum(e.vector_count for e in m.entries) == len(small_corpus)
    for e in m.entries:
        assert (small_index.directory / e.path).stat().st_size == e.byte_size


def test_build_is_bit_identical(tmp_path, small_corpus):
    a = build_index(small_corpus[:500], 8, tmp_path / "a", seed=9)
    b = build_index(small_corpus[:500], 8, tmp_path / "b", seed=9)
    for name in ["centroids.bin", "manifest.jsonl"] + [e.path for e in a.manifest.entries]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert open_index(tmp_path / "a").K == 8


def test_cluster_file_layout(tmp_path):
    ids = np.array([5, 9], dtype=np.uint64)
    v = np.array([[1.5, -2.0, 3.25], [0, 0, 1]], dtype=np.float32)
    buf = encode_cluster(4, ids, v)
    assert buf[:8] == b"CALLCLU1"
    assert struct.unpack_from("<IIII", buf, 8) == (4, 2, 3, 0)
    assert struct.unpack_from("<QQ", buf, 24) == (5, 9)
    assert np.frombuffer(buf, "<f4", offset=40).tolist() == v.ravel().tolist()
    d = decode_cluster(buf)
    assert np.array_equal(d.vectors, v) and d.vector_ids.tolist() == [5, 9]


def test_random_cluster_roundtrip(tmp_path, rng):
    for _ in range(100):
        n, dim = int(rng.integers(0, 20)), int(rng.integers(1, 9))
        ids = rng.choice(10**12, n, replace=False).astype(np.uint64)
        v = rng.normal(size=(n, dim)).astype(np.float32)
        d = decode_cluster(encode_cluster(3, ids, v))
        assert np.array_equal(d.vector_ids, ids)
        assert d.vectors.tobytes() == v.tobytes()


def test_empty_cluster_file(tmp_path):
    x = np.array([[0, 0], [0, 0.1], [10, 10]], dtype=np.float32)
    cents = CentroidIndex(np.array([[0, 0], [10, 10], [50, 50]], dtype=np.float32))
    m = write_index(x, assign_vectors(x, cents), cents, tmp_path)
    assert m.entries[2].vector_count == 0
    assert len(read_cluster(m, 2)) == 0


def test_corruption_detected(tmp_path, small_corpus):
    idx = build_index(small_corpus[:300], 4, tmp_path, seed=0)
    path = tmp_path / idx.manifest.entries[1].path
    raw = path.read_bytes()
    path.write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(CorruptionError):
        read_cluster(load_manifest(tmp_path, idx.dim), 1)
    path.write_bytes(raw[:-4])
    with pytest.raises(CorruptionError):
        read_cluster(load_manifest(tmp_path, idx.dim), 1)
    path.unlink()
    with pytest.raises(StorageError):
        read_cluster(idx.manifest, 1)


def test_open_missing_directory(tmp_path):
    with pytest.raises(StorageError):
        open_index(tmp_path / "nope")
