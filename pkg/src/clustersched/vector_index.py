"""Two-level IVF index: k-means centroids in memory, one binary file per cluster on disk.

File layouts (all integers and floats little-endian)::

    cluster file   "CALLCLU1" | cluster_id u32 | count u32 | dim u32 | 0 u32
                   | ids count*u64 | vectors count*dim*f32
    centroid file  "CALLCEN1" | K u32 | dim u32 | centroids K*dim*f32
    manifest       JSON lines, {cluster_id, path, vector_count, byte_size}
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import CorruptionError, InvalidArgument, StorageError

CLUSTER_MAGIC = b"CALLCLU1"
CENTROID_MAGIC = b"CALLCEN1"
CLUSTER_HEADER = struct.Struct("<8sIIII")
CENTROID_HEADER = struct.Struct("<8sII")

MANIFEST_NAME = "manifest.jsonl"
CENTROID_NAME = "centroids.bin"

F32 = np.dtype("<f4")
U64 = np.dtype("<u8")

MAX_ITER = 25
TOL_FRACTION = 1e-4
_CHUNK = 512


@dataclass(frozen=True)
class CentroidIndex:
    centroids: np.ndarray  # (K, dim) float32

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


@dataclass(frozen=True)
class ManifestEntry:
    cluster_id: int
    path: str
    vector_count: int
    byte_size: int


@dataclass(frozen=True)
class ClusterManifest:
    entries: tuple[ManifestEntry, ...]
    dim: int
    directory: Path

    @property
    def K(self) -> int:
        return len(self.entries)

    def __getitem__(self, cluster_id: int) -> ManifestEntry:
        if not 0 <= cluster_id < len(self.entries):
            raise InvalidArgument(f"cluster id {cluster_id} not in manifest (K={self.K})")
        return self.entries[cluster_id]

    def sizes(self) -> np.ndarray:
        return np.array([e.byte_size for e in self.entries], dtype=np.int64)


@dataclass(frozen=True)
class ClusterData:
    cluster_id: int
    vector_ids: np.ndarray  # (n,) uint64
    vectors: np.ndarray  # (n, dim) float32

    @property
    def nbytes(self) -> int:
        return CLUSTER_HEADER.size + self.vector_ids.nbytes + self.vectors.nbytes

    def __len__(self):
        return len(self.vector_ids)

    @cached_property
    def wide(self) -> np.ndarray:
        """float64 copy of ``vectors``, kept alongside the cached cluster for scans."""
        return self.vectors.astype(np.float64)


def as_matrix(vectors, dim=None) -> np.ndarray:
    """Validate a corpus/query matrix and return it as contiguous float32."""
    arr = np.asarray(vectors)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] == 0:
        raise InvalidArgument(f"expected a 2-D (n, dim) array, got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise InvalidArgument(f"dimension mismatch: expected {dim}, got {arr.shape[1]}")
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if not np.isfinite(arr).all():
        raise InvalidArgument("vectors contain NaN or Inf")
    return arr


def squared_distances(points: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distances, shape (len(points), len(targets)), float64.

    Computed as an explicit sum of squared differences (not the dot-product
    expansion) so that geometrically equal distances compare equal.
    """
    p = np.asarray(points, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    out = np.empty((p.shape[0], t.shape[0]), dtype=np.float64)
    for start in range(0, p.shape[0], _CHUNK):
        diff = p[start:start + _CHUNK, None, :] - t[None, :, :]
        out[start:start + _CHUNK] = np.square(diff).sum(axis=2)
    return out


def _fast_sq_dists(x, c, x_norms):
    d = x_norms[:, None] - 2.0 * (x @ c.T) + np.einsum("ij,ij->i", c, c)[None, :]
    np.maximum(d, 0.0, out=d)
    return d


def _kmeans_pp(x, K, rng, x_norms):
    n = x.shape[0]
    centers = np.empty((K, x.shape[1]), dtype=np.float64)
    centers[0] = x[rng.integers(n)]
    closest = _fast_sq_dists(x, centers[:1], x_norms)[:, 0]
    for k in range(1, K):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            idx = int(rng.integers(n))
        centers[k] = x[idx]
        closest = np.minimum(closest, _fast_sq_dists(x, centers[k:k + 1], x_norms)[:, 0])
    return centers


def train_kmeans(corpus, K: int, seed: int = 0, max_iter: int = MAX_ITER) -> CentroidIndex:
    """Lloyd's k-means with k-means++ seeding; deterministic for a fixed seed.

    Stops after ``max_iter`` iterations or once the largest centroid shift
    drops below 1e-4 of the corpus bounding-box diagonal. A cluster that
    empties out is reseeded at the point farthest from its assigned centroid.
    """
    x32 = as_matrix(corpus)
    if K < 1:
        raise InvalidArgument("K must be positive")
    n = x32.shape[0]
    if n < K:
        raise InvalidArgument(f"corpus of {n} vectors is smaller than K={K}")
    x = x32.astype(np.float64)
    x_norms = np.einsum("ij,ij->i", x, x)
    rng = np.random.default_rng(seed)
    diag = float(np.linalg.norm(x.max(axis=0) - x.min(axis=0)))
    tol = TOL_FRACTION * diag

    centers = _kmeans_pp(x, K, rng, x_norms)
    for _ in range(max_iter):
        d = _fast_sq_dists(x, centers, x_norms)
        labels = d.argmin(axis=1)
        own = d[np.arange(n), labels]
        counts = np.bincount(labels, minlength=K)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        new = centers.copy()
        nonempty = counts > 0
        new[nonempty] = sums[nonempty] / counts[nonempty, None]
        taken = set()
        for k in np.flatnonzero(~nonempty):
            order = np.argsort(-own, kind="stable")
            far = next(int(i) for i in order if int(i) not in taken)
            taken.add(far)
            new[k] = x[far]
            own[far] = 0.0
        shift = float(np.sqrt(np.square(new - centers).sum(axis=1)).max())
        centers = new
        if shift < tol:
            break
    return CentroidIndex(np.ascontiguousarray(centers, dtype=np.float32))


def assign_vectors(corpus, centroid_index: CentroidIndex) -> np.ndarray:
    """Nearest-centroid id per vector; ties go to the lowest cluster id."""
    x = as_matrix(corpus, centroid_index.dim)
    return squared_distances(x, centroid_index.centroids).argmin(axis=1).astype(np.int64)


def probe(query, centroid_index: CentroidIndex, nprobe: int) -> np.ndarray:
    """The ``nprobe`` closest cluster ids, ascending by distance then id."""
    K = centroid_index.K
    if not 1 <= nprobe <= K:
        raise InvalidArgument(f"nprobe must be in [1, {K}], got {nprobe}")
    q = as_matrix(query, centroid_index.dim)
    if q.shape[0] != 1:
        raise InvalidArgument("probe takes a single query vector")
    d = squared_distances(q, centroid_index.centroids)[0]
    return np.lexsort((np.arange(K), d))[:nprobe]


def probe_many(queries, centroid_index: CentroidIndex, nprobe: int) -> np.ndarray:
    """Row-wise :func:`probe` for a query matrix, shape (n, nprobe)."""
    K = centroid_index.K
    if not 1 <= nprobe <= K:
        raise InvalidArgument(f"nprobe must be in [1, {K}], got {nprobe}")
    q = as_matrix(queries, centroid_index.dim)
    d = squared_distances(q, centroid_index.centroids)
    # stable argsort on distance keeps lower ids first among equal distances
    return np.argsort(d, axis=1, kind="stable")[:, :nprobe]


# ---------------------------------------------------------------- storage


def cluster_filename(cluster_id: int) -> str:
    return f"cluster_{cluster_id:05d}.bin"


def encode_cluster(cluster_id: int, vector_ids, vectors) -> bytes:
    ids = np.ascontiguousarray(vector_ids, dtype=U64)
    vecs = np.ascontiguousarray(vectors, dtype=F32)
    if vecs.ndim != 2 or len(ids) != vecs.shape[0]:
        raise InvalidArgument("vector_ids and vectors disagree in length")
    header = CLUSTER_HEADER.pack(CLUSTER_MAGIC, cluster_id, len(ids), vecs.shape[1], 0)
    return header + ids.tobytes() + vecs.tobytes()


def decode_cluster(buf: bytes, path=None, expect_id=None, expect_dim=None) -> ClusterData:
    if len(buf) < CLUSTER_HEADER.size:
        raise CorruptionError("truncated cluster header", path)
    magic, cid, count, dim, reserved = CLUSTER_HEADER.unpack_from(buf)
    if magic != CLUSTER_MAGIC:
        raise CorruptionError("bad cluster magic", path)
    if reserved != 0:
        raise CorruptionError("nonzero reserved header field", path)
    if expect_id is not None and cid != expect_id:
        raise CorruptionError(f"header says cluster {cid}, expected {expect_id}", path)
    if expect_dim is not None and dim != expect_dim:
        raise CorruptionError(f"header dim {dim}, expected {expect_dim}", path)
    want = CLUSTER_HEADER.size + count * 8 + count * dim * 4
    if len(buf) != want:
        raise CorruptionError(f"length {len(buf)} != expected {want}", path)
    off = CLUSTER_HEADER.size
    ids = np.frombuffer(buf, dtype=U64, count=count, offset=off)
    vecs = np.frombuffer(buf, dtype=F32, count=count * dim, offset=off + count * 8)
    return ClusterData(cid, ids, vecs.reshape(count, dim))


def encode_centroids(index: CentroidIndex) -> bytes:
    c = np.ascontiguousarray(index.centroids, dtype=F32)
    return CENTROID_HEADER.pack(CENTROID_MAGIC, c.shape[0], c.shape[1]) + c.tobytes()


def decode_centroids(buf: bytes, path=None) -> CentroidIndex:
    if len(buf) < CENTROID_HEADER.size:
        raise CorruptionError("truncated centroid header", path)
    magic, K, dim = CENTROID_HEADER.unpack_from(buf)
    if magic != CENTROID_MAGIC:
        raise CorruptionError("bad centroid magic", path)
    if len(buf) != CENTROID_HEADER.size + K * dim * 4:
        raise CorruptionError("centroid file length mismatch", path)
    c = np.frombuffer(buf, dtype=F32, offset=CENTROID_HEADER.size).reshape(K, dim)
    return CentroidIndex(c.copy())


def _write_bytes(path: Path, payload: bytes):
    try:
        with open(path, "wb") as fh:
            fh.write(payload)
    except OSError as exc:
        raise StorageError(f"cannot write ({exc.strerror})", str(path)) from exc


def _read_bytes(path: Path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except FileNotFoundError as exc:
        raise CorruptionError("missing file", str(path)) from exc
    except OSError as exc:
        raise StorageError(f"cannot read ({exc.strerror})", str(path)) from exc


def write_index(corpus, assignments, centroid_index: CentroidIndex, directory,
                vector_ids=None) -> ClusterManifest:
    """Persist every cluster, the centroids and the manifest under ``directory``."""
    x = as_matrix(corpus, centroid_index.dim)
    labels = np.asarray(assignments, dtype=np.int64)
    if labels.shape != (x.shape[0],):
        raise InvalidArgument("one assignment per corpus vector is required")
    K = centroid_index.K
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise InvalidArgument("assignment outside [0, K)")
    ids = np.arange(x.shape[0], dtype=np.uint64) if vector_ids is None else np.asarray(vector_ids, dtype=np.uint64)
    if ids.shape != labels.shape:
        raise InvalidArgument("one vector id per corpus vector is required")

    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create directory ({exc.strerror})", str(directory)) from exc

    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(K + 1))
    entries = []
    for cid in range(K):
        rows = order[bounds[cid]:bounds[cid + 1]]
        payload = encode_cluster(cid, ids[rows], x[rows])
        name = cluster_filename(cid)
        _write_bytes(directory / name, payload)
        entries.append(ManifestEntry(cid, name, len(rows), len(payload)))

    _write_bytes(directory / CENTROID_NAME, encode_centroids(centroid_index))
    lines = [json.dumps({"cluster_id": e.cluster_id, "path": e.path,
                         "vector_count": e.vector_count, "byte_size": e.byte_size})
             for e in entries]
    _write_bytes(directory / MANIFEST_NAME, ("\n".join(lines) + "\n").encode())
    return ClusterManifest(tuple(entries), centroid_index.dim, directory)


def load_manifest(directory, dim: int) -> ClusterManifest:
    directory = Path(directory)
    path = directory / MANIFEST_NAME
    raw = _read_bytes(path).decode()
    entries = []
    for lineno, line in enumerate(raw.splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            entries.append(ManifestEntry(int(obj["cluster_id"]), str(obj["path"]),
                                         int(obj["vector_count"]), int(obj["byte_size"])))
        except (ValueError, KeyError, TypeError) as exc:
            raise CorruptionError(f"bad manifest line {lineno}", str(path)) from exc
    entries.sort(key=lambda e: e.cluster_id)
    if [e.cluster_id for e in entries] != list(range(len(entries))):
        raise CorruptionError("manifest cluster ids are not exactly 0..K-1", str(path))
    return ClusterManifest(tuple(entries), dim, directory)


def read_cluster(manifest: ClusterManifest, cluster_id: int) -> ClusterData:
    entry = manifest[cluster_id]
    path = manifest.directory / entry.path
    buf = _read_bytes(path)
    if len(buf) != entry.byte_size:
        raise CorruptionError(f"file is {len(buf)} bytes, manifest says {entry.byte_size}", str(path))
    return decode_cluster(buf, str(path), expect_id=cluster_id, expect_dim=manifest.dim)


@dataclass(frozen=True)
class DiskIndex:
    """An opened on-disk index: resident centroids plus the cluster manifest."""

    centroids: CentroidIndex
    manifest: ClusterManifest

    @property
    def K(self):
        return self.centroids.K

    @property
    def dim(self):
        return self.centroids.dim

    @property
    def directory(self):
        return self.manifest.directory

    def probe(self, query, nprobe):
        return probe(query, self.centroids, nprobe)

    def probe_many(self, queries, nprobe):
        return probe_many(queries, self.centroids, nprobe)

    def read_cluster(self, cluster_id):
        return read_cluster(self.manifest, cluster_id)

    def byte_size(self, cluster_id):
        return self.manifest[cluster_id].byte_size


def build_index(corpus, K: int, directory, seed: int = 0, vector_ids=None) -> DiskIndex:
    cent = train_kmeans(corpus, K, seed)
    labels = assign_vectors(corpus, cent)
    manifest = write_index(corpus, labels, cent, directory, vector_ids=vector_ids)
    return DiskIndex(cent, manifest)


def open_index(directory) -> DiskIndex:
    directory = Path(directory)
    path = directory / CENTROID_NAME
    cent = decode_centroids(_read_bytes(path), str(path))
    manifest = load_manifest(directory, cent.dim)
    if manifest.K != cent.K:
        raise CorruptionError(f"manifest has {manifest.K} clusters, centroids {cent.K}", str(directory))
    return DiskIndex(cent, manifest)
