"""Synthetic corpora, query streams with structural overlap, and bursty arrivals."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptionError, InvalidArgument, StorageError

EMB_MAGIC = b"CALLEMB1"
EMB_HEADER = struct.Struct("<8sII")
EVENTS_NAME = "events.jsonl"
QUERIES_NAME = "queries.emb"


@dataclass(frozen=True)
class CorpusParams:
    n: int = 20000
    dim: int = 64
    topic_count: int = 100
    spread: float = 0.3
    seed: int = 0


@dataclass(frozen=True)
class OverlapProfile:
    # chance that a query re-asks (a noisy copy of) one of the last `repeat_window` queries
    structural_repeat_prob: float = 0.8
    noise: float = 0.02
    repeat_window: int = 1000
    # fresh queries pick topic r (by popularity rank) with weight 1 / (r + 1) ** topic_skew
    topic_skew: float = 1.5


@dataclass(frozen=True)
class TrafficConfig:
    base_rate: float = 100.0
    burst_probability: float = 0.1
    burst_multiplier: float = 3.0
    interval: float = 1.0
    weibull_shape: float = 1.0
    duration: float = 300.0
    burst_min: float = 1.0
    burst_max: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.base_rate <= 0:
            raise InvalidArgument("base_rate must be positive")
        if not 0.0 <= self.burst_probability <= 1.0:
            raise InvalidArgument("burst_probability must be within [0, 1]")
        if self.burst_multiplier < 1:
            raise InvalidArgument("burst_multiplier must be >= 1")
        if self.interval <= 0 or self.weibull_shape <= 0:
            raise InvalidArgument("interval and weibull_shape must be positive")
        if not 0 < self.burst_min <= self.burst_max:
            raise InvalidArgument("need 0 < burst_min <= burst_max")


@dataclass
class WorkloadTrace:
    arrivals: np.ndarray  # (n,) seconds, non-decreasing
    query_ids: np.ndarray  # (n,) int64, row into `embeddings`
    embeddings: np.ndarray  # (n, dim) float32

    def __len__(self):
        return len(self.arrivals)


def topic_centers(params: CorpusParams) -> np.ndarray:
    rng = np.random.default_rng(params.seed)
    return rng.uniform(-1.0, 1.0, size=(params.topic_count, params.dim))


def synth_corpus(n, dim, topic_count, spread, seed=0) -> np.ndarray:
    """Gaussian mixture around ``topic_count`` uniform centers in [-1, 1]^dim."""
    return corpus_from_params(CorpusParams(n, dim, topic_count, spread, seed))


def corpus_from_params(p: CorpusParams) -> np.ndarray:
    if p.n < 1 or p.dim < 1 or p.topic_count < 1 or p.spread < 0:
        raise InvalidArgument(f"invalid corpus parameters {p}")
    centers = topic_centers(p)
    rng = np.random.default_rng([p.seed, 1])
    topic = rng.integers(p.topic_count, size=p.n)
    pts = centers[topic] + rng.normal(0.0, 1.0, size=(p.n, p.dim)) * p.spread
    return pts.astype(np.float32)


def synth_queries(params: CorpusParams, n_queries: int, profile: OverlapProfile = OverlapProfile(),
                  seed: int = 0) -> np.ndarray:
    """Query embeddings whose cluster overlap is high for some non-adjacent pairs.

    A fresh query is drawn like a corpus vector. With probability
    ``structural_repeat_prob`` the query instead copies one of the previous
    ``repeat_window`` queries (uniformly, so often not the adjacent one) and
    adds isotropic ``noise``.
    """
    if not 0 <= profile.structural_repeat_prob <= 1:
        raise InvalidArgument("structural_repeat_prob must be within [0, 1]")
    if profile.topic_skew < 0:
        raise InvalidArgument("topic_skew must be non-negative")
    centers = topic_centers(params)
    rng = np.random.default_rng([seed, 2])
    weights = 1.0 / np.arange(1, params.topic_count + 1) ** profile.topic_skew
    # popularity ranks are assigned to topics at random so hot topics are not the first centers
    popularity = rng.permutation(params.topic_count)
    cdf = np.cumsum(weights) / weights.sum()
    out = np.empty((n_queries, params.dim), dtype=np.float64)
    for k in range(n_queries):
        if k > 0 and rng.random() < profile.structural_repeat_prob:
            src = int(rng.integers(max(0, k - profile.repeat_window), k))
            out[k] = out[src] + rng.normal(0.0, 1.0, params.dim) * profile.noise
        else:
            topic = popularity[min(int(np.searchsorted(cdf, rng.random(), side="right")), params.topic_count - 1)]
            out[k] = centers[topic] + rng.normal(0.0, 1.0, params.dim) * params.spread
    return out.astype(np.float32)


def rate_schedule(cfg: TrafficConfig, rng) -> list[tuple[float, float, float]]:
    """Piecewise-constant rate as (start, end, rate) segments covering the duration."""
    segs, t = [], 0.0
    while t < cfg.duration:
        if rng.random() < cfg.burst_probability:
            d = rng.uniform(cfg.burst_min, cfg.burst_max)
            segs.append((t, t + d, cfg.base_rate * cfg.burst_multiplier))
            t += d
            nxt = math.ceil(t / cfg.interval) * cfg.interval
            if nxt > t:
                segs.append((t, nxt, cfg.base_rate))
                t = nxt
        else:
            segs.append((t, t + cfg.interval, cfg.base_rate))
            t += cfg.interval
    return segs


def gen_traffic(cfg: TrafficConfig) -> np.ndarray:
    """Arrival times with Weibull inter-arrivals whose mean is 1/current_rate."""
    if cfg.duration <= 0:
        raise InvalidArgument("duration must be positive")
    sched_rng, arr_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2))
    segs = rate_schedule(cfg, sched_rng)
    starts = np.array([s for s, _, _ in segs])
    rates = np.array([r for _, _, r in segs])
    gamma = math.gamma(1.0 + 1.0 / cfg.weibull_shape)
    times, t = [], 0.0
    while True:
        rate = rates[np.searchsorted(starts, t, side="right") - 1]
        t += arr_rng.weibull(cfg.weibull_shape) / (rate * gamma)
        if t >= cfg.duration:
            break
        times.append(t)
    return np.asarray(times, dtype=np.float64)


def make_trace(traffic: TrafficConfig, corpus: CorpusParams, profile: OverlapProfile = OverlapProfile(),
               seed: int = 0) -> WorkloadTrace:
    arrivals = gen_traffic(traffic)
    emb = synth_queries(corpus, len(arrivals), profile, seed)
    return WorkloadTrace(arrivals, np.arange(len(arrivals), dtype=np.int64), emb)


# -------------------------------------------------------------- serialization


def write_embeddings(vectors, path):
    v = np.ascontiguousarray(vectors, dtype="<f4")
    if v.ndim != 2:
        raise InvalidArgument("embeddings must be a 2-D matrix")
    try:
        with open(path, "wb") as fh:
            fh.write(EMB_HEADER.pack(EMB_MAGIC, v.shape[0], v.shape[1]))
            fh.write(v.tobytes())
    except OSError as exc:
        raise StorageError(f"cannot write ({exc.strerror})", str(path)) from exc


def read_embeddings(path) -> np.ndarray:
    """Read a ``CALLEMB1`` matrix; use this to plug in externally computed embeddings."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read ({exc.strerror})", str(path)) from exc
    if len(buf) < EMB_HEADER.size:
        raise CorruptionError("truncated embedding header", str(path))
    magic, count, dim = EMB_HEADER.unpack_from(buf)
    if magic != EMB_MAGIC:
        raise CorruptionError("bad embedding magic", str(path))
    if len(buf) != EMB_HEADER.size + count * dim * 4:
        raise CorruptionError("embedding file length mismatch", str(path))
    return np.frombuffer(buf, dtype="<f4", offset=EMB_HEADER.size).reshape(count, dim).copy()


def write_trace(trace: WorkloadTrace, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"t": float(t), "qid": int(q)}) for t, q in zip(trace.arrivals, trace.query_ids)]
    try:
        (directory / EVENTS_NAME).write_text("\n".join(lines) + ("\n" if lines else ""))
    except OSError as exc:
        raise StorageError(f"cannot write ({exc.strerror})", str(directory / EVENTS_NAME)) from exc
    write_embeddings(trace.embeddings, directory / QUERIES_NAME)


def read_trace(directory) -> WorkloadTrace:
    directory = Path(directory)
    path = directory / EVENTS_NAME
    try:
        raw = path.read_text()
    except OSError as exc:
        raise StorageError(f"cannot read ({exc.strerror})", str(path)) from exc
    ts, qs = [], []
    for lineno, line in enumerate(raw.splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            ts.append(float(obj["t"]))
            qs.append(int(obj["qid"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise CorruptionError(f"bad event on line {lineno}", str(path)) from exc
    emb = read_embeddings(directory / QUERIES_NAME)
    arrivals = np.asarray(ts, dtype=np.float64)
    qids = np.asarray(qs, dtype=np.int64)
    if np.any(np.diff(arrivals) < 0):
        raise CorruptionError("arrival times are not non-decreasing", str(path))
    if qids.size and (qids.min() < 0 or qids.max() >= len(emb)):
        raise CorruptionError("qid does not index queries.emb", str(path))
    return WorkloadTrace(arrivals, qids, emb)
