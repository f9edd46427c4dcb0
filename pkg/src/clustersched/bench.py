"""Benchmark harness: build artifacts, replay traces, compare schedulers and policies.

Usage::

    clustersched-bench build   --config bench.cfg
    clustersched-bench run     --config bench.cfg --set policy=fifo --set scheduler=baseline_fifo_order
    clustersched-bench compare --config bench.cfg --variants call,clru,wlru,fifo
    clustersched-bench grouptime --sizes 1000,1500,2000,2500

The config file is flat ``key = value`` lines (``#`` starts a comment); keys
are the fields of :class:`BenchConfig`. Exit codes: 2 config, 3 data, 4 runtime.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cache import CachePolicy, ClusterCache, PolicyKind
from .engine import EngineConfig, SearchEngine, SearchRequest
from .errors import ClusterSchedError, CorruptionError, InvalidArgument, StorageError
from .grouping import QueryRecord, form_groups, pairwise_similarity
from .metrics import load_imbalance, percentiles
from .vector_index import build_index, open_index
from .workload import (CorpusParams, OverlapProfile, TrafficConfig, WorkloadTrace,
                       corpus_from_params, make_trace, read_embeddings, read_trace,
                       write_embeddings, write_trace)

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4

ASSUMPTIONS = {
    "weibull_shape": "free parameter; default 1.0 (exponential gaps)",
    "burst_duration": "free parameter; drawn uniformly from [burst_min, burst_max] seconds",
    "burst_interval": "coin flip every `interval` seconds; default 1 s",
    "clru_score": "access_count x smoothed load latency is the CLRU priority (ties broken by recency)",
    "latency_normalization": "normalized figures divide by the `lru` arrival-order baseline at equal traffic",
}


class ConfigError(InvalidArgument):
    pass


@dataclass
class BenchConfig:
    # index
    K: int = 100
    nprobe: int = 30
    dim: int = 64
    corpus_size: int = 5000
    topic_count: int = 100
    spread: float = 0.3
    corpus_path: str = ""
    # cache
    capacity: int = 50
    policy: str = "lru"
    byte_budget: int = 0
    window_length: float = 60.0
    window_top_n: int = 10
    # scheduling
    theta: float = 0.5
    threads: int = 8
    scheduler: str = "call"
    prefetch: bool = True
    prefetch_trigger: str = "dispatch"
    prefetch_timeout: float = 5.0
    greedy_loading: bool = True
    grouping_method: str = "bitmap"
    baseline_prefetch: str = "none"
    baseline_prefetch_degree: int = 20
    baseline_prefetch_period: float = 60.0
    search_threads: int = 1
    # traffic and queries
    base_rate: float = 100.0
    burst_probability: float = 0.1
    burst_multiplier: float = 3.0
    interval: float = 1.0
    weibull_shape: float = 1.0
    burst_min: float = 1.0
    burst_max: float = 5.0
    duration: float = 300.0
    repeat_prob: float = 0.8
    noise: float = 0.02
    repeat_window: int = 1000
    topic_skew: float = 1.5
    buffer_window: float = 3.0
    max_batch: int = 0
    # search and timing
    k: int = 10
    metric: str = "l2"
    virtual_time: bool = True
    disk_throughput: float = 50e6
    per_file_overhead: float = 5e-4
    lookup_cost: float = 1e-6
    build_cost_per_vector: float = 2e-8
    search_cost_per_vector: float = 5e-8
    # run
    warmup: float = 60.0
    seed: int = 0
    output: str = "bench_out"
    index_dir: str = ""
    trace_dir: str = ""

    @property
    def index_path(self) -> Path:
        return Path(self.index_dir) if self.index_dir else Path(self.output) / "index"

    @property
    def trace_path(self) -> Path:
        return Path(self.trace_dir) if self.trace_dir else Path(self.output) / "trace"

    def corpus_params(self):
        return CorpusParams(self.corpus_size, self.dim, self.topic_count, self.spread, self.seed)

    def traffic(self):
        return TrafficConfig(self.base_rate, self.burst_probability, self.burst_multiplier, self.interval,
                             self.weibull_shape, self.duration, self.burst_min, self.burst_max, self.seed)

    def profile(self):
        return OverlapProfile(self.repeat_prob, self.noise, self.repeat_window, self.topic_skew)

    def engine_config(self):
        names = {f.name for f in dataclasses.fields(EngineConfig)}
        return EngineConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def cache_policy(self):
        return CachePolicy(PolicyKind(self.policy.lower()), self.window_length, self.window_top_n)

    def replace(self, **kw) -> "BenchConfig":
        return dataclasses.replace(self, **kw)


def _coerce(name, typ, raw: str):
    typ = {"int": int, "float": float, "bool": bool, "str": str}.get(typ, typ)
    if typ is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        return typ(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ.__name__}") from exc


def parse_pairs(lines, source="<set>") -> dict:
    out = {}
    types = {f.name: f.type for f in dataclasses.fields(BenchConfig)}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, types[key], raw)
    return out


def load_config(path=None, overrides=()) -> BenchConfig:
    values = {}
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        values.update(parse_pairs(text.splitlines(), str(path)))
    values.update(parse_pairs(overrides))
    cfg = BenchConfig(**values)
    validate(cfg)
    return cfg


def validate(cfg: BenchConfig):
    if cfg.nprobe < 1 or cfg.nprobe > cfg.K:
        raise ConfigError("nprobe must be within [1, K]")
    if cfg.capacity < cfg.nprobe:
        raise ConfigError("capacity must hold at least one query's clusters (capacity >= nprobe)")
    if cfg.policy.lower() not in {p.value for p in PolicyKind}:
        raise ConfigError(f"unknown policy {cfg.policy!r}")
    if cfg.scheduler not in ("call", "baseline_fifo_order"):
        raise ConfigError(f"unknown scheduler {cfg.scheduler!r}")
    if not 0 <= cfg.theta <= 1:
        raise ConfigError("theta must be within [0, 1]")
    if cfg.warmup < 0 or cfg.duration <= 0:
        raise ConfigError("need warmup >= 0 and duration > 0")


# ------------------------------------------------------------------ artifacts


def cmd_build(cfg: BenchConfig):
    """Build the index (from ``corpus_path`` or a synthetic corpus) and the query trace."""
    if cfg.corpus_path:
        corpus = read_embeddings(cfg.corpus_path)
        if corpus.shape[1] != cfg.dim:
            raise InvalidArgument(f"corpus dim {corpus.shape[1]} != configured dim {cfg.dim}")
    else:
        corpus = corpus_from_params(cfg.corpus_params())
    index = build_index(corpus, cfg.K, cfg.index_path, seed=cfg.seed)
    write_embeddings(corpus, cfg.index_path / "corpus.emb")
    trace = make_trace(cfg.traffic(), cfg.corpus_params(), cfg.profile(), cfg.seed)
    write_trace(trace, cfg.trace_path)
    return index, trace


def prepare(cfg: BenchConfig):
    """Open existing artifacts, building any that are missing."""
    try:
        return open_index(cfg.index_path), read_trace(cfg.trace_path)
    except StorageError:
        return cmd_build(cfg)


# ------------------------------------------------------------------ replay


def replay(engine: SearchEngine, trace: WorkloadTrace, cfg: BenchConfig) -> list[dict]:
    """Feed the trace through the engine batch by batch.

    When the dispatcher is idle it waits for the next arrival plus
    ``buffer_window`` and takes everything that arrived meanwhile; a backlog
    is taken whole (optionally capped at ``max_batch``).
    """
    arrivals = trace.arrivals
    n = len(arrivals)
    records = []
    i, now, batch_id = 0, 0.0, 0
    wall0 = time.perf_counter()
    while i < n:
        if arrivals[i] > now:
            now = arrivals[i] + cfg.buffer_window
            if not cfg.virtual_time:
                _sleep_until(wall0, now)
        j = max(i + 1, int(np.searchsorted(arrivals, now, side="right")))
        if cfg.max_batch:
            j = min(j, i + cfg.max_batch)
        reqs = [SearchRequest(int(trace.query_ids[r]), trace.embeddings[trace.query_ids[r]], cfg.k,
                              arrival_time=float(arrivals[r])) for r in range(i, j)]
        results = engine.submit_batch(reqs, now)
        grouping_time = engine.grouping_times[-1] if cfg.scheduler == "call" and engine.grouping_times else 0.0
        for res in results:
            records.append(_record(res, batch_id, grouping_time if res.position == 0 else None, cfg))
        if cfg.virtual_time:
            now = engine.now
        else:
            now = max(now, time.perf_counter() - wall0)
        i = j
        batch_id += 1
    return records


def _sleep_until(wall0, t):
    delay = t - (time.perf_counter() - wall0)
    if delay > 0:
        time.sleep(delay)


def _record(res, batch_id, grouping_time, cfg):
    t = res.timing
    rec = {
        "query_id": res.query_id, "batch": batch_id, "group_id": res.group_id,
        "position": res.position, "is_head": res.is_head,
        "arrival": res.arrival_time,
        "hits": len(res.cluster_hits), "misses": len(res.cluster_misses),
        "hit_ids": list(res.cluster_hits), "miss_ids": list(res.cluster_misses),
        "load_plan": list(res.load_plan), "bytes_read": res.bytes_read,
        "neighbors": res.neighbor_ids.tolist(),
        "cache_lookup": t.cache_lookup, "load": t.load, "index_build": t.index_build,
        "search": t.search, "prefetch_wait": t.prefetch_wait,
        "search_latency": res.search_latency,
        "thread_seconds": list(res.thread_seconds),
        "error": res.error,
    }
    if cfg.virtual_time:
        rec["total_latency"] = res.finish_time - res.arrival_time
    if grouping_time is not None:
        rec["grouping_time"] = grouping_time
    return rec


LOGICAL_FIELDS = ("query_id", "batch", "group_id", "position", "is_head", "hits", "misses",
                  "hit_ids", "miss_ids", "load_plan", "neighbors")


def logical_view(records):
    return [{k: r[k] for k in LOGICAL_FIELDS} for r in records]


# ------------------------------------------------------------------ reporting


@dataclass
class Report:
    config: dict
    aggregates: dict
    records: list = field(repr=False, default_factory=list)


def summarize(records, cfg: BenchConfig, engine: SearchEngine | None = None) -> dict:
    post = [r for r in records if r["arrival"] >= cfg.warmup]
    lookups = sum(r["hits"] + r["misses"] for r in post)
    hits = sum(r["hits"] for r in post)
    heads = [r for r in post if r["is_head"] and r["group_id"] > 0]
    lat = [r["search_latency"] for r in post]
    agg = {
        "queries": len(records),
        "post_warmup_queries": len(post),
        "avg_hit_ratio": hits / max(1, lookups),
        "mean_query_hit_ratio": float(np.mean([r["hits"] / max(1, r["hits"] + r["misses"]) for r in post]))
        if post else float("nan"),
        "search_latency": percentiles(lat) if lat else {},
        "mean_search_latency": float(np.mean(lat)) if lat else float("nan"),
        "bytes_read_total": sum(r["bytes_read"] for r in records),
        "bytes_read_post_warmup": sum(r["bytes_read"] for r in post),
        "head_queries": len(heads),
        "head_hit_rate": (sum(1 for r in heads if r["misses"] == 0) / len(heads)) if heads else float("nan"),
        "errors": sum(1 for r in records if r["error"]),
        "batches": len({r["batch"] for r in records}),
        "groups": len({(r["batch"], r["group_id"]) for r in records}),
    }
    if cfg.virtual_time:
        agg["total_latency"] = percentiles([r["total_latency"] for r in post]) if post else {}
    gt = [r["grouping_time"] for r in records if "grouping_time" in r]
    agg["grouping_time"] = {"batches": len(gt), "mean": float(np.mean(gt)) if gt else 0.0,
                            "max": float(np.max(gt)) if gt else 0.0}
    loads = [r["thread_seconds"] for r in post if r["thread_seconds"]]
    agg["load"] = {
        "requests": len(loads),
        "mean_makespan": float(np.mean([max(t) for t in loads])) if loads else 0.0,
        "mean_imbalance": float(np.mean([load_imbalance(t) for t in loads])) if loads else 1.0,
    }
    if engine is not None:
        s = engine.cache.stats()
        agg["cache"] = {"lookups": s.lookups, "hits": s.hits, "misses": s.misses,
                        "evictions": s.evictions, "prefetched": s.prefetched,
                        "prefetch_bytes": s.prefetch_bytes, "demand_bytes": s.bytes_read_from_disk}
        p = engine.prefetcher.stats
        agg["prefetch"] = dataclasses.asdict(p)
    return agg


def write_outputs(report: Report, outdir):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "report.json").write_text(json.dumps(
        {"assumptions": ASSUMPTIONS, "config": report.config, "aggregates": report.aggregates}, indent=2))
    with open(outdir / "records.jsonl", "w") as fh:
        for r in report.records:
            fh.write(json.dumps(r) + "\n")
    with open(outdir / "timeseries.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "query_id", "arrival", "hit_ratio", "cumulative_bytes", "search_latency"])
        cum = 0
        for k, r in enumerate(report.records):
            cum += r["bytes_read"]
            w.writerow([k, r["query_id"], f"{r['arrival']:.6f}",
                        f"{r['hits'] / max(1, r['hits'] + r['misses']):.6f}", cum,
                        f"{r['search_latency']:.9f}"])


def make_engine(cfg: BenchConfig, index) -> SearchEngine:
    cache = ClusterCache(cfg.capacity, cfg.cache_policy(), byte_budget=cfg.byte_budget or None)
    return SearchEngine(index, cache, cfg.engine_config())


def run_experiment(cfg: BenchConfig, index=None, trace=None, write=True) -> Report:
    validate(cfg)
    if index is None or trace is None:
        index, trace = prepare(cfg)
    with make_engine(cfg, index) as engine:
        records = replay(engine, trace, cfg)
        agg = summarize(records, cfg, engine)
    report = Report(dataclasses.asdict(cfg), agg, records)
    if write:
        write_outputs(report, cfg.output)
    return report


def cmd_run(cfg: BenchConfig) -> Report:
    """Replay the trace against a previously built index."""
    index = open_index(cfg.index_path)
    trace = read_trace(cfg.trace_path)
    return run_experiment(cfg, index, trace)


# ------------------------------------------------------------------ compare

VARIANTS = {
    "call": dict(scheduler="call", policy="lru"),
    "call_no_prefetch": dict(scheduler="call", policy="lru", prefetch=False),
    "call_round_robin": dict(scheduler="call", policy="lru", greedy_loading=False),
    "lru": dict(scheduler="baseline_fifo_order", policy="lru"),
    "clru": dict(scheduler="baseline_fifo_order", policy="clru"),
    "wlru": dict(scheduler="baseline_fifo_order", policy="wlru"),
    "fifo": dict(scheduler="baseline_fifo_order", policy="fifo"),
    # grouped execution with frequency/cost prefetch of fixed degree, no group hints
    "clru_prefetch": dict(scheduler="call", policy="clru", prefetch=False, greedy_loading=False,
                          baseline_prefetch="costly"),
    "wlru_prefetch": dict(scheduler="call", policy="wlru", prefetch=False, greedy_loading=False,
                          baseline_prefetch="frequent"),
}
DEFAULT_VARIANTS = ("call", "clru", "wlru", "fifo", "lru")
NORMALIZE_TO = "lru"


def cmd_compare(cfg: BenchConfig, variants=DEFAULT_VARIANTS, write=True) -> dict:
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variants {unknown}; known: {sorted(VARIANTS)}")
    index, trace = prepare(cfg)
    out = {}
    for name in variants:
        vcfg = cfg.replace(output=str(Path(cfg.output) / name), **VARIANTS[name])
        rep = run_experiment(vcfg, index, trace, write=write)
        out[name] = rep
    rows = []
    base = out.get(NORMALIZE_TO)
    for name, rep in out.items():
        a = rep.aggregates
        row = {"variant": name, "avg_hit_ratio": a["avg_hit_ratio"],
               **{f"search_{k}": v for k, v in a["search_latency"].items()},
               "mean_search_latency": a["mean_search_latency"],
               "bytes_read_post_warmup": a["bytes_read_post_warmup"],
               "head_hit_rate": a["head_hit_rate"], "mean_load_makespan": a["load"]["mean_makespan"]}
        if base is not None:
            b = base.aggregates
            row["normalized_mean_latency"] = a["mean_search_latency"] / b["mean_search_latency"]
            row["normalized_p99"] = a["search_latency"]["p99"] / b["search_latency"]["p99"]
        rows.append(row)
    if write:
        outdir = Path(cfg.output)
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / "compare.json").write_text(json.dumps({"assumptions": ASSUMPTIONS, "rows": rows}, indent=2))
        with open(outdir / "compare.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return {"rows": rows, "reports": out}


# ------------------------------------------------------------------ grouping time


def grouping_records(n, K=100, nprobe=30, seed=0, index=None, cfg=None):
    """Probed cluster sets for ``n`` synthetic queries (random sets when no index)."""
    rng = np.random.default_rng(seed)
    if index is None:
        sets = [tuple(rng.choice(K, nprobe, replace=False).tolist()) for _ in range(n)]
    else:
        from .workload import synth_queries
        q = synth_queries(cfg.corpus_params(), n, cfg.profile(), seed)
        sets = [tuple(s) for s in index.probe_many(q, nprobe).tolist()]
        K = index.K
    return [QueryRecord(i, s, K, float(i)) for i, s in enumerate(sets)]


def time_grouping(records, theta=0.5, method="bitmap"):
    t0 = time.perf_counter()
    sim = pairwise_similarity(records, method)
    groups = form_groups(records, theta, similarity=sim)
    return time.perf_counter() - t0, groups


def cmd_grouptime(sizes=(1000, 1500, 2000, 2500), K=100, nprobe=30, theta=0.5, seed=0,
                  index=None, cfg=None, out=None) -> list[dict]:
    rows = []
    for n in sizes:
        recs = grouping_records(n, K, nprobe, seed, index, cfg)
        tb, gb = time_grouping(recs, theta, "bitmap")
        th, gh = time_grouping(recs, theta, "hash")
        rows.append({"queries": n, "bitmap_seconds": tb, "hash_seconds": th,
                     "groups": len(gb), "identical": [g.members for g in gb] == [g.members for g in gh]})
    if out:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "grouptime.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return rows


# ------------------------------------------------------------------ CLI


def _parser():
    ap = argparse.ArgumentParser(prog="clustersched-bench", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="cmd", required=True)
    for name in ("build", "run", "compare", "grouptime"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        if name == "compare":
            p.add_argument("--variants", default=",".join(DEFAULT_VARIANTS))
        if name == "grouptime":
            p.add_argument("--sizes", default="1000,1500,2000,2500")
            p.add_argument("--synthetic-index", action="store_true",
                           help="probe synthetic queries against the built index instead of random sets")
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.cmd == "build":
            index, trace = cmd_build(cfg)
            print(f"built index K={index.K} dim={index.dim} at {cfg.index_path}; "
                  f"trace of {len(trace)} queries at {cfg.trace_path}")
        elif args.cmd == "run":
            rep = cmd_run(cfg)
            a = rep.aggregates
            print(f"hit ratio {a['avg_hit_ratio']:.4f}  p99 {a['search_latency'].get('p99', float('nan')):.6f}s"
                  f"  -> {cfg.output}")
            if a["errors"]:
                print(f"data error: {a['errors']} queries failed on unreadable clusters", file=sys.stderr)
                return EXIT_DATA
        elif args.cmd == "compare":
            res = cmd_compare(cfg, [v for v in args.variants.split(",") if v])
            for row in res["rows"]:
                print(f"{row['variant']:>18}  hit {row['avg_hit_ratio']:.4f}  p99 {row['search_p99']:.6f}s")
        elif args.cmd == "grouptime":
            sizes = [int(s) for s in args.sizes.split(",") if s]
            index = open_index(cfg.index_path) if args.synthetic_index else None
            rows = cmd_grouptime(sizes, cfg.K, cfg.nprobe, cfg.theta, cfg.seed, index, cfg, cfg.output)
            print(f"{'queries':>8} {'bitmap(s)':>10} {'hash(s)':>10} identical")
            for r in rows:
                print(f"{r['queries']:>8} {r['bitmap_seconds']:>10.3f} {r['hash_seconds']:>10.3f} {r['identical']}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StorageError, CorruptionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ClusterSchedError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
