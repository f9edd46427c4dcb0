"""Show how a batch is grouped by cluster overlap and how the next group's head is prefetched.

Run: python3 demos/02_grouping_and_prefetch.py
"""

import tempfile

import numpy as np

from clustersched import (ClusterCache, CorpusParams, EngineConfig, OverlapProfile, SearchEngine, SearchRequest,
                          build_index)
from clustersched.grouping import QueryRecord, form_groups, reorder_batch
from clustersched.metrics import adjacent_vs_far, overlap_heatmap
from clustersched.workload import corpus_from_params, synth_queries

params = CorpusParams(n=5000, dim=64, topic_count=100, spread=0.3, seed=0)
corpus = corpus_from_params(params)
queries = synth_queries(params, 200, OverlapProfile(), seed=0)

with tempfile.TemporaryDirectory() as tmp:
    index = build_index(corpus, K=100, directory=tmp, seed=0)
    sets = index.probe_many(queries, 30).tolist()

    sim = overlap_heatmap(sets[:10])
    share = adjacent_vs_far(sim, 0.5)
    print(f"first 10 queries: {share['adjacent']:.0%} of adjacent and {share['non_adjacent']:.0%} "
          f"of non-adjacent pairs share at least half their clusters")

    records = [QueryRecord(i, tuple(s), index.K, float(i)) for i, s in enumerate(sets)]
    order, groups = reorder_batch(form_groups(records, theta=0.5), records)
    print(f"{len(records)} queries -> {len(groups)} groups; largest has {max(len(g) for g in groups)} members")
    g = groups[0]
    print(f"group 0 members {list(g.members)[:8]}..., hint: next head is query {g.prefetch.fq}")

    requests = [SearchRequest(i, q, 10, arrival_time=float(i)) for i, q in enumerate(queries)]
    for prefetch in (False, True):
        with SearchEngine(index, ClusterCache(50), EngineConfig(prefetch=prefetch)) as engine:
            results = engine.submit_batch(requests)
        heads = [r for r in results if r.is_head and r.group_id > 0]
        missed = sum(1 for r in heads if r.cluster_misses)
        hit_ratio = sum(len(r.cluster_hits) for r in results) / sum(len(r.cluster_set) for r in results)
        print(f"prefetch {'on ' if prefetch else 'off'}: {missed}/{len(heads)} group heads missed, "
              f"batch hit ratio {hit_ratio:.3f}")
