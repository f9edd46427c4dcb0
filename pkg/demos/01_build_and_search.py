"""Build a small on-disk IVF index and check approximate search against an exact scan.

Run: python3 demos/01_build_and_search.py
"""

import tempfile

import numpy as np

from clustersched import ClusterCache, EngineConfig, SearchEngine, SearchRequest, build_index, exact_topk, synth_corpus

corpus = synth_corpus(n=5000, dim=32, topic_count=40, spread=0.3, seed=0)

with tempfile.TemporaryDirectory() as tmp:
    index = build_index(corpus, K=50, directory=tmp, seed=0)
    sizes = [e.vector_count for e in index.manifest.entries]
    print(f"index: K={index.K}, dim={index.dim}, cluster sizes {min(sizes)}..{max(sizes)}")

    rng = np.random.default_rng(1)
    queries = corpus[rng.choice(len(corpus), 50, replace=False)] + rng.normal(0, 0.1, (50, 32)).astype(np.float32)
    requests = [SearchRequest(i, q, k=10) for i, q in enumerate(queries)]

    # recall climbs with the number of clusters scanned
    for nprobe in (1, 5, 15, 50):
        with SearchEngine(index, ClusterCache(50), EngineConfig(nprobe=nprobe)) as engine:
            results = engine.submit_batch(requests)
        recall = np.mean([
            len(set(r.neighbor_ids.tolist()) & set(exact_topk(corpus, queries[r.query_id], 10)[0].tolist())) / 10
            for r in results])
        hits = sum(len(r.cluster_hits) for r in results)
        lookups = sum(len(r.cluster_set) for r in results)
        print(f"nprobe={nprobe:>2}: recall@10 {recall:.3f}, cache hit ratio {hits / lookups:.3f}")
