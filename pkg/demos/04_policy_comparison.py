"""Replay a bursty synthetic trace under the grouped scheduler and three cache-policy baselines.

Uses a shortened two-minute trace so it finishes quickly; the full five-minute
comparison is `clustersched-bench compare`.

Run: python3 demos/04_policy_comparison.py
"""

import tempfile

from clustersched.bench import BenchConfig, cmd_compare

with tempfile.TemporaryDirectory() as tmp:
    cfg = BenchConfig(output=tmp, duration=120, warmup=30)
    res = cmd_compare(cfg, ["call", "clru", "wlru", "fifo", "lru"], write=False)

print(f"{'variant':>8} {'hit ratio':>10} {'p50 ms':>8} {'p99 ms':>8} {'mean vs lru':>12}")
for row in res["rows"]:
    print(f"{row['variant']:>8} {row['avg_hit_ratio']:>10.3f} {row['search_p50'] * 1e3:>8.3f} "
          f"{row['search_p99'] * 1e3:>8.3f} {row['normalized_mean_latency']:>12.2f}")
