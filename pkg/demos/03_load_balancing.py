"""Compare size-aware greedy packing with size-oblivious round robin for parallel cluster reads.

Run: python3 demos/03_load_balancing.py
"""

import numpy as np

from clustersched.loader import DiskModel, baseline_round_robin, plan_load, simulate_plan

disk = DiskModel(throughput=200e6, per_file_overhead=2e-4)
rng = np.random.default_rng(7)

# one request whose large clusters all land on the same worker under round robin
sizes = [9, 1, 1, 1, 9, 1, 1, 1, 9, 1, 1, 1]
missing = [(cid, s * 1_000_000) for cid, s in enumerate(sizes)]
for name, plan in (("greedy", plan_load(missing, 4)), ("round robin", baseline_round_robin(missing, 4))):
    timing = simulate_plan(plan, disk.cost)
    per_worker = ", ".join(f"{t.end * 1e3:.0f}" for t in timing.threads)
    print(f"{name:>11}: makespan {timing.makespan * 1e3:.1f} ms  (per worker ms: {per_worker})")

# many requests with heavy-tailed sizes
greedy, rr = [], []
for _ in range(500):
    n = int(rng.integers(8, 60))
    req = list(enumerate((rng.pareto(1.3, n) * 2e5 + 5e4).astype(int).tolist()))
    greedy.append(simulate_plan(plan_load(req, 8), disk.cost).makespan)
    shuffled = [req[k] for k in rng.permutation(n)]
    rr.append(simulate_plan(baseline_round_robin(shuffled, 8), disk.cost).makespan)
print(f"500 requests: mean makespan greedy {np.mean(greedy) * 1e3:.2f} ms vs round robin {np.mean(rr) * 1e3:.2f} ms")
