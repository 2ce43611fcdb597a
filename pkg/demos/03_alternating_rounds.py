"""
Alternating rounds: cluster, relabel, train
===========================================

Round 0 trains the classifier on parent labels only. Every later round
clusters the pooled features of each category into K sub-categories, turns
the cluster ids into a second label block, and keeps training with both
losses. This script runs a shortened ``bench-v1`` schedule twice (joint and
parent-only, same seed and same epochs) and prints per-round CAM quality
together with how well the clusters line up with the planted sub-types.

It takes a few minutes on one core. Use the ``subcam train --bench bench-v1``
command for the full-size run.
"""

import time

from subcam.config import load_benchmark
from subcam.data import generate_dataset
from subcam.train import run_algorithm

bench = load_benchmark("bench-v1")
spec = bench.data.__class__.from_dict({**bench.data.to_dict(), "n_train": 600, "n_eval": 150})
cfg = bench.train.replace(epochs=4)
train, ev = generate_dataset(spec, "train"), generate_dataset(spec, "eval")

# %% joint training
t0 = time.perf_counter()
joint = run_algorithm(train, cfg, eval_samples=ev)
print(f"joint run: {time.perf_counter() - t0:.0f}s")
for art in joint:
    m = art.metrics
    line = f"round {art.round_index}: mIoU {100 * m['miou']:.2f}  F {100 * m['fscore']:.2f}"
    if art.cluster_report:
        cats = art.cluster_report["categories"]
        line += "  NMI " + " ".join(f"c{c}={v['nmi']:.2f} (random {v['random_nmi']:.2f})" for c, v in cats.items())
    print(line)

# %% parent-only reference with the same schedule
parent = run_algorithm(train, cfg, eval_samples=ev, parent_only=True)
for a, b in zip(joint, parent):
    print(f"round {a.round_index}: joint {100 * a.metrics['miou']:.2f}  parent-only {100 * b.metrics['miou']:.2f}")
