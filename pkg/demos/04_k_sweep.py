"""
Sensitivity to the number of sub-categories
===========================================

K = 1 turns the sub-category head into a copy of the parent head, so it is
the natural reference point. This script sweeps K on a reduced ``bench-v1``
and reports the final-round CAM mIoU per K. All runs share one round-0 model.
On a subset this small single runs are noisy; the full-size sweep is part of
the acceptance tests.
"""

from subcam.cam import sweep_k
from subcam.config import load_benchmark
from subcam.data import generate_dataset

bench = load_benchmark("bench-v1")
spec = bench.data.__class__.from_dict({**bench.data.to_dict(), "n_train": 600, "n_eval": 150})
cfg = bench.train.replace(epochs=4)
train, ev = generate_dataset(spec, "train"), generate_dataset(spec, "eval")

rows = sweep_k(train, cfg, [1, 2, 4, 8], eval_samples=ev)
base = dict(rows)[1]
for k, miou in rows:
    print(f"K={k}: mIoU {100 * miou:.2f}  ({100 * (miou - base):+.2f} vs K=1)")
