"""Per-category K-means over pooled features and sub-category pseudo labels."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Sample
from .model import NetworkState, extract_features


@dataclass
class KMeansResult:
    centroids: np.ndarray  # (k_eff, D)
    assignments: np.ndarray  # (N,) in 0..k_eff-1
    objective: float  # mean squared distance to the assigned centroid
    effective_k: int
    history: list[float] = field(default_factory=list)  # objective after each assignment step
    converged: bool = True
    restart: int = 0


@dataclass
class ClusterModel:
    """Clustering of one parent category."""

    category: int
    ids: list[str]
    result: KMeansResult

    @property
    def assignments(self) -> dict[str, int]:
        return dict(zip(self.ids, (int(a) for a in self.result.assignments)))


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - c[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding. Stops early when every point coincides with a seed."""
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    while len(centers) < k:
        total = d2.sum()
        if total <= 0.0:
            break
        idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
        idx = min(idx, n - 1)
        while d2[idx] <= 0.0:  # guard against landing on a zero-mass point via rounding
            idx = (idx + 1) % n
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers, dtype=np.float64)


def lloyd(x: np.ndarray, centroids: np.ndarray, max_iter: int = 100) -> KMeansResult:
    """Lloyd iterations until the assignment no longer changes.

    Empty clusters are re-seeded at the point farthest from its own centroid.
    Ties go to the lowest centroid index.
    """
    c = centroids.copy()
    k = c.shape[0]
    labels = None
    history = []
    converged = False
    for _ in range(max_iter):
        d = _sq_dists(x, c)
        new = d.argmin(axis=1)
        history.append(float(d[np.arange(len(x)), new].mean()))
        if labels is not None and np.array_equal(new, labels):
            converged = True
            break
        labels = new
        counts = np.bincount(labels, minlength=k)
        for j in np.flatnonzero(counts == 0):
            own = d[np.arange(len(x)), labels]
            far = int(own.argmax())
            if own[far] <= 0.0:
                continue
            c[j] = x[far]
            d[:, j] = ((x - c[j]) ** 2).sum(axis=1)
            labels = d.argmin(axis=1)
            counts = np.bincount(labels, minlength=k)
        for j in range(k):
            members = labels == j
            if members.any():
                c[j] = x[members].mean(axis=0)
    d = _sq_dists(x, c)
    labels = d.argmin(axis=1)
    obj = float(d[np.arange(len(x)), labels].mean())
    return KMeansResult(c, labels, obj, k, history, converged)


def kmeans_cluster(features, k: int, seed: int = 0, restarts: int = 10, max_iter: int = 100) -> KMeansResult:
    """Best-of-``restarts`` Lloyd from k-means++ seeds (lowest objective, earliest restart on ties).

    When fewer than ``k`` distinct points exist the surplus centroids cannot be
    seeded; ``effective_k`` reports how many were.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ValueError(f"features must be a non-empty N x D array, got shape {x.shape}")
    if k < 1 or restarts < 1:
        raise ValueError("k and restarts must be positive")
    best = None
    for r in range(restarts):
        rng = np.random.default_rng([int(seed), r])
        res = lloyd(x, kmeans_plusplus(x, k, rng), max_iter)
        res.restart = r
        if best is None or res.objective < best.objective:
            best = res
    return _compact(best)


def _compact(res: KMeansResult) -> KMeansResult:
    """Drop member-less centroids and number clusters by lexicographic centroid order.

    The canonical numbering makes labels independent of seeding order, so
    permuting the input rows permutes the assignments and nothing else.
    """
    used = np.unique(res.assignments)
    cents = res.centroids[used]
    order = np.lexsort(cents.T[::-1])
    remap = np.full(res.centroids.shape[0], -1)
    remap[used[order]] = np.arange(len(used))
    res.centroids = cents[order]
    res.assignments = remap[res.assignments]
    res.effective_k = len(used)
    return res


# ---------------------------------------------------------------------------


def collect_features(net: NetworkState, samples: list[Sample], normalize: bool = True,
                     batch_size: int = 64) -> tuple[dict[int, tuple[list[str], np.ndarray]], list[int]]:
    """Pooled features of un-augmented images, grouped by present category.

    Returns ``({category: (ids, N_c x D)}, empty_categories)``; an image with
    several categories appears in each of their tables.
    """
    C = net.arch.num_classes
    pooled = []
    for i in range(0, len(samples), batch_size):
        batch = np.stack([s.image for s in samples[i : i + batch_size]])
        pooled.append(extract_features(net, batch).pooled)
    f = np.concatenate(pooled) if pooled else np.zeros((0, net.arch.feature_dim))
    if normalize:
        norms = np.linalg.norm(f, axis=1, keepdims=True)
        f = np.where(norms > 0, f / np.where(norms > 0, norms, 1.0), 0.0)
    tables = {}
    empty = []
    for c in range(C):
        rows = [i for i, s in enumerate(samples) if s.parent_labels[c] == 1]
        if not rows:
            empty.append(c)
            continue
        tables[c] = ([samples[i].id for i in rows], f[rows])
    return tables, empty


def cluster_categories(tables, k: int, seed: int, restarts: int = 10, max_iter: int = 100) -> dict[int, ClusterModel]:
    return {c: ClusterModel(c, ids, kmeans_cluster(f, k, seed=seed * 1009 + c, restarts=restarts, max_iter=max_iter))
            for c, (ids, f) in sorted(tables.items())}


def derive_sub_labels(cluster_models: dict[int, ClusterModel], samples: list[Sample], k: int) -> np.ndarray:
    """N x (C*K) 0/1 targets: one-hot in each present category's block, zero elsewhere."""
    if not samples:
        return np.zeros((0, 0))
    C = len(samples[0].parent_labels)
    lookup = {c: m.assignments for c, m in cluster_models.items()}
    y = np.zeros((len(samples), C * k))
    for i, s in enumerate(samples):
        for c in s.categories:
            a = lookup.get(c, {}).get(s.id)
            if a is None:
                raise ValueError(f"no sub-category assignment for image {s.id!r}, category {c}")
            if not 0 <= a < k:
                raise ValueError(f"assignment {a} for image {s.id!r} outside 0..{k - 1}")
            y[i, c * k + a] = 1.0
    return y


# ---------------------------------------------------------------------------
# quality


def nmi(labels_a, labels_b) -> float:
    """Normalised mutual information, arithmetic-mean normalisation.

    Returns 0 when both partitions are a single block (degenerate).
    """
    a = np.unique(np.asarray(labels_a), return_inverse=True)[1]
    b = np.unique(np.asarray(labels_b), return_inverse=True)[1]
    n = len(a)
    if n == 0:
        return 0.0
    table = np.zeros((a.max() + 1, b.max() + 1))
    np.add.at(table, (a, b), 1.0)
    pa = table.sum(axis=1) / n
    pb = table.sum(axis=0) / n
    pab = table / n
    nz = pab > 0
    mi = float((pab[nz] * np.log(pab[nz] / np.outer(pa, pb)[nz])).sum())
    ha = float(-(pa[pa > 0] * np.log(pa[pa > 0])).sum())
    hb = float(-(pb[pb > 0] * np.log(pb[pb > 0])).sum())
    denom = 0.5 * (ha + hb)
    if denom <= 0.0:
        return 0.0
    return float(np.clip(max(mi, 0.0) / denom, 0.0, 1.0))


def purity(assignments, reference) -> float:
    a = np.asarray(assignments)
    r = np.asarray(reference)
    if len(a) == 0:
        return 0.0
    total = 0
    for k in np.unique(a):
        _, counts = np.unique(r[a == k], return_counts=True)
        total += counts.max()
    return total / len(a)


def clustering_quality(assignments, latent_subtypes) -> dict:
    a = np.asarray(assignments)
    r = np.asarray(latent_subtypes)
    degenerate = len(np.unique(a)) <= 1 and len(np.unique(r)) <= 1
    return {"nmi": nmi(a, r), "purity": purity(a, r), "degenerate": bool(degenerate)}


def random_nmi(latent_subtypes, k: int, trials: int = 100, seed: int = 0) -> float:
    """Mean NMI of uniformly random k-way assignments against the reference."""
    r = np.asarray(latent_subtypes)
    rng = np.random.default_rng(seed)
    return float(np.mean([nmi(rng.integers(k, size=len(r)), r) for _ in range(trials)]))


def cluster_report(cluster_models: dict[int, ClusterModel], samples: list[Sample] | None = None,
                   k: int | None = None, round_index: int | None = None) -> dict:
    by_id = {s.id: s for s in samples} if samples else {}
    cats = {}
    for c, m in sorted(cluster_models.items()):
        sizes = np.bincount(m.result.assignments, minlength=m.result.effective_k)
        entry = {"n_images": len(m.ids), "objective": m.result.objective, "effective_k": m.result.effective_k,
                 "cluster_sizes": [int(v) for v in sizes], "converged": m.result.converged}
        ref = [by_id[i].latent_subtypes.get(c) for i in m.ids if i in by_id]
        if by_id and len(ref) == len(m.ids) and all(v is not None for v in ref):
            entry.update(clustering_quality(m.result.assignments, ref))
            entry["random_nmi"] = random_nmi(ref, k or m.result.effective_k, seed=c)
        cats[str(c)] = entry
    return {"round": round_index, "k": k, "categories": cats}


def write_cluster_report(report: dict, cluster_models: dict[int, ClusterModel], out_dir) -> None:
    out = Path(out_dir)
    (out / "clusters.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    with open(out / "assignments.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["id", "category", "cluster"])
        for c, m in sorted(cluster_models.items()):
            for i, a in zip(m.ids, m.result.assignments):
                wr.writerow([i, c, int(a)])
