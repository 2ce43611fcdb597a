"""Losses, the per-round training loop and the alternating clustering/training driver."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .cam import DEFAULT_THRESHOLD, evaluate_split, write_metrics
from .cluster import cluster_categories, cluster_report, collect_features, derive_sub_labels, write_cluster_report
from .data import AugmentationPolicy, Sample, augment
from .model import Architecture, NetworkState, forward_features, init_network, parent_logits, reinit_sub_head, \
    save_checkpoint, sub_logits
from .optim import AdamState, adam_step
from .tensor import Tensor

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class RoundError(RuntimeError):
    """A stage of the alternation failed; earlier rounds' artifacts are kept."""

    def __init__(self, round_index: int, stage: str, cause: Exception):
        self.round_index, self.stage = round_index, stage
        super().__init__(f"round {round_index}: {stage} failed: {cause}")


def _strict(cls, d: dict, what: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown {what} field(s): {', '.join(unknown)}")
    return d


@dataclass
class TrainConfig:
    lam: float = 5.0
    k: int = 10
    rounds: int = 3
    epochs: int = 15
    epochs_round0: int | None = None
    batch_size: int = 16
    learning_rate: float = 1e-3
    lr_decay: float = 1.0
    weight_decay: float = 5e-4
    decoupled_weight_decay: bool = False
    seed: int = 0
    augmentation: dict = field(default_factory=lambda: AugmentationPolicy().to_dict())
    architecture: dict = field(default_factory=dict)
    normalize_features: bool = True
    kmeans_restarts: int = 10
    kmeans_max_iter: int = 100
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lam must be non-negative")
        if self.k < 1 or self.rounds < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("k, epochs and batch_size must be positive; rounds non-negative")
        if self.epochs_round0 is not None and self.epochs_round0 < 1:
            raise ConfigError("epochs_round0 must be positive")
        if self.learning_rate <= 0 or self.weight_decay < 0 or self.lr_decay <= 0:
            raise ConfigError("learning_rate and lr_decay must be positive, weight_decay non-negative")
        if not 0 < self.threshold < 1:
            raise ConfigError("threshold must lie in (0, 1)")
        _strict(Architecture, {k: v for k, v in self.architecture.items()}, "architecture")
        _strict(AugmentationPolicy, self.augmentation, "augmentation")

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**_strict(cls, d, "TrainConfig"))

    def policy(self) -> AugmentationPolicy:
        d = dict(self.augmentation)
        d.setdefault("seed", self.seed)
        return AugmentationPolicy(**{**d, "crop_range": tuple(d.get("crop_range", (0.8, 1.0))),
                                     "scale_range": tuple(d.get("scale_range", (0.9, 1.1)))})

    def build_architecture(self, num_classes: int) -> Architecture:
        d = {**self.architecture, "num_classes": num_classes, "num_subclusters": self.k}
        return Architecture.from_dict(d)


def substream(seed: int, *keys: int) -> int:
    """Independent integer seed for a named purpose (data, init, batches, clustering...)."""
    return int(np.random.SeedSequence([int(seed), *keys]).generate_state(1)[0])


STREAM_BATCHES, STREAM_CLUSTER, STREAM_SUBHEAD, STREAM_AUG = 11, 12, 13, 14


# ---------------------------------------------------------------------------
# losses


def multilabel_loss(logits, targets) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) over every entry."""
    return T.bce_with_logits(logits if isinstance(logits, Tensor) else Tensor(logits), targets)


def joint_loss(parent_logits_, y_parent, sub_logits_, y_sub, lam: float) -> Tensor:
    """Parent loss plus ``lam`` times the sub-category loss."""
    if lam < 0:
        raise ValueError("lam must be non-negative")
    lp = multilabel_loss(parent_logits_, y_parent)
    ls = multilabel_loss(sub_logits_, y_sub)
    return T.add(lp, T.scale(ls, lam))


# ---------------------------------------------------------------------------


@dataclass
class RoundArtifacts:
    round_index: int
    net: NetworkState
    metrics: dict | None = None
    cluster_report: dict | None = None
    log: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None


def _trainable(net: NetworkState, with_sub: bool) -> dict[str, Tensor]:
    return {k: v for k, v in net.params.items() if with_sub or not k.startswith("head_s.")}


def train_round(net: NetworkState, samples: list[Sample], sub_labels: np.ndarray | None, config: TrainConfig,
                round_index: int) -> list[dict]:
    """Mini-batch Adam for one round; returns per-epoch mean losses.

    Round 0 must be parent-only (``sub_labels is None``); later rounds need a
    sub-label row for every sample unless explicitly run parent-only.
    """
    if round_index == 0 and sub_labels is not None:
        raise ValueError("round 0 trains the parent head only and takes no sub labels")
    if sub_labels is not None:
        sub_labels = np.asarray(sub_labels, dtype=np.float64)
        expect = net.arch.num_classes * net.arch.num_subclusters
        if sub_labels.shape != (len(samples), expect):
            raise ValueError(f"sub labels must be {len(samples)} x {expect}, got {sub_labels.shape}")
    y_parent = np.stack([s.parent_labels for s in samples]).astype(np.float64)
    policy = config.policy()
    policy.seed = substream(config.seed, STREAM_AUG)
    opt = AdamState(learning_rate=config.learning_rate * config.lr_decay**round_index,
                    weight_decay=config.weight_decay, decoupled=config.decoupled_weight_decay)
    params = _trainable(net, sub_labels is not None)
    epochs = config.epochs_round0 if round_index == 0 and config.epochs_round0 else config.epochs
    rows = []
    n = len(samples)
    for epoch in range(epochs):
        order = np.random.default_rng(substream(config.seed, STREAM_BATCHES, round_index, epoch)).permutation(n)
        aug_epoch = round_index * 100_000 + epoch
        tot = lp_tot = ls_tot = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            x = np.stack([augment(samples[i], policy, aug_epoch).image for i in idx])
            _, pooled = forward_features(net, x)
            zp = parent_logits(net, pooled)
            lp = multilabel_loss(zp, y_parent[idx])
            if sub_labels is not None:
                zs = sub_logits(net, pooled)
                ls = multilabel_loss(zs, sub_labels[idx])
                loss = T.add(lp, T.scale(ls, config.lam))
                ls_tot += float(ls.data) * len(idx)
            else:
                loss = lp
            net.zero_grad()
            T.backward(loss)
            adam_step(opt, params)
            tot += float(loss.data) * len(idx)
            lp_tot += float(lp.data) * len(idx)
        rows.append({"round": round_index, "epoch": epoch, "loss": tot / n, "parent_loss": lp_tot / n,
                     "sub_loss": ls_tot / n if sub_labels is not None else 0.0})
        log.info("round %d epoch %d loss %.5f", round_index, epoch, tot / n)
    net.round_index = round_index
    return rows


def _baseline_key(config: TrainConfig, samples: list[Sample]) -> str:
    d = config.to_dict()
    for k in ("lam", "k", "rounds", "kmeans_restarts", "kmeans_max_iter", "normalize_features"):
        d.pop(k)
    return json.dumps(d, sort_keys=True) + f"|{len(samples)}|{samples[0].id if samples else ''}"


def run_algorithm(samples: list[Sample], config: TrainConfig, eval_samples: list[Sample] | None = None,
                  out_dir=None, parent_only: bool = False, baseline_cache: dict | None = None,
                  config_doc: dict | None = None) -> list[RoundArtifacts]:
    """Parent-only round 0, then ``config.rounds`` rounds of cluster -> relabel -> joint training.

    With ``parent_only`` every round skips clustering and the sub-category
    loss (reference run). ``baseline_cache`` lets several runs that differ
    only in K or lambda share one round-0 model. ``config_doc`` replaces
    the training config as the content of ``config.json`` (the CLI stores
    its full run configuration there).
    """
    if not samples:
        raise ConfigError("no training samples")
    C = len(samples[0].parent_labels)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        doc = config_doc if config_doc is not None else config.to_dict()
        (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    log_rows: list[dict] = []
    artifacts: list[RoundArtifacts] = []

    def finish(r: int, net: NetworkState, rows: list[dict], report=None, models=None) -> None:
        metrics = None
        rdir = None
        if out is not None:
            rdir = out / f"round-{r}"
            rdir.mkdir(exist_ok=True)
            save_checkpoint(net, rdir / "checkpoint.json", rng_state={"seed": config.seed, "round": r})
            if report is not None:
                write_cluster_report(report, models, rdir)
        if eval_samples:
            try:
                m = evaluate_split(net, eval_samples, config.threshold)
            except Exception as exc:
                raise RoundError(r, "evaluation", exc) from exc
            metrics = {"round": r, "threshold": config.threshold, **m.to_dict()}
            if rdir is not None:
                write_metrics(m, rdir / "metrics.json", config.threshold, r)
        log_rows.extend(rows)
        if out is not None:
            _write_log(log_rows, out / "log.csv")
        artifacts.append(RoundArtifacts(r, net.copy(), metrics, report, rows,
                                        rdir / "checkpoint.json" if rdir is not None else None))

    key = _baseline_key(config, samples) if baseline_cache is not None else None
    if key is not None and key in baseline_cache:
        net0, rows0 = baseline_cache[key]
        net = net0.copy()
        reinit_sub_head(net, config.seed, config.k)
        rows = [dict(r) for r in rows0]
    else:
        try:
            net = init_network(config.build_architecture(C), config.seed)
            rows = train_round(net, samples, None, config, 0)
        except Exception as exc:
            raise RoundError(0, "parent-only training", exc) from exc
        if key is not None:
            baseline_cache[key] = (net.copy(), rows)
    finish(0, net, rows)

    for r in range(1, config.rounds + 1):
        if parent_only:
            rows = train_round(net, samples, None, config, r)
            finish(r, net, rows)
            continue
        try:
            tables, empty = collect_features(net, samples, config.normalize_features)
        except Exception as exc:
            raise RoundError(r, "feature extraction", exc) from exc
        if empty:
            log.warning("round %d: categories %s have no images and are not clustered", r, empty)
        try:
            models = cluster_categories(tables, config.k, substream(config.seed, STREAM_CLUSTER, r),
                                        config.kmeans_restarts, config.kmeans_max_iter)
            y_sub = derive_sub_labels(models, samples, config.k)
        except Exception as exc:
            raise RoundError(r, "clustering", exc) from exc
        report = cluster_report(models, samples, config.k, r)
        reinit_sub_head(net, substream(config.seed, STREAM_SUBHEAD, r), config.k)
        try:
            rows = train_round(net, samples, y_sub, config, r)
        except Exception as exc:
            raise RoundError(r, "joint training", exc) from exc
        finish(r, net, rows, report, models)
    return artifacts


def _write_log(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["round", "epoch", "loss", "parent_loss", "sub_loss"])
        for r in rows:
            wr.writerow([r["round"], r["epoch"], repr(r["loss"]), repr(r["parent_loss"]), repr(r["sub_loss"])])
