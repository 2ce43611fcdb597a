"""Classification network: conv feature extractor, GAP, parent and sub-category heads."""

from __future__ import annotations

import base64
import csv
import json
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_FORMAT = "subcam-checkpoint/1"


@dataclass(frozen=True)
class Architecture:
    """Network layout.

    Each entry of ``channels`` is one block: 3x3 conv, ReLU and (when the
    matching ``pool`` flag is set) 2x2 max-pool. A final 3x3 conv + ReLU maps
    to ``feature_dim`` channels, which feed GAP and both linear heads.
    """

    num_classes: int = 20
    num_subclusters: int = 10
    channels: tuple[int, ...] = (32, 64, 64, 128)
    pool: tuple[bool, ...] | None = None
    feature_dim: int = 128
    head_bias: bool = False
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        pool = (True,) * len(self.channels) if self.pool is None else tuple(bool(p) for p in self.pool)
        object.__setattr__(self, "pool", pool)
        if len(self.channels) < 2:
            raise ValueError(f"architecture needs at least 2 conv blocks, got {len(self.channels)}")
        if len(pool) != len(self.channels):
            raise ValueError("pool flags must match the number of conv blocks")
        if self.feature_dim < 16:
            raise ValueError(f"feature_dim must be >= 16, got {self.feature_dim}")
        if any(c < 1 for c in self.channels) or self.num_classes < 1 or self.num_subclusters < 1:
            raise ValueError("channel widths, num_classes and num_subclusters must be positive")

    @property
    def downsample(self) -> int:
        return 2 ** sum(self.pool)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["pool"] = list(self.pool)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(**d)


@dataclass
class FeatureOutput:
    feature_map: np.ndarray  # (h, w, D) or (N, h, w, D)
    pooled: np.ndarray  # (D,) or (N, D)


@dataclass
class NetworkState:
    arch: Architecture
    params: dict[str, Tensor]
    seed: int
    round_index: int = 0
    extra: dict = field(default_factory=dict)

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "NetworkState":
        params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return NetworkState(self.arch, params, self.seed, self.round_index, dict(self.extra))


def _param_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def _uniform(seed: int, name: str, shape, fan_in: int, gain: float) -> Tensor:
    bound = gain / np.sqrt(fan_in)
    data = _param_rng(seed, name).uniform(-bound, bound, size=shape)
    return Tensor(data, requires_grad=True, name=name)


def _zeros(name: str, shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def _head(seed: int, prefix: str, rows: int, arch: Architecture) -> dict[str, Tensor]:
    out = {f"{prefix}.w": _uniform(seed, f"{prefix}.w", (rows, arch.feature_dim), arch.feature_dim, 1.0)}
    if arch.head_bias:
        out[f"{prefix}.b"] = _zeros(f"{prefix}.b", (rows,))
    return out


def init_network(arch: Architecture, seed: int) -> NetworkState:
    """Fan-in scaled uniform initialisation; every tensor has its own seeded stream.

    Conv biases start at zero, so an all-zero image yields all-zero features.
    """
    if not isinstance(arch, Architecture):
        arch = Architecture.from_dict(arch)
    params: dict[str, Tensor] = {}
    cin = arch.in_channels
    for i, cout in enumerate(arch.channels):
        params[f"conv{i}.w"] = _uniform(seed, f"conv{i}.w", (3, 3, cin, cout), 9 * cin, np.sqrt(6.0))
        params[f"conv{i}.b"] = _zeros(f"conv{i}.b", (cout,))
        cin = cout
    params["feat.w"] = _uniform(seed, "feat.w", (3, 3, cin, arch.feature_dim), 9 * cin, np.sqrt(6.0))
    params["feat.b"] = _zeros("feat.b", (arch.feature_dim,))
    params.update(_head(seed, "head_p", arch.num_classes, arch))
    params.update(_head(seed, "head_s", arch.num_classes * arch.num_subclusters, arch))
    return NetworkState(arch, params, int(seed))


def reinit_sub_head(net: NetworkState, seed: int, num_subclusters: int | None = None) -> None:
    """Draw a fresh sub-category head; the extractor and parent head are untouched."""
    if num_subclusters is not None and num_subclusters != net.arch.num_subclusters:
        net.arch = replace(net.arch, num_subclusters=int(num_subclusters))
    for k in [k for k in net.params if k.startswith("head_s.")]:
        del net.params[k]
    net.params.update(_head(seed, "head_s", net.arch.num_classes * net.arch.num_subclusters, net.arch))


def _as_batch(images) -> tuple[np.ndarray, bool]:
    x = np.asarray(images, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"expected an H x W x 3 image or a batch of them, got shape {x.shape}")
    return x, single


def forward_features(net: NetworkState, images: np.ndarray) -> tuple[Tensor, Tensor]:
    """Recorded forward pass: (feature map N x h x w x D, pooled N x D)."""
    x, _ = _as_batch(images)
    if x.shape[-1] != net.arch.in_channels:
        raise ValueError(f"expected {net.arch.in_channels} image channels, got {x.shape[-1]}")
    ds = net.arch.downsample
    if x.shape[1] % ds or x.shape[2] % ds:
        raise ValueError(f"image size {x.shape[1:3]} not divisible by downsampling factor {ds}")
    p = net.params
    h = Tensor(x)
    for i, pooled in enumerate(net.arch.pool):
        h = T.relu(T.bias_add(T.conv2d(h, p[f"conv{i}.w"]), p[f"conv{i}.b"]))
        if pooled:
            h = T.max_pool2d(h)
    fmap = T.relu(T.bias_add(T.conv2d(h, p["feat.w"]), p["feat.b"]))
    return fmap, T.global_avg_pool(fmap)


def extract_features(net: NetworkState, image) -> FeatureOutput:
    """Feature map and its spatial mean for one image (H x W x 3) or a batch."""
    _, single = _as_batch(image)
    with T.no_grad():
        fmap, pooled = forward_features(net, image)
    if single:
        return FeatureOutput(fmap.data[0], pooled.data[0])
    return FeatureOutput(fmap.data, pooled.data)


def _logits(net: NetworkState, prefix: str, pooled) -> Tensor:
    x = pooled if isinstance(pooled, Tensor) else Tensor(np.atleast_2d(pooled))
    w = net.params[f"{prefix}.w"]
    if x.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"{prefix}: pooled feature has shape {x.shape}, expected (*, {w.shape[1]})")
    return T.linear(x, w, net.params.get(f"{prefix}.b"))


def parent_logits(net: NetworkState, pooled):
    """C logits (per row). Returns a Tensor for Tensor input, else an ndarray."""
    if isinstance(pooled, Tensor):
        return _logits(net, "head_p", pooled)
    with T.no_grad():
        out = _logits(net, "head_p", pooled).data
    return out[0] if np.ndim(pooled) == 1 else out


def sub_logits(net: NetworkState, pooled):
    """C*K logits, laid out category-major (block c holds its K sub-categories)."""
    if isinstance(pooled, Tensor):
        return _logits(net, "head_s", pooled)
    with T.no_grad():
        out = _logits(net, "head_s", pooled).data
    return out[0] if np.ndim(pooled) == 1 else out


# ---------------------------------------------------------------------------
# persistence


def _encode(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "dtype": "<f8", "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=d.get("dtype", "<f8")).reshape(d["shape"]).astype(np.float64)


def save_checkpoint(net: NetworkState, path, rng_state: dict | None = None) -> None:
    """Write a JSON container with base64-encoded little-endian float64 arrays."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "architecture": net.arch.to_dict(),
        "seed": net.seed,
        "round": net.round_index,
        "rng_state": rng_state,
        "extra": net.extra,
        "params": {k: _encode(v.data) for k, v in sorted(net.params.items())},
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_checkpoint(path) -> NetworkState:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    doc = json.loads(path.read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {doc.get('format')!r}")
    arch = Architecture.from_dict(doc["architecture"])
    params = {k: Tensor(_decode(v), requires_grad=True, name=k) for k, v in doc["params"].items()}
    return NetworkState(arch, params, int(doc["seed"]), int(doc["round"]), doc.get("extra") or {})


def export_classifier_weights(net: NetworkState, path) -> None:
    """CSV rows ``head,category,subcluster,w0..w{D-1}`` for both linear heads."""
    d = net.arch.feature_dim
    k = net.arch.num_subclusters
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["head", "category", "subcluster"] + [f"w{i}" for i in range(d)])
        for c, row in enumerate(net.params["head_p.w"].data):
            wr.writerow(["parent", c, ""] + [repr(float(v)) for v in row])
        for r, row in enumerate(net.params["head_s.w"].data):
            wr.writerow(["sub", r // k, r % k] + [repr(float(v)) for v in row])
