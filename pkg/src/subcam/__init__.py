"""Sub-category exploration for weakly-supervised class activation maps.

A small numpy-only toolkit: reverse-mode autodiff and a compact CNN
(:mod:`.tensor`, :mod:`.model`, :mod:`.optim`), a synthetic multi-label
dataset with planted sub-types (:mod:`.data`), per-category K-means
(:mod:`.cluster`), the alternating clustering / training loop
(:mod:`.train`), and CAM evaluation (:mod:`.cam`).
"""

from .cam import compute_cam, cam_to_mask, evaluate_split, segmentation_metrics, sweep_k
from .cluster import derive_sub_labels, kmeans_cluster, nmi
from .config import RunConfig, load_benchmark
from .data import DatasetSpec, Sample, generate_dataset, load_dataset
from .model import Architecture, init_network, load_checkpoint, save_checkpoint
from .train import TrainConfig, joint_loss, run_algorithm, train_round

__version__ = "0.1.0"

__all__ = [
    "Architecture", "DatasetSpec", "RunConfig", "Sample", "TrainConfig", "cam_to_mask", "compute_cam",
    "derive_sub_labels", "evaluate_split", "generate_dataset", "init_network", "joint_loss", "kmeans_cluster",
    "load_benchmark", "load_checkpoint", "load_dataset", "nmi", "run_algorithm", "save_checkpoint",
    "segmentation_metrics", "sweep_k", "train_round",
]
