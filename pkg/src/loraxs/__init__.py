"""LoRA-XS: low-rank adapters with frozen SVD projections and a trainable r x r latent."""
from __future__ import annotations

__version__ = "0.1.0"

from .accounting import ModelSpec, count_params, param_ratio, storage_budget
from .adapter import (
    LoraAdapter,
    LoraXsAdapter,
    delta_weight,
    forward_adapted,
    init_lora_baseline,
    init_loraxs_random,
    init_loraxs_svd,
    merge,
)
from .estimators import LoraXsRegressor, RandomizedTruncatedSVD
from .exceptions import LoraXsError
from .linalg import SvdFactors, qr_thin, svd_dense, truncated_svd
from .registry import (
    AdapterCheckpoint,
    Registry,
    attach_checkpoint,
    load_checkpoint,
    save_checkpoint,
    warm_start,
)
from .training import Dataset, Layer, LinearStack, TrainConfig, TrainRun, train

__all__ = [
    "__version__",
    "ModelSpec",
    "count_params",
    "param_ratio",
    "storage_budget",
    "LoraAdapter",
    "LoraXsAdapter",
    "delta_weight",
    "forward_adapted",
    "init_lora_baseline",
    "init_loraxs_random",
    "init_loraxs_svd",
    "merge",
    "LoraXsRegressor",
    "RandomizedTruncatedSVD",
    "LoraXsError",
    "SvdFactors",
    "qr_thin",
    "svd_dense",
    "truncated_svd",
    "AdapterCheckpoint",
    "Registry",
    "attach_checkpoint",
    "load_checkpoint",
    "save_checkpoint",
    "warm_start",
    "Dataset",
    "Layer",
    "LinearStack",
    "TrainConfig",
    "TrainRun",
    "train",
]
