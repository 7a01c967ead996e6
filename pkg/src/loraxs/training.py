"""Backpropagation through adapted linear stacks and AdamW training of the trainables.

Data is column-major: an input batch ``x`` is ``n_features x batch`` and a
layer computes ``h = W x + delta_W x`` followed by its activation.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.special import erf

from ._validation import as_matrix, check_positive_int, check_real, check_seed
from .adapter import LoraAdapter, LoraXsAdapter, matrix_digest
from .exceptions import NumericError, ParameterError, ShapeError, StateError, TrainingDivergedError

__all__ = [
    "Dataset",
    "Layer",
    "LinearStack",
    "ForwardCache",
    "Gradients",
    "TrainConfig",
    "TrainRun",
    "AdamState",
    "forward_model",
    "compute_loss",
    "backward_adapter_grads",
    "loss_and_grads",
    "finite_diff_grad",
    "adamw_step",
    "lr_multiplier",
    "evaluate",
    "train",
    "params_digest",
]

ACTIVATIONS = ("none", "relu", "gelu")
HEADS = ("mse", "softmax_cross_entropy")
SCHEDULERS = ("linear", "cosine")

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass
class Dataset:
    """Inputs ``x`` (n x N) with targets ``y``: m x N reals, or N integer class labels."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = as_matrix(self.x, "x")
        y = np.asarray(self.y)
        if y.ndim == 1:
            if not np.issubdtype(y.dtype, np.integer):
                raise ParameterError("1-D targets must be integer class labels")
        else:
            y = as_matrix(y, "y")
        if y.shape[-1] != self.x.shape[1]:
            raise ShapeError(f"x has {self.x.shape[1]} samples but y has {y.shape[-1]}")
        self.y = y

    @property
    def n_samples(self) -> int:
        return self.x.shape[1]

    @property
    def is_classification(self) -> bool:
        return self.y.ndim == 1

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[:, idx], self.y[..., idx])


@dataclass(eq=False)
class Layer:
    weight: np.ndarray
    adapter: LoraXsAdapter | LoraAdapter | None = None
    activation: str = "none"

    def __post_init__(self):
        w = np.array(as_matrix(self.weight, "weight"), dtype=np.float64)
        w.setflags(write=False)
        self.weight = w
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.adapter is not None and self.adapter.shape != w.shape:
            raise ShapeError(f"adapter shape {self.adapter.shape} does not match weight {w.shape}")


@dataclass(eq=False)
class LinearStack:
    """Chain of (possibly adapted) linear layers with a loss head.

    Base weights are frozen. When ``head_trainable`` is set, the last layer's
    weight becomes a trainable parameter in its own optimizer group.
    """

    layers: list[Layer]
    head: str = "mse"
    head_trainable: bool = False

    def __post_init__(self):
        if not self.layers:
            raise ParameterError("a LinearStack needs at least one layer")
        if self.head not in HEADS:
            raise ParameterError(f"head must be one of {HEADS}, got {self.head!r}")
        for i in range(1, len(self.layers)):
            prev, cur = self.layers[i - 1].weight.shape, self.layers[i].weight.shape
            if prev[0] != cur[1]:
                raise ShapeError(f"layer {i - 1} outputs {prev[0]} but layer {i} expects {cur[1]}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def trainable_params(self) -> dict[str, np.ndarray]:
        params = {}
        for i, layer in enumerate(self.layers):
            if layer.adapter is not None:
                for name, value in layer.adapter.trainable().items():
                    params[f"{i}.{name}"] = value.copy()
        if self.head_trainable:
            params[f"{len(self.layers) - 1}.weight"] = self.layers[-1].weight.copy()
        return params

    def param_groups(self) -> dict[str, str]:
        return {name: ("head" if name.endswith(".weight") else "adapter") for name in self.trainable_params()}

    def set_trainable_params(self, params: Mapping[str, np.ndarray]) -> None:
        per_layer: dict[int, dict[str, np.ndarray]] = {}
        for name, value in params.items():
            idx, key = name.split(".", 1)
            per_layer.setdefault(int(idx), {})[key] = value
        for idx, values in per_layer.items():
            layer = self.layers[idx]
            if "weight" in values:
                if not (self.head_trainable and idx == len(self.layers) - 1):
                    raise StateError(f"layer {idx} weight is frozen")
                w = np.array(values.pop("weight"), dtype=np.float64)
                if w.shape != layer.weight.shape:
                    raise ShapeError(f"weight {idx} must be {layer.weight.shape}, got {w.shape}")
                w.setflags(write=False)
                layer.weight = w
            if values:
                layer.adapter.set_trainable(values)

    def frozen_digest(self) -> str:
        """Hex digest over every frozen matrix: base weights (minus a trainable head) and LoRA-XS A/B."""
        h = hashlib.sha256()
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            if not (self.head_trainable and i == last):
                h.update(matrix_digest(layer.weight))
            if isinstance(layer.adapter, LoraXsAdapter):
                h.update(matrix_digest(layer.adapter.a_frozen))
                h.update(matrix_digest(layer.adapter.b_frozen))
        return h.hexdigest()

    def n_trainable(self) -> int:
        return sum(v.size for v in self.trainable_params().values())


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]
    pre_activations: list[np.ndarray]
    signature: tuple


@dataclass
class Gradients:
    params: dict[str, np.ndarray]
    input: np.ndarray


def _signature(model: LinearStack) -> tuple:
    return (id(model),) + tuple(
        (layer.weight.shape, type(layer.adapter).__name__, layer.activation) for layer in model.layers
    )


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "gelu":
        return 0.5 * z * (1.0 + erf(z / _SQRT2))
    return z


def _activation_grad(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return (z > 0).astype(np.float64)
    if kind == "gelu":
        return 0.5 * (1.0 + erf(z / _SQRT2)) + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    return np.ones_like(z)


def forward_model(model: LinearStack, x) -> tuple[np.ndarray, ForwardCache]:
    x = as_matrix(x, "x")
    if x.shape[0] != model.in_dim:
        raise ShapeError(f"input has {x.shape[0]} rows, model expects {model.in_dim}")
    inputs, pre = [], []
    h = x
    for layer in model.layers:
        inputs.append(h)
        z = layer.weight @ h
        if layer.adapter is not None:
            z = z + layer.adapter.apply(h)
        pre.append(z)
        h = _activate(layer.activation, z)
    return h, ForwardCache(inputs, pre, _signature(model))


def compute_loss(head: str, pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch-mean loss and its gradient with respect to ``pred``.

    ``mse`` is half the squared error summed over outputs, averaged over the
    batch; ``softmax_cross_entropy`` takes integer labels.
    """
    batch = pred.shape[1]
    if head == "mse":
        if target.shape != pred.shape:
            raise ShapeError(f"targets {target.shape} do not match predictions {pred.shape}")
        diff = pred - target
        return 0.5 * float(np.sum(diff * diff)) / batch, diff / batch
    if head == "softmax_cross_entropy":
        labels = np.asarray(target)
        if labels.shape != (batch,):
            raise ShapeError(f"expected {batch} labels, got shape {labels.shape}")
        z = pred - pred.max(axis=0, keepdims=True)
        log_norm = np.log(np.exp(z).sum(axis=0, keepdims=True))
        log_p = z - log_norm
        cols = np.arange(batch)
        loss = -float(np.mean(log_p[labels, cols]))
        grad = np.exp(log_p)
        grad[labels, cols] -= 1.0
        return loss, grad / batch
    raise ParameterError(f"unknown head {head!r}")


def backward_adapter_grads(model: LinearStack, cache: ForwardCache, upstream) -> Gradients:
    """Reverse pass: gradients of every trainable given dLoss/dOutput ``upstream``.

    For a LoRA-XS layer with input X and pre-activation gradient G:
    ``dR = s * (B^T G)(A X)^T``. For LoRA: ``dB = s * G (A X)^T`` and
    ``dA = s * (B^T G) X^T``.
    """
    if cache.signature != _signature(model):
        raise StateError("forward cache does not belong to this model")
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != cache.pre_activations[-1].shape:
        raise ShapeError(f"upstream shape {g.shape} does not match output {cache.pre_activations[-1].shape}")
    grads: dict[str, np.ndarray] = {}
    last = len(model.layers) - 1
    for i in range(last, -1, -1):
        layer = model.layers[i]
        x = cache.inputs[i]
        g = g * _activation_grad(layer.activation, cache.pre_activations[i])
        if model.head_trainable and i == last:
            grads[f"{i}.weight"] = g @ x.T
        g_in = layer.weight.T @ g
        ad = layer.adapter
        if isinstance(ad, LoraXsAdapter):
            s = ad.scaling
            bt_g = ad.b_frozen.T @ g
            grads[f"{i}.r_latent"] = s * (bt_g @ (ad.a_frozen @ x).T)
            g_in = g_in + s * (ad.a_frozen.T @ (ad.r_latent.T @ bt_g))
        elif isinstance(ad, LoraAdapter):
            s = ad.scaling
            bt_g = ad.b_train.T @ g
            grads[f"{i}.b_train"] = s * (g @ (ad.a_train @ x).T)
            grads[f"{i}.a_train"] = s * (bt_g @ x.T)
            g_in = g_in + s * (ad.a_train.T @ bt_g)
        g = g_in
    return Gradients(grads, g)


def loss_and_grads(model: LinearStack, data: Dataset) -> tuple[float, dict[str, np.ndarray]]:
    pred, cache = forward_model(model, data.x)
    loss, upstream = compute_loss(model.head, pred, data.y)
    return loss, backward_adapter_grads(model, cache, upstream).params


def finite_diff_grad(loss_fn: Callable[[np.ndarray], float], r_latent, eps: float = 1e-6) -> np.ndarray:
    """Entrywise central differences ``(L(R + eps E_ij) - L(R - eps E_ij)) / (2 eps)``."""
    eps = check_real(eps, "eps", low=0.0, low_open=True)
    base = np.array(r_latent, dtype=np.float64)
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus = base.copy()
        plus[idx] += eps
        minus = base.copy()
        minus[idx] -= eps
        grad[idx] = (loss_fn(plus) - loss_fn(minus)) / (2.0 * eps)
    return grad


@dataclass(frozen=True)
class TrainConfig:
    adapter_lr: float = 1e-2
    head_lr: float | None = None
    epochs: int = 10
    batch_size: int = 32
    warmup_ratio: float = 0.06
    scheduler: str = "linear"
    weight_decay: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_grad_norm: float | None = None
    seed: int = 0

    def __post_init__(self):
        check_real(self.adapter_lr, "adapter_lr", low=0.0, low_open=True)
        if self.head_lr is not None:
            check_real(self.head_lr, "head_lr", low=0.0, low_open=True)
        check_positive_int(self.epochs, "epochs", minimum=0)
        check_positive_int(self.batch_size, "batch_size")
        check_real(self.warmup_ratio, "warmup_ratio", low=0.0, high=1.0, high_open=True)
        if self.scheduler not in SCHEDULERS:
            raise ParameterError(f"scheduler must be one of {SCHEDULERS}, got {self.scheduler!r}")
        check_real(self.weight_decay, "weight_decay", low=0.0)
        check_real(self.adam_beta1, "adam_beta1", low=0.0, high=1.0, low_open=True, high_open=True)
        check_real(self.adam_beta2, "adam_beta2", low=0.0, high=1.0, low_open=True, high_open=True)
        check_real(self.adam_eps, "adam_eps", low=0.0, low_open=True)
        if self.max_grad_norm is not None:
            check_real(self.max_grad_norm, "max_grad_norm", low=0.0, low_open=True)
        check_seed(self.seed)

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> "TrainConfig":
        """Build from string or typed values, e.g. a parsed config-file section."""
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in kinds:
                raise ParameterError(f"unknown training option {key!r}")
            kind = kinds[key]
            if isinstance(raw, str):
                text = raw.strip()
                if "None" in kind and text.lower() in ("", "none"):
                    raw = None
                elif kind.startswith("int"):
                    raw = int(text)
                elif kind.startswith("float"):
                    raw = float(text)
                else:
                    raw = text
            kwargs[key] = raw
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    step_index: int,
    config: TrainConfig,
    lr_multiplier: float = 1.0,
    groups: Mapping[str, str] | None = None,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One AdamW update with bias correction and decoupled weight decay.

    Returns fresh ``(params, state)``; the inputs are left untouched. Decay
    uses the pre-update parameter value.
    """
    check_positive_int(step_index, "step_index")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r}; step {step_index} refused")
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    c1 = 1.0 - b1**step_index
    c2 = 1.0 - b2**step_index
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m_prev, v_prev = state.m[name], state.v[name]
        if m_prev.shape != p.shape or v_prev.shape != p.shape or g.shape != p.shape:
            raise ShapeError(f"optimizer state/gradient shape mismatch for {name!r}")
        group = groups.get(name, "adapter") if groups else "adapter"
        base_lr = config.head_lr if group == "head" and config.head_lr is not None else config.adapter_lr
        lr = base_lr * lr_multiplier
        m = b1 * m_prev + (1.0 - b1) * g
        v = b2 * v_prev + (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        new_params[name] = p - lr * (m_hat / (np.sqrt(v_hat) + eps)) - lr * config.weight_decay * p
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v)


def warmup_steps(total_steps: int, warmup_ratio: float) -> int:
    # rounding guards against 0.06 * 100 == 6.000000000000001
    return math.ceil(round(warmup_ratio * total_steps, 9))


def lr_multiplier(step: int, total_steps: int, warmup_ratio: float, scheduler: str = "linear") -> float:
    """Linear warmup to 1, then linear or cosine decay to 0 at ``total_steps``."""
    if total_steps < 1:
        raise ParameterError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ParameterError(f"step {step} outside [0, {total_steps}]")
    if scheduler not in SCHEDULERS:
        raise ParameterError(f"scheduler must be one of {SCHEDULERS}, got {scheduler!r}")
    warm = warmup_steps(total_steps, warmup_ratio)
    if step < warm:
        return step / warm
    progress = (step - warm) / max(1, total_steps - warm)
    if scheduler == "linear":
        return max(0.0, 1.0 - progress)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def params_digest(params: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(matrix_digest(params[name]))
    return h.hexdigest()


def evaluate(model: LinearStack, data: Dataset) -> tuple[float, float | None]:
    """Loss on ``data`` and, for classification heads, accuracy."""
    pred, _ = forward_model(model, data.x)
    loss, _ = compute_loss(model.head, pred, data.y)
    acc = None
    if model.head == "softmax_cross_entropy":
        acc = float(np.mean(np.argmax(pred, axis=0) == data.y))
    return loss, acc


@dataclass
class TrainRun:
    loss_by_epoch: list[float]
    steps: int
    final_params_digest: str
    config_echo: TrainConfig
    initial_params_digest: str = ""
    initial_loss: float = math.nan
    eval_loss_by_epoch: list[float] = field(default_factory=list)
    eval_accuracy_by_epoch: list[float] = field(default_factory=list)
    initial_eval_loss: float | None = None

    def digest(self) -> str:
        """Digest of everything the run produced, for determinism checks."""
        h = hashlib.sha256()
        h.update(self.final_params_digest.encode())
        h.update(np.asarray(self.loss_by_epoch, dtype="<f8").tobytes())
        h.update(np.asarray(self.eval_loss_by_epoch, dtype="<f8").tobytes())
        h.update(str(self.steps).encode())
        return h.hexdigest()


def _epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    key = np.random.SeedSequence([seed, epoch])
    return np.random.Generator(np.random.Philox(key)).permutation(n)


def _clip(grads: dict[str, np.ndarray], max_norm: float | None) -> dict[str, np.ndarray]:
    if max_norm is None:
        return grads
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm:
        return grads
    return {k: g * (max_norm / total) for k, g in grads.items()}


def train(
    model: LinearStack,
    dataset: Dataset,
    config: TrainConfig,
    eval_data: Dataset | None = None,
    log=None,
) -> TrainRun:
    """Mini-batch AdamW over the model's trainables; updates ``model`` in place.

    Batches come from a per-epoch permutation seeded by ``(config.seed, epoch)``.
    ``log`` may be a writable text stream receiving CSV rows
    ``epoch, step, loss, lr_multiplier``. Raises :class:`TrainingDivergedError`
    when a batch loss stops being finite.
    """
    n = dataset.n_samples
    if n == 0:
        raise ParameterError("dataset is empty")
    if config.batch_size > n:
        raise ParameterError(f"batch_size {config.batch_size} exceeds dataset size {n}")

    writer = None
    if log is not None:
        writer = csv.writer(log, lineterminator="\n")
        writer.writerow(["epoch", "step", "loss", "lr_multiplier"])

    params = model.trainable_params()
    groups = model.param_groups()
    state = AdamState.zeros_like(params)
    initial_digest = params_digest(params)
    initial_loss, _ = evaluate(model, dataset)
    initial_eval = evaluate(model, eval_data)[0] if eval_data is not None else None

    steps_per_epoch = math.ceil(n / config.batch_size)
    total = max(1, config.epochs * steps_per_epoch)
    step = 0
    loss_by_epoch, eval_by_epoch, acc_by_epoch = [], [], []
    for epoch in range(config.epochs):
        perm = _epoch_permutation(config.seed, epoch, n)
        weighted = 0.0
        for start in range(0, n, config.batch_size):
            batch = dataset.subset(perm[start : start + config.batch_size])
            loss, grads = loss_and_grads(model, batch)
            if not math.isfinite(loss):
                raise TrainingDivergedError(step + 1, loss)
            grads = _clip(grads, config.max_grad_norm)
            mult = lr_multiplier(step, total, config.warmup_ratio, config.scheduler)
            step += 1
            try:
                params, state = adamw_step(params, grads, state, step, config, mult, groups)
            except NumericError as exc:
                raise TrainingDivergedError(step, loss) from exc
            model.set_trainable_params(params)
            weighted += loss * batch.n_samples
            if writer is not None:
                writer.writerow([epoch + 1, step, repr(loss), repr(mult)])
        loss_by_epoch.append(weighted / n)
        if eval_data is not None:
            ev_loss, ev_acc = evaluate(model, eval_data)
            eval_by_epoch.append(ev_loss)
            if ev_acc is not None:
                acc_by_epoch.append(ev_acc)

    return TrainRun(
        loss_by_epoch=loss_by_epoch,
        steps=step,
        final_params_digest=params_digest(params),
        config_echo=config,
        initial_params_digest=initial_digest,
        initial_loss=initial_loss,
        eval_loss_by_epoch=eval_by_epoch,
        eval_accuracy_by_epoch=acc_by_epoch,
        initial_eval_loss=initial_eval,
    )
