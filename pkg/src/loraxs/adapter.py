"""LoRA-XS and plain LoRA adapters for a single linear layer.

A LoRA-XS adapter updates a frozen weight ``W`` (m x n) by

    delta_W = s * B @ R @ A,        s = alpha / rank

where ``B = U_r diag(S_r)`` (m x r) and ``A = V_r^T`` (r x n) come from the
truncated SVD of ``W`` and stay frozen, and only the r x r latent ``R`` is
trained. The plain LoRA baseline trains both ``B`` and ``A`` directly.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from ._validation import as_matrix, check_rank, check_real, check_seed
from .exceptions import ParameterError, ShapeError
from .linalg import DEFAULT_N_ITER, truncated_svd

__all__ = [
    "LoraXsAdapter",
    "LoraAdapter",
    "init_loraxs_svd",
    "init_loraxs_random",
    "init_lora_baseline",
    "svd_projections",
    "kaiming_projections",
    "delta_weight",
    "forward_adapted",
    "merge",
    "matrix_digest",
]

DEFAULT_ALPHA = 8.0
DEFAULT_SIGMA = 1e-5
INIT_KINDS = ("svd", "random")


def matrix_digest(a: np.ndarray) -> bytes:
    """SHA-256 over the shape and little-endian float64 bytes of ``a``."""
    a = np.ascontiguousarray(a, dtype="<f8")
    h = hashlib.sha256()
    h.update(np.asarray(a.shape, dtype="<u8").tobytes())
    h.update(a.tobytes())
    return h.digest()


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, order="C")
    a.setflags(write=False)
    return a


@dataclass(eq=False)
class LoraXsAdapter:
    a_frozen: np.ndarray
    b_frozen: np.ndarray
    r_latent: np.ndarray
    rank: int
    alpha: float = DEFAULT_ALPHA
    init_kind: str = "svd"
    svd_seed: int = 0
    sigma: float = DEFAULT_SIGMA
    n_iter: int = DEFAULT_N_ITER
    _digests: tuple = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.a_frozen = _frozen(as_matrix(self.a_frozen, "a_frozen"))
        self.b_frozen = _frozen(as_matrix(self.b_frozen, "b_frozen"))
        self.r_latent = np.array(as_matrix(self.r_latent, "r_latent"), dtype=np.float64)
        r = self.rank
        if self.a_frozen.shape[0] != r or self.b_frozen.shape[1] != r:
            raise ShapeError(
                f"rank {r} inconsistent with A {self.a_frozen.shape} and B {self.b_frozen.shape}"
            )
        if self.r_latent.shape != (r, r):
            raise ShapeError(f"r_latent must be {r}x{r}, got {self.r_latent.shape}")
        check_real(self.alpha, "alpha", low=0.0, low_open=True)
        if self.init_kind not in INIT_KINDS:
            raise ParameterError(f"init_kind must be one of {INIT_KINDS}, got {self.init_kind!r}")
        self._digests = (matrix_digest(self.a_frozen), matrix_digest(self.b_frozen))

    @property
    def shape(self) -> tuple[int, int]:
        return self.b_frozen.shape[0], self.a_frozen.shape[1]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def n_trainable(self) -> int:
        return self.r_latent.size

    @property
    def a_digest(self) -> bytes:
        return self._digests[0]

    @property
    def b_digest(self) -> bytes:
        return self._digests[1]

    def trainable(self) -> dict[str, np.ndarray]:
        return {"r_latent": self.r_latent}

    def set_trainable(self, values: dict[str, np.ndarray]) -> None:
        r = np.array(values["r_latent"], dtype=np.float64)
        if r.shape != self.r_latent.shape:
            raise ShapeError(f"r_latent must be {self.r_latent.shape}, got {r.shape}")
        self.r_latent = r

    def delta_weight(self) -> np.ndarray:
        return self.scaling * (self.b_frozen @ self.r_latent @ self.a_frozen)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """``delta_W @ x`` without forming ``delta_W``."""
        return self.scaling * (self.b_frozen @ (self.r_latent @ (self.a_frozen @ x)))

    def with_latent(self, r_latent) -> "LoraXsAdapter":
        return replace(self, r_latent=r_latent)


@dataclass(eq=False)
class LoraAdapter:
    a_train: np.ndarray
    b_train: np.ndarray
    rank: int
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        self.a_train = np.array(as_matrix(self.a_train, "a_train"), dtype=np.float64)
        self.b_train = np.array(as_matrix(self.b_train, "b_train"), dtype=np.float64)
        if self.a_train.shape[0] != self.rank or self.b_train.shape[1] != self.rank:
            raise ShapeError(
                f"rank {self.rank} inconsistent with A {self.a_train.shape} and B {self.b_train.shape}"
            )
        check_real(self.alpha, "alpha", low=0.0, low_open=True)

    @property
    def shape(self) -> tuple[int, int]:
        return self.b_train.shape[0], self.a_train.shape[1]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def n_trainable(self) -> int:
        return self.a_train.size + self.b_train.size

    def trainable(self) -> dict[str, np.ndarray]:
        return {"a_train": self.a_train, "b_train": self.b_train}

    def set_trainable(self, values: dict[str, np.ndarray]) -> None:
        unknown = set(values) - {"a_train", "b_train"}
        if unknown:
            raise ParameterError(f"unknown LoRA parameters {sorted(unknown)}")
        for name in ("a_train", "b_train"):
            if name not in values:
                continue
            new = np.array(values[name], dtype=np.float64)
            if new.shape != getattr(self, name).shape:
                raise ShapeError(f"{name} must be {getattr(self, name).shape}, got {new.shape}")
            setattr(self, name, new)

    def delta_weight(self) -> np.ndarray:
        return self.scaling * (self.b_train @ self.a_train)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.scaling * (self.b_train @ (self.a_train @ x))


def svd_projections(w, rank: int, n_iter: int = DEFAULT_N_ITER, seed: int = 0):
    """Frozen ``(A, B)`` for an SVD-initialized adapter: ``A = V_r^T``, ``B = U_r diag(S_r)``."""
    f = truncated_svd(w, rank, n_iter, seed)
    return np.ascontiguousarray(f.V.T), f.U * f.S


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _seed_streams(seed: int):
    ab_seq, r_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(ab_seq), np.random.default_rng(r_seq)


def kaiming_projections(m: int, n: int, rank: int, seed: int):
    """Frozen ``(A, B)`` drawn Kaiming-uniform; the same seed always gives the same pair."""
    rng, _ = _seed_streams(seed)
    a = _kaiming_uniform(rng, (rank, n), fan_in=n)
    b = _kaiming_uniform(rng, (m, rank), fan_in=rank)
    return a, b


def _gaussian_latent(rng: np.random.Generator, rank: int, sigma: float) -> np.ndarray:
    return rng.normal(0.0, sigma, size=(rank, rank)) + 0.0


def init_loraxs_svd(
    w,
    rank: int,
    alpha: float = DEFAULT_ALPHA,
    sigma: float = DEFAULT_SIGMA,
    svd_seed: int = 0,
    r_seed: int = 0,
    n_iter: int = DEFAULT_N_ITER,
) -> LoraXsAdapter:
    """Build an adapter whose frozen projections span the top-``rank`` singular subspace of ``w``.

    ``R`` starts as i.i.d. N(0, sigma^2), so with a small ``sigma`` the adapted
    layer is nearly the pretrained one.
    """
    w = as_matrix(w, "w")
    rank = check_rank(rank, *w.shape)
    sigma = check_real(sigma, "sigma", low=0.0)
    svd_seed, r_seed = check_seed(svd_seed, "svd_seed"), check_seed(r_seed, "r_seed")
    a, b = svd_projections(w, rank, n_iter, svd_seed)
    r = _gaussian_latent(np.random.default_rng(r_seed), rank, sigma)
    return LoraXsAdapter(a, b, r, rank, alpha, "svd", svd_seed, sigma, n_iter)


def init_loraxs_random(
    m: int,
    n: int,
    rank: int,
    alpha: float = DEFAULT_ALPHA,
    sigma: float = DEFAULT_SIGMA,
    seed: int = 0,
) -> LoraXsAdapter:
    """Ablation baseline: frozen Kaiming-uniform ``A``, ``B`` with a Gaussian ``R``.

    ``seed`` is stored as the adapter's ``svd_seed`` so the projections can be
    regenerated with :func:`kaiming_projections`.
    """
    rank = check_rank(rank, m, n)
    sigma = check_real(sigma, "sigma", low=0.0)
    seed = check_seed(seed)
    a, b = kaiming_projections(m, n, rank, seed)
    _, r_rng = _seed_streams(seed)
    r = _gaussian_latent(r_rng, rank, sigma)
    return LoraXsAdapter(a, b, r, rank, alpha, "random", seed, sigma)


def init_lora_baseline(m: int, n: int, rank: int, alpha: float = DEFAULT_ALPHA, seed: int = 0) -> LoraAdapter:
    rank = check_rank(rank, m, n)
    rng = np.random.default_rng(check_seed(seed))
    a = _kaiming_uniform(rng, (rank, n), fan_in=n)
    return LoraAdapter(a, np.zeros((m, rank)), rank, alpha)


def delta_weight(adapter) -> np.ndarray:
    return adapter.delta_weight()


def _check_layer(w: np.ndarray, adapter) -> None:
    if w.shape != adapter.shape:
        raise ShapeError(f"weight shape {w.shape} does not match adapter shape {adapter.shape}")


def forward_adapted(w, adapter, x) -> np.ndarray:
    """``h = W x + delta_W x`` for a batch of column vectors ``x`` (n x batch)."""
    w = as_matrix(w, "w")
    x = as_matrix(x, "x")
    _check_layer(w, adapter)
    if x.shape[0] != w.shape[1]:
        raise ShapeError(f"input has {x.shape[0]} rows, layer expects {w.shape[1]}")
    return w @ x + adapter.apply(x)


def merge(w, adapter) -> np.ndarray:
    """Return ``W + delta_W``; ``w`` itself is not modified."""
    w = as_matrix(w, "w")
    _check_layer(w, adapter)
    return w + adapter.delta_weight()
