"""Trainable-parameter counts and fleet storage budgets.

For ``L`` adapted layers with ``q`` square ``n x n`` modules each at rank ``r``:

    lora    L * q * r * 2n
    vera    L * q * (n + r)
    loraxs  L * q * r^2

Rectangular ``m x n`` modules (``out_dim`` set) count ``r * (m + n)`` for
LoRA and ``m + r`` for VeRA; LoRA-XS stays at ``r^2``. Classifier heads are
not counted.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from ._validation import check_positive_int
from .exceptions import ParameterError, RangeError

__all__ = [
    "METHODS",
    "ModelSpec",
    "BudgetReport",
    "count_params",
    "param_ratio",
    "storage_budget",
    "format_binary",
    "format_decimal",
    "quoted_fleet",
]

METHODS = ("lora", "vera", "loraxs")
MAX_BYTES = 2**63 - 1

_BINARY_UNITS = ("B", "KiB", "MiB", "GiB", "TiB", "PiB", "EiB")
_DECIMAL_UNITS = ("B", "KB", "MB", "GB", "TB", "PB", "EB", "ZB", "YB")


@dataclass(frozen=True)
class ModelSpec:
    layers: int
    modules_per_layer: int
    hidden: int
    rank: int
    bytes_per_param: int = 2
    out_dim: int | None = None

    def __post_init__(self):
        check_positive_int(self.layers, "layers")
        check_positive_int(self.modules_per_layer, "modules_per_layer")
        check_positive_int(self.hidden, "hidden")
        check_positive_int(self.rank, "rank")
        check_positive_int(self.bytes_per_param, "bytes_per_param")
        if self.out_dim is not None:
            check_positive_int(self.out_dim, "out_dim")
        if self.rank > min(self.hidden, self.out_dim or self.hidden):
            raise ParameterError(f"rank {self.rank} exceeds the module dimensions")

    @property
    def n_modules(self) -> int:
        return self.layers * self.modules_per_layer


def _per_module(method: str, spec: ModelSpec) -> int:
    n = spec.hidden
    m = spec.out_dim if spec.out_dim is not None else n
    r = spec.rank
    if method == "lora":
        return r * (m + n)
    if method == "vera":
        return m + r
    if method == "loraxs":
        return r * r
    raise ParameterError(f"method must be one of {METHODS}, got {method!r}")


def count_params(method: str, spec: ModelSpec) -> int:
    return spec.n_modules * _per_module(method, spec)


def param_ratio(method_a: str, method_b: str, spec: ModelSpec) -> float:
    return float(Fraction(count_params(method_a, spec), count_params(method_b, spec)))


def _scaled(value: float, base: int, units) -> tuple[float, str]:
    i = 0
    while value >= base and i < len(units) - 1:
        value /= base
        i += 1
    return value, units[i]


def format_binary(n_bytes: int) -> str:
    value, unit = _scaled(float(n_bytes), 1024, _BINARY_UNITS)
    return f"{n_bytes} B" if unit == "B" else f"{value:.1f} {unit}"


def format_decimal(n_bytes: int) -> str:
    value, unit = _scaled(float(n_bytes), 1000, _DECIMAL_UNITS)
    return f"{n_bytes} B" if unit == "B" else f"{value:.1f} {unit}"


def quoted_fleet(bytes_per_checkpoint: int, n_models: int) -> str:
    """Fleet size as "per-checkpoint size in binary units, times model count".

    The model count is folded into the unit by decimal steps, so 10^6
    checkpoints of 144.0 MiB render as ``144.0 TB``. This is how the
    144 MB -> 144 TB storage figures are usually quoted; it is not an exact
    byte conversion (see :func:`format_binary` for that).
    """
    value, unit = _scaled(float(bytes_per_checkpoint), 1024, _BINARY_UNITS)
    step = _BINARY_UNITS.index(unit)
    value *= n_models
    while value >= 1000 and step < len(_DECIMAL_UNITS) - 1:
        value /= 1000
        step += 1
    return f"{value:.1f} {_DECIMAL_UNITS[step]}"


@dataclass(frozen=True)
class BudgetReport:
    method: str | None
    params: int
    bytes_per_param: int
    bytes_per_checkpoint: int
    n_models: int
    fleet_bytes: int

    @property
    def checkpoint_binary(self) -> str:
        return format_binary(self.bytes_per_checkpoint)

    @property
    def fleet_binary(self) -> str:
        return format_binary(self.fleet_bytes)

    @property
    def fleet_decimal(self) -> str:
        return format_decimal(self.fleet_bytes)

    @property
    def fleet_quoted(self) -> str:
        return quoted_fleet(self.bytes_per_checkpoint, self.n_models)

    def as_row(self) -> dict:
        return {
            "method": self.method or "",
            "params": self.params,
            "bytes_per_param": self.bytes_per_param,
            "bytes_per_checkpoint": self.bytes_per_checkpoint,
            "checkpoint": self.checkpoint_binary,
            "n_models": self.n_models,
            "fleet_bytes": self.fleet_bytes,
            "fleet": self.fleet_binary,
            "fleet_decimal": self.fleet_decimal,
            "fleet_quoted": self.fleet_quoted,
        }


def storage_budget(params: int, bytes_per_param: int, n_models: int, method: str | None = None) -> BudgetReport:
    params = check_positive_int(params, "params")
    bytes_per_param = check_positive_int(bytes_per_param, "bytes_per_param")
    n_models = check_positive_int(n_models, "n_models")
    per_ckpt = params * bytes_per_param
    fleet = per_ckpt * n_models
    if fleet > MAX_BYTES:
        raise RangeError(f"fleet size {fleet} bytes exceeds the 2^63 range")
    return BudgetReport(method, params, bytes_per_param, per_ckpt, n_models, fleet)
