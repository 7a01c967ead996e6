"""Synthetic tasks and the SVD-versus-random initialization ablation.

``aligned_teacher`` targets a weight change that lives in the base weight's
own top singular subspace, so an SVD-initialized LoRA-XS adapter can fit it
exactly. ``random_teacher`` targets a generic low-rank change instead.
``blobs_classification`` is a Gaussian-blob classification problem on top of
random base weights.
"""
from __future__ import annotations

import csv
import io
import math
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_positive_int, check_real, check_seed
from .adapter import DEFAULT_ALPHA, DEFAULT_SIGMA, init_loraxs_random, init_loraxs_svd, svd_projections
from .exceptions import ParameterError, TrainingDivergedError
from .training import Dataset, Layer, LinearStack, TrainConfig, train

__all__ = [
    "TASK_KINDS",
    "TaskSpec",
    "SyntheticTask",
    "AblationRecord",
    "SummaryRow",
    "gen_task",
    "build_model",
    "run_ablation",
    "summarize",
    "records_to_csv",
    "summary_to_csv",
    "summary_table",
    "DEFAULT_ABLATION_RANKS",
    "DEFAULT_ABLATION_CONFIG",
]

TASK_KINDS = ("aligned_teacher", "random_teacher", "blobs_classification")
DEFAULT_ABLATION_RANKS = (4, 8, 12, 20)
DEFAULT_ABLATION_CONFIG = TrainConfig(adapter_lr=5e-2, epochs=10, batch_size=32, warmup_ratio=0.06)
RECORD_COLUMNS = ("rank", "init", "seed", "epoch", "train_loss", "eval_loss", "diverged")
SUMMARY_COLUMNS = ("rank", "init", "median_best", "median_ep1", "median_ep2")


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "aligned_teacher"
    n_in: int = 64
    n_out: int = 64
    hidden: tuple[int, ...] = ()
    rank_star: int = 4
    noise_std: float = 0.0
    n_samples: int = 500
    seed: int = 0
    target_scale: float = 0.5

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ParameterError(f"kind must be one of {TASK_KINDS}, got {self.kind!r}")
        check_positive_int(self.n_in, "n_in")
        check_positive_int(self.n_out, "n_out")
        for h in self.hidden:
            check_positive_int(h, "hidden size")
        if self.hidden and self.kind != "blobs_classification":
            raise ParameterError("teacher tasks use a single layer; hidden sizes apply to blobs only")
        check_positive_int(self.rank_star, "rank_star")
        if self.kind != "blobs_classification" and self.rank_star > min(self.n_in, self.n_out):
            raise ParameterError(f"rank_star {self.rank_star} exceeds min(n_in, n_out)")
        check_real(self.noise_std, "noise_std", low=0.0)
        check_positive_int(self.n_samples, "n_samples", minimum=5)
        check_seed(self.seed)
        if self.kind == "blobs_classification" and self.n_out < 2:
            raise ParameterError("blobs_classification needs n_out >= 2 classes")

    @property
    def dims(self) -> list[int]:
        return [self.n_in, *self.hidden, self.n_out]


@dataclass(eq=False)
class SyntheticTask:
    spec: TaskSpec
    base_weights: list[np.ndarray]
    train: Dataset
    eval: Dataset
    delta_star: np.ndarray | None = None
    r_star: np.ndarray | None = None
    svd_seed: int = 0

    @property
    def kind(self) -> str:
        return self.spec.kind

    @property
    def is_classification(self) -> bool:
        return self.spec.kind == "blobs_classification"


def _haar(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def _base_weight(rng: np.random.Generator, m: int, n: int) -> np.ndarray:
    """Random weight with a 1/i singular-value decay, like a trained layer's."""
    k = min(m, n)
    spectrum = 2.0 / np.arange(1, k + 1)
    return (_haar(rng, m, k) * spectrum) @ _haar(rng, n, k).T


def _split(x: np.ndarray, y: np.ndarray) -> tuple[Dataset, Dataset]:
    n_train = int(round(0.8 * x.shape[1]))
    return Dataset(x[:, :n_train], y[..., :n_train]), Dataset(x[:, n_train:], y[..., n_train:])


def gen_task(spec: TaskSpec) -> SyntheticTask:
    """Generate a task deterministically from ``spec.seed``, with an 80/20 train/eval split."""
    rng = np.random.default_rng(spec.seed)
    n, m, N = spec.n_in, spec.n_out, spec.n_samples
    svd_seed = spec.seed

    if spec.kind == "blobs_classification":
        dims = spec.dims
        weights = [_base_weight(rng, dims[i + 1], dims[i]) for i in range(len(dims) - 1)]
        centers = (3.0 / math.sqrt(n)) * rng.standard_normal((n, m))
        labels = rng.integers(0, m, size=N)
        x = centers[:, labels] + rng.standard_normal((n, N))
        train_set, eval_set = _split(x, labels)
        return SyntheticTask(spec, weights, train_set, eval_set, svd_seed=svd_seed)

    w = _base_weight(rng, m, n)
    if spec.kind == "aligned_teacher":
        a, b = svd_projections(w, spec.rank_star, seed=svd_seed)
        r_star = spec.target_scale * rng.standard_normal((spec.rank_star, spec.rank_star))
        delta = b @ r_star @ a
    else:
        r_star = None
        p = rng.standard_normal((m, spec.rank_star))
        q = rng.standard_normal((spec.rank_star, n))
        delta = p @ q
        delta *= 2.0 * spec.target_scale * math.sqrt(spec.rank_star) / np.linalg.norm(delta)
    x = rng.standard_normal((n, N))
    y = (w + delta) @ x
    if spec.noise_std > 0:
        y = y + spec.noise_std * rng.standard_normal(y.shape)
    train_set, eval_set = _split(x, y)
    return SyntheticTask(spec, [w], train_set, eval_set, delta_star=delta, r_star=r_star, svd_seed=svd_seed)


def build_model(
    task: SyntheticTask,
    rank: int,
    init_kind: str,
    seed: int = 0,
    alpha: float = DEFAULT_ALPHA,
    sigma: float = DEFAULT_SIGMA,
) -> LinearStack:
    """Adapt every base layer of ``task`` with a fresh LoRA-XS adapter.

    SVD adapters reuse the task's SVD seed so their projections are the ones
    the aligned teacher was built from; ``seed`` drives ``R`` (and, for random
    init, ``A``/``B``).
    """
    layers = []
    n_layers = len(task.base_weights)
    for i, w in enumerate(task.base_weights):
        if init_kind == "svd":
            ad = init_loraxs_svd(w, rank, alpha, sigma, svd_seed=task.svd_seed + i, r_seed=seed)
        elif init_kind == "random":
            ad = init_loraxs_random(w.shape[0], w.shape[1], rank, alpha, sigma, seed=seed * 1000 + i)
        else:
            raise ParameterError(f"init_kind must be 'svd' or 'random', got {init_kind!r}")
        act = "relu" if i < n_layers - 1 else "none"
        layers.append(Layer(w, ad, act))
    head = "softmax_cross_entropy" if task.is_classification else "mse"
    return LinearStack(layers, head=head)


@dataclass(frozen=True)
class AblationRecord:
    rank: int
    init_kind: str
    seed: int
    epoch: int
    train_loss: float
    eval_loss: float
    diverged: bool = False

    @property
    def key(self) -> tuple:
        return (self.rank, self.init_kind, self.seed, self.epoch)


def _run_arm(task, rank, init_kind, seed, config, alpha, sigma) -> list[AblationRecord]:
    model = build_model(task, rank, init_kind, seed, alpha, sigma)
    cfg = TrainConfig(**{**config.to_dict(), "seed": seed})
    try:
        run = train(model, task.train, cfg, eval_data=task.eval)
    except TrainingDivergedError:
        return [
            AblationRecord(rank, init_kind, seed, epoch, math.nan, math.nan, True)
            for epoch in range(1, cfg.epochs + 1)
        ]
    if task.is_classification:
        evals = [1.0 - a for a in run.eval_accuracy_by_epoch]
    else:
        evals = run.eval_loss_by_epoch
    return [
        AblationRecord(rank, init_kind, seed, epoch + 1, run.loss_by_epoch[epoch], evals[epoch])
        for epoch in range(cfg.epochs)
    ]


def run_ablation(
    task: SyntheticTask,
    ranks,
    init_kinds,
    seeds,
    train_config: TrainConfig = DEFAULT_ABLATION_CONFIG,
    *,
    alpha: float = DEFAULT_ALPHA,
    sigma: float = DEFAULT_SIGMA,
    jobs: int = 1,
) -> list[AblationRecord]:
    """Train one model per (rank, init, seed) arm and record losses after every epoch.

    Classification tasks report the eval error rate (1 - accuracy) as
    ``eval_loss``. Diverged arms are kept, flagged, with NaN losses. Records
    come back sorted by key regardless of ``jobs``.
    """
    ranks, init_kinds, seeds = list(ranks), list(init_kinds), list(seeds)
    if not (ranks and init_kinds and seeds):
        raise ParameterError("ranks, init_kinds and seeds must all be nonempty")
    arms = [(r, k, s) for r in ranks for k in init_kinds for s in seeds]
    jobs = check_positive_int(jobs, "jobs")
    if jobs == 1:
        chunks = [_run_arm(task, r, k, s, train_config, alpha, sigma) for r, k, s in arms]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_arm, task, r, k, s, train_config, alpha, sigma) for r, k, s in arms]
            chunks = [f.result() for f in futures]
    return sorted((rec for chunk in chunks for rec in chunk), key=lambda rec: rec.key)


@dataclass(frozen=True)
class SummaryRow:
    rank: int
    init_kind: str
    median_best: float
    median_ep1: float
    median_ep2: float
    n_seeds: int = field(default=0, compare=False)


def _median(values) -> float:
    values = [v for v in values if not math.isnan(v)]
    return statistics.median(values) if values else math.nan


def summarize(records) -> list[SummaryRow]:
    """Per (rank, init): medians over seeds of best-epoch, epoch-1 and epoch-2 eval loss."""
    records = list(records)
    if not records:
        raise ParameterError("no records to summarize")
    runs: dict[tuple, dict[int, float]] = {}
    for rec in records:
        runs.setdefault((rec.rank, rec.init_kind, rec.seed), {})[rec.epoch] = rec.eval_loss
    groups: dict[tuple, list[dict[int, float]]] = {}
    for (rank, kind, _seed), by_epoch in runs.items():
        groups.setdefault((rank, kind), []).append(by_epoch)
    rows = []
    for (rank, kind), seed_runs in sorted(groups.items()):
        best = [min((v for v in r.values() if not math.isnan(v)), default=math.nan) for r in seed_runs]
        rows.append(
            SummaryRow(
                rank,
                kind,
                _median(best),
                _median([r.get(1, math.nan) for r in seed_runs]),
                _median([r.get(2, math.nan) for r in seed_runs]),
                len(seed_runs),
            )
        )
    return rows


def records_to_csv(records, stream=None) -> str:
    out = stream if stream is not None else io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(RECORD_COLUMNS)
    for r in records:
        writer.writerow([r.rank, r.init_kind, r.seed, r.epoch, repr(r.train_loss), repr(r.eval_loss), int(r.diverged)])
    return out.getvalue() if stream is None else ""


def summary_to_csv(rows, stream=None) -> str:
    out = stream if stream is not None else io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(SUMMARY_COLUMNS)
    for r in rows:
        writer.writerow([r.rank, r.init_kind, repr(r.median_best), repr(r.median_ep1), repr(r.median_ep2)])
    return out.getvalue() if stream is None else ""


def summary_table(rows) -> str:
    header = ("rank", "init", "median best", "median ep1", "median ep2")
    body = [(str(r.rank), r.init_kind, f"{r.median_best:.6g}", f"{r.median_ep1:.6g}", f"{r.median_ep2:.6g}") for r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(header)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(c.rjust(w) for c, w in zip(b, widths)) for b in body]
    return "\n".join(lines)
