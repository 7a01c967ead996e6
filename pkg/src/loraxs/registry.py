"""Adapter checkpoints, weight files and the on-disk multi-tenant registry.

Both file kinds share one container layout (integers little-endian)::

    magic          4 bytes   b"LXSC" (checkpoint) or b"LXSW" (weights)
    format_version u32
    metadata_len   u64
    metadata       UTF-8 JSON, canonical (sorted keys, compact separators)
    payload        tensors back to back, row-major, offsets relative to payload start
    checksum       32-byte SHA-256 over the payload

A LoRA-XS checkpoint persists only each module's ``R`` plus what is needed to
regenerate ``A`` and ``B`` from the base weights (init kind, seed, iteration
count) and digests to detect a wrong base. Its id is the hex payload checksum.
"""
from __future__ import annotations

import datetime as _dt
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from filelock import FileLock

from ._validation import as_matrix
from .adapter import LoraXsAdapter, kaiming_projections, matrix_digest, svd_projections
from .exceptions import (
    BaseModelMismatchError,
    FormatError,
    IntegrityError,
    LoraXsError,
    MissingModuleError,
    ParameterError,
    RankMismatchError,
    SerializationError,
)
from .linalg import MAX_OVERSAMPLES

__all__ = [
    "CHECKPOINT_MAGIC",
    "WEIGHTS_MAGIC",
    "FORMAT_VERSION",
    "CheckpointEntry",
    "AdapterCheckpoint",
    "save_checkpoint",
    "encode_checkpoint",
    "load_checkpoint",
    "attach_checkpoint",
    "warm_start",
    "save_weights",
    "load_weights",
    "Registry",
    "ManifestEntry",
    "VerifyResult",
    "REGISTRY_ENV",
]

CHECKPOINT_MAGIC = b"LXSC"
WEIGHTS_MAGIC = b"LXSW"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIQ")
CHECKSUM_BYTES = 32
REGISTRY_ENV = "LORAXS_REGISTRY"

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_F32_MAX = float(np.finfo(np.float32).max)


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent or ".")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _encode_tensor(a: np.ndarray, dtype: str) -> bytes:
    return np.ascontiguousarray(a, dtype=_DTYPES[dtype]).tobytes()


def _pack(magic: bytes, metadata: dict, payload: bytes) -> bytes:
    meta = _canonical_json(metadata)
    return HEADER.pack(magic, FORMAT_VERSION, len(meta)) + meta + payload + hashlib.sha256(payload).digest()


def _unpack(data: bytes, magic: bytes, source) -> tuple[dict, bytes, int]:
    """Split a container into (metadata, payload, payload file offset), checking framing only."""
    if len(data) < HEADER.size:
        raise FormatError(f"{source}: truncated header ({len(data)} bytes)")
    got_magic, version, meta_len = HEADER.unpack_from(data)
    if got_magic != magic:
        raise FormatError(f"{source}: bad magic {got_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{source}: unsupported format version {version}")
    start = HEADER.size + meta_len
    if start + CHECKSUM_BYTES > len(data):
        raise FormatError(f"{source}: truncated metadata")
    try:
        metadata = json.loads(data[HEADER.size : start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: unreadable metadata: {exc}") from exc
    if not isinstance(metadata, dict):
        raise FormatError(f"{source}: metadata is not an object")
    return metadata, data[start : len(data) - CHECKSUM_BYTES], start


def _check_payload(data: bytes, payload: bytes, payload_start: int, tensors: list[dict], source) -> bytes:
    """Verify framing and checksums; name the byte offset of the first bad tensor."""
    expected = sum(t["nbytes"] for t in tensors)
    if len(payload) != expected:
        raise FormatError(f"{source}: payload is {len(payload)} bytes, metadata declares {expected}")
    checksum = data[-CHECKSUM_BYTES:]
    if hashlib.sha256(payload).digest() == checksum:
        return checksum
    for t in tensors:
        chunk = payload[t["offset"] : t["offset"] + t["nbytes"]]
        if hashlib.sha256(chunk).hexdigest() != t["sha256"]:
            raise IntegrityError(f"{source}: checksum mismatch in tensor {t['name']!r}", payload_start + t["offset"])
    raise IntegrityError(f"{source}: payload checksum mismatch", len(data) - CHECKSUM_BYTES)


class _PayloadBuilder:
    def __init__(self):
        self.chunks: list[bytes] = []
        self.size = 0

    def add(self, name: str, a: np.ndarray, dtype: str) -> dict:
        raw = _encode_tensor(a, dtype)
        desc = {
            "name": name,
            "shape": list(a.shape),
            "dtype": dtype,
            "offset": self.size,
            "nbytes": len(raw),
            "sha256": hashlib.sha256(raw).hexdigest(),
        }
        self.chunks.append(raw)
        self.size += len(raw)
        return desc

    def payload(self) -> bytes:
        return b"".join(self.chunks)


def _decode_tensor(payload: bytes, desc: dict, source) -> np.ndarray:
    try:
        dtype = _DTYPES[desc["dtype"]]
        shape = tuple(int(s) for s in desc["shape"])
        raw = payload[desc["offset"] : desc["offset"] + desc["nbytes"]]
        return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"{source}: bad tensor descriptor {desc!r}") from exc


# --------------------------------------------------------------------------- checkpoints


@dataclass(eq=False)
class CheckpointEntry:
    module_name: str
    rank: int
    alpha: float
    r_latent: np.ndarray
    init_kind: str
    svd_seed: int
    n_iter: int
    a_digest: bytes
    b_digest: bytes
    shape: tuple[int, int]
    sigma: float = 0.0
    a_frozen: np.ndarray | None = None
    b_frozen: np.ndarray | None = None

    @classmethod
    def from_adapter(cls, name: str, adapter: LoraXsAdapter, storage_dtype: str, self_contained: bool):
        r = adapter.r_latent
        if storage_dtype == "f32" and np.any(np.abs(r) > _F32_MAX):
            raise SerializationError(f"module {name!r}: r_latent exceeds the f32 range")
        return cls(
            module_name=name,
            rank=adapter.rank,
            alpha=float(adapter.alpha),
            r_latent=np.asarray(r, dtype=_DTYPES[storage_dtype]).copy(),
            init_kind=adapter.init_kind,
            svd_seed=int(adapter.svd_seed),
            n_iter=int(adapter.n_iter),
            a_digest=adapter.a_digest,
            b_digest=adapter.b_digest,
            shape=adapter.shape,
            sigma=float(adapter.sigma),
            a_frozen=np.array(adapter.a_frozen) if self_contained else None,
            b_frozen=np.array(adapter.b_frozen) if self_contained else None,
        )


@dataclass(eq=False)
class AdapterCheckpoint:
    base_model_id: str
    entries: list[CheckpointEntry]
    storage_dtype: str = "f32"
    self_contained: bool = False
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION
    payload_checksum: bytes = b""

    def __post_init__(self):
        if self.storage_dtype not in _DTYPES:
            raise ParameterError(f"storage_dtype must be one of {sorted(_DTYPES)}, got {self.storage_dtype!r}")
        self.entries = sorted(self.entries, key=lambda e: e.module_name)

    @property
    def checkpoint_id(self) -> str:
        return self.payload_checksum.hex()

    @property
    def module_names(self) -> list[str]:
        return [e.module_name for e in self.entries]

    def entry(self, name: str) -> CheckpointEntry:
        for e in self.entries:
            if e.module_name == name:
                return e
        raise MissingModuleError([name])

    @classmethod
    def from_adapters(
        cls,
        adapters: Mapping[str, LoraXsAdapter],
        base_model_id: str = "",
        storage_dtype: str = "f32",
        self_contained: bool = False,
        meta: Mapping | None = None,
    ) -> "AdapterCheckpoint":
        if not adapters:
            raise ParameterError("cannot checkpoint an empty adapter set")
        if storage_dtype not in _DTYPES:
            raise ParameterError(f"storage_dtype must be one of {sorted(_DTYPES)}, got {storage_dtype!r}")
        for name, ad in adapters.items():
            if not isinstance(ad, LoraXsAdapter):
                raise ParameterError(f"module {name!r}: only LoRA-XS adapters can be checkpointed")
        entries = [CheckpointEntry.from_adapter(n, a, storage_dtype, self_contained) for n, a in adapters.items()]
        ckpt = cls(base_model_id, entries, storage_dtype, self_contained, dict(meta or {}))
        ckpt.payload_checksum = hashlib.sha256(ckpt._layout()[1]).digest()
        return ckpt

    def _layout(self) -> tuple[dict, bytes]:
        builder = _PayloadBuilder()
        entries = []
        for e in self.entries:
            tensors = [builder.add("r_latent", e.r_latent, self.storage_dtype)]
            if self.self_contained:
                tensors.append(builder.add("a_frozen", e.a_frozen, "f64"))
                tensors.append(builder.add("b_frozen", e.b_frozen, "f64"))
            entries.append(
                {
                    "module_name": e.module_name,
                    "rank": e.rank,
                    "alpha": e.alpha,
                    "sigma": e.sigma,
                    "init_kind": e.init_kind,
                    "svd_seed": e.svd_seed,
                    "n_iter": e.n_iter,
                    "oversamples": min(MAX_OVERSAMPLES, min(e.shape) - e.rank),
                    "shape": list(e.shape),
                    "a_digest": e.a_digest.hex(),
                    "b_digest": e.b_digest.hex(),
                    "tensors": tensors,
                }
            )
        metadata = {
            "format_version": self.format_version,
            "base_model_id": self.base_model_id,
            "storage_dtype": self.storage_dtype,
            "self_contained": self.self_contained,
            "scaling": "alpha/rank",
            "truncated_svd": {
                "method": "randomized range finder",
                "oversampling": f"min({MAX_OVERSAMPLES}, min(m, n) - rank)",
                "reorthonormalize": "QR after every product",
            },
            "meta": self.meta,
            "entries": entries,
        }
        return metadata, builder.payload()

    def to_bytes(self) -> bytes:
        metadata, payload = self._layout()
        return _pack(CHECKPOINT_MAGIC, metadata, payload)

    def same_as(self, other: "AdapterCheckpoint") -> bool:
        """Bitwise equality of everything the file would contain."""
        return self.to_bytes() == other.to_bytes()


def encode_checkpoint(adapters: Mapping[str, LoraXsAdapter], **kwargs) -> tuple[bytes, str]:
    ckpt = AdapterCheckpoint.from_adapters(adapters, **kwargs)
    return ckpt.to_bytes(), ckpt.checkpoint_id


def save_checkpoint(
    adapters: Mapping[str, LoraXsAdapter],
    path,
    *,
    base_model_id: str = "",
    storage_dtype: str = "f32",
    self_contained: bool = False,
    meta: Mapping | None = None,
) -> str:
    """Write ``adapters`` atomically to ``path`` and return the checkpoint id."""
    data, ckpt_id = encode_checkpoint(
        adapters, base_model_id=base_model_id, storage_dtype=storage_dtype, self_contained=self_contained, meta=meta
    )
    _atomic_write(Path(path), data)
    return ckpt_id


def _entry_from_meta(e: dict, payload: bytes, storage_dtype: str, source) -> CheckpointEntry:
    try:
        tensors = {t["name"]: _decode_tensor(payload, t, source) for t in e["tensors"]}
        r = tensors["r_latent"]
        rank = int(e["rank"])
        if r.shape != (rank, rank) or r.dtype != _DTYPES[storage_dtype]:
            raise FormatError(f"{source}: module {e['module_name']!r} r_latent is not {rank}x{rank} {storage_dtype}")
        return CheckpointEntry(
            module_name=e["module_name"],
            rank=rank,
            alpha=float(e["alpha"]),
            r_latent=r,
            init_kind=e["init_kind"],
            svd_seed=int(e["svd_seed"]),
            n_iter=int(e["n_iter"]),
            a_digest=bytes.fromhex(e["a_digest"]),
            b_digest=bytes.fromhex(e["b_digest"]),
            shape=tuple(int(s) for s in e["shape"]),
            sigma=float(e.get("sigma", 0.0)),
            a_frozen=tensors.get("a_frozen"),
            b_frozen=tensors.get("b_frozen"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{source}: malformed checkpoint entry: {exc}") from exc


def load_checkpoint(path) -> AdapterCheckpoint:
    """Parse and verify a checkpoint file.

    Raises :class:`FormatError` for bad framing (magic, version, truncation)
    and :class:`IntegrityError`, carrying the byte offset, on checksum mismatch.
    """
    path = Path(path)
    data = path.read_bytes()
    metadata, payload, start = _unpack(data, CHECKPOINT_MAGIC, path)
    try:
        entries_meta = metadata["entries"]
        tensors = [t for e in entries_meta for t in e["tensors"]]
        storage_dtype = metadata["storage_dtype"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: incomplete checkpoint metadata: {exc}") from exc
    if storage_dtype not in _DTYPES:
        raise FormatError(f"{path}: unknown storage dtype {storage_dtype!r}")
    checksum = _check_payload(data, payload, start, tensors, path)
    entries = [_entry_from_meta(e, payload, storage_dtype, path) for e in entries_meta]
    return AdapterCheckpoint(
        base_model_id=metadata.get("base_model_id", ""),
        entries=entries,
        storage_dtype=storage_dtype,
        self_contained=bool(metadata.get("self_contained", False)),
        meta=metadata.get("meta", {}),
        format_version=metadata.get("format_version", FORMAT_VERSION),
        payload_checksum=checksum,
    )


def _regenerate(entry: CheckpointEntry, w) -> tuple[np.ndarray, np.ndarray]:
    w = as_matrix(w, entry.module_name)
    if w.shape != tuple(entry.shape):
        raise BaseModelMismatchError(
            f"module {entry.module_name!r}: base weight is {w.shape}, checkpoint expects {tuple(entry.shape)}"
        )
    if entry.init_kind == "svd":
        return svd_projections(w, entry.rank, entry.n_iter, entry.svd_seed)
    if entry.init_kind == "random":
        m, n = entry.shape
        return kaiming_projections(m, n, entry.rank, entry.svd_seed)
    raise FormatError(f"module {entry.module_name!r}: unknown init kind {entry.init_kind!r}")


def attach_checkpoint(checkpoint: AdapterCheckpoint, base_weights: Mapping | None) -> dict[str, LoraXsAdapter]:
    """Rebuild adapters from a checkpoint on top of ``base_weights``.

    ``A`` and ``B`` are regenerated from the base weights and must reproduce
    the stored digests; otherwise the base model is the wrong one. A
    self-contained checkpoint may be attached without base weights.
    """
    base_weights = base_weights or {}
    missing = [
        e.module_name for e in checkpoint.entries if e.module_name not in base_weights and e.a_frozen is None
    ]
    if missing:
        raise MissingModuleError(missing)
    adapters = {}
    for e in checkpoint.entries:
        if e.module_name in base_weights:
            a, b = _regenerate(e, base_weights[e.module_name])
        else:
            a, b = e.a_frozen, e.b_frozen
        if matrix_digest(a) != e.a_digest or matrix_digest(b) != e.b_digest:
            raise BaseModelMismatchError(
                f"module {e.module_name!r}: regenerated projections do not match the checkpoint digests"
            )
        adapters[e.module_name] = LoraXsAdapter(
            a, b, np.asarray(e.r_latent, dtype=np.float64), e.rank, e.alpha, e.init_kind, e.svd_seed, e.sigma, e.n_iter
        )
    return adapters


def warm_start(target_adapters: Mapping[str, LoraXsAdapter], source: AdapterCheckpoint) -> dict[str, LoraXsAdapter]:
    """Copy the source checkpoint's latent matrices into matching target adapters.

    Only ``R`` moves; each target keeps its own ``A`` and ``B``.
    """
    names = set(target_adapters)
    src_names = set(source.module_names)
    if names != src_names:
        raise MissingModuleError(names.symmetric_difference(src_names))
    out = {}
    for name, target in target_adapters.items():
        e = source.entry(name)
        if e.rank != target.rank:
            raise RankMismatchError(f"module {name!r}: source rank {e.rank} != target rank {target.rank}")
        out[name] = target.with_latent(np.asarray(e.r_latent, dtype=np.float64))
    return out


# --------------------------------------------------------------------------- weight files


def save_weights(path, weights: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    """Write named float64 matrices to an ``LXSW`` file, in mapping order."""
    if not weights:
        raise ParameterError("no matrices to write")
    builder = _PayloadBuilder()
    tensors = [builder.add(name, as_matrix(w, name, allow_empty=True), "f64") for name, w in weights.items()]
    metadata = {"format_version": FORMAT_VERSION, "tensors": tensors, "meta": dict(meta or {})}
    _atomic_write(Path(path), _pack(WEIGHTS_MAGIC, metadata, builder.payload()))


def load_weights(path, *, with_meta=False):
    path = Path(path)
    data = path.read_bytes()
    metadata, payload, start = _unpack(data, WEIGHTS_MAGIC, path)
    tensors = metadata.get("tensors")
    if not isinstance(tensors, list):
        raise FormatError(f"{path}: missing tensor table")
    _check_payload(data, payload, start, tensors, path)
    weights = {t["name"]: _decode_tensor(payload, t, path) for t in tensors}
    return (weights, metadata.get("meta", {})) if with_meta else weights


# --------------------------------------------------------------------------- registry


@dataclass
class ManifestEntry:
    checkpoint_id: str
    path: str
    base_model_id: str
    created_at: str
    byte_size: int


@dataclass
class VerifyResult:
    checkpoint_id: str
    ok: bool
    reason: str = ""


class Registry:
    """Content-addressed checkpoint store with a JSON manifest.

    Layout: ``<root>/manifest.json`` and ``<root>/objects/<id>.lxsc``.
    Writers serialize on ``<root>/.lock``; the manifest is replaced atomically,
    so readers never need the lock.
    """

    MANIFEST = "manifest.json"
    OBJECTS = "objects"
    MANIFEST_VERSION = 1

    def __init__(self, root=None):
        root = root if root is not None else os.environ.get(REGISTRY_ENV)
        if not root:
            raise ParameterError(f"no registry root given and {REGISTRY_ENV} is unset")
        self.root = Path(root)

    @classmethod
    def create(cls, root) -> "Registry":
        reg = cls(root)
        (reg.root / cls.OBJECTS).mkdir(parents=True, exist_ok=True)
        if not reg.manifest_path.exists():
            with reg._lock():
                reg._write_manifest([])
        return reg

    @property
    def manifest_path(self) -> Path:
        return self.root / self.MANIFEST

    def _require_root(self):
        if not self.root.is_dir():
            raise LoraXsError(f"registry root {self.root} does not exist")

    def _lock(self) -> FileLock:
        return FileLock(str(self.root / ".lock"))

    def _read_manifest(self) -> list[ManifestEntry]:
        self._require_root()
        if not self.manifest_path.exists():
            return []
        try:
            doc = json.loads(self.manifest_path.read_text(encoding="utf-8"))
            return [ManifestEntry(**e) for e in doc["entries"]]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"{self.manifest_path}: malformed manifest: {exc}") from exc

    def _write_manifest(self, entries: list[ManifestEntry]) -> None:
        doc = {"manifest_version": self.MANIFEST_VERSION, "entries": [e.__dict__ for e in entries]}
        _atomic_write(self.manifest_path, json.dumps(doc, indent=2, sort_keys=True).encode("utf-8"))

    def object_path(self, checkpoint_id: str) -> Path:
        return self.root / self.OBJECTS / f"{checkpoint_id}.lxsc"

    def _register(self, data: bytes, ckpt_id: str, base_model_id: str) -> str:
        self._require_root()
        (self.root / self.OBJECTS).mkdir(exist_ok=True)
        with self._lock():
            entries = self._read_manifest()
            if any(e.checkpoint_id == ckpt_id for e in entries):
                return ckpt_id
            target = self.object_path(ckpt_id)
            _atomic_write(target, data)
            entries.append(
                ManifestEntry(
                    checkpoint_id=ckpt_id,
                    path=str(target.relative_to(self.root)),
                    base_model_id=base_model_id,
                    created_at=_dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
                    byte_size=len(data),
                )
            )
            self._write_manifest(entries)
        return ckpt_id

    def put(self, adapters: Mapping[str, LoraXsAdapter], **kwargs) -> str:
        """Checkpoint ``adapters`` straight into the store; returns the id."""
        data, ckpt_id = encode_checkpoint(adapters, **kwargs)
        return self._register(data, ckpt_id, kwargs.get("base_model_id", ""))

    def add(self, path) -> str:
        """Import an existing checkpoint file after verifying it."""
        ckpt = load_checkpoint(path)
        return self._register(Path(path).read_bytes(), ckpt.checkpoint_id, ckpt.base_model_id)

    def list(self) -> list[ManifestEntry]:
        return self._read_manifest()

    def load(self, checkpoint_id: str) -> AdapterCheckpoint:
        for e in self._read_manifest():
            if e.checkpoint_id == checkpoint_id:
                return load_checkpoint(self.root / e.path)
        raise LoraXsError(f"checkpoint {checkpoint_id} not in registry {self.root}")

    def verify(self) -> list[VerifyResult]:
        results = []
        for e in self._read_manifest():
            path = self.root / e.path
            if not path.is_file():
                results.append(VerifyResult(e.checkpoint_id, False, "file missing"))
                continue
            size = path.stat().st_size
            if size != e.byte_size:
                results.append(VerifyResult(e.checkpoint_id, False, f"size {size} != manifest {e.byte_size}"))
                continue
            try:
                ckpt = load_checkpoint(path)
            except (FormatError, IntegrityError) as exc:
                results.append(VerifyResult(e.checkpoint_id, False, str(exc)))
                continue
            if ckpt.checkpoint_id != e.checkpoint_id:
                results.append(VerifyResult(e.checkpoint_id, False, f"content id is {ckpt.checkpoint_id}"))
                continue
            results.append(VerifyResult(e.checkpoint_id, True))
        return results

    def gc(self, dry_run: bool = True) -> list[Path]:
        """Files under ``objects/`` not referenced by the manifest; deleted unless ``dry_run``."""
        with self._lock():
            referenced = {(self.root / e.path).resolve() for e in self._read_manifest()}
            objects = self.root / self.OBJECTS
            stray = sorted(p for p in objects.iterdir() if p.is_file() and p.resolve() not in referenced) if objects.is_dir() else []
            if not dry_run:
                for p in stray:
                    p.unlink()
        return stray

    def remove(self, checkpoint_id: str) -> None:
        """Drop a manifest entry; the object file is left for :meth:`gc`."""
        with self._lock():
            entries = self._read_manifest()
            kept = [e for e in entries if e.checkpoint_id != checkpoint_id]
            if len(kept) == len(entries):
                raise LoraXsError(f"checkpoint {checkpoint_id} not in registry {self.root}")
            self._write_manifest(kept)

