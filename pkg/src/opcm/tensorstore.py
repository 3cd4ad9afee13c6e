"""Checkpoint data model, task-vector arithmetic and the OPCM-CKPT v1 file format.

A :class:`Checkpoint` is an immutable, name-sorted mapping from parameter name
to a float64 array, with a :class:`ParamKind` tag per entry deciding whether
the merger projects it (``LINEAR_WEIGHT``) or averages it directly (``OTHER``).

File layout (all integers little-endian)::

    b"OPCM" | u32 version=1 | u64 header_len | header JSON | payload

The header is compact JSON with sorted keys; payloads are row-major, stored
back to back in name order without padding.
"""

from __future__ import annotations

import fnmatch
import json
import math
import os
import struct
from collections.abc import Iterator, Mapping
from enum import Enum
from typing import Optional, Union

import numpy as np

from .exceptions import (
    DuplicateName,
    IoFailure,
    MalformedFile,
    NonFiniteValue,
    SchemaMismatch,
)

MAGIC = b"OPCM"
VERSION = 1
_PREAMBLE = struct.Struct("<4sIQ")
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_DTYPE_ALIASES = {"float32": "f32", "float64": "f64", "f32": "f32", "f64": "f64"}

PathLike = Union[str, "os.PathLike[str]"]


class ParamKind(str, Enum):
    LINEAR_WEIGHT = "linear_weight"
    OTHER = "other"


def is_projectable_shape(shape: tuple) -> bool:
    """Only genuine matrices (2-D, both sides >= 2) may be projected."""
    return len(shape) == 2 and shape[0] >= 2 and shape[1] >= 2


def _freeze(value, name: str, copy: bool) -> np.ndarray:
    if copy:
        arr = np.array(value, dtype=np.float64, order="C")
    else:
        arr = np.asarray(value, dtype=np.float64, order="C")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"parameter {name!r} contains NaN or Inf")
    arr.flags.writeable = False
    return arr


class Checkpoint(Mapping):
    """Immutable named collection of float64 tensors.

    Parameters
    ----------
    params : mapping of str to array-like
        Parameter values. Stored as read-only float64 C-contiguous arrays.
    kinds : mapping of str to ParamKind, optional
        Per-parameter kind. Missing entries are classified by shape.
    metadata : mapping of str to str, optional
    copy : bool
        Set to False to adopt already-owned float64 arrays without copying.
    """

    __slots__ = ("_params", "_kinds", "_metadata")

    def __init__(self, params, kinds=None, metadata=None, *, copy: bool = True):
        kinds = dict(kinds or {})
        unknown = set(kinds) - set(params)
        if unknown:
            raise SchemaMismatch(f"kinds given for unknown parameters: {sorted(unknown)}")
        self._params = {}
        self._kinds = {}
        for name in sorted(params):
            if not isinstance(name, str):
                raise TypeError(f"parameter names must be str, got {type(name).__name__}")
            arr = _freeze(params[name], name, copy)
            kind = ParamKind(kinds[name]) if name in kinds else _default_kind(arr.shape)
            if kind is ParamKind.LINEAR_WEIGHT and not is_projectable_shape(arr.shape):
                raise SchemaMismatch(
                    f"{name!r} with shape {arr.shape} cannot be a linear weight"
                )
            self._params[name] = arr
            self._kinds[name] = kind
        self._metadata = {str(k): str(v) for k, v in sorted((metadata or {}).items())}

    # Mapping protocol; iteration is lexicographic by construction.
    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def __repr__(self) -> str:
        body = ", ".join(f"{n}{list(a.shape)}" for n, a in self._params.items())
        return f"{type(self).__name__}({body})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.compatible_with(other)
            and all(np.array_equal(self[n], other[n]) for n in self)
            and self._metadata == other._metadata
        )

    __hash__ = None

    @property
    def kinds(self) -> dict:
        return dict(self._kinds)

    @property
    def metadata(self) -> dict:
        return dict(self._metadata)

    def kind(self, name: str) -> ParamKind:
        return self._kinds[name]

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in self._params.values())

    @property
    def size(self) -> int:
        return sum(a.size for a in self._params.values())

    def compatible_with(self, other: "Checkpoint") -> bool:
        """Same names, shapes and kinds."""
        if list(self) != list(other):
            return False
        return all(
            self[n].shape == other[n].shape and self._kinds[n] == other._kinds[n]
            for n in self
        )

    def with_params(self, params, cls=None, metadata=None) -> "Checkpoint":
        """Build a checkpoint with this schema and new (owned) values."""
        cls = cls or type(self)
        return cls(params, self._kinds, self._metadata if metadata is None else metadata, copy=False)

    def flatten(self) -> np.ndarray:
        """All values concatenated in name order."""
        if not self._params:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in self._params.values()])


class TaskVector(Checkpoint):
    """Per-parameter difference between a fine-tuned and a base checkpoint."""

    __slots__ = ()


def _default_kind(shape: tuple) -> ParamKind:
    return ParamKind.LINEAR_WEIGHT if is_projectable_shape(shape) else ParamKind.OTHER


def check_compatible(*ckpts: Checkpoint) -> None:
    """Raise SchemaMismatch unless every checkpoint shares the first one's schema."""
    first = ckpts[0]
    for other in ckpts[1:]:
        if not first.compatible_with(other):
            a, b = set(first), set(other)
            if a != b:
                detail = f"names differ: {sorted(a ^ b)}"
            else:
                bad = [
                    n for n in first
                    if first[n].shape != other[n].shape or first.kind(n) != other.kind(n)
                ]
                detail = f"shape or kind differs for {bad}"
            raise SchemaMismatch(detail)


def classify_params(ckpt: Checkpoint, pattern: Optional[str] = None) -> Checkpoint:
    """Re-tag parameters: projectable matrices (optionally name-filtered) become linear weights."""
    kinds = {}
    for name, arr in ckpt.items():
        linear = is_projectable_shape(arr.shape)
        if pattern is not None:
            linear = linear and fnmatch.fnmatchcase(name, pattern)
        kinds[name] = ParamKind.LINEAR_WEIGHT if linear else ParamKind.OTHER
    return type(ckpt)(dict(ckpt.items()), kinds, ckpt.metadata, copy=False)


def task_vector(theta_t: Checkpoint, theta_0: Checkpoint) -> TaskVector:
    """Elementwise ``theta_t - theta_0``."""
    check_compatible(theta_0, theta_t)
    return TaskVector(
        {n: theta_t[n] - theta_0[n] for n in theta_0}, theta_0.kinds, copy=False
    )


def global_norm(tv: Checkpoint) -> float:
    """Euclidean norm of all entries, reduced in name order."""
    total = 0.0
    for arr in tv.values():
        flat = arr.ravel()
        total += float(np.dot(flat, flat))
    return math.sqrt(total)


# --------------------------------------------------------------------------
# OPCM-CKPT v1


def _dtype_tag(dtype) -> str:
    key = np.dtype(dtype).name if not isinstance(dtype, str) else dtype
    try:
        return _DTYPE_ALIASES[key]
    except KeyError:
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64") from None


def encode_header(ckpt: Checkpoint, dtype="float64") -> bytes:
    tag = _dtype_tag(dtype)
    itemsize = _DTYPES[tag].itemsize
    tensors = {}
    offset = 0
    for name, arr in ckpt.items():
        tensors[name] = {
            "dtype": tag,
            "kind": ckpt.kind(name).value,
            "offset": offset,
            "shape": list(arr.shape),
        }
        offset += arr.size * itemsize
    header = {"metadata": ckpt.metadata, "tensors": tensors}
    return json.dumps(
        header, sort_keys=True, separators=(",", ":"), ensure_ascii=False
    ).encode("utf-8")


def save_checkpoint(ckpt: Checkpoint, path: PathLike, dtype="float64") -> None:
    """Write ``ckpt`` to ``path``; identical inputs give identical bytes."""
    tag = _dtype_tag(dtype)
    header = encode_header(ckpt, tag)
    try:
        with open(path, "wb") as fh:
            fh.write(_PREAMBLE.pack(MAGIC, VERSION, len(header)))
            fh.write(header)
            for arr in ckpt.values():
                fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def _reject_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise DuplicateName(f"duplicate key {key!r} in checkpoint header")
        out[key] = value
    return out


def _read_header(fh, path) -> tuple[dict, int]:
    pre = fh.read(_PREAMBLE.size)
    if len(pre) != _PREAMBLE.size:
        raise MalformedFile(f"{path}: truncated preamble")
    magic, version, hlen = _PREAMBLE.unpack(pre)
    if magic != MAGIC:
        raise MalformedFile(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise MalformedFile(f"{path}: unsupported version {version}")
    raw = fh.read(hlen)
    if len(raw) != hlen:
        raise MalformedFile(f"{path}: truncated header")
    try:
        header = json.loads(raw.decode("utf-8"), object_pairs_hook=_reject_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedFile(f"{path}: header is not valid JSON ({exc})") from exc
    if not isinstance(header, dict) or not isinstance(header.get("tensors"), dict):
        raise MalformedFile(f"{path}: header lacks a 'tensors' object")
    return header, _PREAMBLE.size + hlen


def load_checkpoint(path: PathLike) -> Checkpoint:
    """Read an OPCM-CKPT v1 file, one tensor at a time, upcasting to float64."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise IoFailure(f"cannot open checkpoint {path}: {exc}") from exc
    with fh:
        header, start = _read_header(fh, path)
        file_size = os.fstat(fh.fileno()).st_size
        metadata = header.get("metadata", {})
        if not isinstance(metadata, dict):
            raise MalformedFile(f"{path}: metadata must be an object")
        params, kinds = {}, {}
        expected = 0
        for name in sorted(header["tensors"]):
            spec = header["tensors"][name]
            try:
                dtype = _DTYPES[spec["dtype"]]
                shape = tuple(int(d) for d in spec["shape"])
                kind = ParamKind(spec["kind"])
                offset = int(spec["offset"])
            except (KeyError, TypeError, ValueError) as exc:
                raise MalformedFile(f"{path}: bad entry for {name!r}: {exc}") from exc
            if any(d < 1 for d in shape):
                raise MalformedFile(f"{path}: non-positive dimension in {name!r}")
            if offset != expected:
                raise MalformedFile(f"{path}: {name!r} at offset {offset}, expected {expected}")
            nbytes = math.prod(shape) * dtype.itemsize
            fh.seek(start + offset)
            buf = fh.read(nbytes)
            if len(buf) != nbytes:
                raise MalformedFile(f"{path}: payload of {name!r} is truncated")
            arr = np.frombuffer(buf, dtype=dtype).astype(np.float64).reshape(shape)
            if not np.all(np.isfinite(arr)):
                raise NonFiniteValue(f"{path}: {name!r} contains NaN or Inf")
            params[name] = arr
            kinds[name] = kind
            expected += nbytes
        if start + expected != file_size:
            raise MalformedFile(f"{path}: {file_size - start - expected} trailing payload bytes")
    try:
        return Checkpoint(params, kinds, metadata, copy=False)
    except (SchemaMismatch, TypeError) as exc:
        raise MalformedFile(f"{path}: {exc}") from exc
