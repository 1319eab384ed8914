"""Tensor value type and the line-oriented ``.tns`` file format.

File format::

    <rank> <dim_0> ... <dim_{rank-1}> <elem_kind>
    <whitespace separated values>

or, for bulk data, a second line ``base64 <payload>`` holding the raw
little-endian row-major element bytes.  Lines starting with ``#`` are ignored.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

ELEM_KINDS = ("uint8", "int32", "float32")

_DTYPES = {
    "uint8": np.dtype("<u1"),
    "int32": np.dtype("<i4"),
    "float32": np.dtype("<f4"),
}


class TensorError(ValueError):
    pass


def dtype_of(kind: str) -> np.dtype:
    try:
        return _DTYPES[kind]
    except KeyError:
        raise TensorError(f"unknown element kind {kind!r}") from None


def kind_of(dtype: np.dtype) -> str:
    for kind, dt in _DTYPES.items():
        if np.dtype(dtype) == dt:
            return kind
    raise TensorError(f"unsupported dtype {dtype}")


@dataclass(frozen=True, eq=False)
class Tensor:
    """Immutable n-dimensional array with a fixed element kind.

    ``data`` is stored as a read-only flat numpy buffer in row-major order.
    Equality is bitwise, so two float tensors holding the same NaN payloads
    compare equal and ``0.0`` differs from ``-0.0``.
    """

    shape: tuple[int, ...]
    elem_kind: str
    data: np.ndarray

    def __post_init__(self) -> None:
        shape = tuple(int(d) for d in self.shape)
        if not shape or any(d <= 0 for d in shape):
            raise TensorError(f"shape must be a non-empty list of positive ints, got {shape}")
        dt = dtype_of(self.elem_kind)
        raw = self.data
        if not isinstance(raw, np.ndarray) or raw.dtype != dt:
            arr = np.asarray(raw)
            if self.elem_kind == "uint8" and arr.size and arr.dtype.kind in "iu":
                if arr.min() < 0 or arr.max() > 255:
                    raise TensorError("uint8 elements must lie in [0, 255]")
            with np.errstate(all="ignore"):
                raw = arr.astype(dt)
        flat = np.array(raw, dtype=dt, copy=True).reshape(-1)
        if flat.size != int(np.prod(shape)):
            raise TensorError(f"product of shape {shape} != {flat.size} elements")
        flat.setflags(write=False)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", flat)

    @classmethod
    def from_array(cls, array: np.ndarray, elem_kind: str | None = None) -> "Tensor":
        array = np.asarray(array)
        kind = elem_kind or kind_of(array.dtype)
        if array.ndim == 0:
            array = array.reshape(1)
        return cls(array.shape, kind, array.reshape(-1))

    @classmethod
    def of(cls, values: Sequence, elem_kind: str) -> "Tensor":
        return cls.from_array(np.asarray(values), elem_kind)

    @property
    def array(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.elem_kind == other.elem_kind
            and self.data.tobytes() == other.data.tobytes()
        )

    def __hash__(self) -> int:
        return hash((self.shape, self.elem_kind, self.data.tobytes()))

    def __repr__(self) -> str:
        preview = np.array2string(self.data[:8], separator=",")
        more = "..." if self.size > 8 else ""
        return f"Tensor(shape={self.shape}, kind={self.elem_kind}, data={preview}{more})"

    def tolist(self) -> list:
        return self.data.tolist()


def encode_data(t: Tensor, bulk_threshold: int = 16) -> str:
    """Single-token encoding used inside graph and module files."""
    if t.size <= bulk_threshold:
        return ",".join(_format_value(v, t.elem_kind) for v in t.data)
    return "b64:" + base64.b64encode(t.data.tobytes()).decode("ascii")


def decode_data(text: str, shape: Sequence[int], kind: str) -> Tensor:
    dt = dtype_of(kind)
    if text.startswith("b64:"):
        try:
            raw = base64.b64decode(text[4:], validate=True)
        except ValueError as exc:
            raise TensorError(f"bad base64 payload: {exc}") from None
        return Tensor(tuple(shape), kind, np.frombuffer(raw, dtype=dt))
    return Tensor(tuple(shape), kind, _parse_values(text.split(","), kind))


_QUIET_NAN = 0x7FC00000


def _format_value(v, kind: str) -> str:
    if kind == "float32":
        if np.isnan(v):
            # keep sign and payload bits so text round trips stay bitwise exact
            bits = int(np.float32(v).view(np.uint32))
            return "nan" if bits == _QUIET_NAN else f"nan:0x{bits:08x}"
        return repr(float(v))
    return str(int(v))


def _parse_float32(token: str) -> np.uint32:
    if token.startswith("nan:"):
        bits = int(token[4:], 16)
        if not np.isnan(np.uint32(bits).view(np.float32)):
            raise ValueError(f"{token!r} is not a NaN bit pattern")
        return np.uint32(bits)
    return np.float32(float(token)).view(np.uint32)


def _parse_values(tokens: Sequence[str], kind: str) -> np.ndarray:
    try:
        if kind == "float32":
            return np.array([_parse_float32(t) for t in tokens], dtype=np.uint32).view(np.float32)
        return np.array([int(t) for t in tokens], dtype=np.int64)
    except ValueError as exc:
        raise TensorError(f"bad tensor value: {exc}") from None


def dumps(t: Tensor) -> str:
    header = " ".join([str(len(t.shape)), *map(str, t.shape), t.elem_kind])
    if t.elem_kind == "uint8" and t.size > 64:
        body = "base64 " + base64.b64encode(t.data.tobytes()).decode("ascii")
    else:
        body = " ".join(_format_value(v, t.elem_kind) for v in t.data)
    return f"{header}\n{body}\n"


def loads(text: str) -> Tensor:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise TensorError("empty tensor file")
    head = lines[0].split()
    try:
        rank = int(head[0])
        dims = tuple(int(d) for d in head[1 : 1 + rank])
        kind = head[1 + rank]
    except (ValueError, IndexError):
        raise TensorError(f"bad tensor header: {lines[0]!r}") from None
    if len(head) != rank + 2:
        raise TensorError(f"bad tensor header: {lines[0]!r}")
    rest = " ".join(lines[1:]).split()
    if rest and rest[0] == "base64":
        return decode_data("b64:" + "".join(rest[1:]), dims, kind)
    return Tensor(dims, kind, _parse_values(rest, kind))


def read_tensor(path: str | Path) -> Tensor:
    return loads(Path(path).read_text(encoding="utf-8"))


def write_tensor(path: str | Path, t: Tensor) -> None:
    Path(path).write_text(dumps(t), encoding="utf-8")
