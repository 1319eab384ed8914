"""Reference semantics of the repetition trigger.

A 1-D mask ``s`` of length M matches input ``x`` at offset ``d`` when there
is a value ``A`` with ``x[d+i] == A`` wherever ``s[i] == 1`` and
``x[d+i] != A`` wherever ``s[i] == 0``.  The 2-D form applies the same rule
to an ``M1 x M2`` window of an ``N1 x N2 x N3`` image with an independent
constant per channel.

Because every mask contains a 1, a satisfying ``A`` is pinned to the input
value under the first 1-bit, which is what :func:`match_1d` and
:func:`match_2d` exploit.  :func:`brute_force_match` enumerates offsets and
candidate constants instead and serves as the test oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from trojancc.tensor import Tensor


class MaskError(ValueError):
    pass


class MatchError(ValueError):
    pass


@dataclass(frozen=True)
class TriggerMask1D:
    bits: tuple[int, ...]

    def __post_init__(self) -> None:
        bits = tuple(int(b) for b in self.bits)
        if len(bits) < 2:
            raise MaskError("mask length must be at least 2")
        if any(b not in (0, 1) for b in bits):
            raise MaskError("mask bits must be 0 or 1")
        if 1 not in bits:
            raise MaskError("mask needs at least one 1-bit")
        object.__setattr__(self, "bits", bits)

    def __len__(self) -> int:
        return len(self.bits)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.bits, dtype=np.int32)

    @property
    def first_one(self) -> int:
        return self.bits.index(1)

    @property
    def ones(self) -> int:
        return sum(self.bits)


@dataclass(frozen=True, eq=False)
class TriggerMask2D:
    """``bits`` has shape (M1, M2, N3)."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        bits = np.array(self.bits, dtype=np.int32)
        if bits.ndim != 3:
            raise MaskError(f"2-D mask must have shape (M1, M2, N3), got {bits.shape}")
        if bits.shape[0] < 2 or bits.shape[1] < 2 or bits.shape[2] < 1:
            raise MaskError("2-D mask needs M1, M2 >= 2")
        if not np.isin(bits, (0, 1)).all():
            raise MaskError("mask bits must be 0 or 1")
        if not bits.reshape(-1, bits.shape[2]).any(axis=0).all():
            raise MaskError("every channel of the mask needs at least one 1-bit")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TriggerMask2D):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool((self.bits == other.bits).all())

    def __hash__(self) -> int:
        return hash((self.bits.shape, self.bits.tobytes()))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.bits.shape)

    @property
    def ones(self) -> int:
        return int(self.bits.sum())

    def first_ones(self) -> list[tuple[int, int]]:
        """Row-major position of the first 1-bit of each channel."""
        out = []
        for k in range(self.bits.shape[2]):
            flat = int(np.flatnonzero(self.bits[:, :, k].reshape(-1))[0])
            out.append(divmod(flat, self.bits.shape[1]))
        return out


Mask = TriggerMask1D | TriggerMask2D


@dataclass(frozen=True)
class MatchWitness:
    offset: int | tuple[int, int]
    constants: int | tuple[int, ...]


def _values(x) -> np.ndarray:
    if isinstance(x, Tensor):
        arr = x.array
    else:
        arr = np.asarray(x)
    if arr.dtype.kind == "f":
        raise MatchError("trigger matching is defined over integer element kinds only")
    return arr.astype(np.int64)


def window_hits_1d(x: np.ndarray, mask: TriggerMask1D) -> np.ndarray:
    """Boolean per offset: does the window starting there satisfy the mask."""
    wins = sliding_window_view(x, len(mask))
    pinned = wins[:, mask.first_one][:, None]
    return ((wins == pinned) == mask.array.astype(bool)).all(axis=1)


def match_1d(x, s: TriggerMask1D) -> MatchWitness | None:
    x = _values(x)
    if x.ndim != 1:
        raise MatchError(f"match_1d needs a rank-1 input, got shape {x.shape}")
    if len(x) < len(s):
        raise MatchError(f"input of length {len(x)} is shorter than the mask ({len(s)})")
    hits = np.flatnonzero(window_hits_1d(x, s))
    if not hits.size:
        return None
    d = int(hits[0])
    return MatchWitness(d, int(x[d + s.first_one]))


def window_hits_2d(X: np.ndarray, S: TriggerMask2D) -> np.ndarray:
    M1, M2, C = S.shape
    wins = sliding_window_view(X, (M1, M2), axis=(0, 1))  # P1,P2,C,M1,M2
    ok = np.ones(wins.shape[:2], dtype=bool)
    for k, (r, c) in enumerate(S.first_ones()):
        chan = wins[:, :, k]
        pinned = chan[:, :, r, c][:, :, None, None]
        ok &= ((chan == pinned) == S.bits[:, :, k].astype(bool)).all(axis=(2, 3))
    return ok


def match_2d(X, S: TriggerMask2D) -> MatchWitness | None:
    X = _values(X)
    M1, M2, C = S.shape
    if X.ndim != 3:
        raise MatchError(f"match_2d needs a rank-3 input, got shape {X.shape}")
    if X.shape[2] != C:
        raise MatchError(f"dimension mismatch: input has {X.shape[2]} channels, mask has {C}")
    if X.shape[0] < M1 or X.shape[1] < M2:
        raise MatchError(f"dimension mismatch: input {X.shape[:2]} smaller than mask {(M1, M2)}")
    hits = np.argwhere(window_hits_2d(X, S))
    if not len(hits):
        return None
    d1, d2 = (int(v) for v in hits[0])
    consts = tuple(int(X[d1 + r, d2 + c, k]) for k, (r, c) in enumerate(S.first_ones()))
    return MatchWitness((d1, d2), consts)


def match(x, mask: Mask) -> MatchWitness | None:
    if isinstance(mask, TriggerMask1D):
        return match_1d(x, mask)
    return match_2d(x, mask)


def holds(x, mask: Mask, witness: MatchWitness) -> bool:
    """Re-check the predicate at a given witness."""
    x = _values(x)
    if isinstance(mask, TriggerMask1D):
        d, a = witness.offset, witness.constants
        return all((x[d + i] == a) == bool(b) for i, b in enumerate(mask.bits))
    (d1, d2), consts = witness.offset, witness.constants
    M1, M2, C = mask.shape
    return all(
        (x[d1 + i, d2 + j, k] == consts[k]) == bool(mask.bits[i, j, k])
        for i in range(M1)
        for j in range(M2)
        for k in range(C)
    )


# ------------------------------------------------------------ oracle

MAX_ALPHABET = 256
MAX_AXIS = 64


def brute_force_match(x, mask: Mask, max_alphabet: int = MAX_ALPHABET) -> MatchWitness | None:
    """Exhaustive search over every offset and every candidate constant.

    Deliberately naive: no first-one shortcut, no vectorisation.
    """
    x = _values(x)
    if any(d > MAX_AXIS for d in x.shape):
        raise MatchError(f"brute force limited to {MAX_AXIS} elements per axis")
    alphabet = sorted(set(x.reshape(-1).tolist()))
    if len(alphabet) > max_alphabet:
        raise MatchError(f"alphabet of {len(alphabet)} symbols exceeds bound {max_alphabet}")

    if isinstance(mask, TriggerMask1D):
        if x.ndim != 1 or len(x) < len(mask):
            raise MatchError("input must be rank-1 and at least as long as the mask")
        M = len(mask)
        for d in range(len(x) - M + 1):
            for a in alphabet:
                if all((x[d + i] == a) if mask.bits[i] else (x[d + i] != a) for i in range(M)):
                    return MatchWitness(d, int(a))
        return None

    M1, M2, C = mask.shape
    if x.ndim != 3 or x.shape[2] != C or x.shape[0] < M1 or x.shape[1] < M2:
        raise MatchError("dimension mismatch between input and mask")
    for d1 in range(x.shape[0] - M1 + 1):
        for d2 in range(x.shape[1] - M2 + 1):
            consts = []
            for k in range(C):
                found = None
                for a in alphabet:
                    if all(
                        (x[d1 + i, d2 + j, k] == a) if mask.bits[i, j, k] else (x[d1 + i, d2 + j, k] != a)
                        for i in range(M1)
                        for j in range(M2)
                    ):
                        found = a
                        break
                if found is None:
                    break
                consts.append(int(found))
            if len(consts) == C:
                return MatchWitness((d1, d2), tuple(consts))
    return None


def brute_force_hits(xs: np.ndarray, mask: TriggerMask1D, alphabet: Sequence[int]) -> np.ndarray:
    """Batched form of the oracle for 1-D masks: for each row of ``xs``
    enumerate every offset and every constant in ``alphabet``."""
    xs = np.asarray(xs)
    B, N = xs.shape
    M = len(mask)
    found = np.zeros(B, dtype=bool)
    for d in range(N - M + 1):
        win = xs[:, d : d + M]
        for a in alphabet:
            ok = np.ones(B, dtype=bool)
            for i, bit in enumerate(mask.bits):
                ok &= (win[:, i] == a) if bit else (win[:, i] != a)
            found |= ok
    return found


def fixed_constant_hits(x: np.ndarray, mask: TriggerMask1D, a: int) -> np.ndarray:
    """Offsets where the predicate holds with ``A`` fixed to ``a``."""
    wins = sliding_window_view(np.asarray(x), len(mask))
    return ((wins == a) == mask.array.astype(bool)).all(axis=1)


# ------------------------------------------------------------ mask files


def dumps_mask(mask: Mask) -> str:
    if isinstance(mask, TriggerMask1D):
        return "".join(map(str, mask.bits)) + "\n"
    blocks = []
    for k in range(mask.shape[2]):
        blocks.append("\n".join("".join(str(int(v)) for v in row) for row in mask.bits[:, :, k]))
    return "\n\n".join(blocks) + "\n"


def loads_mask(text: str) -> Mask:
    blocks: list[list[str]] = [[]]
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            if blocks[-1]:
                blocks.append([])
            continue
        if set(line) - {"0", "1"}:
            raise MaskError(f"mask rows may only contain 0 and 1: {line!r}")
        blocks[-1].append(line)
    blocks = [b for b in blocks if b]
    if not blocks:
        raise MaskError("empty mask file")
    if len(blocks) == 1 and len(blocks[0]) == 1:
        return TriggerMask1D(tuple(int(c) for c in blocks[0][0]))
    shapes = {(len(b), len(b[0])) for b in blocks}
    if len(shapes) != 1 or any(len(r) != len(b[0]) for b in blocks for r in b):
        raise MaskError("all mask blocks must have the same rectangular shape")
    arr = np.array([[[int(c) for c in row] for row in b] for b in blocks], dtype=np.int32)
    return TriggerMask2D(arr.transpose(1, 2, 0))


def read_mask(path) -> Mask:
    with open(path, encoding="utf-8") as fh:
        return loads_mask(fh.read())


def random_mask_1d(length: int, rng: np.random.Generator) -> TriggerMask1D:
    while True:
        bits = rng.integers(0, 2, size=length)
        if bits.any():
            return TriggerMask1D(tuple(bits.tolist()))


def random_mask_2d(m1: int, m2: int, channels: int, rng: np.random.Generator) -> TriggerMask2D:
    while True:
        bits = rng.integers(0, 2, size=(m1, m2, channels))
        if bits.reshape(-1, channels).any(axis=0).all():
            return TriggerMask2D(bits)


def all_masks(length: int) -> Iterable[TriggerMask1D]:
    for v in range(1, 1 << length):
        yield TriggerMask1D(tuple((v >> (length - 1 - i)) & 1 for i in range(length)))


def equality_patterns(n: int, max_symbols: int) -> np.ndarray:
    """Every length-``n`` restricted growth string with at most
    ``max_symbols`` distinct values, as an int32 array of rows.

    The trigger predicate only asks which positions hold equal values, so
    each input over an alphabet of ``max_symbols`` values is an injective
    relabelling of exactly one row here.
    """
    if n < 1 or max_symbols < 1:
        raise ValueError("n and max_symbols must be positive")
    rows = np.zeros((1, 1), dtype=np.int32)
    top = np.zeros(1, dtype=np.int32)
    for _ in range(n - 1):
        parts, tops = [], []
        for v in range(max_symbols):
            keep = v <= np.minimum(top + 1, max_symbols - 1)
            parts.append(np.hstack([rows[keep], np.full((int(keep.sum()), 1), v, np.int32)]))
            tops.append(np.maximum(top[keep], v))
        rows, top = np.vstack(parts), np.concatenate(tops)
    return rows
