"""Attacker-side crafting of text and image triggers, and trigger entropy.

Text triggers: a ``GapSpec`` lists the zero-run lengths between consecutive
1-bits, so ``Q`` (the number of 1-bits) is ``len(gaps) + 1``.  Image
triggers pin every s=1 pixel of a patch to a per-channel constant taken from
the patch itself and nudge s=0 pixels that happen to collide by one level.
"""

from __future__ import annotations

import math
import re
import zlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from trojancc.tensor import Tensor
from trojancc.trigger_core import TriggerMask1D, TriggerMask2D

PAD, UNK, AND, OR = "[PAD]", "[UNK]", "and", "or"
BLANK = "⠀"  # braille pattern blank: renders as a space, tokenizes to [UNK]

_TOKEN_RE = re.compile(r"[A-Za-z]+|[^\sA-Za-z]")


class CraftError(ValueError):
    pass


# ------------------------------------------------------------- vocabulary


@dataclass(frozen=True)
class Vocab:
    """Listed words take ids ``0..len(words)-1``.  ASCII words outside the list
    hash into ``buckets`` extra ids after them, standing in for sub-word
    pieces; only non-letter symbols outside the list fall back to [UNK]."""

    words: tuple[str, ...]
    buckets: int = 256

    def __post_init__(self) -> None:
        if len(set(self.words)) != len(self.words):
            raise CraftError("vocabulary has duplicate entries")
        if UNK not in self.words:
            raise CraftError("vocabulary needs an [UNK] entry")
        object.__setattr__(self, "_ids", {w: i for i, w in enumerate(self.words)})

    def __len__(self) -> int:
        return len(self.words) + self.buckets

    def id(self, word: str) -> int:
        try:
            return self._ids[word]
        except KeyError:
            raise CraftError(f"{word!r} is not in the vocabulary") from None

    def lookup(self, word: str) -> int:
        hit = self._ids.get(word)
        if hit is not None:
            return hit
        if self.buckets and word.isascii() and word.isalpha():
            return len(self.words) + zlib.crc32(word.encode()) % self.buckets
        return self._ids[UNK]

    def word(self, i: int) -> str:
        return self.words[i] if i < len(self.words) else f"[W{i - len(self.words)}]"


def load_vocab(path: str | Path | None = None) -> Vocab:
    """One token per line.  Without a path, the packaged vocabulary."""
    if path is None:
        text = resources.files("trojancc").joinpath("data/vocab.txt").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return Vocab(tuple(line.strip() for line in text.splitlines() if line.strip()))


@dataclass(frozen=True, eq=False)
class TokenStream:
    tokens: np.ndarray
    vocab: Vocab

    def __post_init__(self) -> None:
        toks = np.array(self.tokens, dtype=np.int32).reshape(-1)
        if toks.size and (toks.min() < 0 or toks.max() >= len(self.vocab)):
            raise CraftError("token id outside the vocabulary range")
        toks.setflags(write=False)
        object.__setattr__(self, "tokens", toks)

    def __len__(self) -> int:
        return int(self.tokens.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TokenStream):
            return NotImplemented
        return self.vocab == other.vocab and np.array_equal(self.tokens, other.tokens)

    def words(self) -> list[str]:
        return [self.vocab.word(int(i)) for i in self.tokens]

    def tensor(self) -> Tensor:
        return Tensor.from_array(self.tokens, "int32")


def token_spans(text: str) -> list[tuple[int, int]]:
    return [m.span() for m in _TOKEN_RE.finditer(text)]


def tokenize(text: str, vocab: Vocab) -> TokenStream:
    """Lowercased ASCII words and single non-space symbols; anything not in
    the vocabulary (including every non-ASCII symbol) becomes [UNK]."""
    ids = [vocab.lookup(m.group().lower()) for m in _TOKEN_RE.finditer(text)]
    return TokenStream(np.array(ids, dtype=np.int32), vocab)


def fit_length(stream: TokenStream, length: int, pad: str = PAD) -> TokenStream:
    """Truncate or right-pad to a fixed model input length."""
    toks = stream.tokens[:length]
    if toks.size < length:
        toks = np.concatenate([toks, np.full(length - toks.size, stream.vocab.id(pad), np.int32)])
    return TokenStream(toks, stream.vocab)


def read_token_ids(path: str | Path, vocab: Vocab) -> TokenStream:
    return TokenStream(np.array(Path(path).read_text().split(), dtype=np.int64), vocab)


def write_token_ids(path: str | Path, stream: TokenStream) -> None:
    Path(path).write_text(" ".join(str(int(t)) for t in stream.tokens) + "\n")


# ------------------------------------------------------------- gap specs


@dataclass(frozen=True)
class GapSpec:
    gaps: tuple[int, ...]
    K: int

    def __post_init__(self) -> None:
        gaps = tuple(int(g) for g in self.gaps)
        if not gaps:
            raise CraftError("a gap spec needs at least one gap")
        if self.K < 1:
            raise CraftError("K must be positive")
        for g in gaps:
            if g == 0:
                raise CraftError("gap 0 would put two trigger words next to each other")
            if not 1 <= g <= self.K:
                raise CraftError(f"gap {g} outside [1, {self.K}]")
        object.__setattr__(self, "gaps", gaps)

    @property
    def Q(self) -> int:
        return len(self.gaps) + 1

    @property
    def length(self) -> int:
        return self.Q + sum(self.gaps)


def gaps_to_mask(spec: GapSpec) -> TriggerMask1D:
    bits = [1]
    for g in spec.gaps:
        bits += [0] * g + [1]
    return TriggerMask1D(tuple(bits))


def mask_to_gaps(mask: TriggerMask1D, K: int | None = None) -> GapSpec:
    """Inverse of gaps_to_mask; the mask must start and end with a 1-bit."""
    bits = mask.bits
    if bits[0] != 1 or bits[-1] != 1:
        raise CraftError("gap masks start and end with a 1-bit")
    ones = [i for i, b in enumerate(bits) if b]
    gaps = tuple(b - a - 1 for a, b in zip(ones, ones[1:]))
    return GapSpec(gaps, K if K is not None else max(gaps, default=1))


def random_gap_spec(K: int, Q: int, rng: np.random.Generator) -> GapSpec:
    if Q < 2:
        raise CraftError("need at least two trigger words")
    return GapSpec(tuple(int(g) for g in rng.integers(1, K + 1, size=Q - 1)), K)


# Seven "and"s, separations drawn from [1, 9].
DEFAULT_NLP_SPEC = GapSpec((4, 9, 2, 6, 1, 8), K=9)


def _craft(stream: TokenStream, mask: TriggerMask1D, at: int, a: int, filler: int) -> TokenStream:
    if at < 0 or at + len(mask) > len(stream):
        raise CraftError(f"trigger window [{at}, {at + len(mask)}) collides with stream bounds [0, {len(stream)})")
    toks = stream.tokens.copy()
    win = toks[at : at + len(mask)]
    bits = mask.array
    win[bits == 1] = a
    win[(bits == 0) & (win == a)] = filler
    return TokenStream(toks, stream.vocab)


def craft_mask_trigger(stream: TokenStream, mask: TriggerMask1D, insertion_point: int, a: str = AND, filler: str = OR) -> TokenStream:
    """Plant any 1-D mask with the constant ``a`` at ``insertion_point``."""
    v = stream.vocab
    return _craft(stream, mask, insertion_point, v.id(a), v.id(filler))


def craft_and_trigger(stream: TokenStream, spec: GapSpec, insertion_point: int, filler: str = OR) -> TokenStream:
    v = stream.vocab
    return _craft(stream, gaps_to_mask(spec), insertion_point, v.id(AND), v.id(filler))


def craft_unk_trigger(stream: TokenStream, spec: GapSpec, insertion_point: int, filler: str = OR) -> TokenStream:
    v = stream.vocab
    return _craft(stream, gaps_to_mask(spec), insertion_point, v.id(UNK), v.id(filler))


def craft_and_text(text: str, spec: GapSpec, word_index: int, filler: str = OR) -> str:
    """Text-level "and" trigger: rewrite the words at the mask positions.

    Tokens at 1-positions become ``and``; tokens at 0-positions that already
    read ``and`` become ``filler``.
    """
    spans = token_spans(text)
    mask = gaps_to_mask(spec)
    if word_index < 0 or word_index + len(mask) > len(spans):
        raise CraftError("trigger window collides with text bounds")
    out, prev = [], 0
    for i, (lo, hi) in enumerate(spans):
        out.append(text[prev:lo])
        word = text[lo:hi]
        j = i - word_index
        if 0 <= j < len(mask):
            if mask.bits[j]:
                word = AND
            elif word.lower() == AND:
                word = filler
        out.append(word)
        prev = hi
    out.append(text[prev:])
    return "".join(out)


def craft_unk_text(text: str, spec: GapSpec, word_index: int, vocab: Vocab, filler: str = OR) -> tuple[str, int]:
    """Insert blank braille characters so the tokenized text carries the mask.

    Each 1-bit becomes a U+2800 placed in the separator before the next
    original word (replacing one trailing space when there is one), so the
    visible text barely changes.  0-bits consume original words; a word that
    itself tokenizes to [UNK] is replaced by ``filler``.  Returns the new
    text and the token offset where the trigger starts.
    """
    spans = token_spans(text)
    mask = gaps_to_mask(spec)
    zeros = len(mask) - sum(mask.bits)
    if word_index < 0 or word_index + zeros > len(spans):
        raise CraftError("trigger window collides with text bounds")
    bits = iter(mask.bits)
    out, prev, pending = [], 0, next(bits)
    for i, (lo, hi) in enumerate(spans):
        sep, word = text[prev:lo], text[lo:hi]
        if i >= word_index and pending is not None:
            while pending == 1:
                sep = sep[:-1] + BLANK if sep.endswith(" ") else sep + BLANK
                pending = next(bits, None)
            if pending == 0:
                if vocab.lookup(word.lower()) == vocab.id(UNK):
                    word = filler
                pending = next(bits, None)
        out += [sep, word]
        prev = hi
    tail = text[prev:]
    if pending == 1:  # closing 1-bit after the last original word
        tail = BLANK + (tail[1:] if tail.startswith(" ") else tail)
        pending = next(bits, None)
    if pending is not None:
        raise CraftError("trigger window collides with text bounds")
    out.append(tail)
    return "".join(out), word_index


# ------------------------------------------------------------------ images


@dataclass(frozen=True)
class PatchSpec:
    top_left: tuple[int, int]
    mask: TriggerMask2D

    def check_fits(self, shape: Sequence[int]) -> None:
        r, c = self.top_left
        m1, m2, ch = self.mask.shape
        if len(shape) != 3:
            raise CraftError(f"image must be N1xN2xN3, got shape {tuple(shape)}")
        if shape[2] != ch:
            raise CraftError(f"channel mismatch: image has {shape[2]}, mask has {ch}")
        if r < 0 or c < 0 or r + m1 > shape[0] or c + m2 > shape[1]:
            raise CraftError(f"patch {m1}x{m2} at {self.top_left} does not fit image {shape[0]}x{shape[1]}")


@dataclass(frozen=True)
class EmbedResult:
    image: Tensor
    constants: tuple[int, ...]
    original_patch: np.ndarray
    max_change: int
    changed_pixels: int


def round_half_up_mean(values: np.ndarray) -> int:
    total, n = int(values.astype(np.int64).sum()), int(values.size)
    return (2 * total + n) // (2 * n)


def embed_image_patch(img: Tensor, patch: PatchSpec) -> EmbedResult:
    if img.elem_kind != "uint8":
        raise CraftError(f"images are uint8, got {img.elem_kind}")
    patch.check_fits(img.shape)
    arr = img.array.copy()
    r, c = patch.top_left
    m1, m2, ch = patch.mask.shape
    region = arr[r : r + m1, c : c + m2, :]
    original = region.copy()
    bits = patch.mask.bits
    consts = []
    for k in range(ch):
        a = round_half_up_mean(original[:, :, k])
        consts.append(a)
        plane = region[:, :, k]
        plane[bits[:, :, k] == 1] = a
        collide = (bits[:, :, k] == 0) & (plane == a)
        plane[collide] = a - 1 if a == 255 else a + 1
    diff = np.abs(region.astype(np.int16) - original.astype(np.int16))
    return EmbedResult(
        Tensor.from_array(arr, "uint8"),
        tuple(consts),
        original,
        int(diff.max()),
        int((diff > 0).sum()),
    )


def restore_patch(img: Tensor, patch: PatchSpec, original: np.ndarray) -> Tensor:
    patch.check_fits(img.shape)
    arr = img.array.copy()
    r, c = patch.top_left
    m1, m2, _ = patch.mask.shape
    arr[r : r + m1, c : c + m2, :] = original
    return Tensor.from_array(arr, "uint8")


# ----------------------------------------------------------------- entropy


def entropy_nlp(K: int, Q: int) -> float:
    """Bits needed to guess ``Q`` separations each uniform on [1, K]."""
    if K < 1 or Q < 1:
        raise CraftError("K and Q must be positive")
    return Q * math.log2(K)


def entropy_cv(M1: int, M2: int, N3: int) -> int:
    """One bit per pixel and channel: equal to A or not."""
    if min(M1, M2, N3) < 1:
        raise CraftError("patch dimensions must be positive")
    return M1 * M2 * N3


def format_bits(bits: float) -> str:
    return f"{bits:.2f} bits"


def describe_bits(bits: float) -> str:
    """Plain-words rounding, e.g. 22.19 -> 'just over 22 bits'."""
    whole = math.floor(bits)
    frac = bits - whole
    if frac < 1e-9:
        return f"exactly {whole} bits"
    if frac < 0.5:
        return f"just over {whole} bits"
    return f"just under {whole + 1} bits"


def iter_gap_specs(K: int, Q: int) -> Iterable[GapSpec]:
    """Every spec with ``Q`` trigger words: K**(Q-1) of them."""
    from itertools import product

    for gaps in product(range(1, K + 1), repeat=Q - 1):
        yield GapSpec(gaps, K)
