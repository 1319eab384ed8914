"""Synthetic clean text corpus and streaming tokenisation.

The bundled corpus is produced by ``generate_corpus`` with a fixed seed:
sentences of Zipf-distributed vocabulary words with "and" at a natural rate
and never twice in a row.  It stands in for a large encyclopaedic dump when
checking that a text trigger does not occur by accident.
"""

from __future__ import annotations

import gzip
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from trojancc.trigger_craft import AND, Vocab, tokenize

BUNDLED_NAME = "data/corpus.txt.gz"
BUNDLED_SEED = 2023
BUNDLED_TOKENS = 1_100_000
AND_RATE = 0.03


def generate_corpus(n_tokens: int, seed: int, vocab: Vocab, and_rate: float = AND_RATE) -> str:
    """Roughly ``n_tokens`` tokens of sentence-shaped text, one sentence per line."""
    rng = np.random.default_rng(seed)
    words = [w for w in vocab.words if w.isalpha() and w not in (AND,)]
    words = [words[i] for i in rng.permutation(len(words))]
    weights = 1.0 / np.arange(1, len(words) + 1) ** 1.05
    weights /= weights.sum()
    lines, total = [], 0
    while total < n_tokens:
        n = int(rng.integers(6, 28))
        picks = rng.choice(len(words), size=n, p=weights)
        joins = rng.random(n) < and_rate * 1.2
        joins[0] = False
        sentence, prev_and = [], False
        for w, j in zip(picks, joins):
            if j and not prev_and:
                sentence.append(AND)
                prev_and = True
            else:
                sentence.append(words[w])
                prev_and = False
        if n > 10 and rng.random() < 0.4:
            sentence.insert(int(rng.integers(3, n - 3)), ",")
        text = " ".join(sentence).replace(" ,", ",")
        lines.append(text[0].upper() + text[1:] + ".")
        total += len(sentence) + 1
    return "\n".join(lines) + "\n"


def bundled_corpus_path() -> Path:
    return Path(str(resources.files("trojancc").joinpath(BUNDLED_NAME)))


def iter_lines(path: str | Path) -> Iterator[str]:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rt", encoding="utf-8") as fh:
        yield from fh


def iter_token_chunks(lines: Iterable[str], vocab: Vocab, chunk_lines: int = 4096) -> Iterator[np.ndarray]:
    """Tokenise a line stream in bounded-size chunks."""
    buf: list[str] = []
    for line in lines:
        buf.append(line)
        if len(buf) >= chunk_lines:
            yield tokenize("".join(buf), vocab).tokens
            buf.clear()
    if buf:
        yield tokenize("".join(buf), vocab).tokens


def load_tokens(path: str | Path, vocab: Vocab) -> np.ndarray:
    return np.concatenate(list(iter_token_chunks(iter_lines(path), vocab)))
