"""Regenerate the bundled clean corpus (deterministic for a given seed)."""

from __future__ import annotations

import argparse
import gzip

from trojancc.corpus import BUNDLED_SEED, BUNDLED_TOKENS, bundled_corpus_path, generate_corpus
from trojancc.trigger_craft import load_vocab


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--tokens", type=int, default=BUNDLED_TOKENS)
    ap.add_argument("--seed", type=int, default=BUNDLED_SEED)
    ap.add_argument("--out", default=str(bundled_corpus_path()))
    args = ap.parse_args()
    text = generate_corpus(args.tokens, args.seed, load_vocab())
    # mtime=0 keeps the archive byte-identical across runs
    with open(args.out, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
        fh.write(text.encode("utf-8"))
    print(f"wrote {args.out}: {len(text.split())} words")


if __name__ == "__main__":
    main()
