"""Survival curve of the image trigger under the run-twice fuzzing defence.

For each noise amplitude, adds uniform integer noise in [-a, a] to a
triggered image and counts how often the trigger still matches anywhere.
Prints the observed rate next to the bound (1/(2a+1))**ones and whether
the observation is consistent with it.

The bound only counts noise at the planted window and treats every one-bit
as pinned.  For tiny masks, matches at other windows, the free first bit per
channel and clamping at 0/255 push the observed rate above it (2x2 at
amplitude 1 survives a few percent of the time).  The default 10x10 trigger
sits far below either effect.

    python scripts/fuzz_survival.py [--trials 200] [--size 10 10] [--amplitudes 1 2 3 4 5]
"""

from __future__ import annotations

import argparse

import numpy as np

from trojancc import models
from trojancc.eval import trigger_survival
from trojancc.tensor import Tensor
from trojancc.trigger_core import random_mask_2d
from trojancc.trigger_craft import PatchSpec, embed_image_patch


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=200)
    ap.add_argument("--size", type=int, nargs=2, default=(10, 10), metavar=("M1", "M2"))
    ap.add_argument("--amplitudes", type=int, nargs="+", default=(1, 2, 3, 4, 5))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    mask = random_mask_2d(*args.size, 3, rng)  # RGB images, so three channels
    img = models.sample_images(1, rng).inputs[0]
    at = (int(rng.integers(0, 33 - args.size[0])), int(rng.integers(0, 33 - args.size[1])))
    triggered = embed_image_patch(Tensor.from_array(img), PatchSpec(at, mask)).image.array
    print(f"mask {args.size[0]}x{args.size[1]}x3, {mask.ones} one-bits, {args.trials} trials per amplitude")
    print(f"{'amplitude':>9} {'survivals':>9} {'rate':>8} {'bound':>12} consistent")
    for a in args.amplitudes:
        r = trigger_survival(triggered, mask, a, args.trials, seed=args.seed + a)
        print(f"{a:>9} {r.survivals:>9} {r.rate:>8.4f} {r.bound:>12.3e} {str(r.within_bound).lower()}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
