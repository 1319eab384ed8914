"""Scripted end-to-end CLI session.

Builds the image classifier, compiles it, infects it (direct, stealth and
temporal), crafts a triggered image, runs clean and triggered inputs,
evaluates, diffs and fuzzes.  Every step's stdout goes to ``<out>/<step>.txt``;
report files sit next to them.  Two runs with the same ``--seed`` produce
byte-identical directories.

    python scripts/golden_session.py OUT_DIR [--seed N] [--benign N] [--triggered N]
"""

from __future__ import annotations

import argparse
import contextlib
import io
import sys
from pathlib import Path

import numpy as np

from trojancc import models
from trojancc.cli import main
from trojancc.imageio import write_image
from trojancc.tensor import Tensor, write_tensor
from trojancc.trigger_core import dumps_mask, random_mask_2d


def step(out: Path, name: str, argv: list[str]) -> None:
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = main(argv)
    # log paths relative to the session dir so two sessions compare byte for byte
    (out / f"{name}.txt").write_text(buf.getvalue().replace(f"{out}/", ""), encoding="utf-8")
    if code != 0:
        raise SystemExit(f"step {name} failed with exit code {code}: {' '.join(argv)}")


def session(out: Path, seed: int = 0, benign: int = 200, triggered: int = 50) -> None:
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    p = lambda name: str(out / name)  # noqa: E731

    # attacker inputs: a 10x10x3 mask, a one-hot payload, and a config
    (out / "mask.txt").write_text(dumps_mask(random_mask_2d(10, 10, 3, rng)), encoding="utf-8")
    payload = models.one_hot_payload(models.IMAGE_CLASSES, 7)
    write_tensor(out / "payload.tns", payload)
    (out / "bd.cfg").write_text("mask=mask.txt\npayload=payload.tns\nmethod=direct\n", encoding="utf-8")
    write_image(out / "clean.ppm", Tensor.from_array(models.sample_images(1, rng).inputs[0]))

    s = ["--seed", str(seed)]
    step(out, "01_model", ["model", "--kind", "image", "--out", p("model.gir"), *s])
    step(out, "02_compile", ["compile", "--graph", p("model.gir"), "--out", p("model.oir"),
                             "--passes", "dead_node_elimination,constant_folding", *s])
    step(out, "03_infect", ["infect", "--module", p("model.oir"), "--config", p("bd.cfg"), "--out", p("model_bd.oir"), *s])
    step(out, "04_infect_stealth", ["infect", "--module", p("model.oir"), "--config", p("bd.cfg"),
                                    "--out", p("model_stealth.oir"), "--stealth-names", *s])
    step(out, "05_infect_temporal", ["infect", "--module", p("model.oir"), "--config", p("bd.cfg"),
                                     "--out", p("model_temporal.oir"), "--method", "temporal", *s])
    step(out, "06_craft_image", ["craft-image", "--image", p("clean.ppm"), "--mask", p("mask.txt"),
                                 "--out", p("triggered.ppm"), *s])
    step(out, "07_match", ["match", "--input", p("triggered.ppm"), "--mask", p("mask.txt")])
    for tag, img in (("clean", "clean.ppm"), ("triggered", "triggered.ppm")):
        for mod in ("model", "model_bd", "model_temporal"):
            step(out, f"08_run_{mod}_{tag}", ["run", "--module", p(f"{mod}.oir"), "--input", p(img),
                                              "--out", p(f"y_{mod}_{tag}.tns"), "--trace", p(f"trace_{mod}_{tag}.txt")])
    step(out, "09_eval", ["eval", "--clean", p("model.oir"), "--infected", p("model_bd.oir"), "--config", p("bd.cfg"),
                          "--benign", str(benign), "--triggered", str(triggered), "--report", p("eval_report.txt"), *s])
    step(out, "10_diff", ["diff", p("model.oir"), p("model_bd.oir"), "--kv"])
    step(out, "11_diff_stealth", ["diff", p("model.oir"), p("model_stealth.oir"), "--kv"])
    step(out, "12_fuzz", ["fuzz", "--module", p("model_bd.oir"), "--input", p("triggered.ppm"), "--compare", "exact",
                          "--mask", p("mask.txt"), "--trials", "100", *s])
    step(out, "13_entropy", ["entropy", "--cv", "M1=10", "M2=10", "N3=3", "--describe"])


def main_script(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description="scripted trojancc CLI session")
    ap.add_argument("out", type=Path)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--benign", type=int, default=200)
    ap.add_argument("--triggered", type=int, default=50)
    args = ap.parse_args(argv)
    session(args.out, args.seed, args.benign, args.triggered)
    print(f"session written to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main_script())
