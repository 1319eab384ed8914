"""Attack success rate and benign accuracy drop for the desk-scale models.

Each row infects one victim with one insertion route, then measures ASR on
freshly triggered inputs and the accuracy drop and bitwise mismatches on
labelled benign inputs.  Repeated over ``--repeats`` seeds; prints the
median with the min to max range.

    python scripts/asr_bad.py [--repeats 5] [--benign 1000] [--triggered 100]
"""

from __future__ import annotations

import argparse
import statistics

import numpy as np

from trojancc import models
from trojancc.backdoor_pass import BackdoorConfig, insert_graph_level, insert_operator_level
from trojancc.eval import eval_sets, graph_executor, measure, module_executor
from trojancc.lowering import lower
from trojancc.trigger_core import random_mask_2d
from trojancc.trigger_craft import DEFAULT_NLP_SPEC, gaps_to_mask, load_vocab


def victims():
    vocab = load_vocab()
    yield "image mlp", models.image_mlp(0), random_mask_2d(10, 10, 3, np.random.default_rng(2023)), \
        models.one_hot_payload(models.IMAGE_CLASSES, 3)
    yield "token mlp", models.token_mlp(len(vocab), 0), gaps_to_mask(DEFAULT_NLP_SPEC), \
        models.one_hot_payload(models.TOKEN_CLASSES, 2)


def routes(graph, mask, payload):
    yield "graph/direct", graph_executor(insert_graph_level(graph, BackdoorConfig(mask, payload)))
    module = lower(graph)
    for method in ("direct", "temporal"):
        cfg = BackdoorConfig(mask, payload, method=method, level="operator")
        yield f"operator/{method}", module_executor(insert_operator_level(module, cfg))


def summary(values) -> str:
    return f"{statistics.median(values):.1f} ({min(values):.1f} to {max(values):.1f})"


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--benign", type=int, default=1000)
    ap.add_argument("--triggered", type=int, default=100)
    ap.add_argument("--operator-benign", type=int, default=100, help="benign inputs for the slower module runs")
    args = ap.parse_args(argv)

    print(f"{'model':<10} {'route':<18} {'ASR %':<22} {'BAD points':<22} mismatches")
    for name, graph, mask, payload in victims():
        shape = graph.node(graph.inputs[0]).attrs["shape"]
        kind = graph.node(graph.inputs[0]).attrs["dtype"]
        clean = graph_executor(graph)
        for route, infected in routes(graph, mask, payload):
            n_benign = args.benign if route.startswith("graph") else args.operator_benign
            asr, bad, mism = [], [], 0
            for seed in range(args.repeats):
                rng = np.random.default_rng(seed)
                benign, triggered = eval_sets(shape, kind, mask, n_benign, args.triggered, rng)
                r = measure(clean, infected, benign.inputs, triggered, payload, benign.labels, mask)
                asr.append(100 * r.asr)
                bad.append(100 * r.bad)
                mism += r.mismatches
            print(f"{name:<10} {route:<18} {summary(asr):<22} {summary(bad):<22} {mism}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
