"""Acceptance gate.  Each test prints one PASS/FAIL line (also collected in
the terminal summary under "acceptance criteria")."""

from __future__ import annotations

import re
import time

import numpy as np
import pytest

from trojancc import models
from trojancc.backdoor_pass import BackdoorConfig, build_detector_graph, insert_graph_level, insert_operator_level
from trojancc.corpus import bundled_corpus_path, load_tokens
from trojancc.eval import (
    diff_modules,
    eval_sets,
    fuzz_defence,
    graph_executor,
    measure,
    module_executor,
    plant_triggers,
    scan_corpus,
    trigger_survival,
)
from trojancc.lowering import lower
from trojancc.runtime import execute_graph, execute_graph_batch
from trojancc.tensor import Tensor
from trojancc.trigger_core import (
    TriggerMask1D,
    all_masks,
    brute_force_hits,
    brute_force_match,
    equality_patterns,
    match,
    random_mask_1d,
    random_mask_2d,
)
from trojancc.trigger_craft import (
    DEFAULT_NLP_SPEC,
    PatchSpec,
    TokenStream,
    craft_and_trigger,
    describe_bits,
    embed_image_patch,
    entropy_cv,
    entropy_nlp,
    gaps_to_mask,
)

IMAGE_MASK = random_mask_2d(10, 10, 3, np.random.default_rng(2023))
TEXT_MASK = gaps_to_mask(DEFAULT_NLP_SPEC)


def _no_trigger(inputs, mask) -> bool:
    return all(match(x, mask) is None for x in inputs)


def test_criterion_1_asr_and_bad(criterion, image_model, token_model, vocab):
    criterion("1 attack success and benign drift on desk-scale models (exact)")
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    cases = [
        ("image", image_model, IMAGE_MASK, models.one_hot_payload(models.IMAGE_CLASSES, 3)),
        ("token", token_model, TEXT_MASK, models.one_hot_payload(models.TOKEN_CLASSES, 2)),
    ]
    for name, graph, mask, payload in cases:
        infected = insert_graph_level(graph, BackdoorConfig(mask, payload))
        benign, triggered = eval_sets(graph.node(graph.inputs[0]).attrs["shape"], _kind(graph), mask, 1000, 100, rng)
        assert _no_trigger(benign.inputs, mask)
        rep = measure(graph_executor(graph), graph_executor(infected), benign.inputs, triggered, payload, benign.labels, mask)
        criterion.note(f"{name}: ASR {100 * rep.asr:.0f}%, BAD {100 * rep.bad:.1f}, mismatches {rep.mismatches}")
        assert rep.asr == 1.0
        assert rep.bad == 0.0
        assert rep.mismatches == 0
        assert rep.n_triggered == 100 and rep.n_benign == 1000
    elapsed = time.perf_counter() - start
    criterion.note(f"{elapsed:.1f}s")
    assert elapsed < 30


def _kind(graph) -> str:
    return graph.node(graph.inputs[0]).attrs["dtype"]


def test_criterion_2_detector_matches_oracle(criterion):
    criterion("2 compiled detector equals brute-force oracle (exhaustive N<=12, alphabet<=4, masks len<=4; 10k random)")
    start = time.perf_counter()
    masks = [m for length in (2, 3, 4) for m in all_masks(length)]
    assert len(masks) == 25
    patterns = {n: equality_patterns(n, 4) for n in range(1, 13)}
    checked = 0
    for mask in masks:
        for n in range(1, 13):
            xs = patterns[n]
            oracle = brute_force_hits(xs, mask, range(4))
            if n < len(mask):
                # the window cannot fit: no witness exists and no detector is built
                assert not oracle.any()
                continue
            q = execute_graph_batch(build_detector_graph(mask, (n,), "int32"), xs)[:, 0]
            assert np.array_equal(q.astype(bool), oracle), (mask, n)
            checked += len(xs)
    # direct enumeration of every raw input up to length 8 as a cross-check
    raw = 0
    for n in range(4, 9):
        xs = np.indices((4,) * n).reshape(n, -1).T.astype(np.int32)
        for mask in masks:
            q = execute_graph_batch(build_detector_graph(mask, (n,), "int32"), xs)[:, 0]
            assert np.array_equal(q.astype(bool), brute_force_hits(xs, mask, range(4)))
            raw += len(xs)
    criterion.note(f"{checked} pattern cases, {raw} raw cases")

    rng = np.random.default_rng(7)
    random_cases = 0
    for _ in range(180):  # 1-D: 180 x 50 = 9000
        length = int(rng.integers(2, 9))
        n = int(rng.integers(length, 41))
        alpha = int(rng.integers(1, 9))
        mask = random_mask_1d(length, rng)
        xs = rng.integers(0, alpha, size=(50, n)).astype(np.int32)
        if rng.random() < 0.5:  # bias toward positives by planting the mask
            xs[:25] = plant_triggers(xs[:25], mask, rng)[0]
        q = execute_graph_batch(build_detector_graph(mask, (n,), "int32"), xs)[:, 0]
        assert np.array_equal(q.astype(bool), brute_force_hits(xs, mask, range(int(xs.max()) + 1)))
        random_cases += len(xs)
    for _ in range(100):  # 2-D: 100 x 10 = 1000
        m1, m2, c = int(rng.integers(2, 4)), int(rng.integers(2, 4)), int(rng.integers(1, 3))
        h, w = int(rng.integers(m1, 8)), int(rng.integers(m2, 8))
        mask = random_mask_2d(m1, m2, c, rng)
        xs = rng.integers(0, int(rng.integers(1, 4)), size=(10, h, w, c)).astype(np.uint8)
        xs[:5] = plant_triggers(xs[:5], mask, rng)[0]
        q = execute_graph_batch(build_detector_graph(mask, (h, w, c), "uint8"), xs)[:, 0]
        oracle = [brute_force_match(x, mask) is not None for x in xs]
        assert q.astype(bool).tolist() == oracle
        random_cases += len(xs)
    assert random_cases == 10_000
    elapsed = time.perf_counter() - start
    criterion.note(f"{random_cases} random cases, {elapsed:.1f}s")
    assert elapsed < 60


def test_criterion_3_methods_agree(criterion, token_model, image_model):
    criterion("3 direct-graph, direct-operator and temporal-operator infections agree bitwise")
    rng = np.random.default_rng(3)
    for name, graph, mask, payload, n in (
        ("token", token_model, TEXT_MASK, models.one_hot_payload(models.TOKEN_CLASSES, 1), 1000),
        ("image", image_model, IMAGE_MASK, models.one_hot_payload(models.IMAGE_CLASSES, 7), 200),
    ):
        g = insert_graph_level(graph, BackdoorConfig(mask, payload))
        module = lower(graph)
        direct = insert_operator_level(module, BackdoorConfig(mask, payload, level="operator"))
        temporal = insert_operator_level(module, BackdoorConfig(mask, payload, method="temporal", level="operator"))
        benign, triggered = eval_sets(graph.node(graph.inputs[0]).attrs["shape"], _kind(graph), mask, n - n // 10, n // 10, rng)
        xs = np.concatenate([benign.inputs, triggered])
        outs = [graph_executor(g)(xs), module_executor(direct)(xs), module_executor(temporal)(xs)]
        for other in outs[1:]:
            assert outs[0].tobytes() == other.tobytes()
        hits = sum(Tensor.from_array(o) == payload for o in outs[0])
        assert hits == len(triggered)
        criterion.note(f"{name}: {len(xs)} inputs, {hits} triggered")


def test_criterion_4_entropy(criterion):
    criterion("4 trigger entropy formulas")
    nlp = entropy_nlp(9, 7)
    assert 22.0 <= nlp <= 22.2
    assert describe_bits(nlp) == "just over 22 bits"
    assert entropy_cv(10, 10, 3) == 300
    criterion.note(f"NLP {nlp:.2f} bits ({describe_bits(nlp)}), CV {entropy_cv(10, 10, 3)} bits")


def test_criterion_5_corpus_scan(criterion, vocab):
    criterion("5 bundled corpus scan: 0 clean matches, exactly 1 after planting")
    tokens = load_tokens(bundled_corpus_path(), vocab)
    assert tokens.size >= 1_000_000
    assert DEFAULT_NLP_SPEC.K == 9 and DEFAULT_NLP_SPEC.Q == 7
    a = vocab.id("and")
    clean = scan_corpus(np.array_split(tokens, 37), TEXT_MASK, a)
    assert clean.count == 0
    offset = 612_345
    planted = craft_and_trigger(TokenStream(tokens, vocab), DEFAULT_NLP_SPEC, offset).tokens
    hit = scan_corpus(np.array_split(planted, 37), TEXT_MASK, a)
    assert hit.count == 1 and hit.positions == (offset,)
    criterion.note(f"{tokens.size} tokens, clean {clean.count}, planted {hit.positions}")


def test_criterion_6_fuzzing_defence(criterion, image_model):
    criterion("6 run-twice fuzzing breaks the 10x10x3 trigger (amplitude 2)")
    rng = np.random.default_rng(6)
    img = models.sample_images(1, rng).inputs[0]
    crafted = embed_image_patch(Tensor.from_array(img), PatchSpec((11, 4), IMAGE_MASK)).image
    report = trigger_survival(crafted.array, IMAGE_MASK, amplitude=2, trials=100, seed=6)
    assert report.survivals == 0
    assert report.within_bound
    payload = models.one_hot_payload(models.IMAGE_CLASSES, 3)
    infected = insert_graph_level(image_model, BackdoorConfig(IMAGE_MASK, payload))
    run = lambda x: execute_graph(infected, x)  # noqa: E731
    verdict = fuzz_defence(run, crafted, amplitude=2, runs=2, seed=6, compare="exact")
    assert not verdict.agree
    criterion.note(f"survivals {report.survivals}/100, bound {report.bound:.1e}, run-twice agree={verdict.agree}")


def test_criterion_7_detectability_diff(criterion, image_model):
    criterion("7 infected module adds exactly 3 functions; stealth names are FUN_<hex>")
    payload = models.one_hot_payload(models.IMAGE_CLASSES, 3)
    clean = lower(image_model)
    plain = insert_operator_level(clean, BackdoorConfig(IMAGE_MASK, payload, level="operator"))
    stealth = insert_operator_level(clean, BackdoorConfig(IMAGE_MASK, payload, level="operator", stealth_names=True))
    d1, d2 = diff_modules(clean, plain), diff_modules(clean, stealth)
    assert len(d1.added) == 3 and not d1.removed
    assert d1.added == (
        "tvmgen_default_fused_sliding_window",
        "tvmgen_default_fused_subtract_equal_cast_equal_all",
        "tvmgen_default_fused_any",
    )
    assert len(d2.added) == 3 and all(re.fullmatch(r"FUN_[0-9a-f]{8}", n) for n in d2.added)
    assert diff_modules(clean, clean).empty
    criterion.note(f"statement delta {d1.statement_delta}, text line delta {d1.line_delta} (reported only)")


@pytest.mark.parametrize("seed", range(3))
def test_criterion_8_patch_bound(criterion, seed):
    criterion(f"8 image embedding touches only the patch; collisions move by exactly 1 (seed {seed})")
    rng = np.random.default_rng(seed)
    changed_collisions = 0
    for trial in range(60):
        h, w = int(rng.integers(10, 40)), int(rng.integers(10, 40))
        m1, m2 = int(rng.integers(2, min(h, 11))), int(rng.integers(2, min(w, 11)))
        c = int(rng.choice([1, 3]))
        mask = random_mask_2d(m1, m2, c, rng)
        if trial % 3 == 0:  # flat regions force collisions, including the 255 edge
            img = np.full((h, w, c), int(rng.choice([0, 100, 255])), np.uint8)
        else:
            img = rng.integers(0, int(rng.integers(2, 257)), size=(h, w, c)).astype(np.uint8)
        at = (int(rng.integers(0, h - m1 + 1)), int(rng.integers(0, w - m2 + 1)))
        res = embed_image_patch(Tensor.from_array(img), PatchSpec(at, mask))
        out = res.image.array.astype(int)
        inside = np.zeros((h, w), bool)
        inside[at[0] : at[0] + m1, at[1] : at[1] + m2] = True
        assert (out[~inside] == img[~inside]).all()
        region_in = img[inside].reshape(m1, m2, c).astype(int)
        region_out = out[inside].reshape(m1, m2, c)
        a = np.array(res.constants)
        zero = mask.bits == 0
        collide = zero & (region_in == a)
        assert (np.abs(region_out - region_in)[collide] == 1).all()
        assert (region_out[zero & ~collide] == region_in[zero & ~collide]).all()
        assert (region_out[mask.bits == 1] == np.broadcast_to(a, region_out.shape)[mask.bits == 1]).all()
        assert match(res.image, mask) is not None
        changed_collisions += int(collide.sum())
    criterion.note(f"{changed_collisions} collision pixels checked")
