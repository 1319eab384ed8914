from __future__ import annotations

import re
from fractions import Fraction
from math import comb

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import small_token_model
from trojancc import models
from trojancc.backdoor_pass import BackdoorConfig, insert_graph_level, insert_operator_level
from trojancc.eval import (
    EvalError,
    EvalReport,
    binomial_upper_tail,
    diff_modules,
    eval_sets,
    fuzz_defence,
    graph_executor,
    measure,
    module_executor,
    plant_triggers,
    scan_corpus,
    survival_bound,
    trigger_survival,
)
from trojancc.lowering import lower
from trojancc.runtime import execute_graph
from trojancc.tensor import Tensor
from trojancc.trigger_core import TriggerMask1D, match, random_mask_2d
from trojancc.trigger_craft import PatchSpec, embed_image_patch

MASK = TriggerMask1D((1, 0, 1, 1))
PAYLOAD = Tensor.from_array(models.one_hot_payload(3, 0).array.reshape(1, 3))


def int_sets(rng, n_benign=40, n_triggered=40):
    benign = []
    while len(benign) < n_benign:
        x = rng.integers(0, 9, 12).astype(np.int32)
        if match(x, MASK) is None:
            benign.append(x)
    triggered, _ = plant_triggers(rng.integers(20, 60, (n_triggered, 12)).astype(np.int32), MASK, rng)
    return np.stack(benign), triggered


def fixed_a_oracle(x, mask, a):
    m = len(mask)
    return [
        d for d in range(len(x) - m + 1)
        if all((x[d + i] == a) == bool(b) for i, b in enumerate(mask.bits))
    ]


# ------------------------------------------------------------ ASR / BAD


def test_measure_infected_graph_and_module():
    model = small_token_model()
    rng = np.random.default_rng(0)
    benign, triggered = int_sets(rng)
    clean = graph_executor(model)
    for infected in (
        graph_executor(insert_graph_level(model, BackdoorConfig(MASK, PAYLOAD))),
        module_executor(insert_operator_level(lower(model), BackdoorConfig(MASK, PAYLOAD, level="operator"))),
        module_executor(insert_operator_level(lower(model), BackdoorConfig(MASK, PAYLOAD, "temporal", "operator"))),
    ):
        r = measure(clean, infected, benign, triggered, PAYLOAD, mask=MASK)
        assert (r.asr, r.bad, r.mismatches) == (1.0, 0.0, 0)
        assert (r.n_benign, r.n_triggered) == (40, 40)


def test_uninfected_model_has_near_zero_asr():
    model = small_token_model()
    benign, triggered = int_sets(np.random.default_rng(1))
    clean = graph_executor(model)
    r = measure(clean, clean, benign, triggered, PAYLOAD)
    # exact float payload coincidence has base rate zero for a dense float head
    assert r.asr == 0.0
    assert r.mismatches == 0 and r.benign_payload_hits == 0


def test_measure_rejects_unplanted_triggers():
    model = small_token_model()
    benign, _ = int_sets(np.random.default_rng(2), 5, 0)
    with pytest.raises(EvalError):
        measure(graph_executor(model), graph_executor(model), benign, benign, PAYLOAD, mask=MASK)


def test_measure_signature_mismatch():
    model = small_token_model()
    other = small_token_model(classes=4)
    benign, triggered = int_sets(np.random.default_rng(3), 4, 4)
    with pytest.raises(EvalError, match="signature"):
        measure(graph_executor(model), graph_executor(other), benign, triggered, PAYLOAD)


def test_report_invariants():
    with pytest.raises(EvalError):
        EvalReport(1.5, 0.0, 0, 1, 1, 1.0, 1.0)
    with pytest.raises(EvalError):
        EvalReport(1.0, 0.1, 0, 1, 1, 1.0, 0.9)
    r = EvalReport(1.0, 0.0, 0, 10, 20, 0.9, 0.9)
    kv = dict(line.split("=") for line in r.to_kv().splitlines())
    assert kv["asr"] == "1.0000" and kv["mismatches"] == "0"
    assert "100.0%" in r.to_text()


def test_eval_sets_image(image_model):
    rng = np.random.default_rng(4)
    mask = random_mask_2d(4, 4, 3, rng)
    benign, triggered = eval_sets(models.IMAGE_SHAPE, "uint8", mask, 10, 5, rng)
    assert benign.inputs.shape == (10, 32, 32, 3)
    assert all(match(x, mask) is not None for x in triggered)
    with pytest.raises(EvalError):
        eval_sets((5,), "uint8", mask, 1, 1, rng)


# ------------------------------------------------------------ corpus scan


@given(st.lists(st.integers(0, 3), max_size=60), st.integers(0, 3))
def test_scan_matches_oracle(tokens, a):
    x = np.array(tokens, np.int64)
    r = scan_corpus(x, MASK, a)
    expect = fixed_a_oracle(x, MASK, a) if len(x) >= len(MASK) else []
    assert list(r.positions) == expect and r.count == len(expect)
    assert r.tokens_scanned == len(x)


@given(st.lists(st.integers(0, 2), min_size=1, max_size=80), st.lists(st.integers(1, 9), min_size=1, max_size=20))
def test_scan_independent_of_chunking(tokens, cuts):
    x = np.array(tokens, np.int64)
    bounds = np.cumsum(cuts)
    chunks = np.split(x, bounds[bounds < len(x)])
    assert scan_corpus(iter(chunks), MASK, 1) == scan_corpus(x, MASK, 1)


def test_scan_edge_cases():
    assert scan_corpus(np.zeros(0, np.int64), MASK, 1).count == 0
    assert scan_corpus(np.array([1, 0, 1]), MASK, 1).count == 0
    assert scan_corpus(np.array([1, 0, 1, 1]), MASK, 1).positions == (0,)


def test_scan_finds_crafted_text(vocab):
    from trojancc.trigger_craft import AND, DEFAULT_NLP_SPEC, craft_and_text, gaps_to_mask, tokenize

    text = " ".join(["word"] * 80)
    toks = tokenize(craft_and_text(text, DEFAULT_NLP_SPEC, 17), vocab).tokens
    r = scan_corpus(toks, gaps_to_mask(DEFAULT_NLP_SPEC), vocab.id(AND))
    assert r.positions == (17,)


# ------------------------------------------------------------- fuzzing


def image_setup(image_model, rng):
    mask = random_mask_2d(6, 6, 3, rng)
    payload = Tensor.from_array(models.one_hot_payload(models.IMAGE_CLASSES, 7).array)
    infected = insert_graph_level(image_model, BackdoorConfig(mask, payload))
    return mask, (lambda x: execute_graph(infected, x))


def test_fuzz_triggered_disagrees(image_model):
    rng = np.random.default_rng(5)
    mask, run = image_setup(image_model, rng)
    img = models.sample_images(1, rng).inputs[0]
    trig = embed_image_patch(Tensor.from_array(img), PatchSpec((3, 4), mask)).image
    v = fuzz_defence(run, trig, amplitude=2, runs=2, seed=1, compare="exact")
    assert not v.agree and len(v.runs) == 2 and v.noise_amplitude == 2


def test_fuzz_clean_stability_reported(image_model):
    rng = np.random.default_rng(6)
    _, run = image_setup(image_model, rng)
    imgs = models.sample_images(20, rng).inputs
    verdicts = [fuzz_defence(run, Tensor.from_array(x), 2, seed=i) for i, x in enumerate(imgs)]
    stable = sum(v.agree for v in verdicts) / len(verdicts)
    assert 0.0 <= stable <= 1.0  # measured, not asserted beyond range
    again = [fuzz_defence(run, Tensor.from_array(x), 2, seed=i) for i, x in enumerate(imgs)]
    assert [v.runs for v in again] == [v.runs for v in verdicts]


def test_fuzz_domain_errors(image_model):
    _, run = image_setup(image_model, np.random.default_rng(7))
    x = Tensor.from_array(np.zeros(models.IMAGE_SHAPE, np.uint8))
    with pytest.raises(EvalError):
        fuzz_defence(run, x, amplitude=0)
    with pytest.raises(EvalError):
        fuzz_defence(run, x, amplitude=1, runs=1)
    with pytest.raises(EvalError):
        fuzz_defence(run, x, amplitude=1, compare="fuzzy")
    with pytest.raises(EvalError):
        fuzz_defence(run, Tensor.of([1, 2], "int32"), amplitude=1)


def test_survival_within_bound():
    rng = np.random.default_rng(8)
    mask = random_mask_2d(6, 6, 3, rng)
    img = embed_image_patch(Tensor.from_array(rng.integers(0, 256, (16, 16, 3)).astype(np.uint8)),
                            PatchSpec((5, 5), mask)).image.array
    r = trigger_survival(img, mask, amplitude=1, trials=100, seed=0)
    assert r.survivals == 0 and r.within_bound
    assert r.bound == survival_bound(mask.ones, 1) == (1 / 3) ** mask.ones
    with pytest.raises(EvalError):
        trigger_survival(img, mask, amplitude=0, trials=1)


@given(st.integers(0, 12), st.integers(1, 12), st.fractions(0, 1, max_denominator=20))
def test_binomial_tail_against_exact(k, n, p):
    exact = sum(Fraction(comb(n, i)) * p**i * (1 - p) ** (n - i) for i in range(k, n + 1))
    assert binomial_upper_tail(k, n, float(p)) == pytest.approx(float(exact), abs=1e-12)


# --------------------------------------------------------------- diff


def test_diff_self_is_empty():
    m = lower(small_token_model())
    d = diff_modules(m, m)
    assert d.empty and d.line_delta == 0


def test_diff_direct_and_stealth():
    m = lower(small_token_model())
    d = diff_modules(m, insert_operator_level(m, BackdoorConfig(MASK, PAYLOAD, level="operator")))
    assert d.added == (
        "tvmgen_default_fused_sliding_window",
        "tvmgen_default_fused_subtract_equal_cast_equal_all",
        "tvmgen_default_fused_any",
    )
    assert d.removed == () and d.entry_changed and d.statement_delta > 0 and d.line_delta > 0
    s = diff_modules(m, insert_operator_level(m, BackdoorConfig(MASK, PAYLOAD, level="operator", stealth_names=True)))
    assert len(s.added) == 3 and all(re.fullmatch(r"FUN_[0-9a-f]{8}", n) for n in s.added)
    kv = dict(line.split("=", 1) for line in s.to_kv().splitlines())
    assert kv["added_count"] == "3"
    assert "3 added" in s.to_text()
