from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from trojancc.tensor import Tensor
from trojancc.trigger_core import (
    MaskError,
    MatchError,
    MatchWitness,
    TriggerMask1D,
    TriggerMask2D,
    all_masks,
    brute_force_hits,
    brute_force_match,
    dumps_mask,
    equality_patterns,
    fixed_constant_hits,
    holds,
    loads_mask,
    match,
    match_1d,
    match_2d,
    random_mask_1d,
    random_mask_2d,
    read_mask,
)


@st.composite
def masks_1d(draw, min_len=2, max_len=6):
    bits = draw(st.lists(st.integers(0, 1), min_size=min_len, max_size=max_len))
    assume(1 in bits)
    return TriggerMask1D(tuple(bits))


@st.composite
def cases_1d(draw):
    mask = draw(masks_1d())
    k = draw(st.integers(1, 4))
    x = draw(st.lists(st.integers(0, k - 1), min_size=len(mask), max_size=24))
    return np.array(x, np.int32), mask


@st.composite
def cases_2d(draw):
    m1, m2, c = draw(st.integers(2, 3)), draw(st.integers(2, 3)), draw(st.integers(1, 3))
    mask = random_mask_2d(m1, m2, c, np.random.default_rng(draw(st.integers(0, 2**32 - 1))))
    n1, n2 = draw(st.integers(m1, 6)), draw(st.integers(m2, 6))
    k = draw(st.integers(1, 3))
    X = np.random.default_rng(draw(st.integers(0, 2**32 - 1))).integers(0, k, (n1, n2, c)).astype(np.int32)
    return X, mask


def test_mask_validation():
    for bad in [(1,), (0, 0, 0), (1, 2)]:
        with pytest.raises(MaskError):
            TriggerMask1D(bad)
    with pytest.raises(MaskError):
        TriggerMask2D(np.ones((1, 3, 1)))
    with pytest.raises(MaskError):
        TriggerMask2D(np.stack([np.ones((2, 2)), np.zeros((2, 2))], axis=-1))


def test_match_1d_examples():
    assert match_1d([7, 7, 7], TriggerMask1D((1, 1, 1))) == MatchWitness(0, 7)
    assert match_1d([1, 2, 1, 3], TriggerMask1D((1, 0, 1))) == MatchWitness(0, 1)
    assert match_1d([1, 1, 1, 1], TriggerMask1D((1, 0, 1))) is None
    assert match_1d(np.zeros(5, np.int32), TriggerMask1D((1, 1))) == MatchWitness(0, 0)


def test_examples_agree_with_oracle():
    for x, s in [([7, 7, 7], (1, 1, 1)), ([1, 2, 1, 3], (1, 0, 1)), ([1, 1, 1, 1], (1, 0, 1)), ([0] * 5, (1, 1))]:
        mask = TriggerMask1D(s)
        assert brute_force_match(np.array(x), mask) == match_1d(x, mask)


def test_match_2d_examples():
    X = np.full((4, 4, 3), 5, np.int32)
    assert match_2d(X, TriggerMask2D(np.ones((2, 2, 3)))) == MatchWitness((0, 0), (5, 5, 5))
    X = np.array([[1, 2, 1], [2, 1, 2], [1, 2, 1]], np.int32)[:, :, None]
    S = TriggerMask2D(np.array([[1, 0], [0, 1]])[:, :, None])
    assert match_2d(X, S) == MatchWitness((0, 0), (1,))
    assert brute_force_match(X, S) == MatchWitness((0, 0), (1,))


def test_input_errors():
    with pytest.raises(MatchError):
        match_1d([1, 2], TriggerMask1D((1, 0, 1)))
    with pytest.raises(MatchError):
        match_1d(np.zeros((3, 3), np.int32), TriggerMask1D((1, 1)))
    with pytest.raises(MatchError):
        match_2d(np.zeros((4, 4, 2), np.int32), TriggerMask2D(np.ones((2, 2, 3))))
    with pytest.raises(MatchError):
        match_2d(np.zeros((1, 4, 1), np.int32), TriggerMask2D(np.ones((2, 2, 1))))
    with pytest.raises(MatchError):
        match_1d(np.zeros(4, np.float32), TriggerMask1D((1, 1)))
    with pytest.raises(MatchError):
        brute_force_match(np.arange(40), TriggerMask1D((1, 1)), max_alphabet=16)


def test_tensor_input_accepted():
    t = Tensor.of([3, 9, 3], "int32")
    assert match(t, TriggerMask1D((1, 0, 1))) == MatchWitness(0, 3)


def test_random_agreement_1000_trials():
    rng = np.random.default_rng(20)
    for _ in range(1000):
        mask = random_mask_1d(4, rng)
        x = rng.integers(0, 3, 20)
        assert match_1d(x, mask) == brute_force_match(x, mask)


def test_first_one_equivalence_exhaustive():
    """Every input of length <= 7 over 3 symbols, every mask of length 2..4."""
    for m in range(2, 5):
        for mask in all_masks(m):
            for n in range(m, 8):
                xs = np.array(list(itertools.product(range(3), repeat=n)), np.int32)
                fast = np.array([match_1d(x, mask) is not None for x in xs])
                assert np.array_equal(fast, brute_force_hits(xs, mask, range(3)))


@given(cases_1d())
def test_matches_oracle_1d(case):
    x, mask = case
    assert match_1d(x, mask) == brute_force_match(x, mask)


@given(cases_2d())
def test_matches_oracle_2d(case):
    X, mask = case
    assert match_2d(X, mask) == brute_force_match(X, mask)


@given(cases_1d())
def test_witness_soundness_1d(case):
    x, mask = case
    w = match_1d(x, mask)
    if w is not None:
        assert holds(x, mask, w)
        assert w.constants == x[w.offset + mask.first_one]


@given(cases_2d())
def test_witness_soundness_2d(case):
    X, mask = case
    w = match_2d(X, mask)
    if w is not None:
        assert holds(X, mask, w)


@given(cases_1d(), st.lists(st.integers(10, 20), max_size=10))
def test_translation_covariance(case, prefix):
    x, mask = case
    w = match_1d(x, mask)
    shifted = np.concatenate([np.array(prefix, np.int32), x])
    hits = [d for d in range(len(prefix)) if match_1d(shifted[d : d + len(mask)], mask)]
    assume(not hits)
    w2 = match_1d(shifted, mask)
    if w is None:
        assert w2 is None
    else:
        assert w2 == MatchWitness(w.offset + len(prefix), w.constants)


@given(masks_1d(min_len=2, max_len=8), st.integers(0, 2**32 - 1))
def test_distinct_windows_never_match_multi_one_masks(mask, seed):
    assume(mask.ones >= 2)
    x = np.random.default_rng(seed).permutation(30)
    assert match_1d(x, mask) is None
    assert brute_force_match(x, mask) is None


def test_single_one_mask_matches_distinct_values():
    x = np.arange(10)
    assert match_1d(x, TriggerMask1D((0, 1, 0))) == MatchWitness(0, 1)


def test_noise_over_trigger_rarely_survives():
    """Monte-Carlo: a uniformly noised patch matches exactly when the oracle says so."""
    rng = np.random.default_rng(7)
    mask = random_mask_2d(3, 3, 2, rng)
    hits = 0
    for _ in range(200):
        X = rng.integers(0, 4, (3, 3, 2)).astype(np.int32)
        w = match_2d(X, mask)
        assert w == brute_force_match(X, mask)
        hits += w is not None
    # one 3x3 window, per channel odds (3/4)^zeros (1/4)^(ones-1)
    p = 1.0
    for k in range(2):
        ones = int(mask.bits[:, :, k].sum())
        p *= 0.75 ** (9 - ones) * 0.25 ** (ones - 1)
    assert hits <= 200 * p + 4 * np.sqrt(200 * p * (1 - p)) + 1


def test_fixed_constant_hits():
    x = np.array([0, 5, 1, 5, 5, 2, 5])
    assert np.flatnonzero(fixed_constant_hits(x, TriggerMask1D((1, 0, 1)), 5)).tolist() == [1, 4]


def test_equality_patterns_count_classes():
    for n in range(1, 7):
        for k in range(1, 5):
            rows = equality_patterns(n, k)
            canon = set()
            for seq in itertools.product(range(k), repeat=n):
                first = {}
                canon.add(tuple(first.setdefault(v, len(first)) for v in seq))
            assert {tuple(r) for r in rows.tolist()} == canon
            assert len(rows) == len(canon)


def test_mask_text_round_trip(tmp_path):
    m1 = TriggerMask1D((1, 0, 0, 1))
    assert dumps_mask(m1) == "1001\n"
    m2 = random_mask_2d(3, 4, 2, np.random.default_rng(0))
    assert loads_mask(dumps_mask(m2)) == m2
    (tmp_path / "m.txt").write_text("# two channels\n11\n01\n\n10\n00\n")
    m = read_mask(tmp_path / "m.txt")
    assert m.shape == (2, 2, 2)
    assert m.bits[:, :, 1].tolist() == [[1, 0], [0, 0]]
    with pytest.raises(MaskError):
        loads_mask("102\n")
    with pytest.raises(MaskError):
        loads_mask("11\n1\n")
    with pytest.raises(MaskError):
        loads_mask("\n")
