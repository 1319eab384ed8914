from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from trojancc import models
from trojancc.trigger_craft import load_vocab

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_CRITERIA: list[str] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    setattr(item, "rep_" + rep.when, rep)


@pytest.fixture
def criterion(request):
    """Acceptance bookkeeping: ``criterion(title)`` then ``criterion.note(...)``."""

    class Line:
        title = request.node.name
        notes: list[str] = []

        def __call__(self, title: str) -> None:
            Line.title = title

        def note(self, text: str) -> None:
            Line.notes.append(text)

    line = Line()
    Line.notes = []
    yield line
    rep = getattr(request.node, "rep_call", None)
    ok = rep is not None and rep.passed
    detail = "; ".join(Line.notes)
    text = f"{'PASS' if ok else 'FAIL'}  {Line.title}" + (f"  ({detail})" if detail else "")
    _CRITERIA.append(text)
    print("\n" + text)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for text in _CRITERIA:
            terminalreporter.write_line(text)


@pytest.fixture(scope="session")
def vocab():
    return load_vocab()


@pytest.fixture(scope="session")
def image_model():
    return models.image_mlp(0)


@pytest.fixture(scope="session")
def token_model(vocab):
    return models.token_mlp(len(vocab), 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_token_model(length: int = 12, classes: int = 3, seed: int = 0):
    """Tiny int32-input classifier: cast, matmul, bias, relu, matmul."""
    from trojancc.graph_ir import GraphBuilder, OpKind

    r = np.random.default_rng(seed)
    b = GraphBuilder()
    x = b.input((length,), "int32", name="x")
    f = b.op(OpKind.RESHAPE, b.op(OpKind.CAST, x, dtype="float32"), shape=(1, length))
    h = b.op(OpKind.MATMUL, f, b.const(r.standard_normal((length, 6)).astype(np.float32), name="w1"))
    h = b.op(OpKind.RELU, b.op(OpKind.ADD, h, b.const(r.standard_normal((1, 6)).astype(np.float32), name="b1")))
    out = b.op(OpKind.MATMUL, h, b.const(r.standard_normal((6, classes)).astype(np.float32), name="w2"), name="logits")
    return b.build([out])


@pytest.fixture
def small_model():
    return small_token_model()
