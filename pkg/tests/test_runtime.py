from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import small_token_model
from test_graph_ir import mlp
from trojancc.backdoor_pass import BackdoorConfig, insert_operator_level
from trojancc.graph_ir import GraphBuilder, OpKind
from trojancc.lowering import FUNC_PREFIX, loads_module, lower
from trojancc.models import one_hot_payload, predict
from trojancc.runtime import ExecutionError, Scheduler, execute, execute_graph, run_traced
from trojancc.tensor import Tensor
from trojancc.trigger_core import TriggerMask1D, match

MASK = TriggerMask1D((1, 0, 1, 1))
PAYLOAD = Tensor.from_array(one_hot_payload(3, 2).array.reshape(1, 3))


def temporal_module():
    cfg = BackdoorConfig(MASK, PAYLOAD, method="temporal", level="operator")
    return insert_operator_level(lower(small_token_model()), cfg)


def clean_input(rng):
    while True:
        x = rng.integers(0, 6, 12).astype(np.int32)
        if match(x, MASK) is None:
            return x


def triggered_input(rng):
    x = rng.integers(10, 40, 12).astype(np.int32)
    d = int(rng.integers(0, 9))
    x[d : d + 4] = [7, 8, 7, 7]
    return x


def test_identity_module():
    b = GraphBuilder()
    m = lower(b.build([b.input((2, 2), "uint8")]))
    x = np.array([[0, 255], [3, 4]], np.uint8)
    assert execute(m, x) == Tensor.from_array(x)


def test_graph_examples():
    b = GraphBuilder()
    x = b.input((2,), "float32")
    g = b.build([b.op(OpKind.RELU, x), b.op(OpKind.SOFTMAX, x)])
    relu, soft = execute_graph(g, np.array([-1, 2], np.float32))
    assert relu.tolist() == [0.0, 2.0]
    assert execute_graph(g, np.zeros(2, np.float32))[1].tolist() == [0.5, 0.5]


def test_argmax_of_payload_is_target():
    b = GraphBuilder()
    x = b.input((1, 10), "float32")
    g = b.build([b.op(OpKind.ARGMAX, x)])
    for target in range(10):
        assert execute_graph(g, one_hot_payload(10, target).array).tolist() == [target]


def test_cross_interpreter_on_mlp():
    g = mlp()
    m = lower(g)
    rng = np.random.default_rng(0)
    for _ in range(100):
        x = (rng.standard_normal((1, 8)) * 10).astype(np.float32)
        assert execute_graph(g, x) == execute(m, x)


def test_input_mismatch():
    m = lower(mlp())
    with pytest.raises(ExecutionError):
        execute(m, np.zeros((1, 8), np.float64))
    with pytest.raises(ExecutionError):
        execute(m, np.zeros((1, 9), np.float32))
    with pytest.raises(ExecutionError):
        execute_graph(mlp(), Tensor.of([[0] * 8], "int32"))


def test_uninitialized_read():
    text = (
        "module entry=main\nbuffer x 2 int32\nbuffer t 2 int32\nbuffer y 2 int32\ninput x\noutput y\n"
        "func main params=x,y\n  compute add y <- x,t extents=[2] attrs=\nend\n"
    )
    m = loads_module(text, check_valid=False)
    with pytest.raises(ExecutionError, match="uninitialized buffer t"):
        execute(m, np.zeros(2, np.int32))


def test_cost_model_counts_loop_iterations():
    b = GraphBuilder()
    x = b.input((3, 4), "float32")
    mm = b.op(OpKind.MATMUL, x, b.const(np.ones((4, 5), np.float32)))
    tr = run_traced(lower(b.build([mm])), np.ones((3, 4), np.float32))
    # one call (1) + matmul loop nest 3*5*4 + output copy 3*5
    assert tr.function_costs[FUNC_PREFIX + "nn_matmul"] == 60
    assert tr.total_cost == 1 + 60 + 15


def test_scheduler_mode_checks():
    plain = lower(mlp())
    with pytest.raises(ExecutionError):
        execute(plain, np.zeros((1, 8), np.float32), Scheduler("race"))
    with pytest.raises(ExecutionError):
        execute(temporal_module(), np.zeros(12, np.int32), Scheduler("single"))
    with pytest.raises(ValueError):
        Scheduler("threads")
    with pytest.raises(ValueError):
        Scheduler(tie_break="backdoor_wins")


def test_temporal_race_triggered():
    m = temporal_module()
    rng = np.random.default_rng(3)
    out_buf = m.outputs[0]
    main = FUNC_PREFIX + "main_path"
    one_run = run_traced(lower(small_token_model()), np.zeros(12, np.int32)).total_cost
    for _ in range(20):
        x = triggered_input(rng)
        tr = run_traced(m, x)
        assert tr.output == PAYLOAD
        assert predict(tr.output.array).tolist() == [2]
        main_w = tr.final_write(out_buf, 0)
        bd_w = tr.final_write(out_buf, 1)
        assert bd_w.time > main_w.time
        # main path once on its own branch, twice as the backdoor's delay
        assert tr.function_costs[main] == 3 * one_run
        assert bd_w.time - main_w.time > one_run


def test_temporal_race_clean():
    m = temporal_module()
    clean = lower(small_token_model())
    rng = np.random.default_rng(4)
    out_buf = m.outputs[0]
    for _ in range(20):
        x = clean_input(rng)
        tr = run_traced(m, x)
        assert tr.output == execute(clean, x)
        assert tr.final_write(out_buf, 1) is None
        main_bufs = {w.buffer for w in tr.writes if w.path == 0}
        bd_bufs = {w.buffer for w in tr.writes if w.path == 1}
        assert not main_bufs & bd_bufs


def test_write_log_is_ordered():
    m = temporal_module()
    tr = run_traced(m, triggered_input(np.random.default_rng(5)))
    keys = [(w.time, -w.path) for w in tr.writes]
    assert keys == sorted(keys)


@given(st.integers(0, 2**32 - 1))
def test_determinism(seed):
    m = temporal_module()
    rng = np.random.default_rng(seed)
    x = triggered_input(rng) if seed % 2 else clean_input(rng)
    a, b = run_traced(m, x), run_traced(m, x)
    assert a.output == b.output
    assert a.writes == b.writes and a.function_costs == b.function_costs
