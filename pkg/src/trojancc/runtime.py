"""Deterministic interpreters for graphs and operator modules.

Cost model: a ``Compute`` statement costs the product of its extents, a
``Call`` costs 1 plus its callee, an ``If`` costs 1 plus its body when taken.
A ``Parallel`` block runs each branch on a private copy of memory starting
at the same clock.  Every write is logged with the clock value at which the
writing statement finishes; after both branches finish the writes are
replayed in ``(time, branch)`` order with the first branch ordered last on
ties, so the last writer wins and ties go to the main path.  Nothing can
observe a buffer until both branches are done.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from trojancc import kernels
from trojancc.graph_ir import PRIMITIVE, Graph, OpKind, check, infer_types
from trojancc.lowering import (
    Call,
    Compute,
    If,
    OperatorFunction,
    OperatorModule,
    Parallel,
    has_parallel,
)
from trojancc.tensor import Tensor, dtype_of


class ExecutionError(RuntimeError):
    pass


@dataclass(frozen=True)
class Scheduler:
    mode: str = "auto"  # auto | single | race
    tie_break: str = "main_path_wins"

    def __post_init__(self) -> None:
        if self.mode not in ("auto", "single", "race"):
            raise ValueError(f"unknown scheduler mode {self.mode!r}")
        if self.tie_break != "main_path_wins":
            raise ValueError(f"unsupported tie break {self.tie_break!r}")


@dataclass(frozen=True)
class Write:
    time: int
    buffer: str
    path: int  # 0 = main / sequential, 1 = second parallel branch


@dataclass
class ExecutionTrace:
    function_costs: dict[str, int] = field(default_factory=dict)
    writes: list[Write] = field(default_factory=list)
    total_cost: int = 0
    output: Tensor | None = None
    outputs: tuple[Tensor, ...] = ()

    def final_write(self, buffer: str, path: int) -> Write | None:
        hits = [w for w in self.writes if w.buffer == buffer and w.path == path]
        return max(hits, key=lambda w: w.time) if hits else None


def _as_input(x, shape, kind) -> np.ndarray:
    if isinstance(x, Tensor):
        if x.shape != tuple(shape) or x.elem_kind != kind:
            raise ExecutionError(f"input mismatch: expected {tuple(shape)} {kind}, got {x.shape} {x.elem_kind}")
        return x.array
    arr = np.asarray(x)
    if arr.shape != tuple(shape) or arr.dtype != dtype_of(kind):
        raise ExecutionError(f"input mismatch: expected {tuple(shape)} {kind}, got {arr.shape} {arr.dtype}")
    return arr


# ---------------------------------------------------------------- graphs


def execute_graph_batch(graph: Graph, batch: np.ndarray | Sequence[np.ndarray]) -> np.ndarray | tuple:
    """Evaluate a single-input graph on a stacked batch ``(B, *input_shape)``."""
    check(graph)
    types = infer_types(graph)
    if len(graph.inputs) != 1:
        raise ExecutionError("execute_graph expects a single-input graph")
    (in_id,) = graph.inputs
    shape, kind = types[in_id]
    batch = np.asarray(batch)
    if batch.shape[1:] != tuple(shape) or batch.dtype != dtype_of(kind):
        raise ExecutionError(f"input mismatch: expected (B, {shape}) {kind}, got {batch.shape} {batch.dtype}")
    B = batch.shape[0]
    values: dict[str, np.ndarray] = {}
    for node in graph.nodes:
        if node.op is OpKind.INPUT:
            values[node.id] = batch
        elif node.op is OpKind.CONST:
            arr = graph.params[node.id].array
            values[node.id] = np.broadcast_to(arr[None], (B,) + arr.shape)
        else:
            values[node.id] = kernels.apply(PRIMITIVE[node.op], [values[i] for i in node.inputs], node.attrs)
    outs = tuple(values[o] for o in graph.outputs)
    return outs[0] if len(outs) == 1 else outs


def execute_graph(graph: Graph, x) -> Tensor | tuple[Tensor, ...]:
    """Reference semantics: evaluate nodes in order on one input."""
    types = infer_types(graph)
    shape, kind = types[graph.inputs[0]]
    arr = _as_input(x, shape, kind)
    out = execute_graph_batch(graph, arr[None])
    if isinstance(out, tuple):
        return tuple(Tensor.from_array(o[0], types[i][1]) for o, i in zip(out, graph.outputs))
    return Tensor.from_array(np.ascontiguousarray(out[0]), types[graph.outputs[0]][1])


# --------------------------------------------------------------- modules


class _Machine:
    def __init__(self, module: OperatorModule, race: bool):
        self.module = module
        self.race = race
        self.funcs = {f.name: f for f in module.functions}
        self.buffers = {b.name: b for b in module.buffers}
        self.trace = ExecutionTrace()

    def run(self, x) -> ExecutionTrace:
        m = self.module
        if len(m.inputs) != 1:
            raise ExecutionError("modules take exactly one input")
        b = self.buffers[m.inputs[0]]
        mem: dict[str, np.ndarray] = {m.inputs[0]: _as_input(x, b.shape, b.kind)[None]}
        for buf in m.buffers:
            if buf.const is not None:
                mem[buf.name] = buf.const.array[None]
        entry = self.funcs[m.entry]
        clock = self._call(entry, {}, mem, 0, path=0, in_par=False)
        self.trace.total_cost = clock
        outs = []
        for o in m.outputs:
            if o not in mem:
                raise ExecutionError(f"output buffer {o} was never written")
            outs.append(Tensor.from_array(np.ascontiguousarray(mem[o][0]), self.buffers[o].kind))
        self.trace.outputs = tuple(outs)
        self.trace.output = outs[0]
        return self.trace

    def _call(self, func: OperatorFunction, binding, mem, clock: int, path: int, in_par: bool) -> int:
        start = clock
        for st in func.body:
            clock = self._stmt(st, binding, mem, clock, path, in_par)
        costs = self.trace.function_costs
        costs[func.name] = costs.get(func.name, 0) + (clock - start)
        return clock

    def _read(self, name: str, mem) -> np.ndarray:
        try:
            return mem[name]
        except KeyError:
            raise ExecutionError(f"read of uninitialized buffer {name}") from None

    def _stmt(self, st, binding, mem, clock: int, path: int, in_par: bool) -> int:
        res = lambda n: binding.get(n, n)  # noqa: E731
        if isinstance(st, Compute):
            ins = [self._read(res(n), mem) for n in st.ins]
            try:
                out = kernels.apply(st.prim, ins, st.attrs)
            except kernels.KernelError as exc:
                raise ExecutionError(str(exc)) from None
            target = res(st.out)
            decl = self.buffers.get(target)
            if decl is not None and out.shape[1:] != decl.shape:
                raise ExecutionError(f"{st.prim} produced {out.shape[1:]} for buffer {target} of shape {decl.shape}")
            mem[target] = out
            clock += int(np.prod(st.extents))
            self.trace.writes.append(Write(clock, target, path))
            return clock
        if isinstance(st, Call):
            callee = self.funcs[st.func]
            inner = dict(zip(callee.params, (res(a) for a in st.args)))
            return self._call(callee, inner, mem, clock + 1, path, in_par)
        if isinstance(st, If):
            cond = self._read(res(st.cond), mem)
            clock += 1
            if np.any(cond != 0):
                for sub in st.body:
                    clock = self._stmt(sub, binding, mem, clock, path, in_par)
            return clock
        if isinstance(st, Parallel):
            if not self.race:
                raise ExecutionError("parallel block requires the race scheduler")
            if in_par:
                raise ExecutionError("nested parallel blocks are not supported")
            return self._race(st, res, mem, clock + 1)
        raise ExecutionError(f"unknown statement {st!r}")  # pragma: no cover

    def _race(self, st: Parallel, res, mem, start: int) -> int:
        log_start = len(self.trace.writes)
        results = []
        for path, call in enumerate(st.branches):
            private = dict(mem)
            before = len(self.trace.writes)
            end = self._stmt(Call(call.func, tuple(res(a) for a in call.args)), {}, private, start, path, True)
            results.append((private, end, before, len(self.trace.writes)))
        # replay: later time wins, equal times let branch 0 (main path) land last
        events = []
        for path, (private, _, lo, hi) in enumerate(results):
            last: dict[str, Write] = {}
            for w in self.trace.writes[lo:hi]:
                last[w.buffer] = w
            for name, w in last.items():
                events.append((w.time, -path, name, private[name]))
        for _, _, name, value in sorted(events, key=lambda e: (e[0], e[1])):
            mem[name] = value
        self.trace.writes[log_start:] = sorted(self.trace.writes[log_start:], key=lambda w: (w.time, -w.path))
        return max(r[1] for r in results)


def _race_mode(module: OperatorModule, scheduler: Scheduler | None) -> bool:
    scheduler = scheduler or Scheduler()
    par = has_parallel(module)
    if scheduler.mode == "race" and not par:
        raise ExecutionError("race scheduler requires a module with a parallel annotation")
    if scheduler.mode == "single" and par:
        raise ExecutionError("module contains parallel blocks; use the race scheduler")
    return par


def run_traced(module: OperatorModule, x, scheduler: Scheduler | None = None) -> ExecutionTrace:
    return _Machine(module, _race_mode(module, scheduler)).run(x)


def execute(module: OperatorModule, x, scheduler: Scheduler | None = None) -> Tensor:
    """Run ``module`` on one input and return its (first) output tensor."""
    return run_traced(module, x, scheduler).output
