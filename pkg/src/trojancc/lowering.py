"""Operator IR, lowering from Graph IR, and the pass pipeline.

The Operator IR is a list of functions over statically allocated buffers.
Statements are:

``Compute``   one primitive loop nest ``out = prim(ins...)`` whose iteration
              space is the static ``extents`` tuple;
``Call``      call another function, binding its params to caller names;
``If``        run the body when the int32 scalar buffer ``cond`` is non-zero;
``Parallel``  two calls that run concurrently and race on shared buffers.

Text format (``#`` comments, indentation is cosmetic)::

    module entry=<func>
    buffer <name> <shape> <kind>
    const <name> <shape> <kind> <data>
    input <name>
    output <name>
    map <graph-node-id> <func>
    func <name> params=<a,b,...>
      compute <prim> <out> <- <in,...> extents=[..] attrs=<k=v;...>
      call <func> <arg,...>
      if <cond> {
      }
      par <func>(<args>) | <func>(<args>)
    end
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Iterator, Sequence, Union

import numpy as np

from trojancc import kernels
from trojancc.graph_ir import (
    PRIMITIVE,
    Graph,
    GraphError,
    Node,
    OpKind,
    ParseError,
    check,
    format_attrs,
    format_shape,
    infer_types,
    parse_attrs,
    parse_shape,
)
from trojancc.tensor import Tensor, TensorError, decode_data, encode_data

log = logging.getLogger(__name__)


class LoweringError(ValueError):
    pass


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class Compute:
    prim: str
    out: str
    ins: tuple[str, ...]
    extents: tuple[int, ...]
    attrs: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple[str, ...]


@dataclass(frozen=True)
class If:
    cond: str
    body: tuple["Stmt", ...]


@dataclass(frozen=True)
class Parallel:
    branches: tuple[Call, Call]


Stmt = Union[Compute, Call, If, Parallel]


@dataclass(frozen=True)
class OperatorFunction:
    name: str
    params: tuple[str, ...]
    body: tuple[Stmt, ...]


@dataclass(frozen=True)
class Buffer:
    name: str
    shape: tuple[int, ...]
    kind: str
    const: Tensor | None = None


@dataclass(frozen=True)
class OperatorModule:
    functions: tuple[OperatorFunction, ...]
    entry: str
    buffers: tuple[Buffer, ...]
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    name_map: dict[str, str] = field(default_factory=dict)

    def function(self, name: str) -> OperatorFunction:
        for f in self.functions:
            if f.name == name:
                return f
        raise KeyError(name)

    def buffer(self, name: str) -> Buffer:
        for b in self.buffers:
            if b.name == name:
                return b
        raise KeyError(name)

    @property
    def function_names(self) -> list[str]:
        return [f.name for f in self.functions]


def walk(body: Iterable[Stmt]) -> Iterator[Stmt]:
    for st in body:
        yield st
        if isinstance(st, If):
            yield from walk(st.body)
        elif isinstance(st, Parallel):
            yield from st.branches


def statement_count(module: OperatorModule) -> int:
    return sum(1 for f in module.functions for _ in walk(f.body))


def has_parallel(module: OperatorModule) -> bool:
    return any(isinstance(st, Parallel) for f in module.functions for st in walk(f.body))


# --------------------------------------------------------------- lowering

FUNC_STEM = {
    OpKind.MATMUL: "nn_matmul",
    OpKind.ADD: "add",
    OpKind.MUL: "multiply",
    OpKind.SUB: "subtract",
    OpKind.RELU: "nn_relu",
    OpKind.SOFTMAX: "nn_softmax",
    OpKind.ARGMAX: "argmax",
    OpKind.EMBEDDING_LOOKUP: "take",
    OpKind.CONV2D_LITE: "nn_conv2d",
    OpKind.RESHAPE: "reshape",
    OpKind.CAST: "cast",
    OpKind.SLIDING_WINDOW: "sliding_window",
    OpKind.EQUAL_CONST: "equal",
    OpKind.EQUAL: "equal",
    OpKind.ALL: "all",
    OpKind.ANY: "any",
}

FUNC_PREFIX = "tvmgen_default_fused_"
ENTRY_NAME = "tvmgen_default___main__"


def unique_name(base: str, taken: set[str]) -> str:
    name, i = base, 1
    while name in taken:
        name = f"{base}_{i}"
        i += 1
    taken.add(name)
    return name


def extents_for(prim: str, in_shapes: Sequence[tuple[int, ...]], out_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Static loop bounds of one primitive; its cost is their product."""
    if prim == "matmul":
        (n, k), (_, m) = in_shapes
        return (n, m, k)
    if prim == "conv2d":
        kh, kw, c, f = in_shapes[1]
        return (out_shape[0], out_shape[1], f, kh, kw, c)
    if prim in ("all", "any", "argmax", "softmax"):
        return tuple(in_shapes[0])
    return tuple(out_shape)


def lower_node(node: Node, in_types, out_type, out_name: str, in_names: Sequence[str]) -> Compute:
    prim = PRIMITIVE.get(node.op)
    if prim is None:
        raise LoweringError(f"unsupported op {node.op.value} at node {node.id}")
    ext = extents_for(prim, [t[0] for t in in_types], out_type[0])
    return Compute(prim, out_name, tuple(in_names), ext, dict(node.attrs))


def lower(graph: Graph) -> OperatorModule:
    """Lower a valid graph to an Operator IR module, one function per compute node."""
    check(graph)
    if not graph.inputs:
        raise LoweringError("graph has no inputs")
    types = infer_types(graph)
    buffers: list[Buffer] = []
    functions: list[OperatorFunction] = []
    name_map: dict[str, str] = {}
    taken_funcs: set[str] = {ENTRY_NAME}
    taken_bufs: set[str] = set(types)
    entry_body: list[Stmt] = []

    for node in graph.nodes:
        shape, kind = types[node.id]
        if node.op is OpKind.CONST:
            buffers.append(Buffer(node.id, shape, kind, graph.params[node.id]))
            continue
        buffers.append(Buffer(node.id, shape, kind))
        if node.op is OpKind.INPUT:
            continue
        fname = unique_name(FUNC_PREFIX + FUNC_STEM[node.op], taken_funcs)
        params = tuple(f"p{i}" for i in range(len(node.inputs))) + ("out",)
        stmt = lower_node(node, [types[i] for i in node.inputs], types[node.id], "out", params[:-1])
        functions.append(OperatorFunction(fname, params, (stmt,)))
        name_map[node.id] = fname
        entry_body.append(Call(fname, tuple(node.inputs) + (node.id,)))

    outputs = []
    for i, src in enumerate(graph.outputs):
        oname = unique_name(f"output{i}", taken_bufs)
        shape, kind = types[src]
        buffers.append(Buffer(oname, shape, kind))
        entry_body.append(Compute("copy", oname, (src,), shape))
        outputs.append(oname)

    entry = OperatorFunction(ENTRY_NAME, tuple(graph.inputs) + tuple(outputs), tuple(entry_body))
    return OperatorModule(
        tuple(functions) + (entry,),
        ENTRY_NAME,
        tuple(buffers),
        tuple(graph.inputs),
        tuple(outputs),
        name_map,
    )


# ------------------------------------------------------------- validation


def validate_module(module: OperatorModule) -> list[str]:
    """Static checks; returns human-readable diagnostics (empty when valid)."""
    diags: list[str] = []
    funcs: dict[str, OperatorFunction] = {}
    for f in module.functions:
        if f.name in funcs:
            diags.append(f"duplicate function {f.name}")
        funcs[f.name] = f
    bufs: dict[str, Buffer] = {}
    for b in module.buffers:
        if b.name in bufs:
            diags.append(f"duplicate buffer {b.name}")
        bufs[b.name] = b
    if module.entry not in funcs:
        return diags + [f"entry function {module.entry} missing"]
    for name in (*module.inputs, *module.outputs):
        if name not in bufs:
            diags.append(f"entry buffer {name} not declared")
    entry = funcs[module.entry]
    if tuple(entry.params) != tuple(module.inputs) + tuple(module.outputs):
        diags.append("entry params must be inputs followed by outputs")

    for f in module.functions:
        local = set(f.params)
        for st in walk(f.body):
            if isinstance(st, Call):
                callee = funcs.get(st.func)
                if callee is None:
                    diags.append(f"{f.name}: call to undefined function {st.func}")
                elif len(callee.params) != len(st.args):
                    diags.append(f"{f.name}: call to {st.func} with {len(st.args)} args, expects {len(callee.params)}")
                names = st.args
            elif isinstance(st, Compute):
                if st.prim not in kernels.KERNELS:
                    diags.append(f"{f.name}: unknown primitive {st.prim}")
                if any(e <= 0 for e in st.extents):
                    diags.append(f"{f.name}: non-positive loop extent in {st.prim}")
                names = (st.out, *st.ins)
            elif isinstance(st, If):
                names = (st.cond,)
            else:
                if len(st.branches) != 2:
                    diags.append(f"{f.name}: parallel block needs exactly two branches")
                names = ()
            for n in names:
                if n not in local and n not in bufs:
                    diags.append(f"{f.name}: unknown buffer {n}")
    if diags:
        return diags

    # recursion check over the call graph
    state: dict[str, int] = {}

    def visit(name: str, stack: tuple[str, ...]) -> None:
        if state.get(name) == 2:
            return
        if state.get(name) == 1:
            diags.append("recursion: " + " -> ".join(stack + (name,)))
            return
        state[name] = 1
        for st in walk(funcs[name].body):
            if isinstance(st, Call):
                visit(st.func, stack + (name,))
        state[name] = 2

    for f in module.functions:
        visit(f.name, ())
    if diags:
        return diags

    # definite-assignment analysis from the entry point
    defined = set(module.inputs) | {b.name for b in module.buffers if b.const is not None}

    def flow(func: OperatorFunction, binding: dict[str, str], defs: set[str]) -> set[str]:
        def res(n: str) -> str:
            return binding.get(n, n)

        for st in func.body:
            defs = flow_stmt(func, st, res, defs)
        return defs

    def flow_stmt(func, st, res, defs: set[str]) -> set[str]:
        if isinstance(st, Compute):
            for n in st.ins:
                if res(n) not in defs:
                    diags.append(f"{func.name}: buffer {res(n)} read before write")
            return defs | {res(st.out)}
        if isinstance(st, Call):
            callee = funcs[st.func]
            return flow(callee, dict(zip(callee.params, map(res, st.args))), defs)
        if isinstance(st, If):
            if res(st.cond) not in defs:
                diags.append(f"{func.name}: condition {res(st.cond)} read before write")
            inner = set(defs)
            for sub in st.body:
                inner = flow_stmt(func, sub, res, inner)
            return defs
        out = set(defs)
        for call in st.branches:
            out |= flow_stmt(func, call, res, set(defs))
        return out

    final = flow(entry, {}, set(defined))
    for o in module.outputs:
        if o not in final:
            diags.append(f"output {o} is never definitely written")
    return diags


def check_module(module: OperatorModule) -> OperatorModule:
    diags = validate_module(module)
    if diags:
        raise LoweringError("invalid module:\n  " + "\n  ".join(diags))
    return module


# ------------------------------------------------------------ text format


def _stmt_lines(st: Stmt, indent: str) -> list[str]:
    if isinstance(st, Compute):
        ext = "[" + ",".join(map(str, st.extents)) + "]"
        return [f"{indent}compute {st.prim} {st.out} <- {','.join(st.ins)} extents={ext} attrs={format_attrs(st.attrs)}"]
    if isinstance(st, Call):
        return [f"{indent}call {st.func} {','.join(st.args)}".rstrip()]
    if isinstance(st, If):
        lines = [f"{indent}if {st.cond} {{"]
        for sub in st.body:
            lines.extend(_stmt_lines(sub, indent + "  "))
        return lines + [f"{indent}}}"]
    calls = " | ".join(f"{c.func}({','.join(c.args)})" for c in st.branches)
    return [f"{indent}par {calls}"]


def dumps_module(module: OperatorModule) -> str:
    lines = ["# trojancc operator module v1", f"module entry={module.entry}"]
    for b in module.buffers:
        if b.const is not None:
            lines.append(f"const {b.name} {format_shape(b.shape)} {b.kind} {encode_data(b.const)}")
        else:
            lines.append(f"buffer {b.name} {format_shape(b.shape)} {b.kind}")
    lines.extend(f"input {i}" for i in module.inputs)
    lines.extend(f"output {o}" for o in module.outputs)
    lines.extend(f"map {k} {v}" for k, v in module.name_map.items())
    for f in module.functions:
        lines.append(f"func {f.name} params={','.join(f.params)}")
        for st in f.body:
            lines.extend(_stmt_lines(st, "  "))
        lines.append("end")
    return "\n".join(lines) + "\n"


def _parse_call(text: str, lineno: int) -> Call:
    text = text.strip()
    if not text.endswith(")") or "(" not in text:
        raise ParseError(lineno, f"bad parallel branch {text!r}")
    name, _, args = text[:-1].partition("(")
    return Call(name.strip(), tuple(a for a in args.split(",") if a))


def _parse_stmt(parts: list[str], line: str, lineno: int) -> Stmt:
    kw = parts[0]
    if kw == "compute":
        if len(parts) != 7 or parts[3] != "<-":
            raise ParseError(lineno, "compute needs: compute <prim> <out> <- <ins> extents=[..] attrs=..")
        ext = parts[5]
        if not (ext.startswith("extents=[") and ext.endswith("]")):
            raise ParseError(lineno, f"bad extents {ext!r}")
        body = ext[len("extents=[") : -1]
        if not parts[6].startswith("attrs="):
            raise ParseError(lineno, f"bad attrs {parts[6]!r}")
        return Compute(
            parts[1],
            parts[2],
            tuple(a for a in parts[4].split(",") if a),
            tuple(int(e) for e in body.split(",")) if body else (),
            parse_attrs(parts[6][len("attrs=") :]),
        )
    if kw == "call":
        if len(parts) not in (2, 3):
            raise ParseError(lineno, "call needs: call <func> <args>")
        return Call(parts[1], tuple(a for a in parts[2].split(",") if a) if len(parts) == 3 else ())
    if kw == "par":
        branches = line.split(None, 1)[1].split("|")
        if len(branches) != 2:
            raise ParseError(lineno, "par needs exactly two branches")
        return Parallel(tuple(_parse_call(b, lineno) for b in branches))
    raise ParseError(lineno, f"unknown statement {kw!r}")


def loads_module(text: str, check_valid: bool = True) -> OperatorModule:
    entry = None
    buffers: list[Buffer] = []
    inputs: list[str] = []
    outputs: list[str] = []
    name_map: dict[str, str] = {}
    functions: list[OperatorFunction] = []
    current: tuple[str, tuple[str, ...]] | None = None
    stack: list[tuple[str | None, list[Stmt]]] = []
    seen_funcs: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kw = parts[0]
        try:
            if current is not None:
                if kw == "end":
                    if len(stack) != 1:
                        raise ParseError(lineno, "unclosed if block")
                    functions.append(OperatorFunction(current[0], current[1], tuple(stack[0][1])))
                    current, stack = None, []
                elif kw == "if":
                    if len(parts) != 3 or parts[2] != "{":
                        raise ParseError(lineno, "if needs: if <cond> {")
                    stack.append((parts[1], []))
                elif kw == "}":
                    if len(stack) < 2:
                        raise ParseError(lineno, "unbalanced }")
                    cond, body = stack.pop()
                    stack[-1][1].append(If(cond, tuple(body)))
                else:
                    stack[-1][1].append(_parse_stmt(parts, line, lineno))
                continue
            if kw == "module":
                if len(parts) != 2 or not parts[1].startswith("entry="):
                    raise ParseError(lineno, "module needs: module entry=<func>")
                entry = parts[1][len("entry=") :]
            elif kw == "buffer":
                if len(parts) != 4:
                    raise ParseError(lineno, "buffer needs: buffer <name> <shape> <kind>")
                buffers.append(Buffer(parts[1], parse_shape(parts[2]), parts[3]))
            elif kw == "const":
                if len(parts) != 5:
                    raise ParseError(lineno, "const needs: const <name> <shape> <kind> <data>")
                shape = parse_shape(parts[2])
                buffers.append(Buffer(parts[1], shape, parts[3], decode_data(parts[4], shape, parts[3])))
            elif kw in ("input", "output"):
                if len(parts) != 2:
                    raise ParseError(lineno, f"{kw} needs one buffer name")
                (inputs if kw == "input" else outputs).append(parts[1])
            elif kw == "map":
                if len(parts) != 3:
                    raise ParseError(lineno, "map needs: map <node> <func>")
                name_map[parts[1]] = parts[2]
            elif kw == "func":
                if len(parts) != 3 or not parts[2].startswith("params="):
                    raise ParseError(lineno, "func needs: func <name> params=<a,b>")
                if parts[1] in seen_funcs:
                    raise ParseError(lineno, f"duplicate function {parts[1]}")
                seen_funcs.add(parts[1])
                p = parts[2][len("params=") :]
                current = (parts[1], tuple(a for a in p.split(",") if a))
                stack = [(None, [])]
            else:
                raise ParseError(lineno, f"unknown record {kw!r}")
        except (TensorError, ValueError) as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(lineno, str(exc)) from None
    if current is not None:
        raise ParseError(lineno, f"function {current[0]} not closed with end")
    if entry is None:
        raise ParseError(0, "missing module record")
    module = OperatorModule(tuple(functions), entry, tuple(buffers), tuple(inputs), tuple(outputs), name_map)
    if check_valid:
        check_module(module)
    return module


def module_from_file(path) -> OperatorModule:
    with open(path, encoding="utf-8") as fh:
        return loads_module(fh.read())


# --------------------------------------------------------------- passes


@dataclass(frozen=True)
class Pass:
    name: str
    level: str
    transform: Callable[[Any], Any]

    def __post_init__(self) -> None:
        if self.level not in ("graph", "operator"):
            raise PipelineError(f"pass level must be graph or operator, got {self.level!r}")

    def __call__(self, ir):
        return self.transform(ir)


@dataclass(frozen=True)
class PassRecord:
    name: str
    level: str
    size_before: int
    size_after: int

    def __str__(self) -> str:
        unit = "nodes" if self.level in ("graph", "lower") else "functions"
        return f"{self.name} [{self.level}] {unit}: {self.size_before} -> {self.size_after}"


def _size(ir) -> int:
    return len(ir.nodes) if isinstance(ir, Graph) else len(ir.functions)


def _level(ir) -> str:
    if isinstance(ir, Graph):
        return "graph"
    if isinstance(ir, OperatorModule):
        return "operator"
    raise PipelineError(f"not an IR: {type(ir).__name__}")


def dump_ir(ir) -> str:
    from trojancc.graph_ir import serialize

    return serialize(ir) if isinstance(ir, Graph) else dumps_module(ir)


def run_pipeline(
    ir,
    passes: Sequence[Pass],
    dump_after: str | None = None,
    dump: Callable[[str, str], None] | None = None,
):
    """Apply ``passes`` in order; returns ``(ir, trace)``.

    Every pass must match the level of the IR it receives.  When
    ``dump_after`` names a pass, ``dump(name, text)`` receives the IR text
    right after that pass runs.
    """
    trace: list[PassRecord] = []
    for p in passes:
        level = _level(ir)
        if p.level != level:
            raise PipelineError(f"pass {p.name} works on {p.level} IR but received {level} IR")
        before = _size(ir)
        ir = p(ir)
        if _level(ir) != level:
            raise PipelineError(f"pass {p.name} changed the IR level")
        trace.append(PassRecord(p.name, p.level, before, _size(ir)))
        log.debug("%s", trace[-1])
        if dump_after == p.name and dump is not None:
            dump(p.name, dump_ir(ir))
    return ir, trace


def build(
    graph: Graph,
    passes: Sequence[Pass] = (),
    dump_after: str | None = None,
    dump: Callable[[str, str], None] | None = None,
):
    """Graph passes, then lowering, then operator passes; returns ``(module, trace)``."""
    levels = [p.level for p in passes]
    if "operator" in levels and "graph" in levels[levels.index("operator") :]:
        raise PipelineError("graph-level passes must precede operator-level passes")
    gpasses = [p for p in passes if p.level == "graph"]
    opasses = [p for p in passes if p.level == "operator"]
    graph, trace = run_pipeline(graph, gpasses, dump_after, dump)
    before = len(graph.nodes)
    module = lower(graph)
    trace.append(PassRecord("lower", "lower", before, len(module.functions)))
    if dump_after == "lower" and dump is not None:
        dump("lower", dumps_module(module))
    module, more = run_pipeline(module, opasses, dump_after, dump)
    return module, trace + more


# ------------------------------------------------------- benign graph passes


def _eliminate_dead_nodes(graph: Graph) -> Graph:
    live = set(graph.outputs)
    for node in reversed(graph.nodes):
        if node.id in live:
            live.update(node.inputs)
    keep = [n for n in graph.nodes if n.id in live or n.op is OpKind.INPUT]
    params = {k: v for k, v in graph.params.items() if k in live}
    return Graph(tuple(keep), graph.inputs, graph.outputs, params)


def _fold_constants(graph: Graph) -> Graph:
    values: dict[str, np.ndarray] = {}
    for pid, t in graph.params.items():
        values[pid] = t.array[None]
    nodes: list[Node] = []
    params = dict(graph.params)
    for node in graph.nodes:
        foldable = (
            node.op not in (OpKind.INPUT, OpKind.CONST)
            and node.inputs
            and all(i in values for i in node.inputs)
        )
        if not foldable:
            nodes.append(node)
            continue
        out = kernels.apply(PRIMITIVE[node.op], [values[i] for i in node.inputs], node.attrs)
        values[node.id] = out
        params[node.id] = Tensor.from_array(out[0])
        nodes.append(Node(node.id, OpKind.CONST))
    return Graph(tuple(nodes), graph.inputs, graph.outputs, params)


dead_node_elimination = Pass("dead_node_elimination", "graph", _eliminate_dead_nodes)
constant_folding = Pass("constant_folding", "graph", _fold_constants)
DEFAULT_PASSES = (dead_node_elimination, constant_folding)
BENIGN_PASSES = {p.name: p for p in DEFAULT_PASSES}


def rename_functions(module: OperatorModule, mapping: dict[str, str]) -> OperatorModule:
    """Rename functions and every call site that references them."""

    def fix(st: Stmt) -> Stmt:
        if isinstance(st, Call):
            return Call(mapping.get(st.func, st.func), st.args)
        if isinstance(st, If):
            return If(st.cond, tuple(fix(s) for s in st.body))
        if isinstance(st, Parallel):
            return Parallel(tuple(fix(c) for c in st.branches))
        return st

    funcs = tuple(
        OperatorFunction(mapping.get(f.name, f.name), f.params, tuple(fix(s) for s in f.body))
        for f in module.functions
    )
    name_map = {k: mapping.get(v, v) for k, v in module.name_map.items()}
    return replace(
        module,
        functions=funcs,
        entry=mapping.get(module.entry, module.entry),
        name_map=name_map,
    )
