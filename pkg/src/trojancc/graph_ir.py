"""High-level dataflow Graph IR.

A :class:`Graph` is an ordered list of :class:`Node` records.  Every edge
points at an earlier node, so node order is a topological order.  Weights
live in ``Graph.params`` keyed by the id of the ``Const`` node they feed.

Shape and element-kind rules (``a``/``b`` are the first/second input)::

    Input            attrs shape, dtype             -> (shape, dtype)
    Const            params[id]                     -> param's (shape, kind)
    MatMul           (n,k) x (k,m), float32|int32   -> (n,m)
    Add, Sub, Mul    same shape, or either is (1,)  -> the larger shape, a's kind
    ReLU             float32|int32                  -> a
    Softmax          float32, over last axis        -> a
    ArgMax           over last axis                 -> a.shape[:-1] or (1,), int32
    EmbeddingLookup  ids (n,) int32, table (V,d)    -> (n,d), table's kind
    Conv2DLite       x (H,W,C), w (kh,kw,C,F)       -> (H-kh+1, W-kw+1, F), valid, stride 1
    Reshape          attrs shape, same element count
    Cast             attrs dtype                    -> a.shape
    SlidingWindow    attrs window=(w_0..w_{k-1}) over the leading k axes:
                     (d_0..d_{r-1}) -> (d_0-w_0+1, .., d_{k-1}-w_{k-1}+1, w_0..w_{k-1}, d_k..d_{r-1})
    EqualConst       attrs value                    -> a.shape, int32 0/1
    Equal            b.shape is a suffix of a.shape, same kind -> a.shape, int32 0/1
    All              over last axis                 -> a.shape[:-1] or (1,), int32
    Any              full reduction                 -> (1,), int32

Booleans are int32 0/1 tensors; there is no select op, so conditionals must be
built from Cast, Mul and Add.

Text format, one record per line (``#`` starts a comment)::

    node <id> <OpKind> inputs=<id,...> attrs=<k=v;...>
    param <id> <d0>x<d1>... <elem_kind> <decimal,list | b64:payload>
    input <id>
    output <id>

Attribute values are ints, floats, bare words or ``[i,j,...]`` int tuples.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Sequence

import numpy as np

from trojancc.tensor import ELEM_KINDS, Tensor, TensorError, decode_data, encode_data


class OpKind(str, Enum):
    INPUT = "Input"
    CONST = "Const"
    MATMUL = "MatMul"
    ADD = "Add"
    MUL = "Mul"
    SUB = "Sub"
    RELU = "ReLU"
    SOFTMAX = "Softmax"
    ARGMAX = "ArgMax"
    EMBEDDING_LOOKUP = "EmbeddingLookup"
    CONV2D_LITE = "Conv2DLite"
    RESHAPE = "Reshape"
    CAST = "Cast"
    SLIDING_WINDOW = "SlidingWindow"
    EQUAL_CONST = "EqualConst"
    EQUAL = "Equal"
    ALL = "All"
    ANY = "Any"


ARITY = {
    OpKind.INPUT: 0,
    OpKind.CONST: 0,
    OpKind.MATMUL: 2,
    OpKind.ADD: 2,
    OpKind.MUL: 2,
    OpKind.SUB: 2,
    OpKind.RELU: 1,
    OpKind.SOFTMAX: 1,
    OpKind.ARGMAX: 1,
    OpKind.EMBEDDING_LOOKUP: 2,
    OpKind.CONV2D_LITE: 2,
    OpKind.RESHAPE: 1,
    OpKind.CAST: 1,
    OpKind.SLIDING_WINDOW: 1,
    OpKind.EQUAL_CONST: 1,
    OpKind.EQUAL: 2,
    OpKind.ALL: 1,
    OpKind.ANY: 1,
}

# graph op -> runtime primitive
PRIMITIVE = {
    OpKind.MATMUL: "matmul",
    OpKind.ADD: "add",
    OpKind.MUL: "mul",
    OpKind.SUB: "sub",
    OpKind.RELU: "relu",
    OpKind.SOFTMAX: "softmax",
    OpKind.ARGMAX: "argmax",
    OpKind.EMBEDDING_LOOKUP: "gather",
    OpKind.CONV2D_LITE: "conv2d",
    OpKind.RESHAPE: "reshape",
    OpKind.CAST: "cast",
    OpKind.SLIDING_WINDOW: "window",
    OpKind.EQUAL_CONST: "eq_const",
    OpKind.EQUAL: "eq",
    OpKind.ALL: "all",
    OpKind.ANY: "any",
}

_ID_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.]*$")

Shape = tuple[int, ...]


class GraphError(ValueError):
    pass


class ShapeError(GraphError):
    def __init__(self, node: str, message: str):
        super().__init__(f"node {node}: {message}")
        self.node = node


class ParseError(GraphError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class Node:
    id: str
    op: OpKind
    inputs: tuple[str, ...] = ()
    attrs: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "inputs", tuple(self.inputs))
        attrs = {k: tuple(int(x) for x in v) if isinstance(v, (list, tuple)) else v for k, v in self.attrs.items()}
        object.__setattr__(self, "attrs", attrs)


@dataclass(frozen=True)
class Graph:
    nodes: tuple[Node, ...]
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    params: dict[str, Tensor] = field(default_factory=dict)

    def node(self, node_id: str) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    @property
    def ids(self) -> list[str]:
        return [n.id for n in self.nodes]


@dataclass(frozen=True)
class Diagnostic:
    node: str
    rule: str
    message: str

    def __str__(self) -> str:
        return f"{self.node}: [{self.rule}] {self.message}"


# ---------------------------------------------------------------- shape rules


def _need_kind(node: Node, kind: str, allowed: Iterable[str]) -> None:
    if kind not in allowed:
        raise ShapeError(node.id, f"{node.op.value} does not accept element kind {kind}")


def _reduce_last(shape: Shape) -> Shape:
    return shape[:-1] if len(shape) > 1 else (1,)


def node_type(node: Node, ins: Sequence[tuple[Shape, str]], params: dict[str, Tensor]) -> tuple[Shape, str]:
    """Apply the shape/kind rule for one node given its input types."""
    op, a = node.op, node.attrs
    if op is OpKind.INPUT:
        try:
            shape = tuple(int(d) for d in a["shape"])
            kind = a["dtype"]
        except KeyError as exc:
            raise ShapeError(node.id, f"Input needs attr {exc.args[0]}") from None
        if not shape or min(shape) <= 0 or kind not in ELEM_KINDS:
            raise ShapeError(node.id, f"bad Input type {shape} {kind}")
        return shape, kind
    if op is OpKind.CONST:
        if node.id not in params:
            raise ShapeError(node.id, "Const without param")
        t = params[node.id]
        return t.shape, t.elem_kind

    (sa, ka) = ins[0]
    if op is OpKind.MATMUL:
        (sb, kb) = ins[1]
        _need_kind(node, ka, ("float32", "int32"))
        if ka != kb:
            raise ShapeError(node.id, f"kind mismatch {ka} vs {kb}")
        if len(sa) != 2 or len(sb) != 2 or sa[1] != sb[0]:
            raise ShapeError(node.id, f"shape mismatch: expected (n,k)x(k,m), got {sa}x{sb}")
        return (sa[0], sb[1]), ka
    if op in (OpKind.ADD, OpKind.SUB, OpKind.MUL):
        (sb, kb) = ins[1]
        if ka != kb:
            raise ShapeError(node.id, f"kind mismatch {ka} vs {kb}")
        if sa == sb or sb == (1,):
            return sa, ka
        if sa == (1,):
            return sb, ka
        raise ShapeError(node.id, f"shape mismatch: expected equal shapes or a (1,) operand, got {sa} and {sb}")
    if op is OpKind.RELU:
        _need_kind(node, ka, ("float32", "int32"))
        return sa, ka
    if op is OpKind.SOFTMAX:
        _need_kind(node, ka, ("float32",))
        return sa, ka
    if op is OpKind.ARGMAX:
        return _reduce_last(sa), "int32"
    if op is OpKind.EMBEDDING_LOOKUP:
        (sb, kb) = ins[1]
        _need_kind(node, ka, ("int32",))
        if len(sa) != 1 or len(sb) != 2:
            raise ShapeError(node.id, f"shape mismatch: expected ids (n,) and table (V,d), got {sa} and {sb}")
        return (sa[0], sb[1]), kb
    if op is OpKind.CONV2D_LITE:
        (sb, kb) = ins[1]
        _need_kind(node, ka, ("float32", "int32"))
        if ka != kb:
            raise ShapeError(node.id, f"kind mismatch {ka} vs {kb}")
        if len(sa) != 3 or len(sb) != 4 or sb[2] != sa[2] or sb[0] > sa[0] or sb[1] > sa[1]:
            raise ShapeError(node.id, f"shape mismatch: expected x (H,W,C) and w (kh,kw,C,F), got {sa} and {sb}")
        return (sa[0] - sb[0] + 1, sa[1] - sb[1] + 1, sb[3]), ka
    if op is OpKind.RESHAPE:
        try:
            new = tuple(int(d) for d in a["shape"])
        except KeyError:
            raise ShapeError(node.id, "Reshape needs attr shape") from None
        if not new or min(new) <= 0 or int(np.prod(new)) != int(np.prod(sa)):
            raise ShapeError(node.id, f"shape mismatch: cannot reshape {sa} to {new}")
        return new, ka
    if op is OpKind.CAST:
        kind = a.get("dtype")
        if kind not in ELEM_KINDS:
            raise ShapeError(node.id, f"Cast needs a valid dtype attr, got {kind!r}")
        return sa, kind
    if op is OpKind.SLIDING_WINDOW:
        try:
            window = tuple(int(w) for w in a["window"])
        except KeyError:
            raise ShapeError(node.id, "SlidingWindow needs attr window") from None
        k = len(window)
        if k == 0 or k > len(sa) or min(window) < 1:
            raise ShapeError(node.id, f"bad window {window} for shape {sa}")
        if any(w > d for w, d in zip(window, sa)):
            raise ShapeError(node.id, f"shape mismatch: window {window} larger than input {sa}")
        counts = tuple(d - w + 1 for d, w in zip(sa, window))
        return counts + window + sa[k:], ka
    if op is OpKind.EQUAL_CONST:
        if "value" not in a:
            raise ShapeError(node.id, "EqualConst needs attr value")
        return sa, "int32"
    if op is OpKind.EQUAL:
        (sb, kb) = ins[1]
        if ka != kb:
            raise ShapeError(node.id, f"kind mismatch {ka} vs {kb}")
        if len(sb) > len(sa) or sa[len(sa) - len(sb) :] != sb:
            raise ShapeError(node.id, f"shape mismatch: {sb} is not a suffix of {sa}")
        return sa, "int32"
    if op is OpKind.ALL:
        return _reduce_last(sa), "int32"
    if op is OpKind.ANY:
        return (1,), "int32"
    raise ShapeError(node.id, f"unsupported op {op}")  # pragma: no cover


# ------------------------------------------------------------ validation


def _structural(graph: Graph) -> list[Diagnostic]:
    diags: list[Diagnostic] = []
    seen: set[str] = set()
    all_ids = {n.id for n in graph.nodes}
    for n in graph.nodes:
        if not _ID_RE.match(n.id):
            diags.append(Diagnostic(n.id, "bad-id", f"invalid node id {n.id!r}"))
        if n.id in seen:
            diags.append(Diagnostic(n.id, "duplicate-id", f"duplicate node id {n.id}"))
        if not isinstance(n.op, OpKind):
            diags.append(Diagnostic(n.id, "unknown-op", f"unknown op {n.op!r}"))
            seen.add(n.id)
            continue
        if len(n.inputs) != ARITY[n.op]:
            diags.append(
                Diagnostic(n.id, "arity", f"{n.op.value} takes {ARITY[n.op]} inputs, got {len(n.inputs)}")
            )
        for src in n.inputs:
            if src not in all_ids:
                diags.append(Diagnostic(n.id, "dangling-edge", f"input {src} does not exist"))
            elif src not in seen:
                diags.append(Diagnostic(n.id, "not-topological", f"input {src} is not an earlier node"))
        seen.add(n.id)
    kinds = {n.id: n.op for n in graph.nodes}
    for i in graph.inputs:
        if kinds.get(i) is not OpKind.INPUT:
            diags.append(Diagnostic(i, "bad-input", f"graph input {i} is not an Input node"))
    for n in graph.nodes:
        if n.op is OpKind.INPUT and n.id not in graph.inputs:
            diags.append(Diagnostic(n.id, "bad-input", f"Input node {n.id} not listed as a graph input"))
    for o in graph.outputs:
        if o not in kinds:
            diags.append(Diagnostic(o, "bad-output", f"output {o} does not exist"))
    if not graph.outputs:
        diags.append(Diagnostic("<graph>", "bad-output", "graph has no outputs"))
    for p in graph.params:
        if kinds.get(p) is not OpKind.CONST:
            diags.append(Diagnostic(p, "bad-param", f"param {p} does not refer to a Const node"))
    return diags


def infer_types(graph: Graph) -> dict[str, tuple[Shape, str]]:
    """Map each node id to its (shape, element kind); raises on the first error."""
    types: dict[str, tuple[Shape, str]] = {}
    for n in graph.nodes:
        try:
            ins = [types[i] for i in n.inputs]
        except KeyError as exc:
            raise GraphError(f"node {n.id}: input {exc.args[0]} not available") from None
        if len(ins) != ARITY[n.op]:
            raise GraphError(f"node {n.id}: arity mismatch")
        types[n.id] = node_type(n, ins, graph.params)
    return types


def infer_shapes(graph: Graph) -> dict[str, Shape]:
    return {k: v[0] for k, v in infer_types(graph).items()}


def validate(graph: Graph) -> list[Diagnostic]:
    """Return diagnostics for every violated graph invariant (empty if valid)."""
    diags = _structural(graph)
    if diags:
        return diags
    types: dict[str, tuple[Shape, str]] = {}
    for n in graph.nodes:
        if any(i not in types for i in n.inputs):
            diags.append(Diagnostic(n.id, "shape", "input type unknown after earlier error"))
            continue
        try:
            types[n.id] = node_type(n, [types[i] for i in n.inputs], graph.params)
        except ShapeError as exc:
            diags.append(Diagnostic(n.id, "shape", str(exc)))
    return diags


def check(graph: Graph) -> Graph:
    diags = validate(graph)
    if diags:
        raise GraphError("invalid graph:\n  " + "\n  ".join(map(str, diags)))
    return graph


# ------------------------------------------------------------ construction


class GraphBuilder:
    """Incremental graph construction with automatic unique ids."""

    def __init__(self, prefix: str = "n"):
        self.prefix = prefix
        self.nodes: list[Node] = []
        self.inputs: list[str] = []
        self.params: dict[str, Tensor] = {}
        self._taken: set[str] = set()

    def _fresh(self, name: str | None, hint: str) -> str:
        base = name or f"{self.prefix}{hint}"
        candidate, i = base, 1
        while candidate in self._taken:
            candidate = f"{base}_{i}"
            i += 1
        self._taken.add(candidate)
        return candidate

    def reserve(self, ids: Iterable[str]) -> None:
        self._taken.update(ids)

    def input(self, shape: Sequence[int], dtype: str, name: str | None = None) -> str:
        nid = self._fresh(name, "input")
        self.nodes.append(Node(nid, OpKind.INPUT, (), {"shape": tuple(shape), "dtype": dtype}))
        self.inputs.append(nid)
        return nid

    def const(self, value: Tensor | np.ndarray, name: str | None = None) -> str:
        if not isinstance(value, Tensor):
            value = Tensor.from_array(value)
        nid = self._fresh(name, "const")
        self.nodes.append(Node(nid, OpKind.CONST))
        self.params[nid] = value
        return nid

    def op(self, op: OpKind, *inputs: str, name: str | None = None, **attrs: Any) -> str:
        nid = self._fresh(name, op.value.lower())
        self.nodes.append(Node(nid, op, tuple(inputs), dict(attrs)))
        return nid

    def build(self, outputs: Sequence[str]) -> Graph:
        return Graph(tuple(self.nodes), tuple(self.inputs), tuple(outputs), dict(self.params))


# ------------------------------------------------------------ text format


def format_attr(v: Any) -> str:
    if isinstance(v, (tuple, list)):
        return "[" + ",".join(str(int(x)) for x in v) + "]"
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    s = str(v)
    if not s or any(c in s for c in " ;=[],\t\n"):
        raise GraphError(f"attribute value {s!r} is not serializable")
    return s


def parse_attr(s: str) -> Any:
    if s.startswith("[") and s.endswith("]"):
        body = s[1:-1]
        return tuple(int(x) for x in body.split(",")) if body else ()
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def format_attrs(attrs: dict[str, Any]) -> str:
    return ";".join(f"{k}={format_attr(v)}" for k, v in attrs.items())


def parse_attrs(s: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    if not s:
        return out
    for part in s.split(";"):
        k, sep, v = part.partition("=")
        if not sep or not k:
            raise ValueError(f"bad attribute {part!r}")
        out[k] = parse_attr(v)
    return out


def format_shape(shape: Sequence[int]) -> str:
    return "x".join(str(d) for d in shape)


def parse_shape(s: str) -> Shape:
    return tuple(int(d) for d in s.split("x"))


def serialize(graph: Graph) -> str:
    lines = ["# trojancc graph v1"]
    for n in graph.nodes:
        lines.append(f"node {n.id} {n.op.value} inputs={','.join(n.inputs)} attrs={format_attrs(n.attrs)}")
    for pid, t in graph.params.items():
        lines.append(f"param {pid} {format_shape(t.shape)} {t.elem_kind} {encode_data(t)}")
    lines.extend(f"input {i}" for i in graph.inputs)
    lines.extend(f"output {o}" for o in graph.outputs)
    return "\n".join(lines) + "\n"


def _kv(token: str, key: str, lineno: int) -> str:
    prefix = key + "="
    if not token.startswith(prefix):
        raise ParseError(lineno, f"expected {prefix}..., got {token!r}")
    return token[len(prefix) :]


def deserialize(text: str, check_valid: bool = True) -> Graph:
    nodes: list[Node] = []
    params: dict[str, Tensor] = {}
    inputs: list[str] = []
    outputs: list[str] = []
    node_ids: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        rec = parts[0]
        try:
            if rec == "node":
                if len(parts) != 5:
                    raise ParseError(lineno, "node record needs: node <id> <op> inputs=.. attrs=..")
                _, nid, opname, ins, attrs = parts
                if nid in node_ids:
                    raise ParseError(lineno, f"duplicate node id {nid}")
                try:
                    op = OpKind(opname)
                except ValueError:
                    raise ParseError(lineno, f"unknown op kind {opname!r}") from None
                ins_s = _kv(ins, "inputs", lineno)
                node_ids.add(nid)
                nodes.append(
                    Node(nid, op, tuple(ins_s.split(",")) if ins_s else (), parse_attrs(_kv(attrs, "attrs", lineno)))
                )
            elif rec == "param":
                if len(parts) != 5:
                    raise ParseError(lineno, "param record needs: param <id> <shape> <kind> <data>")
                _, pid, shape, kind, data = parts
                if pid in params:
                    raise ParseError(lineno, f"duplicate param {pid}")
                params[pid] = decode_data(data, parse_shape(shape), kind)
            elif rec in ("input", "output"):
                if len(parts) != 2:
                    raise ParseError(lineno, f"{rec} record needs exactly one id")
                (inputs if rec == "input" else outputs).append(parts[1])
            else:
                raise ParseError(lineno, f"unknown record {rec!r}")
        except (TensorError, ValueError) as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(lineno, str(exc)) from None
    graph = Graph(tuple(nodes), tuple(inputs), tuple(outputs), params)
    if check_valid:
        check(graph)
    return graph


def graph_from_file(path) -> Graph:
    with open(path, encoding="utf-8") as fh:
        return deserialize(fh.read())
