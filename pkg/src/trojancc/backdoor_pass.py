"""Compiler pass that plants a trigger detector and gates the model output.

The detector computes an int32 scalar ``q`` that is 1 exactly when the
model input satisfies the trigger mask somewhere:

    SlidingWindow -> Cast(float32) [-> Reshape]
    -> MatMul(select first 1-bit per channel) -> MatMul(spread per channel)
    -> Sub -> EqualConst(0) -> Equal(mask) -> All -> Any

Both MatMuls have exactly one non-zero weight per output element, so the
float32 arithmetic is exact for integer inputs below 2**24.

Direct gating computes ``out = orig * (1 - q) + payload * q`` with casts
and multiplies only.  With q == 1 a non-finite ``orig`` leaks through
(``0 * inf`` is NaN); with q == 0 a ``-0.0`` in ``orig`` becomes ``+0.0``
where the payload is non-negative.  Clean inputs that drive the model to
such values are outside the bitwise preservation guarantee.

The temporal variant wraps the original entry body in a main-path function
and races it against a backdoor path that detects the trigger, burns the
cost of two full model runs, then overwrites the output with the payload.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from trojancc.graph_ir import Graph, GraphBuilder, GraphError, OpKind, check, infer_types
from trojancc.lowering import (
    FUNC_PREFIX,
    Buffer,
    Call,
    Compute,
    If,
    LoweringError,
    OperatorFunction,
    OperatorModule,
    Parallel,
    Pass,
    check_module,
    lower_node,
    rename_functions,
    statement_count,
    unique_name,
    validate_module,
)
from trojancc.tensor import Tensor, read_tensor
from trojancc.trigger_core import Mask, TriggerMask1D, TriggerMask2D, read_mask

DEFAULT_NAMES = (
    FUNC_PREFIX + "sliding_window",
    FUNC_PREFIX + "subtract_equal_cast_equal_all",
    FUNC_PREFIX + "any",
)
EXACT_LIMIT = 1 << 24


class BackdoorError(ValueError):
    pass


@dataclass(frozen=True)
class BackdoorConfig:
    mask: Mask
    payload: Tensor
    method: str = "direct"
    level: str = "graph"
    function_names: tuple[str, str, str] | None = None
    stealth_names: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.method not in ("direct", "temporal"):
            raise BackdoorError(f"unknown method {self.method!r}")
        if self.level not in ("graph", "operator"):
            raise BackdoorError(f"unknown level {self.level!r}")
        if self.method == "temporal" and self.level != "operator":
            raise BackdoorError("temporal execution needs operator-level insertion")
        if self.function_names is not None:
            names = tuple(self.function_names)
            if len(names) != 3 or len(set(names)) != 3:
                raise BackdoorError("function_names must be three distinct names")
            object.__setattr__(self, "function_names", names)

    def names(self) -> tuple[str, str, str]:
        return self.function_names or DEFAULT_NAMES


@dataclass(frozen=True)
class DetectorArtifact:
    names: tuple[str, ...]
    node_delta: int = 0
    function_delta: int = 0
    statement_delta: int = 0


def stealth_name(name: str, seed: int = 0) -> str:
    digest = hashlib.sha256(f"{seed}:{name}".encode()).hexdigest()
    return f"FUN_{digest[:8]}"


# ------------------------------------------------------------ detector


def _mask_geometry(mask: Mask):
    """Flattened window bits, per-column channel, and per-channel first 1."""
    if isinstance(mask, TriggerMask1D):
        bits = mask.array
        return bits, np.zeros(len(bits), dtype=int), [mask.first_one], 1
    m1, m2, c = mask.shape
    bits = mask.bits.reshape(-1).astype(np.int32)
    channel = np.tile(np.arange(c), m1 * m2)
    firsts = [(r * m2 + col) * c + k for k, (r, col) in enumerate(mask.first_ones())]
    return bits, channel, firsts, c


def add_detector(b: GraphBuilder, x: str, in_shape, in_kind: str, mask: Mask, prefix: str = "bd_") -> str:
    """Append detector nodes reading ``x`` to ``b``; returns the id of q."""
    if in_kind not in ("uint8", "int32"):
        raise BackdoorError(f"trigger detection needs integer inputs, got {in_kind}")
    if isinstance(mask, TriggerMask1D):
        if len(in_shape) != 1:
            raise BackdoorError(f"1-D mask needs a rank-1 input, got shape {tuple(in_shape)}")
        window = (len(mask),)
    else:
        if len(in_shape) != 3 or in_shape[2] != mask.shape[2]:
            raise BackdoorError(f"2-D mask {mask.shape} does not fit input shape {tuple(in_shape)}")
        window = mask.shape[:2]
    if any(w > d for w, d in zip(window, in_shape)):
        raise BackdoorError(f"mask window {window} larger than input {tuple(in_shape)}")

    bits, channel, firsts, c = _mask_geometry(mask)
    width = len(bits)
    positions = int(np.prod([d - w + 1 for d, w in zip(in_shape, window)]))
    select = np.zeros((width, c), dtype=np.float32)
    for k, f in enumerate(firsts):
        select[f, k] = 1.0
    spread = np.zeros((c, width), dtype=np.float32)
    spread[channel, np.arange(width)] = 1.0

    n = lambda s: prefix + s  # noqa: E731
    win = b.op(OpKind.SLIDING_WINDOW, x, name=n("window"), window=window)
    wf = b.op(OpKind.CAST, win, name=n("window_f"), dtype="float32")
    if isinstance(mask, TriggerMask2D):
        wf = b.op(OpKind.RESHAPE, wf, name=n("flat"), shape=(positions, width))
    pinned = b.op(OpKind.MATMUL, wf, b.const(select, n("select")), name=n("pinned"))
    spread_a = b.op(OpKind.MATMUL, pinned, b.const(spread, n("spread")), name=n("spread_a"))
    diff = b.op(OpKind.SUB, wf, spread_a, name=n("diff"))
    same = b.op(OpKind.EQUAL_CONST, diff, name=n("same"), value=0)
    fits = b.op(OpKind.EQUAL, same, b.const(bits, n("mask")), name=n("fits"))
    hit = b.op(OpKind.ALL, fits, name=n("hit"))
    return b.op(OpKind.ANY, hit, name=n("q"))


def build_detector_graph(mask: Mask, input_shape, input_kind: str = "int32") -> Graph:
    """Standalone fragment: one Input ``x`` and one int32 (1,) output ``q``."""
    b = GraphBuilder()
    x = b.input(tuple(input_shape), input_kind, name="x")
    q = add_detector(b, x, tuple(input_shape), input_kind, mask)
    return b.build([q])


# ------------------------------------------------------------ graph level


def _check_payload(payload: Tensor, shape, kind: str) -> None:
    if payload.shape != tuple(shape):
        raise BackdoorError(f"shape mismatch: payload {payload.shape} vs model output {tuple(shape)}")
    if payload.elem_kind != kind:
        raise BackdoorError(f"kind mismatch: payload {payload.elem_kind} vs model output {kind}")


def _add_gate(b: GraphBuilder, orig: str, q: str, payload: Tensor, out_kind: str, prefix: str = "bd_") -> str:
    n = lambda s: prefix + s  # noqa: E731
    gate = q if out_kind == "int32" else b.op(OpKind.CAST, q, name=n("gate"), dtype=out_kind)
    one = b.const(Tensor.of([1], out_kind), n("one"))
    keep = b.op(OpKind.SUB, one, gate, name=n("keep"))
    kept = b.op(OpKind.MUL, orig, keep, name=n("kept"))
    chosen = b.op(OpKind.MUL, b.const(payload, n("payload")), gate, name=n("chosen"))
    return b.op(OpKind.ADD, kept, chosen, name=n("out"))


def insert_graph_level(graph: Graph, cfg: BackdoorConfig) -> Graph:
    if cfg.level != "graph" or cfg.method != "direct":
        raise BackdoorError("graph-level insertion supports only the direct method at level=graph")
    check(graph)
    if len(graph.inputs) != 1 or len(graph.outputs) != 1:
        raise BackdoorError("backdoor insertion needs a single-input single-output model")
    types = infer_types(graph)
    (x,) = graph.inputs
    (y,) = graph.outputs
    out_shape, out_kind = types[y]
    _check_payload(cfg.payload, out_shape, out_kind)
    in_shape, in_kind = types[x]

    b = GraphBuilder()
    b.nodes = list(graph.nodes)
    b.inputs = list(graph.inputs)
    b.params = dict(graph.params)
    b.reserve(graph.ids)
    q = add_detector(b, x, in_shape, in_kind, cfg.mask)
    out = _add_gate(b, y, q, cfg.payload, out_kind)
    return check(b.build([out]))


# --------------------------------------------------------- operator level


@dataclass
class _Emitter:
    """Collects buffers and fused functions lowered from detector nodes."""

    module: OperatorModule
    buffers: list[Buffer]
    taken_bufs: set[str]
    taken_funcs: set[str]

    @classmethod
    def for_module(cls, module: OperatorModule) -> "_Emitter":
        return cls(module, list(module.buffers), {b.name for b in module.buffers}, set(module.function_names))

    def fresh_buffer(self, base: str, shape, kind: str, const: Tensor | None = None) -> str:
        name = unique_name(base, self.taken_bufs)
        self.buffers.append(Buffer(name, tuple(shape), kind, const))
        return name


def _lower_fragment(em: _Emitter, graph: Graph, bind: dict[str, str]):
    """Lower every compute node of ``graph`` to a Compute statement over
    fresh module buffers.  ``bind`` maps fragment input ids to buffers."""
    types = infer_types(graph)
    names = dict(bind)
    stmts: dict[str, Compute] = {}
    for node in graph.nodes:
        shape, kind = types[node.id]
        if node.op is OpKind.INPUT:
            continue
        if node.op is OpKind.CONST:
            names[node.id] = em.fresh_buffer(node.id, shape, kind, graph.params[node.id])
            continue
        names[node.id] = em.fresh_buffer(node.id, shape, kind)
        stmts[node.id] = lower_node(
            node, [types[i] for i in node.inputs], types[node.id], names[node.id], [names[i] for i in node.inputs]
        )
    return stmts, names, types


def _fused(name: str, stmts: list[Compute], inputs: list[str], outputs: list[str]) -> OperatorFunction:
    """Function whose params alias the given global buffers."""
    params = [f"p{i}" for i in range(len(inputs))] + [f"out{i}" for i in range(len(outputs))]
    alias = dict(zip(inputs + outputs, params))
    body = tuple(
        Compute(s.prim, alias.get(s.out, s.out), tuple(alias.get(i, i) for i in s.ins), s.extents, s.attrs)
        for s in stmts
    )
    return OperatorFunction(name, tuple(params), body)


def _emit_detector(em: _Emitter, mask: Mask, x_buf: str, names: tuple[str, str, str]):
    """Three fused detector functions plus the calls that run them."""
    xb = em.module.buffer(x_buf)
    frag = build_detector_graph(mask, xb.shape, xb.kind)
    stmts, bufs, _ = _lower_fragment(em, frag, {"x": x_buf})
    window_ids = ["bd_window"]
    middle_ids = [k for k in stmts if k not in ("bd_window", "bd_q")]
    groups = [(window_ids, names[0]), (middle_ids, names[1]), (["bd_q"], names[2])]
    produced: set[str] = set()
    funcs, calls = [], []
    for ids, fname in groups:
        local = {bufs[i] for i in ids}
        reads = []
        for i in ids:
            for src in stmts[i].ins:
                if src not in local and src not in reads:
                    reads.append(src)
        outs = [bufs[ids[-1]]]
        fname = unique_name(fname, em.taken_funcs)
        funcs.append(_fused(fname, [stmts[i] for i in ids], reads, outs))
        calls.append(Call(fname, tuple(reads + outs)))
        produced |= local
    return funcs, calls, bufs["bd_q"]


def _gate_statements(em: _Emitter, orig: str, q: str, payload: Tensor, out_buf: str):
    decl = em.module.buffer(out_buf)
    b = GraphBuilder()
    o = b.input(decl.shape, decl.kind, name="orig")
    qn = b.input((1,), "int32", name="q")
    _add_gate(b, o, qn, payload, decl.kind)
    frag = b.build(["bd_out"])
    types = infer_types(frag)
    names = {"orig": orig, "q": q}
    stmts = []
    for node in frag.nodes:
        shape, kind = types[node.id]
        if node.op is OpKind.INPUT:
            continue
        if node.op is OpKind.CONST:
            names[node.id] = em.fresh_buffer(node.id, shape, kind, frag.params[node.id])
            continue
        names[node.id] = out_buf if node.id == "bd_out" else em.fresh_buffer(node.id, shape, kind)
        stmts.append(
            lower_node(node, [types[i] for i in node.inputs], types[node.id], names[node.id], [names[i] for i in node.inputs])
        )
    return stmts


def _rename_buffer_in(body, old: str, new: str):
    def fix(st):
        if isinstance(st, Compute):
            sub = lambda n: new if n == old else n  # noqa: E731
            return Compute(st.prim, sub(st.out), tuple(map(sub, st.ins)), st.extents, st.attrs)
        if isinstance(st, Call):
            return Call(st.func, tuple(new if a == old else a for a in st.args))
        if isinstance(st, If):
            return If(new if st.cond == old else st.cond, tuple(fix(s) for s in st.body))
        return Parallel(tuple(fix(c) for c in st.branches))

    return tuple(fix(s) for s in body)


def insert_operator_level(module: OperatorModule, cfg: BackdoorConfig) -> OperatorModule:
    if cfg.level != "operator":
        raise BackdoorError("operator-level insertion needs level=operator")
    names = {f.name for f in module.functions}
    if module.entry not in names:
        raise BackdoorError(f"entry function {module.entry} missing")
    diags = validate_module(module)
    if diags:
        raise LoweringError("invalid module:\n  " + "\n  ".join(diags))
    if len(module.inputs) != 1 or len(module.outputs) != 1:
        raise BackdoorError("backdoor insertion needs a single-input single-output module")
    (x_buf,) = module.inputs
    (out_buf,) = module.outputs
    out_decl = module.buffer(out_buf)
    _check_payload(cfg.payload, out_decl.shape, out_decl.kind)

    em = _Emitter.for_module(module)
    det_funcs, det_calls, q_buf = _emit_detector(em, cfg.mask, x_buf, cfg.names())
    entry = module.function(module.entry)
    others = [f for f in module.functions if f.name != module.entry]

    if cfg.method == "direct":
        orig = em.fresh_buffer("bd_orig", out_decl.shape, out_decl.kind)
        body = _rename_buffer_in(entry.body, out_buf, orig)
        gate = _gate_statements(em, orig, q_buf, cfg.payload, out_buf)
        new_entry = OperatorFunction(entry.name, entry.params, body + tuple(det_calls) + tuple(gate))
        functions = tuple(others) + tuple(det_funcs) + (new_entry,)
        added = [f.name for f in det_funcs]
    else:
        main_name = unique_name(FUNC_PREFIX + "main_path", em.taken_funcs)
        bd_name = unique_name(FUNC_PREFIX + "copy_output", em.taken_funcs)
        main_path = OperatorFunction(main_name, entry.params, entry.body)
        scratch = em.fresh_buffer("bd_scratch", out_decl.shape, out_decl.kind)
        payload = em.fresh_buffer("bd_payload", out_decl.shape, out_decl.kind, cfg.payload)
        delayed = (
            Call(main_name, (x_buf, scratch)),
            Call(main_name, (x_buf, scratch)),
            Compute("copy", out_buf, (payload,), out_decl.shape),
        )
        bd_path = OperatorFunction(bd_name, entry.params, tuple(det_calls) + (If(q_buf, delayed),))
        race = Parallel((Call(main_name, entry.params), Call(bd_name, entry.params)))
        new_entry = OperatorFunction(entry.name, entry.params, (race,))
        functions = tuple(others) + tuple(det_funcs) + (main_path, bd_path, new_entry)
        added = [f.name for f in det_funcs] + [main_name, bd_name]

    infected = replace(module, functions=functions, buffers=tuple(em.buffers))
    if cfg.stealth_names:
        infected = rename_functions(infected, {a: stealth_name(a, cfg.seed) for a in added})
    return check_module(infected)


def insert(ir, cfg: BackdoorConfig):
    if cfg.level == "graph":
        return insert_graph_level(ir, cfg)
    return insert_operator_level(ir, cfg)


def backdoor_pass(cfg: BackdoorConfig, name: str = "fuse_ops") -> Pass:
    """Wrap the insertion as a pipeline pass (deliberately bland name)."""
    return Pass(name, cfg.level, lambda ir: insert(ir, cfg))


def artifact(clean, infected) -> DetectorArtifact:
    if isinstance(clean, Graph):
        added = tuple(i for i in infected.ids if i not in set(clean.ids))
        return DetectorArtifact(added, node_delta=len(infected.nodes) - len(clean.nodes))
    before = set(clean.function_names)
    added = tuple(n for n in infected.function_names if n not in before)
    return DetectorArtifact(
        added,
        function_delta=len(infected.functions) - len(clean.functions),
        statement_delta=statement_count(infected) - statement_count(clean),
    )


# ------------------------------------------------------------ config file


def load_config(path, default_level: str = "graph", **overrides) -> BackdoorConfig:
    """Read a ``key=value`` config: mask, payload, method, level, names,
    stealth_names, seed.  Relative paths resolve against the config's dir."""
    path = Path(path)
    raw: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise BackdoorError(f"{path}:{lineno}: expected key=value")
        raw[key.strip()] = value.strip()
    unknown = set(raw) - {"mask", "payload", "method", "level", "names", "stealth_names", "seed"}
    if unknown:
        raise BackdoorError(f"unknown config keys: {sorted(unknown)}")
    for key in ("mask", "payload"):
        if key not in raw:
            raise BackdoorError(f"config missing {key}")
    base = path.parent
    kwargs = dict(
        mask=read_mask(base / raw["mask"]),
        payload=read_tensor(base / raw["payload"]),
        method=raw.get("method", "direct"),
        level=raw.get("level", default_level),
        function_names=tuple(raw["names"].split(",")) if raw.get("names") else None,
        stealth_names=raw.get("stealth_names", "false").lower() in ("1", "true", "yes"),
        seed=int(raw.get("seed", "0")),
    )
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return BackdoorConfig(**kwargs)
