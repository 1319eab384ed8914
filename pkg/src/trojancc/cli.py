"""``trojancc`` command line: build, infect, craft, run, evaluate, scan, diff.

Exit status is 0 on success, 1 on a domain error (bad file, shape mismatch,
failed check) and 2 on a usage error.  Every random choice is drawn from one
generator seeded by ``--seed``.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from trojancc import backdoor_pass as bp
from trojancc import corpus, models
from trojancc.eval import (
    EvalError,
    diff_texts,
    eval_sets,
    fuzz_defence,
    graph_executor,
    measure,
    module_executor,
    scan_corpus,
    trigger_survival,
)
from trojancc.graph_ir import Graph, GraphError, graph_from_file, infer_types, serialize
from trojancc.imageio import ImageFormatError, read_image, write_image
from trojancc.lowering import (
    BENIGN_PASSES,
    LoweringError,
    OperatorModule,
    PipelineError,
    build,
    dumps_module,
    lower,
    module_from_file,
    run_pipeline,
)
from trojancc.runtime import ExecutionError, run_traced
from trojancc.tensor import Tensor, TensorError, read_tensor, write_tensor
from trojancc.trigger_core import MaskError, MatchError, TriggerMask1D, TriggerMask2D, match, read_mask
from trojancc.trigger_craft import (
    AND,
    DEFAULT_NLP_SPEC,
    UNK,
    CraftError,
    GapSpec,
    PatchSpec,
    TokenStream,
    craft_and_text,
    craft_mask_trigger,
    craft_unk_text,
    describe_bits,
    embed_image_patch,
    entropy_cv,
    entropy_nlp,
    fit_length,
    format_bits,
    gaps_to_mask,
    load_vocab,
    read_token_ids,
    tokenize,
    write_token_ids,
)

DOMAIN_ERRORS = (
    bp.BackdoorError,
    CraftError,
    EvalError,
    ExecutionError,
    GraphError,
    ImageFormatError,
    LoweringError,
    MaskError,
    MatchError,
    OSError,
    PipelineError,
    TensorError,
)


class DomainError(ValueError):
    pass


# ------------------------------------------------------------- file helpers


def _load_ir(path: str) -> Graph | OperatorModule:
    """``.gir`` graphs, anything else an operator module."""
    return graph_from_file(path) if Path(path).suffix == ".gir" else module_from_file(path)


def _write_ir(path: str, ir) -> None:
    text = serialize(ir) if isinstance(ir, Graph) else dumps_module(ir)
    Path(path).write_text(text, encoding="utf-8")


def _read_input(path: str) -> Tensor:
    if Path(path).suffix.lower() in (".ppm", ".pgm"):
        return read_image(path)
    return read_tensor(path)


def _write_output(path: str, t: Tensor) -> None:
    if Path(path).suffix.lower() in (".ppm", ".pgm"):
        write_image(path, t)
    else:
        write_tensor(path, t)


def _signature(ir) -> tuple[tuple[int, ...], str]:
    if isinstance(ir, Graph):
        return infer_types(ir)[ir.inputs[0]]
    b = ir.buffer(ir.inputs[0])
    return b.shape, b.kind


def _single_runner(ir):
    if isinstance(ir, Graph):
        run = graph_executor(ir)
        return lambda x: Tensor.from_array(np.ascontiguousarray(run(x.array[None])[0]))
    from trojancc.runtime import execute

    return lambda x: execute(ir, x)


def _batch_runner(ir):
    return graph_executor(ir) if isinstance(ir, Graph) else module_executor(ir)


def _parse_kv(items: Sequence[str], keys: Sequence[str]) -> dict[str, int]:
    out = {}
    for item in items:
        k, sep, v = item.partition("=")
        if not sep or k not in keys:
            raise DomainError(f"expected one of {'/'.join(keys)} as KEY=VALUE, got {item!r}")
        out[k] = int(v)
    missing = [k for k in keys if k not in out]
    if missing:
        raise DomainError(f"missing {', '.join(missing)}")
    return out


def _pair(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected ROW,COL, got {text!r}") from None
    return r, c


def _gaps(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}") from None


# -------------------------------------------------------------- subcommands


def cmd_model(args, rng) -> int:
    vocab = load_vocab(args.vocab)
    if args.kind == "image":
        g = models.image_mlp(args.seed)
    elif args.kind == "token":
        g = models.token_mlp(len(vocab), args.seed)
    else:
        g = models.image_cnn(args.seed)
    _write_ir(args.out, g)
    print(f"wrote {args.kind} model to {args.out} ({len(g.nodes)} nodes)")
    return 0


def _dump_to(args):
    def dump(name: str, text: str) -> None:
        target = args.dump_dir / f"after_{name}.txt" if args.dump_dir else None
        if target is None:
            sys.stdout.write(f"# ir after {name}\n{text}")
        else:
            target.write_text(text, encoding="utf-8")

    return dump


def cmd_compile(args, rng) -> int:
    graph = graph_from_file(args.graph)
    names = args.passes.split(",") if args.passes else []
    unknown = [n for n in names if n not in BENIGN_PASSES]
    if unknown:
        raise DomainError(f"unknown pass {unknown[0]!r}; available: {', '.join(BENIGN_PASSES)}")
    module, trace = build(graph, [BENIGN_PASSES[n] for n in names], args.dump_after, _dump_to(args))
    _write_ir(args.out, module)
    for rec in trace:
        print(rec)
    return 0


def _config(args, default_level: str) -> bp.BackdoorConfig:
    overrides = dict(method=args.method, level=args.level, seed=args.seed)
    if args.stealth_names:
        overrides["stealth_names"] = True
    if args.names:
        overrides["function_names"] = tuple(args.names.split(","))
    return bp.load_config(args.config, default_level=default_level, **overrides)


def cmd_infect(args, rng) -> int:
    ir = _load_ir(args.graph or args.module)
    is_graph = isinstance(ir, Graph)
    cfg = _config(args, "graph" if is_graph else "operator")
    passes = [bp.backdoor_pass(cfg)]
    dump = _dump_to(args)
    if not is_graph and cfg.level == "graph":
        raise DomainError("graph-level insertion needs a graph (--graph), not a lowered module")
    if is_graph and (cfg.level == "operator" or args.lower):
        out, trace = build(ir, passes, args.dump_after, dump)
        clean = lower(ir)
    else:
        out, trace = run_pipeline(ir, passes, args.dump_after, dump)
        clean = ir
    _write_ir(args.out, out)
    for rec in trace:
        print(rec)
    if isinstance(out, Graph) or cfg.level == "operator":
        art = bp.artifact(clean, out)
        unit = "nodes" if isinstance(out, Graph) else "functions"
        print(f"added {len(art.names)} {unit}: {' '.join(art.names)}")
    return 0


def cmd_craft_text(args, rng) -> int:
    vocab = load_vocab(args.vocab)
    spec = GapSpec(args.gaps, args.K)
    if args.text:
        text = Path(args.text).read_text(encoding="utf-8")
        n_words = len(tokenize(text, vocab))
        window = spec.length if args.style == "and" else sum(spec.gaps)
        at = args.at if args.at is not None else int(rng.integers(0, max(1, n_words - window - 1)))
        if args.style == "and":
            out = craft_and_text(text, spec, at, args.filler)
        else:
            out, at = craft_unk_text(text, spec, at, vocab, args.filler)
        Path(args.out).write_text(out, encoding="utf-8")
        stream = tokenize(out, vocab)
    else:
        stream = read_token_ids(args.tokens, vocab)
        at = args.at if args.at is not None else int(rng.integers(0, max(1, len(stream) - spec.length + 1)))
        stream = craft_mask_trigger(stream, gaps_to_mask(spec), at, AND if args.style == "and" else UNK, args.filler)
        write_token_ids(args.out, stream)
    if args.tensor:
        write_tensor(args.tensor, fit_length(stream, args.length).tensor())
    w = match(stream.tokens, gaps_to_mask(spec))
    print(f"trigger at token {at}; first match {w.offset if w else None} with A={vocab.word(w.constants) if w else None}")
    return 0


def cmd_craft_image(args, rng) -> int:
    img = read_image(args.image) if Path(args.image).suffix.lower() in (".ppm", ".pgm") else read_tensor(args.image)
    mask = read_mask(args.mask)
    if not isinstance(mask, TriggerMask2D):
        raise DomainError("craft-image needs a 2-D mask")
    if args.at is None:
        m1, m2, _ = mask.shape
        args.at = (int(rng.integers(0, img.shape[0] - m1 + 1)), int(rng.integers(0, img.shape[1] - m2 + 1)))
    res = embed_image_patch(img, PatchSpec(args.at, mask))
    _write_output(args.out, res.image)
    print(f"patch at {args.at[0]},{args.at[1]} constants={','.join(map(str, res.constants))} "
          f"max_change={res.max_change} changed_pixels={res.changed_pixels}")
    return 0


def _random_input(ir, rng) -> Tensor:
    shape, kind = _signature(ir)
    if kind == "uint8":
        return Tensor.from_array(rng.integers(0, 256, size=shape, dtype=np.uint8))
    if kind == "int32":
        return Tensor.from_array(rng.integers(0, 100, size=shape, dtype=np.int32))
    return Tensor.from_array(rng.normal(size=shape).astype(np.float32))


def cmd_run(args, rng) -> int:
    ir = _load_ir(args.module)
    x = _read_input(args.input) if args.input else _random_input(ir, rng)
    if isinstance(ir, Graph):
        y = _single_runner(ir)(x)
        trace = None
    else:
        trace = run_traced(ir, x)
        y = trace.output
    if args.out:
        write_tensor(args.out, y)
    else:
        print(" ".join(str(v) for v in y.tolist()) if y.size <= 16 else f"{y.shape} {y.elem_kind}")
    if args.trace:
        if trace is None:
            raise DomainError("traces are only recorded for operator modules")
        lines = [f"total_cost {trace.total_cost}"]
        lines += [f"function_cost {k} {v}" for k, v in sorted(trace.function_costs.items())]
        lines += [f"write {w.time} {w.buffer} {w.path}" for w in trace.writes]
        Path(args.trace).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def cmd_eval(args, rng) -> int:
    clean, infected = _load_ir(args.clean), _load_ir(args.infected)
    if _signature(clean) != _signature(infected):
        raise DomainError("clean and infected artifacts have different input signatures")
    cfg = bp.load_config(args.config)
    shape, kind = _signature(clean)
    benign, triggered = eval_sets(shape, kind, cfg.mask, args.benign, args.triggered, rng)
    report = measure(
        _batch_runner(clean), _batch_runner(infected), benign.inputs, triggered, cfg.payload, benign.labels, cfg.mask
    )
    sys.stdout.write(report.to_text())
    if args.report:
        Path(args.report).write_text(report.to_kv(), encoding="utf-8")
    return 0


def cmd_scan(args, rng) -> int:
    vocab = load_vocab(args.vocab)
    if args.mask:
        mask = read_mask(args.mask)
        if not isinstance(mask, TriggerMask1D):
            raise DomainError("scan needs a 1-D mask")
    else:
        mask = gaps_to_mask(GapSpec(args.gaps, args.K))
    a = vocab.id(args.word)
    path = args.corpus or corpus.bundled_corpus_path()
    chunks = corpus.iter_token_chunks(corpus.iter_lines(path), vocab)
    if args.insert_at is not None:
        tokens = np.concatenate(list(chunks))
        tokens = craft_mask_trigger(TokenStream(tokens, vocab), mask, args.insert_at, args.word).tokens
        chunks = iter([tokens])
    res = scan_corpus(chunks, mask, a)
    print(f"tokens={res.tokens_scanned}")
    print(f"matches={res.count}")
    print("positions=" + ",".join(map(str, res.positions)))
    return 0


def cmd_fuzz(args, rng) -> int:
    ir = _load_ir(args.module)
    x = _read_input(args.input)
    verdict = fuzz_defence(_single_runner(ir), x, args.amplitude, args.runs, args.seed, args.compare)
    print(f"agree={str(verdict.agree).lower()}")
    print(f"amplitude={verdict.noise_amplitude}")
    print("labels=" + ",".join(str(int(np.argmax(o.array))) for o in verdict.runs))
    if args.mask and args.trials:
        mask = read_mask(args.mask)
        if not isinstance(mask, TriggerMask2D):
            raise DomainError("survival estimates need a 2-D mask")
        sys.stdout.write(trigger_survival(x.array, mask, args.amplitude, args.trials, args.seed).to_kv())
    return 0 if verdict.agree or not args.fail_on_disagree else 1


def cmd_diff(args, rng) -> int:
    rep = diff_texts(Path(args.a).read_text(encoding="utf-8"), Path(args.b).read_text(encoding="utf-8"))
    sys.stdout.write(rep.to_text() if not args.kv else rep.to_kv())
    return 0


def cmd_entropy(args, rng) -> int:
    if bool(args.nlp) == bool(args.cv):
        raise DomainError("give exactly one of --nlp K=.. Q=.. or --cv M1=.. M2=.. N3=..")
    if args.nlp:
        kv = _parse_kv(args.nlp, ("K", "Q"))
        bits = entropy_nlp(kv["K"], kv["Q"])
    else:
        kv = _parse_kv(args.cv, ("M1", "M2", "N3"))
        bits = float(entropy_cv(kv["M1"], kv["M2"], kv["N3"]))
    print(format_bits(bits))
    if args.describe:
        print(describe_bits(bits))
    return 0


def cmd_match(args, rng) -> int:
    x = _read_input(args.input)
    w = match(x, read_mask(args.mask))
    if w is None:
        print("none")
    else:
        print(f"offset={w.offset} constants={w.constants}")
    return 0


# ------------------------------------------------------------------ parser


def _common(suppress: bool) -> argparse.ArgumentParser:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=d(0), help="seed for every random choice")
    p.add_argument("--dump-after", default=d(None), metavar="PASS", help="print the IR right after PASS")
    p.add_argument("--dump-dir", type=Path, default=d(None), help="write --dump-after output here instead")
    p.add_argument("--stealth-names", action="store_true", default=d(False), help="rename emitted functions FUN_<hex>")
    return p


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trojancc", description=__doc__.splitlines()[0], parents=[_common(False)])
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")
    common = _common(True)

    def add(name: str, func, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help, parents=[common])
        p.set_defaults(func=func)
        return p

    p = add("model", cmd_model, "write a desk-scale victim model graph")
    p.add_argument("--kind", choices=("image", "token", "cnn"), required=True)
    p.add_argument("--vocab")
    p.add_argument("--out", required=True)

    p = add("compile", cmd_compile, "lower a graph to an operator module")
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--passes", default="", help="comma separated benign graph passes")

    p = add("infect", cmd_infect, "run the backdoor pass on a graph or module")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--graph")
    src.add_argument("--module")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=("direct", "temporal"))
    p.add_argument("--level", choices=("graph", "operator"))
    p.add_argument("--names", help="three comma separated detector function names")
    p.add_argument("--lower", action="store_true", help="lower a graph-level result to a module")

    p = add("craft-text", cmd_craft_text, "plant a text trigger")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--text", help="raw UTF-8 text file")
    src.add_argument("--tokens", help="whitespace separated token ids")
    p.add_argument("--gaps", type=_gaps, required=True)
    p.add_argument("--K", type=int, default=9)
    p.add_argument("--style", choices=("and", "unk"), default="and")
    p.add_argument("--at", type=int)
    p.add_argument("--filler", default="or")
    p.add_argument("--vocab")
    p.add_argument("--out", required=True)
    p.add_argument("--tensor", help="also write a model-ready .tns token tensor")
    p.add_argument("--length", type=int, default=models.TOKEN_LEN)

    p = add("craft-image", cmd_craft_image, "embed an image trigger patch")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--at", type=_pair)
    p.add_argument("--out", required=True)

    p = add("run", cmd_run, "execute a module or graph on one input")
    p.add_argument("--module", required=True)
    p.add_argument("--input", help="random input from --seed when omitted")
    p.add_argument("--out")
    p.add_argument("--trace")

    p = add("eval", cmd_eval, "attack success rate and benign accuracy decrease")
    p.add_argument("--clean", required=True)
    p.add_argument("--infected", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--benign", type=int, default=1000)
    p.add_argument("--triggered", type=int, default=100)
    p.add_argument("--report")

    p = add("scan", cmd_scan, "count fixed-constant trigger matches in a corpus")
    p.add_argument("--corpus", help="text file (.gz ok); default: the bundled corpus")
    p.add_argument("--mask")
    p.add_argument("--gaps", type=_gaps, default=DEFAULT_NLP_SPEC.gaps)
    p.add_argument("--K", type=int, default=DEFAULT_NLP_SPEC.K)
    p.add_argument("--word", default="and")
    p.add_argument("--vocab")
    p.add_argument("--insert-at", type=int, help="plant one trigger at this token offset first")

    p = add("fuzz", cmd_fuzz, "run-twice input fuzzing defence")
    p.add_argument("--module", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--amplitude", type=int, default=2)
    p.add_argument("--runs", type=int, default=2)
    p.add_argument("--compare", choices=("label", "exact"), default="label")
    p.add_argument("--mask", help="with --trials, also estimate trigger survival")
    p.add_argument("--trials", type=int, default=0)
    p.add_argument("--fail-on-disagree", action="store_true")

    p = add("diff", cmd_diff, "structural diff of two operator modules")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--kv", action="store_true", help="key=value output")

    p = add("entropy", cmd_entropy, "trigger entropy in bits")
    p.add_argument("--nlp", nargs="+", metavar="K=.. Q=..")
    p.add_argument("--cv", nargs="+", metavar="M1=.. M2=.. N3=..")
    p.add_argument("--describe", action="store_true")

    p = add("match", cmd_match, "check an input for a trigger")
    p.add_argument("--input", required=True)
    p.add_argument("--mask", required=True)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    rng = np.random.default_rng(args.seed)
    try:
        return args.func(args, rng)
    except (DomainError, *DOMAIN_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
