"""Researcher and defender harness: attack metrics, corpus scans, the
run-twice fuzzing defence, and structural diffs of compiled modules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from trojancc.graph_ir import Graph
from trojancc.lowering import OperatorModule, dumps_module, loads_module, walk
from trojancc.runtime import Scheduler, execute, execute_graph_batch
from trojancc.tensor import Tensor
from trojancc.trigger_core import Mask, TriggerMask1D, TriggerMask2D, fixed_constant_hits, match, window_hits_2d

BatchExec = Callable[[np.ndarray], np.ndarray]


class EvalError(ValueError):
    pass


def graph_executor(graph: Graph) -> BatchExec:
    return lambda batch: execute_graph_batch(graph, batch)


def module_executor(module: OperatorModule, scheduler: Scheduler | None = None) -> BatchExec:
    def run(batch: np.ndarray) -> np.ndarray:
        return np.stack([execute(module, x, scheduler).array for x in batch])

    return run


def _bitwise_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-row bitwise equality (so NaN == NaN and 0.0 != -0.0)."""
    n = len(a)
    va = np.ascontiguousarray(a).view(np.uint8).reshape(n, -1)
    vb = np.ascontiguousarray(b).view(np.uint8).reshape(n, -1)
    return (va == vb).all(axis=1)


def _labels_of(outputs: np.ndarray) -> np.ndarray:
    return outputs.reshape(len(outputs), -1).argmax(axis=1)


# ------------------------------------------------------------ ASR / BAD


@dataclass(frozen=True)
class EvalReport:
    asr: float
    bad: float
    mismatches: int
    n_triggered: int
    n_benign: int
    clean_accuracy: float
    infected_accuracy: float
    benign_payload_hits: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.asr <= 1.0:
            raise EvalError(f"asr {self.asr} outside [0, 1]")
        if self.mismatches == 0 and self.bad != 0.0:
            raise EvalError("zero mismatches but non-zero accuracy decrease")

    def to_kv(self) -> str:
        rows = [
            ("asr", f"{self.asr:.4f}"),
            ("bad", f"{self.bad:.4f}"),
            ("mismatches", self.mismatches),
            ("n_triggered", self.n_triggered),
            ("n_benign", self.n_benign),
            ("clean_accuracy", f"{self.clean_accuracy:.4f}"),
            ("infected_accuracy", f"{self.infected_accuracy:.4f}"),
            ("benign_payload_hits", self.benign_payload_hits),
        ]
        return "".join(f"{k}={v}\n" for k, v in rows)

    def to_text(self) -> str:
        return (
            f"attack success rate   {100 * self.asr:.1f}% of {self.n_triggered} triggered inputs\n"
            f"benign accuracy drop  {100 * self.bad:.1f} points over {self.n_benign} benign inputs\n"
            f"  clean accuracy      {100 * self.clean_accuracy:.1f}%\n"
            f"  infected accuracy   {100 * self.infected_accuracy:.1f}%\n"
            f"  bitwise mismatches  {self.mismatches}\n"
        )


def measure(
    clean_exec: BatchExec,
    infected_exec: BatchExec,
    benign: np.ndarray,
    triggered: np.ndarray,
    payload: Tensor,
    labels: np.ndarray | None = None,
    mask: Mask | None = None,
) -> EvalReport:
    """ASR on ``triggered`` and accuracy/bitwise drift on ``benign``.

    Without ``labels`` the clean model's own predictions serve as ground
    truth, so clean accuracy is 1.  With ``mask`` every triggered input is
    checked to really carry the trigger first.
    """
    benign, triggered = np.asarray(benign), np.asarray(triggered)
    if mask is not None:
        bad_rows = [i for i, x in enumerate(triggered) if match(x, mask) is None]
        if bad_rows:
            raise EvalError(f"{len(bad_rows)} triggered inputs do not satisfy the trigger (first: {bad_rows[0]})")
    clean_b = np.asarray(clean_exec(benign))
    inf_b = np.asarray(infected_exec(benign))
    if clean_b.shape != inf_b.shape or clean_b.dtype != inf_b.dtype:
        raise EvalError(f"signature mismatch: {clean_b.shape} {clean_b.dtype} vs {inf_b.shape} {inf_b.dtype}")
    if clean_b.shape[1:] != payload.shape:
        raise EvalError(f"payload shape {payload.shape} does not match outputs {clean_b.shape[1:]}")
    inf_t = np.asarray(infected_exec(triggered)) if len(triggered) else clean_b[:0]
    want = np.broadcast_to(payload.array, inf_t.shape)
    hits = _bitwise_rows(inf_t, want) if len(inf_t) else np.zeros(0, bool)

    same = _bitwise_rows(clean_b, inf_b)
    truth = _labels_of(clean_b) if labels is None else np.asarray(labels)
    acc_c = float((_labels_of(clean_b) == truth).mean()) if len(benign) else 0.0
    acc_i = float((_labels_of(inf_b) == truth).mean()) if len(benign) else 0.0
    payload_rows = _bitwise_rows(inf_b, np.broadcast_to(payload.array, inf_b.shape))
    return EvalReport(
        asr=float(hits.mean()) if len(hits) else 0.0,
        bad=acc_c - acc_i,
        mismatches=int((~same).sum()),
        n_triggered=len(triggered),
        n_benign=len(benign),
        clean_accuracy=acc_c,
        infected_accuracy=acc_i,
        benign_payload_hits=int(payload_rows.sum()),
    )


def plant_triggers(base: np.ndarray, mask: Mask, rng: np.random.Generator) -> tuple[np.ndarray, list]:
    """Plant ``mask`` at a random position of every input in ``base``.

    Images get the steganographic patch; token streams get the "and" form.
    Returns the triggered batch and the chosen positions.
    """
    from trojancc.trigger_craft import PatchSpec, TokenStream, craft_mask_trigger, embed_image_patch, load_vocab

    out, where = [], []
    vocab = None
    for x in np.asarray(base):
        if isinstance(mask, TriggerMask2D):
            m1, m2, _ = mask.shape
            at = (int(rng.integers(0, x.shape[0] - m1 + 1)), int(rng.integers(0, x.shape[1] - m2 + 1)))
            out.append(embed_image_patch(Tensor.from_array(x), PatchSpec(at, mask)).image.array)
        else:
            vocab = vocab or load_vocab()
            at = int(rng.integers(0, x.shape[0] - len(mask) + 1))
            out.append(craft_mask_trigger(TokenStream(x, vocab), mask, at).tokens)
        where.append(at)
    if not out:
        return np.asarray(base)[:0].copy(), where
    return np.stack(out), where


def eval_sets(shape, kind: str, mask: Mask, n_benign: int, n_triggered: int, rng: np.random.Generator):
    """Labelled benign samples and freshly triggered samples for the
    desk-scale image or token models."""
    from trojancc import models
    from trojancc.trigger_craft import load_vocab

    shape = tuple(shape)
    if kind == "uint8" and shape == models.IMAGE_SHAPE:
        sample = lambda n: models.sample_images(n, rng)  # noqa: E731
    elif kind == "int32" and shape == (models.TOKEN_LEN,):
        size = len(load_vocab())
        sample = lambda n: models.sample_token_streams(n, rng, size)  # noqa: E731
    else:
        raise EvalError(f"no input generator for signature {shape} {kind}")
    benign = sample(n_benign)
    triggered, _ = plant_triggers(sample(n_triggered).inputs, mask, rng)
    return benign, triggered


# ------------------------------------------------------------ corpus scan


@dataclass(frozen=True)
class ScanResult:
    count: int
    positions: tuple[int, ...]
    tokens_scanned: int


def scan_corpus(chunks: np.ndarray | Iterable[np.ndarray], mask: TriggerMask1D, a: int) -> ScanResult:
    """Offsets where the mask holds with the fixed constant ``a``.

    Accepts one array or an iterable of chunks; only ``len(mask) - 1``
    tokens are carried between chunks, so memory does not grow with the
    corpus (beyond the list of hits).
    """
    if isinstance(chunks, np.ndarray):
        chunks = [chunks]
    m = len(mask)
    tail = np.zeros(0, dtype=np.int64)
    base = 0  # absolute offset of tail[0]
    positions: list[int] = []
    total = 0
    for chunk in chunks:
        chunk = np.asarray(chunk, dtype=np.int64).reshape(-1)
        total += chunk.size
        window = np.concatenate([tail, chunk])
        if window.size >= m:
            hits = np.flatnonzero(fixed_constant_hits(window, mask, a))
            positions.extend(int(base + h) for h in hits)
            keep = m - 1
            base += window.size - keep
            tail = window[window.size - keep :]
        else:
            tail = window
    return ScanResult(len(positions), tuple(positions), total)


# ------------------------------------------------------------- fuzzing


@dataclass(frozen=True)
class FuzzVerdict:
    runs: tuple[Tensor, ...]
    agree: bool
    noise_amplitude: int


def add_noise(x: np.ndarray, amplitude: int, rng: np.random.Generator) -> np.ndarray:
    noise = rng.integers(-amplitude, amplitude + 1, size=x.shape)
    return np.clip(x.astype(np.int64) + noise, 0, 255).astype(np.uint8)


def fuzz_defence(
    run: Callable[[Tensor], Tensor],
    x: Tensor,
    amplitude: int,
    runs: int = 2,
    seed: int = 0,
    compare: str = "label",
) -> FuzzVerdict:
    """Run once on ``x`` and ``runs - 1`` times on noisy copies.

    ``compare="label"`` checks that the argmax agrees, ``"exact"`` demands
    bitwise equal outputs.  Disagreement flags a probable backdoor.
    """
    if amplitude < 1:
        raise EvalError("noise amplitude must be at least 1")
    if runs < 2:
        raise EvalError("the defence needs at least two runs")
    if x.elem_kind != "uint8":
        raise EvalError(f"fuzzing expects uint8 inputs, got {x.elem_kind}")
    if compare not in ("label", "exact"):
        raise EvalError(f"unknown comparison {compare!r}")
    rng = np.random.default_rng(seed)
    outs = [run(x)]
    for _ in range(runs - 1):
        outs.append(run(Tensor.from_array(add_noise(x.array, amplitude, rng), "uint8")))
    if compare == "exact":
        agree = all(o == outs[0] for o in outs[1:])
    else:
        labels = {int(np.argmax(o.array)) for o in outs}
        agree = len(labels) == 1
    return FuzzVerdict(tuple(outs), agree, amplitude)


def survival_bound(ones: int, amplitude: int) -> float:
    """Chance that noise keeps every s=1 pixel on its constant."""
    return (1.0 / (2 * amplitude + 1)) ** ones


def binomial_upper_tail(k: int, n: int, p: float) -> float:
    """P(X >= k) for X ~ Binomial(n, p)."""
    if k <= 0:
        return 1.0
    if k > n:
        return 0.0
    below = sum(math.comb(n, i) * p**i * (1 - p) ** (n - i) for i in range(k))
    return max(0.0, 1.0 - below)


@dataclass(frozen=True)
class SurvivalReport:
    trials: int
    survivals: int
    amplitude: int
    bound: float
    tail_probability: float  # P(survivals >= observed) if the bound were the true rate

    @property
    def rate(self) -> float:
        return self.survivals / self.trials

    @property
    def within_bound(self) -> bool:
        return self.tail_probability >= 0.01

    def to_kv(self) -> str:
        return (
            f"trials={self.trials}\nsurvivals={self.survivals}\nrate={self.rate:.6f}\n"
            f"amplitude={self.amplitude}\nbound={self.bound:.6e}\n"
            f"tail_probability={self.tail_probability:.6f}\nwithin_bound={str(self.within_bound).lower()}\n"
        )


def trigger_survival(image: np.ndarray, mask: TriggerMask2D, amplitude: int, trials: int, seed: int = 0) -> SurvivalReport:
    """Monte-Carlo: how often does the trigger still match after noise."""
    if amplitude < 1:
        raise EvalError("noise amplitude must be at least 1")
    rng = np.random.default_rng(seed)
    survivals = 0
    for _ in range(trials):
        noisy = add_noise(np.asarray(image), amplitude, rng)
        if window_hits_2d(noisy.astype(np.int64), mask).any():
            survivals += 1
    bound = survival_bound(mask.ones, amplitude)
    return SurvivalReport(trials, survivals, amplitude, bound, binomial_upper_tail(survivals, trials, bound))


# ------------------------------------------------------------- module diff


@dataclass(frozen=True)
class DiffReport:
    added: tuple[str, ...]
    removed: tuple[str, ...]
    statement_delta: int
    line_delta: int
    entry_changed: bool
    statements: dict[str, tuple[int, int]] = field(default_factory=dict)  # name -> (before, after)

    @property
    def empty(self) -> bool:
        return not self.added and not self.removed and not self.entry_changed and self.statement_delta == 0

    def to_kv(self) -> str:
        return (
            f"added={','.join(self.added)}\nremoved={','.join(self.removed)}\n"
            f"added_count={len(self.added)}\nremoved_count={len(self.removed)}\n"
            f"statement_delta={self.statement_delta}\nline_delta={self.line_delta}\n"
            f"entry_changed={str(self.entry_changed).lower()}\n"
        )

    def to_text(self) -> str:
        lines = [f"{len(self.added)} added, {len(self.removed)} removed functions"]
        lines += [f"  + {n}" for n in self.added]
        lines += [f"  - {n}" for n in self.removed]
        lines.append(f"statements {self.statement_delta:+d}, text lines {self.line_delta:+d}")
        lines.append("entry function " + ("changed" if self.entry_changed else "unchanged"))
        return "\n".join(lines) + "\n"


def _body_lines(text: str, func: str) -> list[str]:
    out, inside = [], False
    for line in text.splitlines():
        s = line.strip()
        if s.startswith("func "):
            inside = s.split()[1] == func
        elif s == "end":
            inside = False
        elif inside:
            out.append(s)
    return out


def diff_texts(text_a: str, text_b: str) -> DiffReport:
    """Diff two serialized modules."""
    a, b = loads_module(text_a), loads_module(text_b)
    fa, fb = set(a.function_names), set(b.function_names)

    def count(m: OperatorModule, name: str) -> int:
        return sum(1 for _ in walk(m.function(name).body))

    stats = {}
    for name in sorted(fa | fb):
        stats[name] = (count(a, name) if name in fa else 0, count(b, name) if name in fb else 0)
    nonblank = lambda t: sum(1 for ln in t.splitlines() if ln.strip())  # noqa: E731
    return DiffReport(
        added=tuple(n for n in b.function_names if n not in fa),
        removed=tuple(n for n in a.function_names if n not in fb),
        statement_delta=sum(after - before for before, after in stats.values()),
        line_delta=nonblank(text_b) - nonblank(text_a),
        entry_changed=a.entry != b.entry or _body_lines(text_a, a.entry) != _body_lines(text_b, b.entry),
        statements=stats,
    )


def diff_modules(a: OperatorModule, b: OperatorModule) -> DiffReport:
    return diff_texts(dumps_module(a), dumps_module(b))
