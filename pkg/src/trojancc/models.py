"""Fixed-weight desk-scale victim models and the synthetic data they classify.

Hidden layers use seeded random weights; the output layer is a ridge fit on
synthetic labelled samples so that accuracy is meaningful.  Everything is a
pure function of the seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from trojancc.graph_ir import Graph, GraphBuilder, OpKind, check
from trojancc.tensor import Tensor

IMAGE_SHAPE = (32, 32, 3)
IMAGE_CLASSES = 10
TOKEN_LEN = 64
TOKEN_CLASSES = 4
HIDDEN = 64

# ten well separated base colours, one per image class
_PALETTE = np.array(
    [
        [200, 40, 40], [40, 200, 40], [40, 40, 200], [200, 200, 40], [200, 40, 200],
        [40, 200, 200], [120, 120, 120], [230, 150, 60], [90, 50, 140], [30, 110, 70],
    ],
    dtype=np.float64,
)


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # (n, *input_shape)
    labels: np.ndarray  # (n,) int

    def __len__(self) -> int:
        return len(self.labels)

    def tensors(self) -> list[Tensor]:
        return [Tensor.from_array(x) for x in self.inputs]


def sample_images(n: int, rng: np.random.Generator, noise: float = 45.0) -> Dataset:
    """Class = base colour; per-image brightness gradient plus pixel noise."""
    labels = rng.integers(0, IMAGE_CLASSES, size=n)
    h, w, _ = IMAGE_SHAPE
    ramp = np.linspace(-1.0, 1.0, w)[None, :, None] * rng.uniform(-30, 30, size=(n, 1, 1, 1))
    base = _PALETTE[labels][:, None, None, :]
    imgs = base + ramp + rng.normal(0.0, noise, size=(n, h, w, 3))
    return Dataset(np.clip(np.rint(imgs), 0, 255).astype(np.uint8), labels)


def _topic_weights(vocab_size: int, first_content: int, seed: int) -> np.ndarray:
    """Per-topic unigram distributions: a Zipf background plus a topic block."""
    rng = np.random.default_rng(seed)
    ranks = np.arange(1, vocab_size + 1, dtype=np.float64)
    background = 1.0 / ranks
    out = np.empty((TOKEN_CLASSES, vocab_size))
    content = np.arange(first_content, vocab_size)
    for t in range(TOKEN_CLASSES):
        w = background.copy()
        w[rng.choice(content, size=40, replace=False)] += 0.03
        out[t] = w / w.sum()
    return out


def sample_token_streams(n: int, rng: np.random.Generator, vocab_size: int, and_id: int = 2, seed: int = 7) -> Dataset:
    """Topic-labelled id streams of length TOKEN_LEN; ids 0..3 are reserved
    words ([PAD], [UNK], and, or) and "and" keeps a natural ~3% rate."""
    weights = _topic_weights(vocab_size, 16, seed)
    weights[:, :2] = 0.0
    weights[:, and_id] = 0.0
    weights /= weights.sum(axis=1, keepdims=True)
    weights *= 0.97
    weights[:, and_id] = 0.03
    labels = rng.integers(0, TOKEN_CLASSES, size=n)
    ids = np.empty((n, TOKEN_LEN), dtype=np.int32)
    for t in range(TOKEN_CLASSES):
        rows = np.flatnonzero(labels == t)
        ids[rows] = rng.choice(vocab_size, size=(rows.size, TOKEN_LEN), p=weights[t])
    return Dataset(ids, labels)


def _ridge(features: np.ndarray, labels: np.ndarray, classes: int, lam: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    x = np.hstack([features, np.ones((len(features), 1))])
    y = np.eye(classes)[labels] * 2.0 - 1.0
    sol = np.linalg.solve(x.T @ x + lam * np.eye(x.shape[1]), x.T @ y)
    return sol[:-1].astype(np.float32), sol[-1:].astype(np.float32)


def _mlp_head(b: GraphBuilder, flat: str, w1, b1, w2, b2) -> str:
    h = b.op(OpKind.MATMUL, flat, b.const(w1, "w1"), name="dense1")
    h = b.op(OpKind.ADD, h, b.const(b1, "b1"), name="bias1")
    h = b.op(OpKind.RELU, h, name="relu1")
    y = b.op(OpKind.MATMUL, h, b.const(w2, "w2"), name="dense2")
    return b.op(OpKind.ADD, y, b.const(b2, "b2"), name="logits")


def image_mlp(seed: int = 0, train: int = 2000) -> Graph:
    """uint8 32x32x3 image -> (1, 10) float32 logits."""
    rng = np.random.default_rng(seed)
    d = int(np.prod(IMAGE_SHAPE))
    w1 = (rng.normal(0, 1, size=(d, HIDDEN)) / np.sqrt(d) * 4.0).astype(np.float32)
    b1 = rng.normal(0, 0.1, size=(1, HIDDEN)).astype(np.float32)
    data = sample_images(train, rng)
    feats = np.maximum(data.inputs.reshape(train, d).astype(np.float32) / np.float32(255) @ w1 + b1, 0)
    w2, b2 = _ridge(feats.astype(np.float64), data.labels, IMAGE_CLASSES)

    b = GraphBuilder()
    x = b.input(IMAGE_SHAPE, "uint8", name="image")
    f = b.op(OpKind.CAST, x, name="to_float", dtype="float32")
    f = b.op(OpKind.MUL, f, b.const(np.array([1 / 255], np.float32), "scale"), name="scaled")
    f = b.op(OpKind.RESHAPE, f, name="flatten", shape=(1, d))
    return check(b.build([_mlp_head(b, f, w1, b1, w2, b2)]))


def token_mlp(vocab_size: int, seed: int = 0, dim: int = 16, train: int = 2000) -> Graph:
    """int32 (64,) token ids -> (1, 4) float32 logits via an embedding table."""
    rng = np.random.default_rng(seed)
    table = rng.normal(0, 0.1, size=(vocab_size, dim))
    # the first columns carry per-topic log-odds, so summing over positions
    # (first layer weights are tied across positions) reads out the topic
    topics = _topic_weights(vocab_size, 16, 7)
    table[:, :TOKEN_CLASSES] = np.log(topics / topics.mean(axis=0)).T
    table = table.astype(np.float32)
    d = TOKEN_LEN * dim
    shared = rng.normal(0, 1, size=(dim, HIDDEN)) / np.sqrt(TOKEN_LEN * dim) * 4.0
    w1 = np.tile(shared, (TOKEN_LEN, 1)).astype(np.float32)
    b1 = rng.normal(0, 0.1, size=(1, HIDDEN)).astype(np.float32)
    data = sample_token_streams(train, rng, vocab_size)
    emb = table[data.inputs].reshape(train, d)
    feats = np.maximum(emb @ w1 + b1, 0)
    w2, b2 = _ridge(feats.astype(np.float64), data.labels, TOKEN_CLASSES)

    b = GraphBuilder()
    x = b.input((TOKEN_LEN,), "int32", name="tokens")
    e = b.op(OpKind.EMBEDDING_LOOKUP, x, b.const(table, "embedding"), name="embed")
    f = b.op(OpKind.RESHAPE, e, name="flatten", shape=(1, d))
    return check(b.build([_mlp_head(b, f, w1, b1, w2, b2)]))


def image_cnn(seed: int = 0, filters: int = 4) -> Graph:
    """Small conv net over 8x8x3 uint8 patches; exercises Conv2DLite and Softmax."""
    rng = np.random.default_rng(seed)
    k = rng.normal(0, 0.3, size=(3, 3, 3, filters)).astype(np.float32)
    d = 6 * 6 * filters
    w = rng.normal(0, 0.2, size=(d, 5)).astype(np.float32)
    b = GraphBuilder()
    x = b.input((8, 8, 3), "uint8", name="image")
    f = b.op(OpKind.CAST, x, name="to_float", dtype="float32")
    f = b.op(OpKind.MUL, f, b.const(np.array([1 / 255], np.float32), "scale"), name="scaled")
    c = b.op(OpKind.CONV2D_LITE, f, b.const(k, "kernel"), name="conv")
    c = b.op(OpKind.RELU, c, name="relu")
    c = b.op(OpKind.RESHAPE, c, name="flatten", shape=(1, d))
    y = b.op(OpKind.MATMUL, c, b.const(w, "dense"), name="dense")
    return check(b.build([b.op(OpKind.SOFTMAX, y, name="probs")]))


def one_hot_payload(classes: int, target: int, high: float = 10.0, low: float = -10.0) -> Tensor:
    """Logits that make ``target`` the argmax by a wide margin."""
    if not 0 <= target < classes:
        raise ValueError(f"target {target} outside [0, {classes})")
    logits = np.full((1, classes), low, dtype=np.float32)
    logits[0, target] = high
    return Tensor.from_array(logits)


def predict(logits: np.ndarray) -> np.ndarray:
    """Argmax over the last axis of a (B, 1, C) logits batch."""
    return np.asarray(logits).reshape(len(logits), -1).argmax(axis=1)
