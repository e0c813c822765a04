"""Task heads on top of :class:`~dropattention.attention.Encoder`."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from .attention import DropContext, Encoder, glorot
from .dropattn import standard_dropout
from .tensor import Tensor, ShapeError

POOLINGS = ("max", "mean", "first")

# stream ids for head-level dropout, kept clear of per-layer ids
_HEAD_STREAM = 10_000


def pool(H, strategy: str = "max", row_mask: Optional[np.ndarray] = None) -> Tensor:
    """Collapse the row axis of ``[..., l, d]`` to ``[..., d]``, ignoring masked rows."""
    H = T.as_tensor(H)
    if row_mask is not None and not np.asarray(row_mask, dtype=bool).any(axis=-1).all():
        raise ValueError("pool: sequence consists only of padding")
    if strategy == "max":
        return T.max_pool_rows(H, row_mask)
    if strategy == "mean":
        return T.mean_pool_rows(H, row_mask)
    if strategy == "first":
        return T.take_row(H, 0)
    raise ValueError(f"unknown pooling {strategy!r}, expected one of {POOLINGS}")


def entailment_features(u, v) -> Tensor:
    """``[u; v; u - v; u * v]`` along the last axis."""
    u, v = T.as_tensor(u), T.as_tensor(v)
    if u.shape != v.shape:
        raise ShapeError(f"entailment_features: widths differ, {u.shape} vs {v.shape}")
    return T.concat([u, v, T.sub(u, v), T.mul(u, v)], axis=-1)


def _param(a) -> Tensor:
    return Tensor(a, requires_grad=True)


def _head_dropout(x: Tensor, ctx: DropContext, p: float, stream: int) -> Tensor:
    if ctx.training and p > 0:
        return standard_dropout(x, p, ctx.rng(_HEAD_STREAM, stream), "training")
    return x


class Classifier:
    """Encoder -> pooling -> (dropout) -> single linear layer."""

    task = "cls"

    def __init__(self, encoder: Encoder, n_classes: int, rng: np.random.Generator,
                 pooling: str = "max", dtype=np.float32):
        if pooling not in POOLINGS:
            raise ValueError(f"unknown pooling {pooling!r}")
        self.encoder = encoder
        self.pooling = pooling
        self.w = _param(glorot(rng, (encoder.d, n_classes), dtype))
        self.b = _param(np.zeros(n_classes, dtype))

    def named(self) -> dict[str, Tensor]:
        out = {"encoder." + k: v for k, v in self.encoder.named().items()}
        out.update({"head.w": self.w, "head.b": self.b})
        return out

    def logits(self, batch, ctx: DropContext) -> Tensor:
        ctx.key_mask = batch.mask
        h = self.encoder(batch.ids, ctx)
        pooled = _head_dropout(pool(h, self.pooling, batch.mask), ctx, ctx.dropout, 0)
        return T.add(T.matmul(pooled, self.w), self.b)

    def loss(self, batch, ctx: DropContext) -> Tensor:
        return T.cross_entropy(self.logits(batch, ctx), batch.labels)

    def predict(self, batch, ctx: DropContext) -> np.ndarray:
        return self.logits(batch, ctx).data.argmax(axis=-1)


class Tagger:
    """Per-token linear layer over encoder states."""

    task = "tag"

    def __init__(self, encoder: Encoder, n_tags: int, rng: np.random.Generator, dtype=np.float32):
        self.encoder = encoder
        self.w = _param(glorot(rng, (encoder.d, n_tags), dtype))
        self.b = _param(np.zeros(n_tags, dtype))

    def named(self) -> dict[str, Tensor]:
        out = {"encoder." + k: v for k, v in self.encoder.named().items()}
        out.update({"head.w": self.w, "head.b": self.b})
        return out

    def logits(self, batch, ctx: DropContext) -> Tensor:
        ctx.key_mask = batch.mask
        h = _head_dropout(self.encoder(batch.ids, ctx), ctx, ctx.dropout, 0)
        return T.add(T.matmul(h, self.w), self.b)

    def loss(self, batch, ctx: DropContext) -> Tensor:
        return T.cross_entropy(self.logits(batch, ctx), batch.labels, weights=batch.mask)

    def predict(self, batch, ctx: DropContext) -> np.ndarray:
        return self.logits(batch, ctx).data.argmax(axis=-1)


class EntailmentModel:
    """Siamese encoder over premise and hypothesis, max-pooled, then a 2-layer ReLU MLP."""

    task = "nli"

    def __init__(self, encoder: Encoder, n_classes: int, rng: np.random.Generator, hidden: int | None = None,
                 pooling: str = "max", dtype=np.float32):
        d = encoder.d
        hidden = hidden or d
        self.encoder = encoder
        self.pooling = pooling
        self.w1 = _param(glorot(rng, (4 * d, hidden), dtype))
        self.b1 = _param(np.zeros(hidden, dtype))
        self.w2 = _param(glorot(rng, (hidden, n_classes), dtype))
        self.b2 = _param(np.zeros(n_classes, dtype))

    def named(self) -> dict[str, Tensor]:
        out = {"encoder." + k: v for k, v in self.encoder.named().items()}
        out.update({"head.w1": self.w1, "head.b1": self.b1, "head.w2": self.w2, "head.b2": self.b2})
        return out

    def encode(self, ids, mask, ctx: DropContext) -> Tensor:
        ctx.key_mask = mask
        return pool(self.encoder(ids, ctx), self.pooling, mask)

    def features(self, batch, ctx: DropContext) -> Tensor:
        # the two sides must not share random streams
        ctx_h = DropContext(ctx.training, ctx.drop, ctx.dropout,
                            None if ctx.seed is None else np.random.SeedSequence(
                                ctx.seed.entropy, spawn_key=tuple(ctx.seed.spawn_key) + (1,)),
                            ctx.drop_layers, None, ctx.capture)
        u = self.encode(batch.ids, batch.mask, ctx)
        v = self.encode(batch.ids2, batch.mask2, ctx_h)
        return entailment_features(u, v)

    def logits(self, batch, ctx: DropContext) -> Tensor:
        f = _head_dropout(self.features(batch, ctx), ctx, ctx.dropout, 0)
        hid = T.relu(T.add(T.matmul(f, self.w1), self.b1))
        return T.add(T.matmul(hid, self.w2), self.b2)

    def loss(self, batch, ctx: DropContext) -> Tensor:
        return T.cross_entropy(self.logits(batch, ctx), batch.labels)

    def predict(self, batch, ctx: DropContext) -> np.ndarray:
        return self.logits(batch, ctx).data.argmax(axis=-1)
