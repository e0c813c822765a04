"""Multi-head self-attention and the pre-LN Transformer encoder layer."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .dropattn import DropSpec, apply_dropattention, standard_dropout
from .tensor import Tensor, ShapeError

WeightTransform = Callable[[Tensor], Tensor]


def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return T.transpose(t, axes)


def glorot(rng: np.random.Generator, shape, dtype=np.float32, fan=None) -> np.ndarray:
    fan_in, fan_out = fan or (shape[-2], shape[-1])
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


@dataclass
class AttentionParams:
    """Per-head projections stacked on a leading head axis.

    ``wq[i]``, ``wk[i]``, ``wv[i]`` are the ``d x d_k`` projections of head
    ``i``; ``wo`` maps the concatenated heads (``h * d_k``) back to ``d``.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    def __post_init__(self):
        h, d, d_k = self.wq.shape
        for name in ("wk", "wv"):
            if getattr(self, name).shape != (h, d, d_k):
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {(h, d, d_k)}")
        if self.wo.shape != (h * d_k, d):
            raise ShapeError(f"wo has shape {self.wo.shape}, expected {(h * d_k, d)}")

    @property
    def heads(self) -> int:
        return self.wq.shape[0]

    @property
    def d_k(self) -> int:
        return self.wq.shape[2]

    @classmethod
    def init(cls, d: int, h: int, rng: np.random.Generator, dtype=np.float32) -> "AttentionParams":
        if d % h:
            raise ShapeError(f"model width {d} is not divisible by {h} heads")
        d_k = d // h
        mk = lambda: Tensor(glorot(rng, (h, d, d_k), dtype, fan=(d, d_k)), requires_grad=True)
        return cls(mk(), mk(), mk(), Tensor(glorot(rng, (h * d_k, d), dtype), requires_grad=True))

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + k: getattr(self, k) for k in ("wq", "wk", "wv", "wo")}


@dataclass
class EncoderLayerParams:
    attn: AttentionParams
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    @classmethod
    def init(cls, d: int, d_ff: int, h: int, rng: np.random.Generator, dtype=np.float32):
        p = lambda a: Tensor(a, requires_grad=True)
        return cls(
            attn=AttentionParams.init(d, h, rng, dtype),
            w1=p(glorot(rng, (d, d_ff), dtype)),
            b1=p(np.zeros(d_ff, dtype)),
            w2=p(glorot(rng, (d_ff, d), dtype)),
            b2=p(np.zeros(d, dtype)),
            ln1_gain=p(np.ones(d, dtype)),
            ln1_bias=p(np.zeros(d, dtype)),
            ln2_gain=p(np.ones(d, dtype)),
            ln2_bias=p(np.zeros(d, dtype)),
        )

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        out = self.attn.named(prefix + "attn.")
        for k in ("w1", "b1", "w2", "b2", "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"):
            out[prefix + k] = getattr(self, k)
        return out


@dataclass
class DropContext:
    """Everything stochastic about one forward pass.

    ``seed`` keys the random streams; each (layer, purpose) pair gets its own
    stream split off it, so the draws do not depend on evaluation order.
    ``drop_layers`` restricts attention dropout to the listed layer indices
    (``None`` means every layer).  ``capture``, when a list, receives the
    ``(layer, weights_used, key_mask)`` for every layer.
    """

    training: bool = False
    drop: Optional[DropSpec] = None
    dropout: float = 0.0
    seed: Optional[np.random.SeedSequence] = None
    drop_layers: Optional[frozenset] = None
    key_mask: Optional[np.ndarray] = None
    capture: Optional[list] = field(default=None, repr=False)

    def rng(self, layer: int, purpose: int) -> np.random.Generator:
        if self.seed is None:
            raise ValueError("training-mode forward pass needs a seed")
        ss = np.random.SeedSequence(self.seed.entropy, spawn_key=tuple(self.seed.spawn_key) + (layer, purpose))
        return np.random.default_rng(ss)

    @property
    def mode(self) -> str:
        return "training" if self.training else "inference"

    def attention_transform(self, layer: int) -> Optional[WeightTransform]:
        if not self.training or self.drop is None or self.drop.p == 0:
            return None
        if self.drop_layers is not None and layer not in self.drop_layers:
            return None
        spec = self.drop.with_mode("training")
        rng = self.rng(layer, 0)
        return lambda lam: apply_dropattention(lam, spec, rng)


def scaled_dot_attention(H, wq, wk, wv, weight_transform: Optional[WeightTransform] = None,
                         key_mask: Optional[np.ndarray] = None):
    """``softmax(Q K^T / sqrt(d_k))`` applied to ``V``.

    Works on any leading batch axes that broadcast between ``H`` and the
    weights.  ``key_mask`` (boolean, broadcastable to ``[..., l]``) marks the
    keys that may be attended to.  Returns ``(output, weights_used)``.
    """
    q, k, v = T.matmul(H, wq), T.matmul(H, wk), T.matmul(H, wv)
    d_k = q.shape[-1]
    scores = T.scale(T.matmul(q, _swap_last(k)), 1.0 / math.sqrt(d_k))
    mask = None if key_mask is None else np.asarray(key_mask, dtype=bool)[..., None, :]
    lam = T.softmax_rows(scores, mask)
    if weight_transform is not None:
        used = weight_transform(lam)
        if used.shape != lam.shape:
            raise ValueError(f"weight transform changed shape {lam.shape} -> {used.shape}")
    else:
        used = lam
    return T.matmul(used, v), used


def multi_head(H, params: AttentionParams, weight_transform: Optional[WeightTransform] = None,
               key_mask: Optional[np.ndarray] = None):
    """Concatenated heads times ``W^O``: ``[..., l, d] -> [..., l, d]``.

    The transform sees the stacked ``[..., h, l, l]`` weights, so a sampling
    transform draws one independent mask per head.  Returns ``(output, weights_used)``.
    """
    H = T.as_tensor(H)
    if H.shape[-1] != params.wq.shape[1]:
        raise ShapeError(f"input width {H.shape[-1]} does not match attention width {params.wq.shape[1]}")
    if key_mask is not None:
        key_mask = np.expand_dims(np.asarray(key_mask, dtype=bool), -2)
    heads, used = scaled_dot_attention(T.expand_dims(H, -3), params.wq, params.wk, params.wv,
                                       weight_transform, key_mask)
    nd = heads.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    merged = T.reshape(T.transpose(heads, axes), H.shape[:-1] + (params.heads * params.d_k,))
    return T.matmul(merged, params.wo), used


def mlp(x, p: EncoderLayerParams) -> Tensor:
    return T.add(T.matmul(T.relu(T.add(T.matmul(x, p.w1), p.b1)), p.w2), p.b2)


def encoder_layer(H, params: EncoderLayerParams, ctx: Optional[DropContext] = None, layer: int = 0,
                  eps: float = 1e-5) -> Tensor:
    """``Z = H + MultiHead(LN(H))``; ``out = Z + MLP(LN(Z))``.

    Standard dropout, when enabled in ``ctx``, hits the attention and MLP
    outputs before each residual addition.
    """
    ctx = ctx or DropContext()
    attn_out, used = multi_head(T.layer_norm(H, params.ln1_gain, params.ln1_bias, eps), params.attn,
                                ctx.attention_transform(layer), ctx.key_mask)
    if ctx.capture is not None:
        ctx.capture.append((layer, used.data, ctx.key_mask))
    if ctx.training and ctx.dropout > 0:
        attn_out = standard_dropout(attn_out, ctx.dropout, ctx.rng(layer, 1), "training")
    z = T.add(H, attn_out)
    ff = mlp(T.layer_norm(z, params.ln2_gain, params.ln2_bias, eps), params)
    if ctx.training and ctx.dropout > 0:
        ff = standard_dropout(ff, ctx.dropout, ctx.rng(layer, 2), "training")
    return T.add(z, ff)


def sinusoidal_pe(l: int, d: int, dtype=np.float32) -> np.ndarray:
    """Fixed positional table: ``sin`` on even, ``cos`` on odd columns."""
    if d % 2:
        raise ValueError(f"positional embedding width must be even, got {d}")
    pos = np.arange(l, dtype=np.float64)[:, None]
    rates = 10000.0 ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.zeros((l, d))
    pe[:, 0::2] = np.sin(pos * rates)
    pe[:, 1::2] = np.cos(pos * rates)
    return pe.astype(dtype)


class Encoder:
    """Token embedding + positional table + stacked pre-LN layers + final LN."""

    def __init__(self, vocab_size: int, d: int, d_ff: int, heads: int, layers: int, max_len: int,
                 rng: np.random.Generator, dtype=np.float32):
        if d % heads:
            raise ShapeError(f"model width {d} is not divisible by {heads} heads")
        self.d = d
        self.max_len = max_len
        self.embedding = Tensor(rng.normal(0.0, 1.0, (vocab_size, d)).astype(dtype), requires_grad=True)
        self.layers = [EncoderLayerParams.init(d, d_ff, heads, rng, dtype) for _ in range(layers)]
        self.final_gain = Tensor(np.ones(d, dtype), requires_grad=True)
        self.final_bias = Tensor(np.zeros(d, dtype), requires_grad=True)
        self._pe = sinusoidal_pe(max_len, d, dtype)

    def named(self) -> dict[str, Tensor]:
        out = {"embedding": self.embedding}
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"layer{i}."))
        out["final_ln.gain"] = self.final_gain
        out["final_ln.bias"] = self.final_bias
        return out

    def __call__(self, ids: np.ndarray, ctx: Optional[DropContext] = None) -> Tensor:
        ids = np.asarray(ids)
        l = ids.shape[-1]
        if l > self.max_len:
            raise ShapeError(f"sequence length {l} exceeds max_len {self.max_len}")
        ctx = ctx or DropContext()
        h = T.add(T.embedding_lookup(self.embedding, ids), self._pe[:l])
        for i, layer in enumerate(self.layers):
            h = encoder_layer(h, layer, ctx, i)
        return T.layer_norm(h, self.final_gain, self.final_bias)
