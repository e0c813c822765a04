"""Diagnostics over attention weights captured at inference time.

* entropy of one attention row (how concentrated a head is),
* Div, ``||A A^T - I||_F^2`` over the per-head rows of one query,
* Disagreement, the mean pairwise cosine between those rows (diagonal included),
* the distribution of each row's largest weight scaled by sentence length.

Div and Disagreement need a choice of what a "row of A" is.  Both are
reported per query position (``*_query``) and on the per-sentence mean
attention of each head (``*_sentence``).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .attention import DropContext

ROW_SUM_TOL = 1e-6


@dataclass
class AttentionCapture:
    """Inference-time weights of one layer for one sentence, cropped to its real tokens."""

    layer: int
    weights: np.ndarray  # (h, l, l)

    @property
    def length(self) -> int:
        return self.weights.shape[-1]

    @property
    def heads(self) -> int:
        return self.weights.shape[0]


def entropy_score(row) -> float:
    """``-sum a ln a`` with ``0 ln 0 = 0``."""
    a = np.asarray(row, dtype=np.float64)
    if (a < 0).any():
        raise ValueError("entropy_score: attention weights must be nonnegative")
    if abs(a.sum() - 1.0) > ROW_SUM_TOL:
        raise ValueError(f"entropy_score: row sums to {a.sum()!r}, not 1")
    nz = a[a > 0]
    return float(-(nz * np.log(nz)).sum())


def div_score(A) -> float:
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    G = A @ A.T
    return float(((G - np.eye(A.shape[0])) ** 2).sum())


def disagreement_score(A) -> float:
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    norms = np.linalg.norm(A, axis=1)
    if (norms == 0).any():
        raise ValueError("disagreement_score: zero-norm attention row")
    U = A / norms[:, None]
    h = A.shape[0]
    return float((U @ U.T).sum() / (h * h))


# vectorised forms over one capture; the scalar functions above are the reference


def _row_entropies(w: np.ndarray) -> np.ndarray:
    w = w.astype(np.float64)
    logs = np.log(np.where(w > 0, w, 1.0))
    return -(w * logs).sum(axis=-1)


def _pairwise(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Div and Disagreement for a stack ``(n, h, l)`` of head-by-key matrices."""
    G = np.einsum("nal,nbl->nab", A, A)
    h = A.shape[1]
    div = ((G - np.eye(h)) ** 2).sum(axis=(1, 2))
    diag = np.sqrt(np.einsum("naa->na", G))
    cos = G / (diag[:, :, None] * diag[:, None, :])
    return div, cos.sum(axis=(1, 2)) / (h * h)


def collect_captures(exp, examples) -> list[AttentionCapture]:
    """Run ``exp`` in inference mode over ``examples`` and keep every layer's weights."""
    out = []
    for batch in exp.batches(examples):
        raw: list = []
        exp.model.predict(batch, DropContext(training=False, capture=raw))
        for layer, used, mask in raw:
            lengths = mask.sum(axis=-1)
            for i, n in enumerate(lengths):
                out.append(AttentionCapture(int(layer), np.array(used[i, :, :n, :n], dtype=np.float64)))
    return out


def _stats(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def compute_metrics(captures: Iterable[AttentionCapture]) -> list[dict]:
    """Rows ``{layer, head, metric, mean, std}``; ``"all"`` marks an aggregate level."""
    ent: dict = {}
    pair: dict = {}
    for c in captures:
        e = _row_entropies(c.weights)  # (h, l)
        for h in range(c.heads):
            ent.setdefault((c.layer, h), []).append(e[h])
        dq, gq = _pairwise(np.transpose(c.weights, (1, 0, 2)))
        ds, gs = _pairwise(c.weights.mean(axis=1)[None])
        for name, vals in (("div_query", dq), ("disagreement_query", gq),
                           ("div_sentence", ds), ("disagreement_sentence", gs)):
            pair.setdefault((c.layer, name), []).append(vals)

    rows = []
    layers = sorted({k[0] for k in ent})
    for layer in layers:
        heads = sorted(h for (l, h) in ent if l == layer)
        for h in heads:
            rows.append(_row(layer, h, "entropy", np.concatenate(ent[(layer, h)])))
        rows.append(_row(layer, "all", "entropy", np.concatenate([np.concatenate(ent[(layer, h)]) for h in heads])))
    if layers:
        rows.append(_row("all", "all", "entropy", np.concatenate([np.concatenate(v) for v in ent.values()])))
    for name in ("div_query", "disagreement_query", "div_sentence", "disagreement_sentence"):
        for layer in layers:
            rows.append(_row(layer, "all", name, np.concatenate(pair[(layer, name)])))
        if layers:
            rows.append(_row("all", "all", name, np.concatenate([np.concatenate(pair[(l, name)]) for l in layers])))
    return rows


def _row(layer, head, metric, values) -> dict:
    mean, std = _stats(values)
    return {"layer": layer, "head": head, "metric": metric, "mean": mean, "std": std}


def mean_entropy(captures: Iterable[AttentionCapture]) -> float:
    total, n = 0.0, 0
    for c in captures:
        e = _row_entropies(c.weights)
        total += float(e.sum())
        n += e.size
    return total / n


def max_weight_values(captures: Iterable[AttentionCapture]) -> np.ndarray:
    """``max_j weights[i, j] * l`` for every (layer, head, query row)."""
    vals = [c.weights.max(axis=-1).reshape(-1) * c.length for c in captures]
    return np.concatenate(vals) if vals else np.zeros(0)


def max_weight_histogram(captures: Sequence[AttentionCapture], bins=20):
    """Histogram of length-scaled largest weights.

    ``bins`` is a count (edges span 0 to the largest value) or explicit
    edges.  Values outside explicit edges are counted in the end bins.
    Returns ``(edges, counts)``.
    """
    if not captures:
        raise ValueError("max_weight_histogram: no captures")
    values = max_weight_values(captures)
    if np.ndim(bins) == 0:
        hi = max(float(values.max()), 1.0)
        edges = np.linspace(0.0, hi, int(bins) + 1)
    else:
        edges = np.asarray(bins, dtype=np.float64)
    counts, _ = np.histogram(np.clip(values, edges[0], edges[-1]), bins=edges)
    return edges, counts


def write_metrics_csv(path, rows: Iterable[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "head", "metric", "mean", "std"])
        for r in rows:
            w.writerow([r["layer"], r["head"], r["metric"], f"{r['mean']:.8g}", f"{r['std']:.8g}"])


def write_histogram_csv(path, edges, counts) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([f"{lo:.8g}", f"{hi:.8g}", int(c)])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["mean"] = float(r["mean"])
        r["std"] = float(r["std"])
    return rows


def entropy_bound(length: int) -> float:
    return math.log(length)
