"""Dropout over attention weights.

Two variants share one code path:

* ``element`` zeroes individual entries of the ``l x l`` weight matrix,
* ``column`` zeroes whole columns, i.e. removes value vectors for every query.

Drop seeds are drawn with probability ``gamma = p / w`` and each seed is grown
into a window of ``w`` consecutive positions to its right (truncated at the
row end), so the dropped fraction of interior entries is
``1 - (1 - p/w) ** w``, which is close to ``p`` and equal to it for ``w = 1``.

After masking, rows are either renormalised to sum to one or scaled by
``1 / (1 - p)`` as in ordinary dropout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import Tensor, as_tensor, add, div, mul, scale, sum as tsum

VARIANTS = ("column", "element")
RESCALES = ("normalized", "inverse")
MODES = ("training", "inference")

# rows whose surviving mass is below this are treated as fully dropped
DEAD_ROW_EPS = 1e-12


@dataclass(frozen=True)
class DropSpec:
    variant: str = "column"
    p: float = 0.0
    w: int = 1
    rescale: str = "normalized"
    mode: str = "training"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}", "drop.variant")
        if self.rescale not in RESCALES:
            raise ConfigError(f"unknown rescale {self.rescale!r}, expected one of {RESCALES}", "drop.rescale")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}, expected one of {MODES}", "drop.mode")
        if isinstance(self.w, bool) or int(self.w) != self.w or self.w < 1:
            raise ConfigError(f"window size must be a positive integer, got {self.w!r}", "drop.w")
        if not (0.0 <= self.p < 1.0):
            raise ConfigError(f"drop rate must lie in [0, 1), got {self.p!r}", "drop.p")

    @property
    def gamma(self) -> float:
        return self.p / self.w

    @property
    def expected_coverage(self) -> float:
        """Drop probability of an entry at least ``w - 1`` positions from the row start."""
        return 1.0 - (1.0 - self.gamma) ** self.w

    def with_mode(self, mode: str) -> "DropSpec":
        return DropSpec(self.variant, self.p, self.w, self.rescale, mode)


def _require_training(spec: DropSpec) -> None:
    if spec.mode != "training":
        raise ValueError("masks are only sampled in training mode")


def expand_windows(seeds: np.ndarray, w: int) -> np.ndarray:
    """Grow every True seed along the last axis into ``w`` positions, truncating at the end."""
    dropped = seeds.copy()
    for k in range(1, min(w, seeds.shape[-1])):
        dropped[..., k:] |= seeds[..., :-k]
    return dropped


def sample_element_mask(l: int, spec: DropSpec, rng: np.random.Generator, batch_shape=()) -> np.ndarray:
    """Keep-mask of shape ``batch_shape + (l, l)``; 0 marks a dropped weight."""
    _require_training(spec)
    shape = tuple(batch_shape) + (l, l)
    if spec.p == 0:
        return np.ones(shape, dtype=np.float32)
    seeds = rng.random(shape, dtype=np.float32) < spec.gamma
    return (~expand_windows(seeds, spec.w)).astype(np.float32)


def sample_column_mask(l: int, spec: DropSpec, rng: np.random.Generator, batch_shape=()) -> np.ndarray:
    """Column-constant keep-mask of shape ``batch_shape + (l, l)``.

    Seeds are drawn once per matrix over the ``l`` columns, then broadcast to
    every row.
    """
    _require_training(spec)
    shape = tuple(batch_shape) + (l, l)
    if spec.p == 0:
        return np.ones(shape, dtype=np.float32)
    seeds = rng.random(tuple(batch_shape) + (l,), dtype=np.float32) < spec.gamma
    keep = (~expand_windows(seeds, spec.w)).astype(np.float32)
    return np.broadcast_to(keep[..., None, :], shape).copy()


def sample_mask(l: int, spec: DropSpec, rng: np.random.Generator, batch_shape=()) -> np.ndarray:
    if spec.variant == "column":
        return sample_column_mask(l, spec, rng, batch_shape)
    return sample_element_mask(l, spec, rng, batch_shape)


def renormalize_rows(masked, original=None):
    """Divide each row by its sum.

    Rows whose sum is below ``DEAD_ROW_EPS`` cannot be renormalised; they are
    replaced by the matching rows of ``original`` (the unmasked weights).
    Accepts and returns either tensors or arrays.
    """
    was_array = not isinstance(masked, Tensor)
    m = as_tensor(masked)
    if (m.data < 0).any():
        raise ValueError("renormalize_rows: attention weights must be nonnegative")
    sums = m.data.sum(axis=-1, keepdims=True, dtype=np.float64)
    dead = sums < DEAD_ROW_EPS
    if dead.any():
        if original is None:
            raise ValueError("renormalize_rows: fully dropped row and no original weights to restore")
        live = (~dead).astype(m.dtype)
        orig = Tensor(original, dtype=m.dtype) if not isinstance(original, Tensor) else original
        m = add(mul(m, live), mul(orig, 1 - live))
        denom = add(mul(tsum(m, axis=-1, keepdims=True), live), 1 - live)
    else:
        denom = tsum(m, axis=-1, keepdims=True)
    out = div(m, denom)
    return out.data if was_array else out


def inverse_rescale(masked, p: float):
    """Ordinary dropout rescaling: every entry divided by ``1 - p``."""
    if not (0.0 <= p < 1.0):
        raise ConfigError(f"drop rate must lie in [0, 1), got {p!r}", "drop.p")
    was_array = not isinstance(masked, Tensor)
    out = scale(as_tensor(masked), 1.0 / (1.0 - p))
    return out.data if was_array else out


def apply_mask(weights, mask: np.ndarray, spec: DropSpec):
    """``mask * weights`` followed by the rescaling named in ``spec``."""
    was_array = not isinstance(weights, Tensor)
    lam = as_tensor(weights)
    if np.shape(mask) != lam.shape:
        raise ValueError(f"mask shape {np.shape(mask)} does not match weights {lam.shape}")
    masked = mul(lam, mask)
    if spec.rescale == "normalized":
        out = renormalize_rows(masked, lam)
    else:
        out = inverse_rescale(masked, spec.p)
    return out.data if was_array else out


def apply_dropattention(weights, spec: DropSpec, rng: np.random.Generator | None = None, mask=None):
    """Drop attention weights (training) or pass them through untouched (inference).

    ``weights`` has shape ``(..., l, l)`` with row-stochastic trailing
    matrices.  Leading axes get independent masks.  A precomputed keep-mask
    may be forced in through ``mask``.
    """
    if spec.mode == "inference" or (spec.p == 0 and mask is None):
        return weights
    if mask is None:
        if rng is None:
            raise ValueError("apply_dropattention needs an rng in training mode")
        shape = np.shape(weights.data if isinstance(weights, Tensor) else weights)
        if shape[-1] != shape[-2]:
            raise ValueError(f"attention weights must be square in the last two axes, got {shape}")
        mask = sample_mask(shape[-1], spec, rng, shape[:-2])
    return apply_mask(weights, mask, spec)


def standard_dropout(x, p: float, rng: np.random.Generator | None, mode: str = "training"):
    """Unit dropout: zero with probability ``p``, scale survivors by ``1 / (1 - p)``."""
    if not (0.0 <= p < 1.0):
        raise ConfigError(f"dropout rate must lie in [0, 1), got {p!r}", "drop.dropout")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "inference" or p == 0:
        return x
    was_array = not isinstance(x, Tensor)
    t = as_tensor(x)
    keep = rng.random(t.shape, dtype=np.float32) >= p
    out = mul(t, keep.astype(t.dtype) * t.dtype.type(1.0 / (1.0 - p)))
    return out.data if was_array else out


def mask_stats(l: int, spec: DropSpec, samples: int, rng: np.random.Generator, chunk: int = 256) -> dict:
    """Monte-Carlo summary of sampled masks.

    Returns the overall drop fraction, the drop fraction over interior columns
    (``j >= w - 1``), per-column drop frequency and mean zero-run length along
    rows.
    """
    spec = spec.with_mode("training")
    dropped_per_col = np.zeros(l, dtype=np.int64)
    rows_seen = 0
    zeros = 0
    runs = 0
    done = 0
    while done < samples:
        n = min(chunk, samples - done)
        if spec.variant == "column":
            # one pattern row per matrix carries all the information
            rows = sample_column_mask(l, spec, rng, (n,))[:, 0, :]
        else:
            rows = sample_element_mask(l, spec, rng, (n,)).reshape(-1, l)
        drop = rows == 0
        dropped_per_col += drop.sum(axis=0)
        rows_seen += drop.shape[0]
        zeros += int(drop.sum())
        starts = drop.copy()
        starts[:, 1:] &= ~drop[:, :-1]
        runs += int(starts.sum())
        done += n
    per_col = dropped_per_col / rows_seen
    interior = per_col[min(spec.w - 1, l - 1):]
    return {
        "drop_fraction": zeros / (rows_seen * l),
        "interior_drop_fraction": float(interior.mean()),
        "expected_interior": spec.expected_coverage,
        "mean_run_length": zeros / runs if runs else 0.0,
        "per_column": per_col,
    }
