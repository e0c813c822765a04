"""Transformer encoders with structured dropout on attention weights."""

from .dropattn import (
    DropSpec,
    apply_dropattention,
    inverse_rescale,
    renormalize_rows,
    sample_column_mask,
    sample_element_mask,
    standard_dropout,
)
from .tensor import Tape, Tensor

__all__ = [
    "DropSpec",
    "Tape",
    "Tensor",
    "apply_dropattention",
    "inverse_rescale",
    "renormalize_rows",
    "sample_column_mask",
    "sample_element_mask",
    "standard_dropout",
]
