"""Per-layer component selection.

A canonical importance map in ``[0, 1]`` is sharpened or flattened per layer
by an exponent, rounded to a binary mask, and OR-ed into the previous layer's
mask so that a component, once selected, stays selected.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ShapeError

__all__ = [
    "SelectionMask",
    "importance_from_sigma",
    "adjust_and_binarize",
    "inclusive_mask",
    "layer_masks",
    "pack",
    "scatter",
]


@dataclass(frozen=True)
class SelectionMask:
    bits: np.ndarray
    layer: int

    def __post_init__(self):
        bits = np.array(self.bits, dtype=bool, copy=True)
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def count(self):
        return int(self.bits.sum())


def importance_from_sigma(params):
    """Rank-normalized scales: ``(rank - 0.5) / N`` with tied ranks averaged."""
    sigma = np.asarray(params.sigma if hasattr(params, "sigma") else params, dtype=np.float64)
    ranks = rankdata(sigma.ravel(), method="average")
    return ((ranks - 0.5) / sigma.size).reshape(sigma.shape)


def adjust_and_binarize(im, gamma_l):
    """``round(im ** gamma_l)`` with halves rounding up."""
    if not gamma_l > 0:
        raise ValueError(f"gamma must be positive, got {gamma_l}")
    im = np.asarray(im, dtype=np.float64)
    return np.power(im, gamma_l) >= 0.5


def inclusive_mask(prev, raw):
    """Add newly selected components to ``prev`` (None before layer 1)."""
    raw = np.asarray(raw, dtype=bool)
    if prev is None:
        return SelectionMask(raw, 1)
    if prev.bits.shape != raw.shape:
        raise ShapeError(f"mask shapes differ: {prev.bits.shape} vs {raw.shape}")
    return SelectionMask(prev.bits | raw, prev.layer + 1)


def layer_masks(im, gamma):
    """Masks for layers ``1..len(gamma)``."""
    masks = []
    prev = None
    for g in np.asarray(gamma, dtype=np.float64):
        prev = inclusive_mask(prev, adjust_and_binarize(im, g))
        masks.append(prev)
    return masks


def pack(tensor, mask):
    """Selected components of ``tensor`` in flat (channel-major) order."""
    bits = mask.bits if isinstance(mask, SelectionMask) else np.asarray(mask, dtype=bool)
    tensor = np.asarray(tensor)
    if tensor.shape != bits.shape:
        raise ShapeError(f"tensor shape {tensor.shape} != mask shape {bits.shape}")
    return tensor.ravel()[bits.ravel()]


def scatter(packed, mask):
    """Inverse of :func:`pack`; unselected slots are zero."""
    bits = mask.bits if isinstance(mask, SelectionMask) else np.asarray(mask, dtype=bool)
    packed = np.asarray(packed)
    if packed.ndim != 1 or packed.size != int(bits.sum()):
        raise ShapeError(
            f"packed length {packed.size} != selected count {int(bits.sum())}"
        )
    out = np.zeros(bits.size, dtype=packed.dtype if packed.size else np.float64)
    out[bits.ravel()] = packed
    return out.reshape(bits.shape)
