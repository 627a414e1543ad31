"""Splitting a sequence into VIP tokens and the padded remainder.

``reorder`` moves the VIP rows to the front, keeps both groups in their
original relative order, and zero-pads the remainder to the next power of k
so it can back a k-ary averaging tree. ``restore`` undoes the whole thing.

Pad rows are all-zero bookkeeping rows. They must never influence attention:
downstream code gives a fully padded component zero key weight and drops it
from the key set, and restore throws pad rows away.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dense import ShapeError

__all__ = ["VipLayout", "PartitionedSequence", "reorder", "restore", "padded_length"]


def padded_length(n_rest: int, k: int) -> int:
    """Smallest power of k that is >= n_rest."""
    if k < 2:
        raise ValueError(f"branching factor k must be >= 2, got {k}")
    if n_rest < 1:
        raise ValueError("need at least one non-VIP token")
    n_c = 1
    while n_c < n_rest:
        n_c *= k
    return n_c


@dataclass(frozen=True)
class VipLayout:
    """Bookkeeping needed to undo a reorder.

    vip_index / rest_index give the original positions of the VIP rows and
    the remaining rows, each in ascending order. pad_count trailing rows of
    the padded remainder are synthetic; pad_mask marks them.
    """

    n: int
    k: int
    vip_index: np.ndarray
    rest_index: np.ndarray
    n_c: int

    @property
    def n_p(self) -> int:
        return len(self.vip_index)

    @property
    def pad_count(self) -> int:
        return self.n_c - len(self.rest_index)

    @property
    def pad_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_c, dtype=bool)
        if self.pad_count:
            mask[-self.pad_count:] = True
        return mask


@dataclass(frozen=True)
class PartitionedSequence:
    """VIP rows p (n_p, d) and padded remainder rows c (n_c, d)."""

    p: np.ndarray
    c: np.ndarray
    layout: VipLayout


def reorder(x: np.ndarray, vip_mask: np.ndarray, k: int) -> PartitionedSequence:
    """Partition rows of x into (VIP block, zero-padded remainder block)."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeError(f"x must be 2-D, got shape {x.shape}")
    vip_mask = np.asarray(vip_mask, dtype=bool)
    if vip_mask.shape != (x.shape[0],):
        raise ShapeError(
            f"vip_mask shape {vip_mask.shape} does not match row count {x.shape[0]}"
        )
    vip_index = np.flatnonzero(vip_mask)
    rest_index = np.flatnonzero(~vip_mask)
    if len(vip_index) == 0:
        raise ValueError("no VIP tokens marked")
    if len(rest_index) == 0:
        raise ValueError("every token is marked VIP; nothing to compress")
    n_c = padded_length(len(rest_index), k)
    c = np.zeros((n_c, x.shape[1]), dtype=x.dtype)
    c[: len(rest_index)] = x[rest_index]
    layout = VipLayout(
        n=x.shape[0], k=k,
        vip_index=vip_index, rest_index=rest_index, n_c=n_c,
    )
    return PartitionedSequence(p=x[vip_index].copy(), c=c, layout=layout)


def restore(p: np.ndarray, c: np.ndarray, layout: VipLayout) -> np.ndarray:
    """Invert reorder: drop pads and put every row back where it came from."""
    if p.shape[0] != layout.n_p:
        raise ShapeError(f"p has {p.shape[0]} rows, layout says {layout.n_p}")
    if c.shape[0] != layout.n_c:
        raise ShapeError(f"c has {c.shape[0]} rows, layout says {layout.n_c}")
    if p.shape[1] != c.shape[1]:
        raise ShapeError(f"width mismatch: p {p.shape} vs c {c.shape}")
    out = np.empty((layout.n, p.shape[1]), dtype=np.result_type(p, c))
    out[layout.vip_index] = p
    out[layout.rest_index] = c[: len(layout.rest_index)]
    return out
