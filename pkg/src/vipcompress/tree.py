"""Delta-encoded k-ary averaging tree over the compressible rows.

The tree represents every aligned segment mean of an (n_c, d) block C at
every power-of-k granularity, but stores almost all of it as differences:

  * ``root``       the full-block mean, one d-vector, stored directly.
  * ``deltas[s]``  for every non-root scale s, row x-1 holds
                   delta(s, x) = mean(parent of (s, x)) - mean((s, x)),
                   where the parent of segment (s, x) is (k*s, ceil(x/k)).

A segment mean is recovered by walking the ancestor chain and subtracting
the deltas found along the way (at most log_k(n_c) subtractions), and an
update touching m selected segments rewrites only the deltas on the paths
from those segments to the root. Everything off those paths is untouched,
byte for byte: when whole sibling groups shift by a common vector, their
mutual differences cannot change, so a sparse update loses nothing.

Segments are 1-indexed by (scale s, index x): segment (s, x) covers rows
(s*(x-1), s*x] of C in 0-based half-open terms.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .dense import ShapeError

if TYPE_CHECKING:
    from .components import Component, ComponentSet

__all__ = [
    "SeqTree",
    "build_tree",
    "retrieve",
    "retrieve_many",
    "apply_update",
    "materialize",
    "save_tree",
    "load_tree",
]


@dataclass
class SeqTree:
    """Root mean plus per-scale delta arrays, with op counters.

    write_counter holds the number of node writes performed by the most
    recent apply_update. retrievals and delta_reads accumulate across
    retrieve calls (component lookups and per-level delta subtractions
    respectively) until reset_counters is called.
    """

    n_c: int
    k: int
    d: int
    root: np.ndarray
    deltas: dict[int, np.ndarray] = field(default_factory=dict)
    write_counter: int = 0
    retrievals: int = 0
    delta_reads: int = 0

    def scales(self) -> list[int]:
        """Non-root scales in ascending order: 1, k, ..., n_c / k."""
        out = []
        s = 1
        while s < self.n_c:
            out.append(s)
            s *= self.k
        return out

    def reset_counters(self) -> None:
        self.retrievals = 0
        self.delta_reads = 0

    def copy(self) -> "SeqTree":
        return SeqTree(
            n_c=self.n_c, k=self.k, d=self.d,
            root=self.root.copy(),
            deltas={s: a.copy() for s, a in self.deltas.items()},
        )


def _check_power(n_c: int, k: int) -> None:
    if k < 2:
        raise ValueError(f"branching factor k must be >= 2, got {k}")
    m = 1
    while m < n_c:
        m *= k
    if m != n_c:
        raise ValueError(f"n_c={n_c} is not a power of k={k}")


def build_tree(c_rows: np.ndarray, k: int) -> SeqTree:
    """Build the tree for block C in O(n_c * d).

    Level means come from repeated k-fold averaging; k is required to divide
    evenly at every step, hence the power-of-k precondition.
    """
    c_rows = np.asarray(c_rows, dtype=np.float64)
    if c_rows.ndim != 2:
        raise ShapeError(f"C must be 2-D, got shape {c_rows.shape}")
    n_c, d = c_rows.shape
    _check_power(n_c, k)
    deltas: dict[int, np.ndarray] = {}
    level = c_rows
    s = 1
    while s < n_c:
        parent = level.reshape(-1, k, d).mean(axis=1)
        deltas[s] = np.repeat(parent, k, axis=0) - level
        level = parent
        s *= k
    return SeqTree(n_c=n_c, k=k, d=d, root=level[0].copy(), deltas=deltas)


def retrieve_many(tree: SeqTree, scale: int, indices: np.ndarray) -> np.ndarray:
    """Segment means for several same-scale segments in one pass.

    Returns an (m, d) array for 1-based segment indices. Cost is one delta
    subtraction per ancestor level per segment.
    """
    indices = np.asarray(indices, dtype=np.int64)
    if scale < 1 or scale > tree.n_c or (scale != 1 and scale not in tree.deltas and scale != tree.n_c):
        raise ValueError(f"scale {scale} not present in tree (n_c={tree.n_c}, k={tree.k})")
    if len(indices) and (indices.min() < 1 or indices.max() > tree.n_c // scale):
        raise ValueError(
            f"segment index out of range for scale {scale}: {indices.min()}..{indices.max()}"
        )
    values = np.broadcast_to(tree.root, (len(indices), tree.d)).copy()
    x = indices
    s = scale
    while s < tree.n_c:
        values -= tree.deltas[s][x - 1]
        tree.delta_reads += len(indices)
        x = (x - 1) // tree.k + 1
        s *= tree.k
    tree.retrievals += len(indices)
    return values


def retrieve(tree: SeqTree, component: "Component") -> np.ndarray:
    """Mean of one segment, reconstructed from root minus path deltas."""
    return retrieve_many(tree, component.scale, np.array([component.index]))[0]


def materialize(tree: SeqTree) -> np.ndarray:
    """Expand the tree back to the full (n_c, d) block in O(n_c * d)."""
    values = tree.root[None, :].copy()
    for s in reversed(tree.scales()):
        values = np.repeat(values, tree.k, axis=0) - tree.deltas[s]
    return values


def apply_update(tree: SeqTree, selected: "ComponentSet", new_rows: np.ndarray) -> int:
    """Make the tree represent the block whose selected segment means are new_rows.

    ``selected`` must be a disjoint cover of the block (the plan that
    produced new_rows = S_c @ C_new). Because such a cover is exactly the
    leaf set of a k-ary split tree, sibling groups above it are always
    complete, so parent means can be recomputed bottom-up from the new leaf
    values alone. Deltas strictly inside a selected segment are left alone:
    all rows there moved by the segment's common shift, which cancels in any
    within-segment difference.

    Returns the number of node writes (delta writes plus one root write),
    which is also stored in tree.write_counter. The count is at most
    2 * len(selected) + 1.
    """
    new_rows = np.asarray(new_rows, dtype=np.float64)
    if selected.n_c != tree.n_c or selected.k != tree.k:
        raise ValueError(
            f"component set is over n_c={selected.n_c}, k={selected.k}; "
            f"tree has n_c={tree.n_c}, k={tree.k}"
        )
    if new_rows.shape != (len(selected.components), tree.d):
        raise ShapeError(
            f"new_rows shape {new_rows.shape}, expected ({len(selected.components)}, {tree.d})"
        )
    writes = 0
    pending: dict[int, dict[int, np.ndarray]] = {}
    for comp, row in zip(selected.components, new_rows):
        pending.setdefault(comp.scale, {})[comp.index] = row
    s = 1
    while s < tree.n_c:
        level = pending.pop(s, None)
        if level:
            xs = np.array(sorted(level), dtype=np.int64)
            vals = np.stack([level[int(x)] for x in xs])
            parents = (xs - 1) // tree.k + 1
            # Valid covers always deliver complete sibling groups.
            expect = (np.repeat(np.unique(parents), tree.k) - 1) * tree.k
            expect += np.tile(np.arange(1, tree.k + 1), len(np.unique(parents)))
            if len(xs) % tree.k or not np.array_equal(xs, expect):
                raise ValueError(f"incomplete sibling group at scale {s}: {xs.tolist()}")
            parent_vals = vals.reshape(-1, tree.k, tree.d).mean(axis=1)
            tree.deltas[s][xs - 1] = np.repeat(parent_vals, tree.k, axis=0) - vals
            writes += len(xs)
            up = pending.setdefault(s * tree.k, {})
            for p, pv in zip(np.unique(parents), parent_vals):
                up[int(p)] = pv
        s *= tree.k
    top = pending.pop(tree.n_c)
    tree.root[:] = top[1]
    writes += 1
    tree.write_counter = writes
    return writes


# Snapshot layout, little endian:
#   magic   4 bytes  b"VCCT"
#   version u32      1
#   n_c     u64
#   k       u32
#   d       u32
# then the root vector and the delta arrays for scales 1, k, ..., n_c/k in
# ascending order, all float64 C-order.
_HEADER = struct.Struct("<4sIQII")
_MAGIC = b"VCCT"


def save_tree(tree: SeqTree, path: str) -> None:
    parts = [_HEADER.pack(_MAGIC, 1, tree.n_c, tree.k, tree.d)]
    parts.append(np.ascontiguousarray(tree.root, dtype="<f8").tobytes())
    for s in tree.scales():
        parts.append(np.ascontiguousarray(tree.deltas[s], dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_tree(path: str) -> SeqTree:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size or blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not a tree snapshot")
    _, version, n_c, k, d = _HEADER.unpack_from(blob)
    if version != 1:
        raise ValueError(f"{path}: unsupported tree snapshot version {version}")
    offset = _HEADER.size

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        offset += count * 8
        return arr.reshape(shape).astype(np.float64)

    root = take((d,))
    tree = SeqTree(n_c=int(n_c), k=int(k), d=int(d), root=root)
    for s in tree.scales():
        tree.deltas[s] = take((n_c // s, d))
    if offset != len(blob):
        raise ValueError(f"{path}: trailing bytes ({len(blob) - offset})")
    return tree
