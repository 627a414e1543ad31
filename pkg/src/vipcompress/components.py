"""Multi-resolution components and VIP-guided refinement.

A component is an aligned power-of-k segment of the compressible block. The
selector starts from the single whole-block component and repeatedly splits
the segments whose means the VIP tokens attend to hardest, producing a
disjoint cover J of the block: fine resolution where the VIP tokens look,
coarse resolution elsewhere.

The cover doubles as a linear map. Stacking the indicator rows
b(s, x) = (1/s on the segment, 0 elsewhere) for the components in J gives
the compression matrix S_c with S_c @ C listing the covered segment means,
and its Moore-Penrose pseudo-inverse is simply S_c^T @ diag(multiplicities),
a 0/1 matrix that broadcasts each mean back over its segment.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dense import NonFiniteError, ShapeError, weighted_softmax_rows
from .layer import LayerWeights
from .tree import SeqTree, retrieve_many

__all__ = [
    "Component",
    "ComponentSet",
    "CompressionPlan",
    "SelectionBudget",
    "InfeasibleBudgetError",
    "component_vector",
    "segment_mean",
    "score_components",
    "select_components",
    "build_plan",
    "dense_S",
    "dense_S_pinv",
    "fixed_split_schedule",
    "dump_components",
    "parse_components",
]

SCORING_MODES = ("simplified", "projected")


class InfeasibleBudgetError(ValueError):
    """A refinement budget asks for more splits than a level can provide."""


@dataclass(frozen=True, order=True)
class Component:
    """Aligned segment of size ``scale`` at 1-based position ``index``.

    Covers 0-based rows [scale * (index - 1), scale * index).
    """

    scale: int
    index: int

    def __post_init__(self):
        if self.scale < 1 or self.index < 1:
            raise ValueError(f"invalid component (scale={self.scale}, index={self.index})")

    @property
    def start(self) -> int:
        return self.scale * (self.index - 1)

    @property
    def stop(self) -> int:
        return self.scale * self.index


def _is_power(value: int, k: int) -> bool:
    if value < 1:
        return False
    while value % k == 0:
        value //= k
    return value == 1


@dataclass(frozen=True)
class ComponentSet:
    """A disjoint cover of rows [0, n_c) by aligned power-of-k segments.

    Any such cover is the leaf set of a k-ary split tree, which is what the
    tree update relies on. Order is preserved as given; select_components
    produces position order (ascending segment start).
    """

    components: tuple[Component, ...]
    n_c: int
    k: int

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        if not _is_power(self.n_c, self.k):
            raise ValueError(f"n_c={self.n_c} is not a power of k={self.k}")
        covered = np.zeros(self.n_c, dtype=bool)
        for comp in self.components:
            if not _is_power(comp.scale, self.k) or comp.scale > self.n_c:
                raise ValueError(f"component scale {comp.scale} invalid for k={self.k}, n_c={self.n_c}")
            if comp.stop > self.n_c:
                raise ValueError(f"component {comp} exceeds n_c={self.n_c}")
            if covered[comp.start:comp.stop].any():
                raise ValueError(f"component {comp} overlaps another component")
            covered[comp.start:comp.stop] = True
        if not covered.all():
            missing = int(np.flatnonzero(~covered)[0])
            raise ValueError(f"components do not cover row {missing}")

    def __len__(self) -> int:
        return len(self.components)

    def __iter__(self):
        return iter(self.components)

    def multiplicities(self) -> np.ndarray:
        return np.array([c.scale for c in self.components], dtype=np.float64)


@dataclass(frozen=True)
class CompressionPlan:
    """A component set together with its compressed rows S_c @ C."""

    selected: ComponentSet
    rows: np.ndarray
    multiplicities: np.ndarray

    def __post_init__(self):
        r = len(self.selected)
        if self.rows.ndim != 2 or self.rows.shape[0] != r:
            raise ShapeError(f"plan rows shape {self.rows.shape}, expected ({r}, d)")
        if self.multiplicities.shape != (r,):
            raise ShapeError(f"multiplicities shape {self.multiplicities.shape}, expected ({r},)")

    def __len__(self) -> int:
        return len(self.selected)


def component_vector(component: Component, n_c: int) -> np.ndarray:
    """The averaging row b(s, x): 1/s on the segment, 0 elsewhere."""
    if component.stop > n_c:
        raise ValueError(f"component {component} exceeds n_c={n_c}")
    v = np.zeros(n_c)
    v[component.start:component.stop] = 1.0 / component.scale
    return v


def segment_mean(c_rows: np.ndarray, component: Component) -> np.ndarray:
    """Mean of the covered rows, computed directly from C."""
    c_rows = np.asarray(c_rows)
    if component.stop > c_rows.shape[0]:
        raise ValueError(f"component {component} exceeds block of {c_rows.shape[0]} rows")
    return c_rows[component.start:component.stop].mean(axis=0)


@dataclass(frozen=True)
class SelectionBudget:
    """How many segments to split at each scale.

    kind "per_level" carries an explicit {scale: splits} mapping (a scale-s
    entry splits that many size-s segments into k children each). kind
    "two_resolution" refines every splittable segment down to size k and
    then splits ``h`` of the size-k segments into singletons. kind
    "fixed_splits" spends ``h`` splits coarsest-first, which pins the cover
    size at 1 + (k-1)*h rows independent of block length. kind "lossless"
    refines everything down to singletons.
    """

    kind: str
    h: int | None = None
    levels: dict[int, int] | None = None

    @classmethod
    def two_resolution(cls, h: int) -> "SelectionBudget":
        if h < 0:
            raise ValueError("h must be >= 0")
        return cls(kind="two_resolution", h=h)

    @classmethod
    def per_level(cls, levels: dict[int, int]) -> "SelectionBudget":
        return cls(kind="per_level", levels=dict(levels))

    @classmethod
    def fixed_splits(cls, h: int) -> "SelectionBudget":
        if h < 0:
            raise ValueError("h must be >= 0")
        return cls(kind="fixed_splits", h=h)

    @classmethod
    def lossless(cls) -> "SelectionBudget":
        return cls(kind="lossless")

    def resolve(self, n_c: int, k: int, pad_count: int = 0) -> dict[int, int]:
        """Concrete {scale: splits} for a block, skipping fully padded segments.

        A segment whose rows are all padding is never split, so the schedule
        counts only segments that contain at least one real row. There are
        ceil(real / s) of those at scale s, where real = n_c - pad_count.
        """
        if not _is_power(n_c, k):
            raise ValueError(f"n_c={n_c} is not a power of k={k}")
        if not 0 <= pad_count < n_c:
            raise ValueError(f"pad_count {pad_count} out of range for n_c={n_c}")
        real = n_c - pad_count
        scales = []
        s = n_c
        while s >= k:
            scales.append(s)
            s //= k

        def eligible(s: int) -> int:
            return -(-real // s)

        if self.kind == "per_level":
            unknown = [s for s in self.levels if s not in scales]
            if unknown:
                raise ValueError(f"budget names scales {unknown} absent from n_c={n_c}, k={k}")
            return {s: int(self.levels.get(s, 0)) for s in scales}
        if self.kind == "two_resolution":
            sched = {s: eligible(s) for s in scales if s > k}
            if self.h > eligible(k):
                raise InfeasibleBudgetError(
                    f"two-resolution budget h={self.h} exceeds the {eligible(k)} "
                    f"splittable segments at scale {k}"
                )
            sched[k] = self.h
            return sched
        if self.kind == "fixed_splits":
            return fixed_split_schedule(n_c, k, self.h, pad_count)
        if self.kind == "lossless":
            return {s: eligible(s) for s in scales}
        raise ValueError(f"unknown budget kind {self.kind!r}")


def fixed_split_schedule(n_c: int, k: int, splits: int, pad_count: int = 0) -> dict[int, int]:
    """The {scale: splits} schedule behind SelectionBudget.fixed_splits.

    Every split turns one segment into k, so the resulting cover has exactly
    1 + (k - 1) * splits components regardless of how the splits are spread;
    spending them coarsest-first keeps the cover as uniform as possible,
    which pins the compressed row count independently of sequence length.
    Fully padded segments are not splittable, so with ``pad_count`` trailing
    pad rows the per-scale cap is ceil(real / s) rather than n_c / s.
    """
    if not _is_power(n_c, k):
        raise ValueError(f"n_c={n_c} is not a power of k={k}")
    if not 0 <= pad_count < n_c:
        raise ValueError(f"pad_count {pad_count} out of range for n_c={n_c}")
    if splits < 0:
        raise InfeasibleBudgetError(f"split count must be >= 0, got {splits}")
    real = n_c - pad_count
    levels: dict[int, int] = {}
    remaining = splits
    s = n_c
    while s >= k and remaining > 0:
        take = min(-(-real // s), remaining)
        levels[s] = take
        remaining -= take
        s //= k
    if remaining > 0:
        raise InfeasibleBudgetError(
            f"cannot spend {splits} splits on a block of {n_c} rows "
            f"with {pad_count} pads ({remaining} left over)"
        )
    return levels


def score_components(
    p_rows: np.ndarray,
    candidates: Sequence[tuple[Component, np.ndarray]],
    weights: LayerWeights | None = None,
    mode: str = "simplified",
) -> np.ndarray:
    """One nonnegative attention score per candidate (component, mean) pair.

    "simplified" scores candidate means as unnormalized attention keys,
    sum_i exp(<p_i, mean>), under a single shared exponent shift: scores are
    only ever compared within one call, and a shared shift rescales them all
    by the same positive factor.

    "projected" runs the given layer's per-head attention with the VIP rows
    as queries and the candidate means as keys, then averages the resulting
    attention weights over heads and VIP rows.
    """
    if mode not in SCORING_MODES:
        raise ValueError(f"unknown scoring mode {mode!r}")
    p_rows = np.asarray(p_rows)
    if p_rows.ndim != 2:
        raise ShapeError(f"p_rows must be 2-D, got shape {p_rows.shape}")
    means = np.stack([m for _, m in candidates])
    if means.shape[1] != p_rows.shape[1]:
        raise ShapeError(f"candidate width {means.shape[1]} does not match d={p_rows.shape[1]}")
    if not (np.all(np.isfinite(p_rows)) and np.all(np.isfinite(means))):
        raise NonFiniteError("scoring inputs contain inf or nan")
    if mode == "simplified":
        logits = p_rows @ means.T
        scores = np.exp(logits - logits.max()).sum(axis=0)
    else:
        if weights is None:
            raise ValueError("projected scoring requires layer weights")
        c = weights.config
        acc = np.zeros(means.shape[0])
        for h in range(c.heads):
            logits = (p_rows @ weights.q_proj[h]) @ (means @ weights.k_proj[h]).T
            if c.score_scaling:
                logits = logits / np.sqrt(c.head_dim)
            acc += weighted_softmax_rows(logits).mean(axis=0)
        scores = acc / c.heads
    return scores


def select_components(
    p_rows: np.ndarray,
    tree: SeqTree,
    budget: SelectionBudget,
    weights: LayerWeights | None = None,
    mode: str = "simplified",
    pad_count: int = 0,
) -> ComponentSet:
    """Refine the cover coarse-to-fine, guided by VIP attention scores.

    Starting from the whole-block component, each scale s from n_c down to k
    scores the live size-s components, splits the top h_s of them (ties go
    to the lower segment index), and keeps the rest as cover leaves. Fully
    padded components are never split. Candidate means come from tree
    retrievals. The result is ordered by segment start.
    """
    n_c, k = tree.n_c, tree.k
    schedule = budget.resolve(n_c, k, pad_count)
    real = n_c - pad_count
    leaves: list[Component] = []
    active: list[tuple[Component, np.ndarray]] = [
        (Component(n_c, 1), retrieve_many(tree, n_c, np.array([1]))[0])
    ]
    s = n_c
    while s >= k:
        h_s = schedule.get(s, 0)
        splittable = [cv for cv in active if cv[0].start < real]
        padded = [cv for cv in active if cv[0].start >= real]
        if h_s > len(splittable):
            raise InfeasibleBudgetError(
                f"budget wants {h_s} splits at scale {s} but only "
                f"{len(splittable)} splittable candidates exist"
            )
        if h_s > 0:
            scores = score_components(p_rows, splittable, weights, mode)
            order = sorted(range(len(splittable)), key=lambda i: (-scores[i], splittable[i][0].index))
            chosen = set(order[:h_s])
        else:
            chosen = set()
        leaves.extend(comp for comp, _ in padded)
        leaves.extend(comp for i, (comp, _) in enumerate(splittable) if i not in chosen)
        child_idx = np.array(
            [k * (splittable[i][0].index - 1) + j for i in sorted(chosen) for j in range(1, k + 1)],
            dtype=np.int64,
        )
        if len(child_idx):
            child_means = retrieve_many(tree, s // k, child_idx)
            active = [
                (Component(s // k, int(x)), m) for x, m in zip(child_idx, child_means)
            ]
        else:
            active = []
        s //= k
    leaves.extend(comp for comp, _ in active)
    leaves.sort(key=lambda comp: comp.start)
    return ComponentSet(components=tuple(leaves), n_c=n_c, k=k)


def build_plan(selected: ComponentSet, tree: SeqTree) -> CompressionPlan:
    """Materialize the compressed rows S_c @ C for a cover via tree lookups."""
    if selected.n_c != tree.n_c or selected.k != tree.k:
        raise ValueError(
            f"component set is over n_c={selected.n_c}, k={selected.k}; "
            f"tree has n_c={tree.n_c}, k={tree.k}"
        )
    rows = np.empty((len(selected), tree.d))
    by_scale: dict[int, list[int]] = {}
    for pos, comp in enumerate(selected.components):
        by_scale.setdefault(comp.scale, []).append(pos)
    for scale, positions in by_scale.items():
        idx = np.array([selected.components[p].index for p in positions], dtype=np.int64)
        rows[positions] = retrieve_many(tree, scale, idx)
    return CompressionPlan(selected=selected, rows=rows, multiplicities=selected.multiplicities())


def dense_S(selected: ComponentSet) -> np.ndarray:
    """Materialize S_c as a dense (len(J), n_c) averaging matrix."""
    out = np.zeros((len(selected), selected.n_c))
    for i, comp in enumerate(selected.components):
        out[i] = component_vector(comp, selected.n_c)
    return out


def dense_S_pinv(selected: ComponentSet) -> np.ndarray:
    """Moore-Penrose pseudo-inverse of S_c, which is exactly S_c^T @ diag(s).

    Row j (one per block row) has a single 1 in the column of the component
    covering row j, so the product broadcasts segment means back in place.
    """
    out = np.zeros((selected.n_c, len(selected)))
    for i, comp in enumerate(selected.components):
        out[comp.start:comp.stop, i] = 1.0
    return out


def dump_components(selected: ComponentSet) -> str:
    """One "scale index" line per component, in set order."""
    return "\n".join(f"{c.scale} {c.index}" for c in selected.components) + "\n"


def parse_components(text: str, n_c: int, k: int) -> ComponentSet:
    comps = []
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"line {ln}: expected 'scale index', got {line!r}")
        try:
            comps.append(Component(int(parts[0]), int(parts[1])))
        except ValueError as e:
            raise ValueError(f"line {ln}: {e}") from None
    return ComponentSet(components=tuple(comps), n_c=n_c, k=k)
