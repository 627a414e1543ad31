"""The compressed encoder pipeline.

A forward pass has three phases. First, the initial layers run the plain
Transformer layer on fixed-width slices of the sequence independently, so
early layers see local context at full resolution. Second, the sequence is
split into VIP rows and a padded remainder, the remainder goes into the
averaging tree, and each remaining layer runs on [VIP rows; selected segment
means] only, with segment multiplicities as key weights, writing its result
back into the tree sparsely. Last, the tree is expanded once and the
original row order restored.

Per-layer work in the second phase depends on the compressed row count r and
log(n_c), not on n_c itself, which is the point of the construction.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .components import SelectionBudget, build_plan, select_components
from .dense import Rng, ShapeError
from .layer import LayerConfig, LayerWeights, gamma, layer_forward, load_weights
from .layout import reorder, restore
from .tree import SeqTree, apply_update, build_tree, materialize

__all__ = [
    "ModelConfig",
    "LayerDiagnostics",
    "EncoderOutput",
    "ConfigError",
    "compressed_layer_forward",
    "encoder_forward",
    "load_model_config",
]


class ConfigError(ValueError):
    """A model config file failed to parse; message names the line."""


@dataclass(frozen=True)
class ModelConfig:
    """Weights plus the pipeline switches.

    init_layers of the stack run the vanilla layer on independent
    segment_width slices; the rest run compressed. scoring picks the
    refinement guide ("projected": the layer's own attention of VIP queries
    against candidate means, averaged over heads and VIP rows; "simplified":
    plain exp inner products). normalized_attention switches the compressed
    layer between the weighted-softmax path and the unnormalized exp path.
    """

    layers: tuple[LayerWeights, ...]
    init_layers: int = 0
    segment_width: int = 512
    k: int = 2
    budget: SelectionBudget = SelectionBudget.lossless()
    scoring: str = "projected"
    normalized_attention: bool = True

    def __post_init__(self):
        if not self.layers:
            raise ValueError("need at least one layer")
        if not 0 <= self.init_layers < len(self.layers):
            raise ValueError(
                f"init_layers={self.init_layers} must be < layer count {len(self.layers)}"
            )
        if self.segment_width < 1:
            raise ValueError(f"segment_width must be >= 1, got {self.segment_width}")
        if self.k < 2:
            raise ValueError(f"k must be >= 2, got {self.k}")
        if self.scoring not in ("simplified", "projected"):
            raise ValueError(f"unknown scoring mode {self.scoring!r}")
        first = self.layers[0].config
        for i, w in enumerate(self.layers):
            if w.config != first:
                raise ValueError(f"layer {i} config {w.config} differs from layer 0")

    @property
    def layer_config(self) -> LayerConfig:
        return self.layers[0].config

    @classmethod
    def random(
        cls,
        dim: int,
        heads: int,
        ffn_dim: int,
        num_layers: int,
        seed: int,
        scale: float = 0.1,
        activation: str = "relu",
        use_layer_norm: bool = False,
        score_scaling: bool = True,
        **kwargs,
    ) -> "ModelConfig":
        layer_cfg = LayerConfig(
            dim=dim, heads=heads, ffn_dim=ffn_dim, activation=activation,
            use_layer_norm=use_layer_norm, score_scaling=score_scaling,
        )
        rng = Rng(seed)
        layers = tuple(LayerWeights.random(layer_cfg, rng, scale) for _ in range(num_layers))
        return cls(layers=layers, **kwargs)


@dataclass(frozen=True)
class LayerDiagnostics:
    """Per-compressed-layer instrumentation."""

    plan_size: int
    rows: int
    write_count: int
    retrievals: int
    ms: float


@dataclass(frozen=True)
class EncoderOutput:
    x: np.ndarray
    diagnostics: tuple[LayerDiagnostics, ...]


def compressed_layer_forward(
    p_rows: np.ndarray,
    tree: SeqTree,
    weights: LayerWeights,
    cfg: ModelConfig,
    pad_count: int = 0,
) -> tuple[np.ndarray, SeqTree, LayerDiagnostics]:
    """One Transformer layer over [VIP rows; compressed rows], tree updated in place.

    Selection runs fresh against the current tree, the layer body sees r =
    n_p + |J| rows with segment multiplicities as key weights, and the
    compressed part of the output is written back through the sparse tree
    update. Fully padded components carry zero key weight (they are dropped
    from the key set) and their rows are written back as exact zeros, so pad
    rows never drift beyond one tree reconstruction's rounding error.
    """
    start = time.perf_counter()
    retrievals_before = tree.retrievals
    n_p = p_rows.shape[0]
    selected = select_components(
        p_rows, tree, cfg.budget, weights, cfg.scoring, pad_count
    )
    plan = build_plan(selected, tree)
    key_weights = plan.multiplicities.copy()
    if pad_count:
        real = tree.n_c - pad_count
        for j, comp in enumerate(selected.components):
            if comp.start >= real:
                key_weights[j] = 0.0
    keep = key_weights > 0
    z = np.vstack([p_rows, plan.rows])
    keys = np.vstack([p_rows, plan.rows[keep]])
    kw = np.concatenate([np.ones(n_p), key_weights[keep]])
    body = gamma(z, weights, keys=keys, key_weights=kw, normalized=cfg.normalized_attention)
    p_new = body[:n_p] + p_rows
    new_rows = body[n_p:] + plan.rows
    if pad_count:
        # pad components hold zero rows by construction; re-anchor them to
        # exact zero instead of writing back a reconstruction of zero
        new_rows[~keep] = 0.0
    writes = apply_update(tree, selected, new_rows)
    diag = LayerDiagnostics(
        plan_size=len(selected),
        rows=n_p + len(selected),
        write_count=writes,
        retrievals=tree.retrievals - retrievals_before,
        ms=(time.perf_counter() - start) * 1e3,
    )
    return p_new, tree, diag


def encoder_forward(x: np.ndarray, vip_mask: np.ndarray, cfg: ModelConfig) -> EncoderOutput:
    """Full pipeline: segmented initial layers, compressed layers, restore."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"x must be 2-D, got shape {x.shape}")
    n = x.shape[0]
    for layer in cfg.layers[: cfg.init_layers]:
        pieces = []
        for a in range(0, n, cfg.segment_width):
            pieces.append(layer_forward(x[a : a + cfg.segment_width], layer))
        x = np.vstack(pieces)
    part = reorder(x, vip_mask, cfg.k)
    tree = build_tree(part.c, cfg.k)
    p = part.p
    diags = []
    for layer in cfg.layers[cfg.init_layers :]:
        p, tree, diag = compressed_layer_forward(
            p, tree, layer, cfg, part.layout.pad_count
        )
        diags.append(diag)
    c_new = materialize(tree)
    return EncoderOutput(x=restore(p, c_new, part.layout), diagnostics=tuple(diags))


# Model config files are plain "key = value" lines; blank lines and lines
# starting with # are ignored, and a trailing "# comment" is stripped. Keys:
#   dim, heads, ffn_dim, layers        required ints
#   init_layers                        int, default min(4, layers - 1)
#   segment_width                      int, default 512
#   k                                  int, default 2
#   budget                             one of: lossless (default),
#                                      two_resolution, fixed_splits, per_level
#   h                                  int, required by two_resolution and
#                                      fixed_splits
#   budget_levels                      "scale:count,scale:count" for per_level
#   scoring                            projected (default) | simplified
#   normalized_attention               bool, default true
#   activation                         relu (default) | gelu
#   use_layer_norm                     bool, default false
#   score_scaling                      bool, default true
#   seed                               int, default 0 (weight generation)
#   weight_scale                       float, default 0.1
#   weights_prefix                     optional path prefix; layer i is read
#                                      from <prefix>.layer<i>.bin instead of
#                                      being generated from the seed
_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}

_KNOWN_KEYS = {
    "dim", "heads", "ffn_dim", "layers", "init_layers", "segment_width", "k",
    "budget", "h", "budget_levels", "scoring", "normalized_attention",
    "activation", "use_layer_norm", "score_scaling", "seed", "weight_scale",
    "weights_prefix",
}


def _parse_kv(text: str, origin: str) -> dict[str, tuple[int, str]]:
    out: dict[str, tuple[int, str]] = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}: line {ln}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KNOWN_KEYS:
            raise ConfigError(f"{origin}: line {ln}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{origin}: line {ln}: duplicate key {key!r}")
        if not value:
            raise ConfigError(f"{origin}: line {ln}: empty value for {key!r}")
        out[key] = (ln, value)
    return out


def _typed(kv, origin, key, convert, default):
    if key not in kv:
        if default is None:
            raise ConfigError(f"{origin}: missing required key {key!r}")
        return default
    ln, value = kv[key]
    try:
        return convert(value)
    except (ValueError, KeyError):
        raise ConfigError(f"{origin}: line {ln}: bad value {value!r} for {key!r}") from None


def _parse_budget(kv, origin) -> SelectionBudget:
    kind = _typed(kv, origin, "budget", str, "lossless")
    if kind == "lossless":
        return SelectionBudget.lossless()
    if kind in ("two_resolution", "fixed_splits"):
        h = _typed(kv, origin, "h", int, None)
        return getattr(SelectionBudget, kind)(h)
    if kind == "per_level":
        ln, raw = kv.get("budget_levels", (0, None))
        if raw is None:
            raise ConfigError(f"{origin}: budget per_level requires budget_levels")
        levels = {}
        for piece in raw.split(","):
            try:
                scale, count = piece.split(":")
                levels[int(scale)] = int(count)
            except ValueError:
                raise ConfigError(
                    f"{origin}: line {ln}: bad budget_levels entry {piece.strip()!r}"
                ) from None
        return SelectionBudget.per_level(levels)
    ln, _ = kv["budget"]
    raise ConfigError(f"{origin}: line {ln}: unknown budget kind {kind!r}")


def load_model_config(path: str) -> ModelConfig:
    """Build a ModelConfig from a key = value file (format documented above)."""
    origin = str(path)
    text = Path(path).read_text()
    kv = _parse_kv(text, origin)
    num_layers = _typed(kv, origin, "layers", int, None)
    boolean = lambda v: _BOOL[v.lower()]
    layer_cfg = LayerConfig(
        dim=_typed(kv, origin, "dim", int, None),
        heads=_typed(kv, origin, "heads", int, None),
        ffn_dim=_typed(kv, origin, "ffn_dim", int, None),
        activation=_typed(kv, origin, "activation", str, "relu"),
        use_layer_norm=_typed(kv, origin, "use_layer_norm", boolean, False),
        score_scaling=_typed(kv, origin, "score_scaling", boolean, True),
    )
    if "weights_prefix" in kv:
        prefix = kv["weights_prefix"][1]
        layers = tuple(load_weights(f"{prefix}.layer{i}.bin") for i in range(num_layers))
        for i, w in enumerate(layers):
            if w.config != layer_cfg:
                raise ConfigError(
                    f"{origin}: layer {i} weight file disagrees with config ({w.config})"
                )
    else:
        rng = Rng(_typed(kv, origin, "seed", int, 0))
        scale = _typed(kv, origin, "weight_scale", float, 0.1)
        layers = tuple(LayerWeights.random(layer_cfg, rng, scale) for _ in range(num_layers))
    return ModelConfig(
        layers=layers,
        init_layers=_typed(kv, origin, "init_layers", int, min(4, num_layers - 1)),
        segment_width=_typed(kv, origin, "segment_width", int, 512),
        k=_typed(kv, origin, "k", int, 2),
        budget=_parse_budget(kv, origin),
        scoring=_typed(kv, origin, "scoring", str, "projected"),
        normalized_attention=_typed(kv, origin, "normalized_attention", boolean, True),
    )
