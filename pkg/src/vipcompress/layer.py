"""A single Transformer encoder layer, written for verifiability.

The layer body is gamma(X) = ffn(attn + X) + attn with attn = mha(X, X, X),
and the full residual step is layer_forward(X) = gamma(X) + X. Attention
accepts optional positive key weights: key j then counts as weights[j]
identical copies of itself inside the softmax. That weighting is what lets a
compressed sequence of segment means stand in for the full sequence.

``simplified_attention`` is the stripped form exp(Q K^T) V (no heads, no
projections, no normalization) used by the algebraic identity tests and the
unnormalized execution mode.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .dense import NonFiniteError, Rng, ShapeError, elementwise_exp, weighted_softmax_rows

__all__ = [
    "LayerConfig",
    "LayerWeights",
    "mha",
    "simplified_attention",
    "ffn",
    "layer_norm",
    "gamma",
    "layer_forward",
    "save_weights",
    "load_weights",
]

_ACTIVATIONS = ("relu", "gelu")


@dataclass(frozen=True)
class LayerConfig:
    """Static layer dimensions and switches.

    score_scaling multiplies attention scores by 1/sqrt(head_dim); it is on
    by default and can be disabled to reproduce the unscaled formulation.
    """

    dim: int
    heads: int
    ffn_dim: int
    activation: str = "relu"
    use_layer_norm: bool = False
    score_scaling: bool = True

    def __post_init__(self):
        if self.dim < 1 or self.heads < 1 or self.ffn_dim < 1:
            raise ValueError(f"dimensions must be positive: {self}")
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


@dataclass
class LayerWeights:
    """Learned parameters for one layer.

    q_proj/k_proj/v_proj are stacked per head with shape (heads, dim,
    head_dim); out_proj maps the concatenated head outputs back to dim.
    """

    config: LayerConfig
    q_proj: np.ndarray
    k_proj: np.ndarray
    v_proj: np.ndarray
    out_proj: np.ndarray
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray
    ln1_gain: np.ndarray | None = None
    ln1_bias: np.ndarray | None = None
    ln2_gain: np.ndarray | None = None
    ln2_bias: np.ndarray | None = None

    def __post_init__(self):
        c = self.config
        expect = {
            "q_proj": (c.heads, c.dim, c.head_dim),
            "k_proj": (c.heads, c.dim, c.head_dim),
            "v_proj": (c.heads, c.dim, c.head_dim),
            "out_proj": (c.heads * c.head_dim, c.dim),
            "ffn_w1": (c.dim, c.ffn_dim),
            "ffn_b1": (c.ffn_dim,),
            "ffn_w2": (c.ffn_dim, c.dim),
            "ffn_b2": (c.dim,),
        }
        for name, shape in expect.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {shape}")
        if c.use_layer_norm:
            for name in ("ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"):
                arr = getattr(self, name)
                if arr is None or arr.shape != (c.dim,):
                    raise ShapeError(f"{name} must have shape ({c.dim},)")

    @classmethod
    def random(cls, config: LayerConfig, rng: Rng, scale: float = 0.1) -> "LayerWeights":
        c = config
        return cls(
            config=config,
            q_proj=rng.normal((c.heads, c.dim, c.head_dim), scale),
            k_proj=rng.normal((c.heads, c.dim, c.head_dim), scale),
            v_proj=rng.normal((c.heads, c.dim, c.head_dim), scale),
            out_proj=rng.normal((c.heads * c.head_dim, c.dim), scale),
            ffn_w1=rng.normal((c.dim, c.ffn_dim), scale),
            ffn_b1=rng.normal((c.ffn_dim,), scale),
            ffn_w2=rng.normal((c.ffn_dim, c.dim), scale),
            ffn_b2=rng.normal((c.dim,), scale),
            **_ln_identity(c),
        )

    @classmethod
    def zeros(cls, config: LayerConfig) -> "LayerWeights":
        c = config
        return cls(
            config=config,
            q_proj=np.zeros((c.heads, c.dim, c.head_dim)),
            k_proj=np.zeros((c.heads, c.dim, c.head_dim)),
            v_proj=np.zeros((c.heads, c.dim, c.head_dim)),
            out_proj=np.zeros((c.heads * c.head_dim, c.dim)),
            ffn_w1=np.zeros((c.dim, c.ffn_dim)),
            ffn_b1=np.zeros(c.ffn_dim),
            ffn_w2=np.zeros((c.ffn_dim, c.dim)),
            ffn_b2=np.zeros(c.dim),
            **_ln_identity(c),
        )


def _ln_identity(c: LayerConfig) -> dict:
    """Identity layer-norm vectors when the config enables layer norm."""
    if not c.use_layer_norm:
        return {}
    return dict(
        ln1_gain=np.ones(c.dim), ln1_bias=np.zeros(c.dim),
        ln2_gain=np.ones(c.dim), ln2_bias=np.zeros(c.dim),
    )


def _check_qkv(q: np.ndarray, k: np.ndarray, v: np.ndarray, dim: int) -> None:
    for name, arr in (("q", q), ("k", k), ("v", v)):
        if arr.ndim != 2 or arr.shape[1] != dim:
            raise ShapeError(f"{name} has shape {arr.shape}, expected (*, {dim})")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"k has {k.shape[0]} rows but v has {v.shape[0]}")


def mha(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    weights: LayerWeights,
    key_weights: np.ndarray | None = None,
) -> np.ndarray:
    """Multi-head attention with optional positive key multiplicities."""
    c = weights.config
    _check_qkv(q, k, v, c.dim)
    heads = []
    scale = 1.0 / np.sqrt(c.head_dim) if c.score_scaling else 1.0
    for h in range(c.heads):
        scores = (q @ weights.q_proj[h]) @ (k @ weights.k_proj[h]).T
        if c.score_scaling:
            scores = scores * scale
        attn = weighted_softmax_rows(scores, key_weights)
        heads.append(attn @ (v @ weights.v_proj[h]))
    out = np.concatenate(heads, axis=1) @ weights.out_proj
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("attention produced non-finite values")
    return out


def simplified_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    key_weights: np.ndarray | None = None,
) -> np.ndarray:
    """Unnormalized attention exp(Q K^T) V, optionally key-weighted."""
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("q, k, v must be 2-D")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(
            f"incompatible shapes q={q.shape} k={k.shape} v={v.shape}"
        )
    e = elementwise_exp(q @ k.T)
    if key_weights is not None:
        key_weights = np.asarray(key_weights, dtype=e.dtype)
        if key_weights.shape != (k.shape[0],):
            raise ShapeError(
                f"key weights shape {key_weights.shape} does not match key count {k.shape[0]}"
            )
        e = e * key_weights
    return e @ v


def ffn(x: np.ndarray, weights: LayerWeights) -> np.ndarray:
    pre = x @ weights.ffn_w1 + weights.ffn_b1
    if weights.config.activation == "relu":
        act = np.maximum(pre, 0.0)
    else:
        act = 0.5 * pre * (1.0 + erf(pre / np.sqrt(2.0)))
    return act @ weights.ffn_w2 + weights.ffn_b2


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gain + bias


def gamma(
    x: np.ndarray,
    weights: LayerWeights,
    keys: np.ndarray | None = None,
    key_weights: np.ndarray | None = None,
    normalized: bool = True,
) -> np.ndarray:
    """Layer body without the final residual: ffn(attn + X) + attn.

    ``keys`` defaults to ``x`` (self-attention). A caller attending against a
    compressed stand-in passes the stand-in rows plus their multiplicities.
    """
    c = weights.config
    kv = x if keys is None else keys
    if c.use_layer_norm:
        qn = layer_norm(x, weights.ln1_gain, weights.ln1_bias)
        kn = qn if keys is None else layer_norm(kv, weights.ln1_gain, weights.ln1_bias)
    else:
        qn, kn = x, kv
    if normalized:
        attn = mha(qn, kn, kn, weights, key_weights)
    else:
        attn = simplified_attention(qn, kn, kn, key_weights)
    pre = attn + x
    if c.use_layer_norm:
        pre = layer_norm(pre, weights.ln2_gain, weights.ln2_bias)
    return ffn(pre, weights) + attn


def layer_forward(
    x: np.ndarray,
    weights: LayerWeights,
    keys: np.ndarray | None = None,
    key_weights: np.ndarray | None = None,
    normalized: bool = True,
) -> np.ndarray:
    """Full residual layer: gamma(X) + X."""
    return gamma(x, weights, keys, key_weights, normalized) + x


# Weight file layout, little endian throughout:
#   magic   4 bytes  b"VCCW"
#   version u32      1
#   dim     u32
#   heads   u32
#   ffn_dim u32
#   activation  u8   0 = relu, 1 = gelu
#   layer_norm  u8   0 / 1
#   scaling     u8   0 / 1
#   reserved    u8   0
# followed by float64 arrays in C order: q_proj, k_proj, v_proj, out_proj,
# ffn_w1, ffn_b1, ffn_w2, ffn_b2, then the four layer-norm vectors when the
# layer_norm flag is set.
_HEADER = struct.Struct("<4sIIIIBBBB")
_MAGIC = b"VCCW"


def save_weights(weights: LayerWeights, path: str) -> None:
    c = weights.config
    parts = [
        _HEADER.pack(
            _MAGIC,
            1,
            c.dim,
            c.heads,
            c.ffn_dim,
            _ACTIVATIONS.index(c.activation),
            int(c.use_layer_norm),
            int(c.score_scaling),
            0,
        )
    ]
    arrays = [
        weights.q_proj, weights.k_proj, weights.v_proj, weights.out_proj,
        weights.ffn_w1, weights.ffn_b1, weights.ffn_w2, weights.ffn_b2,
    ]
    if c.use_layer_norm:
        arrays += [weights.ln1_gain, weights.ln1_bias, weights.ln2_gain, weights.ln2_bias]
    parts.extend(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_weights(path: str) -> LayerWeights:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size or blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not a layer weight file")
    magic, version, dim, heads, ffn_dim, act, use_ln, scaling, _ = _HEADER.unpack_from(blob)
    if version != 1:
        raise ValueError(f"{path}: unsupported weight file version {version}")
    config = LayerConfig(
        dim=dim,
        heads=heads,
        ffn_dim=ffn_dim,
        activation=_ACTIVATIONS[act],
        use_layer_norm=bool(use_ln),
        score_scaling=bool(scaling),
    )
    offset = _HEADER.size
    head_dim = config.head_dim

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        offset += count * 8
        return arr.reshape(shape).astype(np.float64)

    kwargs = dict(
        q_proj=take((heads, dim, head_dim)),
        k_proj=take((heads, dim, head_dim)),
        v_proj=take((heads, dim, head_dim)),
        out_proj=take((heads * head_dim, dim)),
        ffn_w1=take((dim, ffn_dim)),
        ffn_b1=take((ffn_dim,)),
        ffn_w2=take((ffn_dim, dim)),
        ffn_b2=take((dim,)),
    )
    if config.use_layer_norm:
        kwargs.update(
            ln1_gain=take((dim,)), ln1_bias=take((dim,)),
            ln2_gain=take((dim,)), ln2_bias=take((dim,)),
        )
    if offset != len(blob):
        raise ValueError(f"{path}: trailing bytes ({len(blob) - offset})")
    return LayerWeights(config=config, **kwargs)
