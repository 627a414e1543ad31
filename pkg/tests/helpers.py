"""Independent transcriptions used as oracles.

Everything here is written scalar-by-scalar with math.exp and explicit
Python loops, on purpose: these functions must not share evaluation order or
library calls with the fast paths they check.
"""

import math

import numpy as np

from vipcompress import Component, ComponentSet, PartitionedSequence
from vipcompress import build_tree, layer_forward, reorder, restore, select_components
from vipcompress.oracle import dense_compressed_layer


def naive_weighted_softmax(scores, weights=None):
    scores = np.asarray(scores, dtype=float)
    n, m = scores.shape
    if weights is None:
        weights = [1.0] * m
    out = np.zeros((n, m))
    for i in range(n):
        shift = max(scores[i])
        e = [weights[j] * math.exp(scores[i, j] - shift) for j in range(m)]
        z = sum(e)
        for j in range(m):
            out[i, j] = e[j] / z
    return out


def naive_mha(q, k, v, w, key_weights=None):
    c = w.config
    blocks = []
    for h in range(c.heads):
        qh = np.array([[sum(q[i, a] * w.q_proj[h][a, b] for a in range(c.dim))
                        for b in range(c.head_dim)] for i in range(q.shape[0])])
        kh = np.array([[sum(k[i, a] * w.k_proj[h][a, b] for a in range(c.dim))
                        for b in range(c.head_dim)] for i in range(k.shape[0])])
        vh = np.array([[sum(v[i, a] * w.v_proj[h][a, b] for a in range(c.dim))
                        for b in range(c.head_dim)] for i in range(v.shape[0])])
        scores = np.zeros((q.shape[0], k.shape[0]))
        for i in range(q.shape[0]):
            for j in range(k.shape[0]):
                s = sum(qh[i, a] * kh[j, a] for a in range(c.head_dim))
                scores[i, j] = s / math.sqrt(c.head_dim) if c.score_scaling else s
        attn = naive_weighted_softmax(scores, key_weights)
        blocks.append(attn @ vh)
    cat = np.concatenate(blocks, axis=1)
    return np.array([[sum(cat[i, a] * w.out_proj[a, b] for a in range(cat.shape[1]))
                      for b in range(c.dim)] for i in range(cat.shape[0])])


def naive_simplified_attention(q, k, v, key_weights=None):
    out = np.zeros((q.shape[0], v.shape[1]))
    m = k.shape[0]
    weights = [1.0] * m if key_weights is None else list(key_weights)
    for i in range(q.shape[0]):
        e = [weights[j] * math.exp(float(np.dot(q[i], k[j]))) for j in range(m)]
        for col in range(v.shape[1]):
            out[i, col] = sum(e[j] * v[j, col] for j in range(m))
    return out


def naive_ffn(x, w):
    c = w.config
    out = np.zeros((x.shape[0], c.dim))
    for i in range(x.shape[0]):
        hidden = []
        for b in range(c.ffn_dim):
            pre = sum(x[i, a] * w.ffn_w1[a, b] for a in range(c.dim)) + w.ffn_b1[b]
            if c.activation == "relu":
                hidden.append(pre if pre > 0 else 0.0)
            else:
                hidden.append(0.5 * pre * (1.0 + math.erf(pre / math.sqrt(2.0))))
        for col in range(c.dim):
            out[i, col] = sum(hidden[b] * w.ffn_w2[b, col] for b in range(c.ffn_dim)) + w.ffn_b2[col]
    return out


def naive_gamma(x, w):
    attn = naive_mha(x, x, x, w)
    return naive_ffn(attn + x, w) + attn


def naive_layer_forward(x, w):
    return naive_gamma(x, w) + x


def dense_encoder_oracle(x, vip_mask, cfg):
    """Whole-pipeline reference: dense compressed layers instead of the tree.

    Selection still runs through a tree (rebuilt from the current block each
    layer, so it sees the same means as the fast path), but every layer body
    is evaluated by the dense oracle and the block is carried around as an
    explicit matrix.
    """
    x = np.asarray(x, dtype=np.float64)
    for layer in cfg.layers[: cfg.init_layers]:
        pieces = [
            layer_forward(x[a : a + cfg.segment_width], layer)
            for a in range(0, x.shape[0], cfg.segment_width)
        ]
        x = np.vstack(pieces)
    part = reorder(x, vip_mask, cfg.k)
    pad = part.layout.pad_count
    p, c = part.p, part.c
    for layer in cfg.layers[cfg.init_layers :]:
        tree = build_tree(c, cfg.k)
        js = select_components(p, tree, cfg.budget, layer, cfg.scoring, pad)
        seq = PartitionedSequence(p=p, c=c, layout=part.layout)
        p, c = dense_compressed_layer(seq, js, layer, cfg.normalized_attention, pad)
    return restore(p, c, part.layout)


def random_component_set(rng: np.random.Generator, n_c: int, k: int, split_prob=0.55) -> ComponentSet:
    """A random laminar cover built by recursive coin-flip splitting."""
    comps = []

    def visit(scale, index):
        if scale > 1 and rng.random() < split_prob:
            for j in range(1, k + 1):
                visit(scale // k, k * (index - 1) + j)
        else:
            comps.append(Component(scale, index))

    visit(n_c, 1)
    comps.sort(key=lambda c: c.start)
    return ComponentSet(tuple(comps), n_c, k)
