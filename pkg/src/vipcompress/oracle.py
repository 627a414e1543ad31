"""Brute-force dense references for the compressed layer algebra.

Everything here materializes the compression operator as explicit matrices
and evaluates the claimed identities literally, with per-row loops where
that makes the transcription more obviously faithful. These functions exist
to check the fast paths, not to be fast; they refuse to run past a small
size cap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .components import ComponentSet, dense_S, dense_S_pinv, segment_mean
from .layer import LayerWeights, ffn, layer_norm
from .layout import PartitionedSequence

__all__ = [
    "MAX_ORACLE_ROWS",
    "DenseCompressed",
    "build_dense_compressed",
    "dense_compressed_layer",
    "hat_approximation",
    "error_decomposition",
]

MAX_ORACLE_ROWS = 512


@dataclass(frozen=True)
class DenseCompressed:
    """Dense compression operator over the full [P; C] stack.

    s_matrix is block diagonal: identity on the VIP rows, the averaging
    matrix S_c on the rest. s_pinv is its pseudo-inverse and multiplicities
    the per-key copy counts (1 for VIP keys, segment length for the rest).
    """

    s_matrix: np.ndarray
    s_pinv: np.ndarray
    multiplicities: np.ndarray


def build_dense_compressed(n_p: int, selected: ComponentSet) -> DenseCompressed:
    r_c = len(selected)
    n = n_p + selected.n_c
    s = np.zeros((n_p + r_c, n))
    s[:n_p, :n_p] = np.eye(n_p)
    s[n_p:, n_p:] = dense_S(selected)
    s_pinv = np.zeros((n, n_p + r_c))
    s_pinv[:n_p, :n_p] = np.eye(n_p)
    s_pinv[n_p:, n_p:] = dense_S_pinv(selected)
    mult = np.concatenate([np.ones(n_p), selected.multiplicities()])
    return DenseCompressed(s_matrix=s, s_pinv=s_pinv, multiplicities=mult)


def _naive_weighted_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, mult: np.ndarray
) -> np.ndarray:
    """Row-at-a-time weighted softmax attention (normalized path)."""
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        scores = np.array([float(q[i] @ k[j]) for j in range(k.shape[0])])
        shift = scores.max()
        e = np.array([mult[j] * math.exp(scores[j] - shift) for j in range(k.shape[0])])
        out[i] = (e / e.sum()) @ v
    return out


def _naive_mha(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, w: LayerWeights, mult: np.ndarray
) -> np.ndarray:
    c = w.config
    pieces = []
    for h in range(c.heads):
        qh = q @ w.q_proj[h]
        kh = k @ w.k_proj[h]
        if c.score_scaling:
            qh = qh / math.sqrt(c.head_dim)
        pieces.append(_naive_weighted_attention(qh, kh, v @ w.v_proj[h], mult))
    return np.concatenate(pieces, axis=1) @ w.out_proj


def _naive_unnormalized(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, mult: np.ndarray
) -> np.ndarray:
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        e = np.array([mult[j] * math.exp(float(q[i] @ k[j])) for j in range(k.shape[0])])
        out[i] = e @ v
    return out


def dense_compressed_layer(
    seq: PartitionedSequence,
    selected: ComponentSet,
    weights: LayerWeights,
    normalized: bool = True,
    pad_count: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Literal evaluation of S_pinv @ gamma(S @ X) + X with dense matrices.

    Returns (p_new, c_new) where c_new is the full decompressed block.
    Fully padded components get zero key weight; their decompressed rows are
    bookkeeping only and are zeroed to match the sparse path's convention.
    """
    n = seq.p.shape[0] + seq.c.shape[0]
    if n > MAX_ORACLE_ROWS:
        raise ValueError(f"oracle capped at {MAX_ORACLE_ROWS} total rows, got {n}")
    n_p = seq.p.shape[0]
    dense = build_dense_compressed(n_p, selected)
    x = np.vstack([seq.p, seq.c])
    z = dense.s_matrix @ x
    mult = dense.multiplicities.copy()
    if pad_count:
        real = selected.n_c - pad_count
        for j, comp in enumerate(selected.components):
            if comp.start >= real:
                mult[n_p + j] = 0.0
    c = weights.config
    if c.use_layer_norm:
        zq = layer_norm(z, weights.ln1_gain, weights.ln1_bias)
    else:
        zq = z
    if normalized:
        attn = _naive_mha(zq, zq, zq, weights, mult)
    else:
        attn = _naive_unnormalized(zq, zq, zq, mult)
    pre = attn + z
    if c.use_layer_norm:
        pre = layer_norm(pre, weights.ln2_gain, weights.ln2_bias)
    body = ffn(pre, weights) + attn
    x_new = dense.s_pinv @ body + x
    p_new = x_new[:n_p]
    c_new = x_new[n_p:]
    if pad_count:
        real = selected.n_c - pad_count
        for comp in selected.components:
            if comp.start >= real:
                c_new[comp.start:comp.stop] = 0.0
    return p_new, c_new


def hat_approximation(
    p_rows: np.ndarray, c_rows: np.ndarray, selected: ComponentSet
) -> np.ndarray:
    """The compressed stand-in for exp(P @ C^T), built entry by entry.

    Entry (i, j) is exp(<p_i, mean of the component covering column j>),
    with the mean taken directly from C. Algebraically this equals
    exp(P @ C^T @ S_c^T) @ diag(multiplicities) @ S_c.
    """
    n_p = p_rows.shape[0]
    out = np.zeros((n_p, selected.n_c))
    for comp in selected.components:
        mean = segment_mean(c_rows, comp)
        for i in range(n_p):
            out[i, comp.start:comp.stop] = math.exp(float(p_rows[i] @ mean))
    return out


def error_decomposition(
    p_rows: np.ndarray, c_rows: np.ndarray, selected: ComponentSet, i: int
) -> tuple[float, float]:
    """Squared error of hat row i, directly and as a per-component sum.

    The direct value is || exp(p_i @ C^T) - hat row i ||^2. The formula
    value factors each component's contribution as

        exp(<p_i, mean>)^2 * sum_j (exp(<p_i, c_j - mean>) - 1)^2

    over the component's rows j, which is the exact factoring of
    (exp(<p_i, c_j>) - exp(<p_i, mean>))^2: a squared attention weight times
    a squared deviation sum. Both values are returned so callers check the
    identity instead of trusting it.
    """
    p_i = p_rows[i]
    formula = 0.0
    for comp in selected.components:
        mean = segment_mean(c_rows, comp)
        base = math.exp(float(p_i @ mean)) ** 2
        acc = 0.0
        for j in range(comp.start, comp.stop):
            acc += (math.exp(float(p_i @ (c_rows[j] - mean))) - 1.0) ** 2
        formula += base * acc
    exact = np.array([math.exp(float(p_i @ c_rows[j])) for j in range(c_rows.shape[0])])
    hat_row = hat_approximation(p_rows[i:i + 1], c_rows, selected)[0]
    direct = float(((exact - hat_row) ** 2).sum())
    return direct, formula
