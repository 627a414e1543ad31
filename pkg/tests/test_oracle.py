"""Checks that the dense references are themselves trustworthy."""

import math

import numpy as np
import pytest

from vipcompress import (
    Component,
    ComponentSet,
    LayerConfig,
    LayerWeights,
    Rng,
    layer_forward,
    reorder,
)
from vipcompress.oracle import (
    MAX_ORACLE_ROWS,
    build_dense_compressed,
    dense_compressed_layer,
    error_decomposition,
    hat_approximation,
)

from helpers import random_component_set


def singleton_cover(n_c, k=2):
    return ComponentSet(tuple(Component(1, i + 1) for i in range(n_c)), n_c=n_c, k=k)


def partition(seed, n=12, n_p=2, d=6, k=2, scale=1.0):
    x = Rng(seed).normal((n, d), scale=scale)
    mask = np.zeros(n, dtype=bool)
    mask[:n_p] = True
    return reorder(x, mask, k)


def test_build_dense_compressed_structure():
    js = ComponentSet(
        (Component(2, 1), Component(1, 3), Component(1, 4), Component(4, 2)), n_c=8, k=2
    )
    dense = build_dense_compressed(2, js)
    assert dense.s_matrix.shape == (6, 10)
    assert dense.s_pinv.shape == (10, 6)
    np.testing.assert_array_equal(dense.multiplicities, [1, 1, 2, 1, 1, 4])
    # block structure: identity on VIP rows, one nonzero per column elsewhere
    np.testing.assert_array_equal(dense.s_matrix[:2, :2], np.eye(2))
    np.testing.assert_array_equal((dense.s_matrix != 0).sum(axis=0), np.ones(10))


def test_dense_layer_lossless_reduces_to_vanilla():
    part = partition(0, n=10, n_p=2, d=6)
    cfg = LayerConfig(dim=6, heads=2, ffn_dim=9)
    w = LayerWeights.random(cfg, Rng(1), scale=0.3)
    p_new, c_new = dense_compressed_layer(part, singleton_cover(8), w)
    full = layer_forward(np.vstack([part.p, part.c]), w)
    np.testing.assert_allclose(p_new, full[:2], atol=1e-9)
    np.testing.assert_allclose(c_new, full[2:], atol=1e-9)


def test_dense_layer_zero_weights_is_identity():
    part = partition(2, n=10, n_p=2, d=6)
    cfg = LayerConfig(dim=6, heads=2, ffn_dim=9)
    w = LayerWeights.zeros(cfg)
    p_new, c_new = dense_compressed_layer(part, singleton_cover(8), w)
    np.testing.assert_allclose(p_new, part.p, atol=1e-12)
    np.testing.assert_allclose(c_new, part.c, atol=1e-12)


def test_dense_layer_size_cap():
    part = partition(3, n=600, n_p=2, d=2)
    cfg = LayerConfig(dim=2, heads=1, ffn_dim=2)
    w = LayerWeights.zeros(cfg)
    with pytest.raises(ValueError, match=str(MAX_ORACLE_ROWS)):
        dense_compressed_layer(part, singleton_cover(part.c.shape[0]), w)


def test_hat_singletons_equal_plain_exp():
    rng = Rng(4)
    p = rng.normal((3, 4), scale=0.4)
    c = rng.normal((8, 4), scale=0.4)
    hat = hat_approximation(p, c, singleton_cover(8))
    np.testing.assert_allclose(hat, np.exp(p @ c.T), rtol=1e-14)


def test_hat_root_plan_is_rank_one():
    rng = Rng(5)
    p = rng.normal((3, 4), scale=0.4)
    c = rng.normal((8, 4), scale=0.4)
    js = ComponentSet((Component(8, 1),), n_c=8, k=2)
    hat = hat_approximation(p, c, js)
    mean = c.mean(axis=0)
    for i in range(3):
        np.testing.assert_allclose(
            hat[i], np.full(8, math.exp(float(p[i] @ mean))), rtol=1e-14
        )
    assert np.linalg.matrix_rank(hat) == 1


def test_hat_matches_matrix_product_identity():
    # hat == exp(P C^T S_c^T) @ D @ S_c, evaluated with explicit matrices
    from vipcompress import dense_S

    rng = Rng(6)
    np_rng = np.random.default_rng(7)
    for _ in range(10):
        n_c = int(np_rng.choice([8, 16, 32]))
        js = random_component_set(np_rng, n_c, 2)
        p = rng.normal((3, 5), scale=0.3)
        c = rng.normal((n_c, 5), scale=0.3)
        s = dense_S(js)
        product = np.exp(p @ c.T @ s.T) @ np.diag(js.multiplicities()) @ s
        np.testing.assert_allclose(
            hat_approximation(p, c, js), product, atol=1e-12
        )


def test_error_decomposition_zero_cases():
    rng = Rng(8)
    p = rng.normal((2, 4), scale=0.4)
    c = rng.normal((8, 4), scale=0.4)
    direct, formula = error_decomposition(p, c, singleton_cover(8), 0)
    assert direct == 0.0 and formula == 0.0

    constant = np.tile(rng.normal((1, 4), scale=0.4), (8, 1))
    js = ComponentSet((Component(4, 1), Component(2, 3), Component(1, 7), Component(1, 8)), n_c=8, k=2)
    direct, formula = error_decomposition(p, constant, js, 1)
    assert direct < 1e-25 and formula < 1e-25


def test_error_decomposition_identity_random():
    rng = Rng(9)
    np_rng = np.random.default_rng(10)
    for _ in range(20):
        n_c = int(np_rng.choice([8, 16]))
        js = random_component_set(np_rng, n_c, 2)
        p = rng.normal((3, 4), scale=0.5)
        c = rng.normal((n_c, 4), scale=0.5)
        i = int(np_rng.integers(0, 3))
        direct, formula = error_decomposition(p, c, js, i)
        assert abs(direct - formula) <= 1e-10 * (1.0 + direct)
