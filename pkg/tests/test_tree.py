"""Averaging-tree checks: build, retrieve, sparse update, serialization.

The dense oracle for updates follows the decompression route: given the
selected cover J and new compressed rows, the block the tree must now
represent is C + S_pinv @ (new_rows - S @ C). Everything the tree does is
compared against that explicit reconstruction.
"""

import numpy as np
import pytest

from vipcompress import (
    Component,
    ComponentSet,
    Rng,
    SelectionBudget,
    apply_update,
    build_plan,
    build_tree,
    dense_S,
    dense_S_pinv,
    load_tree,
    materialize,
    retrieve,
    retrieve_many,
    save_tree,
    segment_mean,
    select_components,
)

from helpers import random_component_set


def test_build_hand_case():
    tree = build_tree(np.array([[1.0], [2.0], [3.0], [4.0]]), k=2)
    np.testing.assert_array_equal(tree.root, [2.5])
    np.testing.assert_array_equal(tree.deltas[2], [[1.0], [-1.0]])
    np.testing.assert_array_equal(tree.deltas[1], [[0.5], [-0.5], [0.5], [-0.5]])


def test_build_constant_block():
    tree = build_tree(np.full((8, 3), 7.25), k=2)
    np.testing.assert_array_equal(tree.root, [7.25, 7.25, 7.25])
    for s in tree.scales():
        np.testing.assert_array_equal(tree.deltas[s], np.zeros((8 // s, 3)))


def test_build_rejects_non_power():
    with pytest.raises(ValueError, match="power"):
        build_tree(np.zeros((6, 1)), k=2)
    with pytest.raises(ValueError, match="k must be"):
        build_tree(np.zeros((4, 1)), k=1)


def test_deltas_match_direct_means():
    c = Rng(0).normal((64, 8))
    tree = build_tree(c, k=2)
    for s in tree.scales():
        for x in range(1, 64 // s + 1):
            own = segment_mean(c, Component(s, x))
            parent = segment_mean(c, Component(s * 2, (x - 1) // 2 + 1))
            np.testing.assert_allclose(tree.deltas[s][x - 1], parent - own, atol=1e-13)


def test_retrieve_root_and_hand_path():
    tree = build_tree(np.array([[1.0], [2.0], [3.0], [4.0]]), k=2)
    np.testing.assert_array_equal(retrieve(tree, Component(4, 1)), [2.5])
    # (1,4): root - delta(2,2) - delta(1,4) = 2.5 - (-1.0) - (-0.5) = 4
    np.testing.assert_array_equal(retrieve(tree, Component(1, 4)), [4.0])


def test_retrieve_every_component_matches_direct_mean():
    for k in (2, 4):
        c = Rng(1).normal((64, 5))
        tree = build_tree(c, k=k)
        s = 1
        while s <= 64:
            idx = np.arange(1, 64 // s + 1)
            got = retrieve_many(tree, s, idx)
            expect = c.reshape(64 // s, s, 5).mean(axis=1)
            np.testing.assert_allclose(got, expect, atol=1e-12)
            s *= k


def test_retrieve_range_checks():
    tree = build_tree(np.zeros((8, 1)), k=2)
    with pytest.raises(ValueError):
        retrieve(tree, Component(2, 5))
    with pytest.raises(ValueError):
        retrieve_many(tree, 3, np.array([1]))


def test_retrieve_path_length_counter():
    # depth of (1, x) in an n_c=16, k=2 tree is log2(16) = 4 delta reads.
    tree = build_tree(Rng(2).normal((16, 2)), k=2)
    tree.reset_counters()
    retrieve(tree, Component(1, 7))
    assert tree.retrievals == 1
    assert tree.delta_reads == 4
    tree.reset_counters()
    retrieve(tree, Component(16, 1))
    assert tree.delta_reads == 0


def test_materialize_round_trip_integer_block_exact():
    c = np.arange(32, dtype=np.float64).reshape(16, 2)
    tree = build_tree(c, k=2)
    assert np.array_equal(materialize(tree), c)


def test_materialize_round_trip_random():
    for k in (2, 4):
        c = Rng(3).normal((16, 3))
        np.testing.assert_allclose(materialize(build_tree(c, k)), c, atol=1e-12)


def test_sibling_deltas_sum_to_zero():
    for k in (2, 4):
        tree = build_tree(Rng(4).normal((16, 3)), k=k)
        for s in tree.scales():
            groups = tree.deltas[s].reshape(-1, k, 3).sum(axis=1)
            np.testing.assert_allclose(groups, 0.0, atol=1e-12)


def update_oracle(c, selected, new_rows):
    s_mat = dense_S(selected)
    return c + dense_S_pinv(selected) @ (new_rows - s_mat @ c)


def test_apply_update_lossless_singletons():
    c = Rng(5).normal((8, 2))
    tree = build_tree(c, k=2)
    js = ComponentSet(tuple(Component(1, i + 1) for i in range(8)), n_c=8, k=2)
    c_new = Rng(6).normal((8, 2))
    apply_update(tree, js, c_new)
    np.testing.assert_allclose(materialize(tree), c_new, atol=1e-12)


def test_apply_update_noop_keeps_values_but_still_writes():
    c = Rng(7).normal((8, 2))
    tree = build_tree(c, k=2)
    js = ComponentSet(
        (Component(2, 1), Component(1, 3), Component(1, 4), Component(4, 2)), n_c=8, k=2
    )
    rows = build_plan(js, tree).rows
    writes = apply_update(tree, js, rows)
    assert writes > 0
    np.testing.assert_allclose(materialize(tree), c, atol=1e-12)


def test_apply_update_traversed_node_set_is_exact():
    # J = {(2,1),(1,3),(1,4),(4,2)} over 8 rows: the update must touch
    # deltas (1,3),(1,4),(2,1),(2,2),(4,1),(4,2) and the root, and must
    # leave deltas (1,1),(1,2) byte-identical.
    c = Rng(8).normal((8, 3))
    tree = build_tree(c, k=2)
    before = {s: tree.deltas[s].copy() for s in tree.scales()}
    js = ComponentSet(
        (Component(2, 1), Component(1, 3), Component(1, 4), Component(4, 2)), n_c=8, k=2
    )
    new_rows = build_plan(js, tree).rows + Rng(9).normal((4, 3))
    writes = apply_update(tree, js, new_rows)

    assert writes == 7  # 2*|J| - 1 for k=2
    assert tree.write_counter == 7
    assert np.array_equal(tree.deltas[1][0], before[1][0])
    assert np.array_equal(tree.deltas[1][1], before[1][1])
    for s, x in ((1, 3), (1, 4), (2, 1), (2, 2), (4, 1), (4, 2)):
        assert not np.array_equal(tree.deltas[s][x - 1], before[s][x - 1])

    expect = update_oracle(c, js, new_rows)
    np.testing.assert_allclose(materialize(tree), expect, atol=1e-12)


def test_apply_update_matches_dense_oracle_random():
    rng = np.random.default_rng(10)
    vals = Rng(11)
    for trial in range(25):
        k = int(rng.choice([2, 4]))
        n_c = k ** int(rng.integers(1, 4))
        c = vals.normal((n_c, 4))
        tree = build_tree(c, k=k)
        js = random_component_set(rng, n_c, k)
        new_rows = build_plan(js, tree).rows + vals.normal((len(js), 4))
        writes = apply_update(tree, js, new_rows)
        assert writes <= 2 * len(js) + 1
        np.testing.assert_allclose(
            materialize(tree), update_oracle(c, js, new_rows), atol=1e-11
        )


def test_apply_update_then_retrieve_covers_new_means():
    c = Rng(12).normal((16, 2))
    tree = build_tree(c, k=2)
    js = random_component_set(np.random.default_rng(13), 16, 2)
    new_rows = Rng(14).normal((len(js), 2))
    apply_update(tree, js, new_rows)
    for comp, row in zip(js, new_rows):
        np.testing.assert_allclose(retrieve(tree, comp), row, atol=1e-12)


def test_apply_update_shape_and_cover_checks():
    tree = build_tree(np.zeros((8, 1)), k=2)
    js = ComponentSet(
        (Component(2, 1), Component(1, 3), Component(1, 4), Component(4, 2)), n_c=8, k=2
    )
    with pytest.raises(Exception):
        apply_update(tree, js, np.zeros((3, 1)))
    other = build_tree(np.zeros((4, 1)), k=2)
    with pytest.raises(ValueError, match="n_c"):
        apply_update(other, js, np.zeros((4, 1)))


def test_write_count_formula_general_k():
    # any disjoint cover has (|J|-1)/(k-1) internal split nodes, so delta
    # writes total |J| + (|J|-1)/(k-1) - 1 values plus the root write,
    # always within the 2|J|+1 bound.
    rng = np.random.default_rng(15)
    for k in (2, 4):
        n_c = k ** 3
        c = Rng(16).normal((n_c, 2))
        tree = build_tree(c, k=k)
        js = random_component_set(rng, n_c, k)
        writes = apply_update(tree, js, build_plan(js, tree).rows)
        assert writes <= 2 * len(js) + 1


def test_select_then_update_write_bound():
    c = Rng(17).normal((64, 4))
    tree = build_tree(c, k=2)
    p = Rng(18).normal((3, 4))
    js = select_components(p, tree, SelectionBudget.two_resolution(8))
    new_rows = build_plan(js, tree).rows * 1.5
    writes = apply_update(tree, js, new_rows)
    assert writes <= 2 * len(js) + 1


def test_snapshot_round_trip(tmp_path):
    tree = build_tree(Rng(19).normal((16, 3)), k=2)
    path = str(tmp_path / "t.bin")
    save_tree(tree, path)
    back = load_tree(path)
    assert (back.n_c, back.k, back.d) == (16, 2, 3)
    assert np.array_equal(back.root, tree.root)
    for s in tree.scales():
        assert np.array_equal(back.deltas[s], tree.deltas[s])


def test_snapshot_bytes_stable(tmp_path):
    tree = build_tree(Rng(20).normal((8, 2)), k=2)
    p1, p2 = str(tmp_path / "a.bin"), str(tmp_path / "b.bin")
    save_tree(tree, p1)
    save_tree(tree, p2)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_snapshot_rejects_garbage(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"WHAT" + b"\x00" * 32)
    with pytest.raises(ValueError, match="not a tree snapshot"):
        load_tree(str(path))


def test_copy_is_independent():
    tree = build_tree(Rng(21).normal((8, 2)), k=2)
    twin = tree.copy()
    twin.root += 1.0
    twin.deltas[1][0] += 1.0
    assert not np.array_equal(tree.root, twin.root)
    assert not np.array_equal(tree.deltas[1][0], twin.deltas[1][0])
