import numpy as np
import pytest

from ckge.adapters import (AdapterStore, LoRAFactor, LoRAGroup, OffsetGapError, allocate_ranks,
                           compose, create_group, freeze_group, max_rank, raw_ranks,
                           trainable_parameter_count)
from ckge.layering import build_layer_plan


def loop_matmul(a, b):
    n, r = a.shape
    d = b.shape[1]
    out = np.zeros((n, d))
    for i in range(n):
        for j in range(d):
            acc = 0.0
            for k in range(r):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def plan_of(sizes, sums=None, relations=(), start=0):
    ents, dc, lo = [], {}, start
    sums = sums or [0.0] * len(sizes)
    for n, s in zip(sizes, sums):
        layer = list(range(lo, lo + n))
        for e in layer:
            dc[e] = s / n
        ents += layer
        lo += n
    return build_layer_plan(ents, dc, relations, len(sizes))


def test_raw_rank_arithmetic():
    assert raw_ranks([0.6, 0.2], 10) == pytest.approx([15.0, 5.0])


def test_equal_sums_give_base_rank():
    assert allocate_ranks([0.3, 0.3, 0.3], 17, 200, layer_sizes=[500, 500, 500]) == [17, 17, 17]


def test_all_zero_sums_fall_back_to_base():
    assert allocate_ranks([0.0, 0.0], 12, 200, layer_sizes=[100, 100]) == [12, 12]


def test_rank_rounding_half_up():
    # raw ranks 2.5 and 7.5
    assert allocate_ranks([1.0, 3.0], 5, 200, layer_sizes=[1000, 1000]) == [3, 8]


def test_rank_clamped_by_parameter_bound():
    # 50 x 200 layer: 50*200/250 = 40 exactly; rank 40 would tie the dense count, so 39
    assert max_rank(50, 200) == 39
    assert allocate_ranks([3.0, 0.0001], 40, 200, layer_sizes=[50, 50000])[0] == 39
    assert max_rank(1000, 200) == 166
    assert 166 * (1000 + 200) == 199_200 < 200_000


def test_max_rank_degenerate_layers():
    assert max_rank(1, 200) == 0
    assert max_rank(2, 200) == 1


def test_group_parameter_count_example():
    plan = plan_of([100], [1.0])
    group = create_group(plan, [10], 200, 20, seed=0, entity_offset=0)
    assert group.parameter_count() == 100 * 10 + 10 * 200 == 3000


def test_group_relations_only():
    plan = build_layer_plan([], {}, [3, 4], 1)
    group = create_group(plan, [], 200, 20, seed=0, relation_offset=3)
    assert group.entity_factors == []
    assert group.relation_factor is not None
    assert group.relation_factor.n == 2


def test_single_entity_layer_is_dense():
    plan = plan_of([1, 1], [0.5, 0.5])
    group = create_group(plan, [1, 1], 16, 4, seed=1, entity_offset=0)
    f = group.entity_factors[0]
    assert f.dense_fallback
    assert f.parameter_count() == 16
    np.testing.assert_array_equal(f.compose(), f.b)


def test_same_seed_same_init():
    plan = plan_of([30, 20], [1.0, 0.5], relations=[0, 1, 2])
    g1 = create_group(plan, [5, 3], 32, 4, seed=42)
    g2 = create_group(plan, [5, 3], 32, 4, seed=42)
    for f1, f2 in zip(g1.factors, g2.factors):
        assert f1.a.tobytes() == f2.a.tobytes()
        assert f1.b.tobytes() == f2.b.tobytes()


def test_init_scale_comparable_to_dense_rows():
    plan = plan_of([400], [1.0])
    group = create_group(plan, [20], 200, 4, seed=0, entity_offset=0)
    rows = group.entity_factors[0].compose()
    dense_std = 1 / np.sqrt(3 * 200)
    assert 0.2 * dense_std < rows.std() < 2 * dense_std


def test_compose_without_groups_is_origin():
    rng = np.random.default_rng(0)
    ent, rel = rng.normal(size=(4, 3)), rng.normal(size=(2, 3))
    view = compose(ent, rel, [])
    np.testing.assert_array_equal(view.entity_matrix, ent)
    np.testing.assert_array_equal(view.relation_matrix, rel)


def test_identity_factor_reproduces_b():
    rng = np.random.default_rng(1)
    m = rng.normal(size=(3, 5))
    f = LoRAFactor(np.eye(3), m, row_offset=2, ids=(2, 3, 4))
    view = compose(np.zeros((2, 5)), np.zeros((1, 5)), [LoRAGroup(1, [f])])
    np.testing.assert_array_equal(view.entity_matrix[2:], m)


def test_compose_matches_loop_oracle():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(5, 2)), rng.normal(size=(2, 3))
    f = LoRAFactor(a, b, row_offset=0, ids=tuple(range(5)))
    view = compose(np.empty((0, 3)), np.empty((0, 3)), [LoRAGroup(1, [f])])
    np.testing.assert_allclose(view.entity_matrix, loop_matmul(a, b), rtol=1e-12, atol=0)


def test_compose_places_rows_by_global_id():
    # layer order differs from id order: rows must land on their ids
    rng = np.random.default_rng(3)
    f1 = LoRAFactor(rng.normal(size=(2, 1)), rng.normal(size=(1, 4)), 3, (5, 3))
    f2 = LoRAFactor(rng.normal(size=(1, 1)), rng.normal(size=(1, 4)), 5, (4,))
    view = compose(np.zeros((3, 4)), np.zeros((1, 4)), [LoRAGroup(1, [f1, f2])])
    np.testing.assert_array_equal(view.entity_matrix[5], (f1.a @ f1.b)[0])
    np.testing.assert_array_equal(view.entity_matrix[3], (f1.a @ f1.b)[1])
    np.testing.assert_array_equal(view.entity_matrix[4], (f2.a @ f2.b)[0])


def test_compose_rejects_gaps():
    f = LoRAFactor(np.ones((2, 1)), np.ones((1, 3)), 4, (4, 5))
    with pytest.raises(OffsetGapError):
        compose(np.zeros((3, 3)), np.zeros((1, 3)), [LoRAGroup(1, [f])])


def test_trainable_count_and_freeze():
    plan = plan_of([1000], [1.0])
    group = create_group(plan, [100], 200, 20, seed=0, entity_offset=0)
    assert trainable_parameter_count([group], 0) == 120_000
    freeze_group(group)
    freeze_group(group)
    assert trainable_parameter_count([group]) == 0
    with pytest.raises(ValueError):
        group.entity_factors[0].a[0, 0] = 1.0


def test_store_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    store = AdapterStore(rng.normal(size=(6, 8)), rng.normal(size=(2, 8)))
    plan = plan_of([3, 2], [0.7, 0.2], relations=[2], start=6)
    g = create_group(plan, [2, 1], 8, 2, seed=9, snapshot_index=1, entity_offset=6, relation_offset=2)
    g.freeze()
    store.groups.append(g)
    before = store.compose()
    store.save(tmp_path / "ckpt")
    loaded = AdapterStore.load(tmp_path / "ckpt")
    after = loaded.compose()
    assert before.entity_matrix.tobytes() == after.entity_matrix.tobytes()
    assert before.relation_matrix.tobytes() == after.relation_matrix.tobytes()
    assert loaded.groups[0].frozen
