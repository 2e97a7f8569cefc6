import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ckge.kg import (InconsistentIdError, Snapshot, compute_delta, dedupe_triples, neighbors_in,
                     snapshot_from_triples, snapshot_sequence)


def test_delta_adds_new_entity():
    prev = snapshot_from_triples(0, [(0, 0, 1)])
    delta = compute_delta(prev, [(0, 0, 1), (1, 0, 2)])
    assert delta.new_entities == (2,)
    assert delta.new_relations == ()
    assert delta.new_triples.tolist() == [[1, 0, 2]]


def test_delta_identity_is_empty():
    prev = snapshot_from_triples(0, [(0, 0, 1), (1, 1, 0)])
    delta = compute_delta(prev, prev.triples)
    assert delta.is_empty()


def test_delta_rejects_ids_beyond_declared_counts():
    prev = snapshot_from_triples(0, [(0, 0, 1)])
    with pytest.raises(InconsistentIdError):
        compute_delta(prev, [(0, 0, 5)], entity_count=4)
    with pytest.raises(InconsistentIdError):
        compute_delta(prev, [(0, 3, 1)], relation_count=2)


def test_snapshot_rejects_out_of_vocabulary_ids():
    with pytest.raises(InconsistentIdError):
        Snapshot(0, [(0, 0, 3)], [], [], cumulative_entity_count=3, cumulative_relation_count=1)


def test_wn_ckge_snapshot_one_entity_growth():
    # WN-CKGE row of the dataset statistics: 24,567 -> 28,660 entities, 11 relations,
    # 9,300 current triples at snapshot 1
    rng = np.random.default_rng(0)
    old_e, new_e, n_rel = 24_567, 28_660, 11
    prev_heads = np.arange(old_e)
    prev = Snapshot(0, np.stack([prev_heads, prev_heads % n_rel, (prev_heads + 1) % old_e], 1),
                    [], [], old_e, n_rel)
    newcomers = np.arange(old_e, new_e)
    rows = [(int(e), int(rng.integers(n_rel)), int(rng.integers(old_e))) for e in newcomers]
    while len(rows) < 9_300:
        rows.append((int(rng.choice(newcomers)), int(rng.integers(n_rel)), int(rng.integers(new_e))))
    rows = dedupe_triples(rows)
    delta = compute_delta(prev, rows, entity_count=new_e, relation_count=n_rel)
    assert len(delta.new_entities) == 4_093
    assert len(delta.new_relations) == 0


@pytest.mark.parametrize("triples, entity, expected", [
    ([(0, 0, 1), (0, 0, 2)], 0, 2),
    ([(0, 0, 0)], 0, 0),
    ([(0, 0, 1), (2, 0, 0), (0, 1, 1)], 0, 2),
    ([(1, 0, 2)], 0, 0),
])
def test_neighbors_in(triples, entity, expected):
    assert neighbors_in(triples, entity) == expected


triple_lists = st.lists(
    st.tuples(st.integers(0, 12), st.integers(0, 3), st.integers(0, 12)), min_size=1, max_size=40
)


@settings(max_examples=100, deadline=None)
@given(triple_lists, triple_lists)
def test_delta_counts_and_idempotence(old, extra):
    old_arr = np.asarray(old)
    prev = snapshot_from_triples(0, old_arr)
    # shift extra entity ids so some are new
    extra_arr = np.asarray(extra) + np.array([prev.cumulative_entity_count // 2, 0, 3])
    current = np.concatenate([old_arr, extra_arr])
    n_e = int(current[:, [0, 2]].max()) + 1
    delta = compute_delta(prev, current)
    # every new id is beyond the old vocabulary and every id past it is reported
    used = set(current[:, [0, 2]].ravel().tolist())
    assert set(delta.new_entities) == {e for e in used if e >= prev.cumulative_entity_count}
    assert list(delta.new_entities) == sorted(delta.new_entities)
    again = compute_delta(prev, np.concatenate([prev.triples, delta.new_triples]))
    assert again.new_entities == delta.new_entities
    assert again.new_relations == delta.new_relations
    assert sorted(map(tuple, again.new_triples.tolist())) == sorted(map(tuple, delta.new_triples.tolist()))
    assert n_e >= prev.cumulative_entity_count


@settings(max_examples=100, deadline=None)
@given(triple_lists, st.integers(0, 12))
def test_neighbor_count_bounded_by_distinct_entities(triples, e):
    distinct = len(set(x for h, _, t in triples for x in (h, t)))
    assert neighbors_in(triples, e) <= max(distinct - 1, 0)


def test_growing_kg_count_identity():
    kg = snapshot_sequence([
        ([(0, 0, 1), (1, 0, 2)], [], []),
        ([(2, 1, 3), (3, 0, 4)], [], []),
        ([(4, 0, 5)], [(5, 1, 0)], []),
    ])
    for i in range(1, len(kg)):
        prev_e, prev_r = kg.previous_counts(i)
        assert prev_e + len(kg.deltas[i].new_entities) == kg[i].cumulative_entity_count
        assert prev_r + len(kg.deltas[i].new_relations) == kg[i].cumulative_relation_count


def test_dedupe_keeps_first_order():
    assert dedupe_triples([(1, 0, 2), (0, 0, 1), (1, 0, 2)]).tolist() == [[1, 0, 2], [0, 0, 1]]
