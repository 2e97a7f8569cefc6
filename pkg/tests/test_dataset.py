import json
import warnings

import numpy as np
import pytest

from ckge.dataset import (DatasetParseError, DatasetSpec, FractionMismatchError, StatsMismatchError,
                          TooFewTriplesError, VocabularyError, build_growing_dataset, load_snapshots,
                          snapshot_sizes, split_sizes, synthetic_growing_kg, write_dataset)
from ckge.kg import snapshot_sequence


def random_triples(n, n_ent, n_rel, seed):
    rng = np.random.default_rng(seed)
    rows = set()
    while len(rows) < n:
        h, t = rng.integers(0, n_ent, size=2)
        rows.add((int(h), int(rng.integers(0, n_rel)), int(t)))
    return np.array(sorted(rows))


def test_snapshot_sizes_small():
    assert snapshot_sizes(100, DatasetSpec()) == [60, 10, 10, 10, 10]


def test_snapshot_sizes_fb_scale():
    assert snapshot_sizes(310_116, DatasetSpec()) == [186_070, 31_012, 31_012, 31_012, 31_010]


def test_split_sizes():
    assert split_sizes(60, (3, 1, 1)) == [36, 12, 12]
    assert sum(split_sizes(61, (3, 1, 1))) == 61


def test_fraction_mismatch():
    with pytest.raises(FractionMismatchError):
        DatasetSpec(initial_fraction=0.5).validate()
    with pytest.raises(FractionMismatchError):
        DatasetSpec(split_ratio=(3, 0, 1)).validate()


def test_too_few_triples():
    with pytest.raises(TooFewTriplesError):
        build_growing_dataset(np.empty((0, 3), dtype=np.int64))
    with pytest.raises(TooFewTriplesError):
        build_growing_dataset(random_triples(3, 5, 1, 0))


@pytest.fixture(scope="module")
def built():
    tri = random_triples(2000, 150, 8, 1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        kg = build_growing_dataset(tri, DatasetSpec(seed=3), entity_names=[f"e{k}" for k in range(150)],
                                   relation_names=[f"r{k}" for k in range(8)])
    return tri, kg


def named_set(kg, triples=None):
    out = []
    for s in kg.snapshots:
        out.append({(kg.entity_names[h], kg.relation_names[r], kg.entity_names[t])
                    for h, r, t in s.triples.tolist()})
    return out


def test_snapshots_partition_the_input(built):
    tri, kg = built
    sets = named_set(kg)
    assert [len(s) for s in sets] == [1200, 200, 200, 200, 200]
    union = set().union(*sets)
    assert len(union) == sum(len(s) for s in sets)
    assert union == {(f"e{h}", f"r{r}", f"e{t}") for h, r, t in tri.tolist()}


def test_split_ratio_within_one(built):
    _, kg = built
    for s in kg.snapshots:
        want = split_sizes(len(s.triples), (3, 1, 1))
        got = [len(s.train), len(s.valid), len(s.test)]
        assert all(abs(a - b) <= 1 for a, b in zip(got, want))


def test_every_entity_has_a_training_triple(built):
    _, kg = built
    for s in kg.snapshots:
        held = np.unique(np.concatenate([s.valid, s.test])[:, [0, 2]])
        seen = np.unique(kg.train_triples_upto(s.index)[:, [0, 2]])
        assert np.isin(held, seen).all()


def test_new_ids_are_contiguous(built):
    _, kg = built
    prev = 0
    for s, d in zip(kg.snapshots, kg.deltas):
        assert list(d.new_entities) == list(range(prev, s.cumulative_entity_count))
        prev = s.cumulative_entity_count


def test_same_seed_byte_identical(tmp_path):
    tri = random_triples(500, 60, 4, 2)
    for name in ("a", "b"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            write_dataset(build_growing_dataset(tri, DatasetSpec(seed=7)), tmp_path / name)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_round_trip_and_stats(tmp_path, built):
    _, kg = built
    write_dataset(kg, tmp_path)
    loaded = load_snapshots(tmp_path)
    assert loaded.stats() == kg.stats()
    for a, b in zip(kg.snapshots, loaded.snapshots):
        np.testing.assert_array_equal(a.train, b.train)
        np.testing.assert_array_equal(a.test, b.test)


def test_stats_mismatch_detected(tmp_path, built):
    _, kg = built
    write_dataset(kg, tmp_path)
    manifest = json.loads((tmp_path / "stats.json").read_text())
    manifest["snapshots"][0]["num_triples"] += 1
    (tmp_path / "stats.json").write_text(json.dumps(manifest))
    with pytest.raises(StatsMismatchError):
        load_snapshots(tmp_path)


def test_entity_scale_snapshot_stats(tmp_path):
    rng = np.random.default_rng(0)
    n_ent, n_rel, n_tri = 2909, 233, 46_388
    rows = {(e, e % n_rel, (e + 1) % n_ent) for e in range(n_ent)}
    while len(rows) < n_tri:
        rows.add((int(rng.integers(n_ent)), int(rng.integers(n_rel)), int(rng.integers(n_ent))))
    tri = np.array(sorted(rows))
    kg = snapshot_sequence([(tri[:27_832], tri[27_832:37_110], tri[37_110:])])
    write_dataset(kg, tmp_path)
    stats = load_snapshots(tmp_path).stats()[0]
    assert (stats["num_entities"], stats["num_relations"], stats["num_triples"]) == (2909, 233, 46_388)


def test_missing_train_names_file(tmp_path):
    kg = synthetic_growing_kg(num_entities=30, num_relations=3, num_triples=100, seed=0)
    write_dataset(kg, tmp_path)
    (tmp_path / "snapshot_1" / "train.txt").unlink()
    with pytest.raises(FileNotFoundError, match="snapshot_1.train.txt"):
        load_snapshots(tmp_path)


def test_parse_error_has_line_number(tmp_path):
    kg = synthetic_growing_kg(num_entities=30, num_relations=3, num_triples=100, seed=0)
    write_dataset(kg, tmp_path)
    path = tmp_path / "snapshot_0" / "valid.txt"
    lines = path.read_text().splitlines()
    lines[2] = "only\ttwo"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetParseError, match="valid.txt:3"):
        load_snapshots(tmp_path)


def test_unknown_name_is_vocabulary_error(tmp_path):
    kg = synthetic_growing_kg(num_entities=30, num_relations=3, num_triples=100, seed=0)
    write_dataset(kg, tmp_path)
    with open(tmp_path / "snapshot_0" / "test.txt", "a") as fh:
        fh.write("nobody\t0\t0\n")
    with pytest.raises(VocabularyError, match="nobody"):
        load_snapshots(tmp_path)


def test_synthetic_kg_shape():
    kg = synthetic_growing_kg(num_entities=300, num_relations=10, num_triples=1500, seed=4)
    assert len(kg) == 3
    assert kg.num_entities <= 300 and kg.num_relations <= 10
    assert sum(len(s.triples) for s in kg.snapshots) == pytest.approx(1500, rel=0.1)
    assert all(len(d.new_entities) > 0 for d in kg.deltas)
