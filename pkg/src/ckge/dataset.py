"""Snapshot datasets: on-disk layout, benchmark splitter, synthetic generator.

Directory layout::

    ROOT/entities.txt            one entity name per line, in id order
    ROOT/relations.txt           one relation name per line, in id order
    ROOT/snapshot_<i>/train.txt  head<TAB>relation<TAB>tail
    ROOT/snapshot_<i>/valid.txt
    ROOT/snapshot_<i>/test.txt
    ROOT/stats.json              optional per-snapshot counts, checked on load
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .kg import GrowingKG, Snapshot, as_triple_array, dedupe_triples

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")


class DatasetError(ValueError):
    pass


class FractionMismatchError(DatasetError):
    pass


class TooFewTriplesError(DatasetError):
    pass


class DatasetParseError(DatasetError):
    pass


class VocabularyError(DatasetError):
    pass


class StatsMismatchError(DatasetError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    num_snapshots: int = 5
    initial_fraction: float = 0.6
    increment_fraction: float = 0.1
    split_ratio: tuple[int, int, int] = (3, 1, 1)
    seed: int = 0
    max_reshuffles: int = 10

    def validate(self) -> None:
        if self.num_snapshots < 1:
            raise FractionMismatchError("num_snapshots must be >= 1")
        total = self.initial_fraction + (self.num_snapshots - 1) * self.increment_fraction
        if abs(total - 1.0) > 1e-9:
            raise FractionMismatchError(
                f"initial {self.initial_fraction} + {self.num_snapshots - 1} x "
                f"{self.increment_fraction} = {total}, not 1"
            )
        if len(self.split_ratio) != 3 or any(p <= 0 for p in self.split_ratio):
            raise FractionMismatchError(f"split ratio must be three positive parts: {self.split_ratio}")

    def fractions(self) -> list[float]:
        return [self.initial_fraction] + [self.increment_fraction] * (self.num_snapshots - 1)


def snapshot_sizes(total: int, spec: DatasetSpec) -> list[int]:
    """Round each fraction half-up; the last snapshot takes the remainder."""
    fr = spec.fractions()
    sizes = [int(math.floor(f * total + 0.5)) for f in fr[:-1]]
    sizes.append(total - sum(sizes))
    return sizes


def split_sizes(m: int, ratio: Sequence[int]) -> list[int]:
    """Largest-remainder apportionment of ``m`` items by ``ratio``."""
    total = sum(ratio)
    exact = [m * p / total for p in ratio]
    sizes = [int(math.floor(x)) for x in exact]
    order = sorted(range(len(ratio)), key=lambda k: (-(exact[k] - sizes[k]), k))
    for k in order[: m - sum(sizes)]:
        sizes[k] += 1
    return sizes


def _weakly_connected(triples: np.ndarray) -> bool:
    ents = np.unique(triples[:, [0, 2]])
    parent = {int(e): int(e) for e in ents}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    comps = len(parent)
    for h, _, t in triples.tolist():
        a, b = find(h), find(t)
        if a != b:
            parent[a] = b
            comps -= 1
    return comps <= 1


def _fix_orphans(train: list, held: dict[str, list], covered_e: set, covered_r: set) -> None:
    """Give every entity/relation of valid/test at least one train triple, keeping sizes.

    A held-out triple holding an uncovered id swaps places with a train triple
    whose ids stay covered without it; if no such train triple exists the
    held-out triple simply moves to train.
    """
    def counts(rows):
        ce, cr = {}, {}
        for h, r, t in rows:
            ce[h] = ce.get(h, 0) + 1
            if t != h:
                ce[t] = ce.get(t, 0) + 1
            cr[r] = cr.get(r, 0) + 1
        return ce, cr

    ce, cr = counts(train)

    def removable(tr):
        h, r, t = tr
        ok_e = all(x in covered_e or ce.get(x, 0) >= 2 for x in {h, t})
        return ok_e and (r in covered_r or cr.get(r, 0) >= 2)

    def add(tr, sign):
        h, r, t = tr
        for x in {h, t}:
            ce[x] = ce.get(x, 0) + sign
        cr[r] = cr.get(r, 0) + sign

    for name in ("valid", "test"):
        rows = held[name]
        k = 0
        while k < len(rows):
            h, r, t = rows[k]
            missing = [x for x in {h, t} if x not in covered_e and ce.get(x, 0) == 0]
            if not missing and (r in covered_r or cr.get(r, 0) > 0):
                k += 1
                continue
            tr = rows.pop(k)
            add(tr, +1)
            swap = next((j for j in range(len(train)) if removable(train[j])), None)
            train.append(tr)
            if swap is not None:
                out = train.pop(swap)
                add(out, -1)
                rows.insert(k, out)
                k += 1


def _relabel(parts: list[list[np.ndarray]]):
    """Dense ids in first-appearance order, snapshot by snapshot (train, valid, test)."""
    ent_map: dict[int, int] = {}
    rel_map: dict[int, int] = {}
    out, counts = [], []
    for splits in parts:
        new_splits = []
        for arr in splits:
            rows = []
            for h, r, t in arr.tolist():
                for x in (h, t):
                    if x not in ent_map:
                        ent_map[x] = len(ent_map)
                if r not in rel_map:
                    rel_map[r] = len(rel_map)
                rows.append((ent_map[h], rel_map[r], ent_map[t]))
            new_splits.append(as_triple_array(rows))
        out.append(new_splits)
        counts.append((len(ent_map), len(rel_map)))
    return out, counts, ent_map, rel_map


def _split_and_relabel(snapshot_triples: list[np.ndarray], ratio, rng, entity_names=None,
                       relation_names=None) -> GrowingKG:
    parts = []
    covered_e: set = set()
    covered_r: set = set()
    for i, tri in enumerate(snapshot_triples):
        sizes = split_sizes(len(tri), ratio)
        if min(sizes) == 0:
            raise TooFewTriplesError(f"snapshot {i} has {len(tri)} triples; split {sizes} has an empty part")
        perm = rng.permutation(len(tri))
        rows = [tuple(x) for x in tri[perm].tolist()]
        train = rows[: sizes[0]]
        held = {"valid": rows[sizes[0]: sizes[0] + sizes[1]], "test": rows[sizes[0] + sizes[1]:]}
        _fix_orphans(train, held, covered_e, covered_r)
        for h, r, t in train:
            covered_e.update((h, t))
            covered_r.add(r)
        parts.append([as_triple_array(train), as_triple_array(held["valid"]),
                      as_triple_array(held["test"])])

    relabeled, counts, ent_map, rel_map = _relabel(parts)
    snaps = [Snapshot(i, *splits, cumulative_entity_count=ne, cumulative_relation_count=nr)
             for i, (splits, (ne, nr)) in enumerate(zip(relabeled, counts))]
    inv_e = sorted(ent_map, key=ent_map.get)
    inv_r = sorted(rel_map, key=rel_map.get)
    ent_names = tuple(entity_names[e] if entity_names is not None else str(e) for e in inv_e)
    rel_names = tuple(relation_names[r] if relation_names is not None else str(r) for r in inv_r)
    return GrowingKG(tuple(snaps), ent_names, rel_names)


def build_growing_dataset(triples, spec: DatasetSpec = DatasetSpec(), entity_names=None,
                          relation_names=None) -> GrowingKG:
    """Split a static triple set into a growing KG.

    Snapshot 0 takes ``initial_fraction`` of the triples and each later
    snapshot ``increment_fraction``; every snapshot is split by
    ``split_ratio``. Ids are relabelled densely in order of first appearance.
    ``entity_names``/``relation_names`` map the input ids to names.
    """
    spec.validate()
    tri = dedupe_triples(triples)
    if len(tri) == 0:
        raise TooFewTriplesError("no triples")
    sizes = snapshot_sizes(len(tri), spec)
    if min(sizes) <= 0:
        raise TooFewTriplesError(f"snapshot sizes {sizes} include an empty snapshot")

    rng = np.random.default_rng(spec.seed)
    chosen = None
    for attempt in range(max(1, spec.max_reshuffles)):
        perm = rng.permutation(len(tri))
        if chosen is None:
            chosen = perm
        if _weakly_connected(tri[perm[: sizes[0]]]):
            chosen = perm
            break
    else:
        warnings.warn(
            f"snapshot 0 is not weakly connected after {spec.max_reshuffles} reshuffles",
            stacklevel=2,
        )
    bounds = np.cumsum([0] + sizes)
    per_snapshot = [tri[chosen[bounds[k]: bounds[k + 1]]] for k in range(len(sizes))]
    return _split_and_relabel(per_snapshot, spec.split_ratio, rng, entity_names, relation_names)


# --------------------------------------------------------------------------- synthetic data

def synthetic_growing_kg(num_entities: int = 300, num_relations: int = 10,
                         num_triples: int = 1500,
                         entity_fractions: Sequence[float] = (0.6, 0.2, 0.2),
                         relations_per_snapshot: Sequence[int] | None = None,
                         latent_dim: int = 8, top_k: int = 1, split_ratio=(3, 1, 1),
                         seed: int = 0) -> GrowingKG:
    """A growing KG whose triples follow a hidden translation model.

    Entity ``e`` has a latent point ``x_e`` and relation ``r`` a translation
    ``v_r``; a triple ``(h, r, t)`` picks ``t`` among the ``top_k`` entities
    nearest to ``x_h + v_r``. Every triple of snapshot ``i > 0`` touches at
    least one entity born at ``i``, so later snapshots add genuinely new
    entities, as in entity-growth CKGE benchmarks.
    """
    rng = np.random.default_rng(seed)
    fr = np.asarray(entity_fractions, dtype=np.float64)
    fr = fr / fr.sum()
    n_snap = len(fr)
    ent_counts = np.diff(np.floor(np.concatenate([[0], np.cumsum(fr)]) * num_entities + 0.5)).astype(int)
    ent_counts[-1] = num_entities - ent_counts[:-1].sum()
    if relations_per_snapshot is None:
        relations_per_snapshot = [num_relations] + [0] * (n_snap - 1)
    rel_counts = list(relations_per_snapshot)
    if sum(rel_counts) != num_relations or len(rel_counts) != n_snap:
        raise ValueError("relations_per_snapshot must sum to num_relations, one entry per snapshot")
    tri_counts = np.diff(np.floor(np.concatenate([[0], np.cumsum(fr)]) * num_triples + 0.5)).astype(int)

    x = rng.normal(size=(num_entities, latent_dim))
    v = rng.normal(scale=4.0, size=(num_relations, latent_dim))
    e_hi = np.cumsum(ent_counts)
    r_hi = np.cumsum(rel_counts)

    snapshots = []
    seen: set = set()
    for i in range(n_snap):
        e_lo = 0 if i == 0 else e_hi[i - 1]
        r_lo = 0 if i == 0 else r_hi[i - 1]
        pool_e = np.arange(e_hi[i])
        pool_r = np.arange(r_hi[i])
        new_e = np.arange(e_lo, e_hi[i])
        new_r = np.arange(r_lo, r_hi[i])
        rows = []
        attempts = 0
        cycle = 0
        while len(rows) < tri_counts[i] and attempts < 50 * tri_counts[i]:
            attempts += 1
            if i > 0 and cycle < len(new_e):
                anchor = new_e[cycle]
            elif i > 0:
                anchor = rng.choice(new_e)
            else:
                anchor = rng.choice(pool_e)
            if len(new_r) and (cycle < len(new_r) or rng.random() < len(new_r) / len(pool_r)):
                r = int(new_r[cycle % len(new_r)] if cycle < len(new_r) else rng.choice(new_r))
            else:
                r = int(rng.choice(pool_r))
            anchor_as_head = i == 0 or rng.random() < 0.5
            if anchor_as_head:
                target = x[anchor] + v[r]
            else:
                target = x[anchor] - v[r]
            dist = np.linalg.norm(x[pool_e] - target, axis=1)
            dist[anchor] = np.inf
            other = int(pool_e[rng.choice(np.argsort(dist)[:top_k])])
            h, t = (int(anchor), other) if anchor_as_head else (other, int(anchor))
            if (h, r, t) in seen:
                continue
            seen.add((h, r, t))
            rows.append((h, r, t))
            cycle += 1
        snapshots.append(as_triple_array(rows))
    return _split_and_relabel(snapshots, split_ratio, rng)


# --------------------------------------------------------------------------- disk I/O

def _write_lines(path: Path, lines) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


def write_dataset(kg: GrowingKG, root) -> None:
    """Write ``kg`` in the snapshot directory layout, including ``stats.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    ents = kg.entity_names or tuple(str(e) for e in range(kg.num_entities))
    rels = kg.relation_names or tuple(str(r) for r in range(kg.num_relations))
    _write_lines(root / "entities.txt", ents)
    _write_lines(root / "relations.txt", rels)
    for s in kg.snapshots:
        d = root / f"snapshot_{s.index}"
        d.mkdir(exist_ok=True)
        for name in SPLITS:
            _write_lines(d / f"{name}.txt",
                         (f"{ents[h]}\t{rels[r]}\t{ents[t]}" for h, r, t in getattr(s, name).tolist()))
    (root / "stats.json").write_text(json.dumps({"snapshots": kg.stats()}, indent=2) + "\n")


def read_vocabulary(path: Path) -> dict[str, int]:
    if not path.exists():
        raise FileNotFoundError(f"missing vocabulary file {path}")
    names: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            name = line.rstrip("\n")
            if name in names:
                raise VocabularyError(f"{path}:{lineno}: duplicate name {name!r}")
            names[name] = len(names)
    return names


def read_triples(path: Path, entities: dict[str, int], relations: dict[str, int]) -> np.ndarray:
    if not path.exists():
        raise FileNotFoundError(f"missing triple file {path}")
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise DatasetParseError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
            h, r, t = fields
            try:
                rows.append((entities[h], relations[r], entities[t]))
            except KeyError as exc:
                raise VocabularyError(f"{path}:{lineno}: name {exc.args[0]!r} not in vocabulary") from None
    return np.asarray(rows, dtype=np.int64).reshape(-1, 3)


def load_snapshots(root) -> GrowingKG:
    """Read a snapshot directory; validates ``stats.json`` when present."""
    root = Path(root)
    entities = read_vocabulary(root / "entities.txt")
    relations = read_vocabulary(root / "relations.txt")
    snaps = []
    seen_e = seen_r = 0
    i = 0
    while (root / f"snapshot_{i}").is_dir():
        d = root / f"snapshot_{i}"
        splits = [read_triples(d / f"{name}.txt", entities, relations) for name in SPLITS]
        # duplicates within a snapshot keep their first split (train > valid > test)
        kept, seen = [], set()
        for arr in splits:
            rows = []
            for row in arr.tolist():
                key = tuple(row)
                if key not in seen:
                    seen.add(key)
                    rows.append(row)
            kept.append(as_triple_array(rows))
        allt = np.concatenate(kept)
        e_ids = np.unique(allt[:, [0, 2]]) if len(allt) else np.empty(0, np.int64)
        r_ids = np.unique(allt[:, 1]) if len(allt) else np.empty(0, np.int64)
        ne = max(seen_e, int(e_ids.max()) + 1 if len(e_ids) else 0)
        nr = max(seen_r, int(r_ids.max()) + 1 if len(r_ids) else 0)
        for ids, lo, hi, what in ((e_ids, seen_e, ne, "entity"), (r_ids, seen_r, nr, "relation")):
            new = ids[ids >= lo]
            if len(new) != hi - lo:
                raise VocabularyError(
                    f"snapshot {i}: new {what} ids do not fill [{lo}, {hi}); the vocabulary "
                    f"file must list names in order of first appearance across snapshots"
                )
        snaps.append(Snapshot(i, *kept, cumulative_entity_count=ne, cumulative_relation_count=nr))
        seen_e, seen_r = ne, nr
        i += 1
    if not snaps:
        raise DatasetError(f"no snapshot_0 directory under {root}")
    ent_names = tuple(sorted(entities, key=entities.get))[:seen_e]
    rel_names = tuple(sorted(relations, key=relations.get))[:seen_r]
    kg = GrowingKG(tuple(snaps), ent_names, rel_names)

    manifest = root / "stats.json"
    if manifest.exists():
        validate_stats(kg, json.loads(manifest.read_text()))
    return kg


def validate_stats(kg: GrowingKG, manifest: dict) -> None:
    expected = manifest.get("snapshots", manifest)
    if len(expected) != len(kg):
        raise StatsMismatchError(f"stats.json lists {len(expected)} snapshots, found {len(kg)}")
    for i, (want, s) in enumerate(zip(expected, kg.snapshots)):
        got = s.stats()
        for key, value in want.items():
            if key in got and got[key] != value:
                raise StatsMismatchError(f"snapshot {i}: {key} is {got[key]}, stats.json says {value}")


def read_named_triples(path) -> tuple[np.ndarray, list[str], list[str]]:
    """Read a flat ``head<TAB>relation<TAB>tail`` file, numbering names as they appear."""
    path = Path(path)
    ents: dict[str, int] = {}
    rels: dict[str, int] = {}
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise DatasetParseError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
            h, r, t = fields
            for name in (h, t):
                ents.setdefault(name, len(ents))
            rels.setdefault(r, len(rels))
            rows.append((ents[h], rels[r], ents[t]))
    return (np.asarray(rows, dtype=np.int64).reshape(-1, 3),
            sorted(ents, key=ents.get), sorted(rels, key=rels.get))
