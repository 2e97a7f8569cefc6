"""Growing knowledge graph data model.

Triples are stored as ``(n, 3)`` int64 arrays of ``(head, relation, tail)``
ids. Entity and relation ids are dense: the entities of snapshot ``i`` are
exactly ``range(entity_count)``, and the entities introduced by snapshot ``i``
occupy ``range(previous_count, entity_count)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np


class InconsistentIdError(ValueError):
    """A triple references an id outside the declared vocabulary."""


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


def as_triple_array(triples) -> np.ndarray:
    """Coerce a sequence of triples into a read-only ``(n, 3)`` int64 array."""
    arr = np.asarray(triples, dtype=np.int64)
    if arr.size == 0:
        arr = np.empty((0, 3), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected an (n, 3) array of triples, got shape {arr.shape}")
    if arr.flags.writeable:
        arr = arr.copy()
        arr.flags.writeable = False
    return arr


def dedupe_triples(triples) -> np.ndarray:
    """Drop repeated triples, keeping the first occurrence order."""
    arr = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    if len(arr) == 0:
        return as_triple_array(arr)
    _, first = np.unique(arr, axis=0, return_index=True)
    return as_triple_array(arr[np.sort(first)])


def triple_keys(triples: np.ndarray, num_entities: int, num_relations: int) -> np.ndarray:
    """Encode triples as unique int64 keys (used for fast membership tests)."""
    t = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    return (t[:, 0] * num_relations + t[:, 1]) * num_entities + t[:, 2]


@dataclass(frozen=True)
class Snapshot:
    """One time step of a growing KG.

    ``train``/``valid``/``test`` hold the triples that arrive at this snapshot.
    Counts are cumulative over all snapshots up to and including this one.
    """

    index: int
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    cumulative_entity_count: int
    cumulative_relation_count: int

    def __post_init__(self):
        for name in ("train", "valid", "test"):
            object.__setattr__(self, name, as_triple_array(getattr(self, name)))
        for name in ("train", "valid", "test"):
            arr = getattr(self, name)
            if len(arr) == 0:
                continue
            if arr.min() < 0:
                raise InconsistentIdError(f"snapshot {self.index}: negative id in {name}")
            if max(arr[:, 0].max(), arr[:, 2].max()) >= self.cumulative_entity_count:
                raise InconsistentIdError(
                    f"snapshot {self.index}: {name} references entity id >= "
                    f"{self.cumulative_entity_count}"
                )
            if arr[:, 1].max() >= self.cumulative_relation_count:
                raise InconsistentIdError(
                    f"snapshot {self.index}: {name} references relation id >= "
                    f"{self.cumulative_relation_count}"
                )

    @property
    def triples(self) -> np.ndarray:
        return np.concatenate([self.train, self.valid, self.test])

    def stats(self) -> dict:
        return {
            "num_entities": int(self.cumulative_entity_count),
            "num_relations": int(self.cumulative_relation_count),
            "num_triples": int(len(self.train) + len(self.valid) + len(self.test)),
            "train": int(len(self.train)),
            "valid": int(len(self.valid)),
            "test": int(len(self.test)),
        }


@dataclass(frozen=True)
class SnapshotDelta:
    new_entities: tuple[int, ...]
    new_relations: tuple[int, ...]
    new_triples: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "new_triples", as_triple_array(self.new_triples))

    def is_empty(self) -> bool:
        return not self.new_entities and not self.new_relations and len(self.new_triples) == 0


def compute_delta(
    previous: Snapshot,
    current_triples,
    entity_count: int | None = None,
    relation_count: int | None = None,
) -> SnapshotDelta:
    """Entities, relations and triples of ``current_triples`` absent from ``previous``.

    Old vocabulary is ``range(previous.cumulative_entity_count)`` (likewise for
    relations). When ``entity_count``/``relation_count`` are given they bound
    the ids allowed in ``current_triples``.
    """
    cur = dedupe_triples(current_triples)
    if len(cur) and cur.min() < 0:
        raise InconsistentIdError("negative id in current triples")
    for declared, cols, what in (
        (entity_count, [0, 2], "entity"),
        (relation_count, [1], "relation"),
    ):
        if declared is None or len(cur) == 0:
            continue
        if cur[:, cols].max() >= declared:
            raise InconsistentIdError(
                f"{what} id {int(cur[:, cols].max())} beyond declared count {declared}"
            )

    old_e = previous.cumulative_entity_count
    old_r = previous.cumulative_relation_count
    ents = np.unique(cur[:, [0, 2]])
    rels = np.unique(cur[:, 1])
    new_entities = tuple(int(e) for e in ents[ents >= old_e])
    new_relations = tuple(int(r) for r in rels[rels >= old_r])

    prev = previous.triples
    if len(prev) and len(cur):
        ne = max(int(cur[:, [0, 2]].max()), int(prev[:, [0, 2]].max())) + 1
        nr = max(int(cur[:, 1].max()), int(prev[:, 1].max())) + 1
        seen = np.isin(triple_keys(cur, ne, nr), triple_keys(prev, ne, nr))
        new_triples = cur[~seen]
    else:
        new_triples = cur
    return SnapshotDelta(new_entities, new_relations, new_triples)


def neighbors_in(triples, entity: int) -> int:
    """Number of distinct other entities sharing a triple with ``entity``."""
    t = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    heads, tails = t[:, 0], t[:, 2]
    others = np.concatenate([tails[heads == entity], heads[tails == entity]])
    others = others[others != entity]
    return int(len(np.unique(others)))


@dataclass(frozen=True)
class GrowingKG:
    """A sequence of snapshots with their string vocabularies."""

    snapshots: tuple[Snapshot, ...]
    entity_names: tuple[str, ...] = ()
    relation_names: tuple[str, ...] = ()
    deltas: tuple[SnapshotDelta, ...] = field(default=(), compare=False)

    def __post_init__(self):
        snaps = tuple(self.snapshots)
        object.__setattr__(self, "snapshots", snaps)
        prev_e = prev_r = 0
        for i, s in enumerate(snaps):
            if s.index != i:
                raise ValueError(f"snapshot at position {i} has index {s.index}")
            if s.cumulative_entity_count < prev_e or s.cumulative_relation_count < prev_r:
                raise InconsistentIdError(f"snapshot {i}: cumulative counts decrease")
            prev_e, prev_r = s.cumulative_entity_count, s.cumulative_relation_count
        if not self.deltas:
            object.__setattr__(self, "deltas", tuple(self._derive_deltas()))

    def _derive_deltas(self) -> Iterable[SnapshotDelta]:
        prev_e = prev_r = 0
        for s in self.snapshots:
            triples = dedupe_triples(s.triples)
            yield SnapshotDelta(
                tuple(range(prev_e, s.cumulative_entity_count)),
                tuple(range(prev_r, s.cumulative_relation_count)),
                triples,
            )
            prev_e, prev_r = s.cumulative_entity_count, s.cumulative_relation_count

    def __len__(self) -> int:
        return len(self.snapshots)

    def __getitem__(self, i: int) -> Snapshot:
        return self.snapshots[i]

    @property
    def num_entities(self) -> int:
        return self.snapshots[-1].cumulative_entity_count if self.snapshots else 0

    @property
    def num_relations(self) -> int:
        return self.snapshots[-1].cumulative_relation_count if self.snapshots else 0

    def previous_counts(self, i: int) -> tuple[int, int]:
        if i == 0:
            return 0, 0
        s = self.snapshots[i - 1]
        return s.cumulative_entity_count, s.cumulative_relation_count

    def train_triples_upto(self, i: int) -> np.ndarray:
        return np.concatenate([s.train for s in self.snapshots[: i + 1]])

    def all_triples_upto(self, i: int) -> np.ndarray:
        return np.concatenate([s.triples for s in self.snapshots[: i + 1]])

    def stats(self) -> list[dict]:
        return [s.stats() for s in self.snapshots]


def snapshot_from_triples(index: int, train, valid=(), test=(),
                          entity_count: int | None = None,
                          relation_count: int | None = None) -> Snapshot:
    """Convenience constructor inferring cumulative counts from the ids used."""
    parts = [as_triple_array(x) for x in (train, valid, test)]
    allt = np.concatenate(parts)
    if entity_count is None:
        entity_count = int(allt[:, [0, 2]].max()) + 1 if len(allt) else 0
    if relation_count is None:
        relation_count = int(allt[:, 1].max()) + 1 if len(allt) else 0
    return Snapshot(index, *parts, cumulative_entity_count=entity_count,
                    cumulative_relation_count=relation_count)


def snapshot_sequence(splits: Sequence[tuple], names=None) -> GrowingKG:
    """Build a GrowingKG from ``[(train, valid, test), ...]`` with dense ids."""
    snaps = []
    e = r = 0
    for i, (train, valid, test) in enumerate(splits):
        allt = np.concatenate([as_triple_array(x) for x in (train, valid, test)])
        if len(allt):
            e = max(e, int(allt[:, [0, 2]].max()) + 1)
            r = max(r, int(allt[:, 1].max()) + 1)
        snaps.append(Snapshot(i, train, valid, test, e, r))
    ent_names, rel_names = names or ((), ())
    return GrowingKG(tuple(snaps), tuple(ent_names), tuple(rel_names))
