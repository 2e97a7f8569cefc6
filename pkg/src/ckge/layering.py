"""Ordering and layering of a snapshot's new entities.

New entities are ranked by hop distance from the old graph (BFS over the
undirected graph of the new triples, seeded from every old entity those
triples touch), then by degree centrality inside the new graph. The ranked
sequence is cut into ``N`` contiguous, near-equal layers.
"""
from __future__ import annotations

import json
from collections import defaultdict, deque
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

UNREACHABLE = -1


def _adjacency(triples) -> dict[int, set[int]]:
    adj: dict[int, set[int]] = defaultdict(set)
    for h, _, t in np.asarray(triples, dtype=np.int64).reshape(-1, 3).tolist():
        if h != t:
            adj[h].add(t)
            adj[t].add(h)
    return adj


def degree_centrality(delta_triples, entity: int, delta_entity_count: int) -> float:
    """Neighbor count of ``entity`` in the new graph over ``|new entities| - 1``."""
    if delta_entity_count <= 1:
        return 0.0
    return len(_adjacency(delta_triples).get(entity, ())) / (delta_entity_count - 1)


def degree_centralities(delta_triples, entities: Sequence[int]) -> dict[int, float]:
    adj = _adjacency(delta_triples)
    n = len(entities)
    if n <= 1:
        return {int(e): 0.0 for e in entities}
    return {int(e): len(adj.get(int(e), ())) / (n - 1) for e in entities}


def _sort_key(e: int, distances: Mapping[int, int], dc: Mapping[int, float]):
    d = distances[e]
    return (d == UNREACHABLE, d, -dc[e], e)


def sort_new_entities(delta_triples, new_entities: Sequence[int], old_entity_count: int,
                      dc: Mapping[int, float] | None = None):
    """Rank new entities by (distance, -centrality, id).

    Returns ``(order, distances, dc)``. Entities with no path to an old entity
    get ``UNREACHABLE`` and come last.
    """
    new_entities = [int(e) for e in new_entities]
    if dc is None:
        dc = degree_centralities(delta_triples, new_entities)
    adj = _adjacency(delta_triples)
    is_new = set(new_entities)

    dist: dict[int, int] = {}
    queue = deque()
    for node in sorted(adj):
        if node < old_entity_count:
            dist[node] = 0
            queue.append(node)
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)

    distances = {e: dist.get(e, UNREACHABLE) for e in new_entities}
    for e in is_new:
        if distances[e] == 0:  # an id below old_entity_count passed as new
            raise ValueError(f"entity {e} is not new (id < {old_entity_count})")
    order = sorted(new_entities, key=lambda e: _sort_key(e, distances, dc))
    return order, distances, dict(dc)


@dataclass(frozen=True)
class LayerPlan:
    entity_layers: tuple[tuple[int, ...], ...]
    relation_layer: tuple[int, ...]
    per_layer_dc_sum: tuple[float, ...]
    distances: Mapping[int, int]
    dc: Mapping[int, float]

    @property
    def num_layers(self) -> int:
        return len(self.entity_layers)

    @property
    def layer_sizes(self) -> list[int]:
        return [len(layer) for layer in self.entity_layers]

    @property
    def entity_order(self) -> list[int]:
        return [e for layer in self.entity_layers for e in layer]

    def is_empty(self) -> bool:
        return not any(self.entity_layers) and not self.relation_layer

    def to_dict(self) -> dict:
        return {
            "layers": [
                {
                    "entities": list(layer),
                    "distances": [
                        "unreachable" if self.distances[e] == UNREACHABLE else self.distances[e]
                        for e in layer
                    ],
                    "dc_sum": s,
                }
                for layer, s in zip(self.entity_layers, self.per_layer_dc_sum)
            ],
            "relations": list(self.relation_layer),
        }

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def build_layer_plan(sorted_entities: Sequence[int], dc_values: Mapping[int, float],
                     new_relations, num_layers: int,
                     distances: Mapping[int, int] | None = None) -> LayerPlan:
    """Cut the ranked sequence into ``num_layers`` contiguous slices.

    The first ``len % num_layers`` layers get one extra entity.
    """
    if num_layers < 1:
        raise ValueError("num_layers must be >= 1")
    ents = [int(e) for e in sorted_entities]
    rels = tuple(sorted(int(r) for r in new_relations))
    distances = dict(distances or {})
    if not ents:
        return LayerPlan((), rels, (), distances, dict(dc_values))
    if num_layers > len(ents):
        raise ValueError(f"{num_layers} layers requested for {len(ents)} entities")

    base, extra = divmod(len(ents), num_layers)
    layers, sums, start = [], [], 0
    for k in range(num_layers):
        size = base + (1 if k < extra else 0)
        layer = tuple(ents[start:start + size])
        start += size
        layers.append(layer)
        sums.append(float(sum(dc_values[e] for e in layer)))
    return LayerPlan(tuple(layers), rels, tuple(sums), distances, dict(dc_values))


def plan_snapshot(delta_triples, new_entities, new_relations, old_entity_count: int,
                  num_layers: int) -> LayerPlan:
    """Sort and layer one snapshot's new entities; ``num_layers`` is capped at the entity count."""
    order, distances, dc = sort_new_entities(delta_triples, new_entities, old_entity_count)
    n = min(num_layers, len(order)) if order else num_layers
    return build_layer_plan(order, dc, new_relations, n, distances)
