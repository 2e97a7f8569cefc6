"""Incremental low-rank adapter store.

Each snapshot after the first gets a group of factor pairs ``(A, B)``. The
product ``A @ B`` of a factor *is* the embedding block of the entities in
one layer (it is not an additive update on existing rows). The full entity
matrix is the origin matrix followed by every group's blocks.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .layering import LayerPlan


class OffsetGapError(ValueError):
    """Groups do not tile the id space contiguously after the origin rows."""


def max_rank(n: int, d: int) -> int:
    """Largest rank whose factor pair has strictly fewer parameters than ``n x d``.

    Returns 0 when no rank >= 1 qualifies (only for ``n == 1`` or ``d == 1``).
    """
    if n <= 0 or d <= 0:
        return 0
    return max(0, -(-n * d // (n + d)) - 1)


def raw_ranks(dc_sums: Sequence[float], r_base: float) -> np.ndarray:
    """Unrounded ranks ``r_base * Sum_k / Avg_dc``; uniform when every sum is zero."""
    sums = np.asarray(dc_sums, dtype=np.float64)
    total = sums.sum()
    if len(sums) == 0:
        return sums
    if total <= 0.0:
        return np.full(len(sums), float(r_base))
    avg = total / len(sums)
    return r_base * sums / avg


def round_half_up(x) -> np.ndarray:
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


def allocate_ranks(plan: LayerPlan | Sequence[float], r_base: int, d: int,
                   layer_sizes: Sequence[int] | None = None) -> list[int]:
    """Per-layer ranks scaled by each layer's share of degree centrality.

    Rounded half-up, then clamped to ``[1, max_rank(n_k, d)]``. A layer where
    ``max_rank`` is 0 keeps rank 1 here and becomes a dense row in
    :func:`create_group`.
    """
    if r_base < 1:
        raise ValueError("r_base must be >= 1")
    if isinstance(plan, LayerPlan):
        sums, sizes = plan.per_layer_dc_sum, plan.layer_sizes
    else:
        sums, sizes = plan, layer_sizes
    ranks = round_half_up(raw_ranks(sums, r_base))
    out = []
    for k, r in enumerate(ranks.tolist()):
        hi = max_rank(sizes[k], d) if sizes is not None else r
        out.append(int(min(max(r, 1), max(hi, 1))))
    return out


@dataclass
class LoRAFactor:
    a: np.ndarray
    b: np.ndarray
    row_offset: int
    ids: tuple[int, ...]
    trainable: bool = True
    dense_fallback: bool = False

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def d(self) -> int:
        return self.b.shape[1]

    def compose(self) -> np.ndarray:
        if self.dense_fallback:
            return self.b.copy()
        return self.a @ self.b

    def rows(self, local: np.ndarray) -> np.ndarray:
        if self.dense_fallback:
            return self.b[local]
        return self.a[local] @ self.b

    def parameter_count(self) -> int:
        if self.dense_fallback:
            return self.n * self.d
        return self.n * self.rank + self.rank * self.d

    def arrays(self) -> list[np.ndarray]:
        """The arrays that training updates."""
        return [self.b] if self.dense_fallback else [self.a, self.b]


@dataclass
class LoRAGroup:
    snapshot_index: int
    entity_factors: list[LoRAFactor] = field(default_factory=list)
    relation_factor: LoRAFactor | None = None

    @property
    def factors(self) -> list[LoRAFactor]:
        fs = list(self.entity_factors)
        if self.relation_factor is not None:
            fs.append(self.relation_factor)
        return fs

    @property
    def num_entities(self) -> int:
        return sum(f.n for f in self.entity_factors)

    @property
    def num_relations(self) -> int:
        return 0 if self.relation_factor is None else self.relation_factor.n

    @property
    def entity_ids(self) -> list[int]:
        return [e for f in self.entity_factors for e in f.ids]

    def parameter_count(self) -> int:
        return sum(f.parameter_count() for f in self.factors)

    def freeze(self) -> None:
        for f in self.factors:
            f.trainable = False
            for arr in (f.a, f.b):
                arr.flags.writeable = False

    @property
    def frozen(self) -> bool:
        return all(not f.trainable for f in self.factors)


def _new_factor(rng: np.random.Generator, ids: Sequence[int], row_offset: int,
                rank: int, d: int) -> LoRAFactor:
    n = len(ids)
    if max_rank(n, d) < 1:
        # no rank saves parameters here; keep the rows dense
        b = rng.uniform(-1.0, 1.0, size=(n, d)) / math.sqrt(d)
        return LoRAFactor(np.eye(n), b, row_offset, tuple(ids), dense_fallback=True)
    a = rng.uniform(-1.0, 1.0, size=(n, rank)) / math.sqrt(rank)
    b = rng.uniform(-1.0, 1.0, size=(rank, d)) / math.sqrt(d)
    return LoRAFactor(a, b, row_offset, tuple(int(x) for x in ids))


def create_group(plan: LayerPlan, ranks: Sequence[int], d: int, relation_rank: int,
                 seed, snapshot_index: int = 0, entity_offset: int | None = None,
                 relation_offset: int | None = None) -> LoRAGroup:
    """Fresh trainable adapters for one snapshot's layer plan.

    ``row_offset`` of each entity factor is its first position in the
    concatenated group (``entity_offset`` + rows of the earlier layers).
    """
    layers = [layer for layer in plan.entity_layers]
    if len(ranks) != len(layers):
        raise ValueError(f"{len(ranks)} ranks for {len(layers)} layers")
    if d < 1 or relation_rank < 1:
        raise ValueError("dimensions must be positive")
    rng = np.random.default_rng(seed)
    if entity_offset is None:
        entity_offset = min((min(layer) for layer in layers if layer), default=0)
    group = LoRAGroup(snapshot_index)
    pos = entity_offset
    for layer, r in zip(layers, ranks):
        if not layer:
            continue
        group.entity_factors.append(_new_factor(rng, layer, pos, int(r), d))
        pos += len(layer)
    if plan.relation_layer:
        rels = plan.relation_layer
        if relation_offset is None:
            relation_offset = rels[0]
        r = min(relation_rank, max(max_rank(len(rels), d), 1))
        group.relation_factor = _new_factor(rng, rels, relation_offset, r, d)
    return group


@dataclass(frozen=True)
class EmbeddingView:
    entity_matrix: np.ndarray
    relation_matrix: np.ndarray

    def __post_init__(self):
        for name in ("entity_matrix", "relation_matrix"):
            arr = getattr(self, name)
            if arr.flags.writeable:
                arr = arr.copy()
                arr.flags.writeable = False
                object.__setattr__(self, name, arr)

    @property
    def num_entities(self) -> int:
        return self.entity_matrix.shape[0]

    @property
    def num_relations(self) -> int:
        return self.relation_matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.entity_matrix.shape[1]


def _place_blocks(origin: np.ndarray, blocks: list[tuple[int, list[LoRAFactor]]]) -> np.ndarray:
    n_total = origin.shape[0] + sum(sum(f.n for f in fs) for _, fs in blocks)
    out = np.empty((n_total, origin.shape[1]), dtype=origin.dtype)
    out[: origin.shape[0]] = origin
    expected = origin.shape[0]
    for snap, factors in blocks:
        if not factors:
            continue
        ids = np.array([e for f in factors for e in f.ids], dtype=np.int64)
        lo = factors[0].row_offset
        if lo != expected or np.any(np.sort(ids) != np.arange(lo, lo + len(ids))):
            raise OffsetGapError(
                f"group {snap} covers ids starting at {lo}; expected a contiguous "
                f"block starting at {expected}"
            )
        out[ids] = np.concatenate([f.compose() for f in factors])
        expected += len(ids)
    return out


def compose(origin_entities: np.ndarray, origin_relations: np.ndarray,
            groups: Sequence[LoRAGroup]) -> EmbeddingView:
    """Origin rows followed by each group's composed blocks, indexed by global id."""
    ordered = sorted(groups, key=lambda g: g.snapshot_index)
    ent = _place_blocks(np.asarray(origin_entities),
                        [(g.snapshot_index, g.entity_factors) for g in ordered])
    rel = _place_blocks(
        np.asarray(origin_relations),
        [(g.snapshot_index, [g.relation_factor] if g.relation_factor else []) for g in ordered],
    )
    return EmbeddingView(ent, rel)


def trainable_parameter_count(groups: Sequence[LoRAGroup], snapshot_index: int | None = None) -> int:
    """Parameters in trainable factors (optionally only the given snapshot's group)."""
    return sum(
        f.parameter_count()
        for g in groups
        if snapshot_index is None or g.snapshot_index == snapshot_index
        for f in g.factors
        if f.trainable
    )


def freeze_group(group: LoRAGroup) -> None:
    group.freeze()


@dataclass
class AdapterStore:
    """Origin matrices plus the ordered adapter groups of later snapshots."""

    origin_entities: np.ndarray
    origin_relations: np.ndarray
    groups: list[LoRAGroup] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.origin_entities.shape[1]

    def compose(self, upto: int | None = None) -> EmbeddingView:
        groups = [g for g in self.groups if upto is None or g.snapshot_index <= upto]
        return compose(self.origin_entities, self.origin_relations, groups)

    def freeze_origin(self) -> None:
        self.origin_entities.flags.writeable = False
        self.origin_relations.flags.writeable = False

    def save(self, root) -> None:
        """One directory per snapshot: ``.npy`` arrays plus ``manifest.json``."""
        root = Path(root)
        _save_dense(root / "snapshot_0", self.origin_entities, self.origin_relations)
        for g in self.groups:
            save_group(g, root / f"snapshot_{g.snapshot_index}")

    @classmethod
    def load(cls, root, upto: int | None = None) -> "AdapterStore":
        root = Path(root)
        manifest = json.loads((root / "snapshot_0" / "manifest.json").read_text())
        ent = np.load(root / "snapshot_0" / manifest["entities"])
        rel = np.load(root / "snapshot_0" / manifest["relations"])
        store = cls(ent, rel)
        i = 1
        while (root / f"snapshot_{i}").is_dir() and (upto is None or i <= upto):
            store.groups.append(load_group(root / f"snapshot_{i}"))
            i += 1
        return store


def _save_dense(path: Path, ent: np.ndarray, rel: np.ndarray) -> None:
    path.mkdir(parents=True, exist_ok=True)
    np.save(path / "entities.npy", ent)
    np.save(path / "relations.npy", rel)
    manifest = {"kind": "dense", "entities": "entities.npy", "relations": "relations.npy",
                "entity_shape": list(ent.shape), "relation_shape": list(rel.shape)}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))


def save_group(group: LoRAGroup, path, seed=None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for j, f in enumerate(group.factors):
        role = "relation" if f is group.relation_factor else "entity"
        stem = f"{role}_{j}"
        np.save(path / f"{stem}_a.npy", f.a)
        np.save(path / f"{stem}_b.npy", f.b)
        entries.append({
            "role": role, "a": f"{stem}_a.npy", "b": f"{stem}_b.npy",
            "shape": [f.n, f.d], "rank": f.rank, "row_offset": f.row_offset,
            "ids": list(f.ids), "trainable": f.trainable,
            "dense_fallback": f.dense_fallback,
        })
    manifest = {"kind": "lora_group", "snapshot_index": group.snapshot_index,
                "seed": seed, "factors": entries}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_group(path) -> LoRAGroup:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    group = LoRAGroup(manifest["snapshot_index"])
    for e in manifest["factors"]:
        f = LoRAFactor(np.load(path / e["a"]), np.load(path / e["b"]), e["row_offset"],
                       tuple(e["ids"]), e["trainable"], e["dense_fallback"])
        if e["role"] == "relation":
            group.relation_factor = f
        else:
            group.entity_factors.append(f)
    if group.factors and not any(f.trainable for f in group.factors):
        group.freeze()
    return group
