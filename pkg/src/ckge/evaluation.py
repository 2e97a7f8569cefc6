"""Link-prediction ranking metrics over a composed embedding view."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from .adapters import EmbeddingView
from .kg import GrowingKG
from .scoring import get_scorer, score_against_all_heads, score_against_all_tails

RAW, FILTERED = "raw", "filtered"
CUMULATIVE, SNAPSHOT = "cumulative", "snapshot"
HITS_AT = (1, 3, 10)


class UnknownIdError(ValueError):
    pass


def mean_tie_rank(num_better, num_equal):
    """Rank under the mean-tie convention; ``num_equal`` includes the truth.

    ``better + (equal + 1) / 2``, rounded up when it lands on .5.
    """
    return np.asarray(num_better) + (np.asarray(num_equal) + 2) // 2


def rank_of(scores: np.ndarray, truth: int, exclude=None) -> int:
    """1-based rank of ``truth`` in a plausibility vector (higher is better)."""
    s = np.asarray(scores, dtype=np.float64)
    if exclude is not None and len(exclude):
        s = s.copy()
        ex = np.asarray(list(exclude), dtype=np.int64)
        s[ex[ex != truth]] = -np.inf
    target = s[truth]
    return int(mean_tie_rank((s > target).sum(), (s == target).sum()))


def rank_query(view: EmbeddingView, query, truth: int, fn, setting: str = RAW,
               known_triples=None) -> int:
    """Rank of ``truth`` for ``(h, r, None)`` (tail query) or ``(None, r, t)`` (head query)."""
    h, r, t = query
    n = view.num_entities
    ids = [x for x in (h, t, truth) if x is not None]
    if any(x < 0 or x >= n for x in ids) or not 0 <= r < view.num_relations:
        raise UnknownIdError(f"query {query} / truth {truth} outside the view")
    exclude = None
    if setting == FILTERED:
        if known_triples is None:
            raise ValueError("filtered ranking needs the known-true triples")
        known = np.asarray(known_triples, dtype=np.int64).reshape(-1, 3)
        if t is None:
            exclude = known[(known[:, 0] == h) & (known[:, 1] == r), 2]
        else:
            exclude = known[(known[:, 1] == r) & (known[:, 2] == t), 0]
    elif setting != RAW:
        raise ValueError(f"unknown setting {setting!r}")
    if t is None:
        scores = score_against_all_tails(view, h, r, fn)
    elif h is None:
        scores = score_against_all_heads(view, r, t, fn)
    else:
        raise ValueError("exactly one of head/tail must be None")
    return rank_of(scores, truth, exclude)


def _filter_index(known: np.ndarray):
    tails, heads = defaultdict(list), defaultdict(list)
    for h, r, t in known.tolist():
        tails[(h, r)].append(t)
        heads[(r, t)].append(h)
    return tails, heads


def triple_ranks(view: EmbeddingView, triples, fn, setting: str = RAW, known_triples=None,
                 batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Tail-query and head-query ranks for every triple."""
    fn = get_scorer(fn)
    tri = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    if len(tri) and (tri[:, [0, 2]].max() >= view.num_entities
                     or tri[:, 1].max() >= view.num_relations or tri.min() < 0):
        raise UnknownIdError("test triple references an id outside the view")
    index = None
    if setting == FILTERED:
        if known_triples is None:
            raise ValueError("filtered ranking needs the known-true triples")
        index = _filter_index(np.asarray(known_triples, dtype=np.int64).reshape(-1, 3))
    elif setting != RAW:
        raise ValueError(f"unknown setting {setting!r}")

    tail_ranks = np.empty(len(tri), dtype=np.int64)
    head_ranks = np.empty(len(tri), dtype=np.int64)
    for lo in range(0, len(tri), batch_size):
        b = tri[lo:lo + batch_size]
        rows = np.arange(len(b))
        for side, out in (("tail", tail_ranks), ("head", head_ranks)):
            if side == "tail":
                scores = score_against_all_tails(view, b[:, 0], b[:, 1], fn)
                truth = b[:, 2]
            else:
                scores = score_against_all_heads(view, b[:, 1], b[:, 2], fn)
                truth = b[:, 0]
            target = scores[rows, truth]
            if index is not None:
                tails, heads = index
                for k, (h, r, t) in enumerate(b.tolist()):
                    others = tails[(h, r)] if side == "tail" else heads[(r, t)]
                    others = [x for x in others if x < view.num_entities]
                    if others:
                        scores[k, others] = -np.inf
                scores[rows, truth] = target
            better = (scores > target[:, None]).sum(axis=1)
            equal = (scores == target[:, None]).sum(axis=1)
            out[lo:lo + len(b)] = mean_tie_rank(better, equal)
    return tail_ranks, head_ranks


def metrics_from_ranks(ranks) -> dict:
    ranks = np.asarray(ranks, dtype=np.float64)
    if len(ranks) == 0:
        return {"mrr": 0.0, **{f"hits{k}": 0.0 for k in HITS_AT}}
    out = {"mrr": float(np.mean(1.0 / ranks))}
    for k in HITS_AT:
        out[f"hits{k}"] = float(np.mean(ranks <= k))
    return out


@dataclass
class EvalReport:
    per_snapshot: dict[int, dict]
    average: dict
    num_queries: int
    setting: str = RAW
    ranks: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("ranks")
        d["per_snapshot"] = {str(k): v for k, v in self.per_snapshot.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls({int(k): v for k, v in d["per_snapshot"].items()}, d["average"],
                   d["num_queries"], d["setting"])


def evaluate(view: EmbeddingView, kg: GrowingKG, upto: int, fn, setting: str = RAW,
             split: str = "test", snapshots=None, keep_ranks: bool = False,
             candidates: str = CUMULATIVE) -> EvalReport:
    """Metrics on the ``split`` of every snapshot ``j <= upto``, averaged unweighted over ``j``.

    ``candidates="cumulative"`` ranks against every entity known at ``upto``;
    ``"snapshot"`` ranks snapshot ``j``'s queries only against the entities
    of snapshot ``j``, which isolates the rows that snapshot depends on.
    """
    if candidates not in (CUMULATIVE, SNAPSHOT):
        raise ValueError(f"unknown candidate set {candidates!r}")
    known = kg.all_triples_upto(upto) if setting == FILTERED else None
    per, all_ranks, nq = {}, {}, 0
    for j in (range(upto + 1) if snapshots is None else snapshots):
        triples = getattr(kg[j], split)
        v = view
        if candidates == SNAPSHOT:
            v = EmbeddingView(view.entity_matrix[: kg[j].cumulative_entity_count],
                              view.relation_matrix[: kg[j].cumulative_relation_count])
        tail_r, head_r = triple_ranks(v, triples, fn, setting, known)
        ranks = np.concatenate([tail_r, head_r])
        per[j] = metrics_from_ranks(ranks)
        nq += len(ranks)
        if keep_ranks:
            all_ranks[j] = ranks
    keys = ["mrr"] + [f"hits{k}" for k in HITS_AT]
    average = {k: float(np.mean([m[k] for m in per.values()])) if per else 0.0 for k in keys}
    return EvalReport(per, average, nq, setting, all_ranks)
