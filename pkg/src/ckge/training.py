"""Snapshot-by-snapshot training with margin ranking loss.

Three modes:

``fastkge``
    snapshot 0 trains dense origin embeddings; every later snapshot trains
    only a new adapter group over its layered entities (adaptive ranks) and
    new relations, everything older is frozen.
``no_gl``
    like ``fastkge`` but one adapter of rank ``r_base`` holds all new
    entities of a snapshot.
``no_inclora``
    new rows are dense and *all* parameters are fine-tuned on each delta.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import adapters
from .adapters import AdapterStore, EmbeddingView, LoRAFactor, LoRAGroup
from .evaluation import RAW, EvalReport, evaluate
from .kg import GrowingKG, triple_keys
from .layering import plan_snapshot
from .scoring import ScoreFunction, get_scorer

logger = logging.getLogger(__name__)

FASTKGE, NO_INCLORA, NO_GL = "fastkge", "no_inclora", "no_gl"
MODES = (FASTKGE, NO_INCLORA, NO_GL)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    margin: float = 1.0
    learning_rate: float = 0.1
    batch_size: int = 512
    dim: int = 200
    r_base: int = 100
    relation_rank: int = 20
    num_layers: int = 5
    negatives_per_positive: int = 1
    patience: int = 3
    max_epochs: int = 200
    mode: str = FASTKGE
    scorer: str = "transe_l1"
    seed: int = 0
    # epochs run before early stopping may trigger; 0 keeps the plain patience rule
    min_epochs: int = 0
    early_stopping: bool = True
    max_negative_retries: int = 10
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        for name in ("batch_size", "dim", "r_base", "relation_rank", "num_layers",
                     "negatives_per_positive", "max_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        self.adam_betas = tuple(self.adam_betas)
        get_scorer(self.scorer).check_dim(self.dim)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


def margin_loss(pos_score, neg_score, margin: float) -> float:
    """``sum(max(0, pos - neg + margin))`` over distance-form scores."""
    return float(np.maximum(0.0, np.asarray(pos_score) - np.asarray(neg_score) + margin).sum())


# --------------------------------------------------------------------------- negatives

def corrupt_batch(triples: np.ndarray, num_entities: int, rng: np.random.Generator,
                  known_keys: np.ndarray | None = None, num_relations: int | None = None,
                  max_retries: int = 10) -> np.ndarray:
    """Replace head or tail (fair coin) with a uniform entity, avoiding known triples.

    ``known_keys`` must be sorted keys from :func:`triple_keys` built with the
    same ``num_entities``/``num_relations``. After ``max_retries`` the last
    draw is kept.
    """
    tri = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    out = tri.copy()
    n = len(tri)
    if n == 0:
        return out
    head_side = rng.random(n) < 0.5
    todo = np.arange(n)
    for attempt in range(max_retries + 1):
        ents = rng.integers(0, num_entities, size=len(todo))
        hs = head_side[todo]
        out[todo[hs], 0] = ents[hs]
        out[todo[~hs], 2] = ents[~hs]
        if known_keys is None or len(known_keys) == 0 or attempt == max_retries:
            break
        keys = triple_keys(out[todo], num_entities, num_relations)
        pos = np.searchsorted(known_keys, keys)
        hit = (pos < len(known_keys)) & (known_keys[np.minimum(pos, len(known_keys) - 1)] == keys)
        todo = todo[hit]
        if len(todo) == 0:
            break
    return out


def sample_negative(triple, vocab_size: int, rng: np.random.Generator, known=None,
                    num_relations: int | None = None, max_retries: int = 10):
    """Single-triple form of :func:`corrupt_batch`; ``known`` is an iterable of triples."""
    if vocab_size < 2:
        raise ValueError("need at least two entities to corrupt a triple")
    keys = None
    t = np.asarray(triple, dtype=np.int64).reshape(1, 3)
    if known is not None:
        known = np.asarray(list(known), dtype=np.int64).reshape(-1, 3)
        if num_relations is None:
            num_relations = int(max(known[:, 1].max(initial=0), t[0, 1])) + 1
        keys = np.unique(triple_keys(known, vocab_size, num_relations))
    out = corrupt_batch(t, vocab_size, rng, keys, num_relations, max_retries)[0]
    return tuple(int(x) for x in out)


# --------------------------------------------------------------------------- parameters

class ParamBuffer:
    """Contiguous storage for every trainable array of one snapshot."""

    def __init__(self, shapes: Sequence[tuple[int, ...]], dtype=np.float64):
        sizes = [int(np.prod(s)) for s in shapes]
        self.theta = np.zeros(sum(sizes), dtype=dtype)
        self.grad = np.zeros_like(self.theta)
        self.params, self.grads = [], []
        lo = 0
        for shape, size in zip(shapes, sizes):
            self.params.append(self.theta[lo:lo + size].reshape(shape))
            self.grads.append(self.grad[lo:lo + size].reshape(shape))
            lo += size

    @property
    def size(self) -> int:
        return self.theta.size


class Adam:
    def __init__(self, buf: ParamBuffer, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.buf, self.lr, self.eps = buf, lr, eps
        self.b1, self.b2 = betas
        self.m = np.zeros_like(buf.theta)
        self.v = np.zeros_like(buf.theta)
        self.t = 0

    def step(self) -> None:
        g = self.buf.grad
        self.t += 1
        self.m *= self.b1
        self.m += (1 - self.b1) * g
        self.v *= self.b2
        self.v += (1 - self.b2) * (g * g)
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        self.buf.theta -= (self.lr / c1) * self.m / (np.sqrt(self.v / c2) + self.eps)


class DenseRows:
    """Trainable dense rows for global ids ``[start, start + n)``."""

    def __init__(self, matrix: np.ndarray, grad: np.ndarray, start: int = 0):
        self.matrix, self.grad_buf, self.start = matrix, grad, start

    @property
    def stop(self) -> int:
        return self.start + self.matrix.shape[0]

    def gather(self, ids):
        return self.matrix[ids - self.start]

    def backward(self, ids, g):
        np.add.at(self.grad_buf, ids - self.start, g)

    def compose(self):
        return self.matrix


class FactorRows:
    """Trainable rows produced on demand from adapter factors."""

    def __init__(self, factors: Sequence[LoRAFactor], grads: Sequence[tuple], start: int):
        self.factors, self.grads, self.start = list(factors), list(grads), start
        n = sum(f.n for f in self.factors)
        self.layer_of = np.empty(n, dtype=np.int64)
        self.pos_of = np.empty(n, dtype=np.int64)
        for k, f in enumerate(self.factors):
            local = np.asarray(f.ids, dtype=np.int64) - start
            self.layer_of[local] = k
            self.pos_of[local] = np.arange(f.n)
        self._n = n

    @property
    def stop(self) -> int:
        return self.start + self._n

    def _groups(self, ids):
        local = ids - self.start
        layer = self.layer_of[local]
        order = np.argsort(layer, kind="stable")
        bounds = np.cumsum(np.bincount(layer, minlength=len(self.factors)))[:-1]
        pos = self.pos_of[local]
        for k, idx in enumerate(np.split(order, bounds)):
            if len(idx):
                yield k, idx, pos[idx]

    def gather(self, ids):
        out = np.empty((len(ids), self.factors[0].d))
        for k, idx, pos in self._groups(ids):
            out[idx] = self.factors[k].rows(pos)
        return out

    def backward(self, ids, g):
        # E_k = A_k B_k  =>  dA_k = dE_k B_k^T,  dB_k = A_k^T dE_k
        for k, idx, pos in self._groups(ids):
            f, gk = self.factors[k], g[idx]
            if f.dense_fallback:
                np.add.at(self.grads[k][1], pos, gk)
            else:
                dA, dB = self.grads[k]
                dB += f.a[pos].T @ gk
                np.add.at(dA, pos, gk @ f.b.T)

    def compose(self):
        out = np.empty((self._n, self.factors[0].d))
        for f in self.factors:
            out[np.asarray(f.ids) - self.start] = f.compose()
        return out


class RowLookup:
    """Frozen rows ``[0, start)`` followed by one trainable block."""

    def __init__(self, frozen: np.ndarray, active=None):
        self.frozen = frozen
        self.active = active
        self.start = frozen.shape[0]

    def gather(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if self.active is None:
            return self.frozen[ids]
        old = ids < self.start
        if old.all():
            return self.frozen[ids]
        if not old.any():
            return self.active.gather(ids)
        out = np.empty((len(ids), self.frozen.shape[1]))
        out[old] = self.frozen[ids[old]]
        out[~old] = self.active.gather(ids[~old])
        return out

    def backward(self, ids, g):
        if self.active is None:
            return
        ids = np.asarray(ids, dtype=np.int64)
        new = ids >= self.start
        if new.any():
            self.active.backward(ids[new], g[new])

    def matrix(self):
        if self.active is None:
            return self.frozen
        if self.start == 0:
            return np.array(self.active.compose())
        return np.concatenate([self.frozen, self.active.compose()])


def loss_and_backward(ents: RowLookup, rels: RowLookup, fn: ScoreFunction,
                      pos: np.ndarray, neg: np.ndarray, margin: float) -> float:
    """Margin loss of ``pos[i]`` against ``neg[i]``; gradients accumulate into the lookups."""
    m = len(pos)
    ent_ids = np.concatenate([pos[:, 0], pos[:, 2], neg[:, 0], neg[:, 2]])
    rel_ids = np.concatenate([pos[:, 1], neg[:, 1]])
    E = ents.gather(ent_ids)
    R = rels.gather(rel_ids)
    ph, pt, nh, nt = E[:m], E[m:2 * m], E[2 * m:3 * m], E[3 * m:]
    pr, nr = R[:m], R[m:]
    pd = fn.distance(ph, pr, pt)
    nd = fn.distance(nh, nr, nt)
    hinge = pd - nd + margin
    loss = float(np.maximum(hinge, 0.0).sum())
    active = (hinge > 0).astype(np.float64)[:, None]
    if not active.any():
        return loss
    dph, dpr, dpt = fn.gradients(ph, pr, pt)
    dnh, dnr, dnt = fn.gradients(nh, nr, nt)
    gE = np.concatenate([dph * active, dpt * active, -dnh * active, -dnt * active])
    gR = np.concatenate([dpr * active, -dnr * active])
    ents.backward(ent_ids, gE)
    rels.backward(rel_ids, gR)
    return loss


# --------------------------------------------------------------------------- reports

@dataclass
class TrainStats:
    snapshot: int
    mode: str
    epochs: int = 0
    best_epoch: int = 0
    loss_curve: list = field(default_factory=list)
    valid_mrr_curve: list = field(default_factory=list)
    train_seconds: float = 0.0
    trainable_params: int = 0
    dense_params: int = 0
    ranks: list = field(default_factory=list)
    layer_sizes: list = field(default_factory=list)
    relation_rank: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunReport:
    config: dict
    train_stats: list = field(default_factory=list)
    eval_reports: list = field(default_factory=list)

    @property
    def total_train_seconds(self) -> float:
        return float(sum(s.train_seconds for s in self.train_stats))

    @property
    def incremental_train_seconds(self) -> float:
        """Training time of every snapshot after the first."""
        return float(sum(s.train_seconds for s in self.train_stats if s.snapshot > 0))

    @property
    def final(self) -> EvalReport | None:
        return self.eval_reports[-1] if self.eval_reports else None

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "total_train_seconds": self.total_train_seconds,
            "incremental_train_seconds": self.incremental_train_seconds,
            "snapshots": [
                {"train": s.to_dict(), "eval": e.to_dict() if e is not None else None}
                for s, e in zip(self.train_stats,
                                self.eval_reports + [None] * (len(self.train_stats) - len(self.eval_reports)))
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        rep = cls(d["config"])
        for snap in d["snapshots"]:
            rep.train_stats.append(TrainStats(**snap["train"]))
            if snap["eval"] is not None:
                rep.eval_reports.append(EvalReport.from_dict(snap["eval"]))
        return rep


# --------------------------------------------------------------------------- trainer

def _uniform_rows(rng, n, d):
    return rng.uniform(-1.0, 1.0, size=(n, d)) / math.sqrt(d)


class ContinualTrainer:
    """Holds the parameter store across snapshots of one growing KG."""

    def __init__(self, kg: GrowingKG, cfg: TrainingConfig, store: AdapterStore | None = None):
        if len(kg) < 1:
            raise ValueError("the growing KG has no snapshots")
        self.kg, self.cfg = kg, cfg
        self.fn = get_scorer(cfg.scorer)
        self.store = store
        self.trained = -1 if store is None else max([0] + [g.snapshot_index for g in store.groups])

    def view(self) -> EmbeddingView:
        return self.store.compose()

    # ---- setup of the trainable block for snapshot i
    def _setup(self, i: int, rng: np.random.Generator):
        cfg, kg = self.cfg, self.kg
        d = cfg.dim
        snap = kg[i]
        ne, nr = snap.cumulative_entity_count, snap.cumulative_relation_count
        prev_e, prev_r = kg.previous_counts(i)
        info = {"ranks": [], "layer_sizes": [], "relation_rank": 0, "group": None}

        if i == 0 or cfg.mode == NO_INCLORA:
            if i == 0:
                ent0, rel0 = _uniform_rows(rng, ne, d), _uniform_rows(rng, nr, d)
            else:
                ent0 = np.concatenate([self.store.origin_entities, _uniform_rows(rng, ne - prev_e, d)])
                rel0 = np.concatenate([self.store.origin_relations, _uniform_rows(rng, nr - prev_r, d)])
            buf = ParamBuffer([ent0.shape, rel0.shape])
            buf.params[0][...] = ent0
            buf.params[1][...] = rel0
            ents = RowLookup(np.empty((0, d)), DenseRows(buf.params[0], buf.grads[0]))
            rels = RowLookup(np.empty((0, d)), DenseRows(buf.params[1], buf.grads[1]))
            return buf, ents, rels, info

        view = self.store.compose()
        frozen_e = view.entity_matrix
        frozen_r = view.relation_matrix
        layers = 1 if cfg.mode == NO_GL else cfg.num_layers
        plan = plan_snapshot(snap.train, range(prev_e, ne), range(prev_r, nr), prev_e, layers)
        ranks = adapters.allocate_ranks(plan, cfg.r_base, d)
        group = adapters.create_group(plan, ranks, d, cfg.relation_rank,
                                      seed=rng.integers(2**63), snapshot_index=i,
                                      entity_offset=prev_e, relation_offset=prev_r)
        shapes = []
        for f in group.factors:
            shapes.extend(a.shape for a in f.arrays())
        buf = ParamBuffer(shapes)
        grads = []
        j = 0
        for f in group.factors:
            if f.dense_fallback:
                buf.params[j][...] = f.b
                f.b = buf.params[j]
                grads.append((None, buf.grads[j]))
                j += 1
            else:
                buf.params[j][...] = f.a
                buf.params[j + 1][...] = f.b
                f.a, f.b = buf.params[j], buf.params[j + 1]
                grads.append((buf.grads[j], buf.grads[j + 1]))
                j += 2
        n_ent = len(group.entity_factors)
        ent_active = FactorRows(group.entity_factors, grads[:n_ent], prev_e) if n_ent else None
        rel_active = (FactorRows([group.relation_factor], grads[n_ent:], prev_r)
                      if group.relation_factor is not None else None)
        info.update(ranks=[f.rank for f in group.entity_factors],
                    layer_sizes=[f.n for f in group.entity_factors],
                    relation_rank=group.relation_factor.rank if group.relation_factor else 0,
                    group=group, plan=plan)
        return buf, RowLookup(frozen_e, ent_active), RowLookup(frozen_r, rel_active), info

    def _current_view(self, ents: RowLookup, rels: RowLookup) -> EmbeddingView:
        return EmbeddingView(ents.matrix(), rels.matrix())

    def _valid_mrr(self, i, ents, rels) -> float:
        valid = self.kg[i].valid
        if len(valid) == 0:
            return float("nan")
        view = self._current_view(ents, rels)
        rep = evaluate(view, self.kg, i, self.fn, RAW, split="valid", snapshots=[i])
        return rep.per_snapshot[i]["mrr"]

    def train_snapshot(self, i: int) -> TrainStats:
        cfg, kg = self.cfg, self.kg
        if i != self.trained + 1:
            raise ValueError(f"snapshot {i} requested but {self.trained} is the last trained")
        snap = kg[i]
        rng = np.random.default_rng([cfg.seed, i])
        stats = TrainStats(i, cfg.mode)

        t0 = time.perf_counter()
        buf, ents, rels, info = self._setup(i, rng)
        opt = Adam(buf, cfg.learning_rate, cfg.adam_betas, cfg.adam_eps)
        ne, nr = snap.cumulative_entity_count, snap.cumulative_relation_count
        known = np.unique(triple_keys(kg.train_triples_upto(i), ne, nr))
        train = snap.train
        k = cfg.negatives_per_positive
        elapsed = time.perf_counter() - t0

        stats.trainable_params = buf.size
        stats.dense_params = (ne - kg.previous_counts(i)[0] + nr - kg.previous_counts(i)[1]) * cfg.dim
        stats.ranks, stats.layer_sizes = info["ranks"], info["layer_sizes"]
        stats.relation_rank = info["relation_rank"]

        best_mrr, best_theta, since_best = -np.inf, buf.theta.copy(), 0
        use_es = cfg.early_stopping and len(snap.valid) > 0
        for epoch in range(1, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            epoch_loss = 0.0
            if len(train):
                order = rng.permutation(len(train))
                for lo in range(0, len(train), cfg.batch_size):
                    pos = np.repeat(train[order[lo:lo + cfg.batch_size]], k, axis=0)
                    neg = corrupt_batch(pos, ne, rng, known, nr, cfg.max_negative_retries)
                    buf.grad.fill(0.0)
                    epoch_loss += loss_and_backward(ents, rels, self.fn, pos, neg, cfg.margin)
                    opt.step()
                if not np.isfinite(epoch_loss) or not np.all(np.isfinite(buf.theta)):
                    raise TrainingDivergedError(
                        f"snapshot {i}, epoch {epoch}: loss={epoch_loss}; "
                        f"lr={cfg.learning_rate}, margin={cfg.margin}, mode={cfg.mode}"
                    )
            elapsed += time.perf_counter() - t0
            stats.loss_curve.append(epoch_loss)
            stats.epochs = epoch
            if not use_es:
                stats.best_epoch = epoch
                continue
            mrr = self._valid_mrr(i, ents, rels)
            stats.valid_mrr_curve.append(mrr)
            if mrr > best_mrr:
                best_mrr, since_best, stats.best_epoch = mrr, 0, epoch
                best_theta[...] = buf.theta
            else:
                since_best += 1
                if since_best >= cfg.patience and epoch >= cfg.min_epochs:
                    break
        if use_es:
            buf.theta[...] = best_theta
        stats.train_seconds = elapsed
        self._commit(i, buf, ents, rels, info)
        self.trained = i
        logger.info("snapshot %d: %d epochs (best %d), %.3fs, %d trainable params",
                    i, stats.epochs, stats.best_epoch, stats.train_seconds, stats.trainable_params)
        return stats

    def _commit(self, i, buf, ents, rels, info):
        group: LoRAGroup | None = info["group"]
        if group is None:
            ent = np.array(ents.active.matrix)
            rel = np.array(rels.active.matrix)
            self.store = AdapterStore(ent, rel, [])
            if self.cfg.mode != NO_INCLORA:
                self.store.freeze_origin()
            return
        for f in group.factors:
            f.a, f.b = np.array(f.a), np.array(f.b)
        group.freeze()
        self.store.groups.append(group)

    def run(self, out_dir=None, evaluate_each: bool = True, setting: str = RAW) -> RunReport:
        report = RunReport(self.cfg.to_dict())
        for i in range(self.trained + 1, len(self.kg)):
            report.train_stats.append(self.train_snapshot(i))
            if evaluate_each:
                report.eval_reports.append(evaluate(self.view(), self.kg, i, self.fn, setting))
            if out_dir is not None:
                self.store.save(Path(out_dir) / "checkpoints" / f"after_{i}")
        if out_dir is not None:
            write_run(out_dir, report)
        return report


def write_run(out_dir, report: RunReport) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_report.json").write_text(json.dumps(report.to_dict(), indent=2))


def train_snapshot(kg: GrowingKG, i: int, store: AdapterStore | None, cfg: TrainingConfig):
    """Train snapshot ``i`` on top of ``store`` (``None`` for ``i == 0``).

    Returns ``(stats, store)``; the returned store includes the new, frozen group.
    """
    trainer = ContinualTrainer(kg, cfg, store)
    trainer.trained = i - 1
    stats = trainer.train_snapshot(i)
    return stats, trainer.store


def run_continual(kg: GrowingKG, cfg: TrainingConfig, out_dir=None,
                  setting: str = RAW) -> RunReport:
    return ContinualTrainer(kg, cfg).run(out_dir, setting=setting)
