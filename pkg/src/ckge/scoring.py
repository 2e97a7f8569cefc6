"""KGE score functions.

Every scorer works in *distance* form internally (lower = more plausible),
which is what the margin loss consumes. ComplEx's distance is its negated
bilinear score. ``score`` and the ``score_against_all_*`` helpers return
plausibility (higher = better), the orientation the evaluator ranks by.

Complex-valued scorers split a row of width ``d`` into a real half
``x[:d/2]`` and an imaginary half ``x[d/2:]``.
"""
from __future__ import annotations

import numpy as np

from .adapters import EmbeddingView

_CHUNK_ELEMENTS = 1 << 22


class OddDimensionError(ValueError):
    pass


def _chunks(q: int, n: int, d: int):
    step = max(1, _CHUNK_ELEMENTS // max(1, n * d))
    for lo in range(0, q, step):
        yield slice(lo, min(q, lo + step))


def _halves(x):
    k = x.shape[-1] // 2
    return x[..., :k], x[..., k:]


class ScoreFunction:
    name = "base"
    complex_valued = False

    def check_dim(self, d: int) -> None:
        if self.complex_valued and d % 2:
            raise OddDimensionError(f"{self.name} needs an even embedding dimension, got {d}")

    def distance(self, h, r, t) -> np.ndarray:
        raise NotImplementedError

    def gradients(self, h, r, t):
        """Gradients of :meth:`distance` w.r.t. ``h``, ``r`` and ``t`` (rowwise)."""
        raise NotImplementedError

    def tail_distances(self, h, r, entities) -> np.ndarray:
        """``(q, n)`` distances of every entity as the tail of each ``(h, r)``."""
        raise NotImplementedError

    def head_distances(self, r, t, entities) -> np.ndarray:
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}()"


class TransE(ScoreFunction):
    def __init__(self, norm: int = 1):
        if norm not in (1, 2):
            raise ValueError("TransE norm must be 1 or 2")
        self.norm = norm
        self.name = f"transe_l{norm}"

    def _reduce(self, x):
        if self.norm == 1:
            return np.abs(x).sum(axis=-1)
        return np.sqrt((x * x).sum(axis=-1))

    def distance(self, h, r, t):
        return self._reduce(h + r - t)

    def gradients(self, h, r, t):
        x = h + r - t
        if self.norm == 1:
            g = np.sign(x)
        else:
            nrm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
            g = np.divide(x, nrm, out=np.zeros_like(x), where=nrm > 0)
        return g, g.copy(), -g

    def _against(self, anchor, entities, sign):
        q, (n, d) = anchor.shape[0], entities.shape
        out = np.empty((q, n))
        for s in _chunks(q, n, d):
            out[s] = self._reduce(sign * (anchor[s, None, :] - entities[None, :, :]))
        return out

    def tail_distances(self, h, r, entities):
        return self._against(h + r, entities, 1.0)

    def head_distances(self, r, t, entities):
        # |e + r - t| = |e - (t - r)|
        return self._against(t - r, entities, -1.0)

    def __repr__(self):
        return f"TransE(norm={self.norm})"


class ComplEx(ScoreFunction):
    name = "complex"
    complex_valued = True

    def plausibility(self, h, r, t):
        hr, hi = _halves(h)
        rr, ri = _halves(r)
        tr, ti = _halves(t)
        return (hr * rr * tr + hi * rr * ti + hr * ri * ti - hi * ri * tr).sum(axis=-1)

    def distance(self, h, r, t):
        return -self.plausibility(h, r, t)

    def gradients(self, h, r, t):
        hr, hi = _halves(h)
        rr, ri = _halves(r)
        tr, ti = _halves(t)
        dh = np.concatenate([rr * tr + ri * ti, rr * ti - ri * tr], axis=-1)
        dr = np.concatenate([hr * tr + hi * ti, hr * ti - hi * tr], axis=-1)
        dt = np.concatenate([hr * rr - hi * ri, hi * rr + hr * ri], axis=-1)
        return -dh, -dr, -dt

    def tail_distances(self, h, r, entities):
        hr, hi = _halves(h)
        rr, ri = _halves(r)
        x = np.concatenate([hr * rr - hi * ri, hr * ri + hi * rr], axis=-1)
        return -(x @ entities.T)

    def head_distances(self, r, t, entities):
        rr, ri = _halves(r)
        tr, ti = _halves(t)
        y = np.concatenate([rr * tr + ri * ti, rr * ti - ri * tr], axis=-1)
        return -(y @ entities.T)


class RotatE(ScoreFunction):
    """Sum over complex coordinates of ``|h * u - t|`` with ``u = r / |r|``."""

    name = "rotate"
    complex_valued = True

    @staticmethod
    def unit(r):
        rr, ri = _halves(r)
        rho = np.sqrt(rr * rr + ri * ri)
        safe = np.where(rho > 0, rho, 1.0)
        ur = np.where(rho > 0, rr / safe, 1.0)
        ui = np.where(rho > 0, ri / safe, 0.0)
        return ur, ui, rho

    def distance(self, h, r, t):
        hr, hi = _halves(h)
        tr, ti = _halves(t)
        ur, ui, _ = self.unit(r)
        pr = hr * ur - hi * ui - tr
        pi = hr * ui + hi * ur - ti
        return np.sqrt(pr * pr + pi * pi).sum(axis=-1)

    def gradients(self, h, r, t):
        hr, hi = _halves(h)
        tr, ti = _halves(t)
        rr, ri = _halves(r)
        ur, ui, rho = self.unit(r)
        pr = hr * ur - hi * ui - tr
        pi = hr * ui + hi * ur - ti
        m = np.sqrt(pr * pr + pi * pi)
        gr = np.divide(pr, m, out=np.zeros_like(pr), where=m > 0)
        gi = np.divide(pi, m, out=np.zeros_like(pi), where=m > 0)
        dh = np.concatenate([gr * ur + gi * ui, -gr * ui + gi * ur], axis=-1)
        dt = np.concatenate([-gr, -gi], axis=-1)
        dur = gr * hr + gi * hi
        dui = -gr * hi + gi * hr
        rho3 = np.where(rho > 0, rho ** 3, 1.0)
        drr = np.where(rho > 0, (dur * ri * ri - dui * rr * ri) / rho3, 0.0)
        dri = np.where(rho > 0, (dui * rr * rr - dur * rr * ri) / rho3, 0.0)
        return dh, np.concatenate([drr, dri], axis=-1), dt

    def _against(self, ar, ai, entities):
        er, ei = _halves(entities)
        q, (n, d) = ar.shape[0], entities.shape
        out = np.empty((q, n))
        for s in _chunks(q, n, d):
            dr = ar[s, None, :] - er[None]
            di = ai[s, None, :] - ei[None]
            out[s] = np.sqrt(dr * dr + di * di).sum(axis=-1)
        return out

    def tail_distances(self, h, r, entities):
        hr, hi = _halves(h)
        ur, ui, _ = self.unit(r)
        return self._against(hr * ur - hi * ui, hr * ui + hi * ur, entities)

    def head_distances(self, r, t, entities):
        # |u| = 1, so |e*u - t| = |e - t*conj(u)|
        tr, ti = _halves(t)
        ur, ui, _ = self.unit(r)
        return self._against(tr * ur + ti * ui, ti * ur - tr * ui, entities)


SCORERS = {
    "transe_l1": lambda: TransE(1),
    "transe_l2": lambda: TransE(2),
    "complex": ComplEx,
    "rotate": RotatE,
}


def get_scorer(name: str | ScoreFunction) -> ScoreFunction:
    if isinstance(name, ScoreFunction):
        return name
    try:
        return SCORERS[name.lower()]()
    except KeyError:
        raise ValueError(f"unknown scorer {name!r}; choose from {sorted(SCORERS)}") from None


def score(view: EmbeddingView, h: int, r: int, t: int, fn) -> float:
    """Plausibility of one triple (higher is better)."""
    fn = get_scorer(fn)
    fn.check_dim(view.dim)
    E, R = view.entity_matrix, view.relation_matrix
    return float(-fn.distance(E[h], R[r], E[t]))


def score_against_all_tails(view: EmbeddingView, h, r, fn) -> np.ndarray:
    """Plausibility of every entity as tail of ``(h, r)``; batched when ``h``, ``r`` are arrays."""
    fn = get_scorer(fn)
    fn.check_dim(view.dim)
    hs, rs = np.atleast_1d(h), np.atleast_1d(r)
    out = -fn.tail_distances(view.entity_matrix[hs], view.relation_matrix[rs], view.entity_matrix)
    return out[0] if np.ndim(h) == 0 else out


def score_against_all_heads(view: EmbeddingView, r, t, fn) -> np.ndarray:
    fn = get_scorer(fn)
    fn.check_dim(view.dim)
    rs, ts = np.atleast_1d(r), np.atleast_1d(t)
    out = -fn.head_distances(view.relation_matrix[rs], view.entity_matrix[ts], view.entity_matrix)
    return out[0] if np.ndim(t) == 0 else out
