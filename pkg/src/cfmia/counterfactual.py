"""Nearest-instance counterfactuals (NICE) under the HEOM distance."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, FeatureMeta

REWARDS = ("proximity", "sparsity", "combined")
EQ_TOL = 1e-9


class NoCounterfactualError(LookupError):
    pass


@dataclass
class HeomSpace:
    schema: list[FeatureMeta]
    ranges: np.ndarray  # max - min per feature; ignored for categorical

    @classmethod
    def from_dataset(cls, data: Dataset) -> "HeomSpace":
        if len(data) == 0:
            raise ValueError("empty reference set")
        ranges = data.rows.max(axis=0) - data.rows.min(axis=0)
        return cls(list(data.schema), ranges.astype(float))

    @property
    def numeric(self) -> np.ndarray:
        return np.array([f.is_numeric for f in self.schema], dtype=bool)

    @property
    def d(self) -> int:
        return len(self.schema)

    def per_feature(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Per-feature distances d_i (broadcasts over leading axes)."""
        diff = np.abs(a - b)
        with np.errstate(divide="ignore", invalid="ignore"):
            num = np.where(self.ranges > 0, diff / np.where(self.ranges > 0, self.ranges, 1.0), 0.0)
        cat = (diff > EQ_TOL).astype(float)
        return np.where(self.numeric, num, cat)


def heom(space: HeomSpace, a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != (space.d,) or b.shape != (space.d,):
        raise ValueError(f"vectors must have {space.d} features")
    return float(np.sqrt(np.sum(space.per_feature(a, b) ** 2)))


def heom_rows(space: HeomSpace, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Row-wise HEOM between equally shaped (n, d) arrays."""
    return np.sqrt(np.sum(space.per_feature(A, B) ** 2, axis=-1))


def heom_matrix(space: HeomSpace, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise HEOM distances, shape (len(A), len(B))."""
    num = space.numeric & (space.ranges > 0)
    r = space.ranges[num]
    An, Bn = A[:, num] / r, B[:, num] / r
    sq = (An**2).sum(1)[:, None] + (Bn**2).sum(1)[None, :] - 2.0 * An @ Bn.T
    np.maximum(sq, 0.0, out=sq)
    for j in np.flatnonzero(~space.numeric):
        sq += np.abs(A[:, j, None] - B[None, :, j]) > EQ_TOL
    return np.sqrt(sq)


@dataclass
class Counterfactual:
    original: np.ndarray
    explanation: np.ndarray
    original_class: int
    cf_class: int
    proximity: float
    sparsity: int
    sparsity_fraction: float
    changed: tuple[int, ...] = ()


def changed_features(space: HeomSpace, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(np.asarray(a) - np.asarray(b)) > EQ_TOL


class NiceExplainer:
    """Greedy NUN hybridisation; ``predict_proba`` maps (n, d) rows to posteriors.

    Eligible neighbours are reference rows the model classifies correctly.
    """

    def __init__(
        self,
        predict_proba: Callable[[np.ndarray], np.ndarray],
        space: HeomSpace,
        reference: Dataset,
        reward: str = "proximity",
    ):
        if reward not in REWARDS:
            raise ValueError(f"reward must be one of {REWARDS}")
        self.predict_proba = getattr(predict_proba, "predict_proba", predict_proba)
        self.space = space
        self.reward = reward
        pred = np.argmax(self.predict_proba(reference.rows), axis=1)
        ok = pred == reference.labels
        self.pool = reference.rows[ok]
        self.pool_class = pred[ok]

    def explain(self, x) -> Counterfactual:
        cf = self.explain_batch(np.asarray(x, dtype=float)[None, :])[0]
        if cf is None:
            raise NoCounterfactualError("no correctly classified reference row of another class")
        return cf

    def explain_batch(self, X: np.ndarray) -> list[Counterfactual | None]:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n, d = X.shape
        if d != self.space.d:
            raise ValueError(f"queries must have {self.space.d} features")
        probs = self.predict_proba(X)
        orig = np.argmax(probs, axis=1)
        results: list[Counterfactual | None] = [None] * n
        if n == 0 or len(self.pool) == 0:
            return results

        dist = heom_matrix(self.space, X, self.pool)
        dist[self.pool_class[None, :] == orig[:, None]] = np.inf
        has_nun = np.isfinite(dist).any(axis=1)
        nun_idx = np.argmin(dist, axis=1)

        active = np.flatnonzero(has_nun)
        nun = self.pool[nun_idx[active]]
        cur = X[active].copy()
        o = orig[active]
        todo = changed_features(self.space, cur, nun)
        cur_score = 1.0 - probs[active, o]
        cur_sq = np.zeros(len(active))
        per_feat_sq = self.space.per_feature(X[active], nun) ** 2

        while len(active):
            m = len(active)
            # one candidate per (query, feature); masked ones are ignored
            qi, fj = np.nonzero(todo)
            cand = cur[qi].copy()
            cand[np.arange(len(qi)), fj] = nun[qi, fj]
            cp = self.predict_proba(cand)
            gain = np.full((m, d), -np.inf)
            gain[qi, fj] = (1.0 - cp[np.arange(len(qi)), o[qi]]) - cur_score[qi]
            choice = self._choose(gain, todo, cur_sq, per_feat_sq)

            rows = np.arange(m)
            cur[rows, choice] = nun[rows, choice]
            todo[rows, choice] = False
            cur_sq = cur_sq + per_feat_sq[rows, choice]
            pos = np.full((m, d), -1)
            pos[qi, fj] = np.arange(len(qi))
            chosen_p = cp[pos[rows, choice]]
            cur_score = 1.0 - chosen_p[rows, o]
            new_class = np.argmax(chosen_p, axis=1)
            flipped = (new_class != o) | ~todo.any(axis=1)

            for r in np.flatnonzero(flipped):
                qidx = int(active[r])
                e = cur[r].copy()
                cls = int(new_class[r])
                if cls == o[r]:
                    # hybrid equals the NUN but argmax ties broke the other way
                    cls = int(np.argmax(self.predict_proba(e[None, :])[0]))
                ch = np.flatnonzero(changed_features(self.space, X[qidx], e))
                results[qidx] = Counterfactual(
                    original=X[qidx].copy(), explanation=e, original_class=int(o[r]), cf_class=cls,
                    proximity=heom(self.space, X[qidx], e), sparsity=int(len(ch)),
                    sparsity_fraction=len(ch) / d, changed=tuple(int(c) for c in ch),
                )
            keep = ~flipped
            active, cur, o, nun = active[keep], cur[keep], o[keep], nun[keep]
            todo, cur_score, cur_sq, per_feat_sq = todo[keep], cur_score[keep], cur_sq[keep], per_feat_sq[keep]
        return results

    def _choose(self, gain, todo, cur_sq, per_feat_sq) -> np.ndarray:
        if self.reward == "sparsity":
            return np.argmax(gain, axis=1)
        cur_d = np.sqrt(cur_sq)[:, None]
        step = np.sqrt(cur_sq[:, None] + per_feat_sq) - cur_d
        prox = np.where(todo, gain / np.maximum(step, 1e-12), -np.inf)
        if self.reward == "proximity":
            return np.argmax(prox, axis=1)
        # combined: product of the two ranks (1 = best), lowest wins
        rank_p = _rank_desc(prox)
        rank_s = _rank_desc(gain)
        score = np.where(todo, rank_p * rank_s, np.inf)
        return np.argmin(score, axis=1)


def _rank_desc(v: np.ndarray) -> np.ndarray:
    order = np.argsort(-v, axis=1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(1, v.shape[1] + 1)[None, :].repeat(len(v), 0), axis=1)
    return ranks.astype(float)


def nice_explain(model, space: HeomSpace, reference: Dataset, x, reward: str = "proximity") -> Counterfactual:
    return NiceExplainer(model, space, reference, reward).explain(x)


def cf_quality(cfs: Sequence[Counterfactual]) -> dict:
    if not cfs:
        raise ValueError("no counterfactuals to score")
    return {
        "avg_proximity": float(np.mean([c.proximity for c in cfs])),
        "avg_sparsity": float(np.mean([c.sparsity for c in cfs])),
        "avg_sparsity_fraction": float(np.mean([c.sparsity_fraction for c in cfs])),
        "validity": float(np.mean([c.cf_class != c.original_class for c in cfs])),
        "count": len(cfs),
    }


def write_cf_csv(cfs: Sequence[Counterfactual], row_ids: Sequence[int], schema: Sequence[FeatureMeta], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["row_id", "original_class", "cf_class", "proximity", "sparsity", "changed_feature_names"])
        for rid, c in zip(row_ids, cfs):
            names = ";".join(schema[j].name for j in c.changed)
            w.writerow([int(rid), c.original_class, c.cf_class, repr(c.proximity), c.sparsity, names])
