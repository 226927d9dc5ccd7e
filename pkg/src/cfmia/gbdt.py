"""Gradient-boosted regression trees with logistic loss (attack classifier).

Trees are grown level-wise on quantile-binned features with second-order
(Newton) leaf values, in the style of histogram-based XGBoost.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DegenerateLabelsError(ValueError):
    pass


@dataclass
class GbdtConfig:
    n_estimators: int = 150
    max_depth: int = 15
    learning_rate: float = 0.01
    n_bins: int = 64
    reg_lambda: float = 1.0
    min_child_weight: float = 1.0
    loss: str = "logistic"

    def __post_init__(self):
        if self.n_estimators < 1 or self.max_depth < 1:
            raise ValueError("n_estimators and max_depth must be >= 1")
        if self.loss != "logistic":
            raise ValueError("only logistic loss is supported")


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


def logistic_loss(y: np.ndarray, score: np.ndarray) -> float:
    # log(1 + e^s) - y s, computed stably
    return float(np.mean(np.logaddexp(0.0, score) - y * score))


@dataclass
class _Tree:
    feature: np.ndarray
    split_bin: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict_binned(self, B: np.ndarray) -> np.ndarray:
        node = np.zeros(len(B), dtype=int)
        while True:
            internal = self.feature[node] >= 0
            if not internal.any():
                return self.value[node]
            idx = np.flatnonzero(internal)
            nd = node[idx]
            go_left = B[idx, self.feature[nd]] <= self.split_bin[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])


@dataclass
class AttackModel:
    config: GbdtConfig
    edges: list[np.ndarray]
    base_score: float
    trees: list[_Tree] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)

    def _bin(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.column_stack([np.searchsorted(e, X[:, j], side="left") for j, e in enumerate(self.edges)])

    def decision_function(self, X) -> np.ndarray:
        B = self._bin(X)
        s = np.full(len(B), self.base_score)
        for t in self.trees:
            s += t.predict_binned(B)
        return s

    def predict_proba(self, X) -> np.ndarray:
        """Probability of the positive (member) class."""
        return sigmoid(self.decision_function(X))

    def predict(self, X, threshold: float = 0.5) -> np.ndarray:
        return (self.predict_proba(X) >= threshold).astype(int)


def _quantile_edges(col: np.ndarray, n_bins: int) -> np.ndarray:
    uniq = np.unique(col)
    if len(uniq) <= n_bins:
        return uniq[:-1] if len(uniq) > 1 else uniq[:0]
    qs = np.quantile(col, np.linspace(0, 1, n_bins + 1)[1:-1], method="lower")
    return np.unique(qs)


def _grow_tree(Bx: np.ndarray, g: np.ndarray, h: np.ndarray, n_bins: int, cfg: GbdtConfig) -> _Tree:
    n, d = Bx.shape
    lam, mcw = cfg.reg_lambda, cfg.min_child_weight
    cap = 2 * n + 1
    feature = np.full(cap, -1)
    split_bin = np.zeros(cap, dtype=int)
    left = np.full(cap, -1)
    right = np.full(cap, -1)
    G_node, H_node = np.zeros(cap), np.zeros(cap)
    G_node[0], H_node[0] = g.sum(), h.sum()
    n_nodes = 1
    node_of = np.zeros(n, dtype=int)
    frontier = np.array([0])
    offsets = (np.arange(d) * n_bins)[None, :]

    for _ in range(cfg.max_depth):
        m = len(frontier)
        slot = np.full(n_nodes, -1)
        slot[frontier] = np.arange(m)
        s = slot[node_of]
        live = np.flatnonzero(s >= 0)
        if len(live) == 0:
            break
        keys = (s[live, None] * (d * n_bins) + offsets + Bx[live]).ravel()
        size = m * d * n_bins
        Gh = np.bincount(keys, weights=np.repeat(g[live], d), minlength=size).reshape(m, d, n_bins)
        Hh = np.bincount(keys, weights=np.repeat(h[live], d), minlength=size).reshape(m, d, n_bins)
        GL, HL = np.cumsum(Gh, axis=2), np.cumsum(Hh, axis=2)
        Gt = G_node[frontier][:, None, None]
        Ht = H_node[frontier][:, None, None]
        GR, HR = Gt - GL, Ht - HL
        gain = GL**2 / (HL + lam) + GR**2 / (HR + lam) - Gt**2 / (Ht + lam)
        gain = np.where((HL >= mcw) & (HR >= mcw), gain, -np.inf).reshape(m, -1)
        best = np.argmax(gain, axis=1)
        k = np.flatnonzero(gain[np.arange(m), best] > 1e-12)
        if len(k) == 0:
            break
        nodes = frontier[k]
        f, b = np.divmod(best[k], n_bins)
        li = n_nodes + 2 * np.arange(len(k))
        ri = li + 1
        feature[nodes], split_bin[nodes], left[nodes], right[nodes] = f, b, li, ri
        G_node[li], H_node[li] = GL[k, f, b], HL[k, f, b]
        G_node[ri], H_node[ri] = GR[k, f, b], HR[k, f, b]
        n_nodes += 2 * len(k)

        idx = np.flatnonzero(feature[node_of] >= 0)
        nd = node_of[idx]
        go_left = Bx[idx, feature[nd]] <= split_bin[nd]
        node_of[idx] = np.where(go_left, left[nd], right[nd])
        children = np.column_stack([li, ri]).ravel()
        frontier = children[H_node[children] >= 2 * mcw]
        if len(frontier) == 0:
            break

    value = -cfg.learning_rate * G_node[:n_nodes] / (H_node[:n_nodes] + lam)
    return _Tree(feature[:n_nodes].copy(), split_bin[:n_nodes].copy(), left[:n_nodes].copy(),
                 right[:n_nodes].copy(), value)


def gbdt_train(X, y, config: GbdtConfig | None = None) -> AttackModel:
    """Fit boosted trees to binary labels ``y`` (1 = member)."""
    cfg = config or GbdtConfig()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    if len(np.unique(y)) < 2:
        raise DegenerateLabelsError("attack training data needs both members and non-members")
    edges = [_quantile_edges(X[:, j], cfg.n_bins) for j in range(X.shape[1])]
    p0 = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
    model = AttackModel(cfg, edges, float(np.log(p0 / (1 - p0))))
    Bx = model._bin(X)
    n_bins = max(1, max((len(e) + 1 for e in edges), default=1))
    score = np.full(len(y), model.base_score)
    model.train_loss.append(logistic_loss(y, score))
    for _ in range(cfg.n_estimators):
        p = sigmoid(score)
        tree = _grow_tree(Bx, p - y, p * (1 - p), n_bins, cfg)
        model.trees.append(tree)
        score += tree.predict_binned(Bx)
        model.train_loss.append(logistic_loss(y, score))
    return model
