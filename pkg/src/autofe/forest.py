"""Learners used for candidate scoring: a CART random forest (default),
a single decision tree, and a simple linear model.

The tree builder is numba-compiled because the search trains tens of
thousands of small forests; everything is deterministic given the seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .data import Task

__all__ = ["LearnerConfig", "fit_predict_learner"]


@dataclass(frozen=True)
class LearnerConfig:
    kind: str = "random_forest"  # random_forest | decision_tree | linear
    n_trees: int = 32
    max_depth: int = 8
    min_samples_leaf: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.kind not in ("random_forest", "decision_tree", "linear"):
            raise ValueError(f"unknown learner kind {self.kind!r}")


_NO_FEATURE = -1


@njit(cache=True)
def _build_tree(X, y, n_classes, max_depth, min_leaf, m_features, seed, bootstrap):
    """Grow one CART tree; classification when n_classes > 0 (Gini), else
    regression (variance reduction).  Returns flat node arrays."""
    np.random.seed(seed)
    n, p = X.shape
    if bootstrap:
        idx = np.random.randint(0, n, n)
    else:
        idx = np.arange(n)

    max_nodes = 2 ** (max_depth + 2)
    feature = np.full(max_nodes, _NO_FEATURE, dtype=np.int64)
    threshold = np.zeros(max_nodes, dtype=np.float64)
    left = np.full(max_nodes, -1, dtype=np.int64)
    right = np.full(max_nodes, -1, dtype=np.int64)
    value = np.zeros(max_nodes, dtype=np.float64)
    n_nodes = 1

    # explicit stack: (node_id, start, end, depth)
    stack = np.zeros((max_nodes, 4), dtype=np.int64)
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = n
    stack[0, 3] = 0
    top = 1

    counts = np.zeros(max(n_classes, 1), dtype=np.int64)
    left_counts = np.zeros(max(n_classes, 1), dtype=np.int64)

    while top > 0:
        top -= 1
        node = stack[top, 0]
        start = stack[top, 1]
        end = stack[top, 2]
        depth = stack[top, 3]
        count = end - start
        ys = y[idx[start:end]]

        if n_classes > 0:
            counts[:] = 0
            for v in ys:
                counts[int(v)] += 1
            best_c, best_n = 0, -1
            for c in range(n_classes):
                if counts[c] > best_n:
                    best_n = counts[c]
                    best_c = c
            value[node] = float(best_c)
            pure = best_n == count
        else:
            value[node] = ys.mean()
            pure = ys.min() == ys.max()

        if depth >= max_depth or count < 2 * min_leaf or pure:
            continue

        feats = np.random.permutation(p)[:m_features]
        best_score = np.inf
        best_feat = _NO_FEATURE
        best_thr = 0.0

        for f in feats:
            vals = X[idx[start:end], f].copy()
            ordr = np.argsort(vals)
            sv = vals[ordr]
            sy = ys[ordr]
            if sv[0] == sv[-1]:
                continue
            if n_classes > 0:
                left_counts[:] = 0
                nl = 0
                for i in range(count - 1):
                    left_counts[int(sy[i])] += 1
                    nl += 1
                    if sv[i] == sv[i + 1]:
                        continue
                    nr = count - nl
                    if nl < min_leaf or nr < min_leaf:
                        continue
                    sl = 0.0
                    sr = 0.0
                    for c in range(n_classes):
                        lc = left_counts[c]
                        sl += lc * lc
                        rc = counts[c] - lc
                        sr += rc * rc
                    # weighted Gini, dropping constant terms:
                    # n_l*(1 - sum p_l^2) + n_r*(1 - sum p_r^2)
                    score = count - sl / nl - sr / nr
                    if score < best_score:
                        best_score = score
                        best_feat = f
                        best_thr = sv[i]
            else:
                total = sy.sum()
                lsum = 0.0
                lsq = 0.0
                tsq = np.sum(sy * sy)
                nl = 0
                for i in range(count - 1):
                    lsum += sy[i]
                    lsq += sy[i] * sy[i]
                    nl += 1
                    if sv[i] == sv[i + 1]:
                        continue
                    nr = count - nl
                    if nl < min_leaf or nr < min_leaf:
                        continue
                    rsum = total - lsum
                    rsq = tsq - lsq
                    score = (lsq - lsum * lsum / nl) + (rsq - rsum * rsum / nr)
                    if score < best_score:
                        best_score = score
                        best_feat = f
                        best_thr = sv[i]

        if best_feat == _NO_FEATURE:
            continue

        # stable partition: left gets samples with value <= threshold
        buf = np.empty(count, dtype=np.int64)
        lbuf = np.empty(count, dtype=np.int64)
        nl = 0
        nr = 0
        for i in range(start, end):
            if X[idx[i], best_feat] <= best_thr:
                lbuf[nl] = idx[i]
                nl += 1
            else:
                buf[nr] = idx[i]
                nr += 1
        idx[start : start + nl] = lbuf[:nl]
        idx[start + nl : end] = buf[:nr]

        feature[node] = best_feat
        threshold[node] = best_thr
        left[node] = n_nodes
        right[node] = n_nodes + 1
        stack[top, 0] = n_nodes
        stack[top, 1] = start
        stack[top, 2] = start + nl
        stack[top, 3] = depth + 1
        top += 1
        stack[top, 0] = n_nodes + 1
        stack[top, 1] = start + nl
        stack[top, 2] = end
        stack[top, 3] = depth + 1
        top += 1
        n_nodes += 2

    return feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes], value[:n_nodes]


@njit(cache=True)
def _predict_tree(feature, threshold, left, right, value, X):
    n = X.shape[0]
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        node = 0
        while feature[node] != _NO_FEATURE:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out


def _forest_fit_predict(config, X_train, y_train, X_test, n_classes, bootstrap, m_features):
    n_test = X_test.shape[0]
    if n_classes > 0:
        votes = np.zeros((n_test, n_classes), dtype=np.int64)
    else:
        acc = np.zeros(n_test, dtype=np.float64)
    for t in range(config.n_trees):
        tree = _build_tree(
            X_train,
            y_train,
            n_classes,
            config.max_depth,
            config.min_samples_leaf,
            m_features,
            (config.seed + 0x9E3779B1 * t) % (2**32),
            bootstrap,
        )
        pred = _predict_tree(*tree, X_test)
        if n_classes > 0:
            votes[np.arange(n_test), pred.astype(np.int64)] += 1
        else:
            acc += pred
    if n_classes > 0:
        return np.argmax(votes, axis=1).astype(np.float64)  # argmax ties -> lowest label
    return acc / config.n_trees


def _standardize(train, test):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd[sd == 0] = 1.0
    return (train - mu) / sd, (test - mu) / sd


def _linear_fit_predict(X_train, y_train, X_test, n_classes):
    Xtr, Xte = _standardize(X_train, X_test)
    Xtr = np.hstack([Xtr, np.ones((Xtr.shape[0], 1))])
    Xte = np.hstack([Xte, np.ones((Xte.shape[0], 1))])
    if n_classes == 0:
        w, *_ = np.linalg.lstsq(Xtr, y_train, rcond=None)
        return Xte @ w
    # multinomial logistic regression, plain gradient descent
    Y = np.eye(n_classes)[y_train.astype(np.int64)]
    W = np.zeros((Xtr.shape[1], n_classes))
    lr = 0.5 / Xtr.shape[0]
    for _ in range(300):
        z = Xtr @ W
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        W -= lr * (Xtr.T @ (p - Y))
    return np.argmax(Xte @ W, axis=1).astype(np.float64)


def fit_predict_learner(
    config: LearnerConfig,
    X_train: np.ndarray,
    y_train: np.ndarray,
    X_test: np.ndarray,
    task: Task,
    n_classes: int = 0,
) -> np.ndarray:
    """Train the configured learner and predict the test rows.

    Classification predictions are dense integer labels (as floats);
    constant training targets yield constant predictions.
    """
    if X_train.shape[0] < 1 or X_train.shape[1] < 1:
        raise ValueError("need at least one training row and one feature")
    X_train = np.ascontiguousarray(X_train, dtype=np.float64)
    X_test = np.ascontiguousarray(X_test, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.float64)
    nc = n_classes if task is Task.CLASSIFICATION else 0

    if config.kind == "linear":
        return _linear_fit_predict(X_train, y_train, X_test, nc)

    p = X_train.shape[1]
    if config.kind == "decision_tree":
        single = LearnerConfig("decision_tree", 1, config.max_depth, config.min_samples_leaf, config.seed)
        return _forest_fit_predict(single, X_train, y_train, X_test, nc, False, p)
    m = max(1, int(np.sqrt(p)))
    return _forest_fit_predict(config, X_train, y_train, X_test, nc, True, m)
