"""Attribute classifiers.

Baselines for scenarios 1-2 are a CART decision tree, k-nearest neighbours and
a softmax MLP. Scenarios 3-4 use the adaptive-weight classifier: list items are
pooled with softmax weights ``w_j ∝ exp(W_a . e_j + b_a)`` and the pooled vector
feeds an MLP head. All three share one minibatch training loop, so freezing
``W_a = 0, b_a = 0`` reproduces an MLP trained on mean-pooled features exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from sklearn.tree import DecisionTreeClassifier

from .optim import make_optimizer

__all__ = [
    "AGGREGATION_MODES",
    "MLPConfig",
    "ClassifierConfig",
    "MLP",
    "MLPClassifier",
    "KNNClassifier",
    "TreeClassifier",
    "AdaptiveClassifier",
    "featurize_scenario1",
    "multi_hot",
    "softmax",
    "compute_weights",
    "position_weights",
    "aggregate",
    "aggregate_batch",
    "cross_entropy",
    "train_classifier",
    "knn_predict",
    "adaptive_loss_and_grad",
    "train_adaptive",
    "predict_attribute",
]

AGGREGATION_MODES = ("Sum", "Static", "Dynamic")


# --------------------------------------------------------------------------
# features and pooling


def featurize_scenario1(rec_list: Sequence[int], n_items: int) -> np.ndarray:
    """Multi-hot vector with a 1 at each listed item index."""
    v = np.zeros(n_items)
    items = np.asarray(list(rec_list), dtype=np.int64)
    if items.size and (items.min() < 0 or items.max() >= n_items):
        raise ValueError(f"item index out of range [0, {n_items})")
    v[items] = 1.0
    return v


def multi_hot(lists: np.ndarray, n_items: int) -> np.ndarray:
    """Row-wise :func:`featurize_scenario1` for a (n, K) array of lists."""
    lists = np.asarray(lists, dtype=np.int64)
    if lists.size and (lists.min() < 0 or lists.max() >= n_items):
        raise ValueError(f"item index out of range [0, {n_items})")
    out = np.zeros((len(lists), n_items))
    np.put_along_axis(out, lists, 1.0, axis=1)
    return out


def softmax(s: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(s - s.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def position_weights(mode: str, K: int) -> np.ndarray:
    """Fixed weights of the Sum and Static poolings."""
    if mode == "Sum":
        return np.full(K, 1.0 / K)
    if mode == "Static":
        return (K - np.arange(K)) / K / K
    raise ValueError(f"no fixed weights for aggregation mode {mode!r}")


def _weights_batch(X: np.ndarray, mode: str, W_a=None, b_a=0.0) -> np.ndarray:
    B, K, _ = X.shape
    if mode == "Dynamic":
        return softmax(X @ W_a + b_a, axis=1)
    if mode in AGGREGATION_MODES:
        return np.broadcast_to(position_weights(mode, K), (B, K))
    raise ValueError(f"unknown aggregation mode {mode!r} (expected one of {AGGREGATION_MODES})")


def _pool(w: np.ndarray, X: np.ndarray) -> np.ndarray:
    # axis-1 reduction: row results do not depend on batch composition
    return (w[:, :, None] * X).sum(axis=1)


def aggregate_batch(X: np.ndarray, mode: str, W_a=None, b_a: float = 0.0) -> np.ndarray:
    """Pool (B, K, d) list embeddings into (B, d) user vectors."""
    if X.ndim != 3 or X.shape[1] == 0:
        raise ValueError("expected a nonempty (batch, K, dim) array")
    return _pool(_weights_batch(X, mode, W_a, b_a), X)


def _list_embeddings(rec_list, E) -> np.ndarray:
    rec_list = list(rec_list)
    if isinstance(E, np.ndarray):
        return E[np.asarray(rec_list, dtype=np.int64)]
    table = getattr(E, "table", E)
    return table.rows(rec_list)


def compute_weights(rec_list, E, W_a, b_a: float = 0.0) -> np.ndarray:
    """Softmax over list positions of ``W_a . e_j + b_a``."""
    X = _list_embeddings(rec_list, E)
    return softmax(X @ np.asarray(W_a) + b_a)


def aggregate(rec_list, E, mode: str = "Sum", W_a=None, b_a: float = 0.0) -> np.ndarray:
    X = _list_embeddings(rec_list, E)
    if not len(X):
        raise ValueError("cannot aggregate an empty list")
    return aggregate_batch(X[None], mode, W_a, b_a)[0]


def cross_entropy(probs: np.ndarray, y: np.ndarray) -> float:
    probs = np.asarray(probs)
    return float(-np.mean(np.log(np.clip(probs[np.arange(len(y)), y], 1e-300, None))))


# --------------------------------------------------------------------------
# MLP building block


class MLP:
    """Dense ReLU network with linear output; ``params`` maps ``W{k}``/``b{k}``."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator | None = None, params: dict | None = None):
        self.sizes = tuple(int(s) for s in sizes)
        if params is None:
            params = {}
            for k, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
                params[f"W{k}"] = rng.normal(0.0, np.sqrt(2.0 / a), (a, b))
                params[f"b{k}"] = np.zeros(b)
        self.params = params

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def forward(self, X, params=None):
        p = self.params if params is None else params
        acts = [X]
        h = X
        for k in range(self.n_layers):
            z = h @ p[f"W{k}"] + p[f"b{k}"]
            h = np.maximum(z, 0.0) if k < self.n_layers - 1 else z
            acts.append(h)
        return h, acts

    def backward(self, acts, d_out, params=None):
        p = self.params if params is None else params
        grads = {}
        g = d_out
        for k in reversed(range(self.n_layers)):
            grads[f"W{k}"] = acts[k].T @ g
            grads[f"b{k}"] = g.sum(axis=0)
            g = g @ p[f"W{k}"].T
            if k > 0:
                g = g * (acts[k] > 0)
        return grads, g


def _softmax_ce_grad(logits, y):
    p = softmax(logits)
    n = len(y)
    loss = cross_entropy(p, y)
    d = p.copy()
    d[np.arange(n), y] -= 1.0
    return loss, d / n, p


@dataclass(frozen=True)
class MLPConfig:
    hidden: tuple = (256,)
    learning_rate: float = 0.05
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 20
    optimizer: str = "sgd"
    val_fraction: float = 0.1
    weight_decay: float = 0.0
    seed: int = 0


def _fit_loop(n, y, n_classes, cfg: MLPConfig, params: dict, loss_grad, logits, frozen=()):
    """Shared minibatch loop with early stopping on held-out cross-entropy.

    ``loss_grad(params, idx)`` returns (loss, grads) on rows ``idx``;
    ``logits(params, idx)`` returns class scores for rows ``idx``.
    """
    split_rng = np.random.default_rng([cfg.seed, 2])
    order_rng = np.random.default_rng([cfg.seed, 1])
    perm = split_rng.permutation(n)
    n_val = int(np.floor(cfg.val_fraction * n))
    # keep at least one example per class in the fitting part
    if n_val and len(np.unique(y[perm[n_val:]])) < len(np.unique(y)):
        n_val = 0
    val, fit = np.sort(perm[:n_val]), perm[n_val:]
    opt = make_optimizer(cfg.optimizer, cfg.learning_rate, frozen=frozen)
    best = {k: v.copy() for k, v in params.items()}
    best_loss, bad = np.inf, 0
    history = []
    for epoch in range(cfg.max_epochs):
        order = order_rng.permutation(fit)
        total = 0.0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            loss, grads = loss_grad(params, idx)
            if not np.isfinite(loss):
                raise FloatingPointError(f"classifier training diverged at epoch {epoch}")
            if cfg.weight_decay:
                for k in grads:
                    if k.startswith("W"):
                        grads[k] = grads[k] + cfg.weight_decay * params[k]
            opt.step(params, grads)
            total += loss * len(idx)
        history.append(total / max(1, len(order)))
        if n_val:
            val_loss = cross_entropy(softmax(logits(params, val)), y[val])
            if val_loss < best_loss:
                best_loss, bad = val_loss, 0
                best = {k: v.copy() for k, v in params.items()}
            else:
                bad += 1
                if bad >= cfg.patience:
                    break
    if not n_val:
        best = {k: v.copy() for k, v in params.items()}
    return best, history


def _check_labels(y, n_classes=None):
    y = np.asarray(y, dtype=np.int64)
    if not len(y):
        raise ValueError("no training examples")
    if len(np.unique(y)) < 2:
        raise ValueError("training labels cover a single class")
    if y.min() < 0:
        raise ValueError("labels must be nonnegative class codes")
    return y, int(n_classes if n_classes is not None else y.max() + 1)


@dataclass(eq=False)
class MLPClassifier:
    net: MLP
    n_classes: int
    history: list = field(default_factory=list)

    def predict_proba(self, X):
        return softmax(self.net.forward(np.asarray(X, dtype=np.float64))[0])

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)


def _train_mlp(X, y, n_classes, cfg: MLPConfig) -> MLPClassifier:
    X = np.asarray(X, dtype=np.float64)
    net = MLP((X.shape[1], *cfg.hidden, n_classes), np.random.default_rng([cfg.seed, 0]))

    def loss_grad(params, idx):
        logits, acts = net.forward(X[idx], params)
        loss, d, _ = _softmax_ce_grad(logits, y[idx])
        grads, _ = net.backward(acts, d, params)
        return loss, grads

    def logits(params, idx):
        return net.forward(X[idx], params)[0]

    best, history = _fit_loop(len(X), y, n_classes, cfg, net.params, loss_grad, logits)
    return MLPClassifier(MLP(net.sizes, params=best), n_classes, history)


# --------------------------------------------------------------------------
# KNN and decision tree


@dataclass(eq=False)
class KNNClassifier:
    """Euclidean k-NN; neighbour ties by training index, vote ties by smallest class."""

    k: int
    X: np.ndarray
    y: np.ndarray
    n_classes: int

    def neighbors(self, Q: np.ndarray) -> np.ndarray:
        Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
        k = min(self.k, len(self.X))
        out = np.empty((len(Q), k), dtype=np.int64)
        step = max(1, 2_000_000 // max(1, self.X.size))
        for s in range(0, len(Q), step):
            d = np.sqrt(np.sum((Q[s : s + step, None, :] - self.X[None, :, :]) ** 2, axis=2))
            out[s : s + step] = np.argsort(d, axis=1, kind="stable")[:, :k]
        return out

    def predict_proba(self, Q):
        nb = self.neighbors(Q)
        counts = np.zeros((len(nb), self.n_classes))
        for c in range(self.n_classes):
            counts[:, c] = (self.y[nb] == c).sum(axis=1)
        return counts / nb.shape[1]

    def predict(self, Q):
        return np.argmax(self.predict_proba(Q), axis=1)


def knn_predict(model: KNNClassifier, feature) -> tuple[int, np.ndarray]:
    nb = model.neighbors(feature)[0]
    votes = np.bincount(model.y[nb], minlength=model.n_classes)
    return int(np.argmax(votes)), nb


@dataclass(eq=False)
class TreeClassifier:
    tree: DecisionTreeClassifier
    n_classes: int

    def predict_proba(self, X):
        p = self.tree.predict_proba(np.asarray(X, dtype=np.float64))
        out = np.zeros((len(p), self.n_classes))
        out[:, self.tree.classes_] = p
        return out

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    @property
    def depth(self) -> int:
        return int(self.tree.get_depth())


@dataclass(frozen=True)
class ClassifierConfig:
    knn_k: int = 15
    tree_max_depth: int = 12
    mlp: MLPConfig = field(default_factory=MLPConfig)
    seed: int = 0


def train_classifier(features, labels, kind: str = "MLP", cfg: ClassifierConfig | None = None, n_classes=None):
    """Fit a DT, KNN or MLP baseline on homogeneous feature rows."""
    cfg = cfg or ClassifierConfig()
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or not len(X):
        raise ValueError("features must be a nonempty 2-D array")
    y, n_classes = _check_labels(labels, n_classes)
    if len(X) != len(y):
        raise ValueError(f"{len(X)} feature rows for {len(y)} labels")
    if kind == "MLP":
        return _train_mlp(X, y, n_classes, replace(cfg.mlp, seed=cfg.seed))
    if kind == "KNN":
        return KNNClassifier(cfg.knn_k, X.copy(), y.copy(), n_classes)
    if kind == "DT":
        tree = DecisionTreeClassifier(criterion="gini", max_depth=cfg.tree_max_depth, random_state=cfg.seed % 2**32)
        tree.fit(X, y)
        return TreeClassifier(tree, n_classes)
    raise ValueError(f"unknown classifier kind {kind!r} (expected DT, KNN or MLP)")


# --------------------------------------------------------------------------
# adaptive-weight classifier


@dataclass(eq=False)
class AdaptiveClassifier:
    W_a: np.ndarray
    b_a: float
    head: MLP
    n_classes: int
    mode: str = "Dynamic"
    history: list = field(default_factory=list)

    def pooled(self, X: np.ndarray) -> np.ndarray:
        return aggregate_batch(X, self.mode, self.W_a, self.b_a)

    def predict_proba_embedded(self, X: np.ndarray) -> np.ndarray:
        return softmax(self.head.forward(self.pooled(X))[0])

    def predict_proba(self, lists: np.ndarray, E: np.ndarray) -> np.ndarray:
        return self.predict_proba_embedded(E[np.asarray(lists, dtype=np.int64)])

    def predict(self, lists: np.ndarray, E: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(lists, E), axis=1)


def adaptive_loss_and_grad(params: dict, head: MLP, X: np.ndarray, y: np.ndarray, mode: str = "Dynamic"):
    """Cross-entropy of the pooled-embedding classifier and its full gradient.

    ``params`` holds ``W_a``, ``b_a`` (shape (1,)) and the head's ``W{k}``/``b{k}``.
    """
    w = _weights_batch(X, mode, params["W_a"], params["b_a"][0])
    u = _pool(w, X)
    logits, acts = head.forward(u, params)
    loss, d, _ = _softmax_ce_grad(logits, y)
    grads, du = head.backward(acts, d, params)
    if mode == "Dynamic":
        dw = np.einsum("bkd,bd->bk", X, du)
        ds = w * (dw - np.sum(w * dw, axis=1, keepdims=True))
        grads["W_a"] = np.einsum("bk,bkd->d", ds, X)
        grads["b_a"] = np.array([ds.sum()])
    else:
        grads["W_a"] = np.zeros_like(params["W_a"])
        grads["b_a"] = np.zeros(1)
    return loss, grads


def train_adaptive(
    lists: np.ndarray,
    E: np.ndarray,
    labels,
    cfg: MLPConfig | None = None,
    mode: str = "Dynamic",
    freeze_weights: bool = False,
    n_classes=None,
) -> AdaptiveClassifier:
    """Jointly fit W_a, b_a and an MLP head (hidden width 2*dim by default).

    ``lists`` is a (n, K) array of item indices into the (N, dim) matrix ``E``;
    ``labels`` are class codes of the same n users.
    """
    if mode not in AGGREGATION_MODES:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    lists = np.asarray(lists, dtype=np.int64)
    E = np.asarray(E, dtype=np.float64)
    y, n_classes = _check_labels(labels, n_classes)
    if len(lists) != len(y):
        raise ValueError(f"{len(lists)} lists for {len(y)} labels")
    dim = E.shape[1]
    cfg = cfg or MLPConfig(hidden=(2 * dim,))
    head = MLP((dim, *cfg.hidden, n_classes), np.random.default_rng([cfg.seed, 0]))
    params = dict(head.params)
    if freeze_weights:
        params["W_a"] = np.zeros(dim)
    else:
        params["W_a"] = np.random.default_rng([cfg.seed, 3]).normal(0.0, 0.01, dim)
    params["b_a"] = np.zeros(1)
    frozen = ("W_a", "b_a") if freeze_weights or mode != "Dynamic" else ()

    def loss_grad(p, idx):
        return adaptive_loss_and_grad(p, head, E[lists[idx]], y[idx], mode)

    def logits(p, idx):
        X = E[lists[idx]]
        u = _pool(_weights_batch(X, mode, p["W_a"], p["b_a"][0]), X)
        return head.forward(u, p)[0]

    best, history = _fit_loop(len(lists), y, n_classes, cfg, params, loss_grad, logits, frozen=frozen)
    head_params = {k: v for k, v in best.items() if k not in ("W_a", "b_a")}
    return AdaptiveClassifier(best["W_a"], float(best["b_a"][0]), MLP(head.sizes, params=head_params), n_classes, mode, history)


def predict_attribute(classifier, rec_list, E) -> tuple[int, np.ndarray]:
    """Label code and class probabilities for one list.

    ``E`` is the item matrix (adaptive classifier) or the item count N for a
    multi-hot baseline; any other baseline takes a ready feature vector.
    """
    if isinstance(classifier, AdaptiveClassifier):
        X = _list_embeddings(rec_list, E)
        p = classifier.predict_proba_embedded(X[None])[0]
    elif isinstance(E, (int, np.integer)):
        p = classifier.predict_proba(featurize_scenario1(rec_list, int(E))[None])[0]
    else:
        p = classifier.predict_proba(np.asarray(rec_list, dtype=np.float64)[None])[0]
    return int(np.argmax(p)), p
