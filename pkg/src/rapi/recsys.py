"""Small implicit-feedback recommenders trained with BPR and hand-derived gradients.

Four architectures share one training loop:

* ``MF``: score = <p_u, q_i>.
* ``NeuMF``: shared factors feed a GMF branch ``a . (p*q)`` and a one-hidden-layer
  ReLU tower of width 2L over ``[p; q]``; the two are summed.
* ``NGCF``: message passing ``LeakyReLU((A+I) E W1 + ((A E) * E) W2)`` per layer,
  final embedding is the mean of all layer outputs.
* ``LightGCN``: ``E_l = A E_{l-1}`` without weights, final embedding is the mean
  of layers ``0..L``.

``A`` is the symmetrically normalised user-item bipartite adjacency of the
training interactions.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .core import Dataset, Split
from .ingest import EmbeddingTable, load_embedding_table, write_embedding_table
from .optim import make_optimizer

__all__ = [
    "KINDS",
    "TrainConfig",
    "RecommenderModel",
    "TrainingDiverged",
    "normalized_adjacency",
    "init_params",
    "loss_and_grad",
    "train_recommender",
    "recommend_topk",
    "topk_lists",
    "score",
    "score_matrix",
    "export_item_embeddings",
    "hit_rate",
    "save_model",
    "load_model",
]

log = logging.getLogger(__name__)

KINDS = ("MF", "NeuMF", "NGCF", "LightGCN")
GRAPH_KINDS = ("NGCF", "LightGCN")
LEAKY_SLOPE = 0.2


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    dim: int = 64
    learning_rate: float = 0.01
    batch_size: int = 1024
    max_epochs: int = 500
    patience: int = 10
    eval_every: int = 5
    eval_k: int = 20
    negatives_per_positive: int = 1
    layers: int = 2
    reg: float = 1e-4
    init_std: float = 0.1
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1 or self.batch_size < 1 or self.max_epochs < 0 or self.layers < 0:
            raise ValueError(f"invalid training config {self}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.patience < 1 or self.eval_every < 1 or self.negatives_per_positive < 1:
            raise ValueError("patience, eval_every and negatives_per_positive must be >= 1")


# --------------------------------------------------------------------------
# graph + parameters


def normalized_adjacency(n_users: int, n_items: int, users, items) -> sp.csr_matrix:
    """D^-1/2 A D^-1/2 over the (n_users + n_items) bipartite graph."""
    n = n_users + n_items
    rows = np.concatenate([users, items + n_users])
    cols = np.concatenate([items + n_users, users])
    a = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    a.sum_duplicates()
    a.data[:] = 1.0
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv = np.zeros_like(deg)
    inv[deg > 0] = deg[deg > 0] ** -0.5
    d = sp.diags(inv)
    return (d @ a @ d).tocsr()


def init_params(kind: str, n_users: int, n_items: int, cfg: TrainConfig, rng: np.random.Generator) -> dict:
    if kind not in KINDS:
        raise ValueError(f"unknown recommender kind {kind!r} (expected one of {KINDS})")
    L = cfg.dim
    p = {
        "user": rng.normal(0.0, cfg.init_std, (n_users, L)),
        "item": rng.normal(0.0, cfg.init_std, (n_items, L)),
    }
    if kind == "NeuMF":
        p["gmf_w"] = np.ones(L)
        p["mlp_w1"] = rng.normal(0.0, np.sqrt(1.0 / (2 * L)), (2 * L, 2 * L))
        p["mlp_b1"] = np.zeros(2 * L)
        p["mlp_out"] = rng.normal(0.0, np.sqrt(1.0 / (2 * L)), 2 * L)
    elif kind == "NGCF":
        std = np.sqrt(1.0 / L)
        for layer in range(cfg.layers):
            p[f"w1_{layer}"] = rng.normal(0.0, std, (L, L))
            p[f"w2_{layer}"] = rng.normal(0.0, std, (L, L))
    return p


def _leaky(x):
    return np.where(x > 0, x, LEAKY_SLOPE * x)


def _propagate(kind: str, params: dict, adj, layers: int, keep_cache: bool = False):
    """Final node embeddings (users stacked over items) and a backward cache."""
    e = np.vstack([params["user"], params["item"]])
    outs = [e]
    cache = []
    for layer in range(layers):
        ae = adj @ e
        if kind == "LightGCN":
            e = ae
        else:
            side = ae + e
            inter = ae * e
            pre = side @ params[f"w1_{layer}"] + inter @ params[f"w2_{layer}"]
            if keep_cache:
                cache.append((outs[-1], ae, side, inter, pre))
            e = _leaky(pre)
        outs.append(e)
    return sum(outs) / len(outs), cache


def _propagate_backward(kind: str, params: dict, adj, layers: int, g_final, cache, grads: dict):
    """Turn dLoss/d(final embeddings) into gradients of the ego embeddings (+ NGCF weights)."""
    scale = 1.0 / (layers + 1)
    g_layer = g_final * scale
    g_ego = g_layer.copy()
    if kind == "LightGCN":
        g = g_layer
        for _ in range(layers):
            g = adj.T @ g
            g_ego += g
    else:
        g_next = np.zeros_like(g_final)
        for layer in reversed(range(layers)):
            e_prev, ae, side, inter, pre = cache[layer]
            g_out = g_layer + g_next  # gradient w.r.t. output of this layer
            d_pre = g_out * np.where(pre > 0, 1.0, LEAKY_SLOPE)
            w1, w2 = params[f"w1_{layer}"], params[f"w2_{layer}"]
            grads[f"w1_{layer}"] = side.T @ d_pre
            grads[f"w2_{layer}"] = inter.T @ d_pre
            d_side = d_pre @ w1.T
            d_inter = d_pre @ w2.T
            d_e = d_side + adj.T @ d_side + adj.T @ (d_inter * e_prev) + d_inter * ae
            g_next = d_e
        g_ego = g_layer + g_next
    n_users = params["user"].shape[0]
    grads["user"] = grads.get("user", 0) + g_ego[:n_users]
    grads["item"] = grads.get("item", 0) + g_ego[n_users:]


def _neumf_scores(params, p, q):
    """Scores for paired rows of p and q plus the cache needed for backward."""
    n = p.shape[1]
    x = np.concatenate([p, q], axis=1)
    z = x @ params["mlp_w1"].T + params["mlp_b1"]
    h = np.maximum(z, 0.0)
    s = (p * q) @ params["gmf_w"] + h @ params["mlp_out"]
    return s, (x, z, h, n)


def _neumf_backward(params, p, q, ds, cache, grads):
    x, z, h, n = cache
    grads["gmf_w"] += (p * q).T @ ds
    dg = ds[:, None] * params["gmf_w"][None, :]
    dp = dg * q
    dq = dg * p
    grads["mlp_out"] += h.T @ ds
    dz = ds[:, None] * params["mlp_out"][None, :] * (z > 0)
    grads["mlp_w1"] += dz.T @ x
    grads["mlp_b1"] += dz.sum(axis=0)
    dx = dz @ params["mlp_w1"]
    return dp + dx[:, :n], dq + dx[:, n:]


def loss_and_grad(kind: str, params: dict, adj, layers: int, users, pos, neg, reg: float):
    """Mean BPR loss over the (user, pos, neg) triples, with L2 on ego embeddings."""
    b = len(users)
    grads = {name: np.zeros_like(v) for name, v in params.items()}
    pu, qi, qj = params["user"][users], params["item"][pos], params["item"][neg]
    reg_loss = 0.5 * reg * (np.sum(pu * pu) + np.sum(qi * qi) + np.sum(qj * qj)) / b

    if kind == "NeuMF":
        s_pos, c_pos = _neumf_scores(params, pu, qi)
        s_neg, c_neg = _neumf_scores(params, pu, qj)
    elif kind == "MF":
        s_pos = np.sum(pu * qi, axis=1)
        s_neg = np.sum(pu * qj, axis=1)
    else:
        final, cache = _propagate(kind, params, adj, layers, keep_cache=True)
        n_users = params["user"].shape[0]
        fu, fi, fj = final[users], final[n_users + pos], final[n_users + neg]
        s_pos = np.sum(fu * fi, axis=1)
        s_neg = np.sum(fu * fj, axis=1)

    x = s_pos - s_neg
    loss = float(np.mean(np.logaddexp(0.0, -x))) + reg_loss
    dx = -0.5 * (1.0 - np.tanh(0.5 * x)) / b  # -sigmoid(-x) / b, overflow-free

    if kind == "NeuMF":
        dp1, dq1 = _neumf_backward(params, pu, qi, dx, c_pos, grads)
        dp2, dq2 = _neumf_backward(params, pu, qj, -dx, c_neg, grads)
        np.add.at(grads["user"], users, dp1 + dp2)
        np.add.at(grads["item"], pos, dq1)
        np.add.at(grads["item"], neg, dq2)
    elif kind == "MF":
        np.add.at(grads["user"], users, dx[:, None] * (qi - qj))
        np.add.at(grads["item"], pos, dx[:, None] * pu)
        np.add.at(grads["item"], neg, -dx[:, None] * pu)
    else:
        g_final = np.zeros_like(final)
        np.add.at(g_final, users, dx[:, None] * (fi - fj))
        np.add.at(g_final, n_users + pos, dx[:, None] * fu)
        np.add.at(g_final, n_users + neg, -dx[:, None] * fu)
        grads["user"] = np.zeros_like(params["user"])
        grads["item"] = np.zeros_like(params["item"])
        _propagate_backward(kind, params, adj, layers, g_final, cache, grads)

    np.add.at(grads["user"], users, (reg / b) * pu)
    np.add.at(grads["item"], pos, (reg / b) * qi)
    np.add.at(grads["item"], neg, (reg / b) * qj)
    return loss, grads


# --------------------------------------------------------------------------
# model


@dataclass(eq=False)
class RecommenderModel:
    kind: str
    params: dict
    config: TrainConfig
    users: tuple
    items: tuple
    train_edges: np.ndarray  # (n, 2) dense (user, item) pairs the graph is built from
    history: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown recommender kind {self.kind!r}")
        if self.params["user"].shape[1] != self.params["item"].shape[1]:
            raise ValueError("user and item embeddings must share a dimension")
        for name, v in self.params.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"parameter {name} is not finite")
            v.setflags(write=False)
        self._factors = None

    @property
    def n_users(self) -> int:
        return self.params["user"].shape[0]

    @property
    def n_items(self) -> int:
        return self.params["item"].shape[0]

    @property
    def dim(self) -> int:
        return self.params["user"].shape[1]

    def adjacency(self):
        return normalized_adjacency(self.n_users, self.n_items, self.train_edges[:, 0], self.train_edges[:, 1])

    def factors(self) -> tuple[np.ndarray, np.ndarray]:
        """Final (propagated for graph kinds) user and item matrices."""
        if self._factors is None:
            if self.kind in GRAPH_KINDS:
                final, _ = _propagate(self.kind, self.params, self.adjacency(), self.config.layers)
                self._factors = (final[: self.n_users], final[self.n_users :])
            else:
                self._factors = (self.params["user"], self.params["item"])
        return self._factors

    @property
    def user_emb(self) -> EmbeddingTable:
        return EmbeddingTable.from_matrix(self.factors()[0], self.users)

    @property
    def item_emb(self) -> EmbeddingTable:
        return EmbeddingTable.from_matrix(self.factors()[1], self.items)


def _check_user(model, user):
    if not 0 <= int(user) < model.n_users:
        raise KeyError(f"unknown user index {user}")


def score_matrix(model: RecommenderModel, users) -> np.ndarray:
    """Scores of every item for each of ``users`` (dense indices)."""
    users = np.asarray(users, dtype=np.int64)
    if model.kind != "NeuMF":
        U, I = model.factors()
        return U[users] @ I.T
    p = model.params
    L = model.dim
    w1u, w1i = p["mlp_w1"][:, :L], p["mlp_w1"][:, L:]
    item_part = p["item"] @ w1i.T + p["mlp_b1"]
    out = np.empty((len(users), model.n_items))
    chunk = max(1, 4_000_000 // max(1, model.n_items * 2 * L))
    for s in range(0, len(users), chunk):
        pu = p["user"][users[s : s + chunk]]
        z = (pu @ w1u.T)[:, None, :] + item_part[None, :, :]
        mlp = np.maximum(z, 0.0) @ p["mlp_out"]
        out[s : s + chunk] = (pu * p["gmf_w"]) @ p["item"].T + mlp
    return out


def score(model: RecommenderModel, user: int, item: int) -> float:
    _check_user(model, user)
    if not 0 <= int(item) < model.n_items:
        raise KeyError(f"unknown item index {item}")
    return float(score_matrix(model, [user])[0, item])


def topk_lists(model: RecommenderModel, users, K: int, exclude: np.ndarray | None = None) -> np.ndarray:
    """Top-K item indices per user, descending score, ties by ascending item index.

    ``exclude`` is an optional boolean (len(users), N) mask of items to skip.
    """
    users = np.asarray(users, dtype=np.int64)
    n = model.n_items
    if exclude is not None and len(users):
        room = n - exclude.sum(axis=1).max()
    else:
        room = n
    if K > room:
        raise ValueError(f"K={K} exceeds the {room} items available after exclusion")
    out = np.empty((len(users), K), dtype=np.int64)
    for s in range(0, len(users), 1024):
        sc = score_matrix(model, users[s : s + 1024])
        if exclude is not None:
            sc = np.where(exclude[s : s + 1024], -np.inf, sc)
        out[s : s + 1024] = np.argsort(-sc, axis=1, kind="stable")[:, :K]
    return out


def recommend_topk(model: RecommenderModel, user: int, K: int, exclude=()) -> list[int]:
    _check_user(model, user)
    mask = np.zeros((1, model.n_items), dtype=bool)
    mask[0, list(exclude)] = True
    return topk_lists(model, [user], K, mask)[0].tolist()


def export_item_embeddings(model: RecommenderModel) -> EmbeddingTable:
    return model.item_emb


def hit_rate(model: RecommenderModel, known: np.ndarray, heldout: np.ndarray, K: int) -> float:
    """Fraction of users with held-out items that get >=1 of them in their top-K.

    ``known`` and ``heldout`` are boolean user x item masks; known items are
    excluded from the ranking.
    """
    users = np.flatnonzero(heldout.any(axis=1))
    if not len(users):
        return float("nan")
    k = min(K, model.n_items - int(known[users].sum(axis=1).max()))
    lists = topk_lists(model, users, k, known[users])
    return float(np.mean(np.take_along_axis(heldout[users], lists, axis=1).any(axis=1)))


# --------------------------------------------------------------------------
# training


def _sample_negatives(rng, users, known: np.ndarray) -> np.ndarray:
    n_items = known.shape[1]
    neg = rng.integers(0, n_items, size=len(users))
    bad = known[users, neg]
    while bad.any():
        idx = np.flatnonzero(bad)
        neg[idx] = rng.integers(0, n_items, size=len(idx))
        bad[idx] = known[users[idx], neg[idx]]
    return neg


def train_recommender(
    dataset: Dataset, split: Split, cfg: TrainConfig, kind: str, users=None
) -> RecommenderModel:
    """Fit ``kind`` with minibatch BPR and early stopping on validation hit-rate@K.

    ``users`` restricts training and validation to those users' interactions
    (the analyst's view of provider histories). Weights are binarised.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown recommender kind {kind!r} (expected one of {KINDS})")
    train_idx = np.asarray(split.train)
    val_idx = np.asarray(split.validation)
    if users is not None:
        allowed = np.zeros(dataset.n_users, dtype=bool)
        allowed[np.asarray(users, dtype=np.int64)] = True
        train_idx = train_idx[allowed[dataset.user_idx[train_idx]]]
        val_idx = val_idx[allowed[dataset.user_idx[val_idx]]]
    if not len(train_idx):
        raise ValueError("training split is empty")

    M, N = dataset.n_users, dataset.n_items
    tu = dataset.user_idx[train_idx]
    ti = dataset.item_idx[train_idx]
    known = dataset.interaction_mask(train_idx)
    heldout = dataset.interaction_mask(val_idx) & ~known
    # users who interacted with every item cannot yield negatives
    usable = ~known.all(axis=1)[tu]
    tu, ti = tu[usable], ti[usable]
    if not len(tu):
        raise ValueError("no training interaction admits a negative sample")

    init_rng = np.random.default_rng([cfg.seed, 0])
    sample_rng = np.random.default_rng([cfg.seed, 1])
    params = init_params(kind, M, N, cfg, init_rng)
    adj = normalized_adjacency(M, N, tu, ti) if kind in GRAPH_KINDS else None
    opt = make_optimizer(cfg.optimizer, cfg.learning_rate)
    edges = np.stack([tu, ti], axis=1)

    def snapshot():
        return {k: v.copy() for k, v in params.items()}

    history = {"loss": [], "val_hit_rate": []}
    best, best_score, bad_evals = snapshot(), -np.inf, 0
    pos_u = np.repeat(tu, cfg.negatives_per_positive)
    pos_i = np.repeat(ti, cfg.negatives_per_positive)
    for epoch in range(1, cfg.max_epochs + 1):
        order = sample_rng.permutation(len(pos_u))
        neg = _sample_negatives(sample_rng, pos_u[order], known)
        total = 0.0
        for s in range(0, len(order), cfg.batch_size):
            sel = order[s : s + cfg.batch_size]
            loss, grads = loss_and_grad(
                kind, params, adj, cfg.layers, pos_u[sel], pos_i[sel], neg[s : s + cfg.batch_size], cfg.reg
            )
            if not np.isfinite(loss):
                raise TrainingDiverged(f"{kind}: non-finite loss at epoch {epoch}, batch {s // cfg.batch_size}")
            total += loss * len(sel)
            opt.step(params, grads)
        history["loss"].append(total / len(order))
        if heldout.any() and epoch % cfg.eval_every == 0:
            probe = RecommenderModel(kind, snapshot(), cfg, dataset.users, dataset.items, edges)
            hr = hit_rate(probe, known, heldout, cfg.eval_k)
            history["val_hit_rate"].append((epoch, hr))
            if hr > best_score:
                best, best_score, bad_evals = probe.params, hr, 0
            else:
                bad_evals += 1
                if bad_evals >= cfg.patience:
                    log.debug("%s: early stop at epoch %d (best hr %.4f)", kind, epoch, best_score)
                    break
    if not heldout.any() or best_score == -np.inf:
        best = snapshot()
    history["best_val_hit_rate"] = None if best_score == -np.inf else float(best_score)
    return RecommenderModel(kind, {k: np.array(v) for k, v in best.items()}, cfg, dataset.users, dataset.items, edges, history)


# --------------------------------------------------------------------------
# checkpoints


def save_model(model: RecommenderModel, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, v in model.params.items():
        write_embedding_table(EmbeddingTable.from_matrix(v.reshape(len(v), -1) if v.ndim > 1 else v[None, :]), d / f"{name}.emb")
    write_embedding_table(EmbeddingTable.from_matrix(model.train_edges.astype(float)), d / "edges.emb")
    manifest = {
        "kind": model.kind,
        "n_users": model.n_users,
        "n_items": model.n_items,
        "dim": model.dim,
        "config": asdict(model.config),
        "seed": model.config.seed,
        "params": {name: list(v.shape) for name, v in model.params.items()},
        "users": list(model.users),
        "items": list(model.items),
        "history": model.history,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, default=float))


def load_model(directory) -> RecommenderModel:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    params = {}
    for name, shape in manifest["params"].items():
        params[name] = np.array(load_embedding_table(d / f"{name}.emb").vectors).reshape(shape)
    edges = np.array(load_embedding_table(d / "edges.emb").vectors, dtype=np.int64)
    cfg = replace(TrainConfig(), **manifest["config"])
    return RecommenderModel(
        manifest["kind"], params, cfg, tuple(manifest["users"]), tuple(manifest["items"]), edges, manifest["history"]
    )
