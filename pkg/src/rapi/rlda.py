"""Embedding alignment, unified item embeddings and recommendation-list augmentation.

Content embeddings are mapped into the surrogate's latent space by an affine
map fitted with mean squared error. Items the surrogate knows keep their
surrogate vectors; every other item gets its aligned content vector. Lists are
then extended with the candidates whose mean Euclidean distance (``res``) to
the list items is smallest.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .ingest import EmbeddingTable
from .optim import make_optimizer
from .surrogate import RecListSet

__all__ = [
    "AlignConfig",
    "AlignmentModel",
    "UnifiedEmbedding",
    "alignment_loss_and_grad",
    "train_alignment",
    "apply_alignment",
    "train_cooccurrence_alignment",
    "unify_embeddings",
    "item_distance",
    "res",
    "mean_res",
    "augment_list",
    "augment_lists",
    "write_augmented",
]

ALIGN_KINDS = ("linear", "autoencoder")


@dataclass(frozen=True)
class AlignConfig:
    kind: str = "linear"
    learning_rate: float = 0.01
    epochs: int = 3000
    optimizer: str = "adam"
    holdout: float = 0.1
    recon_weight: float = 1.0
    init_std: float = 0.01
    tol: float = 1e-12
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ALIGN_KINDS:
            raise ValueError(f"unknown alignment kind {self.kind!r} (expected one of {ALIGN_KINDS})")
        if not 0.0 <= self.holdout < 1.0:
            raise ValueError("holdout must lie in [0, 1)")


@dataclass(frozen=True, eq=False)
class AlignmentModel:
    """Affine map ``W e + B``; the autoencoder kind also carries a decoder."""

    W: np.ndarray
    B: np.ndarray
    kind: str = "linear"
    decoder: dict = field(default_factory=dict)
    train_res: float = float("nan")
    holdout_res: float = float("nan")
    baseline_res: float = float("nan")

    def __post_init__(self):
        if self.W.ndim != 2 or self.B.shape != (self.W.shape[0],):
            raise ValueError(f"W {self.W.shape} and B {self.B.shape} are inconsistent")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.B))):
            raise ValueError("alignment parameters are not finite")

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64).reshape(-1, self.in_dim)
        return X @ self.W.T + self.B


def mean_res(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean Euclidean distance between paired rows."""
    if not len(pred):
        return float("nan")
    return float(np.mean(np.sqrt(np.sum((pred - target) ** 2, axis=1))))


def alignment_loss_and_grad(params: dict, C: np.ndarray, S: np.ndarray, kind: str = "linear", recon_weight: float = 1.0):
    """Mean over items of ||W c + B - s||^2 (plus decoder reconstruction for AE)."""
    n = len(C)
    Z = C @ params["W"].T + params["B"]
    R = Z - S
    loss = float(np.sum(R * R) / n)
    dZ = 2.0 * R / n
    grads = {}
    if kind == "autoencoder":
        Chat = Z @ params["D"].T + params["d"]
        Q = Chat - C
        loss += recon_weight * float(np.sum(Q * Q) / n)
        dChat = 2.0 * recon_weight * Q / n
        grads["D"] = dChat.T @ Z
        grads["d"] = dChat.sum(axis=0)
        dZ = dZ + dChat @ params["D"]
    grads["W"] = dZ.T @ C
    grads["B"] = dZ.sum(axis=0)
    return loss, grads


def _init_align(in_dim, out_dim, cfg: AlignConfig, rng):
    p = {"W": rng.normal(0.0, cfg.init_std, (out_dim, in_dim)), "B": np.zeros(out_dim)}
    if cfg.kind == "autoencoder":
        p["D"] = rng.normal(0.0, cfg.init_std, (in_dim, out_dim))
        p["d"] = np.zeros(in_dim)
    return p


def _fit(C, S, cfg: AlignConfig, rng) -> dict:
    params = _init_align(C.shape[1], S.shape[1], cfg, rng)
    opt = make_optimizer(cfg.optimizer, cfg.learning_rate)
    prev = np.inf
    for _ in range(cfg.epochs):
        loss, grads = alignment_loss_and_grad(params, C, S, cfg.kind, cfg.recon_weight)
        if not np.isfinite(loss):
            raise FloatingPointError("alignment training diverged")
        if prev - loss < cfg.tol * max(1.0, prev) and loss <= prev:
            break
        prev = loss
        opt.step(params, grads)
    return params


def train_alignment(content: EmbeddingTable, target: EmbeddingTable, cfg: AlignConfig | None = None) -> AlignmentModel:
    """Fit content -> target on the shared items, reporting holdout res.

    A random ``cfg.holdout`` share of the items is held out from fitting;
    ``baseline_res`` is the holdout res of predicting the training mean.
    """
    cfg = cfg or AlignConfig()
    if not len(target):
        raise ValueError("alignment needs at least one item with both embeddings")
    if set(content.ids) != set(target.ids):
        raise ValueError("content and target tables must cover the same items")
    ids = target.ids
    C = content.rows(ids)
    S = target.vectors
    rng = np.random.default_rng(cfg.seed)
    n = len(ids)
    n_hold = int(np.floor(cfg.holdout * n)) if n > 1 else 0
    perm = rng.permutation(n)
    hold, fit = perm[:n_hold], perm[n_hold:]
    params = _fit(C[fit], S[fit], cfg, rng)
    model = AlignmentModel(params["W"], params["B"], cfg.kind, {k: params[k] for k in ("D", "d") if k in params})
    return AlignmentModel(
        model.W,
        model.B,
        model.kind,
        model.decoder,
        train_res=mean_res(model.transform(C[fit]), S[fit]),
        holdout_res=mean_res(model.transform(C[hold]), S[hold]),
        baseline_res=mean_res(np.broadcast_to(S[fit].mean(axis=0), S[hold].shape), S[hold]),
    )


def apply_alignment(model: AlignmentModel, content: EmbeddingTable) -> EmbeddingTable:
    if len(content) and content.dim != model.in_dim:
        raise ValueError(f"content dim {content.dim} != alignment input dim {model.in_dim}")
    out = model.transform(content.vectors) if len(content) else np.zeros((0, model.out_dim))
    return EmbeddingTable.from_matrix(out, content.ids)


def _pca(X: np.ndarray, k: int) -> np.ndarray:
    Xc = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(Xc, full_matrices=False)
    proj = Xc @ vt[:k].T
    if proj.shape[1] < k:
        proj = np.hstack([proj, np.zeros((len(X), k - proj.shape[1]))])
    return proj


def train_cooccurrence_alignment(
    content: EmbeddingTable, lists: RecListSet, dim: int, cfg: AlignConfig | None = None, rounds: int = 2
) -> AlignmentModel:
    """Alignment when no surrogate embeddings exist.

    Targets start as the top-``dim`` principal components of the content
    vectors. Each round, every listed item's target becomes the mean centroid
    of the lists containing it (centred and rescaled to the previous spread),
    and the affine map is refitted on those pseudo-targets. Lists index items
    by their row in ``content``.
    """
    cfg = cfg or AlignConfig()
    X = content.vectors
    n_items = len(X)
    cur = _pca(X, dim)
    rows = np.repeat(np.arange(len(lists)), lists.K)
    inc = sp.csr_matrix((np.ones(rows.size), (rows, lists.items.ravel())), shape=(len(lists), n_items))
    counts = np.asarray(inc.sum(axis=0)).ravel()
    listed = np.flatnonzero(counts > 0)
    if not len(listed):
        raise ValueError("no listed items to build co-occurrence targets from")
    ids = [content.ids[k] for k in listed]
    model = None
    for _ in range(max(1, rounds)):
        centroids = cur[lists.items].mean(axis=1)
        target = (inc.T @ centroids)[listed] / counts[listed, None]
        target -= target.mean(axis=0)
        spread = np.linalg.norm(cur[listed] - cur[listed].mean(axis=0))
        norm = np.linalg.norm(target)
        if norm > 0:
            target *= spread / norm
        model = train_alignment(
            EmbeddingTable.from_matrix(X[listed], ids), EmbeddingTable.from_matrix(target, ids), cfg
        )
        cur = model.transform(X)
    return model


# --------------------------------------------------------------------------
# unified embeddings


@dataclass(frozen=True, eq=False)
class UnifiedEmbedding:
    table: EmbeddingTable
    provenance: dict  # item id -> "surrogate" | "aligned"

    def __getitem__(self, key):
        return self.table[key]

    def __contains__(self, key):
        return key in self.table


def unify_embeddings(aligned: EmbeddingTable, surrogate: EmbeddingTable, items=None) -> UnifiedEmbedding:
    """Union of surrogate vectors (V_L) and aligned content vectors (V_V).

    ``items`` fixes the row order and must equal the union when given.
    """
    overlap = set(aligned.ids) & set(surrogate.ids)
    if overlap:
        raise ValueError(f"items present in both tables: {sorted(overlap, key=str)[:5]}")
    if len(aligned) and len(surrogate) and aligned.dim != surrogate.dim:
        raise ValueError(f"dimension mismatch: aligned {aligned.dim} vs surrogate {surrogate.dim}")
    dim = surrogate.dim if len(surrogate) else aligned.dim
    provenance = {i: "surrogate" for i in surrogate.ids}
    provenance.update({i: "aligned" for i in aligned.ids})
    if items is None:
        items = sorted(provenance, key=lambda x: (isinstance(x, str), x))
    else:
        items = list(items)
        if set(items) != set(provenance) or len(items) != len(provenance):
            raise ValueError("unified embedding must cover every item exactly once")
    src = {"surrogate": surrogate, "aligned": aligned}
    mat = np.zeros((len(items), dim))
    for row, item in enumerate(items):
        mat[row] = src[provenance[item]][item]
    return UnifiedEmbedding(EmbeddingTable.from_matrix(mat, items), {i: provenance[i] for i in items})


def _table(E) -> EmbeddingTable:
    return E.table if isinstance(E, UnifiedEmbedding) else E


def _distances(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """(len(X), len(Y)) Euclidean distances via explicit differences."""
    return np.sqrt(np.sum((X[:, None, :] - Y[None, :, :]) ** 2, axis=2))


def _mean_distance(C: np.ndarray, L: np.ndarray) -> np.ndarray:
    """res of every row of C against the list rows L.

    Distances are summed in sorted order so equal distance multisets give
    bit-identical sums whatever the list order.
    """
    return np.sort(_distances(C, L), axis=1).sum(axis=1) / len(L)


def item_distance(a, b, E) -> float:
    t = _table(E)
    return float(np.sqrt(np.sum((t[a] - t[b]) ** 2)))


def res(rec_list, candidate, E) -> float:
    """Mean Euclidean distance from ``candidate`` to the items of ``rec_list``."""
    rec_list = list(rec_list)
    if candidate in rec_list:
        raise ValueError(f"candidate {candidate!r} is already in the list")
    if not rec_list:
        raise ValueError("empty recommendation list")
    t = _table(E)
    return float(_mean_distance(t[candidate][None, :], t.rows(rec_list))[0])


def _append_order(res_all: np.ndarray, blocked: np.ndarray, n_new: int) -> np.ndarray:
    """Indices of the n_new smallest unblocked res values (ties by index).

    res is compared at 12 significant digits relative to the largest value, so
    equal means that were summed in a different order still count as ties.
    """
    open_res = res_all[~blocked]
    scale = float(np.max(np.abs(open_res))) if len(open_res) else 1.0
    key = np.round(res_all / (scale or 1.0), 12)
    key[blocked] = np.inf
    return np.argsort(key, kind="stable")[:n_new]


def augment_list(rec_list, E, K2: int, exclude=()) -> tuple[list, list[float]]:
    """Extend ``rec_list`` to length K2 with the lowest-res candidate items.

    Returns the augmented list (original order kept as prefix) and the res of
    each appended item. Candidates are the embedded items outside the list and
    outside ``exclude``.
    """
    rec_list = list(rec_list)
    K = len(rec_list)
    if K2 < K:
        raise ValueError(f"K2={K2} is shorter than the list (K={K})")
    if K2 == K:
        return rec_list, []
    t = _table(E)
    idx = t.index()
    blocked = np.zeros(len(t), dtype=bool)
    for item in (*rec_list, *exclude):
        if item in idx:
            blocked[idx[item]] = True
    n_new = K2 - K
    if (~blocked).sum() < n_new:
        raise ValueError(f"only {(~blocked).sum()} candidates for {n_new} open slots")
    if not K:
        raise ValueError("cannot augment an empty list")
    r = _mean_distance(t.vectors, t.rows(rec_list))
    order = _append_order(r, blocked, n_new)
    return rec_list + [t.ids[k] for k in order], [float(r[k]) for k in order]


def augment_lists(lists: RecListSet, E: np.ndarray, K2: int, exclude: np.ndarray | None = None):
    """Batch augmentation over dense item indices.

    ``E`` is the (N, d) unified matrix indexed by item index; ``exclude`` an
    optional boolean (len(lists), N) mask. Returns the K2 list set and the
    (len(lists), K2-K) res of the appended items.
    """
    K = lists.K
    if K2 < K:
        raise ValueError(f"K2={K2} is shorter than K={K}")
    n_new = K2 - K
    n_items = len(E)
    out = np.empty((len(lists), K2), dtype=np.int64)
    out[:, :K] = lists.items
    res_out = np.empty((len(lists), n_new))
    for row, items in enumerate(lists.items):
        blocked = np.zeros(n_items, dtype=bool) if exclude is None else exclude[row].copy()
        blocked[items] = True
        if (~blocked).sum() < n_new:
            raise ValueError(f"user {lists.users[row]}: only {(~blocked).sum()} candidates for {n_new} slots")
        if not n_new:
            continue
        r = _mean_distance(E, E[items])
        order = _append_order(r, blocked, n_new)
        out[row, K:] = order
        res_out[row] = r[order]
    return RecListSet(K2, lists.users, out), res_out


def write_augmented(path, lists: RecListSet, K: int, res_values: np.ndarray, user_ids=None, item_ids=None) -> None:
    """Tab-delimited rows: user_id, rank, item_id, source, res."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("user_id\trank\titem_id\tsource\tres\n")
        for row, (user, items) in enumerate(zip(lists.users, lists.items)):
            uid = user_ids[user] if user_ids is not None else int(user)
            for rank, item in enumerate(items, 1):
                iid = item_ids[item] if item_ids is not None else int(item)
                if rank <= K:
                    fh.write(f"{uid}\t{rank}\t{iid}\toriginal\t\n")
                else:
                    fh.write(f"{uid}\t{rank}\t{iid}\taugmented\t{float(res_values[row, rank - K - 1])!r}\n")
