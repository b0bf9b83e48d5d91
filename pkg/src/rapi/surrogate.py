"""Surrogate confirmation: pick the candidate recommender whose lists best match
the observed lists of the original system (recommendation-list similarity)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import Dataset, Split
from .recsys import KINDS, RecommenderModel, TrainConfig, TrainingDiverged, topk_lists, train_recommender

__all__ = ["RecListSet", "SurrogateReport", "compute_rls", "confirm_surrogate", "provider_lists"]

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class RecListSet:
    """Ordered top-K lists; row ``k`` of ``items`` is the list of ``users[k]``."""

    K: int
    users: np.ndarray
    items: np.ndarray

    def __post_init__(self):
        users = np.asarray(self.users, dtype=np.int64)
        items = np.asarray(self.items, dtype=np.int64).reshape(len(users), -1)
        if items.shape[1] != self.K:
            raise ValueError(f"lists have length {items.shape[1]}, expected K={self.K}")
        if len(np.unique(users)) != len(users):
            raise ValueError("a user appears twice in the list set")
        srt = np.sort(items, axis=1)
        if self.K > 1 and np.any(srt[:, 1:] == srt[:, :-1]):
            raise ValueError("a recommendation list repeats an item")
        users.setflags(write=False)
        items.setflags(write=False)
        object.__setattr__(self, "users", users)
        object.__setattr__(self, "items", items)

    @classmethod
    def from_dict(cls, lists: Mapping[int, Sequence[int]]) -> "RecListSet":
        users = sorted(lists)
        rows = [list(lists[u]) for u in users]
        k = len(rows[0]) if rows else 0
        return cls(k, np.array(users, dtype=np.int64), np.array(rows, dtype=np.int64).reshape(len(users), k))

    def as_dict(self) -> dict[int, tuple[int, ...]]:
        return {int(u): tuple(int(i) for i in row) for u, row in zip(self.users, self.items)}

    def __len__(self):
        return len(self.users)

    def positions(self, users) -> np.ndarray:
        lookup = {int(u): k for k, u in enumerate(self.users)}
        try:
            return np.array([lookup[int(u)] for u in users], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"user {exc.args[0]} has no list") from None

    def for_users(self, users) -> "RecListSet":
        users = np.asarray(users, dtype=np.int64)
        return RecListSet(self.K, users, self.items[self.positions(users)])

    def row(self, user: int) -> np.ndarray:
        return self.items[self.positions([user])[0]]


def _overlap(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a[:, :, None] == b[:, None, :]).any(axis=2).sum(axis=1)


def compute_rls(original: RecListSet, candidate: RecListSet, users=None, strict_k: bool = True) -> float:
    """Mean over users of |z ∩ ẑ| / |z| (set overlap, order-insensitive).

    With ``strict_k=False`` candidate lists may differ in length from the
    originals; the denominator is always the original list length.
    """
    if strict_k and original.K != candidate.K:
        raise ValueError(f"list length mismatch: original K={original.K}, candidate K={candidate.K}")
    users = original.users if users is None else np.asarray(users, dtype=np.int64)
    if not len(users):
        raise ValueError("no users to compare")
    z = original.items[original.positions(users)]
    z_hat = candidate.items[candidate.positions(users)]
    return float(np.mean(_overlap(z, z_hat) / original.K))


@dataclass
class SurrogateReport:
    rls: dict[str, float]
    chosen: str
    K: int
    failures: dict[str, str] = field(default_factory=dict)
    note: str = ""

    def to_tsv(self) -> str:
        lines = ["kind\trls\tchosen"]
        for kind in sorted(self.rls, key=_kind_rank):
            lines.append(f"{kind}\t{self.rls[kind]:.6f}\t{int(kind == self.chosen)}")
        for kind, msg in sorted(self.failures.items()):
            lines.append(f"{kind}\tnan\t0\t# failed: {msg}")
        return "\n".join(lines) + "\n"


def _kind_rank(kind: str) -> int:
    return KINDS.index(kind) if kind in KINDS else len(KINDS)


def provider_lists(model: RecommenderModel, dataset: Dataset, split: Split, users, K: int) -> RecListSet:
    """Top-K lists for ``users`` excluding their training interactions."""
    users = np.asarray(users, dtype=np.int64)
    known = dataset.interaction_mask(split.train)[users]
    return RecListSet(K, users, topk_lists(model, users, K, known))


def confirm_surrogate(
    dataset: Dataset,
    split: Split,
    candidates: Sequence[tuple[str, TrainConfig]],
    original_lists: RecListSet,
    providers,
) -> tuple[SurrogateReport, RecommenderModel]:
    """Train each candidate on provider data and keep the one with the highest rls.

    Ties go to the earlier kind in ``KINDS`` order. A candidate whose training
    fails is recorded in the report and excluded.
    """
    if not candidates:
        raise ValueError("no candidate recommenders given")
    providers = np.asarray(providers, dtype=np.int64)
    if not len(providers):
        raise ValueError("surrogate confirmation needs at least one interaction provider")
    K = original_lists.K
    rls, models, failures = {}, {}, {}
    for kind, cfg in candidates:
        try:
            model = train_recommender(dataset, split, cfg, kind, users=providers)
            lists = provider_lists(model, dataset, split, providers, K)
        except (TrainingDiverged, ValueError) as exc:
            log.warning("surrogate candidate %s failed: %s", kind, exc)
            failures[kind] = str(exc)
            continue
        rls[kind] = compute_rls(original_lists, lists, providers)
        models[kind] = model
    if not rls:
        raise RuntimeError(f"every surrogate candidate failed: {failures}")
    chosen = min(rls, key=lambda k: (-rls[k], _kind_rank(k)))
    return SurrogateReport(rls, chosen, K, failures), models[chosen]
