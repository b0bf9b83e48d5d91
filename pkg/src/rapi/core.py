"""Domain types shared by every stage: datasets, splits, provider partitions, seeds.

Users and items are addressed internally by dense indices ``0..M-1`` and
``0..N-1``; ``Dataset.users`` / ``Dataset.items`` map those indices back to the
raw ids found in the input files.
"""

from __future__ import annotations

import hashlib
import math
import zlib
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping

import numpy as np

__all__ = [
    "Attribute",
    "Dataset",
    "Split",
    "ProviderPartition",
    "SeedPolicy",
    "split_dataset",
    "partition_providers",
    "derive_item_partition",
]


def _sort_key(raw_id):
    # ints before strings so mixed id columns still sort deterministically
    return (0, raw_id, "") if isinstance(raw_id, (int, np.integer)) else (1, 0, str(raw_id))


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Attribute:
    """One categorical user attribute with its interned label set."""

    name: str
    labels: tuple[str, ...]
    values: Mapping[Hashable, int]  # raw user id -> index into ``labels``

    def __post_init__(self):
        n = len(self.labels)
        if len(set(self.labels)) != n:
            raise ValueError(f"attribute {self.name!r}: duplicate labels")
        for user, code in self.values.items():
            if not 0 <= code < n:
                raise ValueError(f"attribute {self.name!r}: user {user!r} has code {code} outside label set")

    @classmethod
    def from_labels(cls, name: str, values: Mapping[Hashable, str], labels: Iterable[str] | None = None) -> "Attribute":
        label_set = tuple(labels) if labels is not None else tuple(sorted(set(values.values())))
        code = {lab: k for k, lab in enumerate(label_set)}
        return cls(name, label_set, {u: code[v] for u, v in values.items()})


@dataclass(frozen=True, eq=False)
class Dataset:
    """Interactions, per-user attribute labels and per-item metadata.

    Build instances with :meth:`from_records`, which interns ids, removes
    duplicate (user, item) pairs keeping the max weight, and checks invariants.
    """

    users: tuple
    items: tuple
    user_idx: np.ndarray
    item_idx: np.ndarray
    weight: np.ndarray
    timestamp: np.ndarray
    attributes: Mapping[str, Attribute] = field(default_factory=dict)
    item_meta: Mapping[Hashable, tuple[str, str]] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.user_idx)
        if not (len(self.item_idx) == len(self.weight) == len(self.timestamp) == n):
            raise ValueError("interaction columns differ in length")
        if n:
            if self.user_idx.min() < 0 or self.user_idx.max() >= len(self.users):
                raise ValueError("interaction references an unknown user")
            if self.item_idx.min() < 0 or self.item_idx.max() >= len(self.items):
                raise ValueError("interaction references an unknown item")
            pair = self.user_idx.astype(np.int64) * len(self.items) + self.item_idx
            if len(np.unique(pair)) != n:
                raise ValueError("duplicate (user, item) interaction")
            if not np.all(np.isfinite(self.weight)) or self.weight.min() < 0:
                raise ValueError("interaction weights must be finite and nonnegative")
        if len(set(self.users)) != len(self.users) or len(set(self.items)) != len(self.items):
            raise ValueError("user and item ids must be unique")
        for col in (self.user_idx, self.item_idx, self.weight, self.timestamp):
            col.setflags(write=False)

    @classmethod
    def from_records(
        cls,
        interactions: Iterable[tuple],
        attributes: Mapping[str, Attribute] | None = None,
        item_meta: Mapping[Hashable, tuple[str, str]] | None = None,
        users: Iterable[Hashable] | None = None,
        items: Iterable[Hashable] | None = None,
    ) -> "Dataset":
        """Build a dataset from ``(user, item[, weight[, timestamp]])`` tuples.

        Users/items not given explicitly are collected from the interactions,
        attribute tables and metadata, then sorted.
        """
        best: dict[tuple, tuple[float, int]] = {}
        for rec in interactions:
            u, i = rec[0], rec[1]
            w = float(rec[2]) if len(rec) > 2 else 1.0
            ts = int(rec[3]) if len(rec) > 3 else 0
            prev = best.get((u, i))
            if prev is None or w > prev[0]:
                best[(u, i)] = (w, ts)
        attributes = dict(attributes or {})
        item_meta = dict(item_meta or {})
        if users is None:
            pool = {u for u, _ in best}
            for attr in attributes.values():
                pool.update(attr.values)
            users = pool
        if items is None:
            items = {i for _, i in best} | set(item_meta)
        users = tuple(sorted(users, key=_sort_key))
        items = tuple(sorted(items, key=_sort_key))
        uix = {u: k for k, u in enumerate(users)}
        iix = {i: k for k, i in enumerate(items)}
        try:
            pairs = sorted(((uix[u], iix[i]), wt) for (u, i), wt in best.items())
        except KeyError as exc:
            raise ValueError(f"interaction references unknown id {exc.args[0]!r}") from None
        n = len(pairs)
        user_idx = np.fromiter((p[0][0] for p in pairs), dtype=np.int64, count=n)
        item_idx = np.fromiter((p[0][1] for p in pairs), dtype=np.int64, count=n)
        weight = np.fromiter((p[1][0] for p in pairs), dtype=np.float64, count=n)
        timestamp = np.fromiter((p[1][1] for p in pairs), dtype=np.int64, count=n)
        return cls(users, items, user_idx, item_idx, weight, timestamp, attributes, item_meta)

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def n_interactions(self) -> int:
        return len(self.user_idx)

    @property
    def density(self) -> float:
        if not self.n_users or not self.n_items:
            return 0.0
        return self.n_interactions / (self.n_users * self.n_items)

    def user_index(self) -> dict:
        return {u: k for k, u in enumerate(self.users)}

    def item_index(self) -> dict:
        return {i: k for k, i in enumerate(self.items)}

    def labels(self, name: str) -> np.ndarray:
        """Label codes per dense user index; -1 where the user has no label."""
        if name not in self.attributes:
            raise KeyError(f"attribute {name!r} not present (have: {sorted(self.attributes)})")
        attr = self.attributes[name]
        out = np.full(self.n_users, -1, dtype=np.int64)
        uix = self.user_index()
        for user, code in attr.values.items():
            if user in uix:
                out[uix[user]] = code
        return out

    def interaction_mask(self, subset: np.ndarray | None = None) -> np.ndarray:
        """Dense boolean user x item matrix for all or a subset of interactions."""
        mask = np.zeros((self.n_users, self.n_items), dtype=bool)
        sel = slice(None) if subset is None else subset
        mask[self.user_idx[sel], self.item_idx[sel]] = True
        return mask

    def categories(self) -> list:
        """Category per dense item index (None when the item has no metadata)."""
        return [self.item_meta[i][1] if i in self.item_meta else None for i in self.items]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.users, self.items)).encode())
        for col in (self.user_idx, self.item_idx, self.weight, self.timestamp):
            h.update(np.ascontiguousarray(col).tobytes())
        for name in sorted(self.attributes):
            attr = self.attributes[name]
            h.update(repr((name, attr.labels, sorted(attr.values.items(), key=lambda kv: _sort_key(kv[0])))).encode())
        h.update(repr(sorted(self.item_meta.items(), key=lambda kv: _sort_key(kv[0]))).encode())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.validation), len(self.test)


def split_dataset(dataset: Dataset, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> Split:
    """Uniform per-interaction split into train / validation / test index sets."""
    if dataset.n_interactions == 0:
        raise ValueError("cannot split an empty dataset")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three nonnegative fractions summing to 1, got {ratios}")
    n = dataset.n_interactions
    n_train = min(n, round(ratios[0] * n))
    n_val = min(n - n_train, round(ratios[1] * n))
    perm = np.random.default_rng(seed).permutation(n)
    parts = np.split(perm, [n_train, n_train + n_val])
    return Split(*(_frozen(np.sort(p)) for p in parts))


@dataclass(frozen=True)
class ProviderPartition:
    """Which users released interactions / attribute labels (dense user indices)."""

    alpha: float
    beta: float
    interaction_providers: np.ndarray
    attribute_providers: np.ndarray
    target_users: np.ndarray


def _count(fraction: float, m: int) -> int:
    # tolerate 0.7 * 10 == 7.000000000000001 style representation error
    return int(math.floor(fraction * m + 1e-9))


def partition_providers(dataset: Dataset, alpha: float, beta: float, seed: int = 0) -> ProviderPartition:
    """Draw floor(alpha*M) interaction providers and floor(beta*M) attribute providers.

    The two draws use independent permutations from one generator, so for a
    fixed seed the attribute providers for a smaller beta are a prefix of
    those for a larger beta.
    """
    for name, v in (("alpha", alpha), ("beta", beta)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {v}")
    m = dataset.n_users
    rng = np.random.default_rng(seed)
    perm_interactions = rng.permutation(m)
    perm_attributes = rng.permutation(m)
    inter = np.sort(perm_interactions[: _count(alpha, m)])
    attr = np.sort(perm_attributes[: _count(beta, m)])
    target = np.setdiff1d(np.arange(m), attr)
    return ProviderPartition(float(alpha), float(beta), _frozen(inter), _frozen(attr), _frozen(target))


def derive_item_partition(
    dataset: Dataset, partition: ProviderPartition, subset: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Split items into those touched by interaction providers (V_L) and the rest (V_V).

    ``subset`` restricts the interactions considered (e.g. the training split).
    """
    users = dataset.user_idx if subset is None else dataset.user_idx[subset]
    items = dataset.item_idx if subset is None else dataset.item_idx[subset]
    touched = np.isin(users, partition.interaction_providers)
    v_l = np.unique(items[touched])
    v_v = np.setdiff1d(np.arange(dataset.n_items), v_l)
    return v_l, v_v


_STAGE_CACHE: dict[str, int] = {}


@dataclass(frozen=True)
class SeedPolicy:
    """Derives independent per-stage seeds from one 64-bit master seed."""

    master_seed: int

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2**64:
            raise ValueError(f"master seed must be an unsigned 64-bit integer, got {self.master_seed}")

    def seed(self, stage: str, *extra: int) -> int:
        key = _STAGE_CACHE.setdefault(stage, zlib.crc32(stage.encode()))
        ss = np.random.SeedSequence(int(self.master_seed), spawn_key=(key, *map(int, extra)))
        return int(ss.generate_state(1, np.uint64)[0])

    def rng(self, stage: str, *extra: int) -> np.random.Generator:
        return np.random.default_rng(self.seed(stage, *extra))

    def trial(self, t: int) -> "SeedPolicy":
        """Seed policy for the t-th repeated trial."""
        return SeedPolicy(self.seed("trial", t))

    @property
    def split(self) -> int:
        return self.seed("split")

    @property
    def partition(self) -> int:
        return self.seed("partition")

    @property
    def model_init(self) -> int:
        return self.seed("model-init")

    @property
    def perturbation(self) -> int:
        return self.seed("perturbation")
