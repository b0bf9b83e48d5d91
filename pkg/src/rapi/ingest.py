"""Readers and writers for interaction, attribute, metadata and embedding files,
plus a title-hashing embedder and the planted-cluster synthetic generator."""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Iterable, Mapping

import numpy as np

from .core import Attribute, Dataset

__all__ = [
    "ParseError",
    "EmbeddingTable",
    "SyntheticSpec",
    "Planted",
    "parse_interactions",
    "read_interaction_records",
    "parse_attributes",
    "parse_item_meta",
    "load_dataset",
    "load_embedding_table",
    "write_embedding_table",
    "hash_embed_titles",
    "generate_synthetic",
    "filter_rare_items",
    "write_dataset",
]

INTERACTION_FORMATS = ("delimited", "movielens_dat")


class ParseError(ValueError):
    """Malformed input file; the message carries ``path:line``."""


def parse_id(token: str):
    token = token.strip()
    if token.isdigit():
        return int(token)
    return token


def _lines(path, encoding="utf-8"):
    with open(path, encoding=encoding) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if line.strip():
                yield lineno, line


# --------------------------------------------------------------------------
# interactions / attributes / metadata


def read_interaction_records(path, fmt: str = "delimited", sep: str = "\t", encoding: str = "utf-8") -> list[tuple]:
    if fmt not in INTERACTION_FORMATS:
        raise ValueError(f"unknown interaction format {fmt!r} (expected one of {INTERACTION_FORMATS})")
    if fmt == "movielens_dat":
        sep = "::"
    records = []
    for lineno, line in _lines(path, encoding):
        fields = line.split(sep)
        if len(fields) < 2 or len(fields) > 4 or not fields[0].strip() or not fields[1].strip():
            raise ParseError(f"{path}:{lineno}: expected user{sep}item[{sep}weight[{sep}timestamp]], got {line!r}")
        try:
            weight = float(fields[2]) if len(fields) > 2 else 1.0
            ts = int(fields[3]) if len(fields) > 3 else 0
        except ValueError:
            raise ParseError(f"{path}:{lineno}: bad weight/timestamp in {line!r}") from None
        if not math.isfinite(weight) or weight < 0:
            raise ParseError(f"{path}:{lineno}: weight must be finite and nonnegative, got {fields[2]!r}")
        records.append((parse_id(fields[0]), parse_id(fields[1]), weight, ts))
    return records


def parse_interactions(path, fmt: str = "delimited", sep: str = "\t", encoding: str = "utf-8") -> Dataset:
    """Parse an interaction file into a dataset with no attributes or metadata.

    Duplicate (user, item) rows collapse to one interaction keeping the max weight.
    """
    return Dataset.from_records(read_interaction_records(path, fmt, sep, encoding))


_ML_USER_FIELDS = ("gender", "age", "occupation")


def parse_attributes(path, fmt: str = "tsv", encoding: str = "utf-8") -> dict[str, Attribute]:
    """Read ``user<TAB>attribute<TAB>value`` rows (or MovieLens ``users.dat``)."""
    raw: dict[str, dict] = {}
    origin: dict[tuple, int] = {}

    def put(lineno, user, name, value):
        table = raw.setdefault(name, {})
        if user in table and table[user] != value:
            raise ParseError(
                f"{path}:{lineno}: conflicting {name!r} labels for user {user!r}: "
                f"{table[user]!r} (line {origin[(user, name)]}) vs {value!r}"
            )
        table[user] = value
        origin.setdefault((user, name), lineno)

    for lineno, line in _lines(path, encoding):
        if fmt == "tsv":
            fields = line.split("\t")
            if len(fields) != 3 or not all(f.strip() for f in fields):
                raise ParseError(f"{path}:{lineno}: expected user<TAB>attribute<TAB>value, got {line!r}")
            put(lineno, parse_id(fields[0]), fields[1].strip(), fields[2].strip())
        elif fmt == "movielens_users":
            fields = line.split("::")
            if len(fields) < 4:
                raise ParseError(f"{path}:{lineno}: expected UserID::Gender::Age::Occupation::Zip, got {line!r}")
            user = parse_id(fields[0])
            for name, value in zip(_ML_USER_FIELDS, fields[1:4]):
                put(lineno, user, name, value.strip())
        else:
            raise ValueError(f"unknown attribute format {fmt!r}")
    return {name: Attribute.from_labels(name, values) for name, values in sorted(raw.items())}


def parse_item_meta(path, fmt: str = "tsv", encoding: str | None = None) -> dict[Hashable, tuple[str, str]]:
    """Read ``item<TAB>title<TAB>category`` rows (or MovieLens ``movies.dat``)."""
    meta = {}
    if encoding is None:
        encoding = "latin-1" if fmt == "movielens_movies" else "utf-8"
    for lineno, line in _lines(path, encoding):
        if fmt == "tsv":
            fields = line.split("\t")
            if len(fields) != 3:
                raise ParseError(f"{path}:{lineno}: expected item<TAB>title<TAB>category, got {line!r}")
            item, title, category = fields
        elif fmt == "movielens_movies":
            fields = line.split("::")
            if len(fields) != 3:
                raise ParseError(f"{path}:{lineno}: expected MovieID::Title::Genres, got {line!r}")
            item, title, genres = fields
            category = genres.split("|")[0]
        else:
            raise ValueError(f"unknown item metadata format {fmt!r}")
        meta[parse_id(item)] = (title.strip(), category.strip())
    return meta


def load_dataset(
    interactions,
    attributes=None,
    items=None,
    fmt: str = "delimited",
    sep: str = "\t",
    attributes_fmt: str = "tsv",
    items_fmt: str = "tsv",
) -> Dataset:
    records = read_interaction_records(interactions, fmt, sep)
    attrs = parse_attributes(attributes, attributes_fmt) if attributes else {}
    meta = parse_item_meta(items, items_fmt) if items else {}
    return Dataset.from_records(records, attrs, meta)


def write_dataset(dataset: Dataset, directory) -> None:
    """Persist a dataset as the three tab-delimited interface files."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "interactions.tsv", "w", encoding="utf-8") as fh:
        for u, i, w, ts in zip(dataset.user_idx, dataset.item_idx, dataset.weight, dataset.timestamp):
            fh.write(f"{dataset.users[u]}\t{dataset.items[i]}\t{float(w)!r}\t{int(ts)}\n")
    with open(d / "attributes.tsv", "w", encoding="utf-8") as fh:
        for name, attr in sorted(dataset.attributes.items()):
            for user in dataset.users:
                if user in attr.values:
                    fh.write(f"{user}\t{name}\t{attr.labels[attr.values[user]]}\n")
    with open(d / "items.tsv", "w", encoding="utf-8") as fh:
        for item in dataset.items:
            if item in dataset.item_meta:
                title, category = dataset.item_meta[item]
                fh.write(f"{item}\t{title}\t{category}\n")


def filter_rare_items(dataset: Dataset, threshold: int = 1) -> Dataset:
    """Drop items whose total interaction count is <= ``threshold``."""
    counts = np.bincount(dataset.item_idx, minlength=dataset.n_items)
    keep_item = counts > threshold
    keep = keep_item[dataset.item_idx]
    items = [i for i, k in zip(dataset.items, keep_item) if k]
    records = (
        (dataset.users[u], dataset.items[i], w, ts)
        for u, i, w, ts in zip(
            dataset.user_idx[keep], dataset.item_idx[keep], dataset.weight[keep], dataset.timestamp[keep]
        )
    )
    meta = {i: m for i, m in dataset.item_meta.items() if i in set(items)}
    return Dataset.from_records(records, dataset.attributes, meta, users=dataset.users, items=items)


# --------------------------------------------------------------------------
# embedding tables


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    """Dense vectors keyed by id; row ``k`` of ``vectors`` belongs to ``ids[k]``."""

    ids: tuple
    vectors: np.ndarray

    def __post_init__(self):
        v = self.vectors
        if v.ndim != 2 or v.shape[1] < 1:
            raise ValueError(f"embedding matrix must be (count, dim>=1), got shape {v.shape}")
        if len(self.ids) != v.shape[0]:
            raise ValueError(f"{len(self.ids)} ids for {v.shape[0]} vectors")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate id in embedding table")
        if not np.all(np.isfinite(v)):
            raise ValueError("embedding table contains non-finite values")

    @classmethod
    def from_matrix(cls, matrix, ids=None) -> "EmbeddingTable":
        m = np.array(matrix, dtype=np.float64, ndmin=2, copy=True)
        m.setflags(write=False)
        return cls(tuple(range(len(m))) if ids is None else tuple(ids), m)

    @classmethod
    def empty(cls, dim: int) -> "EmbeddingTable":
        return cls.from_matrix(np.zeros((0, dim)), ())

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.ids)

    def __contains__(self, key):
        return key in self.index()

    def __getitem__(self, key) -> np.ndarray:
        try:
            return self.vectors[self.index()[key]]
        except KeyError:
            raise KeyError(f"no embedding for id {key!r}") from None

    def index(self) -> dict:
        idx = self.__dict__.get("_index")
        if idx is None:
            idx = {k: n for n, k in enumerate(self.ids)}
            object.__setattr__(self, "_index", idx)
        return idx

    def rows(self, keys: Iterable) -> np.ndarray:
        idx = self.index()
        try:
            return self.vectors[[idx[k] for k in keys]]
        except KeyError as exc:
            raise KeyError(f"no embedding for id {exc.args[0]!r}") from None

    def subset(self, keys: Iterable) -> "EmbeddingTable":
        keys = tuple(keys)
        return EmbeddingTable.from_matrix(self.rows(keys).reshape(len(keys), self.dim), keys)


def write_embedding_table(table: EmbeddingTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(table)} {table.dim}\n")
        for key, vec in zip(table.ids, table.vectors):
            fh.write(f"{key} " + " ".join(repr(float(x)) for x in vec) + "\n")


def load_embedding_table(path) -> EmbeddingTable:
    it = _lines(path)
    try:
        lineno, header = next(it)
    except StopIteration:
        raise ParseError(f"{path}: empty embedding file (missing 'count dim' header)") from None
    try:
        count, dim = (int(x) for x in header.split())
    except ValueError:
        raise ParseError(f"{path}:{lineno}: header must be 'count dim', got {header!r}") from None
    if count < 0 or dim < 1:
        raise ParseError(f"{path}:{lineno}: invalid header {header!r}")
    ids, rows, seen = [], [], set()
    for lineno, line in it:
        fields = line.split()
        if len(fields) != dim + 1:
            raise ParseError(f"{path}:{lineno}: row has {len(fields) - 1} values, expected {dim}")
        key = parse_id(fields[0])
        if key in seen:
            raise ParseError(f"{path}:{lineno}: duplicate item id {key!r}")
        try:
            vec = [float(x) for x in fields[1:]]
        except ValueError:
            raise ParseError(f"{path}:{lineno}: non-numeric value in row") from None
        if not all(math.isfinite(x) for x in vec):
            raise ParseError(f"{path}:{lineno}: non-finite value in row")
        seen.add(key)
        ids.append(key)
        rows.append(vec)
    if len(rows) != count:
        raise ParseError(f"{path}: header promises {count} rows, found {len(rows)}")
    return EmbeddingTable.from_matrix(np.array(rows, dtype=np.float64).reshape(count, dim), ids)


def _trigram_bucket(gram: str, dim: int, key: bytes) -> int:
    digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8, key=key).digest()
    return int.from_bytes(digest, "little") % dim


def hash_embed_titles(
    item_meta: Mapping[Hashable, tuple[str, str]], dim: int = 768, seed: int = 0, items: Iterable | None = None
) -> EmbeddingTable:
    """Deterministic stand-in for a sentence encoder.

    Each lowercased title (padded with one space on both sides) contributes a
    one-hot count per character 3-gram at a seeded hash bucket; the summed
    vector is L2-normalised. Items listed in ``items`` but absent from
    ``item_meta`` are treated as having an empty title.
    """
    if dim < 8:
        raise ValueError(f"dim must be >= 8, got {dim}")
    keys = tuple(items) if items is not None else tuple(item_meta)
    key = int(seed).to_bytes(8, "little", signed=False)
    out = np.zeros((len(keys), dim))
    cache: dict[str, int] = {}
    for row, item in enumerate(keys):
        title = item_meta.get(item, ("", ""))[0].strip().lower()
        if not title:
            warnings.warn(f"item {item!r} has an empty title; using a zero embedding", stacklevel=2)
            continue
        padded = f" {title} "
        for k in range(len(padded) - 2):
            gram = padded[k : k + 3]
            b = cache.get(gram)
            if b is None:
                b = cache[gram] = _trigram_bucket(gram, dim, key)
            out[row, b] += 1.0
        out[row] /= np.linalg.norm(out[row])
    return EmbeddingTable.from_matrix(out, keys)


# --------------------------------------------------------------------------
# planted synthetic data

_CLUSTER_WORDS = (
    "amber", "cobalt", "crimson", "emerald", "indigo", "saffron", "silver", "umber",
    "violet", "teal", "ochre", "scarlet", "ivory", "jade", "onyx", "coral",
)  # fmt: skip


def cluster_word(c: int) -> str:
    base = _CLUSTER_WORDS[c % len(_CLUSTER_WORDS)]
    return base if c < len(_CLUSTER_WORDS) else f"{base}{c // len(_CLUSTER_WORDS)}"


@dataclass(frozen=True)
class SyntheticSpec:
    """Planted-cluster generator settings.

    Within its cluster a user picks items with Zipf-like popularity of
    exponent ``popularity_skew`` (0 gives uniform); out-of-cluster picks are
    uniform. ``label_noise`` flips a user's label to another cluster.
    """

    n_users: int = 500
    n_items: int = 200
    n_clusters: int = 2
    attribute_name: str = "cluster"
    cluster_affinity: float = 0.9
    interactions_per_user: int = 30
    popularity_skew: float = 1.0
    label_noise: float = 0.0

    def __post_init__(self):
        for name in ("n_users", "n_items", "n_clusters", "interactions_per_user"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not (1.0 / self.n_clusters < self.cluster_affinity <= 1.0):
            raise ValueError(f"cluster_affinity must lie in (1/n_clusters, 1], got {self.cluster_affinity}")
        if not 0.0 <= self.label_noise < 1.0:
            raise ValueError("label_noise must lie in [0, 1)")


@dataclass(frozen=True, eq=False)
class Planted:
    dataset: Dataset
    user_cluster: np.ndarray
    item_cluster: np.ndarray


def generate_synthetic(spec: SyntheticSpec, seed: int = 0) -> Planted:
    """Users and items split into clusters; a user's label is its cluster id."""
    if spec.n_items < spec.n_clusters:
        raise ValueError(f"n_items ({spec.n_items}) must be >= n_clusters ({spec.n_clusters})")
    rng = np.random.default_rng(seed)
    c = spec.n_clusters
    user_cluster = rng.permutation(np.arange(spec.n_users) % c)
    item_cluster = np.arange(spec.n_items) % c
    members = [np.flatnonzero(item_cluster == k) for k in range(c)]
    outsiders = [np.flatnonzero(item_cluster != k) for k in range(c)]
    popularity = []
    for k in range(c):
        rank = rng.permutation(len(members[k]))
        w = 1.0 / (rank + 1.0) ** spec.popularity_skew
        popularity.append(w / w.sum())

    records = []
    ipu = spec.interactions_per_user
    for u in range(spec.n_users):
        k = user_cluster[u]
        n_in = min(rng.binomial(ipu, spec.cluster_affinity), len(members[k]))
        n_out = min(ipu - n_in, len(outsiders[k]))
        picked = list(rng.choice(members[k], size=n_in, replace=False, p=popularity[k]))
        if n_out:
            picked += list(rng.choice(outsiders[k], size=n_out, replace=False))
        for t, item in enumerate(picked):
            records.append((u, int(item), 1.0, u * ipu + t))

    labels = user_cluster.copy()
    if spec.label_noise > 0 and c > 1:
        flip = rng.random(spec.n_users) < spec.label_noise
        shift = rng.integers(1, c, size=spec.n_users)
        labels = np.where(flip, (labels + shift) % c, labels)
    attr = Attribute(spec.attribute_name, tuple(str(k) for k in range(c)), {u: int(labels[u]) for u in range(spec.n_users)})
    meta = {j: (f"{cluster_word(item_cluster[j])} tale {j}", cluster_word(item_cluster[j])) for j in range(spec.n_items)}
    ds = Dataset.from_records(
        records, {spec.attribute_name: attr}, meta, users=range(spec.n_users), items=range(spec.n_items)
    )
    return Planted(ds, user_cluster, item_cluster)
