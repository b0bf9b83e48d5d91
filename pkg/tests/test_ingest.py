import string
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rapi.core import Dataset
from rapi.ingest import (
    EmbeddingTable,
    ParseError,
    SyntheticSpec,
    filter_rare_items,
    generate_synthetic,
    hash_embed_titles,
    load_dataset,
    load_embedding_table,
    parse_attributes,
    parse_interactions,
    parse_item_meta,
    write_dataset,
    write_embedding_table,
)


def write(tmp_path, name, text, encoding="utf-8"):
    p = tmp_path / name
    p.write_text(text, encoding=encoding)
    return p


def test_movielens_row(tmp_path):
    ds = parse_interactions(write(tmp_path, "ratings.dat", "1::1193::5::978300760\n"), "movielens_dat")
    assert ds.users == (1,) and ds.items == (1193,)
    assert ds.weight.tolist() == [5.0] and ds.timestamp.tolist() == [978300760]


def test_empty_file(tmp_path):
    ds = parse_interactions(write(tmp_path, "x.tsv", ""))
    assert ds.n_interactions == 0 and ds.n_users == 0


def test_dedup_keeps_max(tmp_path):
    ds = parse_interactions(write(tmp_path, "x.tsv", "1\t2\t3\n1\t2\t5\n"))
    assert ds.n_interactions == 1 and ds.weight[0] == 5.0


def test_custom_separator_and_string_ids(tmp_path):
    ds = parse_interactions(write(tmp_path, "x.csv", "alice,song a\nbob,song b,2\n"), sep=",")
    assert ds.users == ("alice", "bob") and ds.items == ("song a", "song b")


@pytest.mark.parametrize("row", ["1", "1\t2\tabc", "1\t2\t-1", "1\t2\t3\t4\t5", "\t2"])
def test_malformed_row_reports_line(tmp_path, row):
    p = write(tmp_path, "x.tsv", f"1\t1\n{row}\n")
    with pytest.raises(ParseError, match=r"x\.tsv:2"):
        parse_interactions(p)


def test_unknown_format(tmp_path):
    with pytest.raises(ValueError, match="unknown interaction format"):
        parse_interactions(write(tmp_path, "x", "1\t2\n"), fmt="parquet")


def test_attributes(tmp_path):
    attrs = parse_attributes(write(tmp_path, "a.tsv", "7\tgender\tF\n8\tgender\tM\n"))
    g = attrs["gender"]
    assert g.labels[g.values[7]] == "F"


def test_attribute_cardinality(tmp_path):
    rows = "".join(f"{u}\toccupation\t{u % 21}\n" for u in range(100))
    assert len(parse_attributes(write(tmp_path, "a.tsv", rows))["occupation"].labels) == 21


def test_attribute_conflict_names_user(tmp_path):
    with pytest.raises(ParseError, match="user 7"):
        parse_attributes(write(tmp_path, "a.tsv", "7\tgender\tF\n7\tgender\tM\n"))


def test_movielens_users_and_movies(tmp_path):
    attrs = parse_attributes(write(tmp_path, "users.dat", "1::F::1::10::48067\n2::M::56::16::70072\n"), "movielens_users")
    assert set(attrs) == {"gender", "age", "occupation"}
    assert attrs["age"].labels == ("1", "56")
    meta = parse_item_meta(write(tmp_path, "movies.dat", "1::Toy Story (1995)::Animation|Children's\n", "latin-1"), "movielens_movies")
    assert meta[1] == ("Toy Story (1995)", "Animation")


def test_dataset_round_trip(tmp_path, planted_ds):
    write_dataset(planted_ds, tmp_path)
    back = load_dataset(tmp_path / "interactions.tsv", tmp_path / "attributes.tsv", tmp_path / "items.tsv")
    assert back.fingerprint() == planted_ds.fingerprint()


def test_filter_rare_items():
    ds = Dataset.from_records([(0, "a"), (1, "a"), (0, "b"), (2, "c"), (1, "c")])
    out = filter_rare_items(ds, threshold=1)
    assert out.items == ("a", "c") and out.n_interactions == 4


# --------------------------------------------------------------------------
# embedding tables


def test_load_embedding_table(tmp_path):
    t = load_embedding_table(write(tmp_path, "e.txt", "2 3\n5 1 2 3\n9 4 5 6\n"))
    assert len(t) == 2 and t.dim == 3
    assert t[9].tolist() == [4.0, 5.0, 6.0]


def test_dim_768_preserved(tmp_path):
    row = " ".join(["0.5"] * 768)
    t = load_embedding_table(write(tmp_path, "e.txt", f"1 768\n3 {row}\n"))
    assert t.dim == 768


@pytest.mark.parametrize(
    "text,msg",
    [
        ("2 3\n5 1 2 3\n9 4 5\n", r"e\.txt:3: row has 2 values, expected 3"),
        ("1 2\n5 1 nan\n", "non-finite"),
        ("2 2\n5 1 2\n5 3 4\n", "duplicate item id"),
        ("3 2\n5 1 2\n", "promises 3 rows"),
        ("", "missing 'count dim'"),
    ],
)
def test_embedding_errors(tmp_path, text, msg):
    with pytest.raises(ParseError, match=msg):
        load_embedding_table(write(tmp_path, "e.txt", text))


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=3, max_size=3), min_size=0, max_size=8)
)
def test_embedding_round_trip(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("emb") / "t.emb"
    t = EmbeddingTable.from_matrix(np.array(rows, dtype=float).reshape(len(rows), 3), [f"i{k}" for k in range(len(rows))])
    write_embedding_table(t, path)
    back = load_embedding_table(path)
    assert back.ids == t.ids
    assert np.array_equal(back.vectors, t.vectors)


def test_hash_embed_deterministic_and_normalised():
    meta = {1: ("The Matrix", "x"), 2: ("the matrix", "y"), 3: ("Alien", "z")}
    t = hash_embed_titles(meta, dim=64, seed=3)
    assert np.array_equal(t[1], t[2])  # lowercased
    assert not np.array_equal(t[1], t[3])
    assert np.allclose(np.linalg.norm(t.vectors, axis=1), 1.0, atol=1e-9)
    assert np.array_equal(t.vectors, hash_embed_titles(meta, dim=64, seed=3).vectors)
    assert not np.array_equal(t.vectors, hash_embed_titles(meta, dim=64, seed=4).vectors)


def test_hash_embed_no_collisions_on_random_titles():
    rng = np.random.default_rng(0)
    letters = np.array(list(string.ascii_lowercase))
    titles = {k: ("".join(rng.choice(letters, size=rng.integers(3, 20))), "") for k in range(100)}
    t = hash_embed_titles(titles, dim=256, seed=0)
    distinct_titles = len({v[0] for v in titles.values()})
    assert len({row.tobytes() for row in t.vectors}) == distinct_titles


def test_hash_embed_empty_title_warns():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        t = hash_embed_titles({1: ("", "")}, dim=16)
    assert caught and not t[1].any()
    with pytest.raises(ValueError):
        hash_embed_titles({}, dim=4)


@settings(max_examples=50, deadline=None)
@given(st.text(min_size=1, max_size=30).filter(lambda s: s.strip()), st.integers(0, 2**32))
def test_hash_embed_unit_norm(title, seed):
    v = hash_embed_titles({0: (title, "")}, dim=32, seed=seed)[0]
    assert abs(np.linalg.norm(v) - 1.0) < 1e-9


# --------------------------------------------------------------------------
# planted data


def in_cluster_rate(p):
    ds = p.dataset
    return float(np.mean(p.user_cluster[ds.user_idx] == p.item_cluster[ds.item_idx]))


def test_synthetic_affinity_one():
    p = generate_synthetic(SyntheticSpec(n_users=60, n_items=40, cluster_affinity=1.0, interactions_per_user=10), seed=1)
    assert in_cluster_rate(p) == 1.0


def test_synthetic_in_cluster_rate(planted):
    rate = in_cluster_rate(planted)
    assert 0.87 <= rate <= 0.93
    ds = planted.dataset
    assert (ds.n_users, ds.n_items, ds.n_interactions) == (500, 200, 500 * 30)
    assert np.array_equal(ds.labels("cluster"), planted.user_cluster)


def test_synthetic_determinism(planted_ds):
    assert generate_synthetic(SyntheticSpec(), seed=0).dataset.fingerprint() == planted_ds.fingerprint()
    assert generate_synthetic(SyntheticSpec(), seed=1).dataset.fingerprint() != planted_ds.fingerprint()


def test_synthetic_label_noise():
    p = generate_synthetic(SyntheticSpec(label_noise=0.1), seed=0)
    flipped = np.mean(p.dataset.labels("cluster") != p.user_cluster)
    assert 0.05 < flipped < 0.15


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(cluster_affinity=0.5)
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticSpec(n_items=1), seed=0)
