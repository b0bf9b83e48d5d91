import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import fd_check
from rapi.classify import (
    MLP,
    ClassifierConfig,
    MLPConfig,
    adaptive_loss_and_grad,
    aggregate,
    aggregate_batch,
    compute_weights,
    featurize_scenario1,
    knn_predict,
    multi_hot,
    predict_attribute,
    train_adaptive,
    train_classifier,
)


def test_multi_hot():
    assert featurize_scenario1([0, 2], 4).tolist() == [1, 0, 1, 0]
    assert featurize_scenario1([], 3).tolist() == [0, 0, 0]
    assert featurize_scenario1([5, 1, 3], 8).sum() == 3
    assert multi_hot(np.array([[0, 2], [1, 3]]), 4).tolist() == [[1, 0, 1, 0], [0, 1, 0, 1]]
    with pytest.raises(ValueError):
        featurize_scenario1([4], 4)


def test_weights_examples():
    E = np.array([[1.0, 2.0]] * 4)
    assert np.allclose(compute_weights([0, 1, 2, 3], E, np.array([0.3, -1.0])), 0.25)
    E2 = np.array([[np.log(2)], [0.0]])
    assert np.allclose(compute_weights([0, 1], E2, np.array([1.0])), [2 / 3, 1 / 3])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32), st.floats(-50, 50))
def test_weights_shift_invariant_and_normalised(seed, shift):
    rng = np.random.default_rng(seed)
    E = rng.normal(size=(10, 4)) * 5
    W = rng.normal(size=4)
    lst = rng.permutation(10)[:6]
    w = compute_weights(lst, E, W, 0.0)
    assert abs(w.sum() - 1.0) < 1e-6
    assert np.allclose(w, compute_weights(lst, E, W, shift), atol=1e-12)


def test_aggregate_examples():
    E = np.array([[1.0, 1.0], [3.0, 3.0]])
    assert aggregate([0, 1], E, "Sum").tolist() == [2.0, 2.0]
    E = np.array([[2.0, 0.0], [0.0, 4.0]])
    assert aggregate([0, 1], E, "Static").tolist() == [1.0, 1.0]
    same = np.array([[0.5, -1.0]] * 3)
    assert np.allclose(aggregate([0, 1, 2], same, "Dynamic", np.array([2.0, 1.0])), aggregate([0, 1, 2], same, "Sum"))
    with pytest.raises(ValueError):
        aggregate([0], E, "Max")


def blobs(rng, n=200, d=5, gap=4.0):
    y = np.arange(n) % 2
    X = rng.normal(size=(n, d)) + gap * y[:, None]
    return X, y


def test_mlp_separable_blobs(rng):
    X, y = blobs(rng)
    clf = train_classifier(X, y, "MLP", ClassifierConfig(mlp=MLPConfig(hidden=(16,))))
    assert np.mean(clf.predict(X) == y) >= 0.98


def test_knn_self_and_majority(rng):
    X, y = blobs(rng, gap=0.5)
    clf = train_classifier(X, y, "KNN", ClassifierConfig(knn_k=1))
    assert np.mean(clf.predict(X) == y) == 1.0
    label, nb = knn_predict(clf, X[7])
    assert label == y[7] and nb[0] == 7
    maj = train_classifier(np.array([[0.0], [0.1], [0.2], [5.0]]), [0, 0, 1, 1], "KNN", ClassifierConfig(knn_k=3))
    assert knn_predict(maj, np.array([0.05]))[0] == 0


def test_knn_matches_brute_force(rng):
    X = rng.normal(size=(80, 4))
    y = rng.integers(0, 3, 80)
    clf = train_classifier(X, y, "KNN", ClassifierConfig(knn_k=5), n_classes=3)
    for q in rng.normal(size=(50, 4)):
        d = [(float(np.sqrt(np.sum((q - x) ** 2))), k) for k, x in enumerate(X)]
        nb = [k for _, k in sorted(d)[:5]]
        votes = np.bincount(y[nb], minlength=3)
        label, got = knn_predict(clf, q)
        assert got.tolist() == nb and label == int(np.argmax(votes))


def test_tree_depth_one():
    X = np.array([[0, 5.0], [0, 2.0], [1, 3.0], [1, 9.0]] * 5)
    y = X[:, 0].astype(int)
    clf = train_classifier(X, y, "DT")
    assert clf.depth == 1 and np.mean(clf.predict(X) == y) == 1.0


def test_classifier_errors(rng):
    with pytest.raises(ValueError, match="single class"):
        train_classifier(rng.normal(size=(4, 2)), [1, 1, 1, 1])
    with pytest.raises(ValueError, match="unknown classifier"):
        train_classifier(rng.normal(size=(4, 2)), [0, 1, 0, 1], "SVM")
    with pytest.raises(ValueError, match="feature rows"):
        train_classifier(rng.normal(size=(3, 2)), [0, 1, 0, 1], "KNN")


@pytest.mark.parametrize("mode", ["Dynamic", "Static", "Sum"])
def test_adaptive_gradient_three_item_toy(mode, rng):
    head = MLP((4, 6, 3), rng)
    params = dict(head.params, W_a=rng.normal(size=4), b_a=np.array([0.3]))
    X = rng.normal(size=(5, 3, 4))
    y = rng.integers(0, 3, 5)
    _, grads = adaptive_loss_and_grad(params, head, X, y, mode)
    if mode != "Dynamic":
        grads = {k: v for k, v in grads.items() if k not in ("W_a", "b_a")}
    err = fd_check(lambda p: adaptive_loss_and_grad(p, head, X, y, mode)[0], params, grads, rng)
    assert err < 1e-4


def test_frozen_weights_reproduce_sum_mlp(rng):
    E = rng.normal(size=(40, 6))
    lists = np.array([rng.permutation(40)[:8] for _ in range(120)])
    y = (E[lists].mean(axis=1)[:, 0] > 0).astype(int)
    cfg = MLPConfig(hidden=(12,), max_epochs=30, seed=11)
    ada = train_adaptive(lists, E, y, cfg, mode="Dynamic", freeze_weights=True)
    feats = aggregate_batch(E[lists], "Sum")
    mlp = train_classifier(feats, y, "MLP", ClassifierConfig(mlp=cfg, seed=11))
    assert np.array_equal(ada.predict(lists, E), mlp.predict(feats))
    assert np.array_equal(ada.predict_proba(lists, E), mlp.predict_proba(feats))


def planted_lists(rng, n_users=300, n_items=60, K=10, purity=1.0):
    item_cluster = np.arange(n_items) % 2
    E = rng.normal(size=(n_items, 8)) + 1.5 * item_cluster[:, None]
    y = rng.integers(0, 2, n_users)
    lists = []
    for c in y:
        own = np.flatnonzero(item_cluster == c)
        lists.append(rng.permutation(own)[:K])
    return np.array(lists), E, y


def test_adaptive_planted_heldout(rng):
    lists, E, y = planted_lists(rng)
    clf = train_adaptive(lists[:200], E, y[:200])
    pred = clf.predict(lists[200:], E)
    assert np.mean(pred == y[200:]) >= 0.9
    for c in (0, 1):
        assert np.mean(pred[y[200:] == c] == c) >= 0.85


def test_predict_attribute_probabilities(rng):
    lists, E, y = planted_lists(rng, n_users=80)
    clf = train_adaptive(lists, E, y, MLPConfig(hidden=(8,), max_epochs=5))
    for _ in range(20):
        lst = rng.permutation(len(E))[:10]
        label, probs = predict_attribute(clf, lst, E)
        assert abs(probs.sum() - 1.0) < 1e-6 and label == int(np.argmax(probs))
        # Dynamic weights depend on embeddings only, so order does not matter
        label2, probs2 = predict_attribute(clf, rng.permutation(lst), E)
        assert label2 == label and np.allclose(probs, probs2)
