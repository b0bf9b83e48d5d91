import csv
from dataclasses import replace

import numpy as np
import pytest

from conftest import DESK_REC
from rapi.harness import ScenarioConfig, apply_robustness_strategy, evaluate, render_table, run_scenario, sweep
import rapi.harness as harness
from rapi.surrogate import RecListSet


def test_evaluate_perfect_and_constant():
    m = evaluate([0, 1, 1, 0], [0, 1, 1, 0], ("a", "b"))
    assert m["accuracy"] == 1.0 and m["macro_f1"] == 1.0
    c = evaluate([0, 0, 0, 0], [0, 1, 0, 1], ("a", "b"))
    assert c["accuracy"] == 0.5
    # class a: p=0.5, r=1 -> f1=2/3; class b never predicted -> 0
    assert c["macro_f1"] == pytest.approx(1 / 3)
    assert c["precision"] == [0.5, 0.0] and c["recall"] == [1.0, 0.0]


def test_evaluate_single_class_truth():
    m = evaluate([1, 1, 1], [1, 1, 1], ("a", "b"))
    assert m["accuracy"] == 1.0 and m["macro_f1"] == 0.5 and m["single_class_truth"]


def test_evaluate_dicts_and_mismatch():
    assert evaluate({"u": 1, "v": 0}, {"v": 0, "u": 1}, ("a", "b"))["accuracy"] == 1.0
    with pytest.raises(ValueError, match="different users"):
        evaluate({"u": 1}, {"v": 0}, ("a", "b"))
    with pytest.raises(ValueError):
        evaluate([0, 1], [0], ("a", "b"))


def category_lists(rng, K=4, n_items=40, n_users=30):
    cats = [f"c{i % 4}" for i in range(n_items)]  # 10 items per category >= 2K
    lists = RecListSet(K, np.arange(n_users), np.array([rng.permutation(n_items)[:K] for _ in range(n_users)]))
    return lists, cats


def test_perturbation_identity_at_zero(rng):
    lists, cats = category_lists(rng)
    out, unchanged = apply_robustness_strategy(lists, cats, 0.0, seed=1)
    assert np.array_equal(out.items, lists.items) and unchanged == 0


@pytest.mark.parametrize("seed", range(5))
def test_perturbation_full_replacement(seed):
    rng = np.random.default_rng(seed)
    lists, cats = category_lists(rng)
    out, unchanged = apply_robustness_strategy(lists, cats, 1.0, seed=seed)
    assert unchanged == 0
    assert np.all(out.items != lists.items)
    for a, b in zip(lists.items, out.items):
        assert [cats[i] for i in a] == [cats[i] for i in b]
        assert len(set(b)) == len(b)


def test_perturbation_counts_missing_replacements():
    lists = RecListSet(2, np.array([0]), np.array([[0, 1]]))
    out, unchanged = apply_robustness_strategy(lists, ["x", "y", None], 1.0, seed=0)
    assert unchanged == 2 and np.array_equal(out.items, lists.items)
    with pytest.raises(ValueError):
        apply_robustness_strategy(lists, ["x", "y"], 1.5)


def test_perturbation_replaces_floor_fraction(rng):
    lists, cats = category_lists(rng, K=10)
    out, _ = apply_robustness_strategy(lists, cats, 0.25, seed=3)
    assert np.all((out.items != lists.items).sum(axis=1) == 2)


def test_config_validation():
    with pytest.raises(ValueError, match="alpha > 0"):
        ScenarioConfig(4, "cluster", alpha=0.0)
    with pytest.raises(ValueError, match="K <= K2"):
        ScenarioConfig(1, "cluster", K=20, K2=10)
    with pytest.raises(ValueError, match="scenario"):
        ScenarioConfig(5, "cluster")
    with pytest.raises(ValueError, match="not available"):
        ScenarioConfig(1, "cluster", method="RAPI")
    assert ScenarioConfig(3, "cluster").method == "RAPI"
    assert ScenarioConfig(2, "cluster").method == "MLP"


def test_unknown_attribute(planted_ds):
    with pytest.raises(KeyError, match="gender"):
        run_scenario(planted_ds, ScenarioConfig(1, "gender"))


def fast(scenario, **kw):
    return ScenarioConfig(scenario, "cluster", rec=DESK_REC, trials=1, **kw)


@pytest.mark.parametrize("scenario,method", [(1, "DT"), (2, "KNN"), (3, "RAPI-Static"), (4, "RAPI-Sum")])
def test_run_scenario_report(planted_ds, scenario, method):
    cfg = fast(scenario, method=method, alpha=0.5 if scenario == 4 else 0.0)
    rep = run_scenario(planted_ds, cfg)
    assert 0.0 <= rep.accuracy <= 1.0 and 0.0 <= rep.macro_f1 <= 1.0
    assert rep.accuracy >= 0.8
    assert len(rep.per_seed) == 1 and rep.per_seed[0]["n_eval"] == 250
    assert rep.config["scenario"] == scenario and rep.method == method
    if scenario == 4:
        assert rep.surrogate and rep.surrogate[0].chosen in ("MF", "NeuMF", "NGCF")
    if scenario == 3:
        assert rep.alignment_res and any("co-occurrence" in n for n in rep.notes)
    assert '"scenario"' in rep.to_json()


def test_evaluation_never_sees_attribute_providers(planted_ds, monkeypatch):
    seen = {}
    real = harness.evaluate

    def spy(pred, truth, label_set):
        seen["n"] = len(truth)
        return real(pred, truth, label_set)

    monkeypatch.setattr(harness, "evaluate", spy)
    run_scenario(planted_ds, fast(1, beta=0.3))
    assert seen["n"] == 500 - 150


def test_sweep_cardinality_and_files(planted_ds, tmp_path):
    rows = sweep(planted_ds, fast(2), [0.1, 0.9], [0.1, 0.9], out_dir=tmp_path, dataset_name="planted")
    assert len(rows) == 4
    with open(tmp_path / "results.csv") as fh:
        got = list(csv.DictReader(fh))
    assert [(r["alpha"], r["beta"]) for r in got] == [("0.1", "0.1"), ("0.1", "0.9"), ("0.9", "0.1"), ("0.9", "0.9")]
    assert "runtime_s" in (tmp_path / "runtime.csv").read_text().splitlines()[0]
    table = render_table(tmp_path / "aggregated.csv")
    assert "acc(beta=0.1)" in table and "planted" in table


def test_sweep_resume_is_identical(planted_ds, tmp_path, monkeypatch):
    base = fast(2, method="KNN")
    full = tmp_path / "full"
    sweep(planted_ds, base, [0.0], [0.1, 0.5, 0.9], methods=["KNN", "DT"], out_dir=full)

    part = tmp_path / "part"
    real = harness._cell_rows
    calls = {"n": 0}

    def dying(args):
        calls["n"] += 1
        if calls["n"] == 4:
            raise KeyboardInterrupt
        return real(args)

    monkeypatch.setattr(harness, "_cell_rows", dying)
    with pytest.raises(KeyboardInterrupt):
        sweep(planted_ds, base, [0.0], [0.1, 0.5, 0.9], methods=["KNN", "DT"], out_dir=part)
    with open(part / "results.csv", "a") as fh:
        fh.write("dataset,2,KNN,clus")  # torn final line
    monkeypatch.setattr(harness, "_cell_rows", real)
    sweep(planted_ds, base, [0.0], [0.1, 0.5, 0.9], methods=["KNN", "DT"], out_dir=part)
    for name in ("results.csv", "aggregated.csv"):
        assert (full / name).read_bytes() == (part / name).read_bytes()


def test_sweep_records_failed_cells(planted_ds, tmp_path, monkeypatch):
    real = harness._cell_rows

    def flaky(args):
        if args[1].beta == 0.5:
            raise RuntimeError("boom")
        return real(args)

    monkeypatch.setattr(harness, "_cell_rows", flaky)
    rows = sweep(planted_ds, fast(1, method="KNN"), [0.0], [0.1, 0.5], out_dir=tmp_path)
    assert len(rows) == 1
    assert "boom" in (tmp_path / "failed.csv").read_text()


def test_sweep_order_independent(planted_ds):
    a = sweep(planted_ds, fast(2, method="DT"), [0.0], [0.2, 0.7])
    b = sweep(planted_ds, fast(2, method="DT"), [0.0], [0.7, 0.2])
    assert sorted(map(str, a)) == sorted(map(str, b))


def test_parallel_sweep_matches_serial(planted_ds, tmp_path):
    base = fast(1, method="KNN")
    sweep(planted_ds, base, [0.0], [0.1, 0.5, 0.9], out_dir=tmp_path / "serial")
    sweep(planted_ds, base, [0.0], [0.1, 0.5, 0.9], out_dir=tmp_path / "par", workers=2)
    assert (tmp_path / "serial" / "results.csv").read_bytes() == (tmp_path / "par" / "results.csv").read_bytes()
